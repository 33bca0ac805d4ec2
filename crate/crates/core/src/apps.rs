//! Application metrics on top of the event stream: entanglement-based QKD
//! error rates, clock-synchronization precision, and their shadows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belltest::{mean_std, BellTestConfig, BellTestResult};
use crate::channel::{link_efficiency, Direction};
use crate::error::{Error, Result};
use crate::geodyn::{link_geometry, propagate, GroundStation, LinkGeometry, OrbitSpec};
use crate::photonsim::{
    CoincidenceRecord, MeasurementBases, Provenance, RoundKind, RoundPlan, RunTally,
};
use crate::shadows::{
    add_count_aux, double_link_tallies, footprint_at, require_visible, single_link_tallies,
    station, GeoGrid, ShadowCell, ShadowMap, SimSetup, Status,
};

/// Speed of light [m/s].
pub const C: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QkdConfig {
    /// [rad]
    pub key_basis_alice: [f64; 2],
    /// [rad]
    pub key_basis_bob: [f64; 2],
    pub qber_threshold: f64,
    /// Share of coincidences measured in key settings.
    pub key_fraction: f64,
}

impl Default for QkdConfig {
    fn default() -> Self {
        let k = MeasurementBases::key();
        QkdConfig {
            key_basis_alice: k.alice,
            key_basis_bob: k.bob,
            qber_threshold: 0.11,
            key_fraction: 0.5,
        }
    }
}

impl QkdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.qber_threshold > 0.0 && self.qber_threshold < 0.5) {
            return Err(Error::invalid("qkd.qber_threshold", "must lie in (0, 0.5)"));
        }
        if !(self.key_fraction > 0.0 && self.key_fraction < 1.0) {
            return Err(Error::invalid("qkd.key_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn plan(&self, bell: MeasurementBases) -> RoundPlan {
        RoundPlan::with_key(
            bell,
            MeasurementBases {
                alice: self.key_basis_alice,
                bob: self.key_basis_bob,
            },
            self.key_fraction,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QberResult {
    pub qber_mean: f64,
    pub qber_std: f64,
    /// Sifted rounds summed over all runs.
    pub sifted_count: u64,
    pub valid_runs: usize,
}

impl QberResult {
    /// `None` when no run has a sifted round.
    pub fn from_tallies(tallies: &[RunTally]) -> Option<Self> {
        let per_run: Vec<(f64, u64)> = tallies.iter().filter_map(qber_from_tally).collect();
        if per_run.is_empty() {
            return None;
        }
        let (mean, std, valid) = mean_std(per_run.iter().map(|x| x.0));
        Some(QberResult {
            qber_mean: mean,
            qber_std: std,
            sifted_count: per_run.iter().map(|x| x.1).sum(),
            valid_runs: valid,
        })
    }
}

/// Error rate and sifted count of the key rounds in `records`. A sifted
/// round has matching basis indices; the singlet makes matched outcomes
/// opposite, so equal outcomes are bit errors.
pub fn qber_from_records(records: &[CoincidenceRecord]) -> Option<(f64, u64)> {
    let mut sifted = 0u64;
    let mut errors = 0u64;
    for r in records {
        if r.kind == RoundKind::Key && r.alice_basis == r.bob_basis {
            sifted += 1;
            errors += (r.alice_outcome == r.bob_outcome) as u64;
        }
    }
    (sifted > 0).then(|| (errors as f64 / sifted as f64, sifted))
}

pub fn qber_from_tally(t: &RunTally) -> Option<(f64, u64)> {
    let mut sifted = 0u64;
    let mut errors = 0u64;
    for prov in [Provenance::Genuine, Provenance::Contaminated] {
        for b in 0..2 {
            for oa in 0..2 {
                for ob in 0..2 {
                    let c = t.counts[RunTally::index(RoundKind::Key, prov, b, b, oa, ob)];
                    sifted += c;
                    if oa == ob {
                        errors += c;
                    }
                }
            }
        }
    }
    (sifted > 0).then(|| (errors as f64 / sifted as f64, sifted))
}

fn qkd_setup(setup: &SimSetup, qkd: &QkdConfig) -> SimSetup {
    SimSetup {
        plan: qkd.plan(setup.plan.bell),
        ..*setup
    }
}

/// Double-downlink QKD between `fixed_gs` and every visible cell. A cell is
/// in the shadow when its mean QBER is below the threshold; the Bell
/// verdict from the same runs is kept in `s_mean`, `s_std` and the
/// `bell_verdict` aux entry.
pub fn qber_shadow(
    setup: &SimSetup,
    orbit: &OrbitSpec,
    fixed_gs: &GroundStation,
    grid: &GeoGrid,
    qkd: &QkdConfig,
    t: f64,
) -> Result<ShadowMap> {
    qkd.validate()?;
    let s = qkd_setup(setup, qkd);
    s.validate()?;
    orbit.validate()?;
    fixed_gs.validate()?;
    require_visible(&s, orbit, fixed_gs, t)?;
    let cells = grid.cells_in_cap(&footprint_at(orbit, &s.earth, t));
    let out: Result<Vec<ShadowCell>> = cells
        .par_iter()
        .map(|c| {
            let tallies = double_link_tallies(&s, orbit, fixed_gs, &station(c), c.index, t)?;
            let bell = BellTestResult::from_tallies(&tallies, &s.bell);
            let mut cell = ShadowCell::new(c, Status::VisibleNoViolation).with_bell(&bell);
            cell.aux.insert("bell_verdict".into(), bell.verdict as u8 as f64);
            let qber = QberResult::from_tallies(&tallies);
            let pass = match &qber {
                Some(q) if q.valid_runs >= s.bell.min_valid_runs => q.qber_mean < qkd.qber_threshold,
                _ => false,
            };
            if let Some(q) = qber {
                cell.aux.insert("qber_mean".into(), q.qber_mean);
                cell.aux.insert("qber_std".into(), q.qber_std);
            }
            cell.status = if pass {
                Status::Violation
            } else {
                Status::VisibleNoViolation
            };
            add_count_aux(&mut cell, &tallies);
            Ok(cell)
        })
        .collect();
    Ok(ShadowMap {
        grid: *grid,
        cells: out?,
        scenario: "qkd".into(),
        epoch: t,
        seed: s.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QcsConfig {
    /// Minimum mean number of exchanged pairs.
    pub n_min: u32,
    /// Pair generation rate [1/s].
    pub source_rate: f64,
    /// Required synchronization precision [s].
    pub target_precision: f64,
}

impl Default for QcsConfig {
    fn default() -> Self {
        QcsConfig {
            n_min: 30,
            source_rate: 1e7,
            target_precision: 1e-9,
        }
    }
}

impl QcsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_min < 1 {
            return Err(Error::invalid("qcs.n_min", "must be >= 1"));
        }
        if !(self.source_rate > 0.0 && self.source_rate.is_finite()) {
            return Err(Error::invalid("qcs.source_rate", "must be finite and > 0"));
        }
        if !(self.target_precision > 0.0) {
            return Err(Error::invalid("qcs.target_precision", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionResult {
    /// [s]
    pub t_bin: f64,
    pub secure: bool,
}

/// Synchronization bin width `N_min |v_rad| / (R eta c)` [s].
pub fn t_bin(cfg: &QcsConfig, geom: &LinkGeometry, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::invalid("eta", "must be > 0"));
    }
    if geom.radial_velocity == 0.0 {
        return Ok(0.0);
    }
    Ok(cfg.n_min as f64 * geom.radial_velocity.abs() / (cfg.source_rate * eta * C))
}

/// Cells whose uplink achieves `t_bin <= target`. With `secure`, cells must
/// also pass a 1-sigma single-uplink Bell test.
pub fn precision_shadow(
    setup: &SimSetup,
    orbit: &OrbitSpec,
    grid: &GeoGrid,
    qcs: &QcsConfig,
    t: f64,
    secure: bool,
) -> Result<ShadowMap> {
    qcs.validate()?;
    setup.validate()?;
    orbit.validate()?;
    let bell_setup = SimSetup {
        bell: BellTestConfig {
            confidence_n: 1.0,
            ..setup.bell
        },
        ..*setup
    };
    let sat = propagate(orbit, &setup.earth, t);
    let cells = grid.cells_in_cap(&footprint_at(orbit, &setup.earth, t));
    let out: Result<Vec<ShadowCell>> = cells
        .par_iter()
        .map(|c| {
            let gs = station(c);
            let g = link_geometry(&sat, &gs, &setup.earth, t);
            let eta = if g.visible {
                link_efficiency(&setup.channel, &g, Direction::Uplink)?.eta_total
            } else {
                0.0
            };
            let tb = if eta > 0.0 { t_bin(qcs, &g, eta)? } else { f64::INFINITY };
            let mut cell = ShadowCell::new(c, Status::VisibleNoViolation);
            let mut pass = tb <= qcs.target_precision;
            if secure {
                let tallies = single_link_tallies(&bell_setup, orbit, &gs, Direction::Uplink, c.index, t)?;
                let bell = BellTestResult::from_tallies(&tallies, &bell_setup.bell);
                cell = cell.with_bell(&bell);
                cell.aux.insert("bell_verdict".into(), bell.verdict as u8 as f64);
                pass &= bell.verdict;
            }
            cell.status = if pass {
                Status::Violation
            } else {
                Status::VisibleNoViolation
            };
            if tb.is_finite() {
                cell.aux.insert("t_bin".into(), tb);
            }
            cell.aux.insert("eta_up".into(), eta);
            cell.aux.insert("v_rad".into(), g.radial_velocity);
            Ok(cell)
        })
        .collect();
    Ok(ShadowMap {
        grid: *grid,
        cells: out?,
        scenario: if secure { "qcs_secure" } else { "qcs_precision" }.into(),
        epoch: t,
        seed: setup.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSample {
    /// [s]
    pub t: f64,
    /// Both stations see the satellite.
    pub visible: bool,
    pub s_mean: Option<f64>,
    pub s_std: Option<f64>,
    pub qber_mean: Option<f64>,
    pub qber_std: Option<f64>,
}

/// Double-downlink Bell and QBER statistics between two stations sampled
/// every `dt` over `[t_start, t_end]`.
#[allow(clippy::too_many_arguments)]
pub fn pair_time_series(
    setup: &SimSetup,
    orbit: &OrbitSpec,
    station_a: &GroundStation,
    station_b: &GroundStation,
    qkd: &QkdConfig,
    t_start: f64,
    t_end: f64,
    dt: f64,
) -> Result<Vec<TimeSample>> {
    qkd.validate()?;
    let s = qkd_setup(setup, qkd);
    s.validate()?;
    orbit.validate()?;
    station_a.validate()?;
    station_b.validate()?;
    if !(dt > 0.0) || !(t_end >= t_start) {
        return Err(Error::invalid("timeseries", "needs dt > 0 and t_end >= t_start"));
    }
    let n = ((t_end - t_start) / dt).floor() as u64 + 1;
    (0..n)
        .into_par_iter()
        .map(|k| {
            let t = t_start + k as f64 * dt;
            let sat = propagate(orbit, &s.earth, t);
            let visible = link_geometry(&sat, station_a, &s.earth, t).visible
                && link_geometry(&sat, station_b, &s.earth, t).visible;
            if !visible {
                return Ok(TimeSample {
                    t,
                    visible,
                    s_mean: None,
                    s_std: None,
                    qber_mean: None,
                    qber_std: None,
                });
            }
            let tallies = double_link_tallies(&s, orbit, station_a, station_b, k, t)?;
            let bell = BellTestResult::from_tallies(&tallies, &s.bell);
            let qber = QberResult::from_tallies(&tallies);
            let defined = bell.valid_runs > 0;
            Ok(TimeSample {
                t,
                visible,
                s_mean: defined.then_some(bell.s_mean),
                s_std: defined.then_some(bell.s_std),
                qber_mean: qber.as_ref().map(|q| q.qber_mean),
                qber_std: qber.as_ref().map(|q| q.qber_std),
            })
        })
        .collect()
}

/// Polar orbit whose sub-satellite point crosses `(lat, lon)` [rad] heading
/// north at time `t_pass`.
pub fn polar_orbit_over(
    altitude: f64,
    lat: f64,
    lon: f64,
    t_pass: f64,
    earth: &crate::geodyn::EarthModel,
) -> OrbitSpec {
    let mut o = OrbitSpec::polar(altitude, 0.0);
    let n = o.mean_motion(earth);
    o.phase_at_epoch = lat - n * t_pass;
    o.raan = lon + earth.rotation_angle(t_pass);
    o
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodyn::{subsatellite_point, EarthModel};
    use crate::photonsim::synthesize_records;
    use crate::photonsim::BasisAllocation;
    use crate::rng::{lane, StreamId};

    fn geom(v: f64) -> LinkGeometry {
        LinkGeometry {
            distance: 1e6,
            visible: true,
            radial_velocity: v,
            zenith_angle: 0.3,
        }
    }

    #[test]
    fn t_bin_arithmetic() {
        let cfg = QcsConfig {
            n_min: 30,
            source_rate: 1e7,
            target_precision: 1e-9,
        };
        let approx_c = 30.0 * 7000.0 / (1e7 * 1e-3 * 3e8);
        let tb = t_bin(&cfg, &geom(7000.0), 1e-3).unwrap();
        assert!((tb - 7.0e-8).abs() < 1e-10 && (tb - approx_c).abs() / approx_c < 1e-3);
        assert_eq!(t_bin(&cfg, &geom(0.0), 1e-3).unwrap(), 0.0);
        assert_eq!(t_bin(&cfg, &geom(-7000.0), 1e-3).unwrap(), tb);
        let double = QcsConfig { n_min: 60, ..cfg };
        assert_eq!(t_bin(&double, &geom(7000.0), 1e-3).unwrap(), 2.0 * tb);
        assert!(t_bin(&cfg, &geom(1.0), 0.0).is_err());
    }

    fn plan() -> RoundPlan {
        QkdConfig::default().plan(MeasurementBases::default())
    }

    #[test]
    fn qber_limits() {
        let mut rng = StreamId::new(3, 0, 0, lane::SYNTH).rng();
        let clean = synthesize_records(20_000, 1.0, &plan(), BasisAllocation::Random, &mut rng).unwrap();
        let (q, n) = qber_from_records(&clean).unwrap();
        assert_eq!(q, 0.0);
        assert!(n > 4000);
        let noisy = synthesize_records(40_000, 0.0, &plan(), BasisAllocation::Random, &mut rng).unwrap();
        let (q, n) = qber_from_records(&noisy).unwrap();
        assert!((q - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
        assert_eq!(qber_from_tally(&RunTally::from_records(&noisy)), Some((q, n)));
        assert_eq!(qber_from_records(&[]), None);
    }

    #[test]
    fn qber_mixing_boundary() {
        let mut rng = StreamId::new(4, 0, 0, lane::SYNTH).rng();
        let recs = synthesize_records(400_000, 0.78, &plan(), BasisAllocation::Random, &mut rng).unwrap();
        let (q, _) = qber_from_records(&recs).unwrap();
        assert!((q - 0.11).abs() < 0.005, "q = {q}");
    }

    #[test]
    fn orbit_over_target() {
        let e = EarthModel::default();
        let (lat, lon) = (40.7128f64.to_radians(), (-74.006f64).to_radians());
        let o = polar_orbit_over(500e3, lat, lon, 4900.0, &e);
        let (la, lo) = subsatellite_point(&propagate(&o, &e, 4900.0), &e);
        assert!((la - lat).abs() < 1e-9 && (lo - lon).abs() < 1e-9);
    }

    #[test]
    fn validation() {
        assert!(QkdConfig {
            qber_threshold: 0.6,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(QcsConfig {
            n_min: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
