//! Geographic rasterization of Bell-test verdicts.
//!
//! A [`GeoGrid`] tiles the sphere in latitude/longitude cells. Shadow
//! builders evaluate only cells whose centers lie inside the relevant
//! visibility cap; every other cell is implicitly outside visibility.
//! Each cell draws its randomness from streams keyed by the global seed,
//! its cell id and the run index, so maps computed with different physical
//! parameters share random numbers cell by cell.

use std::collections::BTreeMap;

use petgraph::unionfind::UnionFind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belltest::{run_tallies, BellTestConfig, BellTestResult};
use crate::channel::{link_efficiency, ChannelParams, Direction};
use crate::error::{Error, Result};
use crate::geodyn::{
    intersat_visible, link_geometry, propagate, subsatellite_point, visibility_footprint,
    EarthModel, Footprint, GroundStation, OrbitSpec, SatelliteState,
};
use crate::photonsim::{
    simulate_run_tally, simulate_swap_tally, FailedSwap, NoiseParams, RoundPlan, RunConfig,
    RunTally, Sampling, SourceParams,
};
use crate::rng::{lane, StreamId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoGrid {
    /// [deg]
    pub lat_step: f64,
    /// [deg]
    pub lon_step: f64,
    /// Sphere radius used for cell areas [km].
    pub radius_km: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub index: u64,
    pub row: u32,
    pub col: u32,
    /// Cell center [deg].
    pub lat: f64,
    pub lon: f64,
    pub area_km2: f64,
}

impl GeoGrid {
    pub fn new(lat_step: f64, lon_step: f64, earth: &EarthModel) -> Result<Self> {
        for (name, step, span) in [("grid.lat_step", lat_step, 180.0), ("grid.lon_step", lon_step, 360.0)] {
            if !(step > 0.0 && step <= span) {
                return Err(Error::invalid(name, "must lie in (0, span]"));
            }
            let n = span / step;
            if (n - n.round()).abs() > 1e-9 {
                return Err(Error::invalid(name, format!("must divide {span} deg evenly")));
            }
        }
        Ok(GeoGrid {
            lat_step,
            lon_step,
            radius_km: earth.radius / 1e3,
        })
    }

    pub fn uniform(step: f64, earth: &EarthModel) -> Result<Self> {
        Self::new(step, step, earth)
    }

    pub fn n_rows(&self) -> u32 {
        (180.0 / self.lat_step).round() as u32
    }

    pub fn n_cols(&self) -> u32 {
        (360.0 / self.lon_step).round() as u32
    }

    pub fn n_cells(&self) -> u64 {
        self.n_rows() as u64 * self.n_cols() as u64
    }

    /// Exact spherical area of the band segment of one cell in `row` [km^2].
    pub fn row_area(&self, row: u32) -> f64 {
        let lo = (-90.0 + row as f64 * self.lat_step).to_radians();
        let hi = (-90.0 + (row + 1) as f64 * self.lat_step).to_radians();
        self.radius_km.powi(2) * self.lon_step.to_radians() * (hi.sin() - lo.sin())
    }

    pub fn cell(&self, row: u32, col: u32) -> GridCell {
        GridCell {
            index: row as u64 * self.n_cols() as u64 + col as u64,
            row,
            col,
            lat: -90.0 + (row as f64 + 0.5) * self.lat_step,
            lon: -180.0 + (col as f64 + 0.5) * self.lon_step,
            area_km2: self.row_area(row),
        }
    }

    pub fn cell_at(&self, index: u64) -> GridCell {
        let n = self.n_cols() as u64;
        self.cell((index / n) as u32, (index % n) as u32)
    }

    pub fn total_area_km2(&self) -> f64 {
        (0..self.n_rows()).map(|r| self.row_area(r) * self.n_cols() as f64).sum()
    }

    /// Cells whose centers lie inside the cap, in index order.
    pub fn cells_in_cap(&self, fp: &Footprint) -> Vec<GridCell> {
        let lat_c = fp.center_lat.to_degrees();
        let gamma = fp.half_angle.to_degrees();
        let lo = (((lat_c - gamma + 90.0) / self.lat_step).floor().max(0.0)) as u32;
        let hi = ((((lat_c + gamma + 90.0) / self.lat_step).ceil()) as u32).min(self.n_rows());
        let mut out = Vec::new();
        for row in lo..hi {
            for col in 0..self.n_cols() {
                let c = self.cell(row, col);
                if fp.contains(c.lat.to_radians(), c.lon.to_radians()) {
                    out.push(c);
                }
            }
        }
        out
    }

    /// Edge neighbours with longitude wrap-around.
    pub fn neighbors(&self, index: u64) -> Vec<u64> {
        let c = self.cell_at(index);
        let nc = self.n_cols();
        let mut out = vec![
            self.cell(c.row, (c.col + 1) % nc).index,
            self.cell(c.row, (c.col + nc - 1) % nc).index,
        ];
        if c.row > 0 {
            out.push(self.cell(c.row - 1, c.col).index);
        }
        if c.row + 1 < self.n_rows() {
            out.push(self.cell(c.row + 1, c.col).index);
        }
        out.sort_unstable();
        out.dedup();
        out.retain(|&i| i != index);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    OutsideVisibility,
    VisibleNoViolation,
    /// The cell meets the map's criterion: a Bell violation for Bell maps,
    /// the QBER or precision target for application maps.
    Violation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusFilter {
    Violation,
    /// Violation or visible without violation.
    Visible,
    Any,
}

impl StatusFilter {
    pub fn matches(&self, s: Status) -> bool {
        match self {
            StatusFilter::Violation => s == Status::Violation,
            StatusFilter::Visible => s != Status::OutsideVisibility,
            StatusFilter::Any => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowCell {
    pub index: u64,
    /// [deg]
    pub lat: f64,
    /// [deg]
    pub lon: f64,
    pub area_km2: f64,
    pub status: Status,
    pub s_mean: Option<f64>,
    pub s_std: Option<f64>,
    pub valid_runs: u32,
    /// Satellites whose test passes for this cell.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub satellites: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<u32>,
    #[serde(default)]
    pub aux: BTreeMap<String, f64>,
}

impl ShadowCell {
    pub fn new(c: &GridCell, status: Status) -> Self {
        ShadowCell {
            index: c.index,
            lat: c.lat,
            lon: c.lon,
            area_km2: c.area_km2,
            status,
            s_mean: None,
            s_std: None,
            valid_runs: 0,
            satellites: Vec::new(),
            component: None,
            aux: BTreeMap::new(),
        }
    }

    pub fn with_bell(mut self, r: &BellTestResult) -> Self {
        self.status = if r.verdict {
            Status::Violation
        } else {
            Status::VisibleNoViolation
        };
        if r.valid_runs > 0 {
            self.s_mean = Some(r.s_mean);
            self.s_std = Some(r.s_std);
        }
        self.valid_runs = r.valid_runs as u32;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowMap {
    pub grid: GeoGrid,
    pub cells: Vec<ShadowCell>,
    pub scenario: String,
    /// [s]
    pub epoch: f64,
    pub seed: u64,
}

impl ShadowMap {
    pub fn count(&self, filter: StatusFilter) -> usize {
        self.cells.iter().filter(|c| filter.matches(c.status)).count()
    }

    pub fn violation_indices(&self) -> Vec<u64> {
        self.cells
            .iter()
            .filter(|c| c.status == Status::Violation)
            .map(|c| c.index)
            .collect()
    }

    pub fn get(&self, index: u64) -> Option<&ShadowCell> {
        self.cells
            .binary_search_by_key(&index, |c| c.index)
            .ok()
            .map(|i| &self.cells[i])
    }

    pub fn component_count(&self) -> usize {
        let mut ids: Vec<u32> = self.cells.iter().filter_map(|c| c.component).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

/// Summed area of the cells accepted by `filter` [km^2].
pub fn shadow_area(map: &ShadowMap, filter: StatusFilter) -> f64 {
    map.cells
        .iter()
        .filter(|c| filter.matches(c.status))
        .map(|c| c.area_km2)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StationNoise {
    /// [Hz]
    pub bkg_rate: f64,
    /// [Hz]
    pub dark_rate: f64,
}

impl StationNoise {
    pub fn new(bkg_rate: f64, dark_rate: f64) -> Self {
        StationNoise { bkg_rate, dark_rate }
    }

    /// Dark counts only.
    pub fn local(&self) -> Self {
        StationNoise {
            bkg_rate: 0.0,
            dark_rate: self.dark_rate,
        }
    }
}

/// Noise at each kind of receiver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSetup {
    /// On-board receiver. Background applies only when it looks at the
    /// ground through a telescope (uplinks).
    pub satellite: StationNoise,
    /// Ground stations on the grid.
    pub ground: StationNoise,
    /// Fixed reference station; falls back to `ground`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed: Option<StationNoise>,
}

impl Default for NoiseSetup {
    fn default() -> Self {
        NoiseSetup {
            satellite: StationNoise::new(0.0, 1e3),
            ground: StationNoise::new(1e4, 1e3),
            fixed: None,
        }
    }
}

impl NoiseSetup {
    pub fn fixed_station(&self) -> StationNoise {
        self.fixed.unwrap_or(self.ground)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("noise.satellite", self.satellite),
            ("noise.ground", self.ground),
            ("noise.fixed", self.fixed_station()),
        ];
        for (name, n) in all {
            if !(n.bkg_rate >= 0.0 && n.bkg_rate.is_finite()) {
                return Err(Error::invalid(format!("{name}.bkg_rate"), "must be finite and >= 0"));
            }
            if !(n.dark_rate >= 0.0 && n.dark_rate.is_finite()) {
                return Err(Error::invalid(format!("{name}.dark_rate"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

fn pair_noise(a: StationNoise, b: StationNoise) -> NoiseParams {
    NoiseParams {
        bkg_rate_a: a.bkg_rate,
        bkg_rate_b: b.bkg_rate,
        dark_rate_a: a.dark_rate,
        dark_rate_b: b.dark_rate,
    }
}

/// Everything a shadow builder needs besides geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSetup {
    pub earth: EarthModel,
    pub channel: ChannelParams,
    pub source: SourceParams,
    pub noise: NoiseSetup,
    pub bell: BellTestConfig,
    pub plan: RoundPlan,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for SimSetup {
    fn default() -> Self {
        SimSetup {
            earth: EarthModel::default(),
            channel: ChannelParams::default(),
            source: SourceParams::default(),
            noise: NoiseSetup::default(),
            bell: BellTestConfig::default(),
            plan: RoundPlan::bell_only(Default::default()),
            sampling: Sampling::Aggregated,
            seed: 0,
        }
    }
}

impl SimSetup {
    pub fn validate(&self) -> Result<()> {
        self.earth.validate()?;
        self.channel.validate()?;
        self.source.validate()?;
        self.noise.validate()?;
        self.bell.validate()?;
        self.plan.validate()
    }

    fn run_config(&self, eta_a: f64, eta_b: f64, stream: StreamId) -> RunConfig {
        let mut cfg = RunConfig::new(&self.source, self.bell.t_acq, eta_a, eta_b, stream);
        cfg.sampling = self.sampling;
        cfg
    }

    /// `eta_total` of the link, or zero when hidden.
    pub fn channel_arm(&self, sat: &SatelliteState, gs: &GroundStation, t: f64, dir: Direction) -> f64 {
        let g = link_geometry(sat, gs, &self.earth, t);
        if !g.visible {
            return 0.0;
        }
        link_efficiency(&self.channel, &g, dir).map_or(0.0, |e| e.eta_total)
    }

    /// Ground-side detection probability of a downlink photon.
    pub fn ground_only(&self, sat: &SatelliteState, gs: &GroundStation, t: f64) -> f64 {
        let g = link_geometry(sat, gs, &self.earth, t);
        if !g.visible {
            return 0.0;
        }
        let ch = ChannelParams {
            det_eff_sat: 1.0,
            ..self.channel
        };
        link_efficiency(&ch, &g, Direction::Downlink).map_or(0.0, |e| e.eta_total)
    }
}

pub(crate) fn station(c: &GridCell) -> GroundStation {
    GroundStation::from_degrees(format!("cell{}", c.index), c.lat, c.lon)
}

pub(crate) fn footprint_at(orbit: &OrbitSpec, earth: &EarthModel, t: f64) -> Footprint {
    visibility_footprint(&propagate(orbit, earth, t), earth)
}

/// Run tallies for one cell, a closure of (run index, run start time).
fn cell_tallies(
    setup: &SimSetup,
    t0: f64,
    f: impl Fn(usize, f64) -> Result<RunTally> + Sync,
) -> Result<Vec<RunTally>> {
    run_tallies(&f, &setup.bell, t0)
}

pub(crate) fn add_count_aux(cell: &mut ShadowCell, tallies: &[RunTally]) {
    let mean = tallies.iter().map(|t| t.total() as f64).sum::<f64>() / tallies.len().max(1) as f64;
    cell.aux.insert("coincidences_mean".into(), mean);
}

/// Per-run tallies of a satellite-to-cell test with a single link.
pub fn single_link_tallies(
    setup: &SimSetup,
    orbit: &OrbitSpec,
    gs: &GroundStation,
    direction: Direction,
    cell_id: u64,
    t: f64,
) -> Result<Vec<RunTally>> {
    let (local_eff, noise) = match direction {
        // A = on-board detector, B = ground receiver
        Direction::Downlink => (
            setup.channel.det_eff_sat,
            pair_noise(setup.noise.satellite.local(), setup.noise.ground),
        ),
        // A = ground detector next to the source, B = on-board receiver
        Direction::Uplink => (
            setup.channel.det_eff_gs,
            pair_noise(setup.noise.ground.local(), setup.noise.satellite),
        ),
    };
    cell_tallies(setup, t, |i, tr| {
        let sat = propagate(orbit, &setup.earth, tr);
        let total = setup.channel_arm(&sat, gs, tr, direction);
        let eta_b = if local_eff > 0.0 { total / local_eff } else { 0.0 };
        let cfg = setup.run_config(local_eff, eta_b.min(1.0), StreamId::new(setup.seed, cell_id, i as u64, lane::LINK_A));
        simulate_run_tally(&setup.source, &noise, &setup.plan, &cfg)
    })
}

/// Per-run tallies between a fixed station and a cell, both on downlinks
/// from one satellite.
pub fn double_link_tallies(
    setup: &SimSetup,
    orbit: &OrbitSpec,
    fixed: &GroundStation,
    gs: &GroundStation,
    cell_id: u64,
    t: f64,
) -> Result<Vec<RunTally>> {
    let noise = pair_noise(setup.noise.fixed_station(), setup.noise.ground);
    cell_tallies(setup, t, |i, tr| {
        let sat = propagate(orbit, &setup.earth, tr);
        let cfg = setup.run_config(
            setup.ground_only(&sat, fixed, tr),
            setup.ground_only(&sat, gs, tr),
            StreamId::new(setup.seed, cell_id, i as u64, lane::LINK_A),
        );
        simulate_run_tally(&setup.source, &noise, &setup.plan, &cfg)
    })
}

fn single_map(
    setup: &SimSetup,
    orbit: &OrbitSpec,
    grid: &GeoGrid,
    direction: Direction,
    t: f64,
    name: &str,
) -> Result<ShadowMap> {
    setup.validate()?;
    orbit.validate()?;
    let cells = grid.cells_in_cap(&footprint_at(orbit, &setup.earth, t));
    let out: Result<Vec<ShadowCell>> = cells
        .par_iter()
        .map(|c| {
            let tallies = single_link_tallies(setup, orbit, &station(c), direction, c.index, t)?;
            let r = BellTestResult::from_tallies(&tallies, &setup.bell);
            let mut cell = ShadowCell::new(c, Status::VisibleNoViolation).with_bell(&r);
            add_count_aux(&mut cell, &tallies);
            Ok(cell)
        })
        .collect();
    Ok(ShadowMap {
        grid: *grid,
        cells: out?,
        scenario: name.into(),
        epoch: t,
        seed: setup.seed,
    })
}

/// Satellite keeps one photon of each pair; the other goes to the cell.
pub fn bell_shadow_single_downlink(setup: &SimSetup, orbit: &OrbitSpec, grid: &GeoGrid, t: f64) -> Result<ShadowMap> {
    single_map(setup, orbit, grid, Direction::Downlink, t, "single_downlink")
}

/// The cell keeps one photon of each pair and sends the other up.
pub fn bell_shadow_single_uplink(setup: &SimSetup, orbit: &OrbitSpec, grid: &GeoGrid, t: f64) -> Result<ShadowMap> {
    single_map(setup, orbit, grid, Direction::Uplink, t, "single_uplink")
}

pub(crate) fn require_visible(setup: &SimSetup, orbit: &OrbitSpec, gs: &GroundStation, t: f64) -> Result<()> {
    let sat = propagate(orbit, &setup.earth, t);
    let g = link_geometry(&sat, gs, &setup.earth, t);
    if g.visible {
        Ok(())
    } else {
        Err(Error::NotVisible {
            zenith_deg: g.zenith_angle.to_degrees(),
        })
    }
}

pub fn bell_shadow_double_downlink(
    setup: &SimSetup,
    orbit: &OrbitSpec,
    fixed_gs: &GroundStation,
    grid: &GeoGrid,
    t: f64,
) -> Result<ShadowMap> {
    setup.validate()?;
    orbit.validate()?;
    fixed_gs.validate()?;
    require_visible(setup, orbit, fixed_gs, t)?;
    let cells = grid.cells_in_cap(&footprint_at(orbit, &setup.earth, t));
    let out: Result<Vec<ShadowCell>> = cells
        .par_iter()
        .map(|c| {
            let tallies = double_link_tallies(setup, orbit, fixed_gs, &station(c), c.index, t)?;
            let r = BellTestResult::from_tallies(&tallies, &setup.bell);
            let mut cell = ShadowCell::new(c, Status::VisibleNoViolation).with_bell(&r);
            add_count_aux(&mut cell, &tallies);
            Ok(cell)
        })
        .collect();
    Ok(ShadowMap {
        grid: *grid,
        cells: out?,
        scenario: "double_downlink".into(),
        epoch: t,
        seed: setup.seed,
    })
}

/// Swap parameters for two memory-assisted downlinks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapSetup {
    pub p_sw: f64,
    pub failed: FailedSwap,
}

/// Two independent satellite-to-ground links joined on board by an
/// entanglement swap. Each link stores one photon in a memory (efficiency
/// `det_eff_sat`, on-board dark counts) and sends the other to the ground.
pub fn bell_shadow_swapped(
    setup: &SimSetup,
    orbit: &OrbitSpec,
    fixed_gs: &GroundStation,
    grid: &GeoGrid,
    swap: SwapSetup,
    t: f64,
) -> Result<ShadowMap> {
    setup.validate()?;
    orbit.validate()?;
    fixed_gs.validate()?;
    crate::channel::check_probability("p_sw", swap.p_sw)?;
    require_visible(setup, orbit, fixed_gs, t)?;
    let cells = grid.cells_in_cap(&footprint_at(orbit, &setup.earth, t));
    let mem = setup.channel.det_eff_sat;
    let noise_1 = pair_noise(setup.noise.satellite.local(), setup.noise.fixed_station());
    let noise_2 = pair_noise(setup.noise.satellite.local(), setup.noise.ground);
    let out: Result<Vec<ShadowCell>> = cells
        .par_iter()
        .map(|c| {
            let gs = station(c);
            let tallies = cell_tallies(setup, t, |i, tr| {
                let sat = propagate(orbit, &setup.earth, tr);
                let id = StreamId::new(setup.seed, c.index, i as u64, lane::LINK_A);
                let c1 = setup.run_config(mem, setup.ground_only(&sat, fixed_gs, tr), id);
                let c2 = setup.run_config(mem, setup.ground_only(&sat, &gs, tr), id.with_lane(lane::LINK_B));
                simulate_swap_tally(&c1, &c2, &setup.source, &noise_1, &noise_2, &setup.plan, swap.p_sw, swap.failed)
            })?;
            let r = BellTestResult::from_tallies(&tallies, &setup.bell);
            let mut cell = ShadowCell::new(c, Status::VisibleNoViolation).with_bell(&r);
            add_count_aux(&mut cell, &tallies);
            Ok(cell)
        })
        .collect();
    Ok(ShadowMap {
        grid: *grid,
        cells: out?,
        scenario: "swap_double".into(),
        epoch: t,
        seed: setup.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstellationMode {
    /// Cells connect only through neighbouring shadow cells.
    DoubleDownlink,
    /// Satellites with a clear line of sight share entanglement, which joins
    /// their shadows.
    Repeater,
}

/// Union of per-satellite double-downlink shadows. Each satellite's fixed
/// station sits at its sub-satellite point at `t`.
pub fn constellation_shadow(
    setup: &SimSetup,
    constellation: &[OrbitSpec],
    mode: ConstellationMode,
    grid: &GeoGrid,
    t: f64,
) -> Result<ShadowMap> {
    setup.validate()?;
    if constellation.is_empty() {
        return Err(Error::invalid("constellation", "needs at least one satellite"));
    }
    let mut per_sat: BTreeMap<u64, (GridCell, Vec<(u32, BellTestResult)>)> = BTreeMap::new();
    let n_cells = grid.n_cells();
    for (k, orbit) in constellation.iter().enumerate() {
        orbit.validate()?;
        let sat = propagate(orbit, &setup.earth, t);
        let (lat, lon) = subsatellite_point(&sat, &setup.earth);
        let fixed = GroundStation::new(format!("nadir{k}"), lat, lon);
        let cells = grid.cells_in_cap(&visibility_footprint(&sat, &setup.earth));
        let results: Result<Vec<(GridCell, BellTestResult)>> = cells
            .par_iter()
            .map(|c| {
                let id = c.index + k as u64 * n_cells;
                let tallies = double_link_tallies(setup, orbit, &fixed, &station(c), id, t)?;
                Ok((*c, BellTestResult::from_tallies(&tallies, &setup.bell)))
            })
            .collect();
        for (c, r) in results? {
            per_sat.entry(c.index).or_insert_with(|| (c, Vec::new())).1.push((k as u32, r));
        }
    }
    let mut cells: Vec<ShadowCell> = per_sat
        .values()
        .map(|(c, results)| {
            let best = results
                .iter()
                .max_by(|a, b| a.1.margin_sigmas().total_cmp(&b.1.margin_sigmas()))
                .expect("at least one result");
            let mut cell = ShadowCell::new(c, Status::VisibleNoViolation).with_bell(&best.1);
            cell.satellites = results.iter().filter(|r| r.1.verdict).map(|r| r.0).collect();
            cell
        })
        .collect();
    let links = match mode {
        ConstellationMode::DoubleDownlink => Vec::new(),
        ConstellationMode::Repeater => {
            let states: Vec<SatelliteState> = constellation.iter().map(|o| propagate(o, &setup.earth, t)).collect();
            let mut v = Vec::new();
            for i in 0..states.len() {
                for j in i + 1..states.len() {
                    if intersat_visible(&states[i], &states[j], &setup.earth) {
                        v.push((i as u32, j as u32));
                    }
                }
            }
            v
        }
    };
    label_components(grid, &mut cells, constellation.len(), &links);
    Ok(ShadowMap {
        grid: *grid,
        cells,
        scenario: match mode {
            ConstellationMode::DoubleDownlink => "constellation_double".into(),
            ConstellationMode::Repeater => "constellation_repeater".into(),
        },
        epoch: t,
        seed: setup.seed,
    })
}

/// Assigns component ids to violation cells. Cells join through edge
/// adjacency; with satellite links, cells also join through the satellites
/// that serve them. Ids follow first appearance in cell order.
pub fn label_components(grid: &GeoGrid, cells: &mut [ShadowCell], n_sats: usize, links: &[(u32, u32)]) {
    let pos: BTreeMap<u64, usize> = cells
        .iter()
        .enumerate()
        .filter(|(_, c)| c.status == Status::Violation)
        .map(|(i, c)| (c.index, i))
        .collect();
    let n = cells.len();
    let mut uf = UnionFind::<usize>::new(n + n_sats);
    for (&idx, &i) in &pos {
        for nb in grid.neighbors(idx) {
            if let Some(&j) = pos.get(&nb) {
                uf.union(i, j);
            }
        }
    }
    if !links.is_empty() {
        for &i in pos.values() {
            for &s in &cells[i].satellites {
                uf.union(i, n + s as usize);
            }
        }
        for &(a, b) in links {
            uf.union(n + a as usize, n + b as usize);
        }
    }
    let mut ids: BTreeMap<usize, u32> = BTreeMap::new();
    for (i, c) in cells.iter_mut().enumerate() {
        c.component = if pos.contains_key(&c.index) {
            let root = uf.find(i);
            let next = ids.len() as u32;
            Some(*ids.entry(root).or_insert(next))
        } else {
            None
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn earth() -> EarthModel {
        EarthModel::default()
    }

    #[test]
    fn grid_total_area() {
        let g = GeoGrid::uniform(1.0, &earth()).unwrap();
        let sphere = 4.0 * PI * 6371.0f64.powi(2);
        assert!((g.total_area_km2() - sphere).abs() / sphere < 1e-9);
        assert!(GeoGrid::uniform(0.7, &earth()).is_err());
        assert!(GeoGrid::uniform(-1.0, &earth()).is_err());
    }

    #[test]
    fn cap_area_matches_formula() {
        let e = earth();
        let g = GeoGrid::uniform(0.25, &e).unwrap();
        let fp = footprint_at(&OrbitSpec::polar(500e3, 0.3), &e, 0.0);
        let area: f64 = g.cells_in_cap(&fp).iter().map(|c| c.area_km2).sum();
        let exact = fp.area(&e) / 1e6;
        assert!((exact - 1.86e7).abs() / 1.86e7 < 0.01);
        assert!((area - exact).abs() / exact < 0.02, "{area} vs {exact}");
    }

    #[test]
    fn neighbours_wrap() {
        let g = GeoGrid::uniform(10.0, &earth()).unwrap();
        let c = g.cell(5, 0);
        let nb = g.neighbors(c.index);
        assert!(nb.contains(&g.cell(5, 35).index));
        assert!(nb.contains(&g.cell(5, 1).index));
        assert_eq!(nb.len(), 4);
        assert_eq!(g.neighbors(g.cell(0, 3).index).len(), 3);
    }

    #[test]
    fn status_filters_nest() {
        let e = earth();
        let grid = GeoGrid::uniform(1.0, &e).unwrap();
        let mk = |i: u64, s| ShadowCell::new(&grid.cell_at(i), s);
        let map = ShadowMap {
            grid,
            cells: vec![
                mk(1, Status::Violation),
                mk(2, Status::VisibleNoViolation),
                mk(3, Status::OutsideVisibility),
            ],
            scenario: "t".into(),
            epoch: 0.0,
            seed: 0,
        };
        let v = shadow_area(&map, StatusFilter::Violation);
        let vis = shadow_area(&map, StatusFilter::Visible);
        let any = shadow_area(&map, StatusFilter::Any);
        assert!(v <= vis && vis <= any);
        let empty = ShadowMap { cells: vec![], ..map };
        assert_eq!(shadow_area(&empty, StatusFilter::Any), 0.0);
    }

    fn quick_setup() -> SimSetup {
        SimSetup {
            channel: ChannelParams::clear_sky(),
            bell: BellTestConfig {
                n_runs: 6,
                t_acq: 1e-3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn dead_source_gives_empty_shadows() {
        let mut s = quick_setup();
        s.source.pair_rate = 0.0;
        let e = earth();
        let grid = GeoGrid::uniform(4.0, &e).unwrap();
        let orbit = OrbitSpec::polar(500e3, 0.0);
        let m = bell_shadow_single_downlink(&s, &orbit, &grid, 0.0).unwrap();
        assert!(m.count(StatusFilter::Visible) > 0);
        assert_eq!(m.count(StatusFilter::Violation), 0);
        let fixed = GroundStation::from_degrees("f", 0.0, 0.0);
        let m = bell_shadow_double_downlink(&s, &orbit, &fixed, &grid, 0.0).unwrap();
        assert_eq!(m.count(StatusFilter::Violation), 0);
    }

    #[test]
    fn zero_swap_probability_gives_empty_shadow() {
        let s = quick_setup();
        let e = earth();
        let grid = GeoGrid::uniform(4.0, &e).unwrap();
        let orbit = OrbitSpec::polar(500e3, 0.0);
        let fixed = GroundStation::from_degrees("f", 0.0, 0.0);
        for failed in [FailedSwap::Dropped, FailedSwap::Unheralded] {
            let m = bell_shadow_swapped(&s, &orbit, &fixed, &grid, SwapSetup { p_sw: 0.0, failed }, 0.0).unwrap();
            assert_eq!(m.count(StatusFilter::Violation), 0);
        }
    }

    #[test]
    fn hidden_fixed_station_is_an_error() {
        let s = quick_setup();
        let grid = GeoGrid::uniform(4.0, &earth()).unwrap();
        let orbit = OrbitSpec::polar(500e3, 0.0);
        let far = GroundStation::from_degrees("far", 0.0, 120.0);
        assert!(matches!(
            bell_shadow_double_downlink(&s, &orbit, &far, &grid, 0.0),
            Err(Error::NotVisible { .. })
        ));
    }

    #[test]
    fn components_split_and_join() {
        let e = earth();
        let grid = GeoGrid::uniform(10.0, &e).unwrap();
        let mk = |row, col, sat: u32| {
            let mut c = ShadowCell::new(&grid.cell(row, col), Status::Violation);
            c.satellites = vec![sat];
            c
        };
        let mut cells = vec![mk(5, 0, 0), mk(5, 35, 0), mk(9, 10, 1)];
        cells.sort_by_key(|c| c.index);
        label_components(&grid, &mut cells, 2, &[]);
        let map = ShadowMap {
            grid,
            cells: cells.clone(),
            scenario: "t".into(),
            epoch: 0.0,
            seed: 0,
        };
        // the two cells at col 0 and col 35 touch across the date line
        assert_eq!(map.component_count(), 2);
        label_components(&grid, &mut cells, 2, &[(0, 1)]);
        assert!(cells.iter().all(|c| c.component == Some(0)));
    }
}
