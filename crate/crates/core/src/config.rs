//! TOML scenario files.
//!
//! Hardware sections fall back to their library defaults when omitted.
//! Angles and altitudes use degrees and kilometres; everything else is SI.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::analytic;
use crate::apps::{QkdConfig, QcsConfig};
use crate::belltest::BellTestConfig;
use crate::channel::{check_probability, ChannelParams};
use crate::error::{Error, Result};
use crate::geodyn::{
    propagate, station_at_offset, subsatellite_point, EarthModel, GroundStation, OrbitSpec,
};
use crate::photonsim::{FailedSwap, MeasurementBases, RoundPlan, Sampling, SourceParams};
use crate::shadows::{GeoGrid, NoiseSetup, SimSetup, SwapSetup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    SingleDownlink,
    SingleUplink,
    DoubleDownlink,
    SwapDouble,
    ConstellationDouble,
    ConstellationRepeater,
    Qkd,
    QcsPrecision,
    QcsSecure,
    AnalyticTables,
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::SingleDownlink => "single_downlink",
            ScenarioKind::SingleUplink => "single_uplink",
            ScenarioKind::DoubleDownlink => "double_downlink",
            ScenarioKind::SwapDouble => "swap_double",
            ScenarioKind::ConstellationDouble => "constellation_double",
            ScenarioKind::ConstellationRepeater => "constellation_repeater",
            ScenarioKind::Qkd => "qkd",
            ScenarioKind::QcsPrecision => "qcs_precision",
            ScenarioKind::QcsSecure => "qcs_secure",
            ScenarioKind::AnalyticTables => "analytic_tables",
        }
    }

    /// Produces shadow maps.
    pub fn is_map(&self) -> bool {
        *self != ScenarioKind::AnalyticTables
    }

    fn needs_fixed_gs(&self) -> bool {
        matches!(self, ScenarioKind::DoubleDownlink | ScenarioKind::SwapDouble | ScenarioKind::Qkd)
    }

    fn is_constellation(&self) -> bool {
        matches!(self, ScenarioKind::ConstellationDouble | ScenarioKind::ConstellationRepeater)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PassOver {
    pub lat_deg: f64,
    pub lon_deg: f64,
    /// Time of the northbound crossing [s].
    #[serde(default)]
    pub t_pass: f64,
}

/// Circular orbit. With `pass_over`, a polar orbit is placed so that its
/// ground track crosses the given point and the angular elements are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrbitConfig {
    pub altitude_km: f64,
    pub inclination_deg: f64,
    pub raan_deg: f64,
    pub phase_deg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pass_over: Option<PassOver>,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        OrbitConfig {
            altitude_km: 500.0,
            inclination_deg: 90.0,
            raan_deg: 0.0,
            phase_deg: 0.0,
            pass_over: None,
        }
    }
}

impl OrbitConfig {
    pub fn to_orbit(&self, earth: &EarthModel) -> OrbitSpec {
        match self.pass_over {
            Some(p) => crate::apps::polar_orbit_over(
                self.altitude_km * 1e3,
                p.lat_deg.to_radians(),
                p.lon_deg.to_radians(),
                p.t_pass,
                earth,
            ),
            None => OrbitSpec {
                altitude: self.altitude_km * 1e3,
                inclination: self.inclination_deg.to_radians(),
                raan: self.raan_deg.to_radians(),
                phase_at_epoch: self.phase_deg.to_radians(),
            },
        }
    }
}

/// Equally phased satellites sharing the plane of `orbit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstellationConfig {
    pub n_satellites: usize,
}

/// A ground station, either at fixed coordinates or at a central angle and
/// bearing from the sub-satellite point at each epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StationConfig {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lat_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lon_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset_deg: Option<f64>,
    /// Clockwise from north [deg].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bearing_deg: Option<f64>,
}

impl StationConfig {
    pub fn at(name: &str, lat_deg: f64, lon_deg: f64) -> Self {
        StationConfig {
            name: name.into(),
            lat_deg: Some(lat_deg),
            lon_deg: Some(lon_deg),
            ..Default::default()
        }
    }

    pub fn from_nadir(name: &str, offset_deg: f64, bearing_deg: f64) -> Self {
        StationConfig {
            name: name.into(),
            offset_deg: Some(offset_deg),
            bearing_deg: Some(bearing_deg),
            ..Default::default()
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        let finite = |v: Option<f64>| v.is_none_or(f64::is_finite);
        if ![self.lat_deg, self.lon_deg, self.offset_deg, self.bearing_deg].into_iter().all(finite) {
            return Err(Error::invalid(field, "coordinates must be finite"));
        }
        match (self.lat_deg, self.lon_deg, self.offset_deg) {
            (Some(lat), Some(_), None) if (-90.0..=90.0).contains(&lat) => Ok(()),
            (Some(_), Some(_), None) => Err(Error::invalid(format!("{field}.lat_deg"), "must lie in [-90, 90]")),
            (None, None, Some(off)) if (0.0..=180.0).contains(&off) => Ok(()),
            (None, None, Some(_)) => Err(Error::invalid(format!("{field}.offset_deg"), "must lie in [0, 180]")),
            _ => Err(Error::invalid(field, "give either lat_deg and lon_deg, or offset_deg")),
        }
    }

    pub fn resolve(&self, orbit: &OrbitSpec, earth: &EarthModel, t: f64) -> GroundStation {
        match (self.lat_deg, self.lon_deg) {
            (Some(lat), Some(lon)) => GroundStation::from_degrees(self.name.clone(), lat, lon),
            _ => {
                let (lat, lon) = subsatellite_point(&propagate(orbit, earth, t), earth);
                station_at_offset(
                    self.name.clone(),
                    lat,
                    lon,
                    self.offset_deg.unwrap_or(0.0).to_radians(),
                    self.bearing_deg.unwrap_or(0.0).to_radians(),
                )
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub lat_step_deg: f64,
    pub lon_step_deg: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            lat_step_deg: 1.0,
            lon_step_deg: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwapConfig {
    pub p_sw: f64,
    #[serde(default)]
    pub failed: FailedSwap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSeriesConfig {
    /// [s]
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticConfig {
    /// Genuine fractions of the tabulated outcome models.
    pub genuine_fractions: Vec<f64>,
    /// Mean coincidence numbers.
    pub nbars: Vec<f64>,
}

impl Default for AnalyticConfig {
    fn default() -> Self {
        AnalyticConfig {
            genuine_fractions: vec![0.6, 0.7, 0.78, 0.9, 1.0],
            nbars: vec![10.0, 20.0, 40.0, 100.0, 200.0],
        }
    }
}

/// A one-parameter ladder over an otherwise fixed scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Dotted path, one of [`SWEEP_PARAMETERS`].
    pub parameter: String,
    pub values: Vec<f64>,
}

pub const SWEEP_PARAMETERS: &[&str] = &[
    "bell.t_acq",
    "bell.confidence_n",
    "bell.n_runs",
    "source.pair_rate",
    "noise.ground.bkg_rate",
    "noise.ground.dark_rate",
    "noise.fixed.bkg_rate",
    "noise.fixed.dark_rate",
    "noise.satellite.dark_rate",
    "swap.p_sw",
    "qcs.n_min",
    "qcs.target_precision",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Geojson,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// File name stem; the scenario name when empty.
    pub stem: String,
    pub format: OutputFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            stem: String::new(),
            format: OutputFormat::Geojson,
        }
    }
}

fn default_epochs() -> Vec<f64> {
    vec![0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    #[serde(default)]
    pub seed: u64,
    /// Snapshot times after the orbit epoch [s].
    #[serde(default = "default_epochs")]
    pub epochs: Vec<f64>,
    #[serde(default)]
    pub orbit: OrbitConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constellation: Option<ConstellationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_gs: Option<StationConfig>,
    /// Second station of a pass time series; `fixed_gs` is the first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub station_b: Option<StationConfig>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub earth: EarthModel,
    #[serde(default)]
    pub channel: ChannelParams,
    #[serde(default)]
    pub source: SourceParams,
    #[serde(default)]
    pub noise: NoiseSetup,
    #[serde(default)]
    pub bell: BellTestConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bases: Option<MeasurementBases>,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swap: Option<SwapConfig>,
    #[serde(default)]
    pub qkd: QkdConfig,
    #[serde(default)]
    pub qcs: QcsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeseries: Option<TimeSeriesConfig>,
    #[serde(default)]
    pub analytic: AnalyticConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ScenarioConfig {
    /// Minimal config of the given kind with every default in place.
    pub fn new(scenario: ScenarioKind) -> Self {
        ScenarioConfig {
            scenario,
            seed: 0,
            epochs: default_epochs(),
            orbit: OrbitConfig::default(),
            constellation: None,
            fixed_gs: None,
            station_b: None,
            grid: GridConfig::default(),
            earth: EarthModel::default(),
            channel: ChannelParams::default(),
            source: SourceParams::default(),
            noise: NoiseSetup::default(),
            bell: BellTestConfig::default(),
            bases: None,
            sampling: Sampling::default(),
            swap: None,
            qkd: QkdConfig::default(),
            qcs: QcsConfig::default(),
            timeseries: None,
            analytic: AnalyticConfig::default(),
            sweep: None,
            output: OutputConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs.is_empty() || !self.epochs.iter().all(|t| t.is_finite()) {
            return Err(Error::invalid("epochs", "need at least one finite time"));
        }
        if !(self.orbit.altitude_km > 0.0 && self.orbit.altitude_km.is_finite()) {
            return Err(Error::invalid("orbit.altitude_km", "must be finite and > 0"));
        }
        if !(0.0..=180.0).contains(&self.orbit.inclination_deg) {
            return Err(Error::invalid("orbit.inclination_deg", "must lie in [0, 180]"));
        }
        if let Some(p) = self.orbit.pass_over {
            if !(-90.0..=90.0).contains(&p.lat_deg) || !p.lon_deg.is_finite() || !p.t_pass.is_finite() {
                return Err(Error::invalid("orbit.pass_over", "latitude in [-90, 90], finite longitude and time"));
            }
        }
        self.orbit.to_orbit(&self.earth).validate()?;
        self.grid()?;
        self.setup().validate()?;
        self.qkd.validate()?;
        self.qcs.validate()?;
        if let Some(s) = &self.fixed_gs {
            s.validate("fixed_gs")?;
        }
        if let Some(s) = &self.station_b {
            s.validate("station_b")?;
        }
        if let Some(s) = &self.swap {
            check_probability("swap.p_sw", s.p_sw)?;
        }
        if let Some(ts) = &self.timeseries {
            if !(ts.dt > 0.0) || !(ts.t_end >= ts.t_start) || !ts.t_start.is_finite() || !ts.t_end.is_finite() {
                return Err(Error::invalid("timeseries", "needs dt > 0 and finite t_start <= t_end"));
            }
        }
        for &f in &self.analytic.genuine_fractions {
            analytic::effective_p1(f).map_err(|_| Error::invalid("analytic.genuine_fractions", "entries must lie in [0, 1]"))?;
        }
        if !self.analytic.nbars.iter().all(|n| *n >= 0.0 && n.is_finite()) {
            return Err(Error::invalid("analytic.nbars", "entries must be finite and >= 0"));
        }
        if let Some(c) = &self.constellation {
            if c.n_satellites == 0 {
                return Err(Error::invalid("constellation.n_satellites", "must be >= 1"));
            }
        }
        if self.scenario.needs_fixed_gs() && self.fixed_gs.is_none() {
            return Err(Error::invalid("fixed_gs", format!("required by scenario `{}`", self.scenario.name())));
        }
        if self.scenario == ScenarioKind::SwapDouble && self.swap.is_none() {
            return Err(Error::invalid("swap", "required by scenario `swap_double`"));
        }
        if self.scenario.is_constellation() && self.constellation.is_none() {
            return Err(Error::invalid("constellation", format!("required by scenario `{}`", self.scenario.name())));
        }
        if let Some(sw) = &self.sweep {
            if !SWEEP_PARAMETERS.contains(&sw.parameter.as_str()) {
                return Err(Error::invalid(
                    "sweep.parameter",
                    format!("unknown parameter `{}`; expected one of {}", sw.parameter, SWEEP_PARAMETERS.join(", ")),
                ));
            }
            if sw.values.is_empty() {
                return Err(Error::invalid("sweep.values", "must not be empty"));
            }
            for &v in &sw.values {
                let mut probe = self.clone();
                probe.sweep = None;
                probe.set_parameter(&sw.parameter, v)?;
                probe.validate()?;
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GeoGrid> {
        GeoGrid::new(self.grid.lat_step_deg, self.grid.lon_step_deg, &self.earth).map_err(|e| match e {
            Error::InvalidParameter { field, reason } => Error::InvalidParameter {
                field: field.replace("lat_step", "lat_step_deg").replace("lon_step", "lon_step_deg"),
                reason,
            },
            other => other,
        })
    }

    pub fn orbit(&self) -> OrbitSpec {
        self.orbit.to_orbit(&self.earth)
    }

    /// All satellites of the constellation, or the single orbit.
    pub fn orbits(&self) -> Vec<OrbitSpec> {
        let o = self.orbit();
        match self.constellation {
            Some(c) => o.ring(c.n_satellites),
            None => vec![o],
        }
    }

    pub fn setup(&self) -> SimSetup {
        SimSetup {
            earth: self.earth,
            channel: self.channel,
            source: self.source,
            noise: self.noise,
            bell: self.bell,
            plan: RoundPlan::bell_only(self.bases.unwrap_or_default()),
            sampling: self.sampling,
            seed: self.seed,
        }
    }

    pub fn swap_setup(&self) -> Option<SwapSetup> {
        self.swap.map(|s| SwapSetup {
            p_sw: s.p_sw,
            failed: s.failed,
        })
    }

    pub fn stem(&self) -> String {
        if self.output.stem.is_empty() {
            self.scenario.name().to_string()
        } else {
            self.output.stem.clone()
        }
    }

    /// Sets one of [`SWEEP_PARAMETERS`].
    pub fn set_parameter(&mut self, name: &str, v: f64) -> Result<()> {
        let count = |v: f64| -> Result<u32> {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(Error::invalid(format!("sweep {name}"), "must be a non-negative integer"))
            }
        };
        match name {
            "bell.t_acq" => self.bell.t_acq = v,
            "bell.confidence_n" => self.bell.confidence_n = v,
            "bell.n_runs" => self.bell.n_runs = count(v)? as usize,
            "source.pair_rate" => self.source.pair_rate = v,
            "noise.ground.bkg_rate" => self.noise.ground.bkg_rate = v,
            "noise.ground.dark_rate" => self.noise.ground.dark_rate = v,
            "noise.fixed.bkg_rate" => self.noise.fixed.get_or_insert(self.noise.ground).bkg_rate = v,
            "noise.fixed.dark_rate" => self.noise.fixed.get_or_insert(self.noise.ground).dark_rate = v,
            "noise.satellite.dark_rate" => self.noise.satellite.dark_rate = v,
            "swap.p_sw" => {
                self.swap
                    .get_or_insert(SwapConfig {
                        p_sw: v,
                        failed: FailedSwap::default(),
                    })
                    .p_sw = v
            }
            "qcs.n_min" => self.qcs.n_min = count(v)?,
            "qcs.target_precision" => self.qcs.target_precision = v,
            _ => return Err(Error::invalid("sweep.parameter", format!("unknown parameter `{name}`"))),
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Parses and validates a scenario file.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
