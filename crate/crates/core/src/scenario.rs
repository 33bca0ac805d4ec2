//! Runs a [`ScenarioConfig`] end to end and writes its outputs.
//!
//! All computation finishes before the first byte is written. Data files
//! depend only on the config, so reruns produce identical bytes whatever
//! the worker count; the manifest next to them adds the wall time and the
//! SHA-256 of each data file.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analytic;
use crate::apps::{pair_time_series, precision_shadow, qber_shadow, TimeSample};
use crate::config::{OutputFormat, ScenarioConfig, ScenarioKind};
use crate::error::{Error, Result};
use crate::io::{self, MapSummary};
use crate::shadows::{
    bell_shadow_double_downlink, bell_shadow_single_downlink, bell_shadow_single_uplink,
    bell_shadow_swapped, constellation_shadow, ConstellationMode, ShadowMap,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Shadow,
    Timeseries,
    Analytic,
    Sweep,
}

impl Verb {
    /// What `run` does for a scenario when no verb is given.
    pub fn default_for(cfg: &ScenarioConfig) -> Verb {
        if cfg.scenario == ScenarioKind::AnalyticTables {
            Verb::Analytic
        } else if cfg.sweep.is_some() {
            Verb::Sweep
        } else if cfg.timeseries.is_some() && cfg.station_b.is_some() {
            Verb::Timeseries
        } else {
            Verb::Shadow
        }
    }
}

/// Runs `f` on a dedicated pool of `workers` threads (0 picks rayon's default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// One map per epoch.
pub fn build_maps(cfg: &ScenarioConfig) -> Result<Vec<ShadowMap>> {
    cfg.validate()?;
    if !cfg.scenario.is_map() {
        return Err(Error::invalid("scenario", "analytic_tables produces no shadow map"));
    }
    let setup = cfg.setup();
    let grid = cfg.grid()?;
    let orbit = cfg.orbit();
    let fixed_at = |t: f64| {
        cfg.fixed_gs
            .as_ref()
            .map(|s| s.resolve(&orbit, &cfg.earth, t))
            .ok_or_else(|| Error::invalid("fixed_gs", "missing"))
    };
    cfg.epochs
        .iter()
        .map(|&t| match cfg.scenario {
            ScenarioKind::SingleDownlink => bell_shadow_single_downlink(&setup, &orbit, &grid, t),
            ScenarioKind::SingleUplink => bell_shadow_single_uplink(&setup, &orbit, &grid, t),
            ScenarioKind::DoubleDownlink => bell_shadow_double_downlink(&setup, &orbit, &fixed_at(t)?, &grid, t),
            ScenarioKind::SwapDouble => {
                let swap = cfg.swap_setup().ok_or_else(|| Error::invalid("swap", "missing"))?;
                bell_shadow_swapped(&setup, &orbit, &fixed_at(t)?, &grid, swap, t)
            }
            ScenarioKind::ConstellationDouble => {
                constellation_shadow(&setup, &cfg.orbits(), ConstellationMode::DoubleDownlink, &grid, t)
            }
            ScenarioKind::ConstellationRepeater => {
                constellation_shadow(&setup, &cfg.orbits(), ConstellationMode::Repeater, &grid, t)
            }
            ScenarioKind::Qkd => qber_shadow(&setup, &orbit, &fixed_at(t)?, &grid, &cfg.qkd, t),
            ScenarioKind::QcsPrecision => precision_shadow(&setup, &orbit, &grid, &cfg.qcs, t, false),
            ScenarioKind::QcsSecure => precision_shadow(&setup, &orbit, &grid, &cfg.qcs, t, true),
            ScenarioKind::AnalyticTables => unreachable!("checked above"),
        })
        .collect()
}

/// Double-downlink pass statistics between `fixed_gs` and `station_b`.
pub fn build_timeseries(cfg: &ScenarioConfig) -> Result<Vec<TimeSample>> {
    cfg.validate()?;
    let ts = cfg
        .timeseries
        .ok_or_else(|| Error::invalid("timeseries", "required for a time series"))?;
    let orbit = cfg.orbit();
    let station = |s: &Option<crate::config::StationConfig>, name: &str| {
        s.as_ref()
            .map(|s| s.resolve(&orbit, &cfg.earth, ts.t_start))
            .ok_or_else(|| Error::invalid(name, "required for a time series"))
    };
    let a = station(&cfg.fixed_gs, "fixed_gs")?;
    let b = station(&cfg.station_b, "station_b")?;
    pair_time_series(&cfg.setup(), &orbit, &a, &b, &cfg.qkd, ts.t_start, ts.t_end, ts.dt)
}

pub type Table = (Vec<&'static str>, Vec<Vec<Option<f64>>>);

/// Poisson-mixture distribution of `S` and success statistics for every
/// (genuine fraction, mean coincidence number) pair.
pub fn analytic_tables(cfg: &ScenarioConfig) -> Result<(Table, Table)> {
    cfg.validate()?;
    let mut dist = Vec::new();
    let mut succ = Vec::new();
    for &f in &cfg.analytic.genuine_fractions {
        let p1 = analytic::effective_p1(f)?;
        for &nbar in &cfg.analytic.nbars {
            for (s, p) in analytic::distribution(p1, nbar, None)? {
                dist.push(vec![Some(f), Some(p1), Some(nbar), Some(s), Some(p)]);
            }
            let m = analytic::moments(p1, nbar)?;
            succ.push(vec![
                Some(f),
                Some(p1),
                Some(nbar),
                Some(analytic::p_success(p1, nbar)?),
                Some(m.mass),
                Some(m.mean),
                Some(m.variance),
            ]);
        }
    }
    Ok((
        (vec!["genuine_fraction", "p1", "nbar", "s", "probability"], dist),
        (
            vec!["genuine_fraction", "p1", "nbar", "p_success", "mass", "mean", "variance"],
            succ,
        ),
    ))
}

/// Map summaries along the configured ladder; every step reuses the seed.
pub fn run_sweep(cfg: &ScenarioConfig) -> Result<Vec<(f64, MapSummary)>> {
    cfg.validate()?;
    let sw = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::invalid("sweep", "required for a sweep"))?;
    let mut rows = Vec::new();
    for &v in &sw.values {
        let mut step = cfg.clone();
        step.sweep = None;
        step.set_parameter(&sw.parameter, v)?;
        for m in build_maps(&step)? {
            rows.push((v, MapSummary::of(&m)));
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OutputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub outputs: Vec<OutputFile>,
    pub manifest: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    verb: Verb,
    scenario: &'static str,
    seed: u64,
    workers: usize,
    wall_time_s: f64,
    outputs: Vec<ManifestEntry>,
    config: &'a ScenarioConfig,
    config_toml: String,
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Renders every data file of `verb` in memory.
pub fn render(cfg: &ScenarioConfig, verb: Verb) -> Result<Vec<(String, Vec<u8>)>> {
    let stem = cfg.stem();
    let mut files = Vec::new();
    match verb {
        Verb::Shadow => {
            let maps = build_maps(cfg)?;
            let mut buf = Vec::new();
            let name = match cfg.output.format {
                OutputFormat::Geojson => {
                    io::write_geojson(&maps, &mut buf)?;
                    format!("{stem}.geojson")
                }
                OutputFormat::Csv => {
                    io::write_shadow_csv(&maps, &mut buf)?;
                    format!("{stem}.csv")
                }
            };
            files.push((name, buf));
        }
        Verb::Timeseries => {
            let mut buf = Vec::new();
            io::write_timeseries_csv(&build_timeseries(cfg)?, &mut buf)?;
            files.push((format!("{stem}_timeseries.csv"), buf));
        }
        Verb::Analytic => {
            let ((h1, r1), (h2, r2)) = analytic_tables(cfg)?;
            let mut a = Vec::new();
            io::write_table(&h1, &r1, &mut a)?;
            let mut b = Vec::new();
            io::write_table(&h2, &r2, &mut b)?;
            files.push((format!("{stem}_distribution.csv"), a));
            files.push((format!("{stem}_success.csv"), b));
        }
        Verb::Sweep => {
            let rows = run_sweep(cfg)?;
            let param = &cfg.sweep.as_ref().expect("validated by run_sweep").parameter;
            let mut buf = Vec::new();
            io::write_sweep_csv(param, &rows, &mut buf)?;
            files.push((format!("{stem}_sweep.csv"), buf));
        }
    }
    Ok(files)
}

fn write_all(dir: &Path, files: &[(String, Vec<u8>)], written: &mut Vec<PathBuf>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, bytes) in files {
        let path = dir.join(name);
        written.push(path.clone());
        fs::write(&path, bytes)?;
    }
    Ok(())
}

/// Computes `verb` for `cfg` on `workers` threads and writes the data files
/// plus `<stem>_<verb>.manifest.json` into `cfg.output.dir`. On failure no
/// output of this run is left behind.
pub fn run_scenario(cfg: &ScenarioConfig, verb: Verb, workers: usize) -> Result<RunReport> {
    let start = Instant::now();
    cfg.validate()?;
    let files = with_workers(workers, || render(cfg, verb))??;
    let wall = start.elapsed().as_secs_f64();
    let dir = &cfg.output.dir;
    let verb_name = match verb {
        Verb::Shadow => "shadow",
        Verb::Timeseries => "timeseries",
        Verb::Analytic => "analytic",
        Verb::Sweep => "sweep",
    };
    let manifest_path = dir.join(format!("{}_{verb_name}.manifest.json", cfg.stem()));
    let outputs: Vec<OutputFile> = files
        .iter()
        .map(|(name, bytes)| OutputFile {
            path: dir.join(name),
            sha256: sha256_hex(bytes),
        })
        .collect();
    let manifest = Manifest {
        tool: "bellshadow",
        version: env!("CARGO_PKG_VERSION"),
        verb,
        scenario: cfg.scenario.name(),
        seed: cfg.seed,
        workers,
        wall_time_s: wall,
        outputs: files
            .iter()
            .map(|(name, bytes)| ManifestEntry {
                file: name.clone(),
                sha256: sha256_hex(bytes),
            })
            .collect(),
        config: cfg,
        config_toml: cfg.to_toml()?,
    };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    manifest_bytes.push(b'\n');

    let mut written = Vec::new();
    let result = write_all(dir, &files, &mut written).and_then(|_| {
        written.push(manifest_path.clone());
        fs::write(&manifest_path, &manifest_bytes).map_err(Error::from)
    });
    if let Err(e) = result {
        for p in &written {
            let _ = fs::remove_file(p);
        }
        return Err(e);
    }
    Ok(RunReport {
        outputs,
        manifest: manifest_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AnalyticConfig, StationConfig, TimeSeriesConfig};

    fn small(kind: ScenarioKind) -> ScenarioConfig {
        let mut c = ScenarioConfig::new(kind);
        c.grid.lat_step_deg = 5.0;
        c.grid.lon_step_deg = 5.0;
        c.bell.n_runs = 4;
        c.seed = 11;
        c
    }

    #[test]
    fn default_verbs() {
        assert_eq!(Verb::default_for(&small(ScenarioKind::AnalyticTables)), Verb::Analytic);
        assert_eq!(Verb::default_for(&small(ScenarioKind::SingleDownlink)), Verb::Shadow);
    }

    #[test]
    fn every_map_scenario_builds() {
        use ScenarioKind::*;
        for kind in [
            SingleDownlink,
            SingleUplink,
            DoubleDownlink,
            SwapDouble,
            ConstellationDouble,
            ConstellationRepeater,
            Qkd,
            QcsPrecision,
            QcsSecure,
        ] {
            let mut c = small(kind);
            c.fixed_gs = Some(StationConfig::from_nadir("ref", 0.0, 0.0));
            c.swap = Some(crate::config::SwapConfig {
                p_sw: 0.9,
                failed: Default::default(),
            });
            c.constellation = Some(crate::config::ConstellationConfig { n_satellites: 3 });
            c.epochs = vec![0.0, 60.0];
            let maps = build_maps(&c).unwrap();
            assert_eq!(maps.len(), 2);
            assert!(maps.iter().all(|m| m.scenario == kind.name() && !m.cells.is_empty()), "{kind:?}");
        }
    }

    #[test]
    fn analytic_tables_are_normalized() {
        let mut c = small(ScenarioKind::AnalyticTables);
        c.analytic = AnalyticConfig {
            genuine_fractions: vec![0.5, 1.0],
            nbars: vec![5.0, 30.0],
        };
        let ((_, dist), (_, succ)) = analytic_tables(&c).unwrap();
        assert_eq!(succ.len(), 4);
        for row in &succ {
            let (f, nbar, mass) = (row[0].unwrap(), row[2].unwrap(), row[4].unwrap());
            let total: f64 = dist
                .iter()
                .filter(|r| r[0] == Some(f) && r[2] == Some(nbar))
                .map(|r| r[4].unwrap())
                .sum();
            assert!((total - mass).abs() < 1e-9);
            // everything except the n = 0 term
            assert!((mass - (1.0 - (-nbar).exp())).abs() < 1e-6);
        }
    }

    #[test]
    fn timeseries_requires_stations() {
        let mut c = small(ScenarioKind::DoubleDownlink);
        c.fixed_gs = Some(StationConfig::at("a", 0.0, 0.0));
        c.timeseries = Some(TimeSeriesConfig {
            t_start: -30.0,
            t_end: 30.0,
            dt: 30.0,
        });
        assert!(build_timeseries(&c).is_err());
        c.station_b = Some(StationConfig::at("b", 1.0, 1.0));
        let ts = build_timeseries(&c).unwrap();
        assert_eq!(ts.iter().map(|s| s.t).collect::<Vec<_>>(), vec![-30.0, 0.0, 30.0]);
        assert!(ts.iter().all(|s| s.visible));
    }

    #[test]
    fn run_writes_data_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(ScenarioKind::SingleDownlink);
        c.output.dir = dir.path().to_path_buf();
        let r = run_scenario(&c, Verb::Shadow, 2).unwrap();
        assert_eq!(r.outputs.len(), 1);
        let bytes = fs::read(&r.outputs[0].path).unwrap();
        assert_eq!(sha256_hex(&bytes), r.outputs[0].sha256);
        let m: serde_json::Value = serde_json::from_slice(&fs::read(&r.manifest).unwrap()).unwrap();
        assert_eq!(m["seed"], 11);
        assert_eq!(m["outputs"][0]["sha256"], r.outputs[0].sha256.as_str());
        let echoed = crate::config::parse_config(m["config_toml"].as_str().unwrap()).unwrap();
        assert_eq!(echoed, c);
    }

    #[test]
    fn failed_run_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(ScenarioKind::DoubleDownlink);
        c.output.dir = dir.path().join("out");
        // fixed station on the far side of the planet
        c.fixed_gs = Some(StationConfig::from_nadir("far", 120.0, 0.0));
        assert!(matches!(run_scenario(&c, Verb::Shadow, 1), Err(Error::NotVisible { .. })));
        assert!(!c.output.dir.exists() || fs::read_dir(&c.output.dir).unwrap().next().is_none());
    }
}
