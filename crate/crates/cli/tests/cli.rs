use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
scenario = "single_downlink"
seed = 3
epochs = [0.0, 120.0]

[grid]
lat_step_deg = 5.0
lon_step_deg = 5.0

[channel]
atm_zenith_transmittance = 1.0
pointing_efficiency = 0.3

[noise.ground]
bkg_rate = 1000.0
dark_rate = 100.0

[bell]
t_acq = 1e-3

[output]
stem = "small"
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bellshadow"));
    c.env_remove("BELLSHADOW_WORKERS");
    c
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("scenario.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .map(|rd| rd.map(|e| e.unwrap().file_name().into_string().unwrap()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

#[test]
fn shadow_writes_geojson_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let o = run(&["shadow", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(listing(&out), ["small.geojson", "small_shadow.manifest.json"]);

    let stdout = String::from_utf8(o.stdout).unwrap();
    let first = stdout.lines().next().unwrap();
    let (digest, path) = first.split_once("  ").unwrap();
    assert_eq!(digest.len(), 64);
    assert!(path.ends_with("small.geojson"));

    let map: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("small.geojson")).unwrap()).unwrap();
    assert_eq!(map["bellshadow"]["epochs"], serde_json::json!([0.0, 120.0]));
    assert_eq!(map["bellshadow"]["seed"], 3);

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("small_shadow.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["verb"], "shadow");
    assert_eq!(manifest["outputs"][0]["sha256"], digest);
}

#[test]
fn seed_and_format_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("csv");
    let o = run(&[
        "shadow", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "9",
        "--format", "csv",
    ]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(out.join("small.csv")).unwrap();
    assert!(text.starts_with("epoch,index,lat,lon,"));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("small_shadow.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 9);
}

#[test]
fn worker_count_does_not_change_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let mut files = Vec::new();
    for (i, workers) in ["1", "3"].iter().enumerate() {
        let out = tmp.path().join(format!("w{i}"));
        let mut c = bin();
        if i == 0 {
            c.args(["--workers", workers]);
        } else {
            c.env("BELLSHADOW_WORKERS", workers);
        }
        let o = c
            .args(["shadow", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(o.status.success());
        let manifest: serde_json::Value = serde_json::from_slice(
            &std::fs::read(out.join("small_shadow.manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest["workers"].to_string(), *workers);
        files.push(std::fs::read(out.join("small.geojson")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn analytic_tables_written() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "scenario = \"analytic_tables\"\n[analytic]\ngenuine_fractions = [0.8]\nnbars = [10.0]\n",
    );
    let out = tmp.path().join("a");
    let o = run(&["analytic", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let names = listing(&out);
    assert_eq!(names.len(), 3, "{names:?}");
    assert!(names.iter().any(|n| n.ends_with("_distribution.csv")));
    assert!(names.iter().any(|n| n.ends_with("_success.csv")));
}

#[test]
fn bad_config_fails_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("t_acq = 1e-3", "t_acq = -1.0"));
    let out = tmp.path().join("bad");
    let o = run(&["shadow", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("bell.t_acq"), "{err}");
    assert!(listing(&out).is_empty());
}

#[test]
fn unknown_field_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}\n[qcs]\nnmin = 3\n"));
    let o = run(&["shadow", "-c", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8(o.stderr).unwrap().contains("nmin"));
}

#[test]
fn timeseries_needs_second_station() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("ts");
    let o = run(&["timeseries", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(listing(&out).is_empty());
}

#[test]
fn schema_is_printed() {
    let o = run(&["schema"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["$id"], "bellshadow/shadowmap/v1");
}
