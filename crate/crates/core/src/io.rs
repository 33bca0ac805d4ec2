//! Serialized outputs: shadow maps as GeoJSON or CSV, pass time series,
//! analytic tables and parameter sweeps.
//!
//! Cells outside visibility are never listed. Writers are deterministic:
//! the same maps produce the same bytes.

use std::collections::BTreeSet;
use std::io::Write;

use serde_json::{json, Map, Value};

use crate::apps::TimeSample;
use crate::error::{Error, Result};
use crate::shadows::{ShadowMap, Status, StatusFilter};

pub const SHADOWMAP_SCHEMA_ID: &str = "bellshadow/shadowmap/v1";

/// JSON Schema of the GeoJSON written by [`write_geojson`].
pub const SHADOWMAP_SCHEMA: &str = include_str!("../schema/shadowmap-v1.json");

fn check_same_run(maps: &[ShadowMap]) -> Result<()> {
    let Some(first) = maps.first() else {
        return Err(Error::invalid("maps", "nothing to write"));
    };
    if maps
        .iter()
        .any(|m| m.scenario != first.scenario || m.seed != first.seed || m.grid != first.grid)
    {
        return Err(Error::invalid("maps", "snapshots must share scenario, seed and grid"));
    }
    Ok(())
}

fn status_name(s: Status) -> &'static str {
    match s {
        Status::OutsideVisibility => "outside_visibility",
        Status::VisibleNoViolation => "visible_no_violation",
        Status::Violation => "violation",
    }
}

fn finite(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

/// FeatureCollection with one Point feature per evaluated cell and snapshot.
pub fn geojson_value(maps: &[ShadowMap]) -> Result<Value> {
    check_same_run(maps)?;
    let first = &maps[0];
    let mut features = Vec::new();
    for m in maps {
        for c in &m.cells {
            let mut p = Map::new();
            p.insert("epoch".into(), json!(m.epoch));
            p.insert("index".into(), json!(c.index));
            p.insert("status".into(), json!(status_name(c.status)));
            p.insert("area_km2".into(), json!(c.area_km2));
            p.insert("s_mean".into(), c.s_mean.map_or(Value::Null, finite));
            p.insert("s_std".into(), c.s_std.map_or(Value::Null, finite));
            p.insert("valid_runs".into(), json!(c.valid_runs));
            if let Some(k) = c.component {
                p.insert("component".into(), json!(k));
            }
            if !c.satellites.is_empty() {
                p.insert("satellites".into(), json!(c.satellites));
            }
            let aux: Map<String, Value> = c.aux.iter().map(|(k, v)| (k.clone(), finite(*v))).collect();
            p.insert("aux".into(), Value::Object(aux));
            features.push(json!({
                "type": "Feature",
                "geometry": { "type": "Point", "coordinates": [c.lon, c.lat] },
                "properties": Value::Object(p),
            }));
        }
    }
    Ok(json!({
        "type": "FeatureCollection",
        "bellshadow": {
            "schema": SHADOWMAP_SCHEMA_ID,
            "scenario": first.scenario,
            "seed": first.seed,
            "grid": first.grid,
            "epochs": maps.iter().map(|m| m.epoch).collect::<Vec<_>>(),
        },
        "features": features,
    }))
}

pub fn write_geojson(maps: &[ShadowMap], mut w: impl Write) -> Result<()> {
    let v = geojson_value(maps)?;
    serde_json::to_writer_pretty(&mut w, &v).map_err(|e| Error::Io(e.to_string()))?;
    w.write_all(b"\n")?;
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// One row per evaluated cell and snapshot. Aux entries become trailing
/// columns named `aux_<key>`, sorted by key.
pub fn write_shadow_csv(maps: &[ShadowMap], w: impl Write) -> Result<()> {
    check_same_run(maps)?;
    let aux_keys: BTreeSet<&str> = maps
        .iter()
        .flat_map(|m| m.cells.iter())
        .flat_map(|c| c.aux.keys().map(String::as_str))
        .collect();
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = [
        "epoch", "index", "lat", "lon", "area_km2", "status", "s_mean", "s_std", "valid_runs",
        "component", "satellites",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(aux_keys.iter().map(|k| format!("aux_{k}")));
    out.write_record(&header).map_err(csv_err)?;
    for m in maps {
        for c in &m.cells {
            let mut row = vec![
                m.epoch.to_string(),
                c.index.to_string(),
                c.lat.to_string(),
                c.lon.to_string(),
                c.area_km2.to_string(),
                status_name(c.status).to_string(),
                fmt_opt(c.s_mean),
                fmt_opt(c.s_std),
                c.valid_runs.to_string(),
                c.component.map(|k| k.to_string()).unwrap_or_default(),
                c.satellites.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";"),
            ];
            row.extend(aux_keys.iter().map(|k| fmt_opt(c.aux.get(*k).copied())));
            out.write_record(&row).map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_timeseries_csv(samples: &[TimeSample], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "s_mean", "s_std", "qber_mean", "qber_std", "visible"])
        .map_err(csv_err)?;
    for s in samples {
        out.write_record([
            s.t.to_string(),
            fmt_opt(s.s_mean),
            fmt_opt(s.s_std),
            fmt_opt(s.qber_mean),
            fmt_opt(s.qber_std),
            (s.visible as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Generic numeric table; `None` renders as an empty field.
pub fn write_table(header: &[&str], rows: &[Vec<Option<f64>>], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header).map_err(csv_err)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::invalid("table", "row width differs from header"));
        }
        out.write_record(r.iter().map(|x| fmt_opt(*x))).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Summary of one map, as used by parameter sweeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapSummary {
    pub epoch: f64,
    pub violation_cells: usize,
    pub violation_area_km2: f64,
    pub visible_cells: usize,
    pub components: usize,
}

impl MapSummary {
    pub fn of(map: &ShadowMap) -> Self {
        MapSummary {
            epoch: map.epoch,
            violation_cells: map.count(StatusFilter::Violation),
            violation_area_km2: crate::shadows::shadow_area(map, StatusFilter::Violation),
            visible_cells: map.count(StatusFilter::Visible),
            components: map.component_count(),
        }
    }
}

pub fn write_sweep_csv(parameter: &str, rows: &[(f64, MapSummary)], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        parameter,
        "epoch",
        "violation_cells",
        "violation_area_km2",
        "visible_cells",
        "components",
    ])
    .map_err(csv_err)?;
    for (v, s) in rows {
        out.write_record([
            v.to_string(),
            s.epoch.to_string(),
            s.violation_cells.to_string(),
            s.violation_area_km2.to_string(),
            s.visible_cells.to_string(),
            s.components.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
