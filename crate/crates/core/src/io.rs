//! File formats shared by the pipeline stages.
//!
//! Panels are long-format CSV with a header: `time,node,<value column>`.
//! Structured artifacts are pretty-printed JSON. Every writer goes through
//! [`write_atomic`], which writes a sibling temp file and renames it over
//! the destination.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Dense `[time][node]` matrix.
pub type Panel<T> = Vec<Vec<T>>;

/// Serialise `f64` infinities as JSON `null` and read `null` back as `+inf`.
pub mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Write a CSV with `header` and pre-formatted rows.
pub fn write_csv_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Shortest round-tripping representation; infinities as `inf`/`-inf`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

/// Long-format `time,node,<column>` panel.
pub fn write_panel_csv(path: &Path, column: &str, panel: &Panel<f64>) -> Result<()> {
    let rows = panel.iter().enumerate().flat_map(|(t, row)| {
        row.iter()
            .enumerate()
            .map(move |(i, v)| vec![t.to_string(), i.to_string(), fmt_f64(*v)])
    });
    write_csv_rows(path, &["time", "node", column], rows)
}

pub fn write_mask_csv(path: &Path, mask: &Panel<bool>) -> Result<()> {
    let rows = mask.iter().enumerate().flat_map(|(t, row)| {
        row.iter()
            .enumerate()
            .map(move |(i, v)| vec![t.to_string(), i.to_string(), u8::from(*v).to_string()])
    });
    write_csv_rows(path, &["time", "node", "is_anomaly"], rows)
}

fn read_long_csv(path: &Path, column: &str) -> Result<Panel<String>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("{}: missing column `{name}`", path.display())))
    };
    let (ti, ni, vi) = (find("time")?, find("node")?, find(column)?);
    let mut cells: Vec<(usize, usize, String)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |idx: usize| -> Result<usize> {
            rec[idx]
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{}: bad index `{}`", path.display(), &rec[idx])))
        };
        cells.push((parse(ti)?, parse(ni)?, rec[vi].trim().to_string()));
    }
    if cells.is_empty() {
        return Ok(Vec::new());
    }
    let t_max = cells.iter().map(|c| c.0).max().unwrap_or(0);
    let n_max = cells.iter().map(|c| c.1).max().unwrap_or(0);
    let mut panel: Panel<Option<String>> = vec![vec![None; n_max + 1]; t_max + 1];
    for (t, n, v) in cells {
        if panel[t][n].replace(v).is_some() {
            return Err(Error::invalid(format!("{}: duplicate entry at time {t}, node {n}", path.display())));
        }
    }
    panel
        .into_iter()
        .enumerate()
        .map(|(t, row)| {
            row.into_iter()
                .enumerate()
                .map(|(n, v)| {
                    v.ok_or_else(|| Error::invalid(format!("{}: missing entry at time {t}, node {n}", path.display())))
                })
                .collect()
        })
        .collect()
}

pub fn read_panel_csv(path: &Path, column: &str) -> Result<Panel<f64>> {
    read_long_csv(path, column)?
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::invalid(format!("{}: bad number `{s}`", path.display())))
                })
                .collect()
        })
        .collect()
}

pub fn read_mask_csv(path: &Path) -> Result<Panel<bool>> {
    read_long_csv(path, "is_anomaly")?
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|s| match s.as_str() {
                    "0" | "false" => Ok(false),
                    "1" | "true" => Ok(true),
                    other => Err(Error::invalid(format!("{}: bad flag `{other}`", path.display()))),
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panel_round_trip_including_infinities() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let panel = vec![vec![0.1, f64::INFINITY], vec![-3.5e-9, f64::NEG_INFINITY]];
        write_panel_csv(&path, "value", &panel).unwrap();
        assert_eq!(read_panel_csv(&path, "value").unwrap(), panel);
        let first = std::fs::read(&path).unwrap();
        write_panel_csv(&path, "value", &read_panel_csv(&path, "value").unwrap()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mask = vec![vec![true, false, false], vec![false, false, true]];
        write_mask_csv(&path, &mask).unwrap();
        assert_eq!(read_mask_csv(&path).unwrap(), mask);
    }

    #[test]
    fn missing_column_and_gaps_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "time,node,value\n0,0,1\n0,2,1\n").unwrap();
        assert!(read_panel_csv(&path, "value").is_err());
        assert!(read_panel_csv(&path, "p").is_err());
    }
}
