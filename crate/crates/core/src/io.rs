//! Dyadic CSV files: `origin,destination,<value>` with one row per dyad.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{CounterfactualSpec, DistanceMatrix, FlowMatrix};

/// Values keyed by dyad; NaN where a dyad has no row.
#[derive(Debug, Clone, PartialEq)]
pub struct DyadicTable {
    pub labels: Vec<String>,
    pub values: DMatrix<f64>,
}

/// Parses `origin,destination,<value_column>`. Labels are taken in order of
/// first appearance unless `labels` fixes them, in which case unknown labels
/// are an error.
pub fn parse_dyadic<R: Read>(reader: R, value_column: &str, labels: Option<&[String]>) -> Result<DyadicTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { row: 1, message: e.to_string() })?
        .clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 1,
            message: format!("missing column {name:?}; expected origin,destination,{value_column}"),
        })
    };
    let (c_o, c_d, c_v) = (col("origin")?, col("destination")?, col(value_column)?);
    let fixed = labels.is_some();
    let mut names: Vec<String> = labels.map(<[String]>::to_vec).unwrap_or_default();
    let mut index: HashMap<String, usize> = names.iter().enumerate().map(|(k, l)| (l.clone(), k)).collect();
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        let mut id = |l: &str| -> Result<usize> {
            if let Some(&i) = index.get(l) {
                return Ok(i);
            }
            if fixed {
                return Err(Error::Parse { row, message: format!("unknown location {l:?}") });
            }
            names.push(l.to_string());
            index.insert(l.to_string(), names.len() - 1);
            Ok(names.len() - 1)
        };
        let o = id(rec.get(c_o).unwrap_or(""))?;
        let d = id(rec.get(c_d).unwrap_or(""))?;
        let raw = rec.get(c_v).unwrap_or("");
        let v: f64 = raw.parse().map_err(|_| Error::Parse {
            row,
            message: format!("not a number: {raw:?}"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse { row, message: format!("value must be finite, got {raw:?}") });
        }
        rows.push((row, o, d, v));
    }
    let n = names.len();
    let mut values = DMatrix::from_element(n, n, f64::NAN);
    for (row, o, d, v) in rows {
        if !values[(o, d)].is_nan() {
            return Err(Error::Parse { row, message: format!("duplicate dyad {} -> {}", names[o], names[d]) });
        }
        values[(o, d)] = v;
    }
    Ok(DyadicTable { labels: names, values })
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Flows from `origin,destination,flow`; missing dyads are zero.
pub fn parse_flows<R: Read>(reader: R) -> Result<FlowMatrix> {
    let t = parse_dyadic(reader, "flow", None)?;
    if t.values.iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidInput("flows must be non-negative".into()));
    }
    FlowMatrix::new(t.labels, t.values.map(|v| if v.is_nan() { 0.0 } else { v }))
}

pub fn read_flows(path: &Path) -> Result<FlowMatrix> {
    parse_flows(open(path)?)
}

/// Distances from `origin,destination,distance` aligned to `labels`. Every
/// off-diagonal dyad must be present; the diagonal defaults to one.
pub fn parse_distances<R: Read>(reader: R, labels: &[String]) -> Result<DistanceMatrix> {
    let t = parse_dyadic(reader, "distance", Some(labels))?;
    let n = labels.len();
    let mut m = t.values;
    for i in 0..n {
        for j in 0..n {
            if m[(i, j)].is_nan() {
                if i != j {
                    return Err(Error::InvalidInput(format!("no distance for {} -> {}", labels[i], labels[j])));
                }
                m[(i, j)] = 1.0;
            }
        }
    }
    DistanceMatrix::new(labels.to_vec(), m)
}

pub fn read_distances(path: &Path, labels: &[String]) -> Result<DistanceMatrix> {
    parse_distances(open(path)?, labels)
}

/// Log trade costs from `origin,destination,cost` (cost levels, > 0).
/// Every off-diagonal dyad must be present; the diagonal defaults to zero.
pub fn parse_log_costs<R: Read>(reader: R, labels: &[String]) -> Result<DMatrix<f64>> {
    let t = parse_dyadic(reader, "cost", Some(labels))?;
    let n = labels.len();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = t.values[(i, j)];
            if v.is_nan() {
                if i != j {
                    return Err(Error::InvalidInput(format!("no cost for {} -> {}", labels[i], labels[j])));
                }
                continue;
            }
            if v <= 0.0 {
                return Err(Error::InvalidInput(format!("cost for {} -> {} must be positive", labels[i], labels[j])));
            }
            out[(i, j)] = v.ln();
        }
    }
    Ok(out)
}

pub fn read_log_costs(path: &Path, labels: &[String]) -> Result<DMatrix<f64>> {
    parse_log_costs(open(path)?, labels)
}

/// Proportional cost changes from `origin,destination,tau`; missing dyads
/// are unchanged.
pub fn parse_counterfactual<R: Read>(reader: R, labels: &[String]) -> Result<CounterfactualSpec> {
    let t = parse_dyadic(reader, "tau", Some(labels))?;
    CounterfactualSpec::new(t.values.map(|v| if v.is_nan() { 1.0 } else { v }))
}

pub fn read_counterfactual(path: &Path, labels: &[String]) -> Result<CounterfactualSpec> {
    parse_counterfactual(open(path)?, labels)
}

/// `origin,destination,<column>` rows in column-major dyad order, skipping
/// entries for which `keep` is false.
pub fn dyadic_csv(labels: &[String], values: &DMatrix<f64>, column: &str, keep: impl Fn(usize, usize, f64) -> bool) -> String {
    let mut out = format!("origin,destination,{column}\n");
    let n = labels.len();
    for j in 0..n {
        for i in 0..n {
            let v = values[(i, j)];
            if keep(i, j, v) {
                out.push_str(&format!("{},{},{v:?}\n", labels[i], labels[j]));
            }
        }
    }
    out
}
