//! Long-format CSV input: one row per (unit, period).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use panelmix::PanelDataset;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct ColumnSpec {
    pub unit: String,
    pub period: String,
    pub y: String,
    pub x: Vec<String>,
    pub z: Vec<String>,
    pub delimiter: u8,
}

/// Sort key that orders numeric labels numerically and the rest lexically.
#[derive(Debug, Clone, PartialEq, PartialOrd)]
enum Label {
    Num(f64),
    Text(String),
}

impl Eq for Label {}

impl Ord for Label {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        use std::cmp::Ordering::*;
        match (self, other) {
            (Label::Num(a), Label::Num(b)) => a.total_cmp(b),
            (Label::Num(_), Label::Text(_)) => Less,
            (Label::Text(_), Label::Num(_)) => Greater,
            (Label::Text(a), Label::Text(b)) => a.cmp(b),
        }
    }
}

fn label(s: &str) -> (Label, String) {
    let t = s.trim();
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => (Label::Num(v), t.to_string()),
        _ => (Label::Text(t.to_string()), t.to_string()),
    }
}

pub fn ingest(path: &Path, spec: &ColumnSpec) -> Result<PanelDataset> {
    let file = std::fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    ingest_reader(file, spec)
}

pub fn ingest_reader<R: std::io::Read>(reader: R, spec: &ColumnSpec) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(spec.delimiter).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().context("cannot read header row")?.clone();
    let find = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| anyhow!("column '{name}' not found in header"))
    };
    let unit_col = find(&spec.unit)?;
    let period_col = find(&spec.period)?;
    let y_col = find(&spec.y)?;
    let x_cols = spec.x.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let z_cols = spec.z.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    // unit -> period -> (y, x, z)
    let mut rows: BTreeMap<(Label, String), BTreeMap<(Label, String), (f64, Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.with_context(|| format!("malformed row at line {line}"))?;
        let cell = |c: usize| -> Result<f64> {
            let raw = rec.get(c).ok_or_else(|| anyhow!("line {line}: missing column '{}'", &headers[c]))?;
            let v: f64 = raw
                .parse()
                .map_err(|_| anyhow!("line {line}, column '{}': '{raw}' is not a number", &headers[c]))?;
            if !v.is_finite() {
                bail!("line {line}, column '{}': value is not finite", &headers[c]);
            }
            Ok(v)
        };
        let unit = label(rec.get(unit_col).unwrap_or(""));
        let period = label(rec.get(period_col).unwrap_or(""));
        let y = cell(y_col)?;
        let x = x_cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>()?;
        let z = z_cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>()?;
        let entry = rows.entry(unit.clone()).or_default();
        if entry.insert(period.clone(), (y, x, z)).is_some() {
            bail!("duplicate row for unit '{}' period '{}' (line {line})", unit.1, period.1);
        }
    }
    if rows.is_empty() {
        bail!("input has no data rows");
    }

    let all_periods: BTreeSet<&(Label, String)> = rows.values().flat_map(|p| p.keys()).collect();
    let offending: Vec<&str> = rows
        .iter()
        .filter(|(_, p)| p.len() != all_periods.len())
        .map(|(u, _)| u.1.as_str())
        .collect();
    if !offending.is_empty() {
        bail!("unbalanced panel: expected {} periods, unit(s) {} have fewer", all_periods.len(), offending.join(", "));
    }

    let (n, t, q, p) = (rows.len(), all_periods.len(), x_cols.len(), z_cols.len());
    let mut y = Vec::with_capacity(n * t);
    let mut x = Vec::with_capacity(n * t * q);
    let mut z = Vec::with_capacity(n * t * p);
    let mut ids = Vec::with_capacity(n);
    for (unit, periods) in rows {
        ids.push(unit.1);
        for (_, (yy, xx, zz)) in periods {
            y.push(yy);
            x.extend(xx);
            z.extend(zz);
        }
    }
    PanelDataset::new(n, t, q, p, y, x, z, ids).map_err(|e| anyhow!(e))
}
