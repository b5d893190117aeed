//! Comparison tables: rows are methods with an inference mode, columns are label
//! fractions, followed by a per-image appendix from which every cell can be recomputed.

use std::path::Path;

use super::{InferenceMode, MetricsReport};
use crate::container::write_atomic;
use crate::error::{MmsError, Result};

/// Line separating the summary table from the per-image appendix.
pub const PER_IMAGE_MARKER: &str = "# per-image";
pub const PER_IMAGE_HEADER: [&str; 6] = ["method", "label_fraction", "mode", "path", "dsc", "error"];

#[derive(Clone, Debug, PartialEq)]
pub struct ReportLabel {
    pub method: String,
    pub label_fraction: f64,
}

impl ReportLabel {
    pub fn new(method: impl Into<String>, label_fraction: f64) -> Self {
        Self {
            method: method.into(),
            label_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerImageRow {
    pub method: String,
    pub label_fraction: f64,
    pub mode: InferenceMode,
    pub path: String,
    pub dsc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub mode: InferenceMode,
    /// Mean DSC per column; empty when nothing was scored.
    pub values: Vec<Option<f64>>,
}

impl TableRow {
    pub fn name(&self) -> String {
        format!("{} ({})", self.method, self.mode)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub fractions: Vec<f64>,
    pub rows: Vec<TableRow>,
    pub per_image: Vec<PerImageRow>,
}

/// Column heading of a label fraction, e.g. `l_a=5%`.
pub fn fraction_label(fraction: f64) -> String {
    let pct = format!("{:.6}", fraction * 100.0);
    let pct = pct.trim_end_matches('0').trim_end_matches('.');
    format!("l_a={pct}%")
}

fn parse_fraction_label(label: &str) -> Result<f64> {
    label
        .strip_prefix("l_a=")
        .and_then(|s| s.strip_suffix('%'))
        .and_then(|s| s.parse::<f64>().ok())
        .map(|p| p / 100.0)
        .ok_or_else(|| MmsError::Validation(format!("bad column heading `{label}`")))
}

fn column_of(fraction: f64) -> f64 {
    parse_fraction_label(&fraction_label(fraction)).expect("formatted heading parses")
}

impl ReportTable {
    /// Builds the summary for the `(method, mode)` rows in `keys`: each cell is the mean over
    /// the scored images of that row and column.
    pub fn build(keys: &[(String, InferenceMode)], per_image: Vec<PerImageRow>) -> Self {
        let mut fractions: Vec<f64> = Vec::new();
        for r in &per_image {
            let col = column_of(r.label_fraction);
            if !fractions.contains(&col) {
                fractions.push(col);
            }
        }
        fractions.sort_by(f64::total_cmp);
        let mut unique: Vec<(String, InferenceMode)> = Vec::new();
        for k in keys {
            if !unique.contains(k) {
                unique.push(k.clone());
            }
        }
        let rows = unique
            .into_iter()
            .map(|(method, mode)| {
                let values = fractions
                    .iter()
                    .map(|&col| {
                        let scores: Vec<f64> = per_image
                            .iter()
                            .filter(|r| r.method == method && r.mode == mode && column_of(r.label_fraction) == col)
                            .filter_map(|r| r.dsc)
                            .collect();
                        (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
                    })
                    .collect();
                TableRow { method, mode, values }
            })
            .collect();
        Self {
            fractions,
            rows,
            per_image,
        }
    }

    pub fn keys(&self) -> Vec<(String, InferenceMode)> {
        self.rows.iter().map(|r| (r.method.clone(), r.mode)).collect()
    }

    /// Combines tables, recomputing every cell from the joined appendices.
    pub fn merge(tables: impl IntoIterator<Item = ReportTable>) -> Self {
        let mut keys = Vec::new();
        let mut per_image = Vec::new();
        for t in tables {
            keys.extend(t.keys());
            per_image.extend(t.per_image);
        }
        Self::build(&keys, per_image)
    }

    pub fn value(&self, method: &str, mode: InferenceMode, fraction: f64) -> Option<f64> {
        let col = self.fractions.iter().position(|&f| f == column_of(fraction))?;
        self.rows
            .iter()
            .find(|r| r.method == method && r.mode == mode)
            .and_then(|r| r.values[col])
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            let mut header = vec!["method".to_string()];
            header.extend(self.fractions.iter().map(|&f| fraction_label(f)));
            w.write_record(&header).map_err(csv_err)?;
            for row in &self.rows {
                let mut rec = vec![row.name()];
                rec.extend(row.values.iter().map(|v| v.map(|v| v.to_string()).unwrap_or_default()));
                w.write_record(&rec).map_err(csv_err)?;
            }
            w.flush().map_err(|e| MmsError::Validation(e.to_string()))?;
        }
        out.extend_from_slice(PER_IMAGE_MARKER.as_bytes());
        out.push(b'\n');
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(PER_IMAGE_HEADER).map_err(csv_err)?;
            for r in &self.per_image {
                w.write_record([
                    r.method.clone(),
                    r.label_fraction.to_string(),
                    r.mode.to_string(),
                    r.path.clone(),
                    r.dsc.map(|v| v.to_string()).unwrap_or_default(),
                    r.error.clone().unwrap_or_default(),
                ])
                .map_err(csv_err)?;
            }
            w.flush().map_err(|e| MmsError::Validation(e.to_string()))?;
        }
        String::from_utf8(out).map_err(|e| MmsError::Validation(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> MmsError {
    MmsError::Validation(format!("report: {e}"))
}

fn opt_f64(s: &str, what: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| MmsError::Validation(format!("report: bad {what} `{s}`")))
}

/// Reads a document produced by [`ReportTable::to_csv`].
pub fn parse_report(text: &str) -> Result<ReportTable> {
    let marker = format!("\n{PER_IMAGE_MARKER}\n");
    let (table, appendix) = text
        .split_once(&marker)
        .ok_or_else(|| MmsError::Validation(format!("report: missing `{PER_IMAGE_MARKER}` section")))?;

    let mut r = csv::Reader::from_reader(table.as_bytes());
    let header = r.headers().map_err(csv_err)?.clone();
    if header.get(0) != Some("method") {
        return Err(MmsError::Validation("report: table must start with a `method` column".into()));
    }
    let fractions = header.iter().skip(1).map(parse_fraction_label).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let name = rec.get(0).unwrap_or_default();
        let (method, mode) = name
            .strip_suffix(')')
            .and_then(|s| s.rsplit_once(" ("))
            .ok_or_else(|| MmsError::Validation(format!("report: bad row name `{name}`")))?;
        let values = rec.iter().skip(1).map(|v| opt_f64(v, "value")).collect::<Result<Vec<_>>>()?;
        if values.len() != fractions.len() {
            return Err(MmsError::Validation(format!("report: row `{name}` has {} values", values.len())));
        }
        rows.push(TableRow {
            method: method.to_string(),
            mode: mode.parse()?,
            values,
        });
    }

    let mut r = csv::Reader::from_reader(appendix.as_bytes());
    if r.headers().map_err(csv_err)?.iter().ne(PER_IMAGE_HEADER) {
        return Err(MmsError::Validation(format!(
            "report: per-image header must be `{}`",
            PER_IMAGE_HEADER.join(",")
        )));
    }
    let mut per_image = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        per_image.push(PerImageRow {
            method: field(0).to_string(),
            label_fraction: opt_f64(field(1), "label fraction")?
                .ok_or_else(|| MmsError::Validation("report: missing label fraction".into()))?,
            mode: field(2).parse()?,
            path: field(3).to_string(),
            dsc: opt_f64(field(4), "dsc")?,
            error: Some(field(5)).filter(|e| !e.is_empty()).map(str::to_string),
        });
    }
    Ok(ReportTable {
        fractions,
        rows,
        per_image,
    })
}

pub fn read_report(path: &Path) -> Result<ReportTable> {
    let text = std::fs::read_to_string(path).map_err(|e| MmsError::io(path, e))?;
    parse_report(&text)
}

/// Writes the comparison table for `reports`, each tagged by the matching label, and
/// returns it. Each report contributes one table row, for its summary mode; the appendix
/// lists every mode.
pub fn write_report(reports: &[MetricsReport], labels: &[ReportLabel], out: &Path) -> Result<ReportTable> {
    if reports.len() != labels.len() {
        return Err(MmsError::Parameter(format!(
            "{} reports but {} labels",
            reports.len(),
            labels.len()
        )));
    }
    let mut rows = Vec::new();
    let mut keys = Vec::new();
    for (report, label) in reports.iter().zip(labels) {
        keys.push((label.method.clone(), report.settings.mode));
        for mode in InferenceMode::ALL {
            for r in &report.per_image {
                rows.push(PerImageRow {
                    method: label.method.clone(),
                    label_fraction: label.label_fraction,
                    mode,
                    path: r.path.to_string_lossy().into_owned(),
                    dsc: r.dsc(mode),
                    error: r.error.clone(),
                });
            }
        }
    }
    let table = ReportTable::build(&keys, rows);
    write_atomic(out, table.to_csv()?.as_bytes())?;
    Ok(table)
}
