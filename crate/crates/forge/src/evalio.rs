//! Gold and prediction tables for evaluation, and the metric outputs.

use std::collections::BTreeMap;
use std::path::Path;

use forge_core::eval::{EvalReport, GoldRow, PredictionRow};
use serde_json::Value;

use crate::checkpoint::read_results;

#[derive(Debug, thiserror::Error)]
pub enum EvalIoError {
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: String, column: String },
    #[error("{path} line {line}: {detail}")]
    BadRow { path: String, line: u64, detail: String },
    #[error(transparent)]
    Results(#[from] crate::checkpoint::CheckpointError),
}

/// Accepted spellings of a boolean cell.
pub fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "t" | "yes" | "y" | "1" => Some(true),
        "false" | "f" | "no" | "n" | "0" => Some(false),
        _ => None,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> EvalIoError + '_ {
    move |source| EvalIoError::Csv {
        path: path.display().to_string(),
        source,
    }
}

struct Columns(BTreeMap<String, usize>);

impl Columns {
    fn new(headers: &csv::StringRecord) -> Self {
        Columns(
            headers
                .iter()
                .enumerate()
                .map(|(i, h)| (h.trim().trim_start_matches('\u{feff}').to_ascii_lowercase(), i))
                .collect(),
        )
    }

    fn get(&self, name: &str) -> Option<usize> {
        self.0.get(name).copied()
    }

    fn require(&self, name: &str, path: &Path) -> Result<usize, EvalIoError> {
        self.get(name).ok_or_else(|| EvalIoError::MissingColumn {
            path: path.display().to_string(),
            column: name.into(),
        })
    }
}

fn cell(rec: &csv::StringRecord, i: usize) -> &str {
    rec.get(i).unwrap_or("").trim()
}

fn optional(s: &str) -> Option<String> {
    (!s.is_empty() && !s.eq_ignore_ascii_case("null")).then(|| s.to_string())
}

/// Reads a table with columns `mrn, feature_group, occurrence, date`.
pub fn read_gold(path: &Path) -> Result<Vec<GoldRow>, EvalIoError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path).map_err(csv_err(path))?;
    let cols = Columns::new(rdr.headers().map_err(csv_err(path))?);
    let (m, g, o, d) = (
        cols.require("mrn", path)?,
        cols.require("feature_group", path)?,
        cols.require("occurrence", path)?,
        cols.get("date"),
    );
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map_or(0, |p| p.line());
        let occurrence = parse_bool(cell(&rec, o)).ok_or_else(|| EvalIoError::BadRow {
            path: path.display().to_string(),
            line,
            detail: format!("occurrence {:?} is not a boolean", cell(&rec, o)),
        })?;
        out.push(GoldRow {
            mrn: cell(&rec, m).to_string(),
            group: cell(&rec, g).to_string(),
            occurrence,
            date: d.and_then(|d| optional(cell(&rec, d))),
        });
    }
    Ok(out)
}

/// Which result fields hold the occurrence flag and the date.
#[derive(Debug, Clone)]
pub struct PredictionFields {
    pub occurrence: String,
    pub date: String,
}

impl Default for PredictionFields {
    fn default() -> Self {
        PredictionFields {
            occurrence: "/Occurrence".into(),
            date: "/Date".into(),
        }
    }
}

/// Reads predictions from an extraction results CSV, or from a table in
/// the gold layout when it has an `occurrence` column.
pub fn read_predictions(path: &Path, fields: &PredictionFields) -> Result<Vec<PredictionRow>, EvalIoError> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let cols = Columns::new(rdr.headers().map_err(csv_err(path))?);
    if cols.get("occurrence").is_some() {
        return Ok(read_gold(path)?
            .into_iter()
            .map(|g| PredictionRow {
                mrn: g.mrn,
                group: g.group,
                occurrence: Some(g.occurrence),
                date: g.date,
            })
            .collect());
    }
    let mut by_key: BTreeMap<(String, String), PredictionRow> = BTreeMap::new();
    for row in read_results(path)? {
        let entry = by_key
            .entry((row.mrn.clone(), row.feature_group.clone()))
            .or_insert_with(|| PredictionRow {
                mrn: row.mrn.clone(),
                group: row.feature_group.clone(),
                occurrence: None,
                date: None,
            });
        if row.field_path == fields.occurrence {
            entry.occurrence = row.value.as_bool();
        } else if row.field_path == fields.date {
            entry.date = match &row.value {
                Value::String(s) => optional(s),
                _ => None,
            };
        }
    }
    Ok(by_key.into_values().collect())
}

fn four(x: f64) -> String {
    format!("{x:.4}")
}

pub fn write_metrics(report: &EvalReport, path: &Path) -> Result<(), EvalIoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record([
        "feature_group", "field", "tp", "tn", "fp", "fn", "precision", "recall", "f1", "accuracy",
    ])
    .map_err(csv_err(path))?;
    for g in &report.groups {
        let c = g.counts;
        w.write_record([
            g.group.clone(),
            g.field.as_str().to_string(),
            c.tp.to_string(),
            c.tn.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            four(g.metrics.precision),
            four(g.metrics.recall),
            four(g.metrics.f1),
            four(g.metrics.accuracy),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| csv_err(path)(e.into()))?;
    Ok(())
}

pub fn write_disagreements(report: &EvalReport, path: &Path) -> Result<(), EvalIoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["mrn", "feature_group", "field", "cell", "predicted", "gold"])
        .map_err(csv_err(path))?;
    for d in &report.disagreements {
        w.write_record([&d.mrn, &d.group, d.field.as_str(), d.cell.as_str(), &d.predicted, &d.gold])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| csv_err(path)(e.into()))?;
    Ok(())
}

/// A fixed-width table for the terminal.
pub fn render_table(report: &EvalReport) -> String {
    let mut s = format!(
        "{:<20} {:<10} {:>4} {:>4} {:>4} {:>4} {:>9} {:>7} {:>7} {:>8}\n",
        "group", "field", "tp", "tn", "fp", "fn", "precision", "recall", "f1", "accuracy"
    );
    for g in &report.groups {
        let c = g.counts;
        s.push_str(&format!(
            "{:<20} {:<10} {:>4} {:>4} {:>4} {:>4} {:>9} {:>7} {:>7} {:>8}\n",
            g.group,
            g.field.as_str(),
            c.tp,
            c.tn,
            c.fp,
            c.fn_,
            four(g.metrics.precision),
            four(g.metrics.recall),
            four(g.metrics.f1),
            four(g.metrics.accuracy)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use forge_core::dates::DateRecognizer;
    use forge_core::eval::aggregate;

    #[test]
    fn gold_and_gold_shaped_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let gold = dir.path().join("g.csv");
        std::fs::write(
            &gold,
            "mrn,feature_group,occurrence,date\n1,stroke,true,2015-03-02\n2,stroke,false,\n3,stroke,yes,2019\n",
        )
        .unwrap();
        let pred = dir.path().join("p.csv");
        std::fs::write(
            &pred,
            "mrn,feature_group,occurrence,date\n1,stroke,true,2015-11-01\n2,stroke,true,2012-01-01\n",
        )
        .unwrap();
        let g = read_gold(&gold).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g[1].date, None);
        let p = read_predictions(&pred, &PredictionFields::default()).unwrap();
        let r = aggregate(&g, &p, &DateRecognizer::new());
        let occ = &r.groups[0];
        assert_eq!((occ.counts.tp, occ.counts.tn, occ.counts.fp, occ.counts.fn_), (1, 0, 1, 1));
        let year = &r.groups[1];
        assert_eq!((year.counts.tp, year.counts.tn, year.counts.fp, year.counts.fn_), (1, 0, 1, 1));
        assert_eq!(r.missing_predictions, vec![("3".to_string(), "stroke".to_string())]);

        let m = dir.path().join("m.csv");
        write_metrics(&r, &m).unwrap();
        let text = std::fs::read_to_string(&m).unwrap();
        assert!(text.contains("stroke,occurrence,1,0,1,1,0.5000,0.5000,0.5000,0.3333"));
        let d = dir.path().join("d.csv");
        write_disagreements(&r, &d).unwrap();
        assert_eq!(std::fs::read_to_string(&d).unwrap().lines().count(), 5);
    }

    #[test]
    fn bad_boolean_is_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let gold = dir.path().join("g.csv");
        std::fs::write(&gold, "mrn,feature_group,occurrence\n1,stroke,maybe\n").unwrap();
        let e = read_gold(&gold).unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
    }
}
