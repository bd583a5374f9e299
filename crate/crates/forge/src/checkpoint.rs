//! Append-only checkpoint CSV and the deterministic results export.
//!
//! Both files share the column layout in [`COLUMNS`]. A checkpoint row holds
//! the whole reconciled object with an empty `field_path`; the export splits
//! it into one row per top-level tool field.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use forge_core::extract::{ExtractionResult, ResultStatus};
use forge_core::json::{canonical_string, pointer_push};
use forge_core::schema::ToolSpec;
use serde_json::Value;

pub const COLUMNS: [&str; 8] = [
    "mrn",
    "feature_group",
    "field_path",
    "value_json",
    "status",
    "provenance",
    "model_id",
    "threshold",
];

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("({mrn}, {group}) is already checkpointed")]
    Duplicate { mrn: String, group: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn header_line() -> String {
    let mut s = COLUMNS.join(",");
    s.push('\n');
    s
}

fn encode_row(fields: &[&str]) -> Result<Vec<u8>, CheckpointError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(fields)?;
    w.into_inner().map_err(|e| CheckpointError::Io {
        path: PathBuf::new(),
        source: e.into_error(),
    })
}

fn threshold_text(t: f64) -> String {
    format!("{t}")
}

fn checkpoint_row(r: &ExtractionResult) -> Result<Vec<u8>, CheckpointError> {
    encode_row(&[
        &r.mrn,
        &r.group_id,
        "",
        &canonical_string(&r.value),
        r.status.as_str(),
        &r.provenance_string(),
        &r.model_id,
        &threshold_text(r.threshold),
    ])
}

fn parse_row(rec: &csv::StringRecord) -> Option<ExtractionResult> {
    if rec.len() != COLUMNS.len() || !rec[2].is_empty() {
        return None;
    }
    Some(ExtractionResult {
        mrn: rec[0].to_string(),
        group_id: rec[1].to_string(),
        value: serde_json::from_str(&rec[3]).ok()?,
        status: ResultStatus::parse(&rec[4])?,
        provenance: ExtractionResult::parse_provenance(&rec[5])?,
        model_id: rec[6].to_string(),
        threshold: rec[7].parse().ok()?,
        detail: None,
    })
}

/// Completed `(mrn, group)` results, one CSV row each, fsynced per append.
pub struct CheckpointLog {
    path: PathBuf,
    file: File,
    results: BTreeMap<(String, String), ExtractionResult>,
    warnings: Vec<String>,
}

impl CheckpointLog {
    /// Opens or creates the log. A trailing row without its newline, left by
    /// an interrupted write, is cut off with a warning; earlier rows that do
    /// not parse are skipped with a warning.
    pub fn open(path: &Path) -> Result<Self, CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut warnings = Vec::new();
        let mut results = BTreeMap::new();
        let existing = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io(e)),
        };

        let mut keep = existing.len();
        if !existing.is_empty() && !existing.ends_with(b"\n") {
            keep = existing.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            warnings.push(format!(
                "checkpoint {}: ignored incomplete trailing row ({} bytes)",
                path.display(),
                existing.len() - keep
            ));
        }
        let body = &existing[..keep];
        if !body.is_empty() {
            let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(body);
            for (i, rec) in rdr.records().enumerate() {
                match rec.ok().as_ref().and_then(parse_row) {
                    Some(r) => {
                        results.insert((r.mrn.clone(), r.group_id.clone()), r);
                    }
                    None => warnings.push(format!("checkpoint {}: skipped unreadable row {}", path.display(), i + 2)),
                }
            }
        }

        if keep != existing.len() || existing.is_empty() {
            let f = OpenOptions::new().write(true).create(true).truncate(false).open(path).map_err(io)?;
            f.set_len(keep as u64).map_err(io)?;
            f.sync_data().map_err(io)?;
        }
        let mut file = OpenOptions::new().append(true).open(path).map_err(io)?;
        if keep == 0 {
            file.write_all(header_line().as_bytes()).map_err(io)?;
            file.sync_data().map_err(io)?;
        }
        Ok(CheckpointLog {
            path: path.to_path_buf(),
            file,
            results,
            warnings,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn contains(&self, mrn: &str, group: &str) -> bool {
        self.results.contains_key(&(mrn.to_string(), group.to_string()))
    }

    pub fn completed(&self) -> BTreeSet<(String, String)> {
        self.results.keys().cloned().collect()
    }

    pub fn results(&self) -> impl Iterator<Item = &ExtractionResult> {
        self.results.values()
    }

    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }

    /// Appends one row and syncs it to disk before returning.
    pub fn append(&mut self, result: &ExtractionResult) -> Result<(), CheckpointError> {
        let key = (result.mrn.clone(), result.group_id.clone());
        if self.results.contains_key(&key) {
            return Err(CheckpointError::Duplicate {
                mrn: key.0,
                group: key.1,
            });
        }
        let row = checkpoint_row(result)?;
        let io = |source| CheckpointError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(&row).map_err(io)?;
        self.file.sync_data().map_err(io)?;
        let mut stored = result.clone();
        stored.detail = None;
        self.results.insert(key, stored);
        Ok(())
    }
}

/// Writes the results CSV: rows sorted by `(mrn, group)`, then one row per
/// top-level field in tool order, absent values as `null`. The file is
/// written beside `path` and renamed into place.
pub fn export_results<'a, I>(results: I, tool: &ToolSpec, path: &Path) -> Result<u64, CheckpointError>
where
    I: IntoIterator<Item = &'a ExtractionResult>,
{
    let mut sorted: Vec<&ExtractionResult> = results.into_iter().collect();
    sorted.sort_by(|a, b| (&a.mrn, &a.group_id).cmp(&(&b.mrn, &b.group_id)));
    let mut out = header_line().into_bytes();
    let mut rows = 0u64;
    for r in sorted {
        let provenance = r.provenance_string();
        let threshold = threshold_text(r.threshold);
        for field in &tool.fields {
            let value = r.value.get(&field.name).unwrap_or(&Value::Null);
            out.extend(encode_row(&[
                &r.mrn,
                &r.group_id,
                &pointer_push("", &field.name),
                &canonical_string(value),
                r.status.as_str(),
                &provenance,
                &r.model_id,
                &threshold,
            ])?);
            rows += 1;
        }
    }
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let tmp = path.with_extension("csv.partial");
    {
        let mut f = File::create(&tmp).map_err(io)?;
        f.write_all(&out).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)?;
    Ok(rows)
}

/// One parsed row of a results CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub mrn: String,
    pub feature_group: String,
    pub field_path: String,
    pub value: Value,
    pub status: ResultStatus,
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, CheckpointError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 5 {
            continue;
        }
        out.push(ResultRow {
            mrn: rec[0].to_string(),
            feature_group: rec[1].to_string(),
            field_path: rec[2].to_string(),
            value: serde_json::from_str(&rec[3]).unwrap_or(Value::Null),
            status: ResultStatus::parse(&rec[4]).unwrap_or(ResultStatus::Error),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use forge_core::schema::{DType, FieldSpec};
    use serde_json::json;

    fn result(mrn: &str, group: &str, occ: bool) -> ExtractionResult {
        ExtractionResult {
            mrn: mrn.into(),
            group_id: group.into(),
            value: json!({"Occurrence": occ, "Date": "2015-03-02"}),
            status: ResultStatus::Found,
            provenance: vec![(0, 0), (3, 1)],
            model_id: "mock, \"quoted\"".into(),
            threshold: 0.3,
            detail: Some("dropped".into()),
        }
    }

    fn tool() -> ToolSpec {
        ToolSpec::new(
            "t",
            "",
            vec![FieldSpec::new("Occurrence", DType::Boolean), FieldSpec::new("Date", DType::String)],
        )
    }

    #[test]
    fn resume_reads_back_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.csv");
        {
            let mut log = CheckpointLog::open(&path).unwrap();
            assert!(log.is_empty());
            log.append(&result("A", "stroke", true)).unwrap();
            log.append(&result("B", "stroke", false)).unwrap();
            assert!(matches!(
                log.append(&result("A", "stroke", true)),
                Err(CheckpointError::Duplicate { .. })
            ));
        }
        let log = CheckpointLog::open(&path).unwrap();
        assert_eq!(log.len(), 2);
        assert!(log.contains("A", "stroke"));
        let a = log.results().next().unwrap();
        assert_eq!(a.provenance, vec![(0, 0), (3, 1)]);
        assert_eq!(a.model_id, "mock, \"quoted\"");
        assert!(log.warnings().is_empty());
    }

    #[test]
    fn torn_trailing_row_is_dropped_and_file_stays_appendable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.csv");
        {
            let mut log = CheckpointLog::open(&path).unwrap();
            log.append(&result("A", "g", true)).unwrap();
        }
        let mut bytes = fs::read(&path).unwrap();
        let full = bytes.len();
        bytes.extend_from_slice(b"B,g,,\"{\"\"Occ");
        fs::write(&path, &bytes).unwrap();
        {
            let mut log = CheckpointLog::open(&path).unwrap();
            assert_eq!(log.len(), 1);
            assert_eq!(log.warnings().len(), 1);
            assert_eq!(fs::metadata(&path).unwrap().len() as usize, full);
            log.append(&result("B", "g", false)).unwrap();
        }
        let log = CheckpointLog::open(&path).unwrap();
        assert_eq!(log.len(), 2);
        assert!(log.warnings().is_empty());
    }

    #[test]
    fn every_truncation_point_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.csv");
        {
            let mut log = CheckpointLog::open(&path).unwrap();
            for m in ["A", "B", "C"] {
                log.append(&result(m, "g", true)).unwrap();
            }
        }
        let bytes = fs::read(&path).unwrap();
        let newlines: Vec<usize> = bytes.iter().enumerate().filter(|(_, &b)| b == b'\n').map(|(i, _)| i).collect();
        for cut in 0..=bytes.len() {
            let p = dir.path().join(format!("cut{cut}.csv"));
            fs::write(&p, &bytes[..cut]).unwrap();
            let log = CheckpointLog::open(&p).unwrap();
            let complete_rows = newlines.iter().filter(|&&i| i < cut).count().saturating_sub(1);
            assert_eq!(log.len(), complete_rows, "cut at {cut}");
        }
    }

    #[test]
    fn export_is_sorted_and_per_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        let mut nf = ExtractionResult::not_found("A", "mi", "m", 0.3);
        nf.value = json!({});
        let rs = [result("B", "stroke", true), nf, result("A", "stroke", false)];
        let n = export_results(rs.iter(), &tool(), &path).unwrap();
        assert_eq!(n, 6);
        let rows = read_results(&path).unwrap();
        let keys: Vec<(String, String, String)> = rows
            .iter()
            .map(|r| (r.mrn.clone(), r.feature_group.clone(), r.field_path.clone()))
            .collect();
        assert_eq!(keys[0], ("A".into(), "mi".into(), "/Occurrence".into()));
        assert_eq!(keys[1], ("A".into(), "mi".into(), "/Date".into()));
        assert_eq!(keys[2].1, "stroke");
        assert_eq!(rows[0].value, Value::Null);
        assert_eq!(rows[0].status, ResultStatus::NotFound);
        assert_eq!(rows[2].value, json!(false));

        let again = dir.path().join("again.csv");
        export_results(rs.iter().rev(), &tool(), &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn empty_export_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        export_results(std::iter::empty(), &tool(), &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), header_line());
    }
}
