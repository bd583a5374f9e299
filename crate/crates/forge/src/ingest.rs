//! Tabular note exports and cleaning-rule files.

use std::fs;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use forge_core::corpus::{CleaningRules, NoteRow, RuleError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Xlsx,
}

impl TableFormat {
    pub fn from_path(path: &Path) -> TableFormat {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(ext) if ext == "xlsx" || ext == "xlsm" => TableFormat::Xlsx,
            _ => TableFormat::Csv,
        }
    }
}

/// Header names for each note field. Unset entries fall back to a list of
/// common spellings, matched case-insensitively.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub mrn: Option<String>,
    pub timestamp: Option<String>,
    pub source: Option<String>,
    pub category: Option<String>,
    pub text: Option<String>,
}

const MRN_NAMES: &[&str] = &["mrn", "patient_id", "record_id"];
const TIMESTAMP_NAMES: &[&str] = &["timestamp", "date", "datetime", "note_date", "date_time"];
const SOURCE_NAMES: &[&str] = &["source_system", "source", "system"];
const CATEGORY_NAMES: &[&str] = &["category", "note_type", "type"];
const TEXT_NAMES: &[&str] = &["text", "note", "note_text", "body", "report"];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestOptions {
    #[serde(default)]
    pub columns: ColumnMap,
    /// chrono formats tried after the ISO-8601 forms.
    #[serde(default)]
    pub timestamp_formats: Vec<String>,
    #[serde(default)]
    pub format: Option<TableFormat>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Reject {
    /// 1-based line of the data row in the file (the header is line 1).
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedTable {
    pub rows: Vec<NoteRow>,
    pub rejects: Vec<Reject>,
    /// Never contains note text.
    pub warnings: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("no column for {field} (looked for {candidates})")]
    MissingColumn { field: &'static str, candidates: String },
    #[error("table has no header row")]
    NoHeader,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("xlsx: {0}")]
    Xlsx(String),
    #[error("xlsx support is not compiled in; rebuild with the `xlsx` feature")]
    XlsxDisabled,
}

struct Layout {
    mrn: usize,
    timestamp: Option<usize>,
    source: Option<usize>,
    category: Option<usize>,
    text: usize,
}

fn find_column(headers: &[String], configured: Option<&str>, defaults: &[&str]) -> Option<usize> {
    let find = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name.trim()));
    match configured {
        Some(name) => find(name),
        None => defaults.iter().find_map(|n| find(n)),
    }
}

fn layout(headers: &[String], map: &ColumnMap) -> Result<Layout, IngestError> {
    let required = |configured: &Option<String>, defaults: &[&str], field| {
        find_column(headers, configured.as_deref(), defaults).ok_or_else(|| IngestError::MissingColumn {
            field,
            candidates: match configured {
                Some(c) => c.clone(),
                None => defaults.join(", "),
            },
        })
    };
    Ok(Layout {
        mrn: required(&map.mrn, MRN_NAMES, "mrn")?,
        text: required(&map.text, TEXT_NAMES, "text")?,
        timestamp: find_column(headers, map.timestamp.as_deref(), TIMESTAMP_NAMES),
        source: find_column(headers, map.source.as_deref(), SOURCE_NAMES),
        category: find_column(headers, map.category.as_deref(), CATEGORY_NAMES),
    })
}

const ISO_DATETIME: &[&str] = &[
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

/// ISO-8601 forms first (offsets are converted to UTC), then `extra`.
pub fn parse_timestamp(text: &str, extra: &[String]) -> Option<NaiveDateTime> {
    let text = text.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(text) {
        return Some(dt.naive_utc());
    }
    let formats = ISO_DATETIME.iter().copied().chain(extra.iter().map(String::as_str));
    for fmt in formats {
        if let Ok(dt) = NaiveDateTime::parse_from_str(text, fmt) {
            return Some(dt);
        }
    }
    for fmt in std::iter::once("%Y-%m-%d").chain(extra.iter().map(String::as_str)) {
        if let Ok(d) = NaiveDate::parse_from_str(text, fmt) {
            return d.and_hms_opt(0, 0, 0);
        }
    }
    None
}

fn rows_from_records<I>(headers: Vec<String>, records: I, opts: &IngestOptions) -> Result<LoadedTable, IngestError>
where
    I: Iterator<Item = (u64, Result<Vec<String>, String>)>,
{
    let layout = layout(&headers, &opts.columns)?;
    let mut out = LoadedTable::default();
    for (line, record) in records {
        let cells = match record {
            Ok(cells) => cells,
            Err(reason) => {
                out.rejects.push(Reject { line, reason });
                continue;
            }
        };
        if cells.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        if cells.len() != headers.len() {
            out.rejects.push(Reject {
                line,
                reason: format!("expected {} cells, found {}", headers.len(), cells.len()),
            });
            continue;
        }
        let cell = |i: Option<usize>| i.map(|i| cells[i].trim().to_string()).unwrap_or_default();
        let mrn = cell(Some(layout.mrn));
        if mrn.is_empty() {
            out.rejects.push(Reject {
                line,
                reason: "empty mrn".into(),
            });
            continue;
        }
        let raw_ts = cell(layout.timestamp);
        let timestamp = if raw_ts.is_empty() {
            if layout.timestamp.is_some() {
                out.warnings.push(format!("line {line}: empty timestamp, row kept undated"));
            }
            None
        } else {
            let parsed = parse_timestamp(&raw_ts, &opts.timestamp_formats);
            if parsed.is_none() {
                out.warnings.push(format!("line {line}: unparseable timestamp, row kept undated"));
            }
            parsed
        };
        let text = cells[layout.text].clone();
        if text.trim().is_empty() {
            out.warnings.push(format!("line {line}: empty note text"));
        }
        out.rows.push(NoteRow {
            mrn,
            timestamp,
            source_system: cell(layout.source),
            category: cell(layout.category),
            text,
        });
    }
    Ok(out)
}

/// Reads CSV note rows. Malformed rows land in `rejects`.
pub fn read_csv<R: Read>(reader: R, opts: &IngestOptions) -> Result<LoadedTable, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers: Vec<String> = match rdr.headers() {
        Ok(h) if !h.is_empty() => h.iter().map(|s| s.trim_start_matches('\u{feff}').to_string()).collect(),
        Ok(_) => return Err(IngestError::NoHeader),
        Err(e) => return Err(e.into()),
    };
    let records = rdr.records().enumerate().map(|(i, r)| {
        let fallback_line = i as u64 + 2;
        match r {
            Ok(rec) => (
                rec.position().map_or(fallback_line, |p| p.line()),
                Ok(rec.iter().map(str::to_string).collect()),
            ),
            Err(e) => {
                let line = e.position().map_or(fallback_line, |p| p.line());
                (line, Err(e.to_string()))
            }
        }
    });
    rows_from_records(headers, records, opts)
}

/// Loads a note table from disk.
pub fn load_table(path: &Path, opts: &IngestOptions) -> Result<LoadedTable, IngestError> {
    let format = opts.format.unwrap_or_else(|| TableFormat::from_path(path));
    match format {
        TableFormat::Csv => {
            let file = fs::File::open(path).map_err(|source| IngestError::Io {
                path: path.display().to_string(),
                source,
            })?;
            read_csv(std::io::BufReader::new(file), opts)
        }
        TableFormat::Xlsx => load_xlsx(path, opts),
    }
}

#[cfg(feature = "xlsx")]
fn load_xlsx(path: &Path, opts: &IngestOptions) -> Result<LoadedTable, IngestError> {
    use calamine::{open_workbook_auto, Data, Reader};

    let mut book = open_workbook_auto(path).map_err(|e| IngestError::Xlsx(e.to_string()))?;
    let sheet = book
        .sheet_names()
        .first()
        .cloned()
        .ok_or_else(|| IngestError::Xlsx("workbook has no sheets".into()))?;
    let range = book.worksheet_range(&sheet).map_err(|e| IngestError::Xlsx(e.to_string()))?;
    let show = |d: &Data| match d {
        Data::Empty => String::new(),
        Data::String(s) | Data::DateTimeIso(s) | Data::DurationIso(s) => s.clone(),
        Data::Float(f) => f.to_string(),
        Data::Int(i) => i.to_string(),
        Data::Bool(b) => b.to_string(),
        Data::DateTime(dt) => dt
            .as_datetime()
            .map(|t| t.format("%Y-%m-%d %H:%M:%S").to_string())
            .unwrap_or_default(),
        Data::Error(e) => format!("#{e:?}"),
    };
    let mut rows = range.rows();
    let headers: Vec<String> = rows.next().ok_or(IngestError::NoHeader)?.iter().map(show).collect();
    let width = headers.len();
    let records = rows.enumerate().map(move |(i, r)| {
        let mut cells: Vec<String> = r.iter().map(show).collect();
        cells.resize(width.max(cells.len()), String::new());
        (i as u64 + 2, Ok(cells))
    });
    rows_from_records(headers, records, opts)
}

#[cfg(not(feature = "xlsx"))]
fn load_xlsx(_path: &Path, _opts: &IngestOptions) -> Result<LoadedTable, IngestError> {
    Err(IngestError::XlsxDisabled)
}

#[derive(Debug, thiserror::Error)]
pub enum RulesFileError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Rule { path: String, source: RuleError },
}

/// Default rules followed by those in `path`.
pub fn load_rules(path: &Path) -> Result<CleaningRules, RulesFileError> {
    let text = fs::read_to_string(path).map_err(|source| RulesFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let extra = CleaningRules::parse(&text).map_err(|source| RulesFileError::Rule {
        path: path.display().to_string(),
        source,
    })?;
    let mut rules = CleaningRules::defaults();
    rules.extend(extra);
    Ok(rules)
}
