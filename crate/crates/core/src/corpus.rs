//! Note rows, boilerplate cleaning, per-patient grouping and the
//! chronological consolidated report.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use chrono::{NaiveDateTime, Timelike};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::text::{estimate_tokens, Span};

/// One row of a tabular note export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRow {
    pub mrn: String,
    pub timestamp: Option<NaiveDateTime>,
    pub source_system: String,
    pub category: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    /// Every match of the pattern is cut out of the text.
    Block,
    /// Every line matching the pattern is dropped, newline included.
    Line,
}

#[derive(Debug, Clone)]
pub struct CleaningRule {
    pub kind: RuleKind,
    pattern: String,
    regex: Regex,
}

impl CleaningRule {
    pub fn new(kind: RuleKind, pattern: &str) -> Result<Self, RuleError> {
        let regex = Regex::new(pattern).map_err(|e| RuleError {
            line: 0,
            detail: format!("invalid pattern {pattern:?}: {e}"),
        })?;
        Ok(CleaningRule {
            kind,
            pattern: pattern.to_string(),
            regex,
        })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    fn apply(&self, text: &str) -> String {
        match self.kind {
            RuleKind::Block => self.regex.replace_all(text, "").into_owned(),
            RuleKind::Line => text
                .split_inclusive('\n')
                .filter(|line| !self.regex.is_match(line.trim_end_matches(['\n', '\r'])))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cleaning rules line {line}: {detail}")]
pub struct RuleError {
    pub line: usize,
    pub detail: String,
}

/// Built-in rules: XML declarations and metadata blocks plus common
/// system-generated header lines.
pub const DEFAULT_RULES: &str = r"# kind  pattern
block (?s)<\?xml.*?\?>
block (?is)<metadata\b[^>]*>.*?</metadata>
block (?is)<meta\b[^>]*>.*?</meta>
block (?is)<header\b[^>]*>.*?</header>
line  ^\s*\*{3}.*(SYSTEM GENERATED|AUTO-GENERATED).*\*{3}\s*$
line  (?i)^\s*(electronically signed by|printed (on|by)|page \d+ of \d+)\b.*$
line  (?i)^\s*(confidential|do not distribute)[:\s].*(health information|phi).*$
";

/// An ordered list of cleaning rules.
#[derive(Debug, Clone, Default)]
pub struct CleaningRules {
    rules: Vec<CleaningRule>,
}

impl CleaningRules {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn defaults() -> Self {
        Self::parse(DEFAULT_RULES).unwrap_or_else(|e| panic!("built-in cleaning rules are invalid: {e}"))
    }

    /// Parses a rule file: one `block <pattern>` or `line <pattern>` per
    /// line, blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self, RuleError> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (tag, pattern) = line.split_once(char::is_whitespace).ok_or_else(|| RuleError {
                line: i + 1,
                detail: "expected `<kind> <pattern>`".to_string(),
            })?;
            let kind = match tag {
                "block" => RuleKind::Block,
                "line" => RuleKind::Line,
                other => {
                    return Err(RuleError {
                        line: i + 1,
                        detail: format!("unknown rule kind {other:?}"),
                    })
                }
            };
            let rule = CleaningRule::new(kind, pattern.trim_start()).map_err(|e| RuleError {
                line: i + 1,
                detail: e.detail,
            })?;
            rules.push(rule);
        }
        Ok(CleaningRules { rules })
    }

    pub fn extend(&mut self, other: CleaningRules) {
        self.rules.extend(other.rules);
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> &[CleaningRule] {
        &self.rules
    }
}

/// Removes every rule match. Rules are reapplied until nothing changes, and
/// surrounding whitespace is trimmed whenever something was removed, so the
/// result is a fixed point: `clean_note(&clean_note(x, r), r) == clean_note(x, r)`.
/// Text without matches is returned unchanged.
pub fn clean_note(text: &str, rules: &CleaningRules) -> String {
    let mut current = text.to_string();
    loop {
        let mut next = current.clone();
        for rule in &rules.rules {
            next = rule.apply(&next);
        }
        if next == current {
            return current;
        }
        current = next.trim().to_string();
    }
}

/// Partitions rows by MRN, preserving row order inside each group.
pub fn group_by_mrn(rows: Vec<NoteRow>) -> BTreeMap<String, Vec<NoteRow>> {
    let mut groups: BTreeMap<String, Vec<NoteRow>> = BTreeMap::new();
    for row in rows {
        groups.entry(row.mrn.clone()).or_default().push(row);
    }
    groups
}

/// One cleaned note inside a consolidated report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportEntry {
    /// Position of the row in the patient's input order.
    pub entry_id: u32,
    pub timestamp: Option<NaiveDateTime>,
    pub source_system: String,
    pub category: String,
    pub text: String,
}

impl ReportEntry {
    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    /// `[2015-03-02 | Epic | imaging]`, with `undated` for missing times.
    pub fn header(&self) -> String {
        let when = match self.timestamp {
            None => "undated".to_string(),
            Some(ts) if ts.time().num_seconds_from_midnight() == 0 => ts.format("%Y-%m-%d").to_string(),
            Some(ts) => ts.format("%Y-%m-%d %H:%M").to_string(),
        };
        format!("[{when} | {} | {}]", self.source_system, self.category)
    }

    pub fn render(&self) -> String {
        format!("{}\n{}", self.header(), self.text)
    }

    /// Header and separator cost of including this entry.
    pub fn header_tokens(&self) -> usize {
        estimate_tokens(&self.header()) + 1
    }
}

/// A patient's notes in chronological order. Undated entries come last in
/// their original order; equal timestamps keep input order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsolidatedReport {
    pub mrn: String,
    pub entries: Vec<ReportEntry>,
    pub token_estimate: usize,
}

const ENTRY_SEPARATOR: &str = "\n\n";

/// Cleans and orders one patient's rows.
pub fn consolidate(mrn: &str, rows: &[NoteRow], rules: &CleaningRules) -> ConsolidatedReport {
    let mut entries: Vec<ReportEntry> = rows
        .iter()
        .zip(0u32..)
        .map(|(row, entry_id)| ReportEntry {
            entry_id,
            timestamp: row.timestamp,
            source_system: row.source_system.clone(),
            category: row.category.clone(),
            text: clean_note(&row.text, rules),
        })
        .collect();
    // Stable sort keeps input order among equal keys.
    entries.sort_by_key(|e| (e.timestamp.is_none(), e.timestamp));
    let token_estimate = entries
        .iter()
        .filter(|e| !e.is_empty())
        .map(|e| estimate_tokens(&e.text) + e.header_tokens())
        .sum();
    ConsolidatedReport {
        mrn: mrn.to_string(),
        entries,
        token_estimate,
    }
}

/// Text handed to the model plus where each entry landed in it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AssembledContext {
    pub text: String,
    /// Character span of each included entry, in text order.
    pub entry_spans: Vec<(u32, Span)>,
}

impl AssembledContext {
    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    /// Entries whose rendered text overlaps `span`.
    pub fn entries_in(&self, span: Span) -> Vec<u32> {
        self.entry_spans
            .iter()
            .filter(|(_, s)| s.overlaps(&span))
            .map(|(id, _)| *id)
            .collect()
    }
}

impl ConsolidatedReport {
    /// No entry has any text left after cleaning.
    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(ReportEntry::is_empty)
    }

    pub fn entry(&self, entry_id: u32) -> Option<&ReportEntry> {
        self.entries.iter().find(|e| e.entry_id == entry_id)
    }

    /// Renders the non-empty entries (all of them, or only `selected`) in
    /// chronological order with header lines.
    pub fn assemble(&self, selected: Option<&BTreeSet<u32>>) -> AssembledContext {
        let mut out = AssembledContext::default();
        let mut chars = 0;
        for entry in &self.entries {
            if entry.is_empty() || selected.is_some_and(|s| !s.contains(&entry.entry_id)) {
                continue;
            }
            if !out.text.is_empty() {
                out.text.push_str(ENTRY_SEPARATOR);
                chars += ENTRY_SEPARATOR.len();
            }
            let rendered = entry.render();
            let len = rendered.chars().count();
            out.entry_spans.push((entry.entry_id, Span { start: chars, end: chars + len }));
            out.text.push_str(&rendered);
            chars += len;
        }
        out
    }

    pub fn render(&self) -> String {
        self.assemble(None).text
    }
}
