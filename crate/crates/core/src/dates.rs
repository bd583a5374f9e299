//! Recognition of date-like strings for earliest-date merging and
//! year-level comparison.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use chrono::{Datelike, NaiveDate};

/// A possibly partial calendar date. Missing components sort before any
/// present one, so `2015` precedes `2015-01-01`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PartialDate {
    pub year: i32,
    pub month: u32,
    pub day: u32,
}

impl PartialDate {
    fn full(date: NaiveDate) -> Self {
        PartialDate {
            year: date.year(),
            month: date.month(),
            day: date.day(),
        }
    }
}

/// Parses ISO-8601 prefixes (`YYYY`, `YYYY-MM`, `YYYY-MM-DD`, optionally
/// followed by a time part) and any extra `chrono` date formats.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DateRecognizer {
    formats: Vec<String>,
}

impl DateRecognizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_formats(formats: Vec<String>) -> Self {
        DateRecognizer { formats }
    }

    pub fn formats(&self) -> &[String] {
        &self.formats
    }

    pub fn parse(&self, text: &str) -> Option<PartialDate> {
        let text = text.trim();
        parse_iso_prefix(text).or_else(|| {
            self.formats
                .iter()
                .find_map(|f| NaiveDate::parse_from_str(text, f).ok())
                .map(PartialDate::full)
        })
    }

    pub fn year(&self, text: &str) -> Option<i32> {
        self.parse(text).map(|d| d.year)
    }

    /// Orders two date strings by recognised date, then bytewise, so the
    /// choice of an earliest value is total and deterministic.
    pub fn compare(&self, a: &str, b: &str) -> Ordering {
        self.parse(a).cmp(&self.parse(b)).then_with(|| a.cmp(b))
    }
}

fn digits(s: &[u8]) -> Option<u32> {
    if s.is_empty() || !s.iter().all(u8::is_ascii_digit) {
        return None;
    }
    s.iter().try_fold(0u32, |acc, d| acc.checked_mul(10)?.checked_add(u32::from(d - b'0')))
}

fn parse_iso_prefix(text: &str) -> Option<PartialDate> {
    let b = text.as_bytes();
    if b.len() < 4 {
        return None;
    }
    let year = digits(&b[..4])? as i32;
    let rest = &b[4..];
    let boundary = |r: &[u8]| r.is_empty() || matches!(r[0], b'T' | b' ' | b'\t');
    if boundary(rest) {
        return Some(PartialDate { year, month: 0, day: 0 });
    }
    if rest.len() < 3 || rest[0] != b'-' {
        return None;
    }
    let month = digits(&rest[1..3])?;
    if !(1..=12).contains(&month) {
        return None;
    }
    let rest = &rest[3..];
    if boundary(rest) {
        return Some(PartialDate { year, month, day: 0 });
    }
    if rest.len() < 3 || rest[0] != b'-' {
        return None;
    }
    let day = digits(&rest[1..3])?;
    NaiveDate::from_ymd_opt(year, month, day)?;
    boundary(&rest[3..]).then_some(PartialDate { year, month, day })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn iso_prefixes() {
        let r = DateRecognizer::new();
        assert_eq!(r.parse("2015-03-02"), Some(PartialDate { year: 2015, month: 3, day: 2 }));
        assert_eq!(r.parse("2015-03-02T10:00:00Z").map(|d| d.day), Some(2));
        assert_eq!(r.parse("2015-03"), Some(PartialDate { year: 2015, month: 3, day: 0 }));
        assert_eq!(r.year("2015"), Some(2015));
        assert_eq!(r.parse("2015-13-01"), None);
        assert_eq!(r.parse("2015-02-30"), None);
        assert_eq!(r.parse("about a decade ago"), None);
        assert_eq!(r.parse("20150302"), None);
    }

    #[test]
    fn extra_formats() {
        let r = DateRecognizer::with_formats(vec!["%m/%d/%Y".to_string()]);
        assert_eq!(r.year("03/02/2015"), Some(2015));
        assert_eq!(DateRecognizer::new().year("03/02/2015"), None);
    }

    #[test]
    fn ordering_is_total() {
        let r = DateRecognizer::new();
        assert_eq!(r.compare("2015-03-02", "2019-07-01"), Ordering::Less);
        assert_eq!(r.compare("2015", "2015-01-01"), Ordering::Less);
        assert_eq!(r.compare("2015-03-02", "2015-03-02 "), Ordering::Less);
    }
}
