//! Agreement between extracted values and gold labels: confusion cells for
//! occurrence booleans and date years, and the derived metrics.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::dates::{DateRecognizer, PartialDate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cell {
    Tp,
    Tn,
    Fp,
    Fn,
}

impl Cell {
    pub fn as_str(self) -> &'static str {
        match self {
            Cell::Tp => "tp",
            Cell::Tn => "tn",
            Cell::Fp => "fp",
            Cell::Fn => "fn",
        }
    }
}

pub fn compare_occurrence(pred: bool, gold: bool) -> Cell {
    match (pred, gold) {
        (true, true) => Cell::Tp,
        (false, false) => Cell::Tn,
        (true, false) => Cell::Fp,
        (false, true) => Cell::Fn,
    }
}

/// Year-level agreement. A predicted year that disagrees with a present gold
/// year is a false positive, as is any predicted year with no gold date.
pub fn compare_year(pred: Option<i32>, gold: Option<i32>) -> Cell {
    compare_dates(pred, gold)
}

/// The same rule for any date key, such as a full date.
pub fn compare_dates<T: PartialEq>(pred: Option<T>, gold: Option<T>) -> Cell {
    match (pred, gold) {
        (Some(p), Some(g)) if p == g => Cell::Tp,
        (Some(_), _) => Cell::Fp,
        (None, None) => Cell::Tn,
        (None, Some(_)) => Cell::Fn,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub const fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn record(&mut self, cell: Cell) {
        match cell {
            Cell::Tp => self.tp += 1,
            Cell::Tn => self.tn += 1,
            Cell::Fp => self.fp += 1,
            Cell::Fn => self.fn_ += 1,
        }
    }

    /// Counts with prediction and gold swapped.
    pub fn transposed(&self) -> Self {
        ConfusionCounts::new(self.tp, self.tn, self.fn_, self.fp)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts::new(self.tp + o.tp, self.tn + o.tn, self.fp + o.fp, self.fn_ + o.fn_)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl FromIterator<Cell> for ConfusionCounts {
    fn from_iter<I: IntoIterator<Item = Cell>>(iter: I) -> Self {
        let mut c = ConfusionCounts::default();
        iter.into_iter().for_each(|cell| c.record(cell));
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("no compared records")]
pub struct EmptyCounts;

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall, F1 and accuracy; ratios with a zero denominator are 0.
pub fn metrics(c: &ConfusionCounts) -> Result<MetricSet, EmptyCounts> {
    let total = c.total();
    if total == 0 {
        return Err(EmptyCounts);
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricSet {
        precision,
        recall,
        f1,
        accuracy: ratio(c.tp + c.tn, total),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRow {
    pub mrn: String,
    pub group: String,
    pub occurrence: bool,
    pub date: Option<String>,
}

/// Extracted values for one patient and group. `None` means nothing was
/// extracted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub mrn: String,
    pub group: String,
    pub occurrence: Option<bool>,
    pub date: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Occurrence,
    Year,
    /// Full-date agreement, only produced with [`DateGranularity::Full`].
    Date,
}

/// What part of a date must agree.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DateGranularity {
    #[default]
    Year,
    Full,
}

impl FieldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::Occurrence => "occurrence",
            FieldKind::Year => "year",
            FieldKind::Date => "date",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: String,
    pub field: FieldKind,
    pub counts: ConfusionCounts,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disagreement {
    pub mrn: String,
    pub group: String,
    pub field: FieldKind,
    pub cell: Cell,
    pub predicted: String,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub groups: Vec<GroupMetrics>,
    pub disagreements: Vec<Disagreement>,
    /// Predicted `(mrn, group)` pairs with no gold row; excluded from counts.
    pub unmatched_predictions: Vec<(String, String)>,
    /// Gold pairs with no prediction; scored as nothing extracted.
    pub missing_predictions: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

fn date_of(dates: &DateRecognizer, text: Option<&str>, what: &str, warnings: &mut Vec<String>) -> Option<PartialDate> {
    let text = text?.trim();
    if text.is_empty() {
        return None;
    }
    let date = dates.parse(text);
    if date.is_none() {
        warnings.push(alloc::format!("unparseable {what} date {text:?} treated as absent"));
    }
    date
}

fn show_bool(b: bool) -> String {
    if b { "true" } else { "false" }.to_string()
}

/// Joins predictions to gold rows on `(mrn, group)` and scores every group
/// on occurrence and year agreement.
pub fn aggregate(gold: &[GoldRow], predictions: &[PredictionRow], dates: &DateRecognizer) -> EvalReport {
    aggregate_with(gold, predictions, dates, DateGranularity::Year)
}

/// [`aggregate`] with a choice of date granularity.
pub fn aggregate_with(
    gold: &[GoldRow],
    predictions: &[PredictionRow],
    dates: &DateRecognizer,
    granularity: DateGranularity,
) -> EvalReport {
    let mut report = EvalReport::default();
    let mut by_key: BTreeMap<(&str, &str), &PredictionRow> = BTreeMap::new();
    for p in predictions {
        by_key.insert((p.mrn.as_str(), p.group.as_str()), p);
    }
    let gold_keys: BTreeMap<(&str, &str), &GoldRow> =
        gold.iter().map(|g| ((g.mrn.as_str(), g.group.as_str()), g)).collect();
    for key in by_key.keys() {
        if !gold_keys.contains_key(key) {
            report.unmatched_predictions.push((key.0.to_string(), key.1.to_string()));
        }
    }

    let mut counts: BTreeMap<(&str, FieldKind), ConfusionCounts> = BTreeMap::new();
    for (key, g) in &gold_keys {
        let pred = by_key.get(key).copied();
        if pred.is_none() {
            report.missing_predictions.push((key.0.to_string(), key.1.to_string()));
        }
        let pred_occ = pred.and_then(|p| p.occurrence).unwrap_or(false);
        let occ_cell = compare_occurrence(pred_occ, g.occurrence);
        counts.entry((key.1, FieldKind::Occurrence)).or_default().record(occ_cell);
        if matches!(occ_cell, Cell::Fp | Cell::Fn) {
            report.disagreements.push(Disagreement {
                mrn: g.mrn.clone(),
                group: g.group.clone(),
                field: FieldKind::Occurrence,
                cell: occ_cell,
                predicted: show_bool(pred_occ),
                gold: show_bool(g.occurrence),
            });
        }

        let pred_date = pred.and_then(|p| p.date.as_deref());
        let pred_d = date_of(dates, pred_date, "predicted", &mut report.warnings);
        let gold_d = date_of(dates, g.date.as_deref(), "gold", &mut report.warnings);
        let (field, year_cell) = match granularity {
            DateGranularity::Year => (FieldKind::Year, compare_year(pred_d.map(|d| d.year), gold_d.map(|d| d.year))),
            DateGranularity::Full => (FieldKind::Date, compare_dates(pred_d, gold_d)),
        };
        counts.entry((key.1, field)).or_default().record(year_cell);
        if matches!(year_cell, Cell::Fp | Cell::Fn) {
            report.disagreements.push(Disagreement {
                mrn: g.mrn.clone(),
                group: g.group.clone(),
                field,
                cell: year_cell,
                predicted: pred_date.unwrap_or("").to_string(),
                gold: g.date.clone().unwrap_or_default(),
            });
        }
    }

    for ((group, field), c) in counts {
        if let Ok(m) = metrics(&c) {
            report.groups.push(GroupMetrics {
                group: group.to_string(),
                field,
                counts: c,
                metrics: m,
            });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn occurrence_cells() {
        assert_eq!(compare_occurrence(true, true), Cell::Tp);
        assert_eq!(compare_occurrence(false, false), Cell::Tn);
        assert_eq!(compare_occurrence(true, false), Cell::Fp);
        assert_eq!(compare_occurrence(false, true), Cell::Fn);
    }

    #[test]
    fn year_cells() {
        assert_eq!(compare_year(Some(2015), Some(2015)), Cell::Tp);
        assert_eq!(compare_year(None, None), Cell::Tn);
        assert_eq!(compare_year(Some(2019), Some(2015)), Cell::Fp);
        assert_eq!(compare_year(Some(2019), None), Cell::Fp);
        assert_eq!(compare_year(None, Some(2015)), Cell::Fn);
    }

    #[test]
    fn mi_occurrence_row() {
        let m = metrics(&ConfusionCounts::new(7, 88, 3, 2)).unwrap();
        assert!((m.precision - 0.7).abs() < 5e-5);
        assert!((m.recall - 0.7778).abs() < 5e-5);
        assert!((m.f1 - 0.7368).abs() < 5e-5);
        assert!((m.accuracy - 0.95).abs() < 5e-5);
    }

    #[test]
    fn zero_denominators_give_zero() {
        let m = metrics(&ConfusionCounts::new(0, 95, 5, 0)).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!((m.accuracy - 0.95).abs() < 1e-12);
        assert_eq!(metrics(&ConfusionCounts::default()), Err(EmptyCounts));
    }

    fn gold(mrn: &str, occ: bool, date: Option<&str>) -> GoldRow {
        GoldRow {
            mrn: mrn.into(),
            group: "Stroke".into(),
            occurrence: occ,
            date: date.map(Into::into),
        }
    }

    fn pred(mrn: &str, occ: bool, date: Option<&str>) -> PredictionRow {
        PredictionRow {
            mrn: mrn.into(),
            group: "Stroke".into(),
            occurrence: Some(occ),
            date: date.map(Into::into),
        }
    }

    #[test]
    fn identical_tables_agree_perfectly() {
        let g = vec![gold("1", true, Some("2015-03-02")), gold("2", false, None)];
        let p = vec![pred("1", true, Some("2015-11-01")), pred("2", false, None)];
        let report = aggregate(&g, &p, &DateRecognizer::new());
        for row in &report.groups {
            assert_eq!(row.metrics.accuracy, 1.0);
        }
        assert!(report.disagreements.is_empty());
    }

    #[test]
    fn complement_has_zero_accuracy() {
        let g = vec![gold("1", true, None), gold("2", false, None)];
        let p = vec![pred("1", false, None), pred("2", true, None)];
        let report = aggregate(&g, &p, &DateRecognizer::new());
        let occ = report.groups.iter().find(|r| r.field == FieldKind::Occurrence).unwrap();
        assert_eq!(occ.metrics.accuracy, 0.0);
        assert_eq!(report.disagreements.len(), 2);
    }

    #[test]
    fn unmatched_and_missing_are_reported() {
        let g = vec![gold("1", true, None)];
        let p = vec![pred("9", true, None)];
        let report = aggregate(&g, &p, &DateRecognizer::new());
        assert_eq!(report.unmatched_predictions, [("9".to_string(), "Stroke".to_string())]);
        assert_eq!(report.missing_predictions, [("1".to_string(), "Stroke".to_string())]);
        let occ = report.groups.iter().find(|r| r.field == FieldKind::Occurrence).unwrap();
        assert_eq!(occ.counts, ConfusionCounts::new(0, 0, 0, 1));
    }

    #[test]
    fn unparseable_dates_are_absent() {
        let g = vec![gold("1", true, Some("about a decade ago"))];
        let p = vec![pred("1", true, Some("2015"))];
        let report = aggregate(&g, &p, &DateRecognizer::new());
        let year = report.groups.iter().find(|r| r.field == FieldKind::Year).unwrap();
        assert_eq!(year.counts, ConfusionCounts::new(0, 0, 1, 0));
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn full_dates_are_stricter_than_years() {
        let gold = vec![GoldRow {
            mrn: "1".into(),
            group: "stroke".into(),
            occurrence: true,
            date: Some("2015-03-02".into()),
        }];
        let pred = vec![PredictionRow {
            mrn: "1".into(),
            group: "stroke".into(),
            occurrence: Some(true),
            date: Some("2015-11-01".into()),
        }];
        let d = DateRecognizer::new();
        let by_year = aggregate(&gold, &pred, &d);
        assert_eq!(by_year.groups[1].field, FieldKind::Year);
        assert_eq!(by_year.groups[1].counts.tp, 1);
        let full = aggregate_with(&gold, &pred, &d, DateGranularity::Full);
        assert_eq!(full.groups[1].field, FieldKind::Date);
        assert_eq!(full.groups[1].counts.fp, 1);
    }
}
