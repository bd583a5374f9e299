//! Feature groups, search terms, context budgeting and rule-based
//! reconciliation of per-chunk extraction output.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dates::DateRecognizer;
use crate::json::loose_eq;
use crate::schema::{validate_output, DType, FieldSpec, MergeRule, ToolSchemaDocument, ValidationReport, Verdict};
use crate::text::estimate_tokens;

/// A set of features retrieved and extracted together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub group_id: String,
    pub name: String,
    /// Id of the tool extracting this group.
    pub tool_ref: String,
    /// Clinical criteria inserted into the system prompt.
    #[serde(default)]
    pub guidance: String,
}

pub const MAX_TERMS: usize = 16;
pub const MIN_MODEL_TERMS: usize = 4;
/// Upper bound requested from the model.
pub const REQUESTED_TERMS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TermOrigin {
    ModelGenerated,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchTermSet {
    pub group_id: String,
    pub terms: Vec<String>,
    pub origin: TermOrigin,
}

fn push_term(terms: &mut Vec<String>, raw: &str) {
    let term = raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    if !term.is_empty() && terms.len() < MAX_TERMS && !terms.contains(&term) {
        terms.push(term);
    }
}

/// Deterministic terms from the group name, field names and description
/// phrases.
pub fn fallback_terms(group: &FeatureGroup, fields: &[FieldSpec]) -> SearchTermSet {
    let mut terms = Vec::new();
    push_term(&mut terms, &group.name);
    for field in fields {
        push_term(&mut terms, &field.name);
    }
    for field in fields {
        for phrase in field.description.split([',', ';', '.', ':', '(', ')', '\n']) {
            push_term(&mut terms, phrase);
        }
    }
    SearchTermSet {
        group_id: group.group_id.clone(),
        terms,
        origin: TermOrigin::Fallback,
    }
}

/// Pulls a JSON array of strings out of a model reply, tolerating prose or
/// code fences around it.
pub fn parse_term_reply(reply: &str) -> Option<Vec<String>> {
    let start = reply.find('[')?;
    let end = reply.rfind(']')?;
    if end < start {
        return None;
    }
    let items: Vec<Value> = serde_json::from_str(&reply[start..=end]).ok()?;
    let terms: Vec<String> = items
        .into_iter()
        .filter_map(|v| v.as_str().map(ToString::to_string))
        .collect();
    (!terms.is_empty()).then_some(terms)
}

/// Combines the group name with model-suggested terms, deduplicating
/// case-insensitively and topping up from the fallback terms when the model
/// offered too few. Returns the fallback set if the reply has no terms.
pub fn terms_from_reply(group: &FeatureGroup, fields: &[FieldSpec], reply: Option<&str>) -> SearchTermSet {
    let fallback = fallback_terms(group, fields);
    let Some(suggested) = reply.and_then(parse_term_reply) else {
        return fallback;
    };
    let mut terms = Vec::new();
    push_term(&mut terms, &group.name);
    for term in &suggested {
        push_term(&mut terms, term);
    }
    if terms.len() <= 1 {
        return fallback;
    }
    for term in &fallback.terms {
        if terms.len() >= MIN_MODEL_TERMS {
            break;
        }
        push_term(&mut terms, term);
    }
    SearchTermSet {
        group_id: group.group_id.clone(),
        terms,
        origin: TermOrigin::ModelGenerated,
    }
}

/// Messages asking a chat model for retrieval terms: `(system, user)`.
pub fn search_term_prompt(group: &FeatureGroup, fields: &[FieldSpec]) -> (String, String) {
    let system = format!(
        "You generate search terms for semantic retrieval over clinical notes. \
         Reply with a JSON array of at most {REQUESTED_TERMS} short strings and nothing else."
    );
    let mut user = format!("Feature group: {}\n", group.name);
    if !group.guidance.is_empty() {
        user.push_str(&format!("Criteria: {}\n", group.guidance));
    }
    for field in fields {
        user.push_str(&format!("- {} ({}): {}\n", field.name, field.dtype, field.description));
    }
    user.push_str("List synonyms, abbreviations and phrases a clinician would use when documenting these features.");
    (system, user)
}

/// A versioned system prompt with `{group_name}`, `{guidance}` and `{today}`
/// placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub version: String,
    pub text: String,
}

pub const DEFAULT_SYSTEM_PROMPT: &str = "\
You are a clinical data abstractor reviewing excerpts of a single patient's \
medical record, ordered chronologically. Today's date is {today}.
Extract the features of the group \"{group_name}\" by calling the provided \
function exactly once. Use only information stated in the notes; leave a \
field out when the notes do not support a value. Dates must be written as \
YYYY-MM-DD, YYYY-MM or YYYY, matching the precision the notes give.
Criteria: {guidance}";

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            version: "extract-v1".to_string(),
            text: DEFAULT_SYSTEM_PROMPT.to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn render(&self, group_name: &str, guidance: &str, today: &str) -> String {
        let guidance = if guidance.is_empty() { "none given" } else { guidance };
        self.text
            .replace("{group_name}", group_name)
            .replace("{guidance}", guidance)
            .replace("{today}", today)
    }
}

/// Instruction appended when a reply failed validation.
pub const CORRECTION_NOTE: &str = "\n\nYour previous reply was not a valid call of the provided function. \
Call the function exactly once with arguments that satisfy its JSON schema.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("context budget is not positive: model context {model_ctx}, fixed prompt {fixed} tokens, output reserve {reserve}")]
pub struct BudgetError {
    pub model_ctx: usize,
    pub fixed: usize,
    pub reserve: usize,
}

/// Fraction of the remaining window given to note text; the remainder
/// absorbs estimator error.
pub const BUDGET_NUMERATOR: usize = 9;
pub const BUDGET_DENOMINATOR: usize = 10;

/// `floor(0.9 * (model_ctx - prompt - tool - reserve))` in estimated tokens.
pub fn context_budget_tokens(
    model_ctx: usize,
    prompt_tokens: usize,
    tool_tokens: usize,
    output_reserve: usize,
) -> Result<usize, BudgetError> {
    let fixed = prompt_tokens + tool_tokens;
    let err = BudgetError {
        model_ctx,
        fixed,
        reserve: output_reserve,
    };
    let remaining = model_ctx.checked_sub(fixed + output_reserve).ok_or(err)?;
    let budget = remaining * BUDGET_NUMERATOR / BUDGET_DENOMINATOR;
    if budget == 0 {
        return Err(err);
    }
    Ok(budget)
}

pub fn context_budget(
    model_ctx: usize,
    system_prompt: &str,
    tool_doc: &ToolSchemaDocument,
    output_reserve: usize,
) -> Result<usize, BudgetError> {
    context_budget_tokens(
        model_ctx,
        estimate_tokens(system_prompt),
        estimate_tokens(tool_doc.as_str()),
        output_reserve,
    )
}

/// Extraction output for one context chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialOutput {
    pub chunk_index: usize,
    pub value: Value,
    pub validation: ValidationReport,
    /// Model calls spent, including retries.
    pub attempts: u32,
    /// Set when no usable reply was obtained.
    pub error: Option<String>,
}

impl PartialOutput {
    pub fn from_value(chunk_index: usize, value: Value, doc: &ToolSchemaDocument, attempts: u32) -> Self {
        let validation = validate_output(doc, &value);
        PartialOutput {
            chunk_index,
            value,
            validation,
            attempts,
            error: None,
        }
    }

    pub fn failed(chunk_index: usize, error: impl Into<String>, attempts: u32) -> Self {
        PartialOutput {
            chunk_index,
            value: Value::Null,
            validation: ValidationReport {
                verdict: Verdict::Invalid,
                violations: Vec::new(),
            },
            attempts,
            error: Some(error.into()),
        }
    }

    /// Valid or incomplete output without a recorded error.
    pub fn is_usable(&self) -> bool {
        self.error.is_none() && matches!(self.validation.verdict, Verdict::Valid | Verdict::Incomplete)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultStatus {
    Found,
    NotFound,
    Error,
}

impl ResultStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ResultStatus::Found => "found",
            ResultStatus::NotFound => "not_found",
            ResultStatus::Error => "error",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "found" => Some(ResultStatus::Found),
            "not_found" => Some(ResultStatus::NotFound),
            "error" => Some(ResultStatus::Error),
            _ => None,
        }
    }
}

/// Merged value of all usable partials.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconciled {
    /// Always a JSON object; empty unless `status` is `Found`.
    pub value: Value,
    pub status: ResultStatus,
    /// Chunk indices that supplied at least one value.
    pub contributing: Vec<usize>,
    pub warnings: Vec<String>,
    pub detail: Option<String>,
}

/// Merges partial outputs field by field.
///
/// Default rules by type: booleans OR together; strings whose present values
/// all parse as dates take the earliest, other strings and numbers take the
/// first value in chunk order; arrays take an order-preserving deduplicated
/// union; objects merge child by child. A field's `merge` hint overrides the
/// default. Absent everywhere means absent; if every field is absent the
/// status is `NotFound`. Defaults fill absent fields afterwards, and the
/// result must validate for the status to be `Found`.
pub fn reconcile(partials: &[PartialOutput], doc: &ToolSchemaDocument, dates: &DateRecognizer) -> Reconciled {
    let mut usable: Vec<&PartialOutput> = partials.iter().filter(|p| p.is_usable()).collect();
    if usable.is_empty() {
        return Reconciled {
            value: Value::Object(Map::new()),
            status: ResultStatus::Error,
            contributing: Vec::new(),
            warnings: Vec::new(),
            detail: Some("no chunk produced a usable extraction".to_string()),
        };
    }
    usable.sort_by_key(|p| p.chunk_index);
    let sources: Vec<(usize, &Map<String, Value>)> = usable
        .iter()
        .filter_map(|p| p.value.as_object().map(|m| (p.chunk_index, m)))
        .collect();

    let mut merger = Merger {
        dates,
        warnings: Vec::new(),
        contributing: BTreeSet::new(),
    };
    let mut merged = merger.merge_object(doc.fields(), &sources, "");
    let contributing: Vec<usize> = merger.contributing.into_iter().collect();
    let mut warnings = merger.warnings;

    if merged.is_empty() {
        return Reconciled {
            value: Value::Object(Map::new()),
            status: ResultStatus::NotFound,
            contributing,
            warnings,
            detail: None,
        };
    }
    apply_defaults(doc.fields(), &mut merged);
    let value = Value::Object(merged);
    let report = validate_output(doc, &value);
    if report.is_valid() {
        Reconciled {
            value,
            status: ResultStatus::Found,
            contributing,
            warnings,
            detail: None,
        }
    } else {
        let first = &report.violations[0];
        let detail = format!(
            "reconciled value is {}: {} {}",
            match report.verdict {
                Verdict::Incomplete => "incomplete",
                _ => "invalid",
            },
            first.path,
            first.detail
        );
        warnings.push(detail.clone());
        Reconciled {
            value,
            status: ResultStatus::Error,
            contributing,
            warnings,
            detail: Some(detail),
        }
    }
}

struct Merger<'a> {
    dates: &'a DateRecognizer,
    warnings: Vec<String>,
    contributing: BTreeSet<usize>,
}

impl Merger<'_> {
    fn merge_object(
        &mut self,
        fields: &[FieldSpec],
        sources: &[(usize, &Map<String, Value>)],
        path: &str,
    ) -> Map<String, Value> {
        let mut out = Map::new();
        for field in fields {
            let field_path = format!("{path}/{}", field.name);
            let present: Vec<(usize, &Value)> = sources
                .iter()
                .filter_map(|(chunk, map)| match map.get(&field.name) {
                    None | Some(Value::Null) => None,
                    Some(v) => Some((*chunk, v)),
                })
                .collect();
            if let Some(value) = self.merge_field(field, &present, &field_path) {
                out.insert(field.name.clone(), value);
            }
        }
        out
    }

    fn merge_field(&mut self, field: &FieldSpec, present: &[(usize, &Value)], path: &str) -> Option<Value> {
        if present.is_empty() {
            return None;
        }
        if field.dtype == DType::Object {
            let children: Vec<(usize, &Map<String, Value>)> =
                present.iter().filter_map(|(c, v)| v.as_object().map(|m| (*c, m))).collect();
            let merged = self.merge_object(&field.children, &children, path);
            return (!merged.is_empty()).then_some(Value::Object(merged));
        }
        let rule = field.merge.unwrap_or_else(|| default_rule(field, present, self.dates));
        match rule {
            MergeRule::Or => {
                let any = present.iter().any(|(_, v)| v.as_bool() == Some(true));
                let chunk = present
                    .iter()
                    .find(|(_, v)| v.as_bool() == Some(any))
                    .map_or(present[0].0, |(c, _)| *c);
                self.contributing.insert(chunk);
                Some(Value::Bool(any))
            }
            MergeRule::Earliest => {
                let parsed: Vec<(usize, &str)> = present.iter().filter_map(|(c, v)| v.as_str().map(|s| (*c, s))).collect();
                if parsed.len() == present.len() && parsed.iter().all(|(_, s)| self.dates.parse(s).is_some()) {
                    let (chunk, earliest) = parsed
                        .iter()
                        .copied()
                        .min_by(|a, b| self.dates.compare(a.1, b.1).then(a.0.cmp(&b.0)))?;
                    self.contributing.insert(chunk);
                    Some(Value::String(earliest.to_string()))
                } else {
                    self.warnings.push(format!("{path}: unparseable date, keeping first value in chunk order"));
                    self.first(present)
                }
            }
            MergeRule::First => self.first(present),
            MergeRule::Union => {
                let mut items: Vec<Value> = Vec::new();
                for (chunk, value) in present {
                    if let Some(array) = value.as_array() {
                        self.contributing.insert(*chunk);
                        for item in array {
                            if !items.iter().any(|seen| loose_eq(seen, item)) {
                                items.push(item.clone());
                            }
                        }
                    }
                }
                Some(Value::Array(items))
            }
        }
    }

    fn first(&mut self, present: &[(usize, &Value)]) -> Option<Value> {
        let (chunk, value) = present.first()?;
        self.contributing.insert(*chunk);
        Some((*value).clone())
    }
}

fn default_rule(field: &FieldSpec, present: &[(usize, &Value)], dates: &DateRecognizer) -> MergeRule {
    match field.dtype {
        DType::Boolean => MergeRule::Or,
        DType::Array => MergeRule::Union,
        DType::String if field.enum_options.is_none() => {
            let date_like = present
                .iter()
                .filter(|(_, v)| v.as_str().is_some_and(|s| dates.parse(s).is_some()))
                .count();
            // A mix of dates and prose goes through Earliest so it is warned about.
            if date_like > 0 {
                MergeRule::Earliest
            } else {
                MergeRule::First
            }
        }
        _ => MergeRule::First,
    }
}

fn apply_defaults(fields: &[FieldSpec], map: &mut Map<String, Value>) {
    for field in fields {
        match map.get_mut(&field.name) {
            Some(Value::Object(child)) if field.dtype == DType::Object => apply_defaults(&field.children, child),
            Some(_) => {}
            None => {
                if let Some(default) = &field.default {
                    map.insert(field.name.clone(), default.clone());
                }
            }
        }
    }
}

/// Reconciled output for one patient and feature group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub mrn: String,
    pub group_id: String,
    pub value: Value,
    pub status: ResultStatus,
    /// Contributing `(entry_id, chunk_index)` pairs.
    pub provenance: Vec<(u32, usize)>,
    pub model_id: String,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl ExtractionResult {
    pub fn not_found(mrn: &str, group_id: &str, model_id: &str, threshold: f64) -> Self {
        ExtractionResult {
            mrn: mrn.to_string(),
            group_id: group_id.to_string(),
            value: Value::Object(Map::new()),
            status: ResultStatus::NotFound,
            provenance: Vec::new(),
            model_id: model_id.to_string(),
            threshold,
            detail: None,
        }
    }

    pub fn error(mrn: &str, group_id: &str, model_id: &str, threshold: f64, detail: impl Into<String>) -> Self {
        ExtractionResult {
            status: ResultStatus::Error,
            detail: Some(detail.into()),
            ..Self::not_found(mrn, group_id, model_id, threshold)
        }
    }

    /// `entry:chunk` pairs joined by `;`.
    pub fn provenance_string(&self) -> String {
        self.provenance
            .iter()
            .map(|(e, c)| format!("{e}:{c}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn parse_provenance(text: &str) -> Option<Vec<(u32, usize)>> {
        if text.is_empty() {
            return Some(vec![]);
        }
        text.split(';')
            .map(|pair| {
                let (e, c) = pair.split_once(':')?;
                Some((e.parse().ok()?, c.parse().ok()?))
            })
            .collect()
    }
}
