//! Extraction tools and fields, their compilation to a function-calling
//! schema document, and conformance checking of model output.
//!
//! A [`ToolSpec`] is what a user authors: an ordered list of [`FieldSpec`]s,
//! possibly nested through objects and arrays. [`compile_tool`] turns it into
//! a [`ToolSchemaDocument`] in the chat-completions `tools` format with
//! canonical bytes, and [`parse_tool_document`] inverts that. Model replies
//! are checked with [`validate_output`].
//!
//! Besides the standard JSON Schema keywords the document carries three
//! vendor keys: `x-order` (declaration order of object properties, which a
//! sorted-key encoding would otherwise lose), `x-default` (applied during
//! reconciliation, never during validation) and `x-merge` (a per-field
//! reconciliation hint).

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::json::{canonical_string, loose_eq, number_value, pointer_push};

/// Deepest nesting accepted for fields (top-level fields are depth 1).
pub const MAX_DEPTH: usize = 8;

pub const ORDER_KEY: &str = "x-order";
pub const DEFAULT_KEY: &str = "x-default";
pub const MERGE_KEY: &str = "x-merge";

/// The data type of a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    String,
    Number,
    Integer,
    Boolean,
    Array,
    Object,
}

impl DType {
    pub const ALL: [DType; 6] = [
        DType::String,
        DType::Number,
        DType::Integer,
        DType::Boolean,
        DType::Array,
        DType::Object,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DType::String => "string",
            DType::Number => "number",
            DType::Integer => "integer",
            DType::Boolean => "boolean",
            DType::Array => "array",
            DType::Object => "object",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        DType::ALL.into_iter().find(|d| d.as_str() == s)
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, DType::Number | DType::Integer)
    }

    pub fn is_scalar(self) -> bool {
        !matches!(self, DType::Array | DType::Object)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How partial values of one field are merged across context chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeRule {
    /// Logical OR; booleans only.
    Or,
    /// Earliest recognised date; strings only.
    Earliest,
    /// First present value in chunk order.
    First,
    /// Order-preserving deduplicated union; arrays only.
    Union,
}

impl MergeRule {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeRule::Or => "or",
            MergeRule::Earliest => "earliest",
            MergeRule::First => "first",
            MergeRule::Union => "union",
        }
    }

    pub fn parse(s: &str) -> Option<MergeRule> {
        [MergeRule::Or, MergeRule::Earliest, MergeRule::First, MergeRule::Union]
            .into_iter()
            .find(|m| m.as_str() == s)
    }

    fn applies_to(self, dtype: DType) -> bool {
        match self {
            MergeRule::Or => dtype == DType::Boolean,
            MergeRule::Earliest => dtype == DType::String,
            MergeRule::First => dtype.is_scalar(),
            MergeRule::Union => dtype == DType::Array,
        }
    }
}

/// One user-defined extraction target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(rename = "type")]
    pub dtype: DType,
    #[serde(default)]
    pub required: bool,
    #[serde(default, rename = "enum", skip_serializing_if = "Option::is_none")]
    pub enum_options: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge: Option<MergeRule>,
    #[serde(default, rename = "items", skip_serializing_if = "Option::is_none")]
    pub item_spec: Option<Box<FieldSpec>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<FieldSpec>,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, dtype: DType) -> Self {
        FieldSpec {
            name: name.into(),
            description: String::new(),
            dtype,
            required: false,
            enum_options: None,
            pattern: None,
            min: None,
            max: None,
            default: None,
            merge: None,
            item_spec: None,
            children: Vec::new(),
        }
    }

    pub fn describe(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }

    pub fn required(mut self) -> Self {
        self.required = true;
        self
    }

    pub fn with_enum(mut self, options: Vec<Value>) -> Self {
        self.enum_options = Some(options);
        self
    }

    pub fn with_pattern(mut self, pattern: impl Into<String>) -> Self {
        self.pattern = Some(pattern.into());
        self
    }

    pub fn with_bounds(mut self, min: Option<f64>, max: Option<f64>) -> Self {
        self.min = min;
        self.max = max;
        self
    }

    pub fn with_default(mut self, default: Value) -> Self {
        self.default = Some(default);
        self
    }

    pub fn with_merge(mut self, merge: MergeRule) -> Self {
        self.merge = Some(merge);
        self
    }

    pub fn with_items(mut self, item: FieldSpec) -> Self {
        self.item_spec = Some(Box::new(item));
        self
    }

    pub fn with_children(mut self, children: Vec<FieldSpec>) -> Self {
        self.children = children;
        self
    }
}

/// A named group of fields that compiles to one function-calling tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSpec {
    #[serde(default)]
    pub tool_id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub fields: Vec<FieldSpec>,
    #[serde(default)]
    pub version: u64,
}

impl ToolSpec {
    pub fn new(name: impl Into<String>, description: impl Into<String>, fields: Vec<FieldSpec>) -> Self {
        ToolSpec {
            tool_id: String::new(),
            name: name.into(),
            description: description.into(),
            fields,
            version: 1,
        }
    }

    /// Checks every structural and constraint invariant.
    pub fn check(&self) -> Result<(), SchemaError> {
        check_tool_name(&self.name)?;
        check_fields(&self.fields, "", 1)
    }

    /// Structural equality ignoring the out-of-band id and version.
    pub fn same_structure(&self, other: &ToolSpec) -> bool {
        self.name == other.name && self.description == other.description && self.fields == other.fields
    }

    /// Finds a field by slash-separated path of names (items are `[]`).
    pub fn field(&self, path: &str) -> Option<&FieldSpec> {
        let mut fields = &self.fields;
        let mut found: Option<&FieldSpec> = None;
        for part in path.trim_start_matches('/').split('/') {
            let current = match found {
                Some(f) if part == "[]" => f.item_spec.as_deref(),
                _ => fields.iter().find(|f| f.name == part),
            }?;
            fields = &current.children;
            found = Some(current);
        }
        found
    }
}

/// Why a tool spec or document was rejected. Paths name the offending field
/// (`/Blood Pressure/Systolic`, array items as `[]`); document errors carry a
/// JSON pointer into the document instead.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchemaError {
    #[error("invalid tool name {name:?}: must be 1-64 characters of [A-Za-z0-9_-]")]
    InvalidToolName { name: String },
    #[error("{path}: field name must not be empty")]
    EmptyName { path: String },
    #[error("{path}: duplicate field name")]
    DuplicateName { path: String },
    #[error("{path}: `{constraint}` is not allowed on {dtype} fields")]
    ConstraintMismatch {
        path: String,
        constraint: &'static str,
        dtype: DType,
    },
    #[error("{path}: {detail}")]
    InvalidConstraint { path: String, detail: String },
    #[error("{path}: nesting deeper than {MAX_DEPTH} levels")]
    TooDeep { path: String },
    #[error("{pointer}: unsupported type {found:?}")]
    UnsupportedType { pointer: String, found: String },
    #[error("{pointer}: {detail}")]
    Document { pointer: String, detail: String },
}

impl SchemaError {
    /// The field path or JSON pointer the error refers to.
    pub fn path(&self) -> &str {
        match self {
            SchemaError::InvalidToolName { .. } => "",
            SchemaError::EmptyName { path }
            | SchemaError::DuplicateName { path }
            | SchemaError::ConstraintMismatch { path, .. }
            | SchemaError::InvalidConstraint { path, .. }
            | SchemaError::TooDeep { path } => path,
            SchemaError::UnsupportedType { pointer, .. } | SchemaError::Document { pointer, .. } => pointer,
        }
    }
}

fn check_tool_name(name: &str) -> Result<(), SchemaError> {
    let ok = !name.is_empty()
        && name.len() <= 64
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-');
    if ok {
        Ok(())
    } else {
        Err(SchemaError::InvalidToolName { name: name.to_string() })
    }
}

fn field_path(parent: &str, name: &str) -> String {
    format!("{parent}/{name}")
}

fn check_fields(fields: &[FieldSpec], parent: &str, depth: usize) -> Result<(), SchemaError> {
    let mut seen = BTreeSet::new();
    for field in fields {
        let path = field_path(parent, &field.name);
        if field.name.trim().is_empty() {
            return Err(SchemaError::EmptyName { path });
        }
        if !seen.insert(field.name.as_str()) {
            return Err(SchemaError::DuplicateName { path });
        }
        check_field(field, &path, depth)?;
    }
    Ok(())
}

fn check_field(field: &FieldSpec, path: &str, depth: usize) -> Result<(), SchemaError> {
    if depth > MAX_DEPTH {
        return Err(SchemaError::TooDeep { path: path.to_string() });
    }
    let mismatch = |constraint| SchemaError::ConstraintMismatch {
        path: path.to_string(),
        constraint,
        dtype: field.dtype,
    };
    let invalid = |detail: String| SchemaError::InvalidConstraint {
        path: path.to_string(),
        detail,
    };

    let mut patterns = BTreeMap::new();
    if let Some(pattern) = &field.pattern {
        if field.dtype != DType::String {
            return Err(mismatch("pattern"));
        }
        let re = Regex::new(pattern).map_err(|e| invalid(format!("invalid pattern: {e}")))?;
        patterns.insert(pattern.clone(), re);
    }
    if field.min.is_some() || field.max.is_some() {
        if !field.dtype.is_numeric() {
            return Err(mismatch(if field.min.is_some() { "min" } else { "max" }));
        }
        if field.min.is_some_and(|m| !m.is_finite()) || field.max.is_some_and(|m| !m.is_finite()) {
            return Err(invalid("bounds must be finite".to_string()));
        }
        if let (Some(lo), Some(hi)) = (field.min, field.max) {
            if lo > hi {
                return Err(invalid(format!("min {lo} exceeds max {hi}")));
            }
        }
    }
    if let Some(merge) = field.merge {
        if !merge.applies_to(field.dtype) {
            return Err(mismatch("merge"));
        }
    }

    match (&field.item_spec, field.dtype) {
        (Some(item), DType::Array) => {
            if item.required {
                return Err(invalid("array items cannot be marked required".to_string()));
            }
            let item_path = field_path(path, "[]");
            if item.name.trim().is_empty() {
                return Err(SchemaError::EmptyName { path: item_path });
            }
            check_field(item, &item_path, depth + 1)?;
        }
        (None, DType::Array) => return Err(invalid("array fields need an item spec".to_string())),
        (Some(_), _) => return Err(mismatch("items")),
        (None, _) => {}
    }
    match (field.children.is_empty(), field.dtype) {
        (false, DType::Object) => check_fields(&field.children, path, depth + 1)?,
        (true, DType::Object) => return Err(invalid("object fields need at least one child".to_string())),
        (false, _) => return Err(mismatch("children")),
        (true, _) => {}
    }

    if let Some(options) = &field.enum_options {
        if !field.dtype.is_scalar() {
            return Err(mismatch("enum"));
        }
        if options.is_empty() {
            return Err(invalid("enum must list at least one option".to_string()));
        }
        for (i, option) in options.iter().enumerate() {
            if options[..i].iter().any(|o| loose_eq(o, option)) {
                return Err(invalid(format!("duplicate enum option {option}")));
            }
            let mut scratch = Vec::new();
            let unconstrained = FieldSpec {
                enum_options: None,
                ..field_shallow(field)
            };
            validate_value(&unconstrained, option, "", &patterns, &mut scratch);
            if let Some(v) = scratch.first() {
                return Err(invalid(format!("enum option {option}: {}", v.detail)));
            }
        }
    }
    if let Some(default) = &field.default {
        let mut scratch = Vec::new();
        // Nested patterns are not in the local cache; collect them.
        collect_patterns(field, &mut patterns).map_err(invalid)?;
        validate_value(field, default, "", &patterns, &mut scratch);
        if let Some(v) = scratch.first() {
            return Err(invalid(format!("default does not satisfy constraints: {}{}", v.path, v.detail)));
        }
    }
    Ok(())
}

/// A copy of `field` without nested structure, for checking scalar options.
fn field_shallow(field: &FieldSpec) -> FieldSpec {
    FieldSpec {
        item_spec: None,
        children: Vec::new(),
        default: None,
        ..field.clone()
    }
}

fn collect_patterns(field: &FieldSpec, out: &mut BTreeMap<String, Regex>) -> Result<(), String> {
    if let Some(p) = &field.pattern {
        if !out.contains_key(p) {
            let re = Regex::new(p).map_err(|e| format!("invalid pattern: {e}"))?;
            out.insert(p.clone(), re);
        }
    }
    if let Some(item) = &field.item_spec {
        collect_patterns(item, out)?;
    }
    for child in &field.children {
        collect_patterns(child, out)?;
    }
    Ok(())
}

/// A compiled tool in function-calling format, with its canonical bytes.
///
/// Construct with [`compile_tool`] or [`ToolSchemaDocument::from_json`];
/// both guarantee the document describes a valid tool.
#[derive(Clone)]
pub struct ToolSchemaDocument {
    value: Value,
    canonical: String,
    spec: ToolSpec,
    patterns: BTreeMap<String, Regex>,
}

impl fmt::Debug for ToolSchemaDocument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("ToolSchemaDocument").field(&self.canonical).finish()
    }
}

impl PartialEq for ToolSchemaDocument {
    fn eq(&self, other: &Self) -> bool {
        self.canonical == other.canonical
    }
}

impl ToolSchemaDocument {
    /// Parses and checks a document from JSON text.
    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        let value: Value = serde_json::from_str(text).map_err(|e| SchemaError::Document {
            pointer: String::new(),
            detail: format!("malformed JSON: {e}"),
        })?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, SchemaError> {
        let spec = parse_tool_document_value(&value)?;
        Self::assemble(value, spec)
    }

    fn assemble(value: Value, spec: ToolSpec) -> Result<Self, SchemaError> {
        let mut patterns = BTreeMap::new();
        for field in &spec.fields {
            collect_patterns(field, &mut patterns).map_err(|detail| SchemaError::InvalidConstraint {
                path: field_path("", &field.name),
                detail,
            })?;
        }
        let canonical = canonical_string(&value);
        Ok(ToolSchemaDocument {
            value,
            canonical,
            spec,
            patterns,
        })
    }

    /// Canonical sorted-key, whitespace-free encoding.
    pub fn as_str(&self) -> &str {
        &self.canonical
    }

    pub fn value(&self) -> &Value {
        &self.value
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.spec.fields
    }

    /// The `parameters` object of the function.
    pub fn parameters(&self) -> &Value {
        &self.value["function"]["parameters"]
    }
}

impl fmt::Display for ToolSchemaDocument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical)
    }
}

/// Compiles a tool into its function-calling document.
pub fn compile_tool(spec: &ToolSpec) -> Result<ToolSchemaDocument, SchemaError> {
    spec.check()?;
    let mut function = Map::new();
    function.insert("name".into(), Value::String(spec.name.clone()));
    function.insert("description".into(), Value::String(spec.description.clone()));
    function.insert("parameters".into(), object_schema(&spec.fields));
    let mut root = Map::new();
    root.insert("type".into(), Value::String("function".into()));
    root.insert("function".into(), Value::Object(function));
    let body = ToolSpec {
        tool_id: String::new(),
        version: 0,
        ..spec.clone()
    };
    ToolSchemaDocument::assemble(Value::Object(root), body)
}

fn object_schema(fields: &[FieldSpec]) -> Value {
    let mut properties = Map::new();
    for field in fields {
        properties.insert(field.name.clone(), field_schema(field));
    }
    let required: Vec<Value> = fields
        .iter()
        .filter(|f| f.required)
        .map(|f| Value::String(f.name.clone()))
        .collect();
    let order: Vec<Value> = fields.iter().map(|f| Value::String(f.name.clone())).collect();
    let mut out = Map::new();
    out.insert("type".into(), Value::String("object".into()));
    out.insert("properties".into(), Value::Object(properties));
    out.insert("required".into(), Value::Array(required));
    out.insert("additionalProperties".into(), Value::Bool(false));
    out.insert(ORDER_KEY.into(), Value::Array(order));
    Value::Object(out)
}

fn field_schema(field: &FieldSpec) -> Value {
    let mut out = match field.dtype {
        DType::Object => match object_schema(&field.children) {
            Value::Object(map) => map,
            _ => unreachable!(),
        },
        _ => {
            let mut map = Map::new();
            map.insert("type".into(), Value::String(field.dtype.as_str().into()));
            map
        }
    };
    out.insert("description".into(), Value::String(field.description.clone()));
    if let Some(options) = &field.enum_options {
        out.insert("enum".into(), Value::Array(options.clone()));
    }
    if let Some(pattern) = &field.pattern {
        out.insert("pattern".into(), Value::String(pattern.clone()));
    }
    if let Some(min) = field.min {
        out.insert("minimum".into(), number_value(min));
    }
    if let Some(max) = field.max {
        out.insert("maximum".into(), number_value(max));
    }
    if let Some(default) = &field.default {
        out.insert(DEFAULT_KEY.into(), default.clone());
    }
    if let Some(merge) = field.merge {
        out.insert(MERGE_KEY.into(), Value::String(merge.as_str().into()));
    }
    if let Some(item) = &field.item_spec {
        let mut item_schema = match field_schema(item) {
            Value::Object(map) => map,
            _ => unreachable!(),
        };
        item_schema.insert("title".into(), Value::String(item.name.clone()));
        out.insert("items".into(), Value::Object(item_schema));
    }
    Value::Object(out)
}

/// Recovers the tool spec from a document. The id is empty and the version
/// zero; both travel outside the document.
pub fn parse_tool_document(doc: &ToolSchemaDocument) -> Result<ToolSpec, SchemaError> {
    parse_tool_document_value(doc.value())
}

/// Like [`parse_tool_document`] but over an arbitrary JSON value, rejecting
/// unknown keys and unsupported types with a JSON pointer.
pub fn parse_tool_document_value(value: &Value) -> Result<ToolSpec, SchemaError> {
    let root = expect_object(value, "")?;
    expect_keys(root, "", &["type", "function"])?;
    match root.get("type") {
        Some(Value::String(t)) if t == "function" => {}
        _ => return Err(doc_err("/type", "expected \"function\"")),
    }
    let function = expect_object(required_key(root, "", "function")?, "/function")?;
    expect_keys(function, "/function", &["name", "description", "parameters"])?;
    let name = expect_str(required_key(function, "/function", "name")?, "/function/name")?;
    let description = match function.get("description") {
        Some(v) => expect_str(v, "/function/description")?,
        None => String::new(),
    };
    let params_ptr = "/function/parameters";
    let params = expect_object(required_key(function, "/function", "parameters")?, params_ptr)?;
    expect_keys(
        params,
        params_ptr,
        &["type", "properties", "required", "additionalProperties", ORDER_KEY],
    )?;
    match params.get("type") {
        Some(Value::String(t)) if t == "object" => {}
        _ => return Err(doc_err(&pointer_push(params_ptr, "type"), "expected \"object\"")),
    }
    let fields = parse_object_fields(params, params_ptr, 1)?;
    let spec = ToolSpec {
        tool_id: String::new(),
        name,
        description,
        fields,
        version: 0,
    };
    spec.check()?;
    Ok(spec)
}

const FIELD_KEYS: &[&str] = &[
    "type",
    "description",
    "enum",
    "pattern",
    "minimum",
    "maximum",
    DEFAULT_KEY,
    MERGE_KEY,
    "items",
    "properties",
    "required",
    "additionalProperties",
    ORDER_KEY,
];

fn doc_err(pointer: &str, detail: impl Into<String>) -> SchemaError {
    SchemaError::Document {
        pointer: pointer.to_string(),
        detail: detail.into(),
    }
}

fn expect_object<'a>(value: &'a Value, pointer: &str) -> Result<&'a Map<String, Value>, SchemaError> {
    value.as_object().ok_or_else(|| doc_err(pointer, "expected an object"))
}

fn expect_str(value: &Value, pointer: &str) -> Result<String, SchemaError> {
    value
        .as_str()
        .map(ToString::to_string)
        .ok_or_else(|| doc_err(pointer, "expected a string"))
}

fn expect_f64(value: &Value, pointer: &str) -> Result<f64, SchemaError> {
    value.as_f64().ok_or_else(|| doc_err(pointer, "expected a number"))
}

fn required_key<'a>(map: &'a Map<String, Value>, pointer: &str, key: &str) -> Result<&'a Value, SchemaError> {
    map.get(key)
        .ok_or_else(|| doc_err(&pointer_push(pointer, key), "missing key"))
}

fn expect_keys(map: &Map<String, Value>, pointer: &str, allowed: &[&str]) -> Result<(), SchemaError> {
    match map.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(key) => Err(doc_err(&pointer_push(pointer, key), "unknown key")),
        None => Ok(()),
    }
}

fn parse_object_fields(
    map: &Map<String, Value>,
    pointer: &str,
    depth: usize,
) -> Result<Vec<FieldSpec>, SchemaError> {
    if depth > MAX_DEPTH {
        return Err(SchemaError::TooDeep { path: pointer.to_string() });
    }
    if let Some(extra) = map.get("additionalProperties") {
        if extra != &Value::Bool(false) {
            return Err(doc_err(
                &pointer_push(pointer, "additionalProperties"),
                "only `false` is supported",
            ));
        }
    }
    let props_ptr = pointer_push(pointer, "properties");
    let properties = match map.get("properties") {
        Some(v) => expect_object(v, &props_ptr)?,
        None => return Err(doc_err(&props_ptr, "missing key")),
    };

    let order: Vec<String> = match map.get(ORDER_KEY) {
        Some(v) => {
            let order_ptr = pointer_push(pointer, ORDER_KEY);
            let items = v.as_array().ok_or_else(|| doc_err(&order_ptr, "expected an array"))?;
            let names = items
                .iter()
                .enumerate()
                .map(|(i, n)| expect_str(n, &pointer_push(&order_ptr, &i.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            let listed: BTreeSet<&str> = names.iter().map(String::as_str).collect();
            let declared: BTreeSet<&str> = properties.keys().map(String::as_str).collect();
            if listed != declared || listed.len() != names.len() {
                return Err(doc_err(&order_ptr, "must list every property exactly once"));
            }
            names
        }
        None => properties.keys().cloned().collect(),
    };

    let mut required = BTreeSet::new();
    if let Some(v) = map.get("required") {
        let req_ptr = pointer_push(pointer, "required");
        let items = v.as_array().ok_or_else(|| doc_err(&req_ptr, "expected an array"))?;
        for (i, item) in items.iter().enumerate() {
            let item_ptr = pointer_push(&req_ptr, &i.to_string());
            let name = expect_str(item, &item_ptr)?;
            if !properties.contains_key(&name) {
                return Err(doc_err(&item_ptr, format!("required property {name:?} is not declared")));
            }
            if !required.insert(name) {
                return Err(doc_err(&item_ptr, "listed twice"));
            }
        }
    }

    order
        .iter()
        .map(|name| {
            let mut field = parse_field(name, &properties[name.as_str()], &pointer_push(&props_ptr, name), depth)?;
            field.required = required.contains(name);
            Ok(field)
        })
        .collect()
}

fn parse_field(name: &str, value: &Value, pointer: &str, depth: usize) -> Result<FieldSpec, SchemaError> {
    let map = expect_object(value, pointer)?;
    expect_keys(map, pointer, FIELD_KEYS)?;
    parse_field_map(name, map, pointer, depth)
}

fn parse_field_map(
    name: &str,
    map: &Map<String, Value>,
    pointer: &str,
    depth: usize,
) -> Result<FieldSpec, SchemaError> {
    let type_ptr = pointer_push(pointer, "type");
    let type_name = expect_str(required_key(map, pointer, "type")?, &type_ptr)?;
    let dtype = DType::parse(&type_name).ok_or(SchemaError::UnsupportedType {
        pointer: type_ptr,
        found: type_name,
    })?;
    let mut field = FieldSpec::new(name, dtype);
    if let Some(v) = map.get("description") {
        field.description = expect_str(v, &pointer_push(pointer, "description"))?;
    }
    if let Some(v) = map.get("enum") {
        let ptr = pointer_push(pointer, "enum");
        field.enum_options = Some(v.as_array().ok_or_else(|| doc_err(&ptr, "expected an array"))?.clone());
    }
    if let Some(v) = map.get("pattern") {
        field.pattern = Some(expect_str(v, &pointer_push(pointer, "pattern"))?);
    }
    if let Some(v) = map.get("minimum") {
        field.min = Some(expect_f64(v, &pointer_push(pointer, "minimum"))?);
    }
    if let Some(v) = map.get("maximum") {
        field.max = Some(expect_f64(v, &pointer_push(pointer, "maximum"))?);
    }
    if let Some(v) = map.get(DEFAULT_KEY) {
        field.default = Some(v.clone());
    }
    if let Some(v) = map.get(MERGE_KEY) {
        let ptr = pointer_push(pointer, MERGE_KEY);
        let rule = expect_str(v, &ptr)?;
        field.merge = Some(MergeRule::parse(&rule).ok_or_else(|| doc_err(&ptr, format!("unknown merge rule {rule:?}")))?);
    }
    if let Some(v) = map.get("items") {
        let ptr = pointer_push(pointer, "items");
        if dtype != DType::Array {
            return Err(doc_err(&ptr, format!("`items` on {dtype} property")));
        }
        let item_map = expect_object(v, &ptr)?;
        let mut allowed: Vec<&str> = FIELD_KEYS.to_vec();
        allowed.push("title");
        expect_keys(item_map, &ptr, &allowed)?;
        let title = match item_map.get("title") {
            Some(t) => expect_str(t, &pointer_push(&ptr, "title"))?,
            None => "item".to_string(),
        };
        field.item_spec = Some(Box::new(parse_field_map(&title, item_map, &ptr, depth + 1)?));
    }
    let object_keys = ["properties", "required", "additionalProperties", ORDER_KEY];
    if dtype == DType::Object {
        field.children = parse_object_fields(map, pointer, depth + 1)?;
    } else if let Some(key) = object_keys.iter().find(|k| map.contains_key(**k)) {
        return Err(doc_err(&pointer_push(pointer, key), format!("`{key}` on {dtype} property")));
    }
    Ok(field)
}

/// Overall outcome of checking a candidate against a tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Valid,
    Invalid,
    /// The only problems are missing required fields.
    Incomplete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    NotAnObject,
    TypeMismatch,
    EnumViolation,
    PatternMismatch,
    BelowMinimum,
    AboveMaximum,
    MissingRequired,
    UnknownField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// JSON pointer into the candidate.
    pub path: String,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub verdict: Verdict,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        let verdict = if violations.is_empty() {
            Verdict::Valid
        } else if violations.iter().all(|v| v.kind == ViolationKind::MissingRequired) {
            Verdict::Incomplete
        } else {
            Verdict::Invalid
        };
        ValidationReport { verdict, violations }
    }

    pub fn is_valid(&self) -> bool {
        self.verdict == Verdict::Valid
    }
}

/// Checks a candidate against every type, enum, pattern, bound and required
/// marker of the tool. JSON `null` counts as absent. Unknown properties are
/// violations. Defaults are never injected.
pub fn validate_output(doc: &ToolSchemaDocument, candidate: &Value) -> ValidationReport {
    let mut violations = Vec::new();
    match candidate.as_object() {
        Some(map) => validate_object(&doc.spec.fields, map, "", &doc.patterns, &mut violations),
        None => violations.push(Violation {
            path: String::new(),
            kind: ViolationKind::NotAnObject,
            detail: format!("expected an object, got {}", kind_name(candidate)),
        }),
    }
    ValidationReport::from_violations(violations)
}

fn kind_name(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn validate_object(
    fields: &[FieldSpec],
    map: &Map<String, Value>,
    path: &str,
    patterns: &BTreeMap<String, Regex>,
    out: &mut Vec<Violation>,
) {
    for field in fields {
        let field_ptr = pointer_push(path, &field.name);
        match map.get(&field.name) {
            None | Some(Value::Null) => {
                if field.required {
                    out.push(Violation {
                        path: field_ptr,
                        kind: ViolationKind::MissingRequired,
                        detail: "required field is absent".to_string(),
                    });
                }
            }
            Some(value) => validate_value(field, value, &field_ptr, patterns, out),
        }
    }
    for key in map.keys() {
        if !fields.iter().any(|f| &f.name == key) {
            out.push(Violation {
                path: pointer_push(path, key),
                kind: ViolationKind::UnknownField,
                detail: "property is not declared by the tool".to_string(),
            });
        }
    }
}

/// Whether a JSON number is integral.
pub fn is_integral(value: &Value) -> bool {
    match value {
        Value::Number(n) => n.is_i64() || n.is_u64() || n.as_f64().is_some_and(|x| libm::trunc(x) == x),
        _ => false,
    }
}

fn validate_value(
    field: &FieldSpec,
    value: &Value,
    path: &str,
    patterns: &BTreeMap<String, Regex>,
    out: &mut Vec<Violation>,
) {
    let type_ok = match field.dtype {
        DType::String => value.is_string(),
        DType::Number => value.is_number(),
        DType::Integer => is_integral(value),
        DType::Boolean => value.is_boolean(),
        DType::Array => value.is_array(),
        DType::Object => value.is_object(),
    };
    if !type_ok {
        out.push(Violation {
            path: path.to_string(),
            kind: ViolationKind::TypeMismatch,
            detail: format!("expected {}, got {}", field.dtype, kind_name(value)),
        });
        return;
    }
    if let Some(options) = &field.enum_options {
        if !options.iter().any(|o| loose_eq(o, value)) {
            out.push(Violation {
                path: path.to_string(),
                kind: ViolationKind::EnumViolation,
                detail: format!("{value} is not one of the allowed options"),
            });
        }
    }
    if let (Some(pattern), Some(s)) = (&field.pattern, value.as_str()) {
        let matched = match patterns.get(pattern) {
            Some(re) => re.is_match(s),
            None => Regex::new(pattern).is_ok_and(|re| re.is_match(s)),
        };
        if !matched {
            out.push(Violation {
                path: path.to_string(),
                kind: ViolationKind::PatternMismatch,
                detail: format!("does not match /{pattern}/"),
            });
        }
    }
    if let Some(x) = value.as_f64() {
        if let Some(min) = field.min.filter(|m| x < *m) {
            out.push(Violation {
                path: path.to_string(),
                kind: ViolationKind::BelowMinimum,
                detail: format!("{x} < minimum {min}"),
            });
        }
        if let Some(max) = field.max.filter(|m| x > *m) {
            out.push(Violation {
                path: path.to_string(),
                kind: ViolationKind::AboveMaximum,
                detail: format!("{x} > maximum {max}"),
            });
        }
    }
    match value {
        Value::Array(items) => {
            if let Some(item_spec) = &field.item_spec {
                for (i, item) in items.iter().enumerate() {
                    validate_value(item_spec, item, &pointer_push(path, &i.to_string()), patterns, out);
                }
            }
        }
        Value::Object(map) if field.dtype == DType::Object => {
            validate_object(&field.children, map, path, patterns, out);
        }
        _ => {}
    }
}

/// The three example tools used throughout the docs and tests: flat
/// demographics, a nested blood pressure object, and a medication list.
pub fn example_tools() -> Vec<ToolSpec> {
    vec![
        ToolSpec::new(
            "patient_summary",
            "Basic patient characteristics",
            vec![
                FieldSpec::new("Diagnosis", DType::String).describe("Primary diagnosis").required(),
                FieldSpec::new("Age", DType::Integer).describe("Age in years"),
                FieldSpec::new("Smoker Status", DType::Boolean).describe("Whether the patient smokes"),
            ],
        ),
        ToolSpec::new(
            "vitals",
            "Recorded vital signs",
            vec![FieldSpec::new("Blood Pressure", DType::Object)
                .describe("Most recent blood pressure")
                .with_children(vec![
                    FieldSpec::new("Systolic", DType::Integer).describe("mmHg"),
                    FieldSpec::new("Diastolic", DType::Integer).describe("mmHg"),
                ])],
        ),
        ToolSpec::new(
            "medications",
            "Current medications",
            vec![FieldSpec::new("Medications", DType::Array)
                .describe("Active medication list")
                .with_items(FieldSpec::new("Medication", DType::Object).with_children(vec![
                    FieldSpec::new("Name", DType::String),
                    FieldSpec::new("Dosage", DType::String),
                ]))],
        ),
    ]
}
