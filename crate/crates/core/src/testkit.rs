//! Random tool specs, instances that honour them, and single-point mutations
//! with the verdict each mutation must produce.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde_json::{Map, Value};

use crate::json::{number_value, pointer_push};
use crate::schema::{DType, FieldSpec, MergeRule, ToolSpec, Verdict};

/// Patterns paired with a generator of matching strings.
const PATTERNS: [&str; 3] = [r"^[a-z]{3}$", r"^\d{4}-\d{2}-\d{2}$", r"^[A-Z][a-z]+$"];

const NAME_PARTS: [&str; 12] = [
    "Diagnosis", "Age", "Date", "Occurrence", "Severity", "Site", "Dose", "Count", "Score", "Notes",
    "Stage", "Side",
];

const WORDS: [&str; 8] = ["mild", "moderate", "severe", "left", "right", "acute", "chronic", "none"];

#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub max_fields: usize,
    pub max_depth: usize,
    /// Allow names that need JSON-pointer escaping.
    pub odd_names: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_fields: 6,
            max_depth: 4,
            odd_names: true,
        }
    }
}

pub fn random_tool<R: Rng + ?Sized>(rng: &mut R, index: usize, cfg: &GenConfig) -> ToolSpec {
    let n = rng.random_range(0..=cfg.max_fields);
    let fields = random_fields(rng, n, 1, cfg);
    let description = format!("generated tool {index}");
    ToolSpec::new(format!("tool_{index}"), description, fields)
}

fn random_fields<R: Rng + ?Sized>(rng: &mut R, n: usize, depth: usize, cfg: &GenConfig) -> Vec<FieldSpec> {
    let mut out: Vec<FieldSpec> = Vec::with_capacity(n);
    for i in 0..n {
        let base = NAME_PARTS[rng.random_range(0..NAME_PARTS.len())];
        let mut name = format!("{base} {i}");
        if cfg.odd_names && rng.random_bool(0.1) {
            name.push_str(if rng.random_bool(0.5) { "/x" } else { "~y" });
        }
        let mut field = random_field(rng, name, depth, cfg);
        field.required = rng.random_bool(0.4);
        out.push(field);
    }
    out
}

fn random_field<R: Rng + ?Sized>(rng: &mut R, name: String, depth: usize, cfg: &GenConfig) -> FieldSpec {
    let nested_ok = depth < cfg.max_depth;
    let dtype = loop {
        let d = DType::ALL[rng.random_range(0..DType::ALL.len())];
        if nested_ok || d.is_scalar() {
            break d;
        }
    };
    let description = format!("{} of interest", name.to_lowercase());
    let mut field = FieldSpec::new(name, dtype).describe(description);
    match dtype {
        DType::String => match rng.random_range(0..4) {
            0 => {
                let k = rng.random_range(1..=4);
                field.enum_options = Some(WORDS[..k].iter().map(|w| Value::String(w.to_string())).collect());
            }
            1 => {
                let p = PATTERNS[rng.random_range(0..PATTERNS.len())];
                field.pattern = Some(p.to_string());
                if p.contains(r"\d{4}") && rng.random_bool(0.5) {
                    field.merge = Some(MergeRule::Earliest);
                }
            }
            2 => field.merge = Some(MergeRule::First),
            _ => {}
        },
        DType::Integer => match rng.random_range(0..3) {
            0 => {
                let lo = rng.random_range(-50i64..50);
                let hi = lo + rng.random_range(0i64..100);
                field.min = Some(lo as f64);
                field.max = Some(hi as f64);
            }
            1 => {
                let k = rng.random_range(1..=4);
                field.enum_options = Some((0..k).map(|v| Value::from(v * 10)).collect());
            }
            _ => {
                if rng.random_bool(0.5) {
                    field.min = Some(0.0);
                }
            }
        },
        DType::Number => {
            if rng.random_bool(0.5) {
                let lo = rng.random_range(-100i32..100) as f64 / 4.0;
                field.min = Some(lo);
                field.max = Some(lo + rng.random_range(1i32..400) as f64 / 4.0);
            }
        }
        DType::Boolean => {
            if rng.random_bool(0.5) {
                field.merge = Some(MergeRule::Or);
            }
        }
        DType::Array => {
            let item_name = format!("{} item", field.name);
            let mut item = random_field(rng, item_name, depth + 1, cfg);
            item.required = false;
            item.default = None;
            field.item_spec = Some(Box::new(item));
            if rng.random_bool(0.5) {
                field.merge = Some(MergeRule::Union);
            }
        }
        DType::Object => {
            let n = rng.random_range(1..=3);
            field.children = random_fields(rng, n, depth + 1, cfg);
        }
    }
    if dtype.is_scalar() && rng.random_bool(0.2) {
        field.default = Some(conforming_value(rng, &field));
    }
    field
}

/// An instance honouring every constraint; required fields are always
/// present and optional ones usually are.
pub fn conforming_instance<R: Rng + ?Sized>(rng: &mut R, spec: &ToolSpec) -> Value {
    conforming_object(rng, &spec.fields)
}

fn conforming_object<R: Rng + ?Sized>(rng: &mut R, fields: &[FieldSpec]) -> Value {
    let mut map = Map::new();
    for field in fields {
        if field.required || rng.random_bool(0.7) {
            map.insert(field.name.clone(), conforming_value(rng, field));
        }
    }
    Value::Object(map)
}

pub fn conforming_value<R: Rng + ?Sized>(rng: &mut R, field: &FieldSpec) -> Value {
    if let Some(options) = &field.enum_options {
        return options[rng.random_range(0..options.len())].clone();
    }
    match field.dtype {
        DType::String => match field.pattern.as_deref() {
            Some(p) if p == PATTERNS[0] => Value::String((0..3).map(|_| lower(rng)).collect()),
            Some(p) if p == PATTERNS[1] => Value::String(format!(
                "{:04}-{:02}-{:02}",
                rng.random_range(1990..2030),
                rng.random_range(1..=12),
                rng.random_range(1..=28)
            )),
            Some(_) => {
                let mut s = String::new();
                s.push((b'A' + rng.random_range(0..26u8)) as char);
                for _ in 0..rng.random_range(1..6) {
                    s.push(lower(rng));
                }
                Value::String(s)
            }
            None => Value::String(WORDS[rng.random_range(0..WORDS.len())].to_string()),
        },
        DType::Integer => {
            let lo = field.min.map_or(-1000, |m| libm::ceil(m) as i64);
            let hi = field.max.map_or(lo.max(0) + 1000, |m| libm::floor(m) as i64);
            Value::from(rng.random_range(lo..=hi))
        }
        DType::Number => {
            let lo = field.min.unwrap_or(-1000.0);
            let hi = field.max.unwrap_or(lo + 2000.0);
            let t = rng.random_range(0u32..=1000) as f64 / 1000.0;
            number_value((lo + (hi - lo) * t).clamp(lo, hi))
        }
        DType::Boolean => Value::Bool(rng.random_bool(0.5)),
        DType::Array => {
            let item = field.item_spec.as_deref().expect("array fields carry an item spec");
            let n = rng.random_range(0..4);
            Value::Array((0..n).map(|_| conforming_value(rng, item)).collect())
        }
        DType::Object => conforming_object(rng, &field.children),
    }
}

fn lower<R: Rng + ?Sized>(rng: &mut R) -> char {
    (b'a' + rng.random_range(0..26u8)) as char
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationKind {
    TypeFlip,
    EnumEscape,
    PatternBreak,
    BoundViolation,
    RequiredDeletion,
}

#[derive(Debug, Clone)]
pub struct Mutation {
    pub kind: MutationKind,
    /// JSON pointer of the mutated location.
    pub pointer: String,
    pub instance: Value,
    pub expected: Verdict,
}

/// Applies one random mutation to a conforming instance. Returns `None`
/// when the instance has no present values to mutate.
pub fn mutate<R: Rng + ?Sized>(rng: &mut R, spec: &ToolSpec, instance: &Value) -> Option<Mutation> {
    let mut sites = Vec::new();
    collect_sites(&spec.fields, instance, "", &mut sites);
    let mut options: Vec<(MutationKind, usize)> = Vec::new();
    for (i, (_, field, _)) in sites.iter().enumerate() {
        options.push((MutationKind::TypeFlip, i));
        if field.enum_options.is_some() {
            options.push((MutationKind::EnumEscape, i));
        }
        if field.pattern.is_some() {
            options.push((MutationKind::PatternBreak, i));
        }
        if field.min.is_some() || field.max.is_some() {
            options.push((MutationKind::BoundViolation, i));
        }
        if field.required {
            options.push((MutationKind::RequiredDeletion, i));
        }
    }
    if options.is_empty() {
        return None;
    }
    let (kind, site) = options[rng.random_range(0..options.len())];
    let (pointer, field, in_object) = &sites[site];
    debug_assert!(*in_object || kind != MutationKind::RequiredDeletion);
    let mut out = instance.clone();
    let expected = if kind == MutationKind::RequiredDeletion {
        let (parent, key) = split_pointer(pointer);
        let target = if parent.is_empty() { Some(&mut out) } else { out.pointer_mut(parent) };
        target?.as_object_mut()?.remove(&key);
        Verdict::Incomplete
    } else {
        let replacement = match kind {
            MutationKind::TypeFlip => wrong_type(field.dtype),
            MutationKind::EnumEscape => match field.dtype {
                DType::String => Value::String("outside the listed options".to_string()),
                DType::Boolean => return None,
                _ => Value::from(987_654_321i64),
            },
            MutationKind::PatternBreak => Value::String("!!".to_string()),
            MutationKind::BoundViolation => match (field.min, field.max) {
                (Some(lo), _) => number_value(libm::floor(lo) - 1.0),
                (None, Some(hi)) => number_value(libm::ceil(hi) + 1.0),
                (None, None) => unreachable!(),
            },
            MutationKind::RequiredDeletion => unreachable!(),
        };
        *out.pointer_mut(pointer)? = replacement;
        Verdict::Invalid
    };
    Some(Mutation {
        kind,
        pointer: pointer.clone(),
        instance: out,
        expected,
    })
}

fn wrong_type(dtype: DType) -> Value {
    match dtype {
        DType::String => Value::from(7),
        DType::Number | DType::Integer => Value::String("x".to_string()),
        DType::Boolean => Value::String("yes".to_string()),
        DType::Array => Value::Object(Map::new()),
        DType::Object => Value::Array(Vec::new()),
    }
}

/// Every present value with its field; the flag says whether the value is
/// an object member (deletable) rather than an array element.
fn collect_sites<'a>(
    fields: &'a [FieldSpec],
    value: &Value,
    path: &str,
    out: &mut Vec<(String, &'a FieldSpec, bool)>,
) {
    let Some(map) = value.as_object() else { return };
    for field in fields {
        if let Some(v) = map.get(&field.name) {
            let ptr = pointer_push(path, &field.name);
            collect_value(field, v, &ptr, true, out);
        }
    }
}

fn collect_value<'a>(
    field: &'a FieldSpec,
    value: &Value,
    ptr: &str,
    member: bool,
    out: &mut Vec<(String, &'a FieldSpec, bool)>,
) {
    out.push((ptr.to_string(), field, member));
    match field.dtype {
        DType::Object => collect_sites(&field.children, value, ptr, out),
        DType::Array => {
            if let (Some(item), Some(items)) = (field.item_spec.as_deref(), value.as_array()) {
                for (i, v) in items.iter().enumerate() {
                    collect_value(item, v, &pointer_push(ptr, &i.to_string()), false, out);
                }
            }
        }
        _ => {}
    }
}

/// Splits a pointer into its parent and unescaped last token.
fn split_pointer(pointer: &str) -> (&str, String) {
    let idx = pointer.rfind('/').unwrap_or(0);
    let token = pointer[idx + 1..].replace("~1", "/").replace("~0", "~");
    (&pointer[..idx], token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{compile_tool, validate_output};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_tools_compile_and_instances_conform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = GenConfig::default();
        for i in 0..50 {
            let spec = random_tool(&mut rng, i, &cfg);
            let doc = compile_tool(&spec).unwrap_or_else(|e| panic!("{e}: {spec:?}"));
            let inst = conforming_instance(&mut rng, &spec);
            let report = validate_output(&doc, &inst);
            assert!(report.is_valid(), "{report:?} {inst}");
        }
    }

    #[test]
    fn pointer_split_unescapes() {
        assert_eq!(split_pointer("/a~1b/c~0d"), ("/a~1b", "c~d".to_string()));
        assert_eq!(split_pointer("/top"), ("", "top".to_string()));
    }
}
