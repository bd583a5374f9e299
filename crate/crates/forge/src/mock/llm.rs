//! A deterministic chat and embedding server.
//!
//! Embeddings put weight on one dimension per configured concept for each
//! keyword occurrence, spread other words thinly over a few hashed
//! dimensions, and add a small bias so no vector is zero. Notes that
//! mention a concept therefore score high against that concept's keywords
//! and near zero otherwise.
//!
//! Extraction replies fill booleans by keyword presence and fields whose
//! name mentions a date with the earliest ISO date found in a sentence that
//! mentions a keyword.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use forge_core::text::estimate_tokens;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    /// Matched case-insensitively against the feature group name.
    pub name: String,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "code")]
pub enum ScriptStep {
    /// A tool call whose arguments are not JSON.
    Malformed,
    /// A plain text reply.
    NoToolCall,
    Status(u16),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MockLlmConfig {
    pub concepts: Vec<Concept>,
    pub hashed_dims: usize,
    /// Requests estimated above this are counted in `over_context`.
    pub model_ctx: usize,
    /// Consumed in order by extraction requests before normal replies.
    pub script: Vec<ScriptStep>,
}

impl Default for MockLlmConfig {
    fn default() -> Self {
        MockLlmConfig {
            concepts: Vec::new(),
            hashed_dims: 8,
            model_ctx: 128_000,
            script: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockStats {
    pub term_calls: usize,
    pub extraction_calls: usize,
    pub embedding_calls: usize,
    pub embedded_texts: usize,
    pub max_input_tokens: usize,
    pub over_context: usize,
    /// sha256 of each extraction request's group and user text.
    pub fingerprints: Vec<String>,
}

struct LlmState {
    cfg: MockLlmConfig,
    script: VecDeque<ScriptStep>,
    stats: MockStats,
}

#[derive(Clone)]
pub struct MockLlm {
    state: Arc<Mutex<LlmState>>,
}

const HASHED_WEIGHT: f32 = 0.05;
const CONCEPT_WEIGHT: f32 = 4.0;
const BIAS: f32 = 1e-3;

impl MockLlm {
    pub fn new(cfg: MockLlmConfig) -> Self {
        MockLlm {
            state: Arc::new(Mutex::new(LlmState {
                script: cfg.script.iter().copied().collect(),
                cfg,
                stats: MockStats::default(),
            })),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, LlmState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn stats(&self) -> MockStats {
        self.lock().stats.clone()
    }

    pub fn reset_stats(&self) {
        self.lock().stats = MockStats::default();
    }

    pub fn push_script(&self, steps: &[ScriptStep]) {
        self.lock().script.extend(steps.iter().copied());
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/v1/chat/completions", post(chat))
            .route("/v1/embeddings", post(embeddings))
            .route("/mock/stats", get(stats))
            .with_state(self.clone())
    }

    /// The embedding the server would return for `text`.
    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        embed_with(&self.lock().cfg, text)
    }
}

fn keyword_count(lower: &str, keyword: &str) -> usize {
    let k = keyword.to_lowercase();
    if k.is_empty() {
        return 0;
    }
    let bytes = lower.as_bytes();
    let mut n = 0;
    let mut from = 0;
    while let Some(pos) = lower[from..].find(&k) {
        let start = from + pos;
        let end = start + k.len();
        let before = start == 0 || !bytes[start - 1].is_ascii_alphanumeric();
        let after = end == bytes.len() || !bytes[end].is_ascii_alphanumeric();
        if before && after {
            n += 1;
        }
        from = end;
    }
    n
}

fn embed_with(cfg: &MockLlmConfig, text: &str) -> Vec<f32> {
    let lower = text.to_lowercase();
    let hashed = cfg.hashed_dims.max(1);
    let mut v = vec![BIAS; cfg.concepts.len() + hashed];
    let mut keyword_words = std::collections::BTreeSet::new();
    for (i, c) in cfg.concepts.iter().enumerate() {
        for k in &c.keywords {
            v[i] += CONCEPT_WEIGHT * keyword_count(&lower, k) as f32;
            keyword_words.extend(k.to_lowercase().split_whitespace().map(str::to_string));
        }
    }
    for w in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        if keyword_words.contains(w) {
            continue;
        }
        let h = Sha256::digest(w.as_bytes());
        let slot = u32::from_le_bytes([h[0], h[1], h[2], h[3]]) as usize % hashed;
        v[cfg.concepts.len() + slot] += HASHED_WEIGHT;
    }
    v
}

fn concept_for<'a>(cfg: &'a MockLlmConfig, group: &str) -> Option<&'a Concept> {
    cfg.concepts.iter().find(|c| c.name.eq_ignore_ascii_case(group.trim()))
}

fn message_text(messages: &[Value], role: &str) -> String {
    messages
        .iter()
        .filter(|m| m.get("role").and_then(Value::as_str) == Some(role))
        .filter_map(|m| m.get("content").and_then(Value::as_str))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The group name quoted in an extraction system prompt.
fn quoted_group(system: &str) -> Option<String> {
    let start = system.find("group \"")? + "group \"".len();
    let len = system[start..].find('"')?;
    Some(system[start..start + len].to_string())
}

fn iso_dates(text: &str) -> Vec<String> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    if b.len() < 10 {
        return out;
    }
    for i in 0..=b.len() - 10 {
        let w = &b[i..i + 10];
        let shape = w.iter().enumerate().all(|(j, c)| match j {
            4 | 7 => *c == b'-',
            _ => c.is_ascii_digit(),
        });
        let bounded = (i == 0 || !b[i - 1].is_ascii_digit()) && (i + 10 == b.len() || !b[i + 10].is_ascii_digit());
        if shape && bounded {
            if let Ok(s) = std::str::from_utf8(w) {
                if chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").is_ok() {
                    out.push(s.to_string());
                }
            }
        }
    }
    out
}

/// The reply arguments for an extraction over `user` text.
pub fn extraction_arguments(concept: Option<&Concept>, properties: &Map<String, Value>, user: &str) -> Value {
    let lower = user.to_lowercase();
    let keywords: &[String] = concept.map_or(&[], |c| &c.keywords);
    let mentioned = keywords.iter().any(|k| keyword_count(&lower, k) > 0);
    let mut out = Map::new();
    for (name, prop) in properties {
        let ty = prop.get("type").and_then(Value::as_str).unwrap_or("");
        if ty == "boolean" {
            out.insert(name.clone(), Value::Bool(mentioned));
        } else if ty == "string" && name.to_lowercase().contains("date") && mentioned {
            let earliest = lower
                .split(['.', '\n'])
                .filter(|s| keywords.iter().any(|k| keyword_count(s, k) > 0))
                .flat_map(iso_dates)
                .min();
            if let Some(d) = earliest {
                out.insert(name.clone(), Value::String(d));
            }
        }
    }
    Value::Object(out)
}

fn error(status: StatusCode, msg: &str) -> Response {
    (status, Json(json!({"error": {"message": msg}}))).into_response()
}

fn input_tokens(body: &Value) -> usize {
    let mut n = 0;
    if let Some(ms) = body.get("messages").and_then(Value::as_array) {
        for m in ms {
            n += estimate_tokens(m.get("content").and_then(Value::as_str).unwrap_or(""));
        }
    }
    if let Some(t) = body.get("tools").and_then(|t| t.get(0)) {
        let canonical = forge_core::json::canonical_string(t);
        n += estimate_tokens(&canonical);
    }
    n
}

async fn chat(State(mock): State<MockLlm>, Json(body): Json<Value>) -> Response {
    let messages = body.get("messages").and_then(Value::as_array).cloned().unwrap_or_default();
    let model = body.get("model").and_then(Value::as_str).unwrap_or("mock").to_string();
    let tool = body.get("tools").and_then(|t| t.get(0)).cloned();
    let system = message_text(&messages, "system");
    let user = message_text(&messages, "user");
    let mut st = mock.lock();
    let tokens = input_tokens(&body);
    st.stats.max_input_tokens = st.stats.max_input_tokens.max(tokens);
    if tokens > st.cfg.model_ctx {
        st.stats.over_context += 1;
    }

    let Some(tool) = tool else {
        st.stats.term_calls += 1;
        let group = user
            .lines()
            .find_map(|l| l.strip_prefix("Feature group:"))
            .unwrap_or("")
            .trim()
            .to_string();
        let terms = concept_for(&st.cfg, &group).map(|c| c.keywords.clone()).unwrap_or_default();
        return Json(completion(&model, json!({"role": "assistant", "content": Value::from(terms).to_string()})))
            .into_response();
    };

    st.stats.extraction_calls += 1;
    let group = quoted_group(&system).unwrap_or_default();
    let mut h = Sha256::new();
    h.update(group.as_bytes());
    h.update([0]);
    h.update(user.as_bytes());
    st.stats.fingerprints.push(hex::encode(h.finalize()));

    let name = tool.pointer("/function/name").and_then(Value::as_str).unwrap_or("").to_string();
    match st.script.pop_front() {
        Some(ScriptStep::Status(code)) => {
            return error(StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR), "scripted");
        }
        Some(ScriptStep::NoToolCall) => {
            return Json(completion(&model, json!({"role": "assistant", "content": "I cannot help with that."})))
                .into_response();
        }
        Some(ScriptStep::Malformed) => {
            return Json(completion(&model, tool_message(&name, "{\"Occurrence\": tru")))
                .into_response();
        }
        None => {}
    }
    let empty = Map::new();
    let props = tool
        .pointer("/function/parameters/properties")
        .and_then(Value::as_object)
        .unwrap_or(&empty);
    let args = extraction_arguments(concept_for(&st.cfg, &group), props, &user);
    Json(completion(&model, tool_message(&name, &args.to_string()))).into_response()
}

fn tool_message(name: &str, arguments: &str) -> Value {
    json!({
        "role": "assistant",
        "content": null,
        "tool_calls": [{
            "id": "call_0",
            "type": "function",
            "function": {"name": name, "arguments": arguments}
        }]
    })
}

fn completion(model: &str, message: Value) -> Value {
    json!({
        "id": "mock",
        "object": "chat.completion",
        "model": model,
        "choices": [{"index": 0, "message": message, "finish_reason": "stop"}]
    })
}

async fn embeddings(State(mock): State<MockLlm>, Json(body): Json<Value>) -> Response {
    let inputs: Vec<String> = match body.get("input") {
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Array(a)) => a.iter().map(|v| v.as_str().unwrap_or("").to_string()).collect(),
        _ => return error(StatusCode::BAD_REQUEST, "input must be a string or an array of strings"),
    };
    let mut st = mock.lock();
    st.stats.embedding_calls += 1;
    st.stats.embedded_texts += inputs.len();
    let data: Vec<Value> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| json!({"object": "embedding", "index": i, "embedding": embed_with(&st.cfg, t)}))
        .collect();
    let model = body.get("model").cloned().unwrap_or(Value::from("mock-embed"));
    Json(json!({"object": "list", "data": data, "model": model})).into_response()
}

async fn stats(State(mock): State<MockLlm>) -> impl IntoResponse {
    Json(mock.stats())
}

/// Concepts keyed by name, for building configs in tests and tools.
pub fn concepts(pairs: &[(&str, &[&str])]) -> Vec<Concept> {
    let mut by_name: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (n, ks) in pairs {
        by_name.entry(n.to_string()).or_default().extend(ks.iter().map(|k| k.to_string()));
    }
    by_name.into_iter().map(|(name, keywords)| Concept { name, keywords }).collect()
}
