//! Chat-completions and embeddings clients.

use std::thread;
use std::time::Duration;

use forge_core::schema::ToolSchemaDocument;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChatReply {
    ToolCall { name: String, arguments: String },
    Text(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("endpoint returned HTTP {code}")]
    Status { code: u16 },
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("embedding dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

impl LlmError {
    fn retryable(&self) -> bool {
        match self {
            LlmError::Unreachable(_) => true,
            LlmError::Status { code } => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

pub trait ChatModel: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, messages: &[ChatMessage], tool: Option<&ToolSchemaDocument>) -> Result<ChatReply, LlmError>;
}

pub trait Embedder: Send + Sync {
    fn model_id(&self) -> &str;
    /// One vector per input, in input order.
    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f32>>, LlmError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 200,
            max_delay_ms: 2_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1 << attempt.min(16));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }

    /// Runs `op` until it succeeds, fails permanently, or attempts run out.
    pub fn run<T, E, F>(&self, mut op: F, retryable: impl Fn(&E) -> bool) -> Result<T, E>
    where
        F: FnMut(u32) -> Result<T, E>,
    {
        let attempts = self.attempts.max(1);
        let mut attempt = 0;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if attempt + 1 < attempts && retryable(&e) => {
                    thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

pub fn http_client(timeout: Duration) -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .expect("http client construction")
}

fn post_json(client: &reqwest::blocking::Client, url: &str, body: &Value) -> Result<Value, LlmError> {
    let resp = client.post(url).json(body).send().map_err(|e| {
        if e.is_connect() || e.is_timeout() {
            LlmError::Unreachable(e.without_url().to_string())
        } else {
            LlmError::Protocol(e.without_url().to_string())
        }
    })?;
    let status = resp.status();
    if !status.is_success() {
        return Err(LlmError::Status { code: status.as_u16() });
    }
    resp.json::<Value>()
        .map_err(|e| LlmError::Protocol(format!("invalid JSON body: {}", e.without_url())))
}

fn endpoint(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

/// Client for `POST {base}/v1/chat/completions`. Temperature is always 0.
pub struct HttpChat {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    retry: RetryPolicy,
}

impl HttpChat {
    pub fn new(base_url: &str, model: &str, retry: RetryPolicy, timeout: Duration) -> Self {
        HttpChat {
            client: http_client(timeout),
            url: endpoint(base_url, "v1/chat/completions"),
            model: model.to_string(),
            retry,
        }
    }
}

/// Request body for a chat call, forcing the tool when one is given.
pub fn chat_request_body(model: &str, messages: &[ChatMessage], tool: Option<&ToolSchemaDocument>) -> Value {
    let mut body = json!({
        "model": model,
        "messages": messages,
        "temperature": 0,
    });
    if let Some(doc) = tool {
        body["tools"] = json!([doc.value()]);
        body["tool_choice"] = json!({"type": "function", "function": {"name": doc.name()}});
    }
    body
}

/// Reads `choices[0].message`, preferring `tool_calls[0].function`.
pub fn parse_chat_response(resp: &Value) -> Result<ChatReply, LlmError> {
    let message = resp
        .pointer("/choices/0/message")
        .ok_or_else(|| LlmError::Protocol("response has no choices[0].message".into()))?;
    if let Some(call) = message.pointer("/tool_calls/0/function") {
        let name = call.get("name").and_then(Value::as_str).unwrap_or_default().to_string();
        let arguments = match call.get("arguments") {
            Some(Value::String(s)) => s.clone(),
            Some(v @ Value::Object(_)) => v.to_string(),
            _ => return Err(LlmError::Protocol("tool call without arguments".into())),
        };
        return Ok(ChatReply::ToolCall { name, arguments });
    }
    Ok(ChatReply::Text(
        message.get("content").and_then(Value::as_str).unwrap_or_default().to_string(),
    ))
}

impl ChatModel for HttpChat {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, messages: &[ChatMessage], tool: Option<&ToolSchemaDocument>) -> Result<ChatReply, LlmError> {
        let body = chat_request_body(&self.model, messages, tool);
        let resp = self.retry.run(|_| post_json(&self.client, &self.url, &body), LlmError::retryable)?;
        parse_chat_response(&resp)
    }
}

/// Client for `POST {base}/v1/embeddings`.
pub struct HttpEmbedder {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    retry: RetryPolicy,
    batch_size: usize,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, model: &str, retry: RetryPolicy, timeout: Duration, batch_size: usize) -> Self {
        HttpEmbedder {
            client: http_client(timeout),
            url: endpoint(base_url, "v1/embeddings"),
            model: model.to_string(),
            retry,
            batch_size: batch_size.max(1),
        }
    }
}

pub fn parse_embedding_response(resp: &Value, expected: usize) -> Result<Vec<Vec<f32>>, LlmError> {
    let data = resp
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| LlmError::Protocol("response has no data array".into()))?;
    if data.len() != expected {
        return Err(LlmError::Protocol(format!("{} embeddings for {expected} inputs", data.len())));
    }
    let mut rows: Vec<(usize, Vec<f32>)> = Vec::with_capacity(data.len());
    for (i, item) in data.iter().enumerate() {
        let index = item.get("index").and_then(Value::as_u64).map_or(i, |x| x as usize);
        let values = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| LlmError::Protocol(format!("data[{i}] has no embedding")))?
            .iter()
            .map(|x| x.as_f64().map(|f| f as f32))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| LlmError::Protocol(format!("data[{i}] has a non-numeric component")))?;
        rows.push((index, values));
    }
    rows.sort_by_key(|(i, _)| *i);
    let out: Vec<Vec<f32>> = rows.into_iter().map(|(_, v)| v).collect();
    check_dimensions(&out)?;
    Ok(out)
}

fn check_dimensions(rows: &[Vec<f32>]) -> Result<(), LlmError> {
    if let Some(first) = rows.first() {
        if let Some(bad) = rows.iter().find(|r| r.len() != first.len()) {
            return Err(LlmError::DimensionMismatch {
                expected: first.len(),
                found: bad.len(),
            });
        }
    }
    Ok(())
}

impl Embedder for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f32>>, LlmError> {
        let mut out = Vec::with_capacity(inputs.len());
        for batch in inputs.chunks(self.batch_size) {
            let body = json!({"model": self.model, "input": batch});
            let resp = self.retry.run(|_| post_json(&self.client, &self.url, &body), LlmError::retryable)?;
            out.extend(parse_embedding_response(&resp, batch.len())?);
        }
        check_dimensions(&out)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retry_stops_on_permanent_errors() {
        let policy = RetryPolicy {
            attempts: 5,
            base_delay_ms: 0,
            max_delay_ms: 0,
        };
        let calls = Cell::new(0);
        let r: Result<(), LlmError> = policy.run(
            |_| {
                calls.set(calls.get() + 1);
                Err(LlmError::Status { code: 400 })
            },
            LlmError::retryable,
        );
        assert!(r.is_err());
        assert_eq!(calls.get(), 1);

        calls.set(0);
        let r: Result<u32, LlmError> = policy.run(
            |attempt| {
                calls.set(calls.get() + 1);
                if attempt < 2 {
                    Err(LlmError::Status { code: 503 })
                } else {
                    Ok(attempt)
                }
            },
            LlmError::retryable,
        );
        assert_eq!(r, Ok(2));
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn backoff_is_capped() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(0), Duration::from_millis(200));
        assert_eq!(p.delay(1), Duration::from_millis(400));
        assert_eq!(p.delay(10), Duration::from_millis(2000));
    }

    #[test]
    fn parses_tool_call_and_text_replies() {
        let resp = json!({"choices":[{"message":{"role":"assistant","content":null,
            "tool_calls":[{"id":"c1","type":"function","function":{"name":"t","arguments":"{\"a\":1}"}}]}}]});
        assert_eq!(
            parse_chat_response(&resp).unwrap(),
            ChatReply::ToolCall {
                name: "t".into(),
                arguments: "{\"a\":1}".into()
            }
        );
        let resp = json!({"choices":[{"message":{"role":"assistant","content":"[\"a\"]"}}]});
        assert_eq!(parse_chat_response(&resp).unwrap(), ChatReply::Text("[\"a\"]".into()));
        assert!(parse_chat_response(&json!({})).is_err());
    }

    #[test]
    fn embedding_response_order_and_shape() {
        let resp = json!({"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]}]});
        assert_eq!(parse_embedding_response(&resp, 2).unwrap(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let bad = json!({"data":[{"embedding":[1.0]},{"embedding":[1.0,2.0]}]});
        assert!(matches!(
            parse_embedding_response(&bad, 2),
            Err(LlmError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn request_forces_the_tool() {
        let spec = forge_core::schema::example_tools().remove(0);
        let doc = forge_core::schema::compile_tool(&spec).unwrap();
        let body = chat_request_body("m", &[ChatMessage::user("hi")], Some(&doc));
        assert_eq!(body["temperature"], json!(0));
        assert_eq!(body["tool_choice"]["function"]["name"], json!(doc.name()));
        assert_eq!(body["tools"][0], *doc.value());
    }
}
