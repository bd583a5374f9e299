//! Worker job configuration, environment fallbacks and validation.

use std::path::PathBuf;

use forge_core::extract::{context_budget, FeatureGroup, PromptTemplate, CORRECTION_NOTE};
use forge_core::schema::{compile_tool, ToolSpec};
use serde::{Deserialize, Serialize};

use crate::ingest::IngestOptions;
use crate::repo::{RemoteFileRef, DEFAULT_TOKEN_ENV};

pub const ENV_REPO_URL: &str = "REPO_API_URL";
pub const ENV_LLM_BASE_URL: &str = "LLM_BASE_URL";
pub const ENV_LLM_MODEL: &str = "LLM_MODEL";
pub const ENV_EMBED_BASE_URL: &str = "EMBED_BASE_URL";
pub const ENV_EMBED_MODEL: &str = "EMBED_MODEL";
pub const ENV_THRESHOLD: &str = "SIMILARITY_THRESHOLD";
pub const ENV_CONTEXT_TOKENS: &str = "CONTEXT_TOKENS";

pub const DEFAULT_THRESHOLD: f64 = 0.30;
pub const DEFAULT_CONTEXT_TOKENS: usize = 128_000;
pub const DEFAULT_WINDOW_TOKENS: usize = 1024;
pub const DEFAULT_OVERLAP_TOKENS: usize = 128;
pub const DEFAULT_OUTPUT_RESERVE: usize = 1024;
/// Corrective retries after a malformed or invalid tool call.
pub const DEFAULT_TOOL_RETRIES: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub group_id: String,
    pub name: String,
    #[serde(default)]
    pub guidance: String,
}

fn default_reserve() -> usize {
    DEFAULT_OUTPUT_RESERVE
}
fn default_retries() -> u32 {
    DEFAULT_TOOL_RETRIES
}
fn default_window() -> usize {
    DEFAULT_WINDOW_TOKENS
}
fn default_overlap() -> usize {
    DEFAULT_OVERLAP_TOKENS
}
fn default_batch() -> usize {
    32
}
fn default_workers() -> usize {
    4
}
fn default_timeout() -> u64 {
    120
}
fn default_token_env() -> String {
    DEFAULT_TOKEN_ENV.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatConfig {
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub context_tokens: Option<usize>,
    #[serde(default = "default_reserve")]
    pub output_reserve: usize,
    #[serde(default = "default_retries")]
    pub tool_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl Default for ChatConfig {
    fn default() -> Self {
        ChatConfig {
            base_url: None,
            model: None,
            context_tokens: None,
            output_reserve: DEFAULT_OUTPUT_RESERVE,
            tool_retries: DEFAULT_TOOL_RETRIES,
            timeout_secs: default_timeout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    pub base_url: Option<String>,
    pub model: Option<String>,
    #[serde(default = "default_window")]
    pub window_tokens: usize,
    #[serde(default = "default_overlap")]
    pub overlap_tokens: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            base_url: None,
            model: None,
            window_tokens: DEFAULT_WINDOW_TOKENS,
            overlap_tokens: DEFAULT_OVERLAP_TOKENS,
            batch_size: default_batch(),
            timeout_secs: default_timeout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepoConfig {
    pub base_url: Option<String>,
    #[serde(default = "default_token_env")]
    pub token_env: String,
    /// Permit plain http; for local tests only.
    #[serde(default)]
    pub allow_insecure: bool,
}

impl Default for RepoConfig {
    fn default() -> Self {
        RepoConfig {
            base_url: None,
            token_env: default_token_env(),
            allow_insecure: false,
        }
    }
}

/// Everything a worker run needs. Contains no secrets and no patient data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    #[serde(default)]
    pub job_id: String,
    pub tool: ToolSpec,
    pub feature_groups: Vec<GroupConfig>,
    #[serde(default)]
    pub chat: ChatConfig,
    #[serde(default)]
    pub embed: EmbedConfig,
    pub similarity_threshold: Option<f64>,
    #[serde(default = "default_overlap")]
    pub context_overlap_tokens: usize,
    #[serde(default)]
    pub repository: RepoConfig,
    pub inputs: Vec<RemoteFileRef>,
    pub results_path: String,
    #[serde(default)]
    pub ingest: IngestOptions,
    /// Extra cleaning rules in rule-file syntax, applied after the defaults.
    #[serde(default)]
    pub cleaning_rules: Option<String>,
    /// Additional chrono formats recognised as dates during reconciliation.
    #[serde(default)]
    pub date_formats: Vec<String>,
    pub work_dir: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Overrides the `{today}` placeholder; defaults to the current date.
    pub today: Option<String>,
    pub prompt: Option<PromptTemplate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid job configuration: {}", .0.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; "))]
pub struct ConfigErrors(pub Vec<FieldError>);

/// A configuration with every optional value filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub job: JobConfig,
    pub repo_url: String,
    pub chat_url: String,
    pub chat_model: String,
    pub embed_url: String,
    pub embed_model: String,
    pub threshold: f64,
    pub context_tokens: usize,
    pub work_dir: PathBuf,
    pub groups: Vec<FeatureGroup>,
    pub prompt: PromptTemplate,
}

impl JobConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Fills unset values from `env` and checks every constraint, collecting
    /// all problems rather than stopping at the first.
    pub fn resolve(&self, env: impl Fn(&str) -> Option<String>) -> Result<ResolvedConfig, ConfigErrors> {
        let mut errors = Vec::new();
        let mut err = |field: &str, message: String| {
            errors.push(FieldError {
                field: field.to_string(),
                message,
            })
        };
        let pick = |value: &Option<String>, var: &str| value.clone().or_else(|| env(var)).filter(|s| !s.is_empty());

        let repo_url = pick(&self.repository.base_url, ENV_REPO_URL);
        let chat_url = pick(&self.chat.base_url, ENV_LLM_BASE_URL);
        let chat_model = pick(&self.chat.model, ENV_LLM_MODEL);
        let embed_url = pick(&self.embed.base_url, ENV_EMBED_BASE_URL);
        let embed_model = pick(&self.embed.model, ENV_EMBED_MODEL);
        for (v, field, var) in [
            (&repo_url, "repository.base_url", ENV_REPO_URL),
            (&chat_url, "chat.base_url", ENV_LLM_BASE_URL),
            (&chat_model, "chat.model", ENV_LLM_MODEL),
            (&embed_url, "embed.base_url", ENV_EMBED_BASE_URL),
            (&embed_model, "embed.model", ENV_EMBED_MODEL),
        ] {
            if v.is_none() {
                err(field, format!("not set (config or {var})"));
            }
        }

        let threshold = match self.similarity_threshold {
            Some(t) => Some(t),
            None => match env(ENV_THRESHOLD) {
                Some(s) => match s.trim().parse::<f64>() {
                    Ok(t) => Some(t),
                    Err(_) => {
                        err("similarity_threshold", format!("{ENV_THRESHOLD}={s:?} is not a number"));
                        None
                    }
                },
                None => Some(DEFAULT_THRESHOLD),
            },
        };
        if let Some(t) = threshold {
            if !(-1.0..=1.0).contains(&t) {
                err("similarity_threshold", format!("{t} is outside [-1, 1]"));
            }
        }
        let context_tokens = match self.chat.context_tokens {
            Some(c) => Some(c),
            None => match env(ENV_CONTEXT_TOKENS) {
                Some(s) => match s.trim().parse::<usize>() {
                    Ok(c) => Some(c),
                    Err(_) => {
                        err("chat.context_tokens", format!("{ENV_CONTEXT_TOKENS}={s:?} is not a count"));
                        None
                    }
                },
                None => Some(DEFAULT_CONTEXT_TOKENS),
            },
        };

        let doc = match compile_tool(&self.tool) {
            Ok(doc) => Some(doc),
            Err(e) => {
                let path = e.path();
                err(&format!("tool{path}"), e.to_string());
                None
            }
        };

        if self.feature_groups.is_empty() {
            err("feature_groups", "at least one feature group is required".into());
        }
        let mut seen_ids = std::collections::BTreeSet::new();
        let mut seen_names = std::collections::BTreeSet::new();
        for (i, g) in self.feature_groups.iter().enumerate() {
            if g.group_id.trim().is_empty() {
                err(&format!("feature_groups/{i}/group_id"), "must not be empty".into());
            } else if !seen_ids.insert(g.group_id.as_str()) {
                err(&format!("feature_groups/{i}/group_id"), format!("duplicate id {:?}", g.group_id));
            }
            if g.name.trim().is_empty() {
                err(&format!("feature_groups/{i}/name"), "must not be empty".into());
            } else if !seen_names.insert(g.name.to_lowercase()) {
                err(&format!("feature_groups/{i}/name"), format!("duplicate name {:?}", g.name));
            }
        }
        if self.inputs.is_empty() {
            err("inputs", "at least one input file is required".into());
        }
        for (i, r) in self.inputs.iter().enumerate() {
            if r.path.trim().is_empty() {
                err(&format!("inputs/{i}/path"), "must not be empty".into());
            }
        }
        if self.results_path.trim().is_empty() {
            err("results_path", "must not be empty".into());
        }
        if self.embed.window_tokens == 0 {
            err("embed.window_tokens", "must be positive".into());
        } else if self.embed.overlap_tokens >= self.embed.window_tokens {
            err("embed.overlap_tokens", "must be smaller than embed.window_tokens".into());
        }
        if self.workers == 0 {
            err("workers", "must be at least 1".into());
        }
        if let Some(rules) = &self.cleaning_rules {
            if let Err(e) = forge_core::corpus::CleaningRules::parse(rules) {
                err("cleaning_rules", e.to_string());
            }
        }

        let prompt = self.prompt.clone().unwrap_or_default();
        if let (Some(doc), Some(ctx)) = (&doc, context_tokens) {
            for g in &self.feature_groups {
                let system = format!("{}{CORRECTION_NOTE}", prompt.render(&g.name, &g.guidance, "0000-00-00"));
                if let Err(e) = context_budget(ctx, &system, doc, self.chat.output_reserve) {
                    err("chat.context_tokens", format!("group {:?}: {e}", g.name));
                }
            }
        }

        if !errors.is_empty() {
            return Err(ConfigErrors(errors));
        }
        let groups = self
            .feature_groups
            .iter()
            .map(|g| FeatureGroup {
                group_id: g.group_id.clone(),
                name: g.name.clone(),
                tool_ref: self.tool.tool_id.clone(),
                guidance: g.guidance.clone(),
            })
            .collect();
        let job_dir = if self.job_id.is_empty() { "job" } else { &self.job_id };
        Ok(ResolvedConfig {
            job: self.clone(),
            repo_url: repo_url.unwrap_or_default(),
            chat_url: chat_url.unwrap_or_default(),
            chat_model: chat_model.unwrap_or_default(),
            embed_url: embed_url.unwrap_or_default(),
            embed_model: embed_model.unwrap_or_default(),
            threshold: threshold.unwrap_or(DEFAULT_THRESHOLD),
            context_tokens: context_tokens.unwrap_or(DEFAULT_CONTEXT_TOKENS),
            work_dir: self.work_dir.clone().unwrap_or_else(|| PathBuf::from("forge-work").join(job_dir)),
            groups,
            prompt,
        })
    }
}

/// Reads the process environment.
pub fn process_env(var: &str) -> Option<String> {
    std::env::var(var).ok()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use forge_core::schema::{DType, FieldSpec};
    use std::collections::BTreeMap;

    pub(crate) fn sample() -> JobConfig {
        JobConfig {
            job_id: "j1".into(),
            tool: ToolSpec::new(
                "stroke_history",
                "",
                vec![FieldSpec::new("Occurrence", DType::Boolean), FieldSpec::new("Date", DType::String)],
            ),
            feature_groups: vec![GroupConfig {
                group_id: "stroke".into(),
                name: "Stroke".into(),
                guidance: String::new(),
            }],
            chat: ChatConfig::default(),
            embed: EmbedConfig::default(),
            similarity_threshold: None,
            context_overlap_tokens: 128,
            repository: RepoConfig::default(),
            inputs: vec![RemoteFileRef {
                path: "notes.csv".into(),
                kind: Default::default(),
            }],
            results_path: "results.csv".into(),
            ingest: IngestOptions::default(),
            cleaning_rules: None,
            date_formats: vec![],
            work_dir: None,
            workers: 2,
            today: None,
            prompt: None,
        }
    }

    fn env(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: BTreeMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        move |k| map.get(k).cloned()
    }

    fn full_env() -> impl Fn(&str) -> Option<String> {
        env(&[
            (ENV_REPO_URL, "https://repo"),
            (ENV_LLM_BASE_URL, "http://llm"),
            (ENV_LLM_MODEL, "m"),
            (ENV_EMBED_BASE_URL, "http://emb"),
            (ENV_EMBED_MODEL, "e"),
        ])
    }

    #[test]
    fn env_fills_unset_values() {
        let r = sample().resolve(full_env()).unwrap();
        assert_eq!(r.chat_model, "m");
        assert_eq!(r.threshold, DEFAULT_THRESHOLD);
        assert_eq!(r.context_tokens, DEFAULT_CONTEXT_TOKENS);
        let mut c = sample();
        c.chat.model = Some("explicit".into());
        assert_eq!(c.resolve(full_env()).unwrap().chat_model, "explicit");
    }

    #[test]
    fn collects_all_errors() {
        let mut c = sample();
        c.similarity_threshold = Some(2.0);
        c.feature_groups.push(c.feature_groups[0].clone());
        c.inputs.clear();
        let errs = c.resolve(env(&[])).unwrap_err().0;
        let fields: Vec<&str> = errs.iter().map(|e| e.field.as_str()).collect();
        for f in ["repository.base_url", "chat.model", "similarity_threshold", "feature_groups/1/group_id", "inputs"] {
            assert!(fields.contains(&f), "{f} missing from {fields:?}");
        }
    }

    #[test]
    fn tiny_context_is_a_configuration_error() {
        let mut c = sample();
        c.chat.context_tokens = Some(1000);
        let errs = c.resolve(full_env()).unwrap_err().0;
        assert!(errs.iter().any(|e| e.field == "chat.context_tokens"), "{errs:?}");
    }

    #[test]
    fn bad_tool_reports_field_path() {
        let mut c = sample();
        c.tool.fields[0].pattern = Some("x".into());
        let errs = c.resolve(full_env()).unwrap_err().0;
        assert_eq!(errs[0].field, "tool/Occurrence");
    }

    #[test]
    fn json_round_trip() {
        let c = sample();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(JobConfig::from_json(&text).unwrap(), c);
        assert!(JobConfig::from_json(r#"{"tool":{"name":"t"},"feature_groups":[],"inputs":[],"results_path":"x","bogus":1}"#).is_err());
    }
}
