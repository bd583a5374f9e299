//! Token-authenticated repository client with audit log and credential purge.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use base64::Engine;
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use zeroize::Zeroizing;

use crate::llm::{http_client, RetryPolicy};

pub const DEFAULT_TOKEN_ENV: &str = "REPO_API_TOKEN";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CredentialError {
    #[error("environment variable {0} is not set")]
    Missing(String),
    #[error("credential consumed")]
    Consumed,
}

/// The repository token, read once from the environment.
///
/// The secret sits behind a lock so independent clients may share it until
/// [`RepoCredential::purge`] overwrites it and unsets the variable.
pub struct RepoCredential {
    env_var: String,
    secret: RwLock<Option<Zeroizing<String>>>,
}

impl fmt::Debug for RepoCredential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RepoCredential")
            .field("env_var", &self.env_var)
            .field("consumed", &self.is_consumed())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PurgeConfirmation {
    pub env_unset: bool,
    pub secret_overwritten: bool,
}

impl RepoCredential {
    pub fn from_env(var: &str) -> Result<Self, CredentialError> {
        let token = std::env::var(var).map_err(|_| CredentialError::Missing(var.to_string()))?;
        if token.is_empty() {
            return Err(CredentialError::Missing(var.to_string()));
        }
        Ok(Self::new(var, token))
    }

    pub fn new(env_var: &str, token: String) -> Self {
        RepoCredential {
            env_var: env_var.to_string(),
            secret: RwLock::new(Some(Zeroizing::new(token))),
        }
    }

    pub fn env_var(&self) -> &str {
        &self.env_var
    }

    pub fn is_consumed(&self) -> bool {
        self.secret.read().map(|s| s.is_none()).unwrap_or(true)
    }

    pub fn with_secret<T>(&self, f: impl FnOnce(&str) -> T) -> Result<T, CredentialError> {
        let guard = self.secret.read().map_err(|_| CredentialError::Consumed)?;
        match guard.as_ref() {
            Some(s) => Ok(f(s)),
            None => Err(CredentialError::Consumed),
        }
    }

    /// Overwrites the secret and unsets the environment variable. Idempotent.
    pub fn purge(&self) -> PurgeConfirmation {
        let overwritten = match self.secret.write() {
            // Dropping the Zeroizing wrapper clears the bytes.
            Ok(mut guard) => {
                guard.take();
                true
            }
            Err(poisoned) => {
                poisoned.into_inner().take();
                true
            }
        };
        std::env::remove_var(&self.env_var);
        PurgeConfirmation {
            env_unset: std::env::var_os(&self.env_var).is_none(),
            secret_overwritten: overwritten,
        }
    }
}

/// Purges the credential when dropped, covering early returns and unwinding.
pub struct PurgeGuard(Arc<RepoCredential>);

impl PurgeGuard {
    pub fn new(cred: Arc<RepoCredential>) -> Self {
        PurgeGuard(cred)
    }

    pub fn credential(&self) -> &Arc<RepoCredential> {
        &self.0
    }
}

impl Drop for PurgeGuard {
    fn drop(&mut self) {
        self.0.purge();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditOperation {
    Fetch,
    Upload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub timestamp: String,
    pub operation: AuditOperation,
    pub path: String,
    pub outcome: String,
    pub bytes: u64,
}

/// JSON-lines audit file, one record per request.
pub struct AuditLog {
    file: Mutex<File>,
    path: PathBuf,
}

impl AuditLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditLog {
            file: Mutex::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn record(&self, operation: AuditOperation, path: &str, outcome: &str, bytes: u64) -> std::io::Result<()> {
        let rec = AuditRecord {
            timestamp: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            operation,
            path: path.to_string(),
            outcome: outcome.to_string(),
            bytes,
        };
        let mut line = serde_json::to_vec(&rec)?;
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(&line)?;
        f.sync_data()
    }

    pub fn read(path: &Path) -> std::io::Result<Vec<AuditRecord>> {
        let text = fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    #[default]
    InputTable,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteFileRef {
    pub path: String,
    #[serde(default)]
    pub kind: FileKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReceipt {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RepoError {
    #[error("refusing plain-http repository URL {0}; use https or enable the insecure test flag")]
    InsecureScheme(String),
    #[error("invalid repository URL {0}")]
    BadUrl(String),
    #[error("repository rejected the credential (HTTP {0})")]
    Credential(u16),
    #[error(transparent)]
    Consumed(#[from] CredentialError),
    #[error("missing input {0}")]
    NotFound(String),
    #[error("destination {0} is not writable")]
    Forbidden(String),
    #[error("invalid remote path {0:?}")]
    BadPath(String),
    #[error("repository transport: {0}")]
    Transport(String),
    #[error("repository returned HTTP {0}")]
    Status(u16),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RepoError {
    fn retryable(&self) -> bool {
        match self {
            RepoError::Transport(_) => true,
            RepoError::Status(code) => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

pub struct RepoClient {
    base: String,
    http: reqwest::blocking::Client,
    cred: Arc<RepoCredential>,
    audit: Arc<AuditLog>,
    retry: RetryPolicy,
}

impl RepoClient {
    /// Plain `http://` is refused unless `allow_insecure` is set.
    pub fn new(
        base_url: &str,
        cred: Arc<RepoCredential>,
        audit: Arc<AuditLog>,
        allow_insecure: bool,
        retry: RetryPolicy,
    ) -> Result<Self, RepoError> {
        let base = base_url.trim_end_matches('/').to_string();
        let scheme = base.split_once("://").map(|(s, _)| s.to_ascii_lowercase());
        match scheme.as_deref() {
            Some("https") => {}
            Some("http") if allow_insecure => {}
            Some("http") => return Err(RepoError::InsecureScheme(base)),
            _ => return Err(RepoError::BadUrl(base)),
        }
        Ok(RepoClient {
            base,
            http: http_client(Duration::from_secs(60)),
            cred,
            audit,
            retry,
        })
    }

    fn audit(&self, op: AuditOperation, path: &str, outcome: &str, bytes: u64) -> Result<(), RepoError> {
        self.audit.record(op, path, outcome, bytes).map_err(|source| RepoError::Io {
            path: self.audit.path().to_path_buf(),
            source,
        })
    }

    fn post(&self, op: AuditOperation, path: &str, extra: serde_json::Value) -> Result<Vec<u8>, RepoError> {
        let verb = match op {
            AuditOperation::Fetch => "fetch",
            AuditOperation::Upload => "upload",
        };
        let url = format!("{}/api/{verb}", self.base);
        let sent = extra.get("bytes").and_then(|b| b.as_str()).map_or(0, |b| b.len() as u64 * 3 / 4);
        self.retry.run(
            |_| {
                let mut body = self.cred.with_secret(|t| json!({"token": t, "path": path}))?;
                if let (Some(b), Some(e)) = (body.as_object_mut(), extra.as_object()) {
                    b.extend(e.clone());
                }
                let result = self.http.post(&url).json(&body).send();
                drop(body);
                let resp = match result {
                    Ok(r) => r,
                    Err(e) => {
                        let err = RepoError::Transport(e.without_url().to_string());
                        self.audit(op, path, "transport-error", 0)?;
                        return Err(err);
                    }
                };
                let status = resp.status().as_u16();
                let bytes = if status == 200 {
                    resp.bytes().map_err(|e| RepoError::Transport(e.without_url().to_string()))?.to_vec()
                } else {
                    Vec::new()
                };
                let count = if op == AuditOperation::Fetch { bytes.len() as u64 } else { sent };
                let outcome = if status == 200 { "ok".to_string() } else { format!("http-{status}") };
                self.audit(op, path, &outcome, if status == 200 { count } else { 0 })?;
                match status {
                    200 => Ok(bytes),
                    401 => Err(RepoError::Credential(401)),
                    403 if op == AuditOperation::Fetch => Err(RepoError::Credential(403)),
                    403 => Err(RepoError::Forbidden(path.to_string())),
                    404 => Err(RepoError::NotFound(path.to_string())),
                    code => Err(RepoError::Status(code)),
                }
            },
            RepoError::retryable,
        )
    }

    pub fn fetch(&self, path: &str) -> Result<Vec<u8>, RepoError> {
        if path.trim().is_empty() {
            return Err(RepoError::BadPath(path.to_string()));
        }
        self.post(AuditOperation::Fetch, path, json!({}))
    }

    /// Downloads every ref under `dest`, mirroring the remote paths.
    pub fn fetch_files(&self, refs: &[RemoteFileRef], dest: &Path) -> Result<Vec<PathBuf>, RepoError> {
        let mut out = Vec::with_capacity(refs.len());
        for r in refs {
            let local = dest.join(local_relative(&r.path)?);
            let bytes = self.fetch(&r.path)?;
            if let Some(parent) = local.parent() {
                fs::create_dir_all(parent).map_err(|source| RepoError::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            fs::write(&local, bytes).map_err(|source| RepoError::Io {
                path: local.clone(),
                source,
            })?;
            out.push(local);
        }
        Ok(out)
    }

    /// Uploads a closed local file; an existing remote file is overwritten.
    pub fn upload(&self, local: &Path, destination: &str) -> Result<TransferReceipt, RepoError> {
        if destination.trim().is_empty() {
            return Err(RepoError::BadPath(destination.to_string()));
        }
        let bytes = fs::read(local).map_err(|source| RepoError::Io {
            path: local.to_path_buf(),
            source,
        })?;
        let encoded = base64::engine::general_purpose::STANDARD.encode(&bytes);
        self.post(AuditOperation::Upload, destination, json!({"bytes": encoded}))?;
        Ok(TransferReceipt {
            path: destination.to_string(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

/// A remote path as a relative local path, refusing traversal.
pub fn local_relative(remote: &str) -> Result<PathBuf, RepoError> {
    let rel = Path::new(remote.trim_start_matches('/'));
    let mut out = PathBuf::new();
    for c in rel.components() {
        match c {
            Component::Normal(p) => out.push(p),
            Component::CurDir => {}
            _ => return Err(RepoError::BadPath(remote.to_string())),
        }
    }
    if out.as_os_str().is_empty() {
        return Err(RepoError::BadPath(remote.to_string()));
    }
    Ok(out)
}
