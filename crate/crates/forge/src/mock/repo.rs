//! In-memory file repository speaking the fetch/upload protocol.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default)]
pub struct MockRepoConfig {
    pub token: String,
    /// Uploads under these prefixes are refused with 403.
    pub read_only_prefixes: Vec<String>,
    /// The first this-many uploads fail with 503.
    pub failing_uploads: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoRequest {
    pub operation: String,
    pub path: String,
    pub status: u16,
}

#[derive(Default)]
struct RepoState {
    files: BTreeMap<String, Vec<u8>>,
    token: String,
    read_only: Vec<String>,
    failing_uploads: usize,
    requests: Vec<RepoRequest>,
}

#[derive(Clone)]
pub struct MockRepo {
    state: Arc<Mutex<RepoState>>,
}

#[derive(Deserialize)]
struct FetchBody {
    token: String,
    path: String,
}

#[derive(Deserialize)]
struct UploadBody {
    token: String,
    path: String,
    bytes: String,
}

fn normalize(path: &str) -> String {
    path.trim_start_matches('/').to_string()
}

impl MockRepo {
    pub fn new(cfg: MockRepoConfig) -> Self {
        MockRepo {
            state: Arc::new(Mutex::new(RepoState {
                token: cfg.token,
                read_only: cfg.read_only_prefixes.iter().map(|p| normalize(p)).collect(),
                failing_uploads: cfg.failing_uploads,
                ..Default::default()
            })),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, RepoState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn put(&self, path: &str, bytes: impl Into<Vec<u8>>) {
        self.lock().files.insert(normalize(path), bytes.into());
    }

    pub fn get(&self, path: &str) -> Option<Vec<u8>> {
        self.lock().files.get(&normalize(path)).cloned()
    }

    pub fn paths(&self) -> Vec<String> {
        self.lock().files.keys().cloned().collect()
    }

    /// Adds every file below `dir`, keyed by its relative path.
    pub fn seed_dir(&self, dir: &Path) -> std::io::Result<usize> {
        let mut n = 0;
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d)? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if let Ok(rel) = p.strip_prefix(dir) {
                    let key = rel.to_string_lossy().replace('\\', "/");
                    self.put(&key, std::fs::read(&p)?);
                    n += 1;
                }
            }
        }
        Ok(n)
    }

    /// Replaces the accepted token, as if the old one were revoked.
    pub fn set_token(&self, token: &str) {
        self.lock().token = token.to_string();
    }

    pub fn set_failing_uploads(&self, n: usize) {
        self.lock().failing_uploads = n;
    }

    pub fn requests(&self) -> Vec<RepoRequest> {
        self.lock().requests.clone()
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/api/fetch", post(fetch))
            .route("/api/upload", post(upload))
            .route("/mock/requests", get(list_requests))
            .with_state(self.clone())
    }
}

fn reply(repo: &MockRepo, op: &str, path: &str, status: StatusCode, body: Vec<u8>) -> Response {
    repo.lock().requests.push(RepoRequest {
        operation: op.into(),
        path: path.into(),
        status: status.as_u16(),
    });
    (status, body).into_response()
}

async fn fetch(State(repo): State<MockRepo>, Json(req): Json<FetchBody>) -> Response {
    let path = normalize(&req.path);
    let (status, body) = {
        let st = repo.lock();
        if req.token != st.token {
            (StatusCode::UNAUTHORIZED, Vec::new())
        } else {
            match st.files.get(&path) {
                Some(b) => (StatusCode::OK, b.clone()),
                None => (StatusCode::NOT_FOUND, Vec::new()),
            }
        }
    };
    reply(&repo, "fetch", &path, status, body)
}

async fn upload(State(repo): State<MockRepo>, Json(req): Json<UploadBody>) -> Response {
    let path = normalize(&req.path);
    let status = {
        let mut st = repo.lock();
        if req.token != st.token {
            StatusCode::UNAUTHORIZED
        } else if st.read_only.iter().any(|p| path.starts_with(p.as_str())) {
            StatusCode::FORBIDDEN
        } else if st.failing_uploads > 0 {
            st.failing_uploads -= 1;
            StatusCode::SERVICE_UNAVAILABLE
        } else {
            match base64::engine::general_purpose::STANDARD.decode(req.bytes.as_bytes()) {
                Ok(b) => {
                    st.files.insert(path.clone(), b);
                    StatusCode::OK
                }
                Err(_) => StatusCode::BAD_REQUEST,
            }
        }
    };
    reply(&repo, "upload", &path, status, Vec::new())
}

async fn list_requests(State(repo): State<MockRepo>) -> impl IntoResponse {
    Json(repo.requests())
}
