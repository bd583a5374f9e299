//! The orchestration service.

pub mod api;
pub mod auth;
pub mod launcher;
pub mod store;

use std::path::PathBuf;
use std::sync::Arc;

use axum::routing::{delete, get, post};
use axum::Router;

use auth::{OidcConfig, SessionKeys};
use launcher::Launcher;
use store::{Store, StoreError};

pub const ENV_OIDC_ISSUER: &str = "OIDC_ISSUER";
pub const ENV_OIDC_CLIENT_ID: &str = "OIDC_CLIENT_ID";
pub const ENV_OIDC_CLIENT_SECRET: &str = "OIDC_CLIENT_SECRET";
pub const ENV_OIDC_REDIRECT_URL: &str = "OIDC_REDIRECT_URL";
pub const ENV_SESSION_SECRET: &str = "FORGE_SESSION_SECRET";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// The database and job configs. Never holds patient data.
    pub data_dir: PathBuf,
    pub work_root: PathBuf,
    pub forge_bin: PathBuf,
    pub session_secret: Option<Vec<u8>>,
    pub session_ttl_secs: i64,
    pub test_idp: bool,
    pub oidc: Option<OidcConfig>,
    pub webhook: Option<String>,
}

impl ServerConfig {
    pub fn new(data_dir: PathBuf, work_root: PathBuf, forge_bin: PathBuf) -> Self {
        ServerConfig {
            data_dir,
            work_root,
            forge_bin,
            session_secret: None,
            session_ttl_secs: 8 * 3600,
            test_idp: false,
            oidc: None,
            webhook: None,
        }
    }

    /// Fills the identity provider and session secret from the environment.
    pub fn with_env(mut self) -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        if let (Some(issuer), Some(client_id)) = (var(ENV_OIDC_ISSUER), var(ENV_OIDC_CLIENT_ID)) {
            self.oidc = Some(OidcConfig {
                issuer,
                client_id,
                client_secret: var(ENV_OIDC_CLIENT_SECRET),
                redirect_url: var(ENV_OIDC_REDIRECT_URL).unwrap_or_else(|| "http://localhost:8080/auth/callback".into()),
            });
        }
        if let Some(s) = var(ENV_SESSION_SECRET) {
            self.session_secret = Some(s.into_bytes());
        }
        self
    }
}

pub struct AppState {
    pub store: Arc<Store>,
    pub keys: SessionKeys,
    pub launcher: Launcher,
    pub data_dir: PathBuf,
    pub test_idp: bool,
    pub oidc: Option<OidcConfig>,
    pub http: reqwest::Client,
}

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub fn build(cfg: ServerConfig) -> Result<(Router, Arc<AppState>), ServerError> {
    std::fs::create_dir_all(&cfg.data_dir)?;
    std::fs::create_dir_all(&cfg.work_root)?;
    let store = Arc::new(Store::open(&cfg.data_dir.join("forge.sqlite3"))?);
    let keys = match cfg.session_secret {
        Some(k) => SessionKeys::new(k, cfg.session_ttl_secs),
        None => SessionKeys::random(cfg.session_ttl_secs),
    };
    let state = Arc::new(AppState {
        store,
        keys,
        launcher: Launcher {
            forge_bin: cfg.forge_bin,
            work_root: cfg.work_root,
            webhook: cfg.webhook,
        },
        data_dir: cfg.data_dir,
        test_idp: cfg.test_idp,
        oidc: cfg.oidc,
        http: reqwest::Client::new(),
    });
    Ok((router(state.clone()), state))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(api::health))
        .route("/auth/test/login", post(api::test_login))
        .route("/auth/login", get(api::oidc_login))
        .route("/auth/callback", get(api::oidc_callback))
        .route("/auth/logout", post(api::logout))
        .route("/api/me", get(api::me))
        .route("/api/tools", post(api::create_tool).get(api::list_tools))
        .route("/api/tools/compile", post(api::compile))
        .route("/api/tools/{id}", get(api::get_tool).put(api::update_tool))
        .route("/api/tools/{id}/schema", get(api::tool_schema))
        .route("/api/tools/{id}/grants", post(api::grant_tool).get(api::tool_grants))
        .route("/api/jobs", post(api::launch_job).get(api::list_jobs))
        .route("/api/jobs/{id}", get(api::get_job))
        .route("/api/jobs/{id}/grants", post(api::grant_job).get(api::job_grants))
        .route("/api/grants/{id}", delete(api::revoke_grant))
        .fallback(api::fallback)
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(cfg: ServerConfig, bind: &str) -> Result<(), ServerError> {
    let (app, _) = build(cfg)?;
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
