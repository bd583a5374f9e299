//! REST handlers.

use std::sync::Arc;

use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Redirect, Response};
use axum::Json;
use forge_core::job::JobLifecycle;
use forge_core::rbac::{check, Action, Decision, ResourceKind, Role};
use forge_core::schema::{compile_tool, ToolSpec};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use zeroize::Zeroizing;

use super::auth::{self, AuthError, Principal};
use super::launcher::Launch;
use super::store::{GrantRecord, JobRecord, StoreError, ToolRecord};
use super::AppState;
use crate::config::{process_env, FieldError, JobConfig};
use crate::repo::DEFAULT_TOKEN_ENV;

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub field_errors: Vec<FieldError>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            field_errors: Vec::new(),
        }
    }

    fn invalid(field_errors: Vec<FieldError>) -> Self {
        ApiError {
            field_errors,
            ..Self::new(StatusCode::BAD_REQUEST, "invalid", "the request has invalid fields")
        }
    }

    fn field(field: &str, message: impl Into<String>) -> Self {
        Self::invalid(vec![FieldError {
            field: field.into(),
            message: message.into(),
        }])
    }

    fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("{what} not found"))
    }

    fn forbidden(action: Action) -> Self {
        Self::new(
            StatusCode::FORBIDDEN,
            "forbidden",
            format!("{} requires {} access", action_name(action), action.required_role()),
        )
    }
}

fn action_name(a: Action) -> &'static str {
    match a {
        Action::View => "view",
        Action::Run => "run",
        Action::Edit => "edit",
        Action::Grant => "grant",
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(what) => ApiError::not_found(&what),
            StoreError::Conflict { .. } => ApiError::new(StatusCode::CONFLICT, "version_conflict", e.to_string()),
            StoreError::LastManager => ApiError::new(StatusCode::CONFLICT, "last_manager", e.to_string()),
            other => {
                log::error!("{other}");
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "storage error")
            }
        }
    }
}

impl From<AuthError> for ApiError {
    fn from(e: AuthError) -> Self {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthenticated", e.to_string())
    }
}

/// JSON bodies with failures reported in the common error shape.
pub struct Body<T>(pub T);

impl<S, T> axum::extract::FromRequest<S> for Body<T>
where
    T: serde::de::DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: axum::extract::Request, state: &S) -> Result<Self, ApiError> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(ApiError::field("body", e.body_text())),
        }
    }
}

/// The signed-in principal.
pub struct Authed(pub Principal);

impl FromRequestParts<Arc<AppState>> for Authed {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, ApiError> {
        let token = auth::token_from_headers(&parts.headers).ok_or(AuthError::Missing)?;
        let now = chrono::Utc::now().timestamp();
        Ok(Authed(state.keys.verify(&token, now)?))
    }
}

fn authorize(
    st: &AppState,
    who: &Principal,
    kind: ResourceKind,
    id: &str,
    action: Action,
) -> Result<Option<Role>, ApiError> {
    if !st.store.exists(kind, id)? {
        return Err(ApiError::not_found(&format!("{} {id}", kind.as_str())));
    }
    let role = st.store.role_of(&who.subject, kind, id)?;
    match check(role, action) {
        Decision::Allow => Ok(role),
        Decision::Deny => Err(ApiError::forbidden(action)),
    }
}

// ----- identity -----

#[derive(Deserialize)]
pub struct TestLogin {
    subject: String,
    #[serde(default)]
    display_name: Option<String>,
}

fn with_session(st: &AppState, p: &Principal, mut resp: Response) -> Response {
    let token = st.keys.issue(p, chrono::Utc::now().timestamp());
    if let Ok(v) = HeaderValue::from_str(&auth::session_cookie(&token, st.keys.ttl_secs)) {
        resp.headers_mut().append(header::SET_COOKIE, v);
    }
    resp
}

/// The bundled test identity provider: any subject signs in.
pub async fn test_login(
    State(st): State<Arc<AppState>>,
    Body(req): Body<TestLogin>,
) -> Result<Response, ApiError> {
    if !st.test_idp {
        return Err(ApiError::not_found("test identity provider"));
    }
    let subject = req.subject.trim();
    if subject.is_empty() {
        return Err(ApiError::field("subject", "must not be empty"));
    }
    let p = Principal {
        subject: subject.into(),
        display_name: req.display_name.unwrap_or_else(|| subject.into()),
    };
    let token = st.keys.issue(&p, chrono::Utc::now().timestamp());
    let resp = Json(json!({"token": token, "principal": p})).into_response();
    Ok(with_session(&st, &p, resp))
}

pub async fn oidc_login(State(st): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let cfg = st.oidc.as_ref().ok_or_else(|| ApiError::not_found("identity provider"))?;
    let d = auth::discover(&st.http, &cfg.issuer)
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, "identity_provider", e.to_string()))?;
    let state = st.keys.login_state(chrono::Utc::now().timestamp());
    let url = auth::authorization_url(&d, cfg, &state)
        .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, "identity_provider", e.to_string()))?;
    Ok(Redirect::to(&url).into_response())
}

#[derive(Deserialize)]
pub struct Callback {
    code: String,
    state: String,
}

pub async fn oidc_callback(State(st): State<Arc<AppState>>, Query(q): Query<Callback>) -> Result<Response, ApiError> {
    let cfg = st.oidc.as_ref().ok_or_else(|| ApiError::not_found("identity provider"))?;
    st.keys.check_state(&q.state, chrono::Utc::now().timestamp())?;
    let provider = |e: auth::OidcError| ApiError::new(StatusCode::BAD_GATEWAY, "identity_provider", e.to_string());
    let d = auth::discover(&st.http, &cfg.issuer).await.map_err(provider)?;
    let p = auth::complete_login(&st.http, &d, cfg, &q.code).await.map_err(provider)?;
    Ok(with_session(&st, &p, Redirect::to("/").into_response()))
}

pub async fn logout() -> Response {
    let mut resp = StatusCode::NO_CONTENT.into_response();
    if let Ok(v) = HeaderValue::from_str(&format!("{}=; Path=/; HttpOnly; Max-Age=0", auth::SESSION_COOKIE)) {
        resp.headers_mut().append(header::SET_COOKIE, v);
    }
    resp
}

pub async fn me(Authed(p): Authed) -> Json<Principal> {
    Json(p)
}

pub async fn health() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

// ----- tools -----

#[derive(Serialize)]
pub struct ToolView {
    #[serde(flatten)]
    pub tool: ToolRecord,
    pub role: Option<Role>,
}

fn compile_errors(spec: &ToolSpec) -> Result<Vec<u8>, ApiError> {
    compile_tool(spec)
        .map(|d| d.as_str().as_bytes().to_vec())
        .map_err(|e| ApiError::field(&format!("spec{}", e.path()), e.to_string()))
}

/// The canonical function-calling document for a draft, byte for byte.
pub async fn compile(_: Authed, Body(spec): Body<ToolSpec>) -> Result<Response, ApiError> {
    let bytes = compile_errors(&spec)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

pub async fn create_tool(
    State(st): State<Arc<AppState>>,
    Authed(p): Authed,
    Body(spec): Body<ToolSpec>,
) -> Result<(StatusCode, Json<ToolView>), ApiError> {
    compile_errors(&spec)?;
    let tool = st.store.create_tool(&spec, &p.subject)?;
    Ok((
        StatusCode::CREATED,
        Json(ToolView {
            tool,
            role: Some(Role::Manage),
        }),
    ))
}

#[derive(Deserialize)]
pub struct ToolUpdate {
    spec: ToolSpec,
    expected_version: u32,
}

pub async fn update_tool(
    State(st): State<Arc<AppState>>,
    Authed(p): Authed,
    Path(id): Path<String>,
    Body(req): Body<ToolUpdate>,
) -> Result<Json<ToolView>, ApiError> {
    let role = authorize(&st, &p, ResourceKind::Tool, &id, Action::Edit)?;
    compile_errors(&req.spec)?;
    let tool = st.store.update_tool(&id, &req.spec, req.expected_version)?;
    Ok(Json(ToolView { tool, role }))
}

pub async fn get_tool(
    State(st): State<Arc<AppState>>,
    Authed(p): Authed,
    Path(id): Path<String>,
) -> Result<Json<ToolView>, ApiError> {
    let role = authorize(&st, &p, ResourceKind::Tool, &id, Action::View)?;
    let tool = st.store.get_tool(&id)?.ok_or_else(|| ApiError::not_found("tool"))?;
    Ok(Json(ToolView { tool, role }))
}

pub async fn tool_schema(
    State(st): State<Arc<AppState>>,
    Authed(p): Authed,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    authorize(&st, &p, ResourceKind::Tool, &id, Action::View)?;
    let tool = st.store.get_tool(&id)?.ok_or_else(|| ApiError::not_found("tool"))?;
    let bytes = compile_errors(&tool.spec)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

pub async fn list_tools(State(st): State<Arc<AppState>>, Authed(p): Authed) -> Result<Json<Vec<ToolView>>, ApiError> {
    let mut out = Vec::new();
    for tool in st.store.list_tools()? {
        let role = st.store.role_of(&p.subject, ResourceKind::Tool, &tool.id)?;
        if check(role, Action::View) == Decision::Allow {
            out.push(ToolView { tool, role });
        }
    }
    Ok(Json(out))
}

// ----- grants -----

#[derive(Deserialize)]
pub struct GrantRequest {
    principal: String,
    role: Role,
}

fn grant_on(
    st: &AppState,
    p: &Principal,
    kind: ResourceKind,
    id: &str,
    req: GrantRequest,
) -> Result<(StatusCode, Json<GrantRecord>), ApiError> {
    authorize(st, p, kind, id, Action::Grant)?;
    let who = req.principal.trim();
    if who.is_empty() {
        return Err(ApiError::field("principal", "must not be empty"));
    }
    let g = st.store.grant(who, kind, id, req.role, &p.subject)?;
    Ok((StatusCode::CREATED, Json(g)))
}

pub async fn grant_tool(
    State(st): State<Arc<AppState>>,
    Authed(p): Authed,
    Path(id): Path<String>,
    Body(req): Body<GrantRequest>,
) -> Result<(StatusCode, Json<GrantRecord>), ApiError> {
    grant_on(&st, &p, ResourceKind::Tool, &id, req)
}

pub async fn grant_job(
    State(st): State<Arc<AppState>>,
    Authed(p): Authed,
    Path(id): Path<String>,
    Body(req): Body<GrantRequest>,
) -> Result<(StatusCode, Json<GrantRecord>), ApiError> {
    grant_on(&st, &p, ResourceKind::Job, &id, req)
}

pub async fn tool_grants(
    State(st): State<Arc<AppState>>,
    Authed(p): Authed,
    Path(id): Path<String>,
) -> Result<Json<Vec<GrantRecord>>, ApiError> {
    authorize(&st, &p, ResourceKind::Tool, &id, Action::View)?;
    Ok(Json(st.store.grants_for(ResourceKind::Tool, &id)?))
}

pub async fn job_grants(
    State(st): State<Arc<AppState>>,
    Authed(p): Authed,
    Path(id): Path<String>,
) -> Result<Json<Vec<GrantRecord>>, ApiError> {
    authorize(&st, &p, ResourceKind::Job, &id, Action::View)?;
    Ok(Json(st.store.grants_for(ResourceKind::Job, &id)?))
}

pub async fn revoke_grant(
    State(st): State<Arc<AppState>>,
    Authed(p): Authed,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    let g = st.store.get_grant(&id)?.ok_or_else(|| ApiError::not_found("grant"))?;
    authorize(&st, &p, g.resource_kind, &g.resource_id, Action::Grant)?;
    st.store.revoke(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

// ----- jobs -----

#[derive(Deserialize)]
pub struct LaunchRequest {
    tool_id: String,
    /// Job configuration without `job_id`, `tool` or `work_dir`, which the
    /// service fills in.
    #[serde(default)]
    config: Map<String, Value>,
    repository_token: String,
}

#[derive(Serialize)]
pub struct JobView {
    #[serde(flatten)]
    pub job: JobRecord,
    pub role: Option<Role>,
}

pub async fn launch_job(
    State(st): State<Arc<AppState>>,
    Authed(p): Authed,
    Body(req): Body<LaunchRequest>,
) -> Result<(StatusCode, Json<JobView>), ApiError> {
    let token = Zeroizing::new(req.repository_token);
    if token.trim().is_empty() {
        return Err(ApiError::field("repository_token", "must not be empty"));
    }
    authorize(&st, &p, ResourceKind::Tool, &req.tool_id, Action::Run)?;
    let tool = st.store.get_tool(&req.tool_id)?.ok_or_else(|| ApiError::not_found("tool"))?;

    let job_id = format!("job-{}", uuid::Uuid::new_v4().simple());
    let mut cfg = req.config;
    for reserved in ["job_id", "tool", "work_dir"] {
        if cfg.contains_key(reserved) {
            return Err(ApiError::field(&format!("config.{reserved}"), "is set by the service"));
        }
    }
    cfg.insert("job_id".into(), Value::String(job_id.clone()));
    cfg.insert("tool".into(), serde_json::to_value(&tool.spec).unwrap_or(Value::Null));
    let work_dir = st.launcher.work_root.join(&job_id);
    cfg.insert("work_dir".into(), Value::String(work_dir.to_string_lossy().into_owned()));
    let repo = cfg.entry("repository").or_insert_with(|| json!({}));
    if let Some(r) = repo.as_object_mut() {
        r.insert("token_env".into(), Value::String(DEFAULT_TOKEN_ENV.into()));
    }
    let text = Value::Object(cfg).to_string();
    if text.contains(token.as_str()) {
        return Err(ApiError::field("config", "must not contain the repository token"));
    }
    let job: JobConfig = JobConfig::from_json(&text).map_err(|e| ApiError::field("config", e.to_string()))?;
    job.resolve(process_env).map_err(|e| ApiError::invalid(e.0))?;

    let dir = st.data_dir.join("jobs").join(&job_id);
    let config_path = dir.join("job.json");
    let write = std::fs::create_dir_all(&dir).and_then(|_| {
        std::fs::write(
            &config_path,
            serde_json::to_vec_pretty(&job).map_err(std::io::Error::other)?,
        )
    });
    if let Err(e) = write {
        log::error!("writing job config: {e}");
        return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "cannot store job config"));
    }
    let config_value = serde_json::to_value(&job).unwrap_or(Value::Null);
    let life = JobLifecycle::new(chrono::Utc::now().timestamp_millis());
    let record = st.store.create_job(&job_id, &tool, &p.subject, &config_value, &life)?;

    let spawned = st.launcher.launch(
        st.store.clone(),
        Launch {
            job_id: job_id.clone(),
            config_path,
            token_env: DEFAULT_TOKEN_ENV.into(),
            token,
        },
    );
    let record = match spawned {
        Ok(_) => record,
        Err(e) => {
            log::error!("job {job_id}: cannot start worker: {e}");
            let (_, life) = st.store.update_lifecycle(&job_id, |l| {
                l.mark_purged();
                let _ = l.fail("worker could not be started", chrono::Utc::now().timestamp_millis());
            })?;
            JobRecord { lifecycle: life, ..record }
        }
    };
    Ok((
        StatusCode::ACCEPTED,
        Json(JobView {
            job: record,
            role: Some(Role::Manage),
        }),
    ))
}

pub async fn get_job(
    State(st): State<Arc<AppState>>,
    Authed(p): Authed,
    Path(id): Path<String>,
) -> Result<Json<JobView>, ApiError> {
    let role = authorize(&st, &p, ResourceKind::Job, &id, Action::View)?;
    let job = st.store.get_job(&id)?.ok_or_else(|| ApiError::not_found("job"))?;
    Ok(Json(JobView { job, role }))
}

pub async fn list_jobs(State(st): State<Arc<AppState>>, Authed(p): Authed) -> Result<Json<Vec<JobView>>, ApiError> {
    let mut out = Vec::new();
    for job in st.store.list_jobs()? {
        let role = st.store.role_of(&p.subject, ResourceKind::Job, &job.id)?;
        if check(role, Action::View) == Decision::Allow {
            out.push(JobView { job, role });
        }
    }
    Ok(Json(out))
}

pub async fn fallback() -> ApiError {
    ApiError::not_found("route")
}
