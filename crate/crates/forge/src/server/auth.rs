//! Sessions and sign-in.
//!
//! A session token is `base64url(claims) "." base64url(hmac_sha256(claims))`
//! and travels as a bearer header or the `forge_session` cookie. Sign-in is
//! either the bundled test provider or an OIDC authorization-code flow; in
//! the latter the subject comes from the provider's userinfo endpoint,
//! fetched over TLS with the access token from the code exchange.

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

pub const SESSION_COOKIE: &str = "forge_session";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub subject: String,
    pub display_name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Claims {
    sub: String,
    name: String,
    exp: i64,
    /// Distinguishes session tokens from login state values.
    #[serde(default)]
    kind: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum AuthError {
    #[error("no session")]
    Missing,
    #[error("invalid session")]
    Invalid,
    #[error("session expired")]
    Expired,
}

pub struct SessionKeys {
    key: Vec<u8>,
    pub ttl_secs: i64,
}

type HmacSha256 = Hmac<Sha256>;

impl SessionKeys {
    pub fn new(key: Vec<u8>, ttl_secs: i64) -> Self {
        SessionKeys { key, ttl_secs }
    }

    /// A fresh random key, so sessions do not survive a restart.
    pub fn random(ttl_secs: i64) -> Self {
        let mut key = Vec::with_capacity(32);
        key.extend_from_slice(uuid::Uuid::new_v4().as_bytes());
        key.extend_from_slice(uuid::Uuid::new_v4().as_bytes());
        SessionKeys { key, ttl_secs }
    }

    fn mac(&self, data: &[u8]) -> HmacSha256 {
        let mut mac = HmacSha256::new_from_slice(&self.key).expect("hmac accepts any key length");
        mac.update(data);
        mac
    }

    fn sign(&self, claims: &Claims) -> String {
        let body = URL_SAFE_NO_PAD.encode(serde_json::to_vec(claims).expect("claims serialize"));
        let tag = URL_SAFE_NO_PAD.encode(self.mac(body.as_bytes()).finalize().into_bytes());
        format!("{body}.{tag}")
    }

    fn open(&self, token: &str, kind: &str, now: i64) -> Result<Claims, AuthError> {
        let (body, tag) = token.split_once('.').ok_or(AuthError::Invalid)?;
        let tag = URL_SAFE_NO_PAD.decode(tag).map_err(|_| AuthError::Invalid)?;
        self.mac(body.as_bytes()).verify_slice(&tag).map_err(|_| AuthError::Invalid)?;
        let bytes = URL_SAFE_NO_PAD.decode(body).map_err(|_| AuthError::Invalid)?;
        let claims: Claims = serde_json::from_slice(&bytes).map_err(|_| AuthError::Invalid)?;
        if claims.kind != kind {
            return Err(AuthError::Invalid);
        }
        if claims.exp <= now {
            return Err(AuthError::Expired);
        }
        Ok(claims)
    }

    pub fn issue(&self, p: &Principal, now: i64) -> String {
        self.sign(&Claims {
            sub: p.subject.clone(),
            name: p.display_name.clone(),
            exp: now + self.ttl_secs,
            kind: "session".into(),
        })
    }

    pub fn verify(&self, token: &str, now: i64) -> Result<Principal, AuthError> {
        let c = self.open(token, "session", now)?;
        Ok(Principal {
            subject: c.sub,
            display_name: c.name,
        })
    }

    /// A signed, short-lived `state` value for the authorization redirect.
    pub fn login_state(&self, now: i64) -> String {
        self.sign(&Claims {
            sub: uuid::Uuid::new_v4().simple().to_string(),
            name: String::new(),
            exp: now + 600,
            kind: "state".into(),
        })
    }

    pub fn check_state(&self, state: &str, now: i64) -> Result<(), AuthError> {
        self.open(state, "state", now).map(|_| ())
    }
}

/// The session token from an `Authorization: Bearer` header or the cookie.
pub fn token_from_headers(headers: &axum::http::HeaderMap) -> Option<String> {
    if let Some(v) = headers.get(axum::http::header::AUTHORIZATION).and_then(|v| v.to_str().ok()) {
        if let Some(t) = v.strip_prefix("Bearer ").or_else(|| v.strip_prefix("bearer ")) {
            return Some(t.trim().to_string());
        }
    }
    for v in headers.get_all(axum::http::header::COOKIE) {
        let Ok(v) = v.to_str() else { continue };
        for part in v.split(';') {
            if let Some((k, val)) = part.trim().split_once('=') {
                if k == SESSION_COOKIE {
                    return Some(val.to_string());
                }
            }
        }
    }
    None
}

pub fn session_cookie(token: &str, ttl_secs: i64) -> String {
    format!("{SESSION_COOKIE}={token}; Path=/; HttpOnly; SameSite=Lax; Max-Age={ttl_secs}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OidcConfig {
    pub issuer: String,
    pub client_id: String,
    #[serde(default)]
    pub client_secret: Option<String>,
    /// Where the provider sends the browser back, ending in `/auth/callback`.
    pub redirect_url: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Discovery {
    pub authorization_endpoint: String,
    pub token_endpoint: String,
    pub userinfo_endpoint: String,
}

#[derive(Debug, thiserror::Error)]
pub enum OidcError {
    #[error("identity provider: {0}")]
    Provider(String),
}

pub async fn discover(http: &reqwest::Client, issuer: &str) -> Result<Discovery, OidcError> {
    let url = format!("{}/.well-known/openid-configuration", issuer.trim_end_matches('/'));
    http.get(&url)
        .send()
        .await
        .and_then(|r| r.error_for_status())
        .map_err(|e| OidcError::Provider(e.to_string()))?
        .json()
        .await
        .map_err(|e| OidcError::Provider(e.to_string()))
}

pub fn authorization_url(d: &Discovery, cfg: &OidcConfig, state: &str) -> Result<String, OidcError> {
    let mut url = reqwest::Url::parse(&d.authorization_endpoint).map_err(|e| OidcError::Provider(e.to_string()))?;
    url.query_pairs_mut()
        .append_pair("response_type", "code")
        .append_pair("client_id", &cfg.client_id)
        .append_pair("redirect_uri", &cfg.redirect_url)
        .append_pair("scope", "openid profile email")
        .append_pair("state", state);
    Ok(url.to_string())
}

/// Exchanges the code and reads the signed-in principal from userinfo.
pub async fn complete_login(
    http: &reqwest::Client,
    d: &Discovery,
    cfg: &OidcConfig,
    code: &str,
) -> Result<Principal, OidcError> {
    let mut form = vec![
        ("grant_type", "authorization_code".to_string()),
        ("code", code.to_string()),
        ("redirect_uri", cfg.redirect_url.clone()),
        ("client_id", cfg.client_id.clone()),
    ];
    if let Some(s) = &cfg.client_secret {
        form.push(("client_secret", s.clone()));
    }
    let provider = |e: reqwest::Error| OidcError::Provider(e.without_url().to_string());
    let tokens: serde_json::Value = http
        .post(&d.token_endpoint)
        .form(&form)
        .send()
        .await
        .and_then(|r| r.error_for_status())
        .map_err(provider)?
        .json()
        .await
        .map_err(provider)?;
    let access = tokens
        .get("access_token")
        .and_then(|v| v.as_str())
        .ok_or_else(|| OidcError::Provider("token response has no access_token".into()))?;
    let info: serde_json::Value = http
        .get(&d.userinfo_endpoint)
        .bearer_auth(access)
        .send()
        .await
        .and_then(|r| r.error_for_status())
        .map_err(provider)?
        .json()
        .await
        .map_err(provider)?;
    let subject = info
        .get("sub")
        .and_then(|v| v.as_str())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| OidcError::Provider("userinfo has no sub".into()))?
        .to_string();
    let display_name = ["name", "preferred_username", "email"]
        .iter()
        .find_map(|k| info.get(*k).and_then(|v| v.as_str()))
        .unwrap_or(&subject)
        .to_string();
    Ok(Principal { subject, display_name })
}
