//! A blocking client for the orchestration service that keeps every
//! response body for leak scans.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use forge::mock::{spawn_router, ServerHandle};
use forge::server::{build, ServerConfig};
use reqwest::Method;
use serde_json::{json, Value};

use super::{job_config, tool, Mocks};

pub struct Service {
    pub srv: ServerHandle,
    pub data_dir: PathBuf,
    pub work_root: PathBuf,
    _tmp: tempfile::TempDir,
}

pub fn start_service() -> Service {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    let work_root = tmp.path().join("work");
    let mut cfg = ServerConfig::new(
        data_dir.clone(),
        work_root.clone(),
        PathBuf::from(env!("CARGO_BIN_EXE_forge")),
    );
    cfg.test_idp = true;
    let (router, _) = build(cfg).unwrap();
    let srv = spawn_router(router, "127.0.0.1:0").unwrap();
    Service {
        srv,
        data_dir,
        work_root,
        _tmp: tmp,
    }
}

pub struct Api {
    base: String,
    http: reqwest::blocking::Client,
    /// Every response body seen so far.
    pub seen: Mutex<Vec<u8>>,
}

pub struct Reply {
    pub status: u16,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }
}

impl Api {
    pub fn new(srv: &ServerHandle) -> Self {
        Api {
            base: srv.url(),
            http: reqwest::blocking::Client::new(),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn call(&self, method: Method, path: &str, token: Option<&str>, body: Option<&Value>) -> Reply {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().unwrap();
        let status = resp.status().as_u16();
        let mut headers = Vec::new();
        for (k, v) in resp.headers() {
            headers.extend_from_slice(k.as_str().as_bytes());
            headers.extend_from_slice(v.as_bytes());
        }
        let body = resp.bytes().unwrap().to_vec();
        let mut seen = self.seen.lock().unwrap();
        seen.extend_from_slice(&headers);
        seen.extend_from_slice(&body);
        Reply { status, body }
    }

    pub fn get(&self, path: &str, token: &str) -> Reply {
        self.call(Method::GET, path, Some(token), None)
    }

    pub fn post(&self, path: &str, token: &str, body: &Value) -> Reply {
        self.call(Method::POST, path, Some(token), Some(body))
    }

    pub fn put(&self, path: &str, token: &str, body: &Value) -> Reply {
        self.call(Method::PUT, path, Some(token), Some(body))
    }

    pub fn delete(&self, path: &str, token: &str) -> Reply {
        self.call(Method::DELETE, path, Some(token), None)
    }

    pub fn login(&self, subject: &str) -> String {
        let r = self.call(Method::POST, "/auth/test/login", None, Some(&json!({"subject": subject})));
        assert_eq!(r.status, 200, "{}", String::from_utf8_lossy(&r.body));
        r.json()["token"].as_str().unwrap().to_string()
    }

    /// Creates the fixture tool and returns its id.
    pub fn create_tool(&self, token: &str) -> String {
        let r = self.post("/api/tools", token, &serde_json::to_value(tool()).unwrap());
        assert_eq!(r.status, 201, "{}", String::from_utf8_lossy(&r.body));
        r.json()["id"].as_str().unwrap().to_string()
    }

    pub fn tool_version(&self, id: &str, token: &str) -> u32 {
        self.get(&format!("/api/tools/{id}"), token).json()["version"].as_u64().unwrap() as u32
    }

    pub fn grant(&self, kind: &str, id: &str, token: &str, principal: &str, role: &str) -> Reply {
        self.post(
            &format!("/api/{kind}s/{id}/grants"),
            token,
            &json!({"principal": principal, "role": role}),
        )
    }

    /// Polls until the job is terminal.
    pub fn wait_job(&self, id: &str, token: &str, limit: Duration) -> Value {
        let start = Instant::now();
        loop {
            let v = self.get(&format!("/api/jobs/{id}"), token).json();
            let state = v["lifecycle"]["state"].as_str().unwrap_or("").to_string();
            if state == "done" || state == "failed" {
                return v;
            }
            assert!(start.elapsed() < limit, "job {id} stuck in {state}");
            std::thread::sleep(Duration::from_millis(100));
        }
    }
}

/// The fixture job config as a launch body for the service.
pub fn launch_body(m: &Mocks, tool_id: &str, repo_token: &str) -> Value {
    let mut cfg = serde_json::to_value(job_config(m, "unused", "UNUSED", Path::new("/unused"))).unwrap();
    let obj = cfg.as_object_mut().unwrap();
    for k in ["job_id", "tool", "work_dir"] {
        obj.remove(k);
    }
    obj.insert("results_path".into(), json!("results/api-run.csv"));
    json!({"tool_id": tool_id, "config": cfg, "repository_token": repo_token})
}

/// The RBAC decision observed through the API, for one tool action.
pub fn tool_action_allowed(api: &Api, tool_id: &str, manager: &str, who: &str, action: &str) -> bool {
    let status = match action {
        "view" => api.get(&format!("/api/tools/{tool_id}"), who).status,
        "run" => {
            // Authorization precedes validation, so an out-of-range threshold
            // answers 400 when allowed and 403 when not.
            let body = json!({
                "tool_id": tool_id,
                "config": {"similarity_threshold": 2.0},
                "repository_token": "irrelevant"
            });
            match api.post("/api/jobs", who, &body).status {
                400 => 200,
                s => s,
            }
        }
        "edit" => {
            let v = api.tool_version(tool_id, manager);
            api.put(
                &format!("/api/tools/{tool_id}"),
                who,
                &json!({"spec": tool(), "expected_version": v}),
            )
            .status
        }
        "grant" => api.grant("tool", tool_id, who, "bystander", "read").status,
        _ => unreachable!(),
    };
    match status {
        200 | 201 => true,
        403 => false,
        s => panic!("{action}: unexpected status {s}"),
    }
}
