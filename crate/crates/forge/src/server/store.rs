//! SQLite persistence for tools, jobs and grants.
//!
//! ```text
//! tools(id PK, version, spec_json, author, created_at, updated_at)
//! jobs(id PK, tool_id, tool_version, owner, config_json, lifecycle_json, created_at)
//! grants(id PK, principal, resource_kind, resource_id, role, granted_by, created_at,
//!        UNIQUE(principal, resource_kind, resource_id))
//! ```
//!
//! Nothing here holds note text or credentials: tool specs, job configs that
//! name remote files, and lifecycle metadata only.

use std::path::Path;
use std::sync::Mutex;

use forge_core::job::JobLifecycle;
use forge_core::rbac::{effective_role, keeps_a_manager, ResourceKind, Role};
use forge_core::schema::ToolSpec;
use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("database: {0}")]
    Db(#[from] rusqlite::Error),
    #[error("stored json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0} not found")]
    NotFound(String),
    #[error("version conflict: expected {expected}, current {current}")]
    Conflict { expected: u32, current: u32 },
    #[error("the resource must keep at least one manager")]
    LastManager,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRecord {
    pub id: String,
    pub version: u32,
    pub spec: ToolSpec,
    pub author: String,
    pub created_at: String,
    pub updated_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub tool_id: String,
    pub tool_version: u32,
    pub owner: String,
    pub config: serde_json::Value,
    pub lifecycle: JobLifecycle,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrantRecord {
    pub id: String,
    pub principal: String,
    pub resource_kind: ResourceKind,
    pub resource_id: String,
    pub role: Role,
    pub granted_by: String,
    pub created_at: String,
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS tools (
    id TEXT PRIMARY KEY,
    version INTEGER NOT NULL,
    spec_json TEXT NOT NULL,
    author TEXT NOT NULL,
    created_at TEXT NOT NULL,
    updated_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS jobs (
    id TEXT PRIMARY KEY,
    tool_id TEXT NOT NULL REFERENCES tools(id),
    tool_version INTEGER NOT NULL,
    owner TEXT NOT NULL,
    config_json TEXT NOT NULL,
    lifecycle_json TEXT NOT NULL,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS grants (
    id TEXT PRIMARY KEY,
    principal TEXT NOT NULL,
    resource_kind TEXT NOT NULL,
    resource_id TEXT NOT NULL,
    role TEXT NOT NULL,
    granted_by TEXT NOT NULL,
    created_at TEXT NOT NULL,
    UNIQUE (principal, resource_kind, resource_id)
);
";

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn new_id(prefix: &str) -> String {
    format!("{prefix}-{}", uuid::Uuid::new_v4().simple())
}

pub struct Store {
    conn: Mutex<Connection>,
}

fn tool_row(row: &rusqlite::Row<'_>) -> rusqlite::Result<(String, u32, String, String, String, String)> {
    Ok((row.get(0)?, row.get(1)?, row.get(2)?, row.get(3)?, row.get(4)?, row.get(5)?))
}

fn to_tool(t: (String, u32, String, String, String, String)) -> Result<ToolRecord, StoreError> {
    Ok(ToolRecord {
        id: t.0,
        version: t.1,
        spec: serde_json::from_str(&t.2)?,
        author: t.3,
        created_at: t.4,
        updated_at: t.5,
    })
}

type JobRow = (String, String, u32, String, String, String, String);

fn job_row(row: &rusqlite::Row<'_>) -> rusqlite::Result<JobRow> {
    Ok((
        row.get(0)?,
        row.get(1)?,
        row.get(2)?,
        row.get(3)?,
        row.get(4)?,
        row.get(5)?,
        row.get(6)?,
    ))
}

fn to_job(j: JobRow) -> Result<JobRecord, StoreError> {
    Ok(JobRecord {
        id: j.0,
        tool_id: j.1,
        tool_version: j.2,
        owner: j.3,
        config: serde_json::from_str(&j.4)?,
        lifecycle: serde_json::from_str(&j.5)?,
        created_at: j.6,
    })
}

type GrantRow = (String, String, String, String, String, String, String);

fn grant_row(row: &rusqlite::Row<'_>) -> rusqlite::Result<GrantRow> {
    Ok((
        row.get(0)?,
        row.get(1)?,
        row.get(2)?,
        row.get(3)?,
        row.get(4)?,
        row.get(5)?,
        row.get(6)?,
    ))
}

fn to_grant(g: GrantRow) -> Result<GrantRecord, StoreError> {
    let bad = |what: &str, v: &str| StoreError::NotFound(format!("stored {what} {v:?}"));
    Ok(GrantRecord {
        id: g.0,
        principal: g.1,
        resource_kind: ResourceKind::parse(&g.2).ok_or_else(|| bad("resource kind", &g.2))?,
        resource_id: g.3,
        role: Role::parse(&g.4).ok_or_else(|| bad("role", &g.4))?,
        granted_by: g.5,
        created_at: g.6,
    })
}

const GRANT_COLS: &str = "id, principal, resource_kind, resource_id, role, granted_by, created_at";
const JOB_COLS: &str = "id, tool_id, tool_version, owner, config_json, lifecycle_json, created_at";
const TOOL_COLS: &str = "id, version, spec_json, author, created_at, updated_at";

fn managers(tx: &Connection, kind: ResourceKind, id: &str) -> Result<usize, StoreError> {
    let n: i64 = tx.query_row(
        "SELECT COUNT(*) FROM grants WHERE resource_kind = ?1 AND resource_id = ?2 AND role = 'manage'",
        params![kind.as_str(), id],
        |r| r.get(0),
    )?;
    Ok(n as usize)
}

fn insert_grant(
    tx: &Connection,
    principal: &str,
    kind: ResourceKind,
    id: &str,
    role: Role,
    by: &str,
) -> Result<GrantRecord, StoreError> {
    let g = GrantRecord {
        id: new_id("grant"),
        principal: principal.into(),
        resource_kind: kind,
        resource_id: id.into(),
        role,
        granted_by: by.into(),
        created_at: now(),
    };
    tx.execute(
        &format!("INSERT INTO grants ({GRANT_COLS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)"),
        params![g.id, g.principal, kind.as_str(), g.resource_id, role.as_str(), g.granted_by, g.created_at],
    )?;
    Ok(g)
}

impl Store {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        Self::init(conn)
    }

    pub fn in_memory() -> Result<Self, StoreError> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self, StoreError> {
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Store { conn: Mutex::new(conn) })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Stores a new tool at version 1 and gives its author manage.
    pub fn create_tool(&self, spec: &ToolSpec, author: &str) -> Result<ToolRecord, StoreError> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let at = now();
        let rec = ToolRecord {
            id: new_id("tool"),
            version: 1,
            spec: spec.clone(),
            author: author.into(),
            created_at: at.clone(),
            updated_at: at,
        };
        tx.execute(
            &format!("INSERT INTO tools ({TOOL_COLS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6)"),
            params![
                rec.id,
                rec.version,
                serde_json::to_string(spec)?,
                rec.author,
                rec.created_at,
                rec.updated_at
            ],
        )?;
        insert_grant(&tx, author, ResourceKind::Tool, &rec.id, Role::Manage, author)?;
        tx.commit()?;
        Ok(rec)
    }

    /// Replaces the spec when the stored version equals `expected_version`.
    pub fn update_tool(&self, id: &str, spec: &ToolSpec, expected_version: u32) -> Result<ToolRecord, StoreError> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let current = tx
            .query_row(&format!("SELECT {TOOL_COLS} FROM tools WHERE id = ?1"), [id], tool_row)
            .optional()?
            .ok_or_else(|| StoreError::NotFound(format!("tool {id}")))?;
        let mut rec = to_tool(current)?;
        if rec.version != expected_version {
            return Err(StoreError::Conflict {
                expected: expected_version,
                current: rec.version,
            });
        }
        rec.version += 1;
        rec.spec = spec.clone();
        rec.updated_at = now();
        tx.execute(
            "UPDATE tools SET version = ?2, spec_json = ?3, updated_at = ?4 WHERE id = ?1",
            params![id, rec.version, serde_json::to_string(spec)?, rec.updated_at],
        )?;
        tx.commit()?;
        Ok(rec)
    }

    pub fn get_tool(&self, id: &str) -> Result<Option<ToolRecord>, StoreError> {
        let conn = self.lock();
        let row = conn
            .query_row(&format!("SELECT {TOOL_COLS} FROM tools WHERE id = ?1"), [id], tool_row)
            .optional()?;
        row.map(to_tool).transpose()
    }

    pub fn list_tools(&self) -> Result<Vec<ToolRecord>, StoreError> {
        let conn = self.lock();
        let mut stmt = conn.prepare(&format!("SELECT {TOOL_COLS} FROM tools ORDER BY created_at, id"))?;
        let rows = stmt.query_map([], tool_row)?.collect::<Result<Vec<_>, _>>()?;
        rows.into_iter().map(to_tool).collect()
    }

    pub fn exists(&self, kind: ResourceKind, id: &str) -> Result<bool, StoreError> {
        let table = match kind {
            ResourceKind::Tool => "tools",
            ResourceKind::Job => "jobs",
        };
        let conn = self.lock();
        let n: i64 = conn.query_row(&format!("SELECT COUNT(*) FROM {table} WHERE id = ?1"), [id], |r| r.get(0))?;
        Ok(n > 0)
    }

    pub fn role_of(&self, principal: &str, kind: ResourceKind, id: &str) -> Result<Option<Role>, StoreError> {
        let conn = self.lock();
        let mut stmt =
            conn.prepare("SELECT role FROM grants WHERE principal = ?1 AND resource_kind = ?2 AND resource_id = ?3")?;
        let roles = stmt
            .query_map(params![principal, kind.as_str(), id], |r| r.get::<_, String>(0))?
            .collect::<Result<Vec<_>, _>>()?;
        Ok(effective_role(roles.iter().filter_map(|r| Role::parse(r))))
    }

    /// Sets the principal's role on a resource, replacing any earlier one.
    /// Demoting the last manager is refused.
    pub fn grant(
        &self,
        principal: &str,
        kind: ResourceKind,
        id: &str,
        role: Role,
        by: &str,
    ) -> Result<GrantRecord, StoreError> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let existing = tx
            .query_row(
                &format!(
                    "SELECT {GRANT_COLS} FROM grants WHERE principal = ?1 AND resource_kind = ?2 AND resource_id = ?3"
                ),
                params![principal, kind.as_str(), id],
                grant_row,
            )
            .optional()?
            .map(to_grant)
            .transpose()?;
        let rec = match existing {
            Some(mut g) => {
                let count = managers(&tx, kind, id)?;
                if !keeps_a_manager(count, Some(g.role), Some(role)) {
                    return Err(StoreError::LastManager);
                }
                g.role = role;
                g.granted_by = by.into();
                tx.execute(
                    "UPDATE grants SET role = ?2, granted_by = ?3 WHERE id = ?1",
                    params![g.id, role.as_str(), by],
                )?;
                g
            }
            None => insert_grant(&tx, principal, kind, id, role, by)?,
        };
        tx.commit()?;
        Ok(rec)
    }

    pub fn get_grant(&self, grant_id: &str) -> Result<Option<GrantRecord>, StoreError> {
        let conn = self.lock();
        conn.query_row(
            &format!("SELECT {GRANT_COLS} FROM grants WHERE id = ?1"),
            [grant_id],
            grant_row,
        )
        .optional()?
        .map(to_grant)
        .transpose()
    }

    pub fn grants_for(&self, kind: ResourceKind, id: &str) -> Result<Vec<GrantRecord>, StoreError> {
        let conn = self.lock();
        let mut stmt = conn.prepare(&format!(
            "SELECT {GRANT_COLS} FROM grants WHERE resource_kind = ?1 AND resource_id = ?2 ORDER BY created_at, id"
        ))?;
        let rows = stmt.query_map(params![kind.as_str(), id], grant_row)?.collect::<Result<Vec<_>, _>>()?;
        rows.into_iter().map(to_grant).collect()
    }

    /// Removes a grant unless it is the resource's last manage grant.
    pub fn revoke(&self, grant_id: &str) -> Result<GrantRecord, StoreError> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let g = tx
            .query_row(
                &format!("SELECT {GRANT_COLS} FROM grants WHERE id = ?1"),
                [grant_id],
                grant_row,
            )
            .optional()?
            .map(to_grant)
            .transpose()?
            .ok_or_else(|| StoreError::NotFound(format!("grant {grant_id}")))?;
        let count = managers(&tx, g.resource_kind, &g.resource_id)?;
        if !keeps_a_manager(count, Some(g.role), None) {
            return Err(StoreError::LastManager);
        }
        tx.execute("DELETE FROM grants WHERE id = ?1", [grant_id])?;
        tx.commit()?;
        Ok(g)
    }

    /// Stores a queued job and gives its owner manage on it.
    pub fn create_job(
        &self,
        id: &str,
        tool: &ToolRecord,
        owner: &str,
        config: &serde_json::Value,
        lifecycle: &JobLifecycle,
    ) -> Result<JobRecord, StoreError> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let rec = JobRecord {
            id: id.into(),
            tool_id: tool.id.clone(),
            tool_version: tool.version,
            owner: owner.into(),
            config: config.clone(),
            lifecycle: lifecycle.clone(),
            created_at: now(),
        };
        tx.execute(
            &format!("INSERT INTO jobs ({JOB_COLS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)"),
            params![
                rec.id,
                rec.tool_id,
                rec.tool_version,
                rec.owner,
                serde_json::to_string(config)?,
                serde_json::to_string(lifecycle)?,
                rec.created_at
            ],
        )?;
        insert_grant(&tx, owner, ResourceKind::Job, id, Role::Manage, owner)?;
        tx.commit()?;
        Ok(rec)
    }

    /// Applies `f` to the stored lifecycle under the store lock.
    pub fn update_lifecycle<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut JobLifecycle) -> T,
    ) -> Result<(T, JobLifecycle), StoreError> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let text: String = tx
            .query_row("SELECT lifecycle_json FROM jobs WHERE id = ?1", [id], |r| r.get(0))
            .optional()?
            .ok_or_else(|| StoreError::NotFound(format!("job {id}")))?;
        let mut life: JobLifecycle = serde_json::from_str(&text)?;
        let out = f(&mut life);
        tx.execute(
            "UPDATE jobs SET lifecycle_json = ?2 WHERE id = ?1",
            params![id, serde_json::to_string(&life)?],
        )?;
        tx.commit()?;
        Ok((out, life))
    }

    pub fn get_job(&self, id: &str) -> Result<Option<JobRecord>, StoreError> {
        let conn = self.lock();
        conn.query_row(&format!("SELECT {JOB_COLS} FROM jobs WHERE id = ?1"), [id], job_row)
            .optional()?
            .map(to_job)
            .transpose()
    }

    pub fn list_jobs(&self) -> Result<Vec<JobRecord>, StoreError> {
        let conn = self.lock();
        let mut stmt = conn.prepare(&format!("SELECT {JOB_COLS} FROM jobs ORDER BY created_at, id"))?;
        let rows = stmt.query_map([], job_row)?.collect::<Result<Vec<_>, _>>()?;
        rows.into_iter().map(to_job).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use forge_core::schema::{DType, FieldSpec};

    fn spec() -> ToolSpec {
        ToolSpec::new("stroke", "", vec![FieldSpec::new("Occurrence", DType::Boolean).required()])
    }

    #[test]
    fn author_gets_manage_and_versions_bump() {
        let s = Store::in_memory().unwrap();
        let t = s.create_tool(&spec(), "alice").unwrap();
        assert_eq!(s.role_of("alice", ResourceKind::Tool, &t.id).unwrap(), Some(Role::Manage));
        assert_eq!(s.role_of("bob", ResourceKind::Tool, &t.id).unwrap(), None);
        let t2 = s.update_tool(&t.id, &spec(), 1).unwrap();
        assert_eq!(t2.version, 2);
        assert!(matches!(
            s.update_tool(&t.id, &spec(), 1),
            Err(StoreError::Conflict { expected: 1, current: 2 })
        ));
        assert_eq!(s.get_tool(&t.id).unwrap().unwrap().version, 2);
    }

    #[test]
    fn one_role_per_principal_and_a_manager_always_remains() {
        let s = Store::in_memory().unwrap();
        let t = s.create_tool(&spec(), "alice").unwrap();
        let b = s.grant("bob", ResourceKind::Tool, &t.id, Role::Read, "alice").unwrap();
        let b2 = s.grant("bob", ResourceKind::Tool, &t.id, Role::Write, "alice").unwrap();
        assert_eq!(b.id, b2.id);
        assert_eq!(s.grants_for(ResourceKind::Tool, &t.id).unwrap().len(), 2);
        assert_eq!(s.role_of("bob", ResourceKind::Tool, &t.id).unwrap(), Some(Role::Write));

        let alice = s
            .grants_for(ResourceKind::Tool, &t.id)
            .unwrap()
            .into_iter()
            .find(|g| g.principal == "alice")
            .unwrap();
        assert!(matches!(s.revoke(&alice.id), Err(StoreError::LastManager)));
        assert!(matches!(
            s.grant("alice", ResourceKind::Tool, &t.id, Role::Read, "alice"),
            Err(StoreError::LastManager)
        ));
        s.grant("bob", ResourceKind::Tool, &t.id, Role::Manage, "alice").unwrap();
        s.revoke(&alice.id).unwrap();
        assert_eq!(s.role_of("alice", ResourceKind::Tool, &t.id).unwrap(), None);
    }

    #[test]
    fn lifecycle_round_trips() {
        let s = Store::in_memory().unwrap();
        let t = s.create_tool(&spec(), "alice").unwrap();
        let life = JobLifecycle::new(1);
        s.create_job("job-1", &t, "alice", &serde_json::json!({"k": 1}), &life).unwrap();
        let (ok, life) = s
            .update_lifecycle("job-1", |l| l.advance(forge_core::job::JobState::Fetching, 2).is_ok())
            .unwrap();
        assert!(ok);
        assert_eq!(s.get_job("job-1").unwrap().unwrap().lifecycle, life);
        assert_eq!(s.role_of("alice", ResourceKind::Job, "job-1").unwrap(), Some(Role::Manage));
    }
}
