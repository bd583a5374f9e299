//! Ascending read/write/manage roles over tools and jobs.

use core::fmt;

use serde::{Deserialize, Serialize};

/// Roles ascend: `Write` implies `Read`, `Manage` implies `Write`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Read,
    Write,
    Manage,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Read, Role::Write, Role::Manage];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Read => "read",
            Role::Write => "write",
            Role::Manage => "manage",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    View,
    Run,
    Edit,
    Grant,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::View, Action::Run, Action::Edit, Action::Grant];

    /// Least role permitting the action.
    pub fn required_role(self) -> Role {
        match self {
            Action::View | Action::Run => Role::Read,
            Action::Edit => Role::Write,
            Action::Grant => Role::Manage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKind {
    Tool,
    Job,
}

impl ResourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ResourceKind::Tool => "tool",
            ResourceKind::Job => "job",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tool" => Some(ResourceKind::Tool),
            "job" => Some(ResourceKind::Job),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny,
}

/// Default-deny check of an effective role against an action.
pub fn check(effective: Option<Role>, action: Action) -> Decision {
    match effective {
        Some(role) if role >= action.required_role() => Decision::Allow,
        _ => Decision::Deny,
    }
}

/// The strongest of several roles.
pub fn effective_role<I: IntoIterator<Item = Role>>(roles: I) -> Option<Role> {
    roles.into_iter().max()
}

/// Whether changing one principal's role on a resource keeps at least one
/// manager. `managers` is the current number of manage grants, `current` the
/// principal's present role and `next` its role afterwards (`None` revokes).
pub fn keeps_a_manager(managers: usize, current: Option<Role>, next: Option<Role>) -> bool {
    let losing = current == Some(Role::Manage) && next != Some(Role::Manage);
    !losing || managers > 1
}
