//! Extraction job lifecycle.
//!
//! ```text
//! queued -> fetching -> indexing -> extracting -> exporting -> done
//!    \__________\___________\____________\___________\-----> failed
//! ```
//!
//! Terminal states absorb, and neither may be entered before the repository
//! credential has been purged.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Fetching,
    Indexing,
    Extracting,
    Exporting,
    Done,
    Failed,
}

impl JobState {
    pub const ALL: [JobState; 7] = [
        JobState::Queued,
        JobState::Fetching,
        JobState::Indexing,
        JobState::Extracting,
        JobState::Exporting,
        JobState::Done,
        JobState::Failed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Fetching => "fetching",
            JobState::Indexing => "indexing",
            JobState::Extracting => "extracting",
            JobState::Exporting => "exporting",
            JobState::Done => "done",
            JobState::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        JobState::ALL.into_iter().find(|st| st.as_str() == s)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    /// The next state on the success path.
    pub fn successor(self) -> Option<JobState> {
        match self {
            JobState::Queued => Some(JobState::Fetching),
            JobState::Fetching => Some(JobState::Indexing),
            JobState::Indexing => Some(JobState::Extracting),
            JobState::Extracting => Some(JobState::Exporting),
            JobState::Exporting => Some(JobState::Done),
            JobState::Done | JobState::Failed => None,
        }
    }

    pub fn can_transition(self, to: JobState) -> bool {
        !self.is_terminal() && (to == JobState::Failed || self.successor() == Some(to))
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransitionError {
    #[error("illegal transition {from} -> {to}")]
    Illegal { from: JobState, to: JobState },
    #[error("cannot enter {to} before the credential is purged")]
    CredentialLive { to: JobState },
}

/// Worker-side progress counters; never contain patient data.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobProgress {
    pub patients_total: u64,
    pub patients_done: u64,
    pub found: u64,
    pub not_found: u64,
    pub error: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub state: JobState,
    /// Milliseconds since the Unix epoch.
    pub at_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobLifecycle {
    pub state: JobState,
    pub transitions: Vec<Transition>,
    pub failure: Option<String>,
    pub credential_purged: bool,
    pub progress: JobProgress,
}

impl JobLifecycle {
    pub fn new(at_ms: i64) -> Self {
        JobLifecycle {
            state: JobState::Queued,
            transitions: alloc::vec![Transition {
                state: JobState::Queued,
                at_ms,
            }],
            failure: None,
            credential_purged: false,
            progress: JobProgress::default(),
        }
    }

    pub fn mark_purged(&mut self) {
        self.credential_purged = true;
    }

    pub fn advance(&mut self, to: JobState, at_ms: i64) -> Result<(), TransitionError> {
        if !self.state.can_transition(to) {
            return Err(TransitionError::Illegal { from: self.state, to });
        }
        if to.is_terminal() && !self.credential_purged {
            return Err(TransitionError::CredentialLive { to });
        }
        self.state = to;
        self.transitions.push(Transition { state: to, at_ms });
        Ok(())
    }

    pub fn fail(&mut self, reason: &str, at_ms: i64) -> Result<(), TransitionError> {
        self.advance(JobState::Failed, at_ms)?;
        self.failure = Some(reason.to_string());
        Ok(())
    }

    pub fn entered_at(&self, state: JobState) -> Option<i64> {
        self.transitions.iter().find(|t| t.state == state).map(|t| t.at_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn happy_path() {
        let mut job = JobLifecycle::new(0);
        for (i, st) in [JobState::Fetching, JobState::Indexing, JobState::Extracting, JobState::Exporting]
            .into_iter()
            .enumerate()
        {
            job.advance(st, i as i64 + 1).unwrap();
        }
        assert_eq!(
            job.advance(JobState::Done, 9),
            Err(TransitionError::CredentialLive { to: JobState::Done })
        );
        job.mark_purged();
        job.advance(JobState::Done, 9).unwrap();
        assert_eq!(job.transitions.len(), 6);
        assert_eq!(job.entered_at(JobState::Done), Some(9));
    }

    #[test]
    fn only_declared_edges() {
        for from in JobState::ALL {
            for to in JobState::ALL {
                let expected = !from.is_terminal() && (to == JobState::Failed || from.successor() == Some(to));
                assert_eq!(from.can_transition(to), expected, "{from} -> {to}");
            }
        }
        assert!(!JobState::Queued.can_transition(JobState::Indexing));
        assert!(!JobState::Done.can_transition(JobState::Failed));
        assert!(!JobState::Failed.can_transition(JobState::Failed));
    }

    #[test]
    fn terminal_states_absorb() {
        let mut job = JobLifecycle::new(0);
        job.mark_purged();
        job.fail("repository refused credential", 1).unwrap();
        assert_eq!(job.failure.as_deref(), Some("repository refused credential"));
        assert!(job.advance(JobState::Fetching, 2).is_err());
        assert!(job.fail("again", 3).is_err());
    }
}
