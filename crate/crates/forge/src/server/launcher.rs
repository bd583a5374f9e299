//! Starts worker processes and folds their events into the job record.

use std::path::PathBuf;
use std::process::Stdio;
use std::sync::Arc;

use forge_core::job::{JobLifecycle, JobState};
use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::process::Command;
use zeroize::Zeroizing;

use super::store::Store;
use crate::pipeline::JobEvent;

#[derive(Debug, Clone)]
pub struct Launcher {
    pub forge_bin: PathBuf,
    /// Worker scratch space. Kept apart from the orchestrator's data dir
    /// because it holds patient data.
    pub work_root: PathBuf,
    pub webhook: Option<String>,
}

pub struct Launch {
    pub job_id: String,
    pub config_path: PathBuf,
    pub token_env: String,
    pub token: Zeroizing<String>,
}

fn now_ms() -> i64 {
    chrono::Utc::now().timestamp_millis()
}

/// Applies one worker event. Events that would break the state machine
/// are logged and dropped.
pub fn apply_event(life: &mut JobLifecycle, event: &JobEvent) {
    let outcome = match event {
        JobEvent::State { state, at_ms } => {
            if *state == JobState::Queued {
                Ok(())
            } else {
                life.advance(*state, *at_ms)
            }
        }
        JobEvent::Progress { progress } => {
            life.progress = *progress;
            Ok(())
        }
        JobEvent::Warning { .. } => Ok(()),
        JobEvent::Purged { .. } => {
            life.mark_purged();
            Ok(())
        }
        JobEvent::Done { .. } => life.advance(JobState::Done, now_ms()),
        JobEvent::Failed { reason } => life.fail(reason, now_ms()),
    };
    if let Err(e) = outcome {
        log::warn!("ignoring worker event: {e}");
    }
}

/// After the worker exits its environment, and the token with it, is gone.
pub fn finish(life: &mut JobLifecycle, status: &str) {
    life.mark_purged();
    if !life.state.is_terminal() {
        let _ = life.fail(&format!("worker exited ({status}) before finishing"), now_ms());
    }
}

impl Launcher {
    /// Spawns `forge run` for the job. The token exists only in the child's
    /// environment; the returned task owns the child until it exits.
    pub fn launch(&self, store: Arc<Store>, launch: Launch) -> std::io::Result<tokio::task::JoinHandle<()>> {
        let dir = self.work_root.join(&launch.job_id);
        std::fs::create_dir_all(&dir)?;
        let log = std::fs::File::create(dir.join("worker.log"))?;
        let mut cmd = Command::new(&self.forge_bin);
        cmd.arg("run")
            .arg("--config")
            .arg(&launch.config_path)
            .arg("--events")
            .env(&launch.token_env, launch.token.as_str())
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::from(log));
        let mut child = cmd.spawn()?;
        drop(cmd);
        drop(launch.token);
        let stdout = child.stdout.take();
        let job_id = launch.job_id;
        let webhook = self.webhook.clone();
        Ok(tokio::spawn(async move {
            if let Some(out) = stdout {
                let mut lines = BufReader::new(out).lines();
                while let Ok(Some(line)) = lines.next_line().await {
                    let Ok(event) = serde_json::from_str::<JobEvent>(&line) else {
                        continue;
                    };
                    if let Err(e) = store.update_lifecycle(&job_id, |l| apply_event(l, &event)) {
                        log::error!("job {job_id}: {e}");
                    }
                }
            }
            let status = match child.wait().await {
                Ok(s) => s.to_string(),
                Err(e) => e.to_string(),
            };
            match store.update_lifecycle(&job_id, |l| finish(l, &status)) {
                Ok((_, life)) => {
                    log::info!("job {job_id} finished as {}", life.state.as_str());
                    if let Some(url) = webhook {
                        notify(&url, &job_id, &life).await;
                    }
                }
                Err(e) => log::error!("job {job_id}: {e}"),
            }
        }))
    }
}

async fn notify(url: &str, job_id: &str, life: &JobLifecycle) {
    let body = serde_json::json!({
        "job_id": job_id,
        "state": life.state,
        "failure": life.failure,
    });
    let sent = reqwest::Client::new().post(url).json(&body).send().await;
    if let Err(e) = sent.and_then(|r| r.error_for_status()) {
        log::warn!("webhook for job {job_id}: {}", e.without_url());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use forge_core::job::JobProgress;

    #[test]
    fn events_drive_the_lifecycle() {
        let mut l = JobLifecycle::new(0);
        for (i, s) in [JobState::Fetching, JobState::Indexing, JobState::Extracting, JobState::Exporting]
            .into_iter()
            .enumerate()
        {
            apply_event(&mut l, &JobEvent::State { state: s, at_ms: i as i64 });
        }
        apply_event(
            &mut l,
            &JobEvent::Progress {
                progress: JobProgress {
                    patients_total: 2,
                    patients_done: 2,
                    found: 1,
                    not_found: 1,
                    error: 0,
                },
            },
        );
        apply_event(&mut l, &JobEvent::Done { summary: Default::default() });
        assert_eq!(l.state, JobState::Exporting, "done before purge is refused");
        apply_event(&mut l, &JobEvent::Purged { at_ms: 9 });
        apply_event(&mut l, &JobEvent::Done { summary: Default::default() });
        assert_eq!(l.state, JobState::Done);
        assert_eq!(l.progress.found, 1);
        finish(&mut l, "exit status: 0");
        assert_eq!(l.state, JobState::Done);
    }

    #[test]
    fn crashed_worker_fails_the_job() {
        let mut l = JobLifecycle::new(0);
        apply_event(&mut l, &JobEvent::State { state: JobState::Fetching, at_ms: 1 });
        finish(&mut l, "signal: 9");
        assert_eq!(l.state, JobState::Failed);
        assert!(l.credential_purged);
        assert!(l.failure.as_deref().unwrap().contains("signal: 9"));
    }
}
