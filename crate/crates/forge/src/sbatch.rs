//! Batch-scheduler submission scripts for running a job on a cluster.
//!
//! The script never carries the repository token. It expects the variable
//! to be present in the submitting environment and exported to the job.

use crate::config::JobConfig;

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub partition: Option<String>,
    pub gpus: u32,
    pub cpus: u32,
    pub memory_gb: u32,
    pub time_limit: String,
    /// Path of the `forge` binary on the cluster.
    pub forge_bin: String,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            partition: None,
            gpus: 1,
            cpus: 8,
            memory_gb: 64,
            time_limit: "24:00:00".into(),
            forge_bin: "forge".into(),
        }
    }
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// A submission script running `forge run` against `config_path`.
pub fn render_script(job: &JobConfig, config_path: &str, opts: &BatchOptions) -> String {
    let name: String = job
        .job_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let token_env = &job.repository.token_env;
    let mut s = String::from("#!/bin/bash\n");
    s.push_str(&format!("#SBATCH --job-name=forge-{name}\n"));
    if let Some(p) = &opts.partition {
        s.push_str(&format!("#SBATCH --partition={p}\n"));
    }
    if opts.gpus > 0 {
        s.push_str(&format!("#SBATCH --gres=gpu:{}\n", opts.gpus));
    }
    s.push_str(&format!("#SBATCH --cpus-per-task={}\n", opts.cpus));
    s.push_str(&format!("#SBATCH --mem={}G\n", opts.memory_gb));
    s.push_str(&format!("#SBATCH --time={}\n", opts.time_limit));
    s.push_str(&format!("#SBATCH --output=forge-{name}-%j.log\n"));
    s.push_str(&format!("#SBATCH --export=ALL,{token_env}\n"));
    s.push_str("set -euo pipefail\n\n");
    s.push_str(&format!(
        "if [ -z \"${{{token_env}:-}}\" ]; then\n  echo \"{token_env} is not set\" >&2\n  exit 2\nfi\n\n"
    ));
    s.push_str(&format!(
        "exec {} run --config {} --events\n",
        shell_quote(&opts.forge_bin),
        shell_quote(config_path)
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_references_but_never_embeds_the_token() {
        let job = crate::config::tests::sample();
        std::env::set_var("SBATCH_TEST_SECRET", "tok-123");
        let s = render_script(&job, "/jobs/a b/job.json", &BatchOptions::default());
        assert!(s.starts_with("#!/bin/bash\n#SBATCH --job-name=forge-"));
        assert!(s.contains("'/jobs/a b/job.json'"));
        assert!(s.contains(&format!("${{{}:-}}", job.repository.token_env)));
        assert!(!s.contains("tok-123"));
    }
}
