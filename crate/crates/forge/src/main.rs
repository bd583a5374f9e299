use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use forge_core::dates::DateRecognizer;
use forge_core::eval::{aggregate_with, DateGranularity};
use forge_core::schema::{compile_tool, ToolSpec};

use forge::config::{process_env, JobConfig};
use forge::evalio::{read_gold, read_predictions, render_table, write_disagreements, write_metrics, PredictionFields};
use forge::mock::llm::{MockLlm, MockLlmConfig};
use forge::mock::repo::{MockRepo, MockRepoConfig};
use forge::pipeline::{run_job, Hooks, StdoutEvents};
use forge::repo::DEFAULT_TOKEN_ENV;
use forge::sbatch::{render_script, BatchOptions};
use forge::server::{serve, ServerConfig};

#[derive(Parser)]
#[command(name = "forge", version, about = "Schema-driven extraction from clinical notes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the orchestration service.
    Serve(ServeArgs),
    /// Run one extraction job headlessly.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Print lifecycle events as JSON lines on stdout.
        #[arg(long)]
        events: bool,
    },
    /// Tool utilities.
    #[command(subcommand)]
    Tool(ToolCommand),
    /// Score predictions against a gold table.
    Eval(EvalArgs),
    /// Local stand-ins for the repository and model endpoints.
    #[command(subcommand)]
    Mock(MockCommand),
    /// Print a batch-scheduler script for a job config.
    Sbatch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        partition: Option<String>,
        #[arg(long, default_value_t = 1)]
        gpus: u32,
        #[arg(long, default_value_t = 8)]
        cpus: u32,
        #[arg(long, default_value_t = 64)]
        memory_gb: u32,
        #[arg(long, default_value = "24:00:00")]
        time: String,
        #[arg(long, default_value = "forge")]
        forge_bin: String,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    #[arg(long, default_value = "forge-data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "forge-work")]
    work_root: PathBuf,
    /// Enable the bundled test identity provider at /auth/test/login.
    #[arg(long)]
    test_idp: bool,
    /// POSTed a JSON notice when a job finishes.
    #[arg(long)]
    webhook: Option<String>,
    /// Worker binary; defaults to this executable.
    #[arg(long)]
    forge_bin: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ToolCommand {
    /// Print the canonical function-calling document for a tool spec.
    Compile {
        spec: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    disagreements: Option<PathBuf>,
    /// Compare whole dates instead of years.
    #[arg(long)]
    full_date: bool,
    #[arg(long, default_value = "/Occurrence")]
    occurrence_field: String,
    #[arg(long, default_value = "/Date")]
    date_field: String,
    /// Extra date formats in chrono syntax.
    #[arg(long = "date-format")]
    date_formats: Vec<String>,
}

#[derive(Subcommand)]
enum MockCommand {
    /// Serve an in-memory repository.
    Repo {
        #[arg(long, default_value = "127.0.0.1:8701")]
        bind: String,
        #[arg(long)]
        seed_dir: Option<PathBuf>,
        /// Environment variable holding the accepted token.
        #[arg(long, default_value = DEFAULT_TOKEN_ENV)]
        token_env: String,
        #[arg(long = "read-only")]
        read_only: Vec<String>,
        #[arg(long, default_value_t = 0)]
        failing_uploads: usize,
    },
    /// Serve deterministic chat and embedding endpoints.
    Llm {
        #[arg(long, default_value = "127.0.0.1:8702")]
        bind: String,
        /// JSON with `concepts`, `hashed_dims`, `model_ctx`, `script`.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_run(config: &PathBuf, events: bool) -> Result<ExitCode> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let job = JobConfig::from_json(&text).with_context(|| format!("parsing {}", config.display()))?;
    let resolved = match job.resolve(process_env) {
        Ok(r) => r,
        Err(errs) => {
            for e in &errs.0 {
                eprintln!("{}: {}", e.field, e.message);
            }
            // The token is unusable without a valid config; drop it anyway.
            std::env::remove_var(&job.repository.token_env);
            return Ok(ExitCode::from(2));
        }
    };
    let hooks = Hooks {
        events: events.then(|| Arc::new(StdoutEvents) as Arc<dyn forge::pipeline::EventSink>),
        ..Default::default()
    };
    let cancel = hooks.cancel.clone();
    ctrlc::set_handler(move || cancel.store(true, Ordering::SeqCst)).context("installing interrupt handler")?;
    match run_job(&resolved, &hooks) {
        Ok(s) => {
            log::info!(
                "job {} done: {} patients, {} found, {} not found, {} errors",
                s.job_id,
                s.patients,
                s.found,
                s.not_found,
                s.error
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            log::error!("job {} failed: {e}", resolved.job.job_id);
            Ok(ExitCode::FAILURE)
        }
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let gold = read_gold(&a.gold)?;
    let fields = PredictionFields {
        occurrence: a.occurrence_field.clone(),
        date: a.date_field.clone(),
    };
    let preds = read_predictions(&a.pred, &fields)?;
    let granularity = if a.full_date {
        DateGranularity::Full
    } else {
        DateGranularity::Year
    };
    let report = aggregate_with(&gold, &preds, &DateRecognizer::with_formats(a.date_formats.clone()), granularity);
    for w in &report.warnings {
        log::warn!("{w}");
    }
    for (m, g) in &report.unmatched_predictions {
        log::warn!("prediction for ({m}, {g}) has no gold row; excluded");
    }
    print!("{}", render_table(&report));
    if let Some(p) = &a.metrics {
        write_metrics(&report, p)?;
    }
    if let Some(p) = &a.disagreements {
        write_disagreements(&report, p)?;
    }
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

async fn serve_router(router: axum::Router, bind: &str) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Serve(a) => {
            let bin = match a.forge_bin {
                Some(b) => b,
                None => std::env::current_exe()?,
            };
            let mut cfg = ServerConfig::new(a.data_dir, a.work_root, bin).with_env();
            cfg.test_idp = a.test_idp;
            cfg.webhook = a.webhook;
            runtime()?.block_on(serve(cfg, &a.bind))?;
        }
        Command::Run { config, events } => return cmd_run(&config, events),
        Command::Tool(ToolCommand::Compile { spec, output }) => {
            let spec: ToolSpec = read_json(&spec)?;
            let doc = match compile_tool(&spec) {
                Ok(d) => d,
                Err(e) => bail!("{e}"),
            };
            match output {
                Some(p) => std::fs::write(&p, doc.as_str()).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{}", doc.as_str()),
            }
        }
        Command::Eval(a) => cmd_eval(&a)?,
        Command::Mock(MockCommand::Repo {
            bind,
            seed_dir,
            token_env,
            read_only,
            failing_uploads,
        }) => {
            let token = std::env::var(&token_env).with_context(|| format!("{token_env} is not set"))?;
            let repo = MockRepo::new(MockRepoConfig {
                token,
                read_only_prefixes: read_only,
                failing_uploads,
            });
            if let Some(d) = seed_dir {
                let n = repo.seed_dir(&d)?;
                log::info!("seeded {n} files from {}", d.display());
            }
            runtime()?.block_on(serve_router(repo.router(), &bind))?;
        }
        Command::Mock(MockCommand::Llm { bind, config }) => {
            let cfg: MockLlmConfig = match config {
                Some(p) => read_json(&p)?,
                None => MockLlmConfig::default(),
            };
            runtime()?.block_on(serve_router(MockLlm::new(cfg).router(), &bind))?;
        }
        Command::Sbatch {
            config,
            partition,
            gpus,
            cpus,
            memory_gb,
            time,
            forge_bin,
        } => {
            let job: JobConfig = read_json(&config)?;
            let opts = BatchOptions {
                partition,
                gpus,
                cpus,
                memory_gb,
                time_limit: time,
                forge_bin,
            };
            print!("{}", render_script(&job, &config.to_string_lossy(), &opts));
        }
    }
    Ok(ExitCode::SUCCESS)
}
