//! The headless worker: fetch, index, extract, reconcile, checkpoint, export.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use forge_core::corpus::{consolidate, group_by_mrn, CleaningRules, ConsolidatedReport};
use forge_core::dates::DateRecognizer;
use forge_core::extract::{
    context_budget, reconcile, search_term_prompt, terms_from_reply, ExtractionResult, FeatureGroup, PartialOutput,
    ResultStatus, SearchTermSet, CORRECTION_NOTE,
};
use forge_core::job::{JobLifecycle, JobProgress, JobState};
use forge_core::schema::{compile_tool, ToolSchemaDocument, Verdict};
use forge_core::text::{chunk_text, estimate_tokens};
use forge_core::vector::{chunk_for_embedding, l2_normalize, select_entries, FlatIndex, UnitVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{export_results, CheckpointError, CheckpointLog};
use crate::config::{ConfigErrors, ResolvedConfig};
use crate::index_store::{load_index, save_index, IndexStoreError};
use crate::ingest::{load_table, IngestError};
use crate::llm::{ChatMessage, ChatModel, ChatReply, Embedder, HttpChat, HttpEmbedder, LlmError, RetryPolicy};
use crate::repo::{
    AuditLog, CredentialError, FileKind, PurgeGuard, RepoClient, RepoCredential, RepoError, TransferReceipt,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JobEvent {
    State { state: JobState, at_ms: i64 },
    Progress { progress: JobProgress },
    Warning { message: String },
    Purged { at_ms: i64 },
    Done { summary: JobSummary },
    Failed { reason: String },
}

pub trait EventSink: Send + Sync {
    fn emit(&self, event: &JobEvent);
}

/// Prints each event as one JSON line on stdout.
pub struct StdoutEvents;

impl EventSink for StdoutEvents {
    fn emit(&self, event: &JobEvent) {
        if let Ok(line) = serde_json::to_string(event) {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{line}");
            let _ = out.flush();
        }
    }
}

/// Collects events in memory.
#[derive(Default)]
pub struct RecordedEvents(pub Mutex<Vec<JobEvent>>);

impl EventSink for RecordedEvents {
    fn emit(&self, event: &JobEvent) {
        self.0.lock().unwrap_or_else(|p| p.into_inner()).push(event.clone());
    }
}

pub type PatientHook = Box<dyn Fn(usize) + Send + Sync>;

#[derive(Default)]
pub struct Hooks {
    pub events: Option<Arc<dyn EventSink>>,
    /// When set, no further patients are started; in-flight ones finish.
    pub cancel: Arc<AtomicBool>,
    /// Called with the number of patients finished so far in this run.
    pub on_patient_done: Option<PatientHook>,
}

impl Hooks {
    fn emit(&self, event: JobEvent) {
        if let Some(sink) = &self.events {
            sink.emit(&event);
        }
    }
}

pub struct Services {
    pub chat: Arc<dyn ChatModel>,
    pub embed: Arc<dyn Embedder>,
}

impl Services {
    pub fn http(cfg: &ResolvedConfig) -> Self {
        let retry = RetryPolicy::default();
        Services {
            chat: Arc::new(HttpChat::new(
                &cfg.chat_url,
                &cfg.chat_model,
                retry,
                Duration::from_secs(cfg.job.chat.timeout_secs),
            )),
            embed: Arc::new(HttpEmbedder::new(
                &cfg.embed_url,
                &cfg.embed_model,
                retry,
                Duration::from_secs(cfg.job.embed.timeout_secs),
                cfg.job.embed.batch_size,
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: String,
    pub patients: usize,
    pub pairs: usize,
    /// Pairs extracted in this run; the rest came from the checkpoint.
    pub processed: usize,
    pub found: usize,
    pub not_found: usize,
    pub error: usize,
    pub rejected_rows: usize,
    pub result_rows: u64,
    pub results_file: PathBuf,
    pub upload: Option<TransferReceipt>,
}

#[derive(Debug, thiserror::Error)]
pub enum JobError {
    #[error(transparent)]
    Config(#[from] ConfigErrors),
    #[error(transparent)]
    Credential(#[from] CredentialError),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Index(#[from] IndexStoreError),
    #[error("{what}: {source}")]
    Endpoint { what: &'static str, source: LlmError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("interrupted after {0} patients")]
    Interrupted(usize),
    #[error("{0}")]
    Other(String),
}

fn now_ms() -> i64 {
    chrono::Utc::now().timestamp_millis()
}

/// A filesystem-safe directory name for an identifier.
pub fn safe_name(id: &str) -> String {
    let simple = !id.is_empty()
        && id.len() <= 64
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
    if simple {
        id.to_string()
    } else {
        format!("x{}", &hex::encode(Sha256::digest(id.as_bytes()))[..32])
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> JobError + '_ {
    move |source| JobError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs the job against HTTP endpoints from the configuration.
pub fn run_job(cfg: &ResolvedConfig, hooks: &Hooks) -> Result<JobSummary, JobError> {
    run_job_with(cfg, &Services::http(cfg), hooks)
}

/// Runs the job with the given model services. The repository credential
/// is read from the environment and purged before the terminal state is
/// entered, whatever the outcome.
pub fn run_job_with(cfg: &ResolvedConfig, services: &Services, hooks: &Hooks) -> Result<JobSummary, JobError> {
    let mut life = JobLifecycle::new(now_ms());
    hooks.emit(JobEvent::State {
        state: JobState::Queued,
        at_ms: life.transitions[0].at_ms,
    });
    let cred = RepoCredential::from_env(&cfg.job.repository.token_env).map(Arc::new);
    let outcome = match &cred {
        Ok(cred) => {
            let guard = PurgeGuard::new(cred.clone());
            let r = run_phases(cfg, services, hooks, guard.credential(), &mut life);
            drop(guard);
            r
        }
        Err(e) => {
            std::env::remove_var(&cfg.job.repository.token_env);
            Err(JobError::Credential(e.clone()))
        }
    };
    life.mark_purged();
    hooks.emit(JobEvent::Purged { at_ms: now_ms() });
    match outcome {
        Ok(summary) => {
            let at = now_ms();
            life.advance(JobState::Done, at).map_err(|e| JobError::Other(e.to_string()))?;
            hooks.emit(JobEvent::Done {
                summary: summary.clone(),
            });
            Ok(summary)
        }
        Err(e) => {
            let reason = e.to_string();
            let _ = life.fail(&reason, now_ms());
            hooks.emit(JobEvent::Failed { reason });
            Err(e)
        }
    }
}

fn advance(life: &mut JobLifecycle, hooks: &Hooks, state: JobState) -> Result<(), JobError> {
    let at = now_ms();
    life.advance(state, at).map_err(|e| JobError::Other(e.to_string()))?;
    hooks.emit(JobEvent::State { state, at_ms: at });
    Ok(())
}

fn warn(hooks: &Hooks, message: String) {
    log::warn!("{message}");
    hooks.emit(JobEvent::Warning { message });
}

struct Shared<'a> {
    cfg: &'a ResolvedConfig,
    services: &'a Services,
    doc: ToolSchemaDocument,
    dates: DateRecognizer,
    today: String,
}

fn run_phases(
    cfg: &ResolvedConfig,
    services: &Services,
    hooks: &Hooks,
    cred: &Arc<RepoCredential>,
    life: &mut JobLifecycle,
) -> Result<JobSummary, JobError> {
    let job = &cfg.job;
    let work = &cfg.work_dir;
    fs::create_dir_all(work).map_err(io_err(work))?;
    let doc = compile_tool(&job.tool).map_err(|e| JobError::Other(e.to_string()))?;

    advance(life, hooks, JobState::Fetching)?;
    let audit_path = work.join("audit.jsonl");
    let audit = Arc::new(AuditLog::open(&audit_path).map_err(io_err(&audit_path))?);
    let client = RepoClient::new(
        &cfg.repo_url,
        cred.clone(),
        audit,
        job.repository.allow_insecure,
        RetryPolicy::default(),
    )?;
    let inputs = client.fetch_files(&job.inputs, &work.join("inputs"))?;

    advance(life, hooks, JobState::Indexing)?;
    let mut rows = Vec::new();
    let mut rejected = 0;
    for (local, r) in inputs.iter().zip(&job.inputs) {
        if r.kind != FileKind::InputTable {
            continue;
        }
        let table = load_table(local, &job.ingest)?;
        for w in &table.warnings {
            warn(hooks, format!("{}: {w}", r.path));
        }
        for rej in &table.rejects {
            warn(hooks, format!("{}: rejected line {}: {}", r.path, rej.line, rej.reason));
        }
        rejected += table.rejects.len();
        rows.extend(table.rows);
    }
    let mut rules = CleaningRules::defaults();
    if let Some(extra) = &job.cleaning_rules {
        rules.extend(CleaningRules::parse(extra).map_err(|e| JobError::Other(e.to_string()))?);
    }
    let reports: Vec<ConsolidatedReport> = group_by_mrn(rows)
        .into_iter()
        .map(|(mrn, rows)| consolidate(&mrn, &rows, &rules))
        .collect();

    let checkpoint = CheckpointLog::open(&work.join("checkpoint.csv"))?;
    for w in checkpoint.warnings() {
        warn(hooks, w.clone());
    }
    let pending: Vec<(usize, Vec<usize>)> = reports
        .iter()
        .enumerate()
        .filter_map(|(i, rep)| {
            let groups: Vec<usize> = (0..cfg.groups.len())
                .filter(|&g| !checkpoint.contains(&rep.mrn, &cfg.groups[g].group_id))
                .collect();
            (!groups.is_empty()).then_some((i, groups))
        })
        .collect();
    let pair_count = reports.len() * cfg.groups.len();
    let mut progress = JobProgress {
        patients_total: reports.len() as u64,
        patients_done: (reports.len() - pending.len()) as u64,
        ..Default::default()
    };
    let relevant: BTreeSet<(&str, &str)> = reports
        .iter()
        .flat_map(|r| cfg.groups.iter().map(move |g| (r.mrn.as_str(), g.group_id.as_str())))
        .collect();
    for r in checkpoint.results() {
        if relevant.contains(&(r.mrn.as_str(), r.group_id.as_str())) {
            count_status(&mut progress, r.status);
        }
    }
    hooks.emit(JobEvent::Progress { progress });

    let shared = Shared {
        cfg,
        services,
        doc,
        dates: DateRecognizer::with_formats(job.date_formats.clone()),
        today: job
            .today
            .clone()
            .unwrap_or_else(|| chrono::Utc::now().date_naive().format("%Y-%m-%d").to_string()),
    };

    let checkpoint = Mutex::new(checkpoint);
    let mut processed = 0;
    if !pending.is_empty() {
        let needed: BTreeSet<usize> = pending.iter().flat_map(|(_, g)| g.iter().copied()).collect();
        let term_vectors = prepare_terms(&shared, &needed, hooks)?;

        let indices = build_indices(&shared, &reports, &pending, hooks)?;

        advance(life, hooks, JobState::Extracting)?;
        let progress = Mutex::new(progress);
        let done_here = AtomicUsize::new(0);
        let failure: Mutex<Option<JobError>> = Mutex::new(None);
        let stop = AtomicBool::new(false);
        parallel_for(&pending, job.workers, |(report_idx, groups)| {
            if stop.load(Ordering::SeqCst) || hooks.cancel.load(Ordering::SeqCst) {
                return;
            }
            let report = &reports[*report_idx];
            let index = indices.get(report_idx).and_then(|r| r.as_ref().ok());
            for &g in groups {
                let group = &cfg.groups[g];
                let result = match indices.get(report_idx) {
                    Some(Err(detail)) => Ok(ExtractionResult::error(
                        &report.mrn,
                        &group.group_id,
                        &cfg.chat_model,
                        cfg.threshold,
                        detail.clone(),
                    )),
                    _ => process_group(&shared, report, index, group, &term_vectors[&g]),
                };
                let result = match result {
                    Ok(r) => r,
                    Err(e) => {
                        failure.lock().unwrap().get_or_insert(e);
                        stop.store(true, Ordering::SeqCst);
                        return;
                    }
                };
                if let Some(d) = &result.detail {
                    log::info!("({}, {}) {}: {d}", report.mrn, group.group_id, result.status.as_str());
                }
                let appended = checkpoint.lock().unwrap().append(&result);
                if let Err(e) = appended {
                    failure.lock().unwrap().get_or_insert(e.into());
                    stop.store(true, Ordering::SeqCst);
                    return;
                }
                count_status(&mut progress.lock().unwrap(), result.status);
            }
            let snapshot = {
                let mut p = progress.lock().unwrap();
                p.patients_done += 1;
                *p
            };
            hooks.emit(JobEvent::Progress { progress: snapshot });
            let n = done_here.fetch_add(1, Ordering::SeqCst) + 1;
            if let Some(hook) = &hooks.on_patient_done {
                hook(n);
            }
        });
        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        processed = done_here.load(Ordering::SeqCst);
        if hooks.cancel.load(Ordering::SeqCst) {
            let finished = checkpoint.lock().unwrap().len();
            if finished < pair_count {
                return Err(JobError::Interrupted(processed));
            }
        }
    } else {
        advance(life, hooks, JobState::Extracting)?;
    }

    advance(life, hooks, JobState::Exporting)?;
    let checkpoint = checkpoint.into_inner().unwrap();
    let results: Vec<&ExtractionResult> = checkpoint
        .results()
        .filter(|r| relevant.contains(&(r.mrn.as_str(), r.group_id.as_str())))
        .collect();
    let results_file = work.join("results.csv");
    let result_rows = export_results(results.iter().copied(), &job.tool, &results_file)?;
    let receipt = client.upload(&results_file, &job.results_path)?;

    let mut summary = JobSummary {
        job_id: job.job_id.clone(),
        patients: reports.len(),
        pairs: pair_count,
        processed: results.len().min(pair_count) - (pair_count - pending_pairs(&pending)),
        rejected_rows: rejected,
        result_rows,
        results_file,
        upload: Some(receipt),
        ..Default::default()
    };
    let _ = processed;
    for r in &results {
        match r.status {
            ResultStatus::Found => summary.found += 1,
            ResultStatus::NotFound => summary.not_found += 1,
            ResultStatus::Error => summary.error += 1,
        }
    }
    Ok(summary)
}

fn pending_pairs(pending: &[(usize, Vec<usize>)]) -> usize {
    pending.iter().map(|(_, g)| g.len()).sum()
}

fn count_status(p: &mut JobProgress, status: ResultStatus) {
    match status {
        ResultStatus::Found => p.found += 1,
        ResultStatus::NotFound => p.not_found += 1,
        ResultStatus::Error => p.error += 1,
    }
}

/// Runs `f` over `items` on up to `workers` threads.
fn parallel_for<T: Sync>(items: &[T], workers: usize, f: impl Fn(&T) + Sync) {
    let next = AtomicUsize::new(0);
    let n = workers.clamp(1, items.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..n {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                f(item);
            });
        }
    });
}

#[derive(Serialize, Deserialize)]
struct CachedTerms {
    model_id: String,
    terms: SearchTermSet,
}

/// Asks the chat model for retrieval terms, falling back to terms derived
/// from the group and tool when the call fails or the reply is unusable.
pub fn generate_search_terms(
    group: &FeatureGroup,
    doc: &ToolSchemaDocument,
    chat: &dyn ChatModel,
) -> (SearchTermSet, Option<LlmError>) {
    let (system, user) = search_term_prompt(group, doc.fields());
    match chat.complete(&[ChatMessage::system(system), ChatMessage::user(user)], None) {
        Ok(ChatReply::Text(t)) => (terms_from_reply(group, doc.fields(), Some(&t)), None),
        Ok(ChatReply::ToolCall { arguments, .. }) => (terms_from_reply(group, doc.fields(), Some(&arguments)), None),
        Err(e) => (terms_from_reply(group, doc.fields(), None), Some(e)),
    }
}

fn prepare_terms(
    shared: &Shared,
    needed: &BTreeSet<usize>,
    hooks: &Hooks,
) -> Result<BTreeMap<usize, Vec<UnitVector>>, JobError> {
    let cfg = shared.cfg;
    let dir = cfg.work_dir.join("terms");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let chat = shared.services.chat.as_ref();
    let mut out = BTreeMap::new();
    let mut attempted = 0;
    let mut unreachable = 0;
    for &g in needed {
        let group = &cfg.groups[g];
        let path = dir.join(format!("{}.json", safe_name(&group.group_id)));
        let cached: Option<CachedTerms> = fs::read(&path).ok().and_then(|b| serde_json::from_slice(&b).ok());
        let terms = match cached {
            Some(c) if c.model_id == chat.model_id() => c.terms,
            _ => {
                attempted += 1;
                let (terms, err) = generate_search_terms(group, &shared.doc, chat);
                if let Some(e) = err {
                    if matches!(e, LlmError::Unreachable(_)) {
                        unreachable += 1;
                    }
                    warn(hooks, format!("search terms for {:?}: {e}; using fallback terms", group.name));
                }
                let record = CachedTerms {
                    model_id: chat.model_id().to_string(),
                    terms,
                };
                if unreachable == 0 {
                    let bytes = serde_json::to_vec_pretty(&record).map_err(|e| JobError::Other(e.to_string()))?;
                    fs::write(&path, bytes).map_err(io_err(&path))?;
                }
                record.terms
            }
        };
        out.insert(g, terms);
    }
    if attempted > 0 && unreachable == attempted {
        return Err(JobError::Endpoint {
            what: "chat endpoint",
            source: LlmError::Unreachable("no search-term request reached the chat endpoint".into()),
        });
    }
    let mut vectors = BTreeMap::new();
    for (g, set) in out {
        let raw = shared
            .services
            .embed
            .embed(&set.terms)
            .map_err(|source| JobError::Endpoint {
                what: "embedding search terms",
                source,
            })?;
        let units = raw
            .iter()
            .map(|v| l2_normalize(v))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| JobError::Other(format!("search term embedding: {e}")))?;
        vectors.insert(g, units);
    }
    Ok(vectors)
}

/// Loads or builds the index of every pending patient. A patient whose
/// index cannot be built gets an error string; unreachable endpoints abort.
fn build_indices(
    shared: &Shared,
    reports: &[ConsolidatedReport],
    pending: &[(usize, Vec<usize>)],
    hooks: &Hooks,
) -> Result<BTreeMap<usize, Result<FlatIndex, String>>, JobError> {
    let cfg = shared.cfg;
    let out = Mutex::new(BTreeMap::new());
    let fatal: Mutex<Option<JobError>> = Mutex::new(None);
    parallel_for(pending, cfg.job.workers, |(i, _)| {
        if fatal.lock().unwrap().is_some() {
            return;
        }
        let report = &reports[*i];
        let dir = cfg.work_dir.join("index").join(safe_name(&report.mrn));
        let model = shared.services.embed.model_id();
        match load_index(&dir) {
            Ok(ix) if ix.header().embed_model_id == model => {
                out.lock().unwrap().insert(*i, Ok(ix));
                return;
            }
            Ok(_) => {}
            Err(IndexStoreError::Io { .. }) => {}
            Err(e) => warn(hooks, format!("rebuilding index: {e}")),
        }
        match build_index(shared, report) {
            Ok(ix) => {
                if let Err(e) = save_index(&ix, &dir) {
                    fatal.lock().unwrap().get_or_insert(e.into());
                    return;
                }
                out.lock().unwrap().insert(*i, Ok(ix));
            }
            Err(LlmOrOther::Llm(e @ LlmError::Unreachable(_))) => {
                fatal.lock().unwrap().get_or_insert(JobError::Endpoint {
                    what: "embedding endpoint",
                    source: e,
                });
            }
            Err(e) => {
                out.lock().unwrap().insert(*i, Err(format!("indexing failed: {e}")));
            }
        }
    });
    if let Some(e) = fatal.into_inner().unwrap() {
        return Err(e);
    }
    Ok(out.into_inner().unwrap())
}

#[derive(Debug, thiserror::Error)]
enum LlmOrOther {
    #[error(transparent)]
    Llm(LlmError),
    #[error("{0}")]
    Other(String),
}

fn build_index(shared: &Shared, report: &ConsolidatedReport) -> Result<FlatIndex, LlmOrOther> {
    let cfg = shared.cfg;
    let mut chunks = Vec::new();
    for entry in &report.entries {
        let next_id = chunks.len() as u32;
        let mut c = chunk_for_embedding(
            entry.entry_id,
            &entry.text,
            cfg.job.embed.window_tokens,
            cfg.job.embed.overlap_tokens,
            next_id,
        )
        .map_err(|e| LlmOrOther::Other(e.to_string()))?;
        chunks.append(&mut c);
    }
    let embedder = shared.services.embed.as_ref();
    if chunks.is_empty() {
        return FlatIndex::build(embedder.model_id(), 0, vec![], vec![]).map_err(|e| LlmOrOther::Other(e.to_string()));
    }
    let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
    let raw = embedder.embed(&texts).map_err(LlmOrOther::Llm)?;
    let dim = raw[0].len();
    let units = raw
        .iter()
        .map(|v| l2_normalize(v))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| LlmOrOther::Other(format!("chunk embedding: {e}")))?;
    FlatIndex::build(embedder.model_id(), dim, units, chunks.iter().map(|c| c.meta()).collect())
        .map_err(|e| LlmOrOther::Other(e.to_string()))
}

/// Entries with at least one chunk scoring at or above `threshold` for any
/// of the term vectors.
pub fn filter_entries(index: &FlatIndex, terms: &[UnitVector], threshold: f64) -> Result<BTreeSet<u32>, String> {
    let mut out = BTreeSet::new();
    for t in terms {
        let hits = index.search(t, threshold).map_err(|e| e.to_string())?;
        out.extend(select_entries(&hits));
    }
    Ok(out)
}

fn process_group(
    shared: &Shared,
    report: &ConsolidatedReport,
    index: Option<&FlatIndex>,
    group: &FeatureGroup,
    terms: &[UnitVector],
) -> Result<ExtractionResult, JobError> {
    let cfg = shared.cfg;
    let model = shared.services.chat.model_id().to_string();
    let not_found = || ExtractionResult::not_found(&report.mrn, &group.group_id, &model, cfg.threshold);
    let error = |d: String| ExtractionResult::error(&report.mrn, &group.group_id, &model, cfg.threshold, d);
    let Some(index) = index else {
        return Ok(error("no index".into()));
    };
    if report.is_empty() || index.is_empty() {
        return Ok(not_found());
    }
    let selected = match filter_entries(index, terms, cfg.threshold) {
        Ok(s) => s,
        Err(e) => return Ok(error(e)),
    };
    if selected.is_empty() {
        return Ok(not_found());
    }
    let context = report.assemble(Some(&selected));
    if context.is_empty() {
        return Ok(not_found());
    }

    let system = cfg.prompt.render(&group.name, &group.guidance, &shared.today);
    let budget = match context_budget(
        cfg.context_tokens,
        &format!("{system}{CORRECTION_NOTE}"),
        &shared.doc,
        cfg.job.chat.output_reserve,
    ) {
        Ok(b) => b,
        Err(e) => return Ok(error(e.to_string())),
    };
    let overlap = if cfg.job.context_overlap_tokens < budget {
        cfg.job.context_overlap_tokens
    } else {
        budget / 4
    };
    let chunks = chunk_text(&context.text, budget, overlap).map_err(|e| JobError::Other(e.to_string()))?;
    let mut partials = Vec::with_capacity(chunks.len());
    for (i, chunk) in chunks.iter().enumerate() {
        let p = extract_from_chunk(
            i,
            chunk.text,
            &shared.doc,
            &system,
            shared.services.chat.as_ref(),
            cfg.job.chat.tool_retries,
            cfg.context_tokens,
        )
        .map_err(|source| JobError::Endpoint {
            what: "chat endpoint",
            source,
        })?;
        partials.push(p);
    }
    let merged = reconcile(&partials, &shared.doc, &shared.dates);
    let mut provenance = Vec::new();
    for &ci in &merged.contributing {
        for entry in context.entries_in(chunks[ci].span) {
            provenance.push((entry, ci));
        }
    }
    provenance.sort_unstable();
    Ok(ExtractionResult {
        mrn: report.mrn.clone(),
        group_id: group.group_id.clone(),
        value: merged.value,
        status: merged.status,
        provenance,
        model_id: model,
        threshold: cfg.threshold,
        detail: merged.detail,
    })
}

/// Calls the model on one chunk, retrying with a corrective note up to
/// `retries` times when the reply is not a valid tool call. Returns `Err`
/// only when the endpoint is unreachable.
pub fn extract_from_chunk(
    chunk_index: usize,
    chunk: &str,
    doc: &ToolSchemaDocument,
    system: &str,
    chat: &dyn ChatModel,
    retries: u32,
    model_ctx: usize,
) -> Result<PartialOutput, LlmError> {
    let mut last_error = String::new();
    let mut attempts = 0;
    for attempt in 0..=retries {
        let system = if attempt == 0 {
            system.to_string()
        } else {
            format!("{system}{CORRECTION_NOTE}")
        };
        let input_tokens = estimate_tokens(&system) + estimate_tokens(chunk) + estimate_tokens(doc.as_str());
        if input_tokens > model_ctx {
            return Ok(PartialOutput::failed(
                chunk_index,
                format!("request of {input_tokens} estimated tokens exceeds the model context {model_ctx}"),
                attempts,
            ));
        }
        attempts += 1;
        let reply = chat.complete(&[ChatMessage::system(system), ChatMessage::user(chunk)], Some(doc));
        match reply {
            Err(e @ LlmError::Unreachable(_)) => return Err(e),
            Err(e) => return Ok(PartialOutput::failed(chunk_index, e.to_string(), attempts)),
            Ok(ChatReply::Text(_)) => last_error = "reply contained no tool call".into(),
            Ok(ChatReply::ToolCall { name, arguments }) => {
                if name != doc.name() {
                    last_error = format!("reply called unknown function {name:?}");
                    continue;
                }
                match serde_json::from_str(&arguments) {
                    Err(e) => last_error = format!("tool arguments are not JSON: {e}"),
                    Ok(value) => {
                        let p = PartialOutput::from_value(chunk_index, value, doc, attempts);
                        if p.validation.verdict != Verdict::Invalid {
                            if attempts > 1 {
                                log::info!("chunk {chunk_index}: usable reply after {attempts} attempts");
                            }
                            return Ok(p);
                        }
                        let v = &p.validation.violations[0];
                        last_error = format!("tool arguments violate the schema at {}: {}", v.path, v.detail);
                    }
                }
            }
        }
    }
    Ok(PartialOutput::failed(chunk_index, last_error, attempts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use forge_core::schema::{DType, FieldSpec, ToolSpec};
    use std::collections::VecDeque;

    struct Scripted {
        replies: Mutex<VecDeque<Result<ChatReply, LlmError>>>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(replies: Vec<Result<ChatReply, LlmError>>) -> Self {
            Scripted {
                replies: Mutex::new(replies.into()),
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl ChatModel for Scripted {
        fn model_id(&self) -> &str {
            "scripted"
        }
        fn complete(&self, _: &[ChatMessage], _: Option<&ToolSchemaDocument>) -> Result<ChatReply, LlmError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or(Err(LlmError::Status { code: 500 }))
        }
    }

    fn doc() -> ToolSchemaDocument {
        compile_tool(&ToolSpec::new(
            "stroke",
            "",
            vec![
                FieldSpec::new("Occurrence", DType::Boolean).required(),
                FieldSpec::new("Date", DType::String),
            ],
        ))
        .unwrap()
    }

    fn call(args: &str) -> Result<ChatReply, LlmError> {
        Ok(ChatReply::ToolCall {
            name: "stroke".into(),
            arguments: args.into(),
        })
    }

    #[test]
    fn valid_call_first_time() {
        let chat = Scripted::new(vec![call(r#"{"Occurrence":true,"Date":"2015-03-02"}"#)]);
        let p = extract_from_chunk(0, "text", &doc(), "sys", &chat, 2, 100_000).unwrap();
        assert!(p.is_usable());
        assert_eq!(p.attempts, 1);
    }

    #[test]
    fn malformed_then_valid_retries_once() {
        let chat = Scripted::new(vec![call("{not json"), call(r#"{"Occurrence":false}"#)]);
        let p = extract_from_chunk(0, "text", &doc(), "sys", &chat, 2, 100_000).unwrap();
        assert!(p.is_usable());
        assert_eq!(p.attempts, 2);
    }

    #[test]
    fn no_tool_call_becomes_error_partial() {
        let chat = Scripted::new(vec![
            Ok(ChatReply::Text("sorry".into())),
            Ok(ChatReply::Text("sorry".into())),
            Ok(ChatReply::Text("sorry".into())),
        ]);
        let p = extract_from_chunk(0, "text", &doc(), "sys", &chat, 2, 100_000).unwrap();
        assert!(!p.is_usable());
        assert_eq!(p.attempts, 3);
        assert_eq!(chat.calls.load(Ordering::SeqCst), 3);
        assert_eq!(p.error.as_deref(), Some("reply contained no tool call"));
    }

    #[test]
    fn invalid_arguments_are_retried() {
        let chat = Scripted::new(vec![call(r#"{"Occurrence":"yes"}"#), call(r#"{"Occurrence":true}"#)]);
        let p = extract_from_chunk(0, "t", &doc(), "sys", &chat, 2, 100_000).unwrap();
        assert_eq!(p.attempts, 2);
        assert_eq!(p.validation.verdict, Verdict::Valid);
    }

    #[test]
    fn oversized_request_is_never_sent() {
        let chat = Scripted::new(vec![]);
        let p = extract_from_chunk(0, &"x".repeat(4000), &doc(), "sys", &chat, 2, 500).unwrap();
        assert!(!p.is_usable());
        assert_eq!(chat.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn unreachable_propagates() {
        let chat = Scripted::new(vec![Err(LlmError::Unreachable("refused".into()))]);
        assert!(extract_from_chunk(0, "t", &doc(), "s", &chat, 2, 100_000).is_err());
    }

    #[test]
    fn term_generation_falls_back() {
        let group = FeatureGroup {
            group_id: "stroke".into(),
            name: "Stroke".into(),
            tool_ref: String::new(),
            guidance: String::new(),
        };
        let down = Scripted::new(vec![Err(LlmError::Unreachable("refused".into()))]);
        let (set, err) = generate_search_terms(&group, &doc(), &down);
        assert!(err.is_some());
        assert_eq!(set.terms, vec!["stroke", "occurrence", "date"]);
        assert_eq!(set.origin, forge_core::extract::TermOrigin::Fallback);

        let up = Scripted::new(vec![Ok(ChatReply::Text(
            r#"["CVA","cva","cerebrovascular accident","brain infarct","hemorrhagic stroke"]"#.into(),
        ))]);
        let (set, err) = generate_search_terms(&group, &doc(), &up);
        assert!(err.is_none());
        assert_eq!(set.terms[..3], ["stroke", "cva", "cerebrovascular accident"]);
        assert_eq!(set.terms.len(), 5);
    }

    #[test]
    fn safe_names() {
        assert_eq!(safe_name("MRN-001_a"), "MRN-001_a");
        let odd = safe_name("../x y");
        assert!(odd.starts_with('x') && odd.len() == 33);
        assert_ne!(safe_name("a b"), safe_name("a c"));
    }
}
