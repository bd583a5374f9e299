//! Synthetic corpora with planted facts, and mock-backed job setups.
#![allow(dead_code)]

pub mod api;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use forge::checkpoint::read_results;
use forge::config::{ChatConfig, EmbedConfig, GroupConfig, JobConfig, RepoConfig};
use forge::ingest::IngestOptions;
use forge::mock::llm::{Concept, MockLlm, MockLlmConfig};
use forge::mock::repo::{MockRepo, MockRepoConfig};
use forge::mock::{spawn_router, ServerHandle};
use forge::repo::RemoteFileRef;
use forge_core::schema::{DType, FieldSpec, ToolSpec};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

pub struct Group {
    pub id: &'static str,
    pub name: &'static str,
    pub keywords: &'static [&'static str],
}

pub const GROUPS: &[Group] = &[
    Group {
        id: "stroke",
        name: "Stroke",
        keywords: &["stroke", "cva", "cerebrovascular accident"],
    },
    Group {
        id: "tia",
        name: "TIA",
        keywords: &["tia", "transient ischemic attack"],
    },
    Group {
        id: "mi",
        name: "Myocardial Infarction",
        keywords: &["myocardial infarction", "heart attack", "nstemi"],
    },
];

const FILLER: &[&str] = &[
    "Patient seen in clinic for routine follow up",
    "Blood pressure well controlled on current regimen",
    "Reports mild knee pain after gardening",
    "Labs reviewed and discussed with the patient",
    "No fever or chills reported this week",
    "Continues metformin with good adherence",
    "Advised to increase daily walking",
    "Sleep has improved since the last visit",
    "Vaccinations are up to date",
    "Weight stable compared with prior measurements",
    "Denies chest discomfort at rest",
    "Family present and supportive during the visit",
];

const SOURCES: &[&str] = &["Epic", "SCM", "AEHR"];
const CATEGORIES: &[&str] = &["progress", "discharge", "radiology", "consult"];

/// What was planted for one patient and group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Truth {
    pub occurrence: bool,
    pub earliest: Option<String>,
}

pub struct Corpus {
    pub csv: String,
    pub truth: BTreeMap<(String, String), Truth>,
    /// One distinctive marker per note, for leak scans.
    pub sentinels: Vec<String>,
    pub mrns: Vec<String>,
}

fn date(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{}-{:02}-{:02}",
        rng.random_range(2008..2023),
        rng.random_range(1..=12),
        rng.random_range(1..=28)
    )
}

fn csv_cell(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

/// `patients` patients with 3 to 7 notes each. Every group is planted for
/// roughly half the patients with one to three mentions, some undated.
pub fn corpus(patients: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("mrn,timestamp,source_system,category,text\n");
    let mut truth = BTreeMap::new();
    let mut sentinels = Vec::new();
    let mut mrns = Vec::new();
    for p in 0..patients {
        let mrn = format!("MRN{:04}", 1000 + p);
        mrns.push(mrn.clone());
        let n_notes = rng.random_range(3..=7);
        let mut notes: Vec<Vec<String>> = (0..n_notes)
            .map(|_| {
                (0..rng.random_range(3..=6))
                    .map(|_| FILLER.choose(&mut rng).unwrap().to_string())
                    .collect()
            })
            .collect();
        for g in GROUPS {
            let mut t = Truth {
                occurrence: false,
                earliest: None,
            };
            if rng.random_bool(0.5) {
                t.occurrence = true;
                for _ in 0..rng.random_range(1..=3) {
                    let kw = g.keywords.choose(&mut rng).unwrap();
                    let sentence = if rng.random_bool(0.75) {
                        let d = date(&mut rng);
                        if t.earliest.as_ref().is_none_or(|e| d < *e) {
                            t.earliest = Some(d.clone());
                        }
                        format!("History of {kw} on {d}")
                    } else {
                        format!("Remote history of {kw} without residual deficit")
                    };
                    let note = rng.random_range(0..notes.len());
                    let at = rng.random_range(0..=notes[note].len());
                    notes[note].insert(at, sentence);
                }
            }
            truth.insert((mrn.clone(), g.id.to_string()), t);
        }
        for (i, sentences) in notes.into_iter().enumerate() {
            let sentinel = format!("qz{}sentinel{:x}", p, rng.random::<u32>());
            let mut text = sentences.join(". ");
            text.push_str(&format!(". Ref {sentinel}."));
            // A distracting date outside any mention sentence.
            text.push_str(&format!(" Next review {}.", date(&mut rng)));
            let ts = if i == 0 && p % 5 == 4 {
                String::new()
            } else {
                format!("{} 09:{:02}:00", date(&mut rng), rng.random_range(0..60))
            };
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                mrn,
                ts,
                SOURCES.choose(&mut rng).unwrap(),
                CATEGORIES.choose(&mut rng).unwrap(),
                csv_cell(&text)
            ));
            sentinels.push(sentinel);
        }
    }
    Corpus {
        csv,
        truth,
        sentinels,
        mrns,
    }
}

pub fn tool() -> ToolSpec {
    ToolSpec::new(
        "clinical_event",
        "Whether the event occurred and the earliest date it was documented",
        vec![
            FieldSpec::new("Occurrence", DType::Boolean)
                .describe("Whether the patient ever had the event")
                .required(),
            FieldSpec::new("Date", DType::String)
                .describe("Earliest documented date of the event, YYYY-MM-DD")
                .with_pattern(r"^\d{4}-\d{2}-\d{2}$"),
        ],
    )
}

pub fn concepts() -> Vec<Concept> {
    GROUPS
        .iter()
        .map(|g| Concept {
            name: g.name.into(),
            keywords: g.keywords.iter().map(|k| k.to_string()).collect(),
        })
        .collect()
}

pub const CONTEXT_TOKENS: usize = 1800;

pub fn llm_config() -> MockLlmConfig {
    MockLlmConfig {
        concepts: concepts(),
        model_ctx: CONTEXT_TOKENS,
        ..Default::default()
    }
}

pub const CORPUS_PATH: &str = "exports/notes.csv";

/// Mock servers for one scenario.
pub struct Mocks {
    pub repo: MockRepo,
    pub llm: MockLlm,
    pub repo_srv: ServerHandle,
    pub llm_srv: ServerHandle,
}

pub fn start_mocks(token: &str, corpus_csv: &str) -> Mocks {
    let repo = MockRepo::new(MockRepoConfig {
        token: token.into(),
        read_only_prefixes: vec!["exports/".into()],
        failing_uploads: 0,
    });
    repo.put(CORPUS_PATH, corpus_csv.as_bytes().to_vec());
    let llm = MockLlm::new(llm_config());
    let repo_srv = spawn_router(repo.router(), "127.0.0.1:0").unwrap();
    let llm_srv = spawn_router(llm.router(), "127.0.0.1:0").unwrap();
    Mocks {
        repo,
        llm,
        repo_srv,
        llm_srv,
    }
}

pub fn job_config(m: &Mocks, job_id: &str, token_env: &str, work_dir: &Path) -> JobConfig {
    JobConfig {
        job_id: job_id.into(),
        tool: tool(),
        feature_groups: GROUPS
            .iter()
            .map(|g| GroupConfig {
                group_id: g.id.into(),
                name: g.name.into(),
                guidance: String::new(),
            })
            .collect(),
        chat: ChatConfig {
            base_url: Some(m.llm_srv.url()),
            model: Some("mock-chat".into()),
            context_tokens: Some(CONTEXT_TOKENS),
            output_reserve: 256,
            timeout_secs: 30,
            ..Default::default()
        },
        embed: EmbedConfig {
            base_url: Some(m.llm_srv.url()),
            model: Some("mock-embed".into()),
            timeout_secs: 30,
            ..Default::default()
        },
        similarity_threshold: Some(0.30),
        context_overlap_tokens: 64,
        repository: RepoConfig {
            base_url: Some(m.repo_srv.url()),
            token_env: token_env.into(),
            allow_insecure: true,
        },
        inputs: vec![RemoteFileRef {
            path: CORPUS_PATH.into(),
            kind: Default::default(),
        }],
        results_path: format!("results/{job_id}.csv"),
        ingest: IngestOptions::default(),
        cleaning_rules: None,
        date_formats: vec![],
        work_dir: Some(work_dir.to_path_buf()),
        workers: 4,
        today: Some("2024-01-01".into()),
        prompt: None,
    }
}

/// Compares a results CSV against planted truth; returns mismatch notes.
pub fn check_against_truth(results: &Path, truth: &BTreeMap<(String, String), Truth>) -> Vec<String> {
    let rows = read_results(results).unwrap();
    let mut got: BTreeMap<(String, String), (Option<bool>, Option<String>)> = BTreeMap::new();
    for r in rows {
        let e = got.entry((r.mrn.clone(), r.feature_group.clone())).or_default();
        match r.field_path.as_str() {
            "/Occurrence" => e.0 = r.value.as_bool(),
            "/Date" => e.1 = r.value.as_str().map(str::to_string),
            _ => {}
        }
    }
    let mut bad = Vec::new();
    for (key, t) in truth {
        let (occ, d) = got.get(key).cloned().unwrap_or_default();
        let occ = occ.unwrap_or(false);
        let year = |s: &Option<String>| s.as_ref().map(|d| d[..4].to_string());
        if occ != t.occurrence || year(&d) != year(&t.earliest) || d != t.earliest {
            bad.push(format!("{key:?}: got ({occ}, {d:?}), planted ({}, {:?})", t.occurrence, t.earliest));
        }
    }
    if got.len() != truth.len() {
        bad.push(format!("{} result pairs for {} planted pairs", got.len(), truth.len()));
    }
    bad
}

/// Files under `dir` whose bytes contain `needle`.
pub fn files_containing(dir: &Path, needle: &str) -> Vec<PathBuf> {
    let mut hits = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(rd) = std::fs::read_dir(&d) else { continue };
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if let Ok(b) = std::fs::read(&p) {
                if contains(&b, needle.as_bytes()) {
                    hits.push(p);
                }
            }
        }
    }
    hits
}

pub fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// A distinctive token value for leak scans.
pub fn distinctive_token(tag: &str) -> String {
    format!("tok-{tag}-{}", uuid_like(tag))
}

fn uuid_like(tag: &str) -> String {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    tag.hash(&mut h);
    std::process::id().hash(&mut h);
    format!("{:016x}Zk9", h.finish())
}

pub fn json(text: &[u8]) -> Value {
    serde_json::from_slice(text).unwrap()
}
