mod common;

use std::sync::Arc;

use common::{contains, distinctive_token};
use forge::llm::RetryPolicy;
use forge::mock::repo::{MockRepo, MockRepoConfig};
use forge::mock::spawn_router;
use forge::repo::{AuditLog, AuditOperation, RemoteFileRef, RepoClient, RepoCredential, RepoError};

fn fast() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        base_delay_ms: 5,
        max_delay_ms: 20,
    }
}

struct Setup {
    repo: MockRepo,
    _srv: forge::mock::ServerHandle,
    client: RepoClient,
    cred: Arc<RepoCredential>,
    audit_path: std::path::PathBuf,
    dir: tempfile::TempDir,
    token: String,
}

fn setup(tag: &str, failing_uploads: usize) -> Setup {
    let token = distinctive_token(tag);
    let repo = MockRepo::new(MockRepoConfig {
        token: token.clone(),
        read_only_prefixes: vec!["exports/".into()],
        failing_uploads,
    });
    repo.put("exports/a.csv", b"mrn,text\n1,hello\n".to_vec());
    repo.put("exports/sub/b.csv", b"mrn,text\n2,there\n".to_vec());
    let srv = spawn_router(repo.router(), "127.0.0.1:0").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let audit_path = dir.path().join("audit.jsonl");
    let audit = Arc::new(AuditLog::open(&audit_path).unwrap());
    let cred = Arc::new(RepoCredential::new("UNUSED_IN_TEST", token.clone()));
    let client = RepoClient::new(&srv.url(), cred.clone(), audit, true, fast()).unwrap();
    Setup {
        repo,
        _srv: srv,
        client,
        cred,
        audit_path,
        dir,
        token,
    }
}

#[test]
fn fetch_and_upload_round_trip_with_audit() {
    let s = setup("roundtrip", 0);
    let refs = [
        RemoteFileRef {
            path: "exports/a.csv".into(),
            kind: Default::default(),
        },
        RemoteFileRef {
            path: "exports/sub/b.csv".into(),
            kind: Default::default(),
        },
    ];
    let local = s.client.fetch_files(&refs, &s.dir.path().join("in")).unwrap();
    assert_eq!(std::fs::read(&local[1]).unwrap(), b"mrn,text\n2,there\n");
    assert!(local[1].ends_with("exports/sub/b.csv"));

    let out = s.dir.path().join("out.csv");
    std::fs::write(&out, b"x,y\n1,2\n").unwrap();
    let receipt = s.client.upload(&out, "results/out.csv").unwrap();
    assert_eq!(receipt.bytes, 8);
    assert_eq!(s.repo.get("results/out.csv").unwrap(), b"x,y\n1,2\n");

    // Overwrite.
    std::fs::write(&out, b"x,y\n3,4\n").unwrap();
    s.client.upload(&out, "results/out.csv").unwrap();
    assert_eq!(s.repo.get("results/out.csv").unwrap(), b"x,y\n3,4\n");

    let audit = AuditLog::read(&s.audit_path).unwrap();
    assert_eq!(audit.len(), s.repo.requests().len());
    assert_eq!(audit.iter().filter(|r| r.operation == AuditOperation::Fetch).count(), 2);
    assert!(audit.iter().all(|r| r.outcome == "ok"));
    assert!(!contains(&std::fs::read(&s.audit_path).unwrap(), s.token.as_bytes()));
}

#[test]
fn bad_credential_is_not_retried() {
    let s = setup("badcred", 0);
    s.repo.set_token("rotated");
    let err = s.client.fetch("exports/a.csv").unwrap_err();
    assert!(matches!(err, RepoError::Credential(401)), "{err}");
    assert_eq!(s.repo.requests().len(), 1);
    assert_eq!(AuditLog::read(&s.audit_path).unwrap()[0].outcome, "http-401");
}

#[test]
fn missing_file_and_read_only_destination() {
    let s = setup("errors", 0);
    assert!(matches!(s.client.fetch("exports/nope.csv"), Err(RepoError::NotFound(_))));
    let out = s.dir.path().join("o.csv");
    std::fs::write(&out, b"a\n").unwrap();
    assert!(matches!(s.client.upload(&out, "exports/o.csv"), Err(RepoError::Forbidden(_))));
    assert!(s.repo.get("exports/o.csv").is_none());
}

#[test]
fn transient_upload_failures_are_retried() {
    let s = setup("transient", 2);
    let out = s.dir.path().join("o.csv");
    std::fs::write(&out, b"a\n").unwrap();
    s.client.upload(&out, "results/o.csv").unwrap();
    let reqs = s.repo.requests();
    assert_eq!(reqs.iter().map(|r| r.status).collect::<Vec<_>>(), [503, 503, 200]);
    assert_eq!(AuditLog::read(&s.audit_path).unwrap().len(), 3);
}

#[test]
fn persistent_upload_failure_surfaces() {
    let s = setup("persistent", 10);
    let out = s.dir.path().join("o.csv");
    std::fs::write(&out, b"a\n").unwrap();
    assert!(matches!(s.client.upload(&out, "results/o.csv"), Err(RepoError::Status(503))));
    assert_eq!(s.repo.requests().len(), 3);
}

#[test]
fn purged_credential_cannot_be_used() {
    let s = setup("purged", 0);
    s.cred.purge();
    assert!(matches!(s.client.fetch("exports/a.csv"), Err(RepoError::Consumed(_))));
    assert!(s.repo.requests().is_empty());
}

#[test]
fn plain_http_needs_the_insecure_flag() {
    let s = setup("scheme", 0);
    let audit = Arc::new(AuditLog::open(&s.dir.path().join("a2.jsonl")).unwrap());
    let r = RepoClient::new("http://127.0.0.1:1", s.cred.clone(), audit, false, fast());
    assert!(matches!(r, Err(RepoError::InsecureScheme(_))));
}

#[test]
fn traversal_paths_are_refused() {
    let s = setup("traverse", 0);
    let refs = [RemoteFileRef {
        path: "../../etc/passwd".into(),
        kind: Default::default(),
    }];
    assert!(matches!(
        s.client.fetch_files(&refs, s.dir.path()),
        Err(RepoError::BadPath(_))
    ));
}
