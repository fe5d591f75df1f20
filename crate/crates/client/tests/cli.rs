//! Runs the `tracecommit` binary against an in-process service.

use std::process::{Command, Output};
use std::sync::OnceLock;

use tracecommit_api::AuditResponse;
use tracecommit_client::Client;
use tracecommit_core::probe::ProbeLibrary;
use tracecommit_core::wire::Verdict;

fn server() -> &'static str {
    static BASE: OnceLock<String> = OnceLock::new();
    BASE.get_or_init(|| {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        listener.set_nonblocking(true).unwrap();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async {
                let listener = tokio::net::TcpListener::from_std(listener).unwrap();
                tracecommit_service::serve(listener, tracecommit_service::AppState::new()).await.unwrap();
            });
        });
        format!("http://{addr}")
    })
}

fn tracecommit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tracecommit"))
        .arg("--server")
        .arg(server())
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn verdicts(o: &Output) -> Vec<Verdict> {
    stdout(o).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn tempdir(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("tracecommit-cli-{name}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(tracecommit(&["--help"]).status.code(), Some(0));
    assert_eq!(tracecommit(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(tracecommit(&["attack"]).status.code(), Some(1));
    assert_eq!(tracecommit(&["audit", "--strategy", "z"]).status.code(), Some(1));
}

#[test]
fn unreachable_server_exits_one() {
    let o = Command::new(env!("CARGO_BIN_EXE_tracecommit"))
        .args(["--server", "http://127.0.0.1:1", "bounds"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn audit_exit_code_follows_verdicts() {
    let o = tracecommit(&["audit", "--k", "4", "--n-probes", "96", "--sessions", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = verdicts(&o);
    assert_eq!(v.len(), 2);
    assert!(v.iter().all(|v| v.accepted() && v.round_z.len() == 4));

    let o = tracecommit(&["audit", "--strategy", "b"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!verdicts(&o)[0].accepted());

    let o = tracecommit(&["audit", "--misbehavior", "tamper-opening"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn served_provider_is_audited_by_address() {
    let o = tracecommit(&["serve", "--strategy", "d:1.0"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let info: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let addr = info["addr"].as_str().unwrap();

    let dir = tempdir("serve");
    let out = dir.join("audit.json");
    let o = tracecommit(&["audit", "--provider", addr, "--sessions", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let r: AuditResponse = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r.rejected, 2);

    let listed = stdout(&tracecommit(&["providers"]));
    assert!(listed.contains(addr));
    let id = info["id"].as_u64().unwrap().to_string();
    assert_eq!(tracecommit(&["stop-provider", &id]).status.code(), Some(0));
    assert_eq!(tracecommit(&["stop-provider", &id]).status.code(), Some(1));
}

#[test]
fn library_files_feed_later_commands() {
    let dir = tempdir("lib");
    let lib = dir.join("lib.json");
    let cal = dir.join("cal.json");
    let o = tracecommit(&[
        "gen-library", "--seed", "3", "--num-probes", "16", "--k", "8", "--d-sae", "4096", "--overlap", "1.5",
        "--out", lib.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let reference = ProbeLibrary::load(&lib).unwrap();
    assert_eq!(reference.len(), 16);

    let o = tracecommit(&["calibrate", "--seed", "3", "--library", lib.to_str().unwrap(), "--out", cal.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["threshold"]["violations"], 0);
    let calibrated = ProbeLibrary::load(&cal).unwrap();
    assert_eq!(calibrated.len(), 16);
    assert_ne!(calibrated, reference);

    let o = tracecommit(&["bounds", "--library", "/nonexistent/lib.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn table_commands_print_csv() {
    let o = tracecommit(&["fpr-sim", "--k", "4", "--alpha", "0.01", "--rho", "0.883", "--n-sim", "10000"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.starts_with("k,alpha,rho,union,independent,copula"));
    assert_eq!(out.lines().count(), 5);

    let o = tracecommit(&["attack", "--tier", "f1"]);
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 2);
    assert!(out.lines().nth(1).unwrap().starts_with("F1,1,"));

    let o = tracecommit(&["rotate-cv", "--folds", "3"]);
    assert_eq!(stdout(&o).lines().count(), 4);

    let o = tracecommit(&["fpr-sim", "--k", "2", "--alpha", "2", "--rho", "0.5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[tokio::test]
async fn client_reports_service_errors() {
    let c = Client::new(format!("{}/", server()));
    assert_eq!(c.health().await.unwrap().status, "ok");
    let err = c.stop_provider(424242).await.unwrap_err();
    assert!(matches!(err, tracecommit_client::ClientError::Api { status: 404, .. }), "{err}");
}
