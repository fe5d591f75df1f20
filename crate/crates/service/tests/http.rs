//! Drives the service over real HTTP on an ephemeral port.

use std::sync::OnceLock;

use serde_json::{json, Value};
use tracecommit_api::*;
use tracecommit_core::probe::ProbeLibrary;
use tracecommit_core::wire::RejectReason;

/// One service per test binary, so deployments are calibrated once.
fn base() -> &'static str {
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

async fn post(path: &str, body: Value) -> (u16, Value) {
    let resp = reqwest::Client::new().post(format!("{}{path}", base())).json(&body).send().await.unwrap();
    let status = resp.status().as_u16();
    let text = resp.text().await.unwrap();
    (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
}

async fn post_ok<T: serde::de::DeserializeOwned>(path: &str, body: Value) -> T {
    let (status, v) = post(path, body).await;
    assert_eq!(status, 200, "{v}");
    serde_json::from_value(v).unwrap()
}

async fn get(path: &str) -> (u16, Value) {
    let resp = reqwest::get(format!("{}{path}", base())).await.unwrap();
    (resp.status().as_u16(), resp.json().await.unwrap())
}

async fn delete(path: &str) -> u16 {
    let resp = reqwest::Client::new().delete(format!("{}{path}", base())).send().await.unwrap();
    resp.status().as_u16()
}

#[tokio::test]
async fn health_reports_ok() {
    let (status, v) = get(HEALTH).await;
    assert_eq!(status, 200);
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn fpr_sim_returns_one_row_per_round_count() {
    let r: FprSimResponse = post_ok(FPR_SIM, json!({"k": 4, "alpha": 0.01, "rho": 0.883, "n_sim": 20000})).await;
    assert_eq!(r.rows.len(), 4);
    assert_eq!(r.csv.lines().count(), 5);
    for (row, exact) in r.rows.iter().zip(&r.copula_exact) {
        assert!(row.copula <= row.union + 4.0 * row.copula_se);
        assert!((row.copula - exact).abs() <= 5.0 * row.copula_se.max(1e-4), "{row:?} vs {exact}");
    }
}

#[tokio::test]
async fn invalid_parameters_are_client_errors() {
    let (status, v) = post(FPR_SIM, json!({"k": 0, "alpha": 0.01, "rho": 0.5})).await;
    assert_eq!(status, 400);
    assert!(v["error"].as_str().unwrap().contains("k must be"), "{v}");

    let (status, _) = post(FPR_SIM, json!({"alpha": "x"})).await;
    assert!((400..500).contains(&status));

    let (status, v) = post(ROTATE_CV, json!({"train": 90, "test": 90})).await;
    assert_eq!(status, 400, "{v}");
}

#[tokio::test]
async fn local_audits_accept_honest_and_reject_substitute() {
    let r: AuditResponse = post_ok(AUDIT, json!({"sessions": 3})).await;
    assert_eq!((r.accepted, r.rejected), (3, 0));
    assert_eq!(r.provider_stats.unwrap().sessions, 3);

    let r: AuditResponse =
        post_ok(AUDIT, json!({"sessions": 3, "local": {"strategy": {"kind": "substitute"}}})).await;
    assert_eq!(r.rejected, 3);
    assert!(r.verdicts.iter().all(|v| v.reason == Some(RejectReason::ThresholdExceeded)));

    let r: AuditResponse = post_ok(AUDIT, json!({"local": {"misbehavior": "late_commit"}})).await;
    assert_eq!(r.verdicts[0].reason, Some(RejectReason::CommitAfterOpen));
}

#[tokio::test]
async fn hosted_provider_is_audited_over_tcp() {
    let info: ProviderInfo = post_ok(PROVIDERS, json!({"provider": {"strategy": {"kind": "substitute"}}})).await;
    let r: AuditResponse = post_ok(AUDIT, json!({"sessions": 2, "provider": info.addr})).await;
    assert_eq!(r.rejected, 2);
    assert!(r.provider_stats.is_none());

    let (status, v) = get(&format!("{PROVIDERS}/{}", info.id)).await;
    assert_eq!(status, 200);
    assert_eq!(v["stats"]["sessions"], 2);
    let (_, list) = get(PROVIDERS).await;
    assert!(list.as_array().unwrap().iter().any(|p| p["id"] == info.id));

    assert_eq!(delete(&format!("{PROVIDERS}/{}", info.id)).await, 200);
    assert_eq!(delete(&format!("{PROVIDERS}/{}", info.id)).await, 404);
    tokio::time::sleep(std::time::Duration::from_millis(50)).await;
    let (status, v) = post(AUDIT, json!({"provider": info.addr})).await;
    assert_eq!(status, 502, "{v}");
}

#[tokio::test]
async fn honest_hosted_provider_accepts() {
    let info: ProviderInfo = post_ok(PROVIDERS, json!({})).await;
    let r: AuditResponse = post_ok(AUDIT, json!({"sessions": 2, "provider": info.addr, "audit_seed": 5})).await;
    assert_eq!(r.accepted, 2, "{r:?}");
}

#[tokio::test]
async fn forgery_endpoints_agree() {
    let bounds: BoundsResponse = post_ok(BOUNDS, json!({})).await;
    let attack: AttackResponse = post_ok(ATTACK, json!({"tier": "f3"})).await;
    assert_eq!(attack.rows.len(), 1);
    assert_eq!(attack.rows[0].tier, "F3");
    assert_eq!(attack.rows[0].median, bounds.achieved_z);
    assert!(bounds.achieved_z >= bounds.certificate.mult);
    assert!(bounds.achieved_z > bounds.tau);
    assert_eq!(attack.f3_sketch.unwrap().k(), 32);

    let all: AttackResponse = post_ok(ATTACK, json!({"tier": "all", "positions": 50, "attack_seeds": [0]})).await;
    let tiers: Vec<&str> = all.rows.iter().map(|r| r.tier.as_str()).collect();
    assert_eq!(tiers, ["F0", "F1", "F3"]);
}

#[tokio::test]
async fn custom_library_round_trip() {
    let spec = json!({"d_sae": 4096, "num_probes": 16, "k": 8, "overlap_target": 1.6});
    let g: GenerateLibraryResponse = post_ok(LIBRARY_GENERATE, json!({"seed": 7, "spec": spec})).await;
    assert_eq!(g.library.len(), 16);
    assert_eq!(ProbeLibrary::from_json(&g.library.to_json().unwrap()).unwrap(), g.library);

    let c: CalibrateResponse = post_ok(CALIBRATE, json!({"seed": 7, "library": g.library})).await;
    assert_eq!(c.library.len(), 16);
    assert_eq!(c.threshold.violations, 0);
    assert!(c.pool_csv.starts_with("dtype,kernel,position,seed_family,joint_z"));
    assert!(c.student_t5_p99 > c.gaussian_p99);

    let cal: GenerateLibraryResponse =
        post_ok(LIBRARY_GENERATE, json!({"seed": 7, "spec": spec, "calibrated": true})).await;
    assert_eq!(cal.library, c.library);
}

#[tokio::test]
async fn sweeps_emit_csv() {
    let r: SweepResponse = post_ok(SWEEP, json!({"mode": "k", "ks": [8, 32]})).await;
    assert_eq!(r.csv().lines().count(), 3);
    let r: SweepResponse =
        post_ok(SWEEP, json!({"mode": "n", "samples": 40, "ns": [1, 96], "alphas": [1.0]})).await;
    let SweepResponse::N { report, .. } = r else { panic!("{r:?}") };
    assert_eq!(report.rows.len(), 2);
}

#[tokio::test]
async fn svip_baseline_passes_routing_attacker() {
    let r: SvipResponse = post_ok(SVIP, json!({"variant": "cached", "sessions": 3})).await;
    assert_eq!(r.baseline_accepted, 3);
    assert_eq!(r.commit_open_rejected, 3);
    assert!(r.extra_honest_generations > 0);
}

#[tokio::test]
async fn bench_reports_each_batch() {
    let r: BenchReport =
        post_ok(BENCH, json!({"batch_sizes": [1, 2], "blocks": 1, "trials": 2, "openings": 2})).await;
    assert_eq!(r.rows.len(), 2);
    assert!(r.rows.iter().all(|row| row.payload_bytes_per_opening == 224));
}

#[tokio::test]
async fn unknown_provider_is_not_found() {
    let (status, v) = get(&format!("{PROVIDERS}/999999")).await;
    assert_eq!(status, 404);
    assert!(v["error"].as_str().unwrap().contains("999999"));
}
