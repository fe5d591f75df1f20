use std::net::TcpStream;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::Json;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracecommit_api::*;
use tracecommit_core::forgery::{ladder, rotation_cv, solve_f3};
use tracecommit_core::probe::{evaluate_threshold, parametric_p99, TailFamily};
use tracecommit_core::stats::{
    copula_exact, estimate_rho, fpr_csv, fpr_table, k_sweep, k_sweep_csv, mask_flip_csv, mask_flip_sweep, n_sweep,
    DEFAULT_SWEEP_ALPHAS, DEFAULT_SWEEP_NS,
};
use tracecommit_core::synth::{gen_library, membership_stats, Deployment, TraceModel};
use tracecommit_core::wire::{
    bench_commit, svip_baseline_audit, verifier_audit, AuditConfig, CommitMode, Loopback, Provider, ProviderConfig,
    SessionPlan, StreamTransport, Strategy, Verdict,
};

use crate::error::ApiError;
use crate::state::AppState;

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Socket timeout when auditing a remote provider.
const PROVIDER_IO_TIMEOUT: Duration = Duration::from_secs(30);
const DEFAULT_KS: [usize; 6] = [1, 2, 4, 8, 16, 32];
const DEFAULT_FLIP_FRACTIONS: [f64; 5] = [0.0, 0.1, 0.25, 0.5, 1.0];

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    Ok(Json(tokio::task::spawn_blocking(f).await??))
}

fn or_default<T: Clone>(v: &[T], default: &[T]) -> Vec<T> {
    if v.is_empty() {
        default.to_vec()
    } else {
        v.to_vec()
    }
}

pub async fn health() -> Json<Health> {
    Json(Health { status: "ok".into(), version: env!("CARGO_PKG_VERSION").into() })
}

pub async fn generate_library(State(s): State<AppState>, Json(req): Json<GenerateLibraryRequest>) -> ApiResult<GenerateLibraryResponse> {
    blocking(move || {
        let library = if req.calibrated {
            let reference = gen_library(req.seed, req.spec)?;
            s.deployment(&DeploymentRef { seed: req.seed, library: Some(reference) })?.library.clone()
        } else {
            gen_library(req.seed, req.spec)?
        };
        let membership = membership_stats(&library);
        Ok(GenerateLibraryResponse { library, membership })
    })
    .await
}

pub async fn calibrate(State(s): State<AppState>, Json(req): Json<CalibrateRequest>) -> ApiResult<CalibrateResponse> {
    blocking(move || {
        let d = s.deployment(&req.deployment)?;
        Ok(CalibrateResponse {
            threshold: evaluate_threshold(&d.pool, d.threshold.tau, req.confidence)?,
            sigma_floor_fraction: d.sigma_floor_fraction,
            gaussian_p99: parametric_p99(&d.pool, TailFamily::Gaussian)?,
            student_t5_p99: parametric_p99(&d.pool, TailFamily::StudentTDf5)?,
            rho: estimate_rho(&d.pool).ok(),
            pool_csv: d.pool.to_csv(),
            library: d.library.clone(),
        })
    })
    .await
}

pub async fn attack(State(s): State<AppState>, Json(req): Json<AttackRequest>) -> ApiResult<AttackResponse> {
    blocking(move || {
        let d = s.deployment(&req.deployment)?;
        let report = ladder(&d.library, req.positions, &req.attack_seeds, d.threshold.tau)?;
        let rows = match req.tier.label() {
            Some(tier) => report.rows.into_iter().filter(|r| r.tier == tier).collect(),
            None => report.rows,
        };
        let f3_sketch = match req.tier {
            AttackTier::F3 | AttackTier::All => Some(solve_f3(&d.library)?.sketch),
            _ => None,
        };
        Ok(AttackResponse { tau: report.tau, rows, certificate: report.certificate, f3_sketch })
    })
    .await
}

pub async fn bounds(State(s): State<AppState>, Json(req): Json<DeploymentRef>) -> ApiResult<BoundsResponse> {
    blocking(move || {
        let d = s.deployment(&req)?;
        let f3 = solve_f3(&d.library)?;
        Ok(BoundsResponse { tau: d.threshold.tau, certificate: f3.certificate, achieved_z: f3.achieved_z })
    })
    .await
}

pub async fn rotate_cv(State(s): State<AppState>, Json(req): Json<RotateCvRequest>) -> ApiResult<RotateCvResponse> {
    blocking(move || {
        let d = s.deployment(&req.deployment)?;
        let mut rng = ChaCha8Rng::seed_from_u64(req.cv_seed);
        let report = rotation_cv(&d.library, req.folds, (req.train, req.test), &mut rng)?;
        let tau = d.threshold.tau;
        Ok(RotateCvResponse { tau, scores_below_tau: report.scores_below(tau), report })
    })
    .await
}

pub async fn fpr_sim(Json(req): Json<FprSimRequest>) -> ApiResult<FprSimResponse> {
    blocking(move || {
        let rows = fpr_table(req.k, req.alpha, req.rho, req.n_sim, req.seed)?;
        let copula_exact = rows.iter().map(|r| copula_exact(r.k, r.alpha, r.rho)).collect::<Result<_, _>>()?;
        Ok(FprSimResponse { csv: fpr_csv(&rows), rows, copula_exact })
    })
    .await
}

pub async fn sweep(State(s): State<AppState>, Json(req): Json<SweepRequest>) -> ApiResult<SweepResponse> {
    blocking(move || {
        let d = s.deployment(&req.deployment)?;
        Ok(match req.mode {
            SweepMode::K => {
                let attacker =
                    d.backend.pool(&TraceModel::substitute(), &d.library, &d.fleet, req.sweep_seed, true)?;
                let rows = k_sweep(&d.pool, Some(&attacker), &or_default(&req.ks, &DEFAULT_KS))?;
                SweepResponse::K { csv: k_sweep_csv(&rows), rows }
            }
            SweepMode::N => {
                let alphas = or_default(&req.alphas, &DEFAULT_SWEEP_ALPHAS);
                let ns = or_default(&req.ns, &DEFAULT_SWEEP_NS);
                let report = n_sweep(&d, &alphas, &ns, req.samples, req.sweep_seed)?;
                SweepResponse::N { csv: report.to_csv(), report }
            }
            SweepMode::Maskflip => {
                let fractions = or_default(&req.fractions, &DEFAULT_FLIP_FRACTIONS);
                let rows = mask_flip_sweep(&d, &fractions, req.samples, req.sweep_seed)?;
                SweepResponse::Maskflip { csv: mask_flip_csv(&rows), rows }
            }
        })
    })
    .await
}

pub async fn bench(State(s): State<AppState>, Json(req): Json<BenchRequest>) -> ApiResult<BenchReport> {
    blocking(move || {
        let d = s.deployment(&DeploymentRef { seed: req.seed, library: None })?;
        let plan = SessionPlan::new(req.blocks, d.library.len())?;
        Ok(bench_commit(&d, &req.batch_sizes, plan, req.openings, req.trials, req.seed)?)
    })
    .await
}

fn local_provider(d: &std::sync::Arc<Deployment>, p: &LocalProvider, plan: SessionPlan) -> Result<Provider, ApiError> {
    let config = ProviderConfig { misbehavior: p.misbehavior, mode: p.mode, ..ProviderConfig::new(p.strategy, plan, p.provider_seed) };
    Ok(Provider::new(d.clone(), config)?)
}

fn tally(tau: f64, verdicts: Vec<Verdict>, provider_stats: Option<tracecommit_core::wire::ProviderStats>) -> AuditResponse {
    let accepted = verdicts.iter().filter(|v| v.accepted()).count();
    AuditResponse { tau, rejected: verdicts.len() - accepted, accepted, verdicts, provider_stats }
}

pub async fn audit(State(s): State<AppState>, Json(req): Json<AuditRequest>) -> ApiResult<AuditResponse> {
    blocking(move || {
        let d = s.deployment(&req.deployment)?;
        let plan = SessionPlan::new(req.blocks, d.library.len())?;
        let cfg = AuditConfig { plan, k_open: req.k_open, n_probes: req.n_probes, tau: d.threshold.tau };
        let mut rng = ChaCha8Rng::seed_from_u64(req.audit_seed);
        let prompt = req.prompt.as_bytes();
        let mut verdicts = Vec::with_capacity(req.sessions);
        match &req.provider {
            Some(addr) => {
                let stream = TcpStream::connect(addr).map_err(|e| ApiError::Provider(format!("{addr}: {e}")))?;
                stream.set_read_timeout(Some(PROVIDER_IO_TIMEOUT)).map_err(|e| ApiError::Internal(e.to_string()))?;
                stream.set_write_timeout(Some(PROVIDER_IO_TIMEOUT)).map_err(|e| ApiError::Internal(e.to_string()))?;
                let mut t = StreamTransport::new(stream);
                for _ in 0..req.sessions {
                    verdicts.push(verifier_audit(&mut t, &d.library, &cfg, prompt, &mut rng)?);
                }
                Ok(tally(cfg.tau, verdicts, None))
            }
            None => {
                let mut p = local_provider(&d, &req.local, plan)?;
                for _ in 0..req.sessions {
                    verdicts.push(verifier_audit(&mut Loopback::new(&mut p), &d.library, &cfg, prompt, &mut rng)?);
                }
                Ok(tally(cfg.tau, verdicts, Some(p.stats())))
            }
        }
    })
    .await
}

pub async fn svip(State(s): State<AppState>, Json(req): Json<SvipRequest>) -> ApiResult<SvipResponse> {
    blocking(move || {
        let d = s.deployment(&req.deployment)?;
        let plan = SessionPlan::new(4, d.library.len())?;
        let cfg = AuditConfig { plan, k_open: req.k_open, n_probes: req.n_probes, tau: d.threshold.tau };
        let routed = LocalProvider {
            strategy: Strategy::Substitute,
            mode: CommitMode::ProbeAfterReturn { routing: Some(req.variant) },
            ..LocalProvider::default()
        };
        let committed = LocalProvider { strategy: Strategy::Substitute, ..LocalProvider::default() };

        let mut rng = ChaCha8Rng::seed_from_u64(req.audit_seed);
        let mut p = local_provider(&d, &routed, plan)?;
        let baseline = (0..req.sessions)
            .map(|_| svip_baseline_audit(&mut Loopback::new(&mut p), &d.library, &cfg, b"p", &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let extra_honest_generations = p.stats().extra_honest_generations;

        let mut rng = ChaCha8Rng::seed_from_u64(req.audit_seed);
        let mut p = local_provider(&d, &committed, plan)?;
        let commit_open = (0..req.sessions)
            .map(|_| verifier_audit(&mut Loopback::new(&mut p), &d.library, &cfg, b"p", &mut rng))
            .collect::<Result<Vec<_>, _>>()?;

        Ok(SvipResponse {
            variant: req.variant,
            baseline_accepted: baseline.iter().filter(|v| v.accepted()).count(),
            commit_open_rejected: commit_open.iter().filter(|v| !v.accepted()).count(),
            baseline,
            commit_open,
            extra_honest_generations,
        })
    })
    .await
}

pub async fn start_provider(State(s): State<AppState>, Json(req): Json<StartProviderRequest>) -> ApiResult<ProviderInfo> {
    let state = s.clone();
    let deployment = req.deployment.clone();
    let d = tokio::task::spawn_blocking(move || state.deployment(&deployment)).await??;
    let plan = SessionPlan::new(req.blocks, d.library.len())?;
    let provider = local_provider(&d, &req.provider, plan)?;
    let listen = req.listen.as_deref().unwrap_or("127.0.0.1:0");
    Ok(Json(s.providers().start(provider, req.deployment.seed, req.provider, listen).await?))
}

pub async fn list_providers(State(s): State<AppState>) -> Json<Vec<ProviderInfo>> {
    Json(s.providers().list())
}

pub async fn get_provider(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<ProviderInfo> {
    Ok(Json(s.providers().get(id)?))
}

pub async fn stop_provider(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<ProviderInfo> {
    Ok(Json(s.providers().stop(id)?))
}
