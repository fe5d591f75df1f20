//! JSON bodies of the tracecommit HTTP service.
//!
//! Every heavy operation takes the deployment it runs against as a seed plus
//! an optional probe library. Without a library the service generates the
//! default one from the seed; with one it recalibrates σ and τ for it.

use serde::{Deserialize, Serialize};
use tracecommit_core::forgery::{BoundCertificate, LadderRow, RotationReport};
use tracecommit_core::probe::{ProbeLibrary, Threshold};
use tracecommit_core::stats::{KSweepRow, MaskFlipRow, NSweepReport, SessionFprReport};
use tracecommit_core::synth::{LibrarySpec, MembershipStats};
use tracecommit_core::wire::{CommitMode, Misbehavior, ProviderStats, RoutingVariant, Strategy, Verdict};
use tracecommit_core::TraceSketch;

pub use tracecommit_core::wire::BenchReport;

pub const HEALTH: &str = "/health";
pub const LIBRARY_GENERATE: &str = "/v1/library/generate";
pub const CALIBRATE: &str = "/v1/calibrate";
pub const ATTACK: &str = "/v1/attack";
pub const BOUNDS: &str = "/v1/bounds";
pub const ROTATE_CV: &str = "/v1/rotate-cv";
pub const FPR_SIM: &str = "/v1/fpr-sim";
pub const SWEEP: &str = "/v1/sweep";
pub const BENCH: &str = "/v1/bench";
pub const AUDIT: &str = "/v1/audit";
pub const SVIP: &str = "/v1/svip";
pub const PROVIDERS: &str = "/v1/providers";

/// Error body returned with every non-2xx status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

/// Which calibrated deployment an operation runs against.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeploymentRef {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub library: Option<ProbeLibrary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateLibraryRequest {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub spec: LibrarySpec,
    /// Return the σ-calibrated library of the seed's deployment instead of
    /// the raw reference.
    #[serde(default)]
    pub calibrated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateLibraryResponse {
    pub library: ProbeLibrary,
    pub membership: MembershipStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateRequest {
    #[serde(flatten)]
    pub deployment: DeploymentRef,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
}

fn default_confidence() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateResponse {
    pub threshold: Threshold,
    pub sigma_floor_fraction: f64,
    pub gaussian_p99: f64,
    pub student_t5_p99: f64,
    /// Position-to-position correlation of honest scores within a tuple.
    pub rho: Option<f64>,
    pub pool_csv: String,
    pub library: ProbeLibrary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackTier {
    F0,
    F1,
    F3,
    All,
}

impl AttackTier {
    pub fn label(self) -> Option<&'static str> {
        match self {
            AttackTier::F0 => Some("F0"),
            AttackTier::F1 => Some("F1"),
            AttackTier::F3 => Some("F3"),
            AttackTier::All => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRequest {
    #[serde(flatten)]
    pub deployment: DeploymentRef,
    pub tier: AttackTier,
    /// F0 draws per attack seed.
    #[serde(default = "default_positions")]
    pub positions: usize,
    #[serde(default = "default_attack_seeds")]
    pub attack_seeds: Vec<u64>,
}

fn default_positions() -> usize {
    2000
}

fn default_attack_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResponse {
    pub tau: f64,
    pub rows: Vec<LadderRow>,
    pub certificate: BoundCertificate,
    /// The F3 forgery, when F3 was requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f3_sketch: Option<TraceSketch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsResponse {
    pub tau: f64,
    pub certificate: BoundCertificate,
    pub achieved_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotateCvRequest {
    #[serde(flatten)]
    pub deployment: DeploymentRef,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_train")]
    pub train: usize,
    #[serde(default = "default_test")]
    pub test: usize,
    #[serde(default)]
    pub cv_seed: u64,
}

fn default_folds() -> usize {
    50
}

fn default_train() -> usize {
    48
}

fn default_test() -> usize {
    48
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotateCvResponse {
    pub tau: f64,
    pub report: RotationReport,
    pub scores_below_tau: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FprSimRequest {
    pub k: usize,
    pub alpha: f64,
    pub rho: f64,
    #[serde(default = "default_n_sim")]
    pub n_sim: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_sim() -> usize {
    200_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FprSimResponse {
    /// One row per k in 1..=k.
    pub rows: Vec<SessionFprReport>,
    /// Quadrature value of the copula column, row by row.
    pub copula_exact: Vec<f64>,
    pub csv: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMode {
    K,
    N,
    Maskflip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRequest {
    #[serde(flatten)]
    pub deployment: DeploymentRef,
    pub mode: SweepMode,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub sweep_seed: u64,
    /// Sketch widths for mode k. Empty selects 1..=32 in powers of two.
    #[serde(default)]
    pub ks: Vec<usize>,
    /// Probe counts for mode n. Empty selects the defaults.
    #[serde(default)]
    pub ns: Vec<usize>,
    /// Mixture weights for mode n. Empty selects the defaults.
    #[serde(default)]
    pub alphas: Vec<f64>,
    /// Support flip fractions for mode maskflip. Empty selects the defaults.
    #[serde(default)]
    pub fractions: Vec<f64>,
}

fn default_samples() -> usize {
    400
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SweepResponse {
    K { rows: Vec<KSweepRow>, csv: String },
    N { report: NSweepReport, csv: String },
    Maskflip { rows: Vec<MaskFlipRow>, csv: String },
}

impl SweepResponse {
    pub fn csv(&self) -> &str {
        match self {
            SweepResponse::K { csv, .. } | SweepResponse::N { csv, .. } | SweepResponse::Maskflip { csv, .. } => csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRequest {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batches")]
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_openings")]
    pub openings: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

fn default_batches() -> Vec<usize> {
    vec![1, 2, 4, 8, 16, 32]
}

fn default_blocks() -> usize {
    4
}

fn default_openings() -> usize {
    4
}

fn default_trials() -> usize {
    10
}

fn default_k_open() -> usize {
    4
}

fn default_n_probes() -> usize {
    96
}

fn default_sessions() -> usize {
    1
}

fn default_prompt() -> String {
    "audit prompt".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRequest {
    #[serde(flatten)]
    pub deployment: DeploymentRef,
    #[serde(default = "default_k_open")]
    pub k_open: usize,
    #[serde(default = "default_n_probes")]
    pub n_probes: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_sessions")]
    pub sessions: usize,
    #[serde(default = "default_prompt")]
    pub prompt: String,
    #[serde(default)]
    pub audit_seed: u64,
    /// Framed TCP provider to audit. Without one the service audits an
    /// in-process provider configured by `local`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
    #[serde(default)]
    pub local: LocalProvider,
}

/// Behaviour of a provider hosted by the service.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalProvider {
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub misbehavior: Misbehavior,
    #[serde(default = "default_mode")]
    pub mode: CommitMode,
    #[serde(default)]
    pub provider_seed: u64,
}

fn default_strategy() -> Strategy {
    Strategy::Honest
}

fn default_mode() -> CommitMode {
    CommitMode::CommitOpen
}

impl Default for LocalProvider {
    fn default() -> Self {
        LocalProvider {
            strategy: default_strategy(),
            misbehavior: Misbehavior::None,
            mode: default_mode(),
            provider_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditResponse {
    pub tau: f64,
    pub verdicts: Vec<Verdict>,
    pub accepted: usize,
    pub rejected: usize,
    /// Counters of the in-process provider, when one was used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_stats: Option<ProviderStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvipRequest {
    #[serde(flatten)]
    pub deployment: DeploymentRef,
    pub variant: RoutingVariant,
    #[serde(default = "default_svip_sessions")]
    pub sessions: usize,
    #[serde(default = "default_k_open")]
    pub k_open: usize,
    #[serde(default = "default_n_probes")]
    pub n_probes: usize,
    #[serde(default)]
    pub audit_seed: u64,
}

fn default_svip_sessions() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvipResponse {
    pub variant: RoutingVariant,
    pub baseline: Vec<Verdict>,
    pub commit_open: Vec<Verdict>,
    pub baseline_accepted: usize,
    pub commit_open_rejected: usize,
    pub extra_honest_generations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartProviderRequest {
    #[serde(flatten)]
    pub deployment: DeploymentRef,
    #[serde(default)]
    pub provider: LocalProvider,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// Listen address; defaults to an ephemeral loopback port.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listen: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub id: u64,
    pub addr: String,
    pub seed: u64,
    pub provider: LocalProvider,
    pub stats: ProviderStats,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_bodies_take_defaults() {
        let r: AuditRequest = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(r.deployment.seed, 3);
        assert_eq!((r.k_open, r.n_probes, r.blocks, r.sessions), (4, 96, 4, 1));
        assert_eq!(r.local.strategy, Strategy::Honest);
        assert!(r.provider.is_none());

        let r: FprSimRequest = serde_json::from_str(r#"{"k": 4, "alpha": 0.01, "rho": 0.883}"#).unwrap();
        assert_eq!(r.n_sim, 200_000);
    }

    #[test]
    fn enums_use_lowercase_tags() {
        let r: AttackRequest = serde_json::from_str(r#"{"tier": "f3"}"#).unwrap();
        assert_eq!(r.tier, AttackTier::F3);
        let r: SweepRequest = serde_json::from_str(r#"{"mode": "maskflip"}"#).unwrap();
        assert_eq!(r.mode, SweepMode::Maskflip);
    }

    #[test]
    fn sweep_response_round_trips() {
        let r = SweepResponse::K { rows: vec![], csv: "k\n".into() };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains(r#""mode":"k""#));
        assert_eq!(serde_json::from_str::<SweepResponse>(&s).unwrap(), r);
    }
}
