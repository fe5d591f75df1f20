//! The `tracecommit` command line, a thin client of the service.
//!
//! Results go to stdout as CSV rows or JSON records; `--out` also writes the
//! full JSON response (or the library, for `gen-library` and `calibrate`).

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tracecommit_api::*;
use tracecommit_core::probe::ProbeLibrary;
use tracecommit_core::synth::LibrarySpec;
use tracecommit_core::wire::{CommitMode, Misbehavior, RoutingVariant, Strategy};

use crate::Client;

#[derive(Debug, Parser)]
#[command(name = "tracecommit", version, about = "Commit-open trace auditing, via the tracecommit service")]
pub struct Cli {
    /// Service root URL.
    #[arg(long, global = true, env = "TRACECOMMIT_SERVER", default_value = "http://127.0.0.1:8080")]
    pub server: String,
    /// Deployment seed.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Probe library JSON file; `default` uses the seed's generated library.
    #[arg(long, global = true, default_value = "default")]
    pub library: String,
    /// Also write the result to this file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a probe library.
    GenLibrary(GenLibraryArgs),
    /// Calibrate σ and τ and report the honest pool.
    Calibrate {
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
        /// Write the honest pool as CSV.
        #[arg(long)]
        pool_csv: Option<PathBuf>,
    },
    /// Start a framed TCP provider inside the service.
    Serve(ServeArgs),
    /// List providers hosted by the service.
    Providers,
    /// Stop a hosted provider.
    StopProvider { id: u64 },
    /// Audit sessions and emit one verdict record per session.
    Audit(AuditArgs),
    /// Run a forgery tier against the library.
    Attack {
        #[arg(long, value_enum)]
        tier: TierArg,
        /// F0 draws per attack seed.
        #[arg(long, default_value_t = 2000)]
        positions: usize,
    },
    /// Forger lower bounds and the achieved optimum.
    Bounds,
    /// Fit the forger on training probes, score on held-out probes.
    RotateCv {
        #[arg(long, default_value_t = 50)]
        folds: usize,
        #[arg(long, default_value_t = 48)]
        train: usize,
        #[arg(long, default_value_t = 48)]
        test: usize,
    },
    /// Session false-positive rate for k = 1..=K rounds.
    FprSim {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 200_000)]
        n_sim: usize,
    },
    /// Detection sweeps over k, N or mask-flip fraction.
    Sweep {
        #[arg(long, value_enum)]
        mode: SweepArg,
        #[arg(long, default_value_t = 400)]
        samples: usize,
    },
    /// Commit overhead relative to generation.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        batches: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 4)]
        blocks: usize,
        #[arg(long, default_value_t = 4)]
        openings: usize,
    },
    /// Probe-after-return baseline against a routing attacker, next to commit-open.
    Svip {
        #[arg(long, value_enum)]
        variant: RoutingArg,
        #[arg(long, default_value_t = 10)]
        sessions: usize,
    },
}

#[derive(Debug, Args)]
pub struct GenLibraryArgs {
    /// Emit the σ-calibrated library instead of the reference.
    #[arg(long)]
    pub calibrated: bool,
    #[arg(long, default_value_t = 96)]
    pub num_probes: usize,
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    #[arg(long, default_value_t = 16384)]
    pub d_sae: u32,
    #[arg(long, default_value_t = 2.09)]
    pub overlap: f64,
}

#[derive(Debug, Args)]
pub struct ProviderArgs {
    /// a (honest), b (substitute), c (parallel commit) or d[:alpha] (mixture).
    #[arg(long, default_value = "a")]
    pub strategy: Strategy,
    #[arg(long, value_enum, default_value_t = MisbehaviorArg::None)]
    pub misbehavior: MisbehaviorArg,
    /// Skip the commitment and answer probe queries after service.
    #[arg(long)]
    pub probe_after_return: bool,
    /// Answer probe queries from the honest model (implies probe-after-return).
    #[arg(long, value_enum)]
    pub routing: Option<RoutingArg>,
    #[arg(long, default_value_t = 0)]
    pub provider_seed: u64,
}

impl ProviderArgs {
    fn to_local(&self) -> LocalProvider {
        let mode = match (self.probe_after_return, self.routing) {
            (false, None) => CommitMode::CommitOpen,
            (_, routing) => CommitMode::ProbeAfterReturn { routing: routing.map(Into::into) },
        };
        LocalProvider {
            strategy: self.strategy,
            misbehavior: self.misbehavior.into(),
            mode,
            provider_seed: self.provider_seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub provider: ProviderArgs,
    /// Provider listen address; an ephemeral loopback port by default.
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Opening rounds per session.
    #[arg(long = "k", default_value_t = 4)]
    pub k_open: usize,
    /// Probes scored per round.
    #[arg(long, default_value_t = 96)]
    pub n_probes: usize,
    /// Framed TCP provider address; without it the service audits an
    /// in-process provider configured by the provider flags.
    #[arg(long)]
    pub provider: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub sessions: usize,
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    #[arg(long, default_value_t = 0)]
    pub audit_seed: u64,
    #[arg(long, default_value = "audit prompt")]
    pub prompt: String,
    #[command(flatten)]
    pub local: ProviderArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TierArg {
    F0,
    F1,
    F3,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SweepArg {
    K,
    N,
    Maskflip,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RoutingArg {
    PerProbe,
    Batched,
    Cached,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MisbehaviorArg {
    None,
    LateCommit,
    TamperOpening,
    WrongOutputHash,
}

impl From<RoutingArg> for RoutingVariant {
    fn from(r: RoutingArg) -> Self {
        match r {
            RoutingArg::PerProbe => RoutingVariant::PerProbe,
            RoutingArg::Batched => RoutingVariant::Batched,
            RoutingArg::Cached => RoutingVariant::Cached,
        }
    }
}

impl From<MisbehaviorArg> for Misbehavior {
    fn from(m: MisbehaviorArg) -> Self {
        match m {
            MisbehaviorArg::None => Misbehavior::None,
            MisbehaviorArg::LateCommit => Misbehavior::LateCommit,
            MisbehaviorArg::TamperOpening => Misbehavior::TamperOpening,
            MisbehaviorArg::WrongOutputHash => Misbehavior::WrongOutputHash,
        }
    }
}

impl From<TierArg> for AttackTier {
    fn from(t: TierArg) -> Self {
        match t {
            TierArg::F0 => AttackTier::F0,
            TierArg::F1 => AttackTier::F1,
            TierArg::F3 => AttackTier::F3,
            TierArg::All => AttackTier::All,
        }
    }
}

impl From<SweepArg> for SweepMode {
    fn from(m: SweepArg) -> Self {
        match m {
            SweepArg::K => SweepMode::K,
            SweepArg::N => SweepMode::N,
            SweepArg::Maskflip => SweepMode::Maskflip,
        }
    }
}

/// How a successful command ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// At least one audited session was rejected.
    Rejected,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::Rejected => 2,
        }
    }
}

fn deployment(cli: &Cli) -> anyhow::Result<DeploymentRef> {
    let library = match cli.library.as_str() {
        "default" => None,
        path => Some(ProbeLibrary::load(Path::new(path)).with_context(|| format!("loading library {path}"))?),
    };
    Ok(DeploymentRef { seed: cli.seed, library })
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn json<T: Serialize>(v: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Prints `stdout`, and writes `file` to `--out` when given.
fn emit(cli: &Cli, w: &mut impl Write, stdout: &str, file: impl FnOnce() -> anyhow::Result<String>) -> anyhow::Result<()> {
    w.write_all(stdout.as_bytes())?;
    if let Some(path) = &cli.out {
        write_file(path, &file()?)?;
    }
    Ok(())
}

pub async fn run(cli: Cli, w: &mut impl Write) -> anyhow::Result<Outcome> {
    let client = Client::new(&cli.server);
    match &cli.command {
        Command::GenLibrary(a) => {
            let spec = LibrarySpec { d_sae: a.d_sae, num_probes: a.num_probes, k: a.k, overlap_target: a.overlap };
            let req = GenerateLibraryRequest { seed: cli.seed, spec, calibrated: a.calibrated };
            let r = client.generate_library(&req).await?;
            let library = r.library.to_json()?;
            match &cli.out {
                Some(path) => {
                    write_file(path, &library)?;
                    writeln!(w, "{}", serde_json::to_string(&r.membership)?)?;
                }
                None => writeln!(w, "{library}")?,
            }
        }
        Command::Calibrate { confidence, pool_csv } => {
            let r = client.calibrate(&CalibrateRequest { deployment: deployment(&cli)?, confidence: *confidence }).await?;
            let summary = serde_json::json!({
                "threshold": r.threshold,
                "sigma_floor_fraction": r.sigma_floor_fraction,
                "gaussian_p99": r.gaussian_p99,
                "student_t5_p99": r.student_t5_p99,
                "rho": r.rho,
            });
            if let Some(path) = pool_csv {
                write_file(path, &r.pool_csv)?;
            }
            emit(&cli, w, &json(&summary)?, || Ok(r.library.to_json()?))?;
        }
        Command::Serve(a) => {
            let req = StartProviderRequest {
                deployment: deployment(&cli)?,
                provider: a.provider.to_local(),
                blocks: a.blocks,
                listen: a.listen.clone(),
            };
            let r = client.start_provider(&req).await?;
            emit(&cli, w, &format!("{}\n", serde_json::to_string(&r)?), || json(&r))?;
        }
        Command::Providers => {
            let r = client.providers().await?;
            let lines: String = r.iter().map(|p| serde_json::to_string(p).map(|s| s + "\n")).collect::<Result<_, _>>()?;
            emit(&cli, w, &lines, || json(&r))?;
        }
        Command::StopProvider { id } => {
            let r = client.stop_provider(*id).await?;
            emit(&cli, w, &format!("{}\n", serde_json::to_string(&r)?), || json(&r))?;
        }
        Command::Audit(a) => {
            let req = AuditRequest {
                deployment: deployment(&cli)?,
                k_open: a.k_open,
                n_probes: a.n_probes,
                blocks: a.blocks,
                sessions: a.sessions,
                prompt: a.prompt.clone(),
                audit_seed: a.audit_seed,
                provider: a.provider.clone(),
                local: a.local.to_local(),
            };
            let r = client.audit(&req).await?;
            let lines: String =
                r.verdicts.iter().map(|v| serde_json::to_string(v).map(|s| s + "\n")).collect::<Result<_, _>>()?;
            emit(&cli, w, &lines, || json(&r))?;
            if r.rejected > 0 {
                return Ok(Outcome::Rejected);
            }
        }
        Command::Attack { tier, positions } => {
            let req = AttackRequest {
                deployment: deployment(&cli)?,
                tier: (*tier).into(),
                positions: *positions,
                attack_seeds: vec![0, 1, 2, 3, 4],
            };
            let r = client.attack(&req).await?;
            let mut csv = String::from("tier,samples,min,median,max,times_tau\n");
            for row in &r.rows {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    row.tier, row.samples, row.min, row.median, row.max, row.times_tau
                ));
            }
            emit(&cli, w, &csv, || json(&r))?;
        }
        Command::Bounds => {
            let r = client.bounds(&deployment(&cli)?).await?;
            emit(&cli, w, &json(&r)?, || json(&r))?;
        }
        Command::RotateCv { folds, train, test } => {
            let req = RotateCvRequest {
                deployment: deployment(&cli)?,
                folds: *folds,
                train: *train,
                test: *test,
                cv_seed: cli.seed,
            };
            let r = client.rotate_cv(&req).await?;
            let mut csv = String::from("fold,train_z,test_z,test_bound\n");
            for (i, f) in r.report.folds.iter().enumerate() {
                csv.push_str(&format!("{i},{},{},{}\n", f.train_z, f.test_z, f.test_bound));
            }
            emit(&cli, w, &csv, || json(&r))?;
        }
        Command::FprSim { k, alpha, rho, n_sim } => {
            let req = FprSimRequest { k: *k, alpha: *alpha, rho: *rho, n_sim: *n_sim, seed: cli.seed };
            let r = client.fpr_sim(&req).await?;
            emit(&cli, w, &r.csv, || json(&r))?;
        }
        Command::Sweep { mode, samples } => {
            let req = SweepRequest {
                deployment: deployment(&cli)?,
                mode: (*mode).into(),
                samples: *samples,
                sweep_seed: cli.seed,
                ks: vec![],
                ns: vec![],
                alphas: vec![],
                fractions: vec![],
            };
            let r = client.sweep(&req).await?;
            emit(&cli, w, r.csv(), || json(&r))?;
        }
        Command::Bench { batches, trials, blocks, openings } => {
            let req = BenchRequest {
                seed: cli.seed,
                batch_sizes: batches.clone(),
                blocks: *blocks,
                openings: *openings,
                trials: *trials,
            };
            let r = client.bench(&req).await?;
            emit(&cli, w, &r.to_csv(), || json(&r))?;
        }
        Command::Svip { variant, sessions } => {
            let req = SvipRequest {
                deployment: deployment(&cli)?,
                variant: (*variant).into(),
                sessions: *sessions,
                k_open: 4,
                n_probes: 96,
                audit_seed: cli.seed,
            };
            let r = client.svip(&req).await?;
            let line = format!(
                "variant={:?} sessions={} baseline_accepted={} commit_open_rejected={} extra_honest_generations={}\n",
                r.variant, sessions, r.baseline_accepted, r.commit_open_rejected, r.extra_honest_generations
            );
            emit(&cli, w, &line, || json(&r))?;
        }
    }
    Ok(Outcome::Success)
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn provider_flags_select_commit_mode() {
        let cli = Cli::try_parse_from(["tracecommit", "serve", "--strategy", "b", "--routing", "batched"]).unwrap();
        let Command::Serve(a) = cli.command else { panic!() };
        let local = a.provider.to_local();
        assert_eq!(local.strategy, Strategy::Substitute);
        assert_eq!(local.mode, CommitMode::ProbeAfterReturn { routing: Some(RoutingVariant::Batched) });

        let cli = Cli::try_parse_from(["tracecommit", "audit", "--strategy", "d:0.3", "--k", "2"]).unwrap();
        let Command::Audit(a) = cli.command else { panic!() };
        assert_eq!(a.k_open, 2);
        assert_eq!(a.local.to_local().strategy, Strategy::Mixture { alpha: 0.3 });
        assert_eq!(a.local.to_local().mode, CommitMode::CommitOpen);
    }

    #[test]
    fn global_flags_follow_subcommands() {
        let cli = Cli::try_parse_from(["tracecommit", "bounds", "--seed", "9", "--library", "x.json"]).unwrap();
        assert_eq!(cli.seed, 9);
        assert_eq!(cli.library, "x.json");
        assert_eq!(Outcome::Rejected.exit_code(), 2);
    }
}
