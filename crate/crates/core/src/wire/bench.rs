//! Wall-clock cost of committing traces, relative to generating them.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::plan::SessionPlan;
use crate::error::{Error, Result};
use crate::hashrng::hash_words;
use crate::merkle::{encode_opening_payload, sha256, LeafHasher, MerkleTree, OPENING_PAYLOAD_BYTES};
use crate::synth::{fleet_tuples, Deployment, TraceModel};
use crate::types::{sketch_from_sparse, SessionMeta};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub batch: usize,
    pub trials: usize,
    pub gen_mean_s: f64,
    pub gen_sd_s: f64,
    pub total_mean_s: f64,
    pub total_sd_s: f64,
    /// Mean of (generation + commit) over mean generation.
    pub ratio: f64,
    pub per_item_commit_s: f64,
    pub per_item_commit_sd_s: f64,
    pub payload_bytes_per_opening: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub positions: u64,
    pub openings_per_batch: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "batch,trials,gen_mean_s,gen_sd_s,total_mean_s,total_sd_s,ratio,per_item_commit_s,per_item_commit_sd_s,payload_bytes_per_opening\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.4},{:.6e},{:.6e},{}\n",
                r.batch,
                r.trials,
                r.gen_mean_s,
                r.gen_sd_s,
                r.total_mean_s,
                r.total_sd_s,
                r.ratio,
                r.per_item_commit_s,
                r.per_item_commit_sd_s,
                r.payload_bytes_per_opening
            ));
        }
        out
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Times generation alone, then sketching, leaf hashing, one Merkle tree per
/// batch and `openings_per_batch` encoded openings, for each batch size.
pub fn bench_commit(
    deployment: &Deployment,
    batch_sizes: &[usize],
    plan: SessionPlan,
    openings_per_batch: usize,
    trials: usize,
    seed: u64,
) -> Result<BenchReport> {
    if trials == 0 || batch_sizes.contains(&0) {
        return Err(Error::InvalidParameter("trials and batch sizes must be >= 1".into()));
    }
    let backend = &deployment.backend;
    let tuples = fleet_tuples(&deployment.fleet);
    let t_len = plan.num_positions();
    let d_sae = backend.d_sae() as usize;
    let k = backend.k();
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        let mut gen = Vec::with_capacity(trials);
        let mut total = Vec::with_capacity(trials);
        let mut per_item = Vec::with_capacity(trials);
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&[seed, b as u64, trial as u64]));
            let config = tuples[trial % tuples.len()];

            let start = Instant::now();
            let mut sparse = Vec::with_capacity(b * t_len as usize);
            for _ in 0..b {
                for t in 0..t_len {
                    let cfg = config.at_position(plan.backend_position(plan.block_of(t)));
                    sparse.push(backend.gen_sparse(&TraceModel::Honest, plan.probe_of(t), &cfg, &mut rng)?);
                }
            }
            let gen_s = start.elapsed().as_secs_f64();

            let start = Instant::now();
            let mut leaves = Vec::with_capacity(sparse.len());
            let mut sketches = Vec::with_capacity(sparse.len());
            for (i, request) in sparse.chunks(t_len as usize).enumerate() {
                let meta = SessionMeta {
                    model_id: b"bench".to_vec(),
                    sae_release: b"bench".to_vec(),
                    layer: 0,
                    input_hash: sha256(&(i as u64).to_be_bytes()),
                    output_hash: [0; 32],
                    nonce: [0; 16],
                    provider_pubkey: [0; 32],
                };
                let hasher = LeafHasher::new(&meta)?;
                for (t, s) in request.iter().enumerate() {
                    let sketch = sketch_from_sparse(s, d_sae, k)?;
                    leaves.push(hasher.leaf(t as u64, &sketch));
                    sketches.push(sketch);
                }
            }
            let tree = MerkleTree::build(leaves)?;
            let root = tree.root();
            let mut payload_bytes = 0;
            for j in 0..openings_per_batch {
                let t = (j * sketches.len() / openings_per_batch.max(1)) as u64;
                let path = tree.prove(t)?;
                let payload = encode_opening_payload(&root, &sketches[t as usize])?;
                payload_bytes += payload.len();
                std::hint::black_box(&path);
            }
            std::hint::black_box(payload_bytes);
            let commit_s = start.elapsed().as_secs_f64();

            gen.push(gen_s);
            total.push(gen_s + commit_s);
            per_item.push(commit_s / b as f64);
        }
        let (gm, gs) = mean_sd(&gen);
        let (tm, ts) = mean_sd(&total);
        let (pm, ps) = mean_sd(&per_item);
        rows.push(BenchRow {
            batch: b,
            trials,
            gen_mean_s: gm,
            gen_sd_s: gs,
            total_mean_s: tm,
            total_sd_s: ts,
            ratio: tm / gm,
            per_item_commit_s: pm,
            per_item_commit_sd_s: ps,
            payload_bytes_per_opening: OPENING_PAYLOAD_BYTES,
        });
    }
    Ok(BenchReport { positions: t_len, openings_per_batch, rows })
}
