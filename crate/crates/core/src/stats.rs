//! Session-level statistics: false-positive rates under within-session
//! correlation, sequential testing, ROC summaries and parameter sweeps.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::forgery::median_of;
use crate::hashrng::hash_words;
use crate::probe::{bound_joint_z, mask_flip, probe_z, reaggregate_k, HonestPool, ProbeLibrary};
use crate::synth::{fleet_tuples, Deployment, TraceModel};
use crate::types::TraceSketch;

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Mean off-diagonal Pearson correlation of joint scores across positions,
/// over (dtype, kernel, seed) tuples that cover every observed position.
pub fn estimate_rho(pool: &HonestPool) -> Result<f64> {
    let mut positions: Vec<u8> = pool.draws.iter().map(|d| d.config.position).collect();
    positions.sort_unstable();
    positions.dedup();
    if positions.len() < 2 {
        return Err(Error::InvalidParameter("pool needs at least two positions".into()));
    }
    let mut tuples: BTreeMap<_, BTreeMap<u8, (f64, usize)>> = BTreeMap::new();
    for d in &pool.draws {
        let slot = tuples.entry(d.config.tuple()).or_default().entry(d.config.position).or_insert((0.0, 0));
        slot.0 += d.joint_z;
        slot.1 += 1;
    }
    let complete: Vec<Vec<f64>> = tuples
        .values()
        .filter(|by_pos| by_pos.len() == positions.len())
        .map(|by_pos| by_pos.values().map(|(s, n)| s / *n as f64).collect())
        .collect();
    if complete.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "need at least 3 complete tuples, found {}",
            complete.len()
        )));
    }
    let cols: Vec<Vec<f64>> = (0..positions.len()).map(|p| complete.iter().map(|row| row[p]).collect()).collect();
    let mut acc = 0.0;
    let mut pairs = 0;
    for a in 0..cols.len() {
        for b in a + 1..cols.len() {
            acc += pearson(&cols[a], &cols[b])
                .ok_or_else(|| Error::InvalidParameter("a position column has zero variance".into()))?;
            pairs += 1;
        }
    }
    Ok(acc / pairs as f64)
}

/// Any-exceedance rate of one audited session under three dependence models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionFprReport {
    pub k: usize,
    pub alpha: f64,
    pub rho: f64,
    pub union: f64,
    pub independent: f64,
    pub copula: f64,
    pub copula_se: f64,
    pub n_sim: usize,
}

fn check_fpr_args(k: usize, alpha: f64, rho: f64, n_sim: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} not in (0, 1)")));
    }
    let rho_min = if k > 1 { -1.0 / (k as f64 - 1.0) } else { -1.0 };
    if !(rho > rho_min && rho < 1.0) {
        return Err(Error::InvalidParameter(format!("rho {rho} outside ({rho_min}, 1) for k = {k}")));
    }
    if n_sim == 0 {
        return Err(Error::InvalidParameter("n_sim must be >= 1".into()));
    }
    Ok(())
}

impl SessionFprReport {
    fn with_copula(k: usize, alpha: f64, rho: f64, hits: usize, n_sim: usize) -> Self {
        let copula = hits as f64 / n_sim as f64;
        SessionFprReport {
            k,
            alpha,
            rho,
            union: (k as f64 * alpha).min(1.0),
            independent: 1.0 - (1.0 - alpha).powi(k as i32),
            copula,
            copula_se: (copula * (1.0 - copula) / n_sim as f64).sqrt(),
            n_sim,
        }
    }
}

pub fn session_fpr<R: Rng + ?Sized>(k: usize, alpha: f64, rho: f64, n_sim: usize, rng: &mut R) -> Result<SessionFprReport> {
    check_fpr_args(k, alpha, rho, n_sim)?;
    let threshold = Normal::standard().inverse_cdf(1.0 - alpha);
    let kf = k as f64;
    let a = (1.0 - rho).sqrt();
    // ρ ≥ 0: one common factor. ρ < 0: shift toward the sample mean, which
    // reaches any equicorrelation above −1/(k−1).
    let (common_w, mean_w) = if rho >= 0.0 { (rho.sqrt(), 0.0) } else { (0.0, -a + (a * a + kf * rho).sqrt()) };
    let mut z = vec![0.0f64; k];
    let mut hits = 0usize;
    for _ in 0..n_sim {
        let common: f64 = StandardNormal.sample(rng);
        let mut sum = 0.0;
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(rng);
            sum += *zi;
        }
        let mean = sum / kf;
        if z.iter().any(|zi| a * zi + common_w * common + mean_w * mean > threshold) {
            hits += 1;
        }
    }
    Ok(SessionFprReport::with_copula(k, alpha, rho, hits, n_sim))
}

/// Session FPR rows for `k = 1..=max_k`. For `ρ ≥ 0` all rows share one
/// simulation (the first `k` coordinates of each draw), so the copula column
/// is nondecreasing in `k`; negative `ρ` runs each row separately.
pub fn fpr_table(max_k: usize, alpha: f64, rho: f64, n_sim: usize, seed: u64) -> Result<Vec<SessionFprReport>> {
    // The largest k has the tightest lower limit on rho.
    check_fpr_args(max_k, alpha, rho, n_sim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rho < 0.0 {
        return (1..=max_k).map(|k| session_fpr(k, alpha, rho, n_sim, &mut rng)).collect();
    }
    let threshold = Normal::standard().inverse_cdf(1.0 - alpha);
    let (a, c) = ((1.0 - rho).sqrt(), rho.sqrt());
    let mut hits = vec![0usize; max_k];
    for _ in 0..n_sim {
        let common: f64 = StandardNormal.sample(&mut rng);
        let mut first = None;
        for j in 0..max_k {
            let z: f64 = StandardNormal.sample(&mut rng);
            if first.is_none() && a * z + c * common > threshold {
                first = Some(j);
            }
        }
        if let Some(j) = first {
            for h in &mut hits[j..] {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().enumerate().map(|(j, h)| SessionFprReport::with_copula(j + 1, alpha, rho, h, n_sim)).collect())
}

/// Exact one-factor any-exceedance probability for `ρ ∈ [0, 1)`:
/// `1 − ∫ φ(z) Φ((c − √ρ z)/√(1−ρ))^k dz`, by composite Simpson on [−10, 10].
pub fn copula_exact(k: usize, alpha: f64, rho: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) || !(alpha > 0.0 && alpha < 1.0) || k == 0 {
        return Err(Error::InvalidParameter(format!("copula_exact needs k >= 1, alpha in (0,1), rho in [0,1); got {k}, {alpha}, {rho}")));
    }
    let n01 = Normal::standard();
    let c = n01.inverse_cdf(1.0 - alpha);
    let (sr, sq) = (rho.sqrt(), (1.0 - rho).sqrt());
    let f = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() * n01.cdf((c - sr * z) / sq).powi(k as i32);
    let steps = 4000;
    let h = 20.0 / steps as f64;
    let mut acc = f(-10.0) + f(10.0);
    for i in 1..steps {
        acc += f(-10.0 + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    Ok(1.0 - acc * h / 3.0)
}

pub fn fpr_csv(rows: &[SessionFprReport]) -> String {
    let mut out = String::from("k,alpha,rho,union,independent,copula,copula_se,n_sim\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.k, r.alpha, r.rho, r.union, r.independent, r.copula, r.copula_se, r.n_sim
        ));
    }
    out
}

/// Holm step-down level for the `n`-th smallest of `total` p-values.
pub fn holm_alpha(n: usize, total: usize, alpha: f64) -> Result<f64> {
    if n == 0 || n > total {
        return Err(Error::InvalidParameter(format!("test index {n} not in 1..={total}")));
    }
    Ok(alpha / (total - n + 1) as f64)
}

/// Holm step-down rejections, aligned with the input order.
pub fn holm_reject(p_values: &[f64], alpha: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..p_values.len()).collect();
    order.sort_by(|&a, &b| p_values[a].partial_cmp(&p_values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![false; p_values.len()];
    for (rank, &i) in order.iter().enumerate() {
        if p_values[i] <= alpha / (p_values.len() - rank) as f64 {
            out[i] = true;
        } else {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianModel {
    pub mean: f64,
    pub sd: f64,
}

impl GaussianModel {
    fn log_pdf(&self, x: f64) -> f64 {
        -self.sd.ln() - 0.5 * ((x - self.mean) / self.sd).powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SprtConfig {
    pub alpha: f64,
    pub beta: f64,
    pub honest: GaussianModel,
    pub attacker: GaussianModel,
    pub max_n: usize,
}

impl SprtConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v < 0.5) {
                return Err(Error::InvalidParameter(format!("{name} {v} not in (0, 0.5)")));
            }
        }
        if !(self.honest.sd > 0.0 && self.attacker.sd > 0.0) {
            return Err(Error::InvalidParameter("model sd must be positive".into()));
        }
        if self.max_n == 0 {
            return Err(Error::InvalidParameter("max_n must be >= 1".into()));
        }
        Ok(())
    }

    /// `(log β/(1−α), log (1−β)/α)`.
    pub fn boundaries(&self) -> (f64, f64) {
        ((self.beta / (1.0 - self.alpha)).ln(), ((1.0 - self.beta) / self.alpha).ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SprtDecision {
    Honest,
    Attacker,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SprtOutcome {
    pub decision: SprtDecision,
    pub n_used: usize,
    pub llr: f64,
}

/// Wald's sequential test of the attacker model against the honest model.
pub fn sprt_run<I: IntoIterator<Item = f64>>(observations: I, config: &SprtConfig) -> Result<SprtOutcome> {
    config.validate()?;
    let (lower, upper) = config.boundaries();
    let mut llr = 0.0;
    let mut n = 0;
    for x in observations.into_iter().take(config.max_n) {
        n += 1;
        llr += config.attacker.log_pdf(x) - config.honest.log_pdf(x);
        if llr >= upper {
            return Ok(SprtOutcome { decision: SprtDecision::Attacker, n_used: n, llr });
        }
        if llr <= lower {
            return Ok(SprtOutcome { decision: SprtDecision::Honest, n_used: n, llr });
        }
    }
    Ok(SprtOutcome { decision: SprtDecision::Inconclusive, n_used: n, llr })
}

/// `P(attacker > honest) + ½ P(tie)` via average ranks.
pub fn auc(honest: &[f64], attacker: &[f64]) -> Result<f64> {
    if honest.is_empty() || attacker.is_empty() {
        return Err(Error::Empty("auc sample"));
    }
    if honest.iter().chain(attacker).any(|x| x.is_nan()) {
        return Err(Error::InvalidParameter("auc samples must not contain NaN".into()));
    }
    let mut all: Vec<(f64, bool)> =
        honest.iter().map(|&x| (x, false)).chain(attacker.iter().map(|&x| (x, true))).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("no NaN"));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (na, nh) = (attacker.len() as f64, honest.len() as f64);
    Ok((rank_sum - na * (na + 1.0) / 2.0) / (na * nh))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NSweepRow {
    pub alpha: f64,
    pub n: usize,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NSweepReport {
    pub samples: usize,
    pub rows: Vec<NSweepRow>,
    /// Per mixture weight: AUC at the largest N minus AUC at the smallest.
    pub delta_auc: Vec<(f64, f64)>,
}

impl NSweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,n,auc\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6}\n", r.alpha, r.n, r.auc));
        }
        out
    }

    pub fn curve(&self, alpha: f64) -> Vec<(usize, f64)> {
        self.rows.iter().filter(|r| r.alpha == alpha).map(|r| (r.n, r.auc)).collect()
    }
}

pub const DEFAULT_SWEEP_ALPHAS: [f64; 6] = [0.0, 0.005, 0.01, 0.02, 0.05, 1.0];
pub const DEFAULT_SWEEP_NS: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 96];

/// Mean of probe-bound scores over the first `n` probes of `order`.
fn prefix_scores(block: &[TraceSketch], library: &ProbeLibrary, order: &[usize], ns: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ns.len());
    let mut acc = 0.0;
    let mut done = 0;
    for &n in ns {
        while done < n {
            let i = order[done];
            acc += probe_z(&block[i], &library.probes()[i]);
            done += 1;
        }
        out.push(acc / n as f64);
    }
    out
}

/// AUC of honest versus mixture rounds for each mixture weight and subset
/// size. Each sample draws one serving tuple and position, one probe order
/// shared by every `N` (prefixes), and independent honest and attacker blocks.
pub fn n_sweep(deployment: &Deployment, alphas: &[f64], ns: &[usize], samples: usize, seed: u64) -> Result<NSweepReport> {
    let p = deployment.library.len();
    let mut ns_sorted = ns.to_vec();
    ns_sorted.sort_unstable();
    ns_sorted.dedup();
    if ns_sorted.is_empty() || ns_sorted[0] == 0 || *ns_sorted.last().unwrap() > p {
        return Err(Error::InvalidParameter(format!("subset sizes must lie in 1..={p}")));
    }
    if samples == 0 || alphas.is_empty() {
        return Err(Error::InvalidParameter("need at least one sample and one mixture weight".into()));
    }
    let tuples = fleet_tuples(&deployment.fleet);
    let backend = &deployment.backend;
    let lib = &deployment.library;
    let mut honest: Vec<Vec<f64>> = vec![Vec::with_capacity(samples); ns_sorted.len()];
    let mut attacker: Vec<Vec<Vec<f64>>> = vec![vec![Vec::with_capacity(samples); ns_sorted.len()]; alphas.len()];
    let mut order: Vec<usize> = (0..p).collect();
    for j in 0..samples {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&[seed, 0x5EE9, j as u64]));
        let config = tuples[rng.random_range(0..tuples.len())].at_position(rng.random_range(0..4));
        order.shuffle(&mut rng);
        let h = backend.gen_block(&TraceModel::Honest, &config, &mut rng)?;
        for (n, z) in prefix_scores(&h, lib, &order, &ns_sorted).into_iter().enumerate() {
            honest[n].push(z);
        }
        let attack_seed = rng.random::<u64>();
        for (a, &alpha) in alphas.iter().enumerate() {
            let mut arng = ChaCha8Rng::seed_from_u64(attack_seed);
            let block = backend.gen_block(&TraceModel::mixture(alpha), &config, &mut arng)?;
            for (n, z) in prefix_scores(&block, lib, &order, &ns_sorted).into_iter().enumerate() {
                attacker[a][n].push(z);
            }
        }
    }
    let mut rows = Vec::new();
    let mut delta_auc = Vec::new();
    for (a, &alpha) in alphas.iter().enumerate() {
        let mut curve = Vec::with_capacity(ns_sorted.len());
        for (n, &size) in ns_sorted.iter().enumerate() {
            let v = auc(&honest[n], &attacker[a][n])?;
            curve.push(v);
            rows.push(NSweepRow { alpha, n: size, auc: v });
        }
        delta_auc.push((alpha, curve[curve.len() - 1] - curve[0]));
    }
    Ok(NSweepReport { samples, rows, delta_auc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub honest_median: f64,
    pub honest_max: f64,
    pub attacker_median: Option<f64>,
    pub auc: Option<f64>,
}

fn reaggregated(pool: &HonestPool, k: usize) -> Result<Vec<f64>> {
    pool.draws
        .iter()
        .map(|d| {
            let slots = d.slot_z.as_ref().ok_or(Error::InvalidParameter("pool lacks per-slot arrays".into()))?;
            reaggregate_k(slots, k)
        })
        .collect()
}

/// Re-aggregates stored per-slot terms at narrower widths.
pub fn k_sweep(honest: &HonestPool, attacker: Option<&HonestPool>, ks: &[usize]) -> Result<Vec<KSweepRow>> {
    ks.iter()
        .map(|&k| {
            let h = reaggregated(honest, k)?;
            let a = attacker.map(|p| reaggregated(p, k)).transpose()?;
            Ok(KSweepRow {
                k,
                honest_median: median_of(&h),
                honest_max: h.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                attacker_median: a.as_ref().map(|a| median_of(a)),
                auc: a.as_ref().map(|a| auc(&h, a)).transpose()?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskFlipRow {
    pub fraction: f64,
    pub honest_median: f64,
    pub honest_max: f64,
    pub attacker_median: f64,
    pub auc: f64,
}

/// Scores honest and full-strength substitute blocks against libraries whose
/// supports were partly randomized.
pub fn mask_flip_sweep(deployment: &Deployment, fractions: &[f64], samples: usize, seed: u64) -> Result<Vec<MaskFlipRow>> {
    let tuples = fleet_tuples(&deployment.fleet);
    let all: Vec<usize> = (0..deployment.library.len()).collect();
    let mut blocks = Vec::with_capacity(samples);
    for j in 0..samples {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&[seed, 0xF11B, j as u64]));
        let config = tuples[j % tuples.len()].at_position((j / tuples.len() % 4) as u8);
        let h = deployment.backend.gen_block(&TraceModel::Honest, &config, &mut rng)?;
        let a = deployment.backend.gen_block(&TraceModel::substitute(), &config, &mut rng)?;
        blocks.push((h, a));
    }
    fractions
        .iter()
        .map(|&f| {
            let lib = mask_flip(&deployment.library, f, hash_words(&[seed, f.to_bits()]))?;
            let mut h = Vec::with_capacity(samples);
            let mut a = Vec::with_capacity(samples);
            for (hb, ab) in &blocks {
                h.push(bound_joint_z(hb, &lib, &all)?);
                a.push(bound_joint_z(ab, &lib, &all)?);
            }
            Ok(MaskFlipRow {
                fraction: f,
                honest_median: median_of(&h),
                honest_max: h.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                attacker_median: median_of(&a),
                auc: auc(&h, &a)?,
            })
        })
        .collect()
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn k_sweep_csv(rows: &[KSweepRow]) -> String {
    let mut out = String::from("k,honest_median,honest_max,attacker_median,auc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{}\n",
            r.k,
            r.honest_median,
            r.honest_max,
            opt(r.attacker_median),
            opt(r.auc)
        ));
    }
    out
}

pub fn mask_flip_csv(rows: &[MaskFlipRow]) -> String {
    let mut out = String::from("fraction,honest_median,honest_max,attacker_median,auc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.fraction, r.honest_median, r.honest_max, r.attacker_median, r.auc
        ));
    }
    out
}
