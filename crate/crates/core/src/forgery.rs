//! Feature-forgery attacks on a probe library and their lower bounds.
//!
//! A forger fabricates one width-k sketch without running the model and is
//! scored against every probe. Each feature `f` contributes a separable gain
//!
//! ```text
//! G(f, v) = Σ_{(i,s) ∈ ℰ(f)} (|μ_is| − |v − μ_is|) / σ_is
//! ```
//!
//! so the optimal fabrication (tier F3) takes the k features with the largest
//! best-value gains. F0 and F1 are naive baselines.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{joint_z_all, ProbeLibrary};
use crate::types::{Bf16Value, FeatureIndex, SketchEntry, TraceSketch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occurrence {
    pub probe: usize,
    pub slot: usize,
    pub mu: f64,
    pub sigma: f64,
}

/// Where each support feature occurs across the library.
#[derive(Debug, Clone, PartialEq)]
pub struct OccurrenceMap {
    by_feature: BTreeMap<u32, Vec<Occurrence>>,
    num_probes: usize,
    k: usize,
    ratio_sum: f64,
    ratio_median: f64,
}

impl OccurrenceMap {
    pub fn new(library: &ProbeLibrary) -> Self {
        let mut by_feature: BTreeMap<u32, Vec<Occurrence>> = BTreeMap::new();
        let mut ratios = Vec::with_capacity(library.len() * library.k());
        for (i, p) in library.probes().iter().enumerate() {
            for (s, f) in p.support.iter().enumerate() {
                by_feature.entry(f.0).or_default().push(Occurrence {
                    probe: i,
                    slot: s,
                    mu: p.mu[s],
                    sigma: p.sigma[s],
                });
                ratios.push(p.mu[s].abs() / p.sigma[s]);
            }
        }
        let ratio_sum = ratios.iter().sum();
        ratios.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
        let n = ratios.len();
        let ratio_median = if n % 2 == 1 { ratios[n / 2] } else { 0.5 * (ratios[n / 2 - 1] + ratios[n / 2]) };
        OccurrenceMap { by_feature, num_probes: library.len(), k: library.k(), ratio_sum, ratio_median }
    }

    /// Number of distinct support features `U`.
    pub fn union(&self) -> usize {
        self.by_feature.len()
    }

    /// Mean number of probes per union feature.
    pub fn mean_multiplicity(&self) -> f64 {
        (self.num_probes * self.k) as f64 / self.union() as f64
    }

    /// Median over all slots of `|μ| / σ`.
    pub fn slot_ratio_median(&self) -> f64 {
        self.ratio_median
    }

    /// `Σ |μ| / σ` over all slots: the score numerator of an empty sketch.
    pub fn ratio_sum(&self) -> f64 {
        self.ratio_sum
    }

    pub fn num_probes(&self) -> usize {
        self.num_probes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, f: FeatureIndex) -> Option<&[Occurrence]> {
        self.by_feature.get(&f.0).map(Vec::as_slice)
    }

    pub fn features(&self) -> impl Iterator<Item = (FeatureIndex, &[Occurrence])> {
        self.by_feature.iter().map(|(&f, v)| (FeatureIndex(f), v.as_slice()))
    }
}

/// A minimizer of `Σ w · |v − μ|`, the lower endpoint when the minimizers
/// form an interval.
pub fn weighted_median(points: &[(f64, f64)]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("weighted median points"));
    }
    if points.iter().any(|&(v, w)| !v.is_finite() || !(w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidParameter("weighted median needs finite values and positive weights".into()));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));
    let total: f64 = sorted.iter().map(|p| p.1).sum();
    let mut cum = 0.0;
    for &(v, w) in &sorted {
        cum += w;
        if 2.0 * cum >= total {
            return Ok(v);
        }
    }
    Ok(sorted[sorted.len() - 1].0)
}

fn gain_at(occ: &[Occurrence], v: f64) -> f64 {
    occ.iter().map(|o| (o.mu.abs() - (v - o.mu).abs()) / o.sigma).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureGain {
    pub feature: FeatureIndex,
    /// Unquantized weighted median of the occurrence values.
    pub median: f64,
    /// Committed value: the better of the two bf16 neighbours of `median`.
    pub value: Bf16Value,
    pub gain: f64,
}

/// Best committed value and gain for one feature.
///
/// The penalty is convex and piecewise linear, so over the bf16 grid it is
/// minimized at one of the two grid points bracketing the weighted median.
/// On a tie the lower value wins.
pub fn feature_gain(f: FeatureIndex, occ: &OccurrenceMap) -> Result<FeatureGain> {
    let list = occ.get(f).ok_or(Error::AbsentFeature(f.0))?;
    gain_for(f, list)
}

fn gain_for(f: FeatureIndex, list: &[Occurrence]) -> Result<FeatureGain> {
    let points: Vec<(f64, f64)> = list.iter().map(|o| (o.mu, 1.0 / o.sigma)).collect();
    let median = weighted_median(&points)?;
    let (lo, hi) = Bf16Value::bracket(median)?;
    let (g_lo, g_hi) = (gain_at(list, lo.to_f64()), gain_at(list, hi.to_f64()));
    let (value, gain) = if g_hi > g_lo { (hi, g_hi) } else { (lo, g_lo) };
    Ok(FeatureGain { feature: f, median, value, gain })
}

/// All feature gains, best first (ties toward the lower feature index).
pub fn ranked_gains(occ: &OccurrenceMap) -> Result<Vec<FeatureGain>> {
    let mut gains = occ.features().map(|(f, list)| gain_for(f, list)).collect::<Result<Vec<_>>>()?;
    gains.sort_by(|a, b| b.gain.partial_cmp(&a.gain).expect("finite gains").then(a.feature.cmp(&b.feature)));
    Ok(gains)
}

/// Forger lower bounds from library statistics alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCertificate {
    pub union: usize,
    pub k: usize,
    pub mean_multiplicity: f64,
    pub c: f64,
    /// `(1 − k/U) · c`.
    pub prop: f64,
    /// `max(0, 1 − k·m̄/U) · c`.
    pub mult: f64,
    /// Whether the prop form lies above the achieved optimum on this library.
    pub prop_exceeds_achieved: Option<bool>,
}

/// Both bound forms from raw statistics. A union no larger than k makes
/// both bounds vacuous (zero).
pub fn bounds_from_stats(union: f64, k: usize, mean_multiplicity: f64, c: f64) -> (f64, f64) {
    let k = k as f64;
    if union <= k {
        return (0.0, 0.0);
    }
    let prop = (1.0 - k / union) * c;
    let mult = (1.0 - k * mean_multiplicity / union).max(0.0) * c;
    (prop, mult)
}

pub fn lower_bound_prop(occ: &OccurrenceMap, k: usize) -> f64 {
    bounds_from_stats(occ.union() as f64, k, occ.mean_multiplicity(), occ.slot_ratio_median()).0
}

pub fn lower_bound_mult(occ: &OccurrenceMap, k: usize) -> f64 {
    bounds_from_stats(occ.union() as f64, k, occ.mean_multiplicity(), occ.slot_ratio_median()).1
}

pub fn certificate(occ: &OccurrenceMap, achieved: Option<f64>) -> BoundCertificate {
    let k = occ.k();
    let prop = lower_bound_prop(occ, k);
    BoundCertificate {
        union: occ.union(),
        k,
        mean_multiplicity: occ.mean_multiplicity(),
        c: occ.slot_ratio_median(),
        prop,
        mult: lower_bound_mult(occ, k),
        prop_exceeds_achieved: achieved.map(|z| prop > z),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgerySolution {
    pub chosen: Vec<FeatureIndex>,
    pub values: Vec<Bf16Value>,
    pub sketch: TraceSketch,
    /// Joint score of `sketch` over all probes, by direct scoring.
    pub achieved_z: f64,
    /// `(Σ |μ|/σ − Σ_{T*} G*) / (|P| · k)`.
    pub closed_form_z: f64,
    pub certificate: BoundCertificate,
}

/// Fills `features` up to width k with the lowest indices outside the union,
/// valued zero, and builds the sketch.
fn fabricate(picked: &[(FeatureIndex, Bf16Value)], occ: &OccurrenceMap, d_sae: u32) -> Result<TraceSketch> {
    let k = occ.k();
    let mut entries: Vec<SketchEntry> =
        picked.iter().map(|&(feature, value)| SketchEntry { feature, value }).collect();
    let mut f = 0u32;
    while entries.len() < k {
        if f >= d_sae {
            return Err(Error::WidthExceedsFeatures { k, d_sae: d_sae as usize });
        }
        if occ.get(FeatureIndex(f)).is_none() && !entries.iter().any(|e| e.feature.0 == f) {
            entries.push(SketchEntry { feature: FeatureIndex(f), value: Bf16Value::ZERO });
        }
        f += 1;
    }
    entries.sort_by_key(|e| e.feature);
    TraceSketch::new(entries)
}

/// The exact best single fabricated sketch (tier F3).
pub fn solve_f3(library: &ProbeLibrary) -> Result<ForgerySolution> {
    let occ = OccurrenceMap::new(library);
    let k = library.k();
    let gains = ranked_gains(&occ)?;
    let top: Vec<&FeatureGain> = gains.iter().take(k).collect();
    let picked: Vec<(FeatureIndex, Bf16Value)> = top.iter().map(|g| (g.feature, g.value)).collect();
    let sketch = fabricate(&picked, &occ, library.d_sae())?;
    let gain_sum: f64 = top.iter().map(|g| g.gain).sum();
    let closed_form_z = (occ.ratio_sum() - gain_sum) / (library.len() * k) as f64;
    let achieved_z = joint_z_all(&sketch, library);
    Ok(ForgerySolution {
        chosen: picked.iter().map(|p| p.0).collect(),
        values: picked.iter().map(|p| p.1).collect(),
        sketch,
        achieved_z,
        closed_form_z,
        certificate: certificate(&occ, Some(achieved_z)),
    })
}

/// Largest union size [`exhaustive_optimum`] accepts.
pub const EXHAUSTIVE_MAX_UNION: usize = 16;

/// Reference optimum by enumerating every feature subset of size at most k.
///
/// Each candidate feature takes its best value among zero and the bf16
/// neighbours of every occurrence value, found by direct evaluation. Intended
/// for checking [`solve_f3`] on small libraries.
pub fn exhaustive_optimum(library: &ProbeLibrary) -> Result<(f64, TraceSketch)> {
    let occ = OccurrenceMap::new(library);
    let u = occ.union();
    if u > EXHAUSTIVE_MAX_UNION {
        return Err(Error::InvalidParameter(format!("union {u} too large for enumeration")));
    }
    let mut best_value = Vec::with_capacity(u);
    for (f, list) in occ.features() {
        let mut cands = vec![Bf16Value::ZERO];
        for o in list {
            let (lo, hi) = Bf16Value::bracket(o.mu)?;
            cands.extend([lo, hi]);
        }
        let penalty = |v: Bf16Value| list.iter().map(|o| (v.to_f64() - o.mu).abs() / o.sigma).sum::<f64>();
        let v = cands
            .into_iter()
            .min_by(|a, b| penalty(*a).partial_cmp(&penalty(*b)).expect("finite"))
            .expect("nonempty");
        best_value.push((f, v));
    }
    let k = library.k();
    let mut best: Option<(f64, TraceSketch)> = None;
    for mask in 0u32..(1 << u) {
        if mask.count_ones() as usize > k {
            continue;
        }
        let picked: Vec<(FeatureIndex, Bf16Value)> =
            (0..u).filter(|b| mask & (1 << b) != 0).map(|b| best_value[b]).collect();
        let sketch = fabricate(&picked, &occ, library.d_sae())?;
        let z = joint_z_all(&sketch, library);
        if best.as_ref().is_none_or(|(bz, _)| z < *bz) {
            best = Some((z, sketch));
        }
    }
    best.ok_or(Error::Empty("library"))
}

/// Tier F0: k uniform random features with uniform values over the library's
/// `μ` range.
pub fn attack_f0<R: Rng + ?Sized>(library: &ProbeLibrary, rng: &mut R) -> Result<(TraceSketch, f64)> {
    let (lo, hi) = library
        .probes()
        .iter()
        .flat_map(|p| p.mu.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), m| (a.min(m), b.max(m)));
    let k = library.k();
    let features = sample(rng, library.d_sae() as usize, k);
    let mut pairs = Vec::with_capacity(k);
    for f in features {
        let v = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        pairs.push((f as u32, v));
    }
    let sketch = TraceSketch::from_pairs(&pairs)?;
    let z = joint_z_all(&sketch, library);
    Ok((sketch, z))
}

/// Tier F1: the k most frequent support features, each at the unweighted
/// mean of its occurrence values.
pub fn attack_f1(library: &ProbeLibrary) -> Result<(TraceSketch, f64)> {
    let occ = OccurrenceMap::new(library);
    let mut by_count: Vec<(FeatureIndex, &[Occurrence])> = occ.features().collect();
    by_count.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    let picked = by_count
        .iter()
        .take(library.k())
        .map(|(f, list)| {
            let mean = list.iter().map(|o| o.mu).sum::<f64>() / list.len() as f64;
            Ok((*f, Bf16Value::quantize_f64(mean)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let sketch = fabricate(&picked, &occ, library.d_sae())?;
    let z = joint_z_all(&sketch, library);
    Ok((sketch, z))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub tier: String,
    pub samples: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    /// Median as a multiple of τ.
    pub times_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub tau: f64,
    pub rows: Vec<LadderRow>,
    pub certificate: BoundCertificate,
}

impl LadderReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tier,samples,min,median,max,times_tau\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{},{}\n", r.tier, r.samples, r.min, r.median, r.max, r.times_tau));
        }
        out
    }

    pub fn row(&self, tier: &str) -> Option<&LadderRow> {
        self.rows.iter().find(|r| r.tier == tier)
    }
}

pub(crate) fn median_of(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ladder_row(tier: &str, zs: &[f64], tau: f64) -> LadderRow {
    let median = median_of(zs);
    LadderRow {
        tier: tier.into(),
        samples: zs.len(),
        min: zs.iter().copied().fold(f64::INFINITY, f64::min),
        median,
        max: zs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        times_tau: median / tau,
    }
}

/// F0 over `positions` draws for each seed, then F1 and F3.
pub fn ladder(library: &ProbeLibrary, positions: usize, seeds: &[u64], tau: f64) -> Result<LadderReport> {
    use rand::SeedableRng;
    let mut f0 = Vec::with_capacity(positions * seeds.len());
    for &seed in seeds {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..positions {
            f0.push(attack_f0(library, &mut rng)?.1);
        }
    }
    let (_, f1) = attack_f1(library)?;
    let f3 = solve_f3(library)?;
    Ok(LadderReport {
        tau,
        rows: vec![
            ladder_row("F0", &f0, tau),
            ladder_row("F1", &[f1], tau),
            ladder_row("F3", &[f3.achieved_z], tau),
        ],
        certificate: f3.certificate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub train_z: f64,
    pub test_z: f64,
    /// Multiplicity bound of the held-out probe set.
    pub test_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationReport {
    pub folds: Vec<FoldResult>,
    pub train_median: f64,
    pub test_median: f64,
    /// `test_median − train_median`.
    pub gap: f64,
}

impl RotationReport {
    /// Fold scores (train and held-out) strictly below `tau`.
    pub fn scores_below(&self, tau: f64) -> usize {
        self.folds.iter().map(|f| (f.train_z < tau) as usize + (f.test_z < tau) as usize).sum()
    }
}

/// Fits F3 on a random training split and rescores on the held-out split.
pub fn rotation_cv<R: Rng + ?Sized>(
    library: &ProbeLibrary,
    folds: usize,
    split: (usize, usize),
    rng: &mut R,
) -> Result<RotationReport> {
    let (train, test) = split;
    if train == 0 || test == 0 || train + test > library.len() || folds == 0 {
        return Err(Error::InvalidParameter(format!(
            "split {train}/{test} over {} probes with {folds} folds",
            library.len()
        )));
    }
    let mut order: Vec<usize> = (0..library.len()).collect();
    let mut out = Vec::with_capacity(folds);
    for _ in 0..folds {
        order.shuffle(rng);
        out.push(score_fold(library, &order[..train], &order[train..train + test])?);
    }
    let train_median = median_of(&out.iter().map(|f| f.train_z).collect::<Vec<_>>());
    let test_median = median_of(&out.iter().map(|f| f.test_z).collect::<Vec<_>>());
    Ok(RotationReport { folds: out, train_median, test_median, gap: test_median - train_median })
}

/// One fold with explicit probe sets (they may overlap).
pub fn score_fold(library: &ProbeLibrary, train: &[usize], test: &[usize]) -> Result<FoldResult> {
    let train_lib = library.subset(train)?;
    let test_lib = library.subset(test)?;
    let sol = solve_f3(&train_lib)?;
    let test_occ = OccurrenceMap::new(&test_lib);
    Ok(FoldResult {
        train_z: sol.achieved_z,
        test_z: joint_z_all(&sol.sketch, &test_lib),
        test_bound: lower_bound_mult(&test_occ, test_lib.k()),
    })
}
