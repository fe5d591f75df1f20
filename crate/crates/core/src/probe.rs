//! Probe libraries and the verifier's scoring rule.
//!
//! A probe scores a sketch by the mean standardized absolute deviation over
//! its support; features outside the sketch read as zero. The joint score of
//! a probe subset is the mean of the per-probe scores.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::synth::BackendConfig;
use crate::types::{FeatureIndex, TraceSketch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CircuitClass {
    Ioi,
    Induction,
    Syntactic,
    Factual,
    Coreference,
    Arithmetic,
    Commonsense,
    Language,
}

impl CircuitClass {
    pub const ALL: [CircuitClass; 8] = [
        CircuitClass::Ioi,
        CircuitClass::Induction,
        CircuitClass::Syntactic,
        CircuitClass::Factual,
        CircuitClass::Coreference,
        CircuitClass::Arithmetic,
        CircuitClass::Commonsense,
        CircuitClass::Language,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CircuitClass::Ioi => "ioi",
            CircuitClass::Induction => "induction",
            CircuitClass::Syntactic => "syntactic",
            CircuitClass::Factual => "factual",
            CircuitClass::Coreference => "coreference",
            CircuitClass::Arithmetic => "arithmetic",
            CircuitClass::Commonsense => "commonsense",
            CircuitClass::Language => "language",
        }
    }
}

impl fmt::Display for CircuitClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reference support with per-slot location and scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub name: String,
    pub class: CircuitClass,
    pub support: Vec<FeatureIndex>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Probe {
    pub fn new(
        name: impl Into<String>,
        class: CircuitClass,
        support: Vec<FeatureIndex>,
        mu: Vec<f64>,
        sigma: Vec<f64>,
    ) -> Result<Self> {
        let p = Probe { name: name.into(), class, support, mu, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.support.len();
        if k == 0 {
            return Err(Error::InvalidProbe(format!("{}: empty support", self.name)));
        }
        if self.mu.len() != k || self.sigma.len() != k {
            return Err(Error::InvalidProbe(format!(
                "{}: support/mu/sigma lengths {}/{}/{} differ",
                self.name,
                k,
                self.mu.len(),
                self.sigma.len()
            )));
        }
        if self.support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidProbe(format!("{}: support not strictly ascending", self.name)));
        }
        if self.mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidProbe(format!("{}: non-finite mu", self.name)));
        }
        if self.sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidProbe(format!("{}: sigma must be positive", self.name)));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.support.len()
    }

    /// Per-slot terms `|f̂ - μ| / σ` in support order.
    pub fn slot_z(&self, sketch: &TraceSketch) -> Vec<f64> {
        self.support
            .iter()
            .zip(self.mu.iter().zip(&self.sigma))
            .map(|(&f, (&mu, &sigma))| (sketch.value_of(f).unwrap_or(0.0) - mu).abs() / sigma)
            .collect()
    }

    /// Slot order used for width truncation: descending `|μ|`, ties by slot.
    pub fn rank_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.k()).collect();
        order.sort_by(|&a, &b| {
            self.mu[b]
                .abs()
                .partial_cmp(&self.mu[a].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order
    }

    /// Per-slot terms in [`Probe::rank_order`].
    pub fn ranked_slot_z(&self, sketch: &TraceSketch) -> Vec<f64> {
        let z = self.slot_z(sketch);
        self.rank_order().into_iter().map(|s| z[s]).collect()
    }
}

pub fn probe_z(sketch: &TraceSketch, probe: &Probe) -> f64 {
    let mut acc = 0.0;
    for ((&f, &mu), &sigma) in probe.support.iter().zip(&probe.mu).zip(&probe.sigma) {
        acc += (sketch.value_of(f).unwrap_or(0.0) - mu).abs() / sigma;
    }
    acc / probe.k() as f64
}

const LIBRARY_FORMAT: &str = "tracecommit-probe-library";
const LIBRARY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeLibrary {
    d_sae: u32,
    k: usize,
    probes: Vec<Probe>,
}

#[derive(Serialize, Deserialize)]
struct LibraryFile {
    format: String,
    version: u32,
    d_sae: u32,
    k: usize,
    probes: Vec<Probe>,
}

impl Serialize for ProbeLibrary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        LibraryFile {
            format: LIBRARY_FORMAT.into(),
            version: LIBRARY_VERSION,
            d_sae: self.d_sae,
            k: self.k,
            probes: self.probes.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ProbeLibrary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = LibraryFile::deserialize(d)?;
        if file.format != LIBRARY_FORMAT {
            return Err(serde::de::Error::custom(format!("unknown library format {:?}", file.format)));
        }
        if file.version != LIBRARY_VERSION {
            return Err(serde::de::Error::custom(format!("unsupported library version {}", file.version)));
        }
        ProbeLibrary::new(file.d_sae, file.k, file.probes).map_err(serde::de::Error::custom)
    }
}

impl ProbeLibrary {
    pub fn new(d_sae: u32, k: usize, probes: Vec<Probe>) -> Result<Self> {
        if probes.is_empty() {
            return Err(Error::InvalidLibrary("no probes".into()));
        }
        for p in &probes {
            p.validate()?;
            if p.k() != k {
                return Err(Error::InvalidLibrary(format!("probe {} has width {} != {k}", p.name, p.k())));
            }
            if p.support.last().is_some_and(|f| f.0 >= d_sae) {
                return Err(Error::InvalidLibrary(format!("probe {} support exceeds d_sae {d_sae}", p.name)));
            }
        }
        Ok(ProbeLibrary { d_sae, k, probes })
    }

    pub fn d_sae(&self) -> u32 {
        self.d_sae
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn probes(&self) -> &[Probe] {
        &self.probes
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn probe(&self, i: usize) -> Result<&Probe> {
        self.probes.get(i).ok_or(Error::ProbeOutOfRange { index: i, len: self.probes.len() })
    }

    /// Sub-library over the given probe indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<ProbeLibrary> {
        let probes = indices.iter().map(|&i| self.probe(i).cloned()).collect::<Result<Vec<_>>>()?;
        ProbeLibrary::new(self.d_sae, self.k, probes)
    }

    /// Same probes with replaced scales (slot-aligned, one vector per probe).
    pub fn with_sigma(&self, sigma: Vec<Vec<f64>>) -> Result<ProbeLibrary> {
        if sigma.len() != self.probes.len() {
            return Err(Error::InvalidLibrary("sigma table has wrong probe count".into()));
        }
        let probes = self
            .probes
            .iter()
            .zip(sigma)
            .map(|(p, s)| Probe { sigma: s, ..p.clone() })
            .collect();
        ProbeLibrary::new(self.d_sae, self.k, probes)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

pub fn joint_z(sketch: &TraceSketch, library: &ProbeLibrary, subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut acc = 0.0;
    for &i in subset {
        acc += probe_z(sketch, library.probe(i)?);
    }
    Ok(acc / subset.len() as f64)
}

/// Joint score over every probe in the library.
pub fn joint_z_all(sketch: &TraceSketch, library: &ProbeLibrary) -> f64 {
    library.probes.iter().map(|p| probe_z(sketch, p)).sum::<f64>() / library.len() as f64
}

/// Joint score when probe `i` reads its own position's sketch `sketches[i]`.
pub fn bound_joint_z(sketches: &[TraceSketch], library: &ProbeLibrary, subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut acc = 0.0;
    for &i in subset {
        let sketch = sketches.get(i).ok_or(Error::ProbeOutOfRange { index: i, len: sketches.len() })?;
        acc += probe_z(sketch, library.probe(i)?);
    }
    Ok(acc / subset.len() as f64)
}

/// Uniform random probe subset of size `n`, without replacement.
pub fn sample_subset<R: Rng + ?Sized>(rng: &mut R, num_probes: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::EmptySubset);
    }
    if n > num_probes {
        return Err(Error::InvalidParameter(format!("subset size {n} exceeds {num_probes} probes")));
    }
    Ok(sample(rng, num_probes, n).into_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

/// Rejects iff `z > tau`.
pub fn decide(z: f64, tau: f64) -> Decision {
    if z > tau {
        Decision::Reject
    } else {
        Decision::Accept
    }
}

/// One labeled honest draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolDraw {
    pub config: BackendConfig,
    pub joint_z: f64,
    /// Per probe, slot terms in descending-`|μ|` order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot_z: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HonestPool {
    pub draws: Vec<PoolDraw>,
}

impl HonestPool {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.draws.iter().map(|d| d.joint_z).collect()
    }

    pub fn max(&self) -> Option<f64> {
        self.draws.iter().map(|d| d.joint_z).reduce(f64::max)
    }

    /// One CSV row per draw: config axes then the joint score.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dtype,kernel,position,seed_family,joint_z\n");
        for d in &self.draws {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                d.config.dtype, d.config.kernel, d.config.position, d.config.seed_family, d.joint_z
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub tau: f64,
    pub n: usize,
    pub violations: usize,
    pub confidence: f64,
    pub cp_upper: f64,
}

/// One-sided Clopper–Pearson upper bound on a binomial rate after `x`
/// successes in `n` trials.
pub fn clopper_pearson_upper(x: usize, n: usize, confidence: f64) -> Result<f64> {
    if n == 0 || x > n {
        return Err(Error::InvalidParameter(format!("need 0 <= x <= n and n > 0, got x={x}, n={n}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidParameter(format!("confidence {confidence} not in (0, 1)")));
    }
    if x == n {
        return Ok(1.0);
    }
    if x == 0 {
        return Ok(1.0 - (1.0 - confidence).powf(1.0 / n as f64));
    }
    let beta = Beta::new((x + 1) as f64, (n - x) as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(beta.inverse_cdf(confidence))
}

/// Empirical-max threshold over the pool with its zero-violation bound.
pub fn calibrate_threshold(pool: &HonestPool, confidence: f64) -> Result<Threshold> {
    let tau = pool.max().ok_or(Error::Empty("honest pool"))?;
    evaluate_threshold(pool, tau, confidence)
}

/// Counts pool violations of an arbitrary `tau` and bounds the exceedance rate.
pub fn evaluate_threshold(pool: &HonestPool, tau: f64, confidence: f64) -> Result<Threshold> {
    if pool.is_empty() {
        return Err(Error::Empty("honest pool"));
    }
    let violations = pool.draws.iter().filter(|d| decide(d.joint_z, tau) == Decision::Reject).count();
    Ok(Threshold {
        tau,
        n: pool.len(),
        violations,
        confidence,
        cp_upper: clopper_pearson_upper(violations, pool.len(), confidence)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailFamily {
    Gaussian,
    StudentTDf5,
}

impl FromStr for TailFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(TailFamily::Gaussian),
            "student_t_df5" | "t5" => Ok(TailFamily::StudentTDf5),
            other => Err(Error::InvalidParameter(format!("unknown tail family {other:?}"))),
        }
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Moment-fitted quantile of the pool scores under a location/scale family.
pub fn parametric_quantile(scores: &[f64], family: TailFamily, q: f64) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::InvalidParameter("parametric fit needs at least 2 draws".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidParameter(format!("quantile {q} not in (0, 1)")));
    }
    let (mean, sd) = mean_sd(scores);
    if sd == 0.0 {
        return Ok(mean);
    }
    let std_q = match family {
        TailFamily::Gaussian => Normal::standard().inverse_cdf(q),
        TailFamily::StudentTDf5 => {
            // unit-variance scaling: Var(t_5) = 5/3
            let t = StudentsT::new(0.0, 1.0, 5.0).expect("valid t parameters");
            t.inverse_cdf(q) * (3.0f64 / 5.0).sqrt()
        }
    };
    Ok(mean + sd * std_q)
}

pub fn parametric_p99(pool: &HonestPool, family: TailFamily) -> Result<f64> {
    parametric_quantile(&pool.scores(), family, 0.99)
}

/// Joint score at width `k_new` from per-probe ranked slot terms.
pub fn reaggregate_k(per_probe_slots: &[Vec<f64>], k_new: usize) -> Result<f64> {
    if k_new == 0 {
        return Err(Error::InvalidParameter("k_new must be >= 1".into()));
    }
    if per_probe_slots.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut acc = 0.0;
    for slots in per_probe_slots {
        if k_new > slots.len() {
            return Err(Error::InvalidParameter(format!("k_new {k_new} exceeds stored width {}", slots.len())));
        }
        acc += slots[..k_new].iter().sum::<f64>() / k_new as f64;
    }
    Ok(acc / per_probe_slots.len() as f64)
}

/// Replaces `round(f * k)` support slots per probe with random off-support
/// features whose `(μ, σ)` are copied from random library slots.
pub fn mask_flip(library: &ProbeLibrary, f: f64, seed: u64) -> Result<ProbeLibrary> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::InvalidParameter(format!("flip fraction {f} not in [0, 1]")));
    }
    let k = library.k();
    let m = (f * k as f64).round() as usize;
    if m == 0 {
        return Ok(library.clone());
    }
    let d_sae = library.d_sae() as usize;
    if d_sae < 2 * k {
        return Err(Error::InvalidParameter("d_sae too small to draw replacement features".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_slots = library.len() * k;
    let mut probes = Vec::with_capacity(library.len());
    for p in library.probes() {
        let mut taken: HashSet<u32> = p.support.iter().map(|f| f.0).collect();
        let mut slots: Vec<(FeatureIndex, f64, f64)> =
            (0..k).map(|s| (p.support[s], p.mu[s], p.sigma[s])).collect();
        for s in sample(&mut rng, k, m) {
            let feature = loop {
                let cand = rng.random_range(0..d_sae as u32);
                if taken.insert(cand) {
                    break cand;
                }
            };
            let donor = rng.random_range(0..total_slots);
            let dp = &library.probes()[donor / k];
            slots[s] = (FeatureIndex(feature), dp.mu[donor % k], dp.sigma[donor % k]);
        }
        slots.sort_by_key(|x| x.0);
        probes.push(Probe::new(
            p.name.clone(),
            p.class,
            slots.iter().map(|x| x.0).collect(),
            slots.iter().map(|x| x.1).collect(),
            slots.iter().map(|x| x.2).collect(),
        )?);
    }
    ProbeLibrary::new(library.d_sae(), k, probes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Dtype, Kernel};
    use crate::types::{Bf16Value, SketchEntry};
    use proptest::prelude::*;

    fn fixture_probe(name: &str, base: u32, k: usize) -> Probe {
        Probe::new(
            name,
            CircuitClass::Ioi,
            (0..k as u32).map(|s| FeatureIndex(base + 3 * s)).collect(),
            (0..k).map(|s| 1.0 + 0.25 * s as f64).collect(),
            (0..k).map(|s| 0.125 + 0.0625 * (s % 3) as f64).collect(),
        )
        .unwrap()
    }

    fn sketch_at(probe: &Probe, offsets: &[f64]) -> TraceSketch {
        let pairs: Vec<(u32, f64)> = probe
            .support
            .iter()
            .zip(&probe.mu)
            .zip(offsets.iter().cycle())
            .map(|((f, mu), d)| (f.0, mu + d))
            .collect();
        TraceSketch::from_pairs(&pairs).unwrap()
    }

    fn pool_of(zs: &[f64]) -> HonestPool {
        HonestPool {
            draws: zs
                .iter()
                .map(|&z| PoolDraw {
                    config: BackendConfig { dtype: Dtype::Bf16, kernel: Kernel::Math, position: 0, seed_family: 0 },
                    joint_z: z,
                    slot_z: None,
                })
                .collect(),
        }
    }

    #[test]
    fn probe_z_examples() {
        let p = fixture_probe("p", 10, 4);
        // mu and sigma above are exact in bf16, so matching sketches score 0
        assert_eq!(probe_z(&sketch_at(&p, &[0.0]), &p), 0.0);
        let plus_sigma: Vec<(u32, f64)> =
            (0..4).map(|s| (p.support[s].0, p.mu[s] + p.sigma[s])).collect();
        assert_eq!(probe_z(&TraceSketch::from_pairs(&plus_sigma).unwrap(), &p), 1.0);
        let disjoint = TraceSketch::from_pairs(&[(0, 3.0), (1, 2.0)]).unwrap();
        let expected = (0..4).map(|s| p.mu[s].abs() / p.sigma[s]).sum::<f64>() / 4.0;
        assert!((probe_z(&disjoint, &p) - expected).abs() < 1e-12);
    }

    #[test]
    fn joint_z_examples_and_brute_force_oracle() {
        let probes: Vec<Probe> = (0..96).map(|i| fixture_probe(&format!("p{i}"), i * 5, 32)).collect();
        let lib = ProbeLibrary::new(16384, 32, probes).unwrap();
        let s = TraceSketch::from_pairs(&(0..32).map(|j| (j * 7, 1.5 + j as f64 * 0.1)).collect::<Vec<_>>()).unwrap();
        assert_eq!(joint_z(&s, &lib, &[3]).unwrap(), probe_z(&s, &lib.probes()[3]));
        assert_eq!(joint_z(&s, &lib, &[]), Err(Error::EmptySubset));
        assert!(matches!(joint_z(&s, &lib, &[96]), Err(Error::ProbeOutOfRange { .. })));

        // Oracle: linear scan of the sketch for each (i, s) slot.
        let lookup = |f: FeatureIndex| {
            s.entries().iter().find(|e| e.feature == f).map_or(0.0, |e| e.value.to_f64())
        };
        let oracle: f64 = lib
            .probes()
            .iter()
            .flat_map(|p| (0..p.k()).map(move |j| (p, j)))
            .map(|(p, j)| (lookup(p.support[j]) - p.mu[j]).abs() / p.sigma[j])
            .sum::<f64>()
            / (96.0 * 32.0);
        let all: Vec<usize> = (0..96).collect();
        assert!((joint_z(&s, &lib, &all).unwrap() - oracle).abs() < 1e-12);
        assert!((joint_z_all(&s, &lib) - oracle).abs() < 1e-12);
    }

    #[test]
    fn decision_rule_is_strict() {
        assert_eq!(decide(1.5, 1.5), Decision::Accept);
        assert_eq!(decide(1.5 + 1e-12, 1.5), Decision::Reject);
        assert_eq!(decide(0.0, 0.0), Decision::Accept);
    }

    #[test]
    fn clopper_pearson_values() {
        let cp112 = clopper_pearson_upper(0, 112, 0.95).unwrap();
        assert!((cp112 - 0.0264).abs() < 1e-4, "{cp112}");
        let cp64 = clopper_pearson_upper(0, 64, 0.95).unwrap();
        assert!((cp64 - 0.0457).abs() < 1e-4, "{cp64}");
        assert!((clopper_pearson_upper(0, 1, 0.95).unwrap() - 0.95).abs() < 1e-12);
        // Beta-quantile path agrees with the closed form at x = 0 boundary behavior:
        // for x = 1, n = 2 the bound solves P(X <= 1) = 0.05, i.e. 1 - p^2 = 0.05.
        let cp = clopper_pearson_upper(1, 2, 0.95).unwrap();
        assert!((cp - 0.95f64.sqrt()).abs() < 1e-6, "{cp}");
    }

    #[test]
    fn calibrate_threshold_examples() {
        let pool = pool_of(&[0.5, 1.2, 0.9]);
        let t = calibrate_threshold(&pool, 0.95).unwrap();
        assert_eq!(t.tau, 1.2);
        assert_eq!(t.violations, 0);
        assert_eq!(calibrate_threshold(&HonestPool::default(), 0.95), Err(Error::Empty("honest pool")));
        assert_eq!(evaluate_threshold(&pool, 0.8, 0.95).unwrap().violations, 2);
    }

    #[test]
    fn parametric_p99_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let xs: Vec<f64> = (0..100_000).map(|_| rand_distr::Distribution::sample(&normal, &mut rng)).collect();
        let pool = pool_of(&xs);
        // Φ⁻¹(0.99) by bisection on the erfc-based CDF, independent of statrs' inverse.
        let (mut lo, mut hi) = (0.0f64, 5.0f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            let cdf = 1.0 - 0.5 * statrs::function::erf::erfc(mid / 2f64.sqrt());
            if cdf < 0.99 { lo = mid } else { hi = mid }
        }
        let g = parametric_p99(&pool, TailFamily::Gaussian).unwrap();
        assert!((g - lo).abs() < 0.02, "{g} vs {lo}");
        let t = parametric_p99(&pool, TailFamily::StudentTDf5).unwrap();
        assert!(t > g);
        assert_eq!(parametric_p99(&pool_of(&[3.0, 3.0, 3.0]), TailFamily::Gaussian).unwrap(), 3.0);
    }

    #[test]
    fn reaggregate_examples() {
        assert_eq!(reaggregate_k(&[vec![4.0, 2.0, 0.0, 0.0]], 2).unwrap(), 3.0);
        assert!(reaggregate_k(&[vec![1.0]], 0).is_err());
        let p = fixture_probe("p", 0, 8);
        let s = sketch_at(&p, &[0.5, -0.25, 1.0]);
        let full = reaggregate_k(&[p.ranked_slot_z(&s)], 8).unwrap();
        assert!((full - probe_z(&s, &p)).abs() < 1e-12);
    }

    fn flip_fixture() -> ProbeLibrary {
        let probes = (0..6).map(|i| fixture_probe(&format!("p{i}"), i * 100, 8)).collect();
        ProbeLibrary::new(4096, 8, probes).unwrap()
    }

    #[test]
    fn mask_flip_examples() {
        let lib = flip_fixture();
        assert_eq!(mask_flip(&lib, 0.0, 1).unwrap(), lib);
        let full = mask_flip(&lib, 1.0, 1).unwrap();
        for (a, b) in lib.probes().iter().zip(full.probes()) {
            assert!(a.support.iter().all(|f| !b.support.contains(f)));
        }
        assert_eq!(mask_flip(&lib, 0.5, 9).unwrap(), mask_flip(&lib, 0.5, 9).unwrap());
        let half = mask_flip(&lib, 0.5, 9).unwrap();
        for (a, b) in lib.probes().iter().zip(half.probes()) {
            assert_eq!(a.support.iter().filter(|f| b.support.contains(f)).count(), 4);
        }
    }

    #[test]
    fn library_json_round_trip_and_format_check() {
        let lib = flip_fixture();
        let json = lib.to_json().unwrap();
        assert!(json.contains("\"format\": \"tracecommit-probe-library\""));
        assert_eq!(ProbeLibrary::from_json(&json).unwrap(), lib);
        let bad = json.replace("tracecommit-probe-library", "other");
        assert!(ProbeLibrary::from_json(&bad).is_err());
        let bad_sigma = json.replacen("\"sigma\": [\n        0.125", "\"sigma\": [\n        -1.0", 1);
        assert!(ProbeLibrary::from_json(&bad_sigma).is_err());
    }

    #[test]
    fn probe_validation() {
        let f = |v: &[u32]| v.iter().map(|&x| FeatureIndex(x)).collect::<Vec<_>>();
        assert!(Probe::new("a", CircuitClass::Ioi, f(&[2, 1]), vec![1.0; 2], vec![1.0; 2]).is_err());
        assert!(Probe::new("a", CircuitClass::Ioi, f(&[1, 2]), vec![1.0; 2], vec![0.0, 1.0]).is_err());
        assert!(Probe::new("a", CircuitClass::Ioi, f(&[1, 2]), vec![1.0; 3], vec![1.0; 2]).is_err());
    }

    proptest! {
        #[test]
        fn unit_deviation_scaling(delta in -4i32..=4) {
            // δ in quarter steps keeps μ + δσ exactly representable in bf16
            let p = fixture_probe("p", 0, 6);
            let d = delta as f64 * 0.25;
            let pairs: Vec<(u32, f64)> = (0..6).map(|s| (p.support[s].0, p.mu[s] + d * p.sigma[s])).collect();
            let s = TraceSketch::from_pairs(&pairs).unwrap();
            prop_assert!((probe_z(&s, &p) - d.abs()).abs() < 1e-12);
        }

        #[test]
        fn joint_between_min_and_max(vals in prop::collection::vec(0.0f64..8.0, 8), subset in prop::collection::btree_set(0usize..6, 1..6)) {
            let lib = flip_fixture();
            let pairs: Vec<(u32, f64)> = (0..8).map(|j| (lib.probes()[0].support[j].0, vals[j])).collect();
            let s = TraceSketch::from_pairs(&pairs).unwrap();
            let idx: Vec<usize> = subset.into_iter().collect();
            let per: Vec<f64> = idx.iter().map(|&i| probe_z(&s, &lib.probes()[i])).collect();
            let j = joint_z(&s, &lib, &idx).unwrap();
            let lo = per.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = per.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(j >= lo - 1e-12 && j <= hi + 1e-12);
        }

        #[test]
        fn zero_violations_and_all_members_accepted(zs in prop::collection::vec(0.0f64..10.0, 1..60)) {
            let pool = pool_of(&zs);
            let t = calibrate_threshold(&pool, 0.95).unwrap();
            prop_assert_eq!(t.violations, 0);
            for z in zs {
                prop_assert_eq!(decide(z, t.tau), Decision::Accept);
            }
        }

        #[test]
        fn cp_upper_decreasing_in_n(n in 1usize..500) {
            let a = clopper_pearson_upper(0, n, 0.95).unwrap();
            let b = clopper_pearson_upper(0, n + 1, 0.95).unwrap();
            prop_assert!(b < a);
        }

        #[test]
        fn ranked_slots_cover_probe(vals in prop::collection::vec(-3.0f64..3.0, 8)) {
            let p = fixture_probe("p", 0, 8);
            let entries: Vec<SketchEntry> = (0..8).map(|j| SketchEntry {
                feature: p.support[j],
                value: Bf16Value::quantize_f64(vals[j]).unwrap(),
            }).collect();
            let s = TraceSketch::new(entries).unwrap();
            let mut a = p.ranked_slot_z(&s);
            let mut b = p.slot_z(&s);
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
