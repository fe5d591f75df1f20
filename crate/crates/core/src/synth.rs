//! Synthetic stand-in for the model and SAE stack.
//!
//! Each position of a session is bound to one probe context. The honest
//! generator emits that probe's reference support with values
//!
//! ```text
//! v = max(0, μ · (1 + vol · G(config) · e))
//! e = Σ_axis w_axis · g(axis value, slot) + w_idio · ε
//! ```
//!
//! where `g` is a fixed hashed normal per (axis value, slot), `ε` is fresh
//! per generation, `vol` is a per-slot lognormal scale and `G` is a
//! lognormal gain shared by every slot under one backend tuple. A sparse set
//! of low-amplitude background features is added before top-k selection.
//!
//! A small fraction of "stable" slots move only with the seed and position
//! axes and by less than a bf16 step, so their sample deviation collapses to
//! zero on grids that do not span those axes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashrng::{hash_normal, hash_unit, hash_words, splitmix};
use crate::probe::{
    bound_joint_z, calibrate_threshold, CircuitClass, HonestPool, PoolDraw, Probe, ProbeLibrary,
    Threshold,
};
use crate::types::{sketch_from_sparse, FeatureIndex, TraceSketch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Bf16,
    Fp16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Math,
    Flash,
    Efficient,
}

impl Dtype {
    pub const ALL: [Dtype; 2] = [Dtype::Bf16, Dtype::Fp16];
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::Math, Kernel::Flash, Kernel::Efficient];
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::Bf16 => "bf16",
            Dtype::Fp16 => "fp16",
        })
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Math => "math",
            Kernel::Flash => "flash",
            Kernel::Efficient => "efficient",
        })
    }
}

impl FromStr for Dtype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bf16" => Ok(Dtype::Bf16),
            "fp16" => Ok(Dtype::Fp16),
            _ => Err(Error::InvalidParameter(format!("unknown dtype {s:?}"))),
        }
    }
}

impl FromStr for Kernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "math" => Ok(Kernel::Math),
            "flash" => Ok(Kernel::Flash),
            "efficient" => Ok(Kernel::Efficient),
            _ => Err(Error::InvalidParameter(format!("unknown kernel {s:?}"))),
        }
    }
}

/// One point of the backend grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BackendConfig {
    pub dtype: Dtype,
    pub kernel: Kernel,
    pub position: u8,
    pub seed_family: u32,
}

impl BackendConfig {
    /// The (dtype, kernel, seed) tuple that positions are grouped under.
    pub fn tuple(&self) -> (Dtype, Kernel, u32) {
        (self.dtype, self.kernel, self.seed_family)
    }

    pub fn at_position(self, position: u8) -> Self {
        BackendConfig { position, ..self }
    }
}

/// Library-generation targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LibrarySpec {
    pub d_sae: u32,
    pub num_probes: usize,
    pub k: usize,
    /// Target mean number of probes a support feature belongs to.
    pub overlap_target: f64,
}

impl Default for LibrarySpec {
    fn default() -> Self {
        LibrarySpec { d_sae: 16384, num_probes: 96, k: 32, overlap_target: 2.09 }
    }
}

const ZIPF_EXPONENT: f64 = 0.64;
/// Fraction of union features eligible for extra memberships.
const SHARED_FRACTION: f64 = 0.4;

/// Synthetic probe library with controlled support overlap.
///
/// Every union feature belongs to at least one probe; the surplus memberships
/// are spread with Zipf weights over a shared subset of the union, so the
/// median feature belongs to a single probe. Memberships are assigned
/// greedily to the probes with the most free slots, which realizes any count
/// vector whose maximum is at most `num_probes`.
pub fn gen_library(seed: u64, spec: LibrarySpec) -> Result<ProbeLibrary> {
    let LibrarySpec { d_sae, num_probes: p, k, overlap_target } = spec;
    if p == 0 || k == 0 {
        return Err(Error::InvalidParameter("library needs at least one probe and k >= 1".into()));
    }
    if !(overlap_target >= 1.0 && overlap_target <= p as f64) {
        return Err(Error::InvalidParameter(format!(
            "overlap target {overlap_target} must lie in [1, {p}]"
        )));
    }
    let slots = p * k;
    let u = ((slots as f64) / overlap_target).round() as usize;
    if u < k || u > d_sae as usize || u * p < slots {
        return Err(Error::InvalidParameter(format!(
            "infeasible overlap target: union {u} with k={k}, {p} probes, d_sae={d_sae}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<u32> = sample(&mut rng, d_sae as usize, u).into_iter().map(|f| f as u32).collect();

    let mut counts = vec![1usize; u];
    let extras = slots - u;
    if extras > 0 {
        let shared = ((u as f64 * SHARED_FRACTION).round() as usize).clamp(1, u);
        if shared * (p - 1) < extras {
            return Err(Error::InvalidParameter("overlap target not realizable".into()));
        }
        let zipf = Zipf::new(shared as f64, ZIPF_EXPONENT).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut placed = 0;
        while placed < extras {
            let r = zipf.sample(&mut rng) as usize - 1;
            if counts[r] < p {
                counts[r] += 1;
                placed += 1;
            }
        }
    }

    let mut order: Vec<usize> = (0..u).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut capacity = vec![k; p];
    let mut members: Vec<Vec<usize>> = vec![Vec::with_capacity(k); p];
    let mut probe_order: Vec<usize> = (0..p).collect();
    for fi in order {
        probe_order.shuffle(&mut rng);
        probe_order.sort_by(|&a, &b| capacity[b].cmp(&capacity[a]));
        for &pi in probe_order.iter().take(counts[fi]) {
            if capacity[pi] == 0 {
                return Err(Error::InvalidParameter("overlap target not realizable".into()));
            }
            capacity[pi] -= 1;
            members[pi].push(fi);
        }
    }

    let mu_dist = LogNormal::new(2f64.ln(), 0.5).expect("valid lognormal");
    let mut probes = Vec::with_capacity(p);
    for (pi, fis) in members.into_iter().enumerate() {
        let mut support: Vec<u32> = fis.into_iter().map(|fi| features[fi]).collect();
        support.sort_unstable();
        let mu: Vec<f64> = support.iter().map(|_| mu_dist.sample(&mut rng).clamp(0.25, 64.0)).collect();
        let sigma = mu.iter().map(|m| 0.05 * m).collect();
        let class = CircuitClass::ALL[pi % CircuitClass::ALL.len()];
        probes.push(Probe::new(
            format!("{class}_{pi:02}"),
            class,
            support.into_iter().map(FeatureIndex).collect(),
            mu,
            sigma,
        )?);
    }
    ProbeLibrary::new(d_sae, k, probes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MembershipStats {
    pub union: usize,
    pub mean: f64,
    pub median: f64,
    pub max: usize,
}

/// How many probes each union feature belongs to.
pub fn membership_stats(library: &ProbeLibrary) -> MembershipStats {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for p in library.probes() {
        for f in &p.support {
            *counts.entry(f.0).or_default() += 1;
        }
    }
    let mut c: Vec<usize> = counts.into_values().collect();
    c.sort_unstable();
    let n = c.len();
    let median = if n % 2 == 1 { c[n / 2] as f64 } else { (c[n / 2 - 1] + c[n / 2]) as f64 / 2.0 };
    MembershipStats {
        union: n,
        mean: c.iter().sum::<usize>() as f64 / n as f64,
        median,
        max: *c.last().unwrap_or(&0),
    }
}

/// Per-axis weights and gains of the honest noise model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScales {
    pub dtype: f64,
    pub kernel: f64,
    pub position: f64,
    pub seed: f64,
    pub idio: f64,
    /// Log-sd of the gain shared by a (dtype, kernel, seed) tuple.
    pub tuple_gain: f64,
    /// Log-sd of the extra gain per (seed, position).
    pub position_gain: f64,
    /// Median per-slot relative volatility.
    pub vol_median: f64,
    pub vol_log_sd: f64,
    pub stable_fraction: f64,
    pub stable_vol: f64,
    pub background_amplitude: f64,
    pub background_count: usize,
}

impl Default for NoiseScales {
    fn default() -> Self {
        NoiseScales {
            dtype: 0.45,
            kernel: 0.35,
            position: 0.35,
            seed: 0.5,
            idio: 0.55,
            tuple_gain: 0.15,
            position_gain: 0.05,
            vol_median: 0.045,
            vol_log_sd: 0.7,
            stable_fraction: 0.005,
            stable_vol: 0.002,
            background_amplitude: 0.1,
            background_count: 48,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Dtype,
    Kernel,
    Position,
    Seed,
    Idio,
}

impl NoiseScales {
    /// No noise and no background: the honest sketch is the quantized reference.
    pub fn zero() -> Self {
        NoiseScales {
            dtype: 0.0,
            kernel: 0.0,
            position: 0.0,
            seed: 0.0,
            idio: 0.0,
            tuple_gain: 0.0,
            position_gain: 0.0,
            background_amplitude: 0.0,
            background_count: 0,
            ..NoiseScales::default()
        }
    }

    pub fn scaled(mut self, axis: Axis, factor: f64) -> Self {
        match axis {
            Axis::Dtype => self.dtype *= factor,
            Axis::Kernel => self.kernel *= factor,
            Axis::Position => self.position *= factor,
            Axis::Seed => self.seed *= factor,
            Axis::Idio => self.idio *= factor,
        }
        self
    }
}

/// How a substitute model's reference differs from the honest one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub seed: u64,
    /// Overall strength in [0, 1]; 1 is the full-strength substitute.
    pub scale: f64,
    /// Fraction of support slots replaced at full strength.
    pub swap_fraction: f64,
    /// Value multiplier at full strength.
    pub value_scale: f64,
}

impl Default for DistortionSpec {
    fn default() -> Self {
        DistortionSpec { seed: 0x5EB5, scale: 1.0, swap_fraction: 0.5, value_scale: 0.6 }
    }
}

impl DistortionSpec {
    pub fn with_scale(self, scale: f64) -> Self {
        DistortionSpec { scale, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TraceModel {
    Honest,
    Substitute { distortion: DistortionSpec },
    /// Dense blend `α · substitute + (1 − α) · honest` before top-k.
    Mixture { alpha: f64, distortion: DistortionSpec },
}

impl TraceModel {
    pub fn substitute() -> Self {
        TraceModel::Substitute { distortion: DistortionSpec::default() }
    }

    pub fn mixture(alpha: f64) -> Self {
        TraceModel::Mixture { alpha, distortion: DistortionSpec::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let d = match self {
            TraceModel::Honest => return Ok(()),
            TraceModel::Substitute { distortion } => distortion,
            TraceModel::Mixture { alpha, distortion } => {
                if !(0.0..=1.0).contains(alpha) {
                    return Err(Error::InvalidParameter(format!("mixture weight {alpha} not in [0, 1]")));
                }
                distortion
            }
        };
        let unit = 0.0..=1.0;
        if !unit.contains(&d.scale) || !unit.contains(&d.swap_fraction) || d.value_scale.is_nan() || d.value_scale < 0.0 {
            return Err(Error::InvalidParameter("distortion parameters out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct RefProbe {
    features: Vec<u32>,
    mu: Vec<f64>,
}

const TAG_VOL: u64 = 1;
const TAG_STABLE: u64 = 2;
const TAG_DTYPE: u64 = 3;
const TAG_KERNEL: u64 = 4;
const TAG_POSITION: u64 = 5;
const TAG_SEED: u64 = 6;
const TAG_TUPLE: u64 = 7;
const TAG_POS_GAIN: u64 = 8;
const TAG_SWAP: u64 = 9;
const TAG_DONOR: u64 = 10;

/// Deterministic trace generator standing in for the served model.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    d_sae: u32,
    k: usize,
    world: u64,
    scales: NoiseScales,
    reference: Vec<RefProbe>,
    classes: Vec<CircuitClass>,
    vol: Vec<f64>,
    stable: Vec<bool>,
}

impl SyntheticBackend {
    /// Backend whose honest behavior is centred on `reference`'s `μ`.
    pub fn new(reference: &ProbeLibrary, world_seed: u64, scales: NoiseScales) -> Self {
        let k = reference.k();
        let world = splitmix(world_seed ^ 0xB4C4_E2D0);
        let mut vol = Vec::with_capacity(reference.len() * k);
        let mut stable = Vec::with_capacity(reference.len() * k);
        for i in 0..reference.len() as u64 {
            for s in 0..k as u64 {
                let is_stable = hash_unit(&[world, TAG_STABLE, i, s]) < scales.stable_fraction;
                let v = if is_stable {
                    scales.stable_vol
                } else {
                    (scales.vol_median * (scales.vol_log_sd * hash_normal(&[world, TAG_VOL, i, s])).exp()).min(0.2)
                };
                vol.push(v);
                stable.push(is_stable);
            }
        }
        SyntheticBackend {
            d_sae: reference.d_sae(),
            k,
            world,
            scales,
            reference: reference
                .probes()
                .iter()
                .map(|p| RefProbe { features: p.support.iter().map(|f| f.0).collect(), mu: p.mu.clone() })
                .collect(),
            classes: reference.probes().iter().map(|p| p.class).collect(),
            vol,
            stable,
        }
    }

    pub fn with_scales(&self, scales: NoiseScales) -> Self {
        let mut out = self.clone();
        out.scales = scales;
        out
    }

    pub fn scales(&self) -> &NoiseScales {
        &self.scales
    }

    pub fn num_probes(&self) -> usize {
        self.reference.len()
    }

    pub fn d_sae(&self) -> u32 {
        self.d_sae
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of slots that move only with seed and position.
    pub fn stable_slots(&self) -> usize {
        self.stable.iter().filter(|s| **s).count()
    }

    fn gain(&self, world: u64, c: &BackendConfig) -> f64 {
        let t = hash_normal(&[world, TAG_TUPLE, c.dtype as u64, c.kernel as u64, c.seed_family as u64]);
        let p = hash_normal(&[world, TAG_POS_GAIN, c.position as u64, c.seed_family as u64]);
        (self.scales.tuple_gain * t + self.scales.position_gain * p).exp()
    }

    fn sparse_from(&self, r: &RefProbe, i: usize, world: u64, c: &BackendConfig, seed: u64) -> Vec<(u32, f32)> {
        let sc = &self.scales;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = self.gain(world, c);
        let mut out = Vec::with_capacity(self.k + sc.background_count);
        for (s, (&f, &mu)) in r.features.iter().zip(&r.mu).enumerate() {
            let slot = i * self.k + s;
            let (iu, su) = (i as u64, s as u64);
            let idio: f64 = StandardNormal.sample(&mut rng);
            let axis = |tag: u64, value: u64| hash_normal(&[world, tag, value, iu, su]);
            let seed_term = sc.seed * axis(TAG_SEED, c.seed_family as u64);
            let pos_term = sc.position * axis(TAG_POSITION, c.position as u64);
            let e = if self.stable[slot] {
                seed_term + pos_term
            } else {
                sc.dtype * axis(TAG_DTYPE, c.dtype as u64)
                    + sc.kernel * axis(TAG_KERNEL, c.kernel as u64)
                    + seed_term
                    + pos_term
                    + sc.idio * idio
            };
            let v = (mu * (1.0 + self.vol[slot] * gain * e)).max(0.0);
            out.push((f, v as f32));
        }
        for _ in 0..sc.background_count {
            let f = rng.random_range(0..self.d_sae);
            let v: f64 = rng.random::<f64>() * sc.background_amplitude;
            if !r.features.contains(&f) && !out[self.k..].iter().any(|e| e.0 == f) {
                out.push((f, v as f32));
            }
        }
        out
    }

    /// Substitute reference for probe `i`: a nested prefix of slots, in a
    /// hashed order, swaps to same-class donor features, and every value is
    /// scaled by `1 − scale · (1 − value_scale)`.
    fn distorted(&self, i: usize, d: &DistortionSpec) -> RefProbe {
        let base = &self.reference[i];
        let k = self.k;
        let m = (d.scale * d.swap_fraction * k as f64).round() as usize;
        let factor = 1.0 - d.scale * (1.0 - d.value_scale);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by_key(|&s| hash_words(&[d.seed, TAG_SWAP, i as u64, s as u64]));
        let peers: Vec<usize> = (0..self.reference.len())
            .filter(|&j| j != i && self.classes[j] == self.classes[i])
            .collect();
        let mut features = base.features.clone();
        let mut mu = base.mu.clone();
        let mut used: HashSet<u32> = base.features.iter().copied().collect();
        for (n, &s) in order.iter().take(m).enumerate() {
            if peers.is_empty() {
                break;
            }
            let h = hash_words(&[d.seed, TAG_DONOR, i as u64, n as u64]);
            let donor = &self.reference[peers[(h % peers.len() as u64) as usize]];
            let start = (splitmix(h) % k as u64) as usize;
            if let Some(t) = (0..k).map(|o| (start + o) % k).find(|&t| !used.contains(&donor.features[t])) {
                used.insert(donor.features[t]);
                features[s] = donor.features[t];
                mu[s] = donor.mu[t];
            }
        }
        for m in &mut mu {
            *m *= factor;
        }
        RefProbe { features, mu }
    }

    /// Sparse dense-proxy activations (unlisted coordinates are zero).
    pub fn gen_sparse<R: RngCore + ?Sized>(
        &self,
        model: &TraceModel,
        probe_index: usize,
        config: &BackendConfig,
        rng: &mut R,
    ) -> Result<Vec<(u32, f32)>> {
        model.validate()?;
        if probe_index >= self.reference.len() {
            return Err(Error::ProbeOutOfRange { index: probe_index, len: self.reference.len() });
        }
        // Every model consumes the same two sub-seeds so that α = 0 and α = 1
        // reproduce the honest and substitute draws exactly.
        let honest_seed = rng.next_u64();
        let attacker_seed = rng.next_u64();
        let honest = || self.sparse_from(&self.reference[probe_index], probe_index, self.world, config, honest_seed);
        let attacker = |d: &DistortionSpec| {
            let r = self.distorted(probe_index, d);
            self.sparse_from(&r, probe_index, splitmix(self.world ^ d.seed), config, attacker_seed)
        };
        Ok(match model {
            TraceModel::Honest => honest(),
            TraceModel::Substitute { distortion } => attacker(distortion),
            TraceModel::Mixture { alpha, distortion } => {
                let mut blend: BTreeMap<u32, f64> = BTreeMap::new();
                for (f, v) in honest() {
                    *blend.entry(f).or_default() += (1.0 - alpha) * v as f64;
                }
                for (f, v) in attacker(distortion) {
                    *blend.entry(f).or_default() += alpha * v as f64;
                }
                blend.into_iter().filter(|&(_, v)| v != 0.0).map(|(f, v)| (f, v as f32)).collect()
            }
        })
    }

    pub fn gen_trace<R: RngCore + ?Sized>(
        &self,
        model: &TraceModel,
        probe_index: usize,
        config: &BackendConfig,
        rng: &mut R,
    ) -> Result<TraceSketch> {
        let sparse = self.gen_sparse(model, probe_index, config, rng)?;
        sketch_from_sparse(&sparse, self.d_sae as usize, self.k)
    }

    pub fn gen_honest_trace<R: RngCore + ?Sized>(
        &self,
        probe_index: usize,
        config: &BackendConfig,
        rng: &mut R,
    ) -> Result<TraceSketch> {
        self.gen_trace(&TraceModel::Honest, probe_index, config, rng)
    }

    pub fn gen_attacker_trace<R: RngCore + ?Sized>(
        &self,
        model: &TraceModel,
        probe_index: usize,
        config: &BackendConfig,
        rng: &mut R,
    ) -> Result<TraceSketch> {
        self.gen_trace(model, probe_index, config, rng)
    }

    /// One sketch per probe: a full block of probe-bound positions.
    pub fn gen_block<R: RngCore + ?Sized>(
        &self,
        model: &TraceModel,
        config: &BackendConfig,
        rng: &mut R,
    ) -> Result<Vec<TraceSketch>> {
        (0..self.reference.len()).map(|i| self.gen_trace(model, i, config, rng)).collect()
    }

    /// Honest grid draws, `replicates` blocks per configuration.
    pub fn grid_draws(&self, grid: &CalibrationGrid, seed: u64) -> Result<Vec<GridDraw>> {
        let mut out = Vec::new();
        for (n, config) in grid.configs().into_iter().enumerate() {
            for r in 0..grid.replicates {
                let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&[seed, n as u64, r as u64]));
                out.push(GridDraw { config, sketches: self.gen_block(&TraceModel::Honest, &config, &mut rng)? });
            }
        }
        Ok(out)
    }

    /// Probe-bound joint scores of fresh blocks under `model`, one per config.
    pub fn pool(
        &self,
        model: &TraceModel,
        library: &ProbeLibrary,
        configs: &[BackendConfig],
        seed: u64,
        keep_slots: bool,
    ) -> Result<HonestPool> {
        let all: Vec<usize> = (0..library.len()).collect();
        let mut draws = Vec::with_capacity(configs.len());
        for (n, config) in configs.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&[seed, 0x9001, n as u64]));
            let block = self.gen_block(model, config, &mut rng)?;
            let joint_z = bound_joint_z(&block, library, &all)?;
            let slot_z = keep_slots.then(|| {
                block.iter().zip(library.probes()).map(|(s, p)| p.ranked_slot_z(s)).collect()
            });
            draws.push(PoolDraw { config: *config, joint_z, slot_z });
        }
        Ok(HonestPool { draws })
    }

    pub fn honest_pool(
        &self,
        library: &ProbeLibrary,
        configs: &[BackendConfig],
        seed: u64,
        keep_slots: bool,
    ) -> Result<HonestPool> {
        self.pool(&TraceModel::Honest, library, configs, seed, keep_slots)
    }
}

/// Honest traces of every probe under one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDraw {
    pub config: BackendConfig,
    pub sketches: Vec<TraceSketch>,
}

/// Cartesian calibration grid with replicates per configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationGrid {
    pub dtypes: Vec<Dtype>,
    pub kernels: Vec<Kernel>,
    pub positions: Vec<u8>,
    pub seeds: Vec<u32>,
    pub replicates: usize,
}

impl Default for CalibrationGrid {
    /// 2 dtypes × 3 kernels × 4 positions × 4 seeds, two replicates each.
    fn default() -> Self {
        CalibrationGrid {
            dtypes: Dtype::ALL.to_vec(),
            kernels: Kernel::ALL.to_vec(),
            positions: vec![0, 1, 2, 3],
            seeds: vec![0, 1, 2, 3],
            replicates: 2,
        }
    }
}

impl CalibrationGrid {
    /// Eight configurations: 2 dtypes × 2 kernels × 2 positions, one seed.
    pub fn narrow() -> Self {
        CalibrationGrid {
            dtypes: Dtype::ALL.to_vec(),
            kernels: vec![Kernel::Math, Kernel::Flash],
            positions: vec![0, 1],
            seeds: vec![0],
            replicates: 2,
        }
    }

    /// Thirty-two configurations: 2 dtypes × 2 kernels × 4 positions × 2 seeds.
    pub fn wide() -> Self {
        CalibrationGrid {
            dtypes: Dtype::ALL.to_vec(),
            kernels: vec![Kernel::Math, Kernel::Flash],
            positions: vec![0, 1, 2, 3],
            seeds: vec![0, 1],
            replicates: 2,
        }
    }

    pub fn configs(&self) -> Vec<BackendConfig> {
        let mut out = Vec::new();
        for &dtype in &self.dtypes {
            for &kernel in &self.kernels {
                for &position in &self.positions {
                    for &seed_family in &self.seeds {
                        out.push(BackendConfig { dtype, kernel, position, seed_family });
                    }
                }
            }
        }
        out
    }
}

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaCalibration {
    pub library: ProbeLibrary,
    pub floored: usize,
    pub total: usize,
}

impl SigmaCalibration {
    pub fn floor_fraction(&self) -> f64 {
        self.floored as f64 / self.total as f64
    }
}

/// Per-slot sample deviation of grid draws, floored at `floor · max(|μ|, 1)`.
///
/// Every combination of the axis values present in `draws` must appear at
/// least twice.
pub fn calibrate_sigma(library: &ProbeLibrary, draws: &[GridDraw], floor: f64) -> Result<SigmaCalibration> {
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma floor must be positive, got {floor}")));
    }
    if draws.is_empty() {
        return Err(Error::Empty("calibration grid"));
    }
    let mut dtypes = HashSet::new();
    let mut kernels = HashSet::new();
    let mut positions = HashSet::new();
    let mut seeds = HashSet::new();
    let mut seen: BTreeMap<BackendConfig, usize> = BTreeMap::new();
    for d in draws {
        if d.sketches.len() != library.len() {
            return Err(Error::InvalidParameter("grid draw does not cover every probe".into()));
        }
        dtypes.insert(d.config.dtype);
        kernels.insert(d.config.kernel);
        positions.insert(d.config.position);
        seeds.insert(d.config.seed_family);
        *seen.entry(d.config).or_default() += 1;
    }
    for &dtype in &dtypes {
        for &kernel in &kernels {
            for &position in &positions {
                for &seed_family in &seeds {
                    let c = BackendConfig { dtype, kernel, position, seed_family };
                    if seen.get(&c).copied().unwrap_or(0) < 2 {
                        return Err(Error::GridIncomplete(format!(
                            "{dtype}/{kernel}/pos{position}/seed{seed_family} needs >= 2 draws"
                        )));
                    }
                }
            }
        }
    }
    let n = draws.len() as f64;
    let mut floored = 0;
    let mut sigma = Vec::with_capacity(library.len());
    for (i, p) in library.probes().iter().enumerate() {
        let mut row = Vec::with_capacity(p.k());
        for (s, &f) in p.support.iter().enumerate() {
            let xs = draws.iter().map(|d| d.sketches[i].value_of(f).unwrap_or(0.0));
            let mean = xs.clone().sum::<f64>() / n;
            let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let min_sigma = floor * p.mu[s].abs().max(1.0);
            let sd = var.sqrt();
            if sd < min_sigma {
                floored += 1;
            }
            row.push(sd.max(min_sigma));
        }
        sigma.push(row);
    }
    Ok(SigmaCalibration { library: library.with_sigma(sigma)?, floored, total: library.len() * library.k() })
}

/// The default serving fleet: 112 honest configurations.
///
/// 2 dtypes × math × seeds 100..108 × 4 positions, plus
/// 2 dtypes × {math, efficient} × seeds 300..303 × 4 positions.
pub fn default_fleet() -> Vec<BackendConfig> {
    let mut out = Vec::with_capacity(112);
    for dtype in Dtype::ALL {
        for seed_family in 100..108 {
            for position in 0..4 {
                out.push(BackendConfig { dtype, kernel: Kernel::Math, position, seed_family });
            }
        }
    }
    for dtype in Dtype::ALL {
        for kernel in [Kernel::Math, Kernel::Efficient] {
            for seed_family in 300..303 {
                for position in 0..4 {
                    out.push(BackendConfig { dtype, kernel, position, seed_family });
                }
            }
        }
    }
    out
}

/// Distinct (dtype, kernel, seed) tuples of a fleet, position 0.
pub fn fleet_tuples(fleet: &[BackendConfig]) -> Vec<BackendConfig> {
    let mut seen = HashSet::new();
    fleet.iter().filter(|c| seen.insert(c.tuple())).map(|c| c.at_position(0)).collect()
}

/// A calibrated synthetic deployment: library, backend, honest pool and τ.
#[derive(Debug, Clone)]
pub struct Deployment {
    pub seed: u64,
    pub library: ProbeLibrary,
    pub backend: SyntheticBackend,
    pub fleet: Vec<BackendConfig>,
    pub pool: HonestPool,
    pub threshold: Threshold,
    pub sigma_floor_fraction: f64,
}

impl Deployment {
    pub fn build(seed: u64) -> Result<Self> {
        let reference = gen_library(seed, LibrarySpec::default())?;
        Self::from_reference(seed, &reference, NoiseScales::default())
    }

    /// Calibrates σ on the default grid and τ on the default fleet.
    pub fn from_reference(seed: u64, reference: &ProbeLibrary, scales: NoiseScales) -> Result<Self> {
        let backend = SyntheticBackend::new(reference, seed, scales);
        let draws = backend.grid_draws(&CalibrationGrid::default(), hash_words(&[seed, 0xCA1]))?;
        let cal = calibrate_sigma(reference, &draws, DEFAULT_SIGMA_FLOOR)?;
        let fleet = default_fleet();
        let pool = backend.honest_pool(&cal.library, &fleet, hash_words(&[seed, 0x9001]), true)?;
        let threshold = calibrate_threshold(&pool, 0.95)?;
        Ok(Deployment {
            seed,
            sigma_floor_fraction: cal.floor_fraction(),
            library: cal.library,
            backend,
            fleet,
            pool,
            threshold,
        })
    }
}
