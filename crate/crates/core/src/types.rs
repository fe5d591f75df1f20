//! Domain types and their canonical byte layouts.
//!
//! All integers in hashed or serialized layouts are big-endian. A sketch
//! entry is a 4-byte feature index followed by the 2-byte bf16 pattern, so a
//! width-32 sketch serializes to 192 bytes.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinate of an SAE feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureIndex(pub u32);

impl fmt::Display for FeatureIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A brain-float16 bit pattern: 1 sign bit, 8 exponent bits, 7 mantissa bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Bf16Value(pub u16);

impl Bf16Value {
    pub const ZERO: Bf16Value = Bf16Value(0);

    /// Round-to-nearest-even on the 16 low bits of the f32 pattern.
    pub fn quantize(x: f32) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::NonFinite(x as f64));
        }
        let bits = x.to_bits();
        let lsb = (bits >> 16) & 1;
        let rounded = (bits.wrapping_add(0x7FFF + lsb) >> 16) as u16;
        let out = Bf16Value(rounded);
        if !out.is_finite() {
            // rounding carried into the all-ones exponent
            return Err(Error::NonFinite(x as f64));
        }
        Ok(out)
    }

    pub fn quantize_f64(x: f64) -> Result<Self> {
        if !x.is_finite() || x.abs() > f32::MAX as f64 {
            return Err(Error::NonFinite(x));
        }
        Self::quantize(x as f32)
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        f32::from_bits((self.0 as u32) << 16)
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        self.to_f32() as f64
    }

    pub fn is_finite(self) -> bool {
        (self.0 & 0x7F80) != 0x7F80
    }

    /// Next representable value toward +infinity (finite inputs only).
    pub fn next_up(self) -> Self {
        match self.0 {
            0x8000 | 0x0000 => Bf16Value(0x0001),
            b if b & 0x8000 == 0 => Bf16Value(b + 1),
            b => Bf16Value(b - 1),
        }
    }

    /// Next representable value toward -infinity (finite inputs only).
    pub fn next_down(self) -> Self {
        match self.0 {
            0x0000 | 0x8000 => Bf16Value(0x8001),
            b if b & 0x8000 == 0 => Bf16Value(b - 1),
            b => Bf16Value(b + 1),
        }
    }

    /// The two bf16 values bracketing `x` (equal when `x` is representable).
    pub fn bracket(x: f64) -> Result<(Self, Self)> {
        let q = Self::quantize_f64(x)?;
        let d = q.to_f64();
        Ok(match d.partial_cmp(&x) {
            Some(Ordering::Greater) => (q.next_down(), q),
            Some(Ordering::Less) => (q, q.next_up()),
            _ => (q, q),
        })
    }
}

/// One committed (feature, value) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SketchEntry {
    pub feature: FeatureIndex,
    pub value: Bf16Value,
}

pub const ENTRY_BYTES: usize = 6;

/// Top-k feature sketch for a single position, in ascending feature order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<SketchEntry>", into = "Vec<SketchEntry>")]
pub struct TraceSketch {
    entries: Vec<SketchEntry>,
}

impl TryFrom<Vec<SketchEntry>> for TraceSketch {
    type Error = Error;
    fn try_from(entries: Vec<SketchEntry>) -> Result<Self> {
        TraceSketch::new(entries)
    }
}

impl From<TraceSketch> for Vec<SketchEntry> {
    fn from(s: TraceSketch) -> Self {
        s.entries
    }
}

impl TraceSketch {
    pub fn new(entries: Vec<SketchEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidSketch("sketch must have k >= 1 entries".into()));
        }
        if entries.len() > u16::MAX as usize {
            return Err(Error::InvalidSketch(format!("width {} too large", entries.len())));
        }
        for w in entries.windows(2) {
            if w[0].feature >= w[1].feature {
                return Err(Error::InvalidSketch(format!(
                    "feature indices not strictly ascending at {} -> {}",
                    w[0].feature, w[1].feature
                )));
            }
        }
        if let Some(e) = entries.iter().find(|e| !e.value.is_finite()) {
            return Err(Error::InvalidSketch(format!("non-finite value at feature {}", e.feature)));
        }
        Ok(TraceSketch { entries })
    }

    /// Builds from unordered (feature, value) pairs, sorting and quantizing.
    pub fn from_pairs(pairs: &[(u32, f64)]) -> Result<Self> {
        let mut entries = pairs
            .iter()
            .map(|&(f, v)| {
                Ok(SketchEntry {
                    feature: FeatureIndex(f),
                    value: Bf16Value::quantize_f64(v)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        entries.sort_by_key(|e| e.feature);
        TraceSketch::new(entries)
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[SketchEntry] {
        &self.entries
    }

    /// Dequantized value of `feature`, or `None` when it is outside the support.
    pub fn value_of(&self, feature: FeatureIndex) -> Option<f64> {
        self.entries
            .binary_search_by_key(&feature, |e| e.feature)
            .ok()
            .map(|i| self.entries[i].value.to_f64())
    }

    pub fn contains(&self, feature: FeatureIndex) -> bool {
        self.entries.binary_search_by_key(&feature, |e| e.feature).is_ok()
    }

    pub fn max_feature(&self) -> FeatureIndex {
        self.entries[self.entries.len() - 1].feature
    }

    /// Canonical layout: per entry, feature (u32 BE) then value bits (u16 BE).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.entries.len() * ENTRY_BYTES);
        self.write_bytes(&mut out);
        out
    }

    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        for e in &self.entries {
            out.extend_from_slice(&e.feature.0.to_be_bytes());
            out.extend_from_slice(&e.value.0.to_be_bytes());
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() || !bytes.len().is_multiple_of(ENTRY_BYTES) {
            return Err(Error::Malformed(format!(
                "sketch encoding of {} bytes is not a positive multiple of 6",
                bytes.len()
            )));
        }
        let entries = bytes
            .chunks_exact(ENTRY_BYTES)
            .map(|c| SketchEntry {
                feature: FeatureIndex(u32::from_be_bytes([c[0], c[1], c[2], c[3]])),
                value: Bf16Value(u16::from_be_bytes([c[4], c[5]])),
            })
            .collect();
        TraceSketch::new(entries)
    }
}

/// Free-function form of [`TraceSketch::to_bytes`].
pub fn serialize_sketch(s: &TraceSketch) -> Vec<u8> {
    s.to_bytes()
}

fn by_value_desc_then_index(a: &(u32, f32), b: &(u32, f32)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Top-k of a dense activation vector; ties go to the lower feature index.
pub fn sketch_from_dense(dense: &[f32], k: usize) -> Result<TraceSketch> {
    if k > dense.len() {
        return Err(Error::WidthExceedsFeatures { k, d_sae: dense.len() });
    }
    if k == 0 {
        return Err(Error::InvalidSketch("k must be >= 1".into()));
    }
    if let Some(x) = dense.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(*x as f64));
    }
    let mut idx: Vec<(u32, f32)> = dense.iter().enumerate().map(|(i, &v)| (i as u32, v)).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_value_desc_then_index);
        idx.truncate(k);
    }
    finish_sketch(idx)
}

/// Top-k of a sparse activation vector where unlisted coordinates are zero.
///
/// Produces exactly what [`sketch_from_dense`] would on the densified vector.
pub fn sketch_from_sparse(entries: &[(u32, f32)], d_sae: usize, k: usize) -> Result<TraceSketch> {
    if k > d_sae {
        return Err(Error::WidthExceedsFeatures { k, d_sae });
    }
    if k == 0 {
        return Err(Error::InvalidSketch("k must be >= 1".into()));
    }
    let mut pos: Vec<(u32, f32)> = Vec::with_capacity(entries.len());
    let mut neg: Vec<(u32, f32)> = Vec::new();
    let mut listed_nonzero: Vec<u32> = Vec::new();
    for &(f, v) in entries {
        if !v.is_finite() {
            return Err(Error::NonFinite(v as f64));
        }
        if f as usize >= d_sae {
            return Err(Error::InvalidSketch(format!("feature {f} outside [0, {d_sae})")));
        }
        if v > 0.0 {
            pos.push((f, v));
            listed_nonzero.push(f);
        } else if v < 0.0 {
            neg.push((f, v));
            listed_nonzero.push(f);
        }
    }
    let mut chosen: Vec<(u32, f32)> = Vec::with_capacity(k);
    if pos.len() > k {
        pos.select_nth_unstable_by(k - 1, by_value_desc_then_index);
        pos.truncate(k);
    }
    chosen.extend_from_slice(&pos);
    if chosen.len() < k {
        listed_nonzero.sort_unstable();
        let mut f = 0u32;
        while chosen.len() < k && (f as usize) < d_sae {
            if listed_nonzero.binary_search(&f).is_err() {
                chosen.push((f, 0.0));
            }
            f += 1;
        }
    }
    if chosen.len() < k {
        neg.sort_by(by_value_desc_then_index);
        chosen.extend(neg.into_iter().take(k - chosen.len()));
    }
    finish_sketch(chosen)
}

fn finish_sketch(mut chosen: Vec<(u32, f32)>) -> Result<TraceSketch> {
    chosen.sort_by_key(|&(f, _)| f);
    let entries = chosen
        .into_iter()
        .map(|(f, v)| {
            Ok(SketchEntry {
                feature: FeatureIndex(f),
                value: Bf16Value::quantize(v)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TraceSketch::new(entries)
}

const MAX_ID_LEN: usize = 1 << 16;

/// Identity-binding tuple hashed into every leaf.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SessionMeta {
    #[serde(with = "hex::serde")]
    pub model_id: Vec<u8>,
    #[serde(with = "hex::serde")]
    pub sae_release: Vec<u8>,
    pub layer: u16,
    #[serde(with = "hex::serde")]
    pub input_hash: [u8; 32],
    #[serde(with = "hex::serde")]
    pub output_hash: [u8; 32],
    #[serde(with = "hex::serde")]
    pub nonce: [u8; 16],
    #[serde(with = "hex::serde")]
    pub provider_pubkey: [u8; 32],
}

impl SessionMeta {
    /// `u32 len ∥ model_id ∥ u32 len ∥ sae_release ∥ u16 layer ∥ H(x) ∥ H(y) ∥ nonce ∥ pubkey`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(8 + self.model_id.len() + self.sae_release.len() + 114);
        self.write_bytes(&mut out)?;
        Ok(out)
    }

    pub fn write_bytes(&self, out: &mut Vec<u8>) -> Result<()> {
        for id in [&self.model_id, &self.sae_release] {
            if id.len() > MAX_ID_LEN {
                return Err(Error::IdentifierTooLong(id.len()));
            }
            out.extend_from_slice(&(id.len() as u32).to_be_bytes());
            out.extend_from_slice(id);
        }
        out.extend_from_slice(&self.layer.to_be_bytes());
        out.extend_from_slice(&self.input_hash);
        out.extend_from_slice(&self.output_hash);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.provider_pubkey);
        Ok(())
    }

    /// Parses a serialized meta from the front of `bytes`; returns it with the
    /// number of bytes consumed.
    pub fn parse_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader::new(bytes);
        let model_id = r.len_prefixed(MAX_ID_LEN)?.to_vec();
        let sae_release = r.len_prefixed(MAX_ID_LEN)?.to_vec();
        let layer = r.u16()?;
        let input_hash = r.array::<32>()?;
        let output_hash = r.array::<32>()?;
        let nonce = r.array::<16>()?;
        let provider_pubkey = r.array::<32>()?;
        let meta = SessionMeta {
            model_id,
            sae_release,
            layer,
            input_hash,
            output_hash,
            nonce,
            provider_pubkey,
        };
        Ok((meta, r.pos))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, used) = Self::parse_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes after meta", bytes.len() - used)));
        }
        Ok(meta)
    }
}

/// Free-function form of [`SessionMeta::to_bytes`].
pub fn serialize_meta(m: &SessionMeta) -> Result<Vec<u8>> {
    m.to_bytes()
}

/// Cursor over a big-endian byte buffer.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Malformed(format!(
                "need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.array::<8>()?))
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    pub(crate) fn len_prefixed(&mut self, max: usize) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        if n > max {
            return Err(Error::IdentifierTooLong(n));
        }
        self.take(n)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent bit-level oracle: add 0x7FFF plus the LSB of the upper half.
    fn oracle_bf16(x: f32) -> u16 {
        let b = x.to_bits() as u64;
        ((b + 0x7FFF + ((b >> 16) & 1)) >> 16) as u16
    }

    fn meta_fixture() -> SessionMeta {
        SessionMeta {
            model_id: b"m".to_vec(),
            sae_release: b"sae".to_vec(),
            layer: 14,
            input_hash: [1; 32],
            output_hash: [2; 32],
            nonce: [3; 16],
            provider_pubkey: [4; 32],
        }
    }

    #[test]
    fn bf16_examples() {
        assert_eq!(Bf16Value::quantize(1.0).unwrap().0, 0x3F80);
        assert_eq!(Bf16Value::quantize(1.0).unwrap().to_f32(), 1.0);
        assert_eq!(Bf16Value::quantize(0.0).unwrap().0, 0x0000);
        let pi = Bf16Value::quantize(std::f32::consts::PI).unwrap();
        assert_eq!(pi.0, oracle_bf16(std::f32::consts::PI));
        assert_eq!(pi.to_f32(), 3.140625);
        assert_eq!(Bf16Value::quantize(-0.0).unwrap().0, 0x8000);
        assert_eq!(Bf16Value::quantize(-2.5).unwrap().to_f32(), -2.5);
    }

    #[test]
    fn bf16_ties_to_even() {
        // 1 + 2^-8 sits exactly halfway between 1.0 and 1 + 2^-7.
        let halfway = f32::from_bits(0x3F80_8000);
        assert_eq!(Bf16Value::quantize(halfway).unwrap().0, 0x3F80);
        let halfway_odd = f32::from_bits(0x3F81_8000);
        assert_eq!(Bf16Value::quantize(halfway_odd).unwrap().0, 0x3F82);
    }

    #[test]
    fn bf16_rejects_non_finite() {
        assert!(Bf16Value::quantize(f32::NAN).is_err());
        assert!(Bf16Value::quantize(f32::INFINITY).is_err());
        assert!(Bf16Value::quantize(f32::MAX).is_err(), "rounds up into infinity");
    }

    #[test]
    fn bracket_contains_value() {
        for &x in &[std::f64::consts::PI, -2.0, 0.0, 1e-3, -7.77] {
            let (lo, hi) = Bf16Value::bracket(x).unwrap();
            assert!(lo.to_f64() <= x && x <= hi.to_f64(), "{x}: {lo:?} {hi:?}");
        }
        let (lo, hi) = Bf16Value::bracket(2.0).unwrap();
        assert_eq!(lo, hi);
    }

    #[test]
    fn top_k_examples() {
        let s = sketch_from_dense(&[5.0, 0.0, 3.0], 2).unwrap();
        assert_eq!(s, TraceSketch::from_pairs(&[(0, 5.0), (2, 3.0)]).unwrap());
        let z = sketch_from_dense(&[0.0; 4], 2).unwrap();
        assert_eq!(z, TraceSketch::from_pairs(&[(0, 0.0), (1, 0.0)]).unwrap());
        let t = sketch_from_dense(&[1.0, 2.0, 2.0, 0.5], 2).unwrap();
        assert_eq!(t, TraceSketch::from_pairs(&[(1, 2.0), (2, 2.0)]).unwrap());
        assert!(matches!(
            sketch_from_dense(&[1.0], 2),
            Err(Error::WidthExceedsFeatures { k: 2, d_sae: 1 })
        ));
    }

    #[test]
    fn top_k_brute_force_tie_break() {
        // Enumerate all size-2 subsets: the winner maximises the value sum and,
        // among equal sums, is lexicographically smallest.
        let dense = [1.0f32, 2.0, 2.0, 0.5];
        let mut best: Option<(f32, [usize; 2])> = None;
        for a in 0..4 {
            for b in a + 1..4 {
                let s = dense[a] + dense[b];
                match best {
                    Some((bs, _)) if bs >= s => {}
                    _ => best = Some((s, [a, b])),
                }
            }
        }
        let [a, b] = best.unwrap().1;
        let s = sketch_from_dense(&dense, 2).unwrap();
        let feats: Vec<u32> = s.entries().iter().map(|e| e.feature.0).collect();
        assert_eq!(feats, vec![a as u32, b as u32]);
    }

    #[test]
    fn serialization_layouts() {
        let s = TraceSketch::from_pairs(&[(0, 0.0)]).unwrap();
        assert_eq!(s.to_bytes(), vec![0, 0, 0, 0, 0, 0]);
        let wide: Vec<(u32, f64)> = (0..32).map(|i| (i * 3, i as f64)).collect();
        assert_eq!(TraceSketch::from_pairs(&wide).unwrap().to_bytes().len(), 192);

        let meta = SessionMeta {
            model_id: vec![],
            sae_release: vec![],
            layer: 14,
            ..meta_fixture()
        };
        let b = meta.to_bytes().unwrap();
        assert_eq!(&b[..10], &[0, 0, 0, 0, 0, 0, 0, 0, 0, 0x0E]);
        assert_eq!(b.len(), 10 + 32 + 32 + 16 + 32);
    }

    #[test]
    fn meta_binds_nonce_and_rejects_long_ids() {
        let a = meta_fixture();
        let mut b = a.clone();
        b.nonce[5] ^= 1;
        assert_ne!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let mut long = a.clone();
        long.model_id = vec![0; (1 << 16) + 1];
        assert_eq!(long.to_bytes(), Err(Error::IdentifierTooLong((1 << 16) + 1)));
    }

    #[test]
    fn sketch_invariants_enforced() {
        let e = |f, v| SketchEntry { feature: FeatureIndex(f), value: Bf16Value(v) };
        assert!(TraceSketch::new(vec![e(2, 0), e(1, 0)]).is_err());
        assert!(TraceSketch::new(vec![e(1, 0), e(1, 0)]).is_err());
        assert!(TraceSketch::new(vec![e(1, 0x7F80)]).is_err());
        assert!(TraceSketch::new(vec![]).is_err());
    }

    proptest! {
        #[test]
        fn bf16_idempotent(bits in any::<u32>()) {
            let x = f32::from_bits(bits);
            prop_assume!(x.is_finite());
            if let Ok(q) = Bf16Value::quantize(x) {
                prop_assert_eq!(Bf16Value::quantize(q.to_f32()).unwrap(), q);
                prop_assert_eq!(q.0, oracle_bf16(x));
                prop_assert_eq!(q.to_f32().is_sign_negative(), x.is_sign_negative());
            }
        }

        #[test]
        fn dense_top_k_excludes_only_smaller(dense in prop::collection::vec(-5.0f32..5.0, 1..40), k in 1usize..40) {
            prop_assume!(k <= dense.len());
            let s = sketch_from_dense(&dense, k).unwrap();
            prop_assert_eq!(s.k(), k);
            let min_in = s.entries().iter().map(|e| dense[e.feature.0 as usize]).fold(f32::INFINITY, f32::min);
            for (j, &v) in dense.iter().enumerate() {
                if !s.contains(FeatureIndex(j as u32)) {
                    prop_assert!(v <= min_in);
                }
            }
        }

        #[test]
        fn sparse_matches_dense(
            raw in prop::collection::btree_map(0u32..60, -2.0f32..5.0, 0..30),
            zeros in prop::collection::vec(0u32..60, 0..5),
            k in 1usize..40,
        ) {
            let d_sae = 60;
            let mut listed: Vec<(u32, f32)> = raw.into_iter().collect();
            for z in zeros {
                if !listed.iter().any(|&(f, _)| f == z) {
                    listed.push((z, 0.0));
                }
            }
            let mut dense = vec![0.0f32; d_sae];
            for &(f, v) in &listed {
                dense[f as usize] = v;
            }
            prop_assert_eq!(
                sketch_from_sparse(&listed, d_sae, k).unwrap(),
                sketch_from_dense(&dense, k).unwrap()
            );
        }

        #[test]
        fn meta_round_trip(
            model in prop::collection::vec(any::<u8>(), 0..40),
            sae in prop::collection::vec(any::<u8>(), 0..40),
            layer in any::<u16>(),
            nonce in any::<[u8; 16]>(),
            h in any::<[u8; 32]>(),
        ) {
            let m = SessionMeta {
                model_id: model,
                sae_release: sae,
                layer,
                input_hash: h,
                output_hash: [9; 32],
                nonce,
                provider_pubkey: h,
            };
            let bytes = m.to_bytes().unwrap();
            prop_assert_eq!(SessionMeta::from_bytes(&bytes).unwrap(), m);
        }

        #[test]
        fn sketch_bytes_round_trip(raw in prop::collection::btree_map(any::<u32>(), -100.0f64..100.0, 1..40)) {
            let pairs: Vec<(u32, f64)> = raw.into_iter().collect();
            let s = TraceSketch::from_pairs(&pairs).unwrap();
            let bytes = s.to_bytes();
            prop_assert_eq!(bytes.len(), 6 * s.k());
            prop_assert_eq!(TraceSketch::from_bytes(&bytes).unwrap(), s);
        }
    }
}
