//! Per-session Merkle commitment over trace-sketch leaves.
//!
//! ```text
//! leaf_t = SHA-256("LEAF" ∥ meta ∥ t as u64 BE ∥ sketch_t)
//! node   = SHA-256("NODE" ∥ left ∥ right)
//! ```
//!
//! An unpaired node is promoted unchanged to the next level, so a single-leaf
//! tree has `root == leaf`. Paths carry explicit side bits.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{SessionMeta, TraceSketch};

pub const LEAF_TAG: &[u8; 4] = b"LEAF";
pub const NODE_TAG: &[u8; 4] = b"NODE";
/// Root plus a width-32 serialized sketch.
pub const OPENING_PAYLOAD_BYTES: usize = 32 + 32 * 6;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Digest32(#[serde(with = "hex::serde")] pub [u8; 32]);

impl fmt::Debug for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest32({})", hex::encode(self.0))
    }
}

impl fmt::Display for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl Digest32 {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

pub fn leaf_hash(meta: &SessionMeta, t: u64, sketch: &TraceSketch) -> Result<Digest32> {
    let mut buf = Vec::with_capacity(256);
    buf.extend_from_slice(LEAF_TAG);
    meta.write_bytes(&mut buf)?;
    buf.extend_from_slice(&t.to_be_bytes());
    sketch.write_bytes(&mut buf);
    Ok(Digest32(sha256(&buf)))
}

/// Leaf hasher with the `"LEAF" ∥ meta` prefix absorbed once per session.
#[derive(Clone)]
pub struct LeafHasher {
    prefix: Sha256,
}

impl LeafHasher {
    pub fn new(meta: &SessionMeta) -> Result<Self> {
        let mut prefix = Sha256::new();
        prefix.update(LEAF_TAG);
        prefix.update(meta.to_bytes()?);
        Ok(LeafHasher { prefix })
    }

    pub fn leaf(&self, t: u64, sketch: &TraceSketch) -> Digest32 {
        let mut h = self.prefix.clone();
        h.update(t.to_be_bytes());
        let mut body = Vec::with_capacity(sketch.k() * 6);
        sketch.write_bytes(&mut body);
        h.update(&body);
        Digest32(h.finalize().into())
    }
}

pub fn node_hash(left: &Digest32, right: &Digest32) -> Digest32 {
    let mut h = Sha256::new();
    h.update(NODE_TAG);
    h.update(left.0);
    h.update(right.0);
    Digest32(h.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// Sibling sits to the left of the running hash.
    Left,
    /// Sibling sits to the right of the running hash.
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathStep {
    pub sibling: Digest32,
    pub side: Side,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MerklePath {
    pub steps: Vec<PathStep>,
}

impl MerklePath {
    /// Folds `leaf` up the path.
    pub fn replay(&self, leaf: Digest32) -> Digest32 {
        self.steps.iter().fold(leaf, |acc, step| match step.side {
            Side::Left => node_hash(&step.sibling, &acc),
            Side::Right => node_hash(&acc, &step.sibling),
        })
    }

    /// Side sequence a path for leaf `t` in a `len`-leaf tree must have.
    pub fn expected_sides(t: u64, len: u64) -> Result<Vec<Side>> {
        if t >= len {
            return Err(Error::PositionOutOfRange { t, len });
        }
        let mut sides = Vec::new();
        let (mut idx, mut width) = (t, len);
        while width > 1 {
            let sib = idx ^ 1;
            if sib < width {
                sides.push(if idx & 1 == 0 { Side::Right } else { Side::Left });
            }
            idx /= 2;
            width = width.div_ceil(2);
        }
        Ok(sides)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleTree {
    /// `levels[0]` holds the leaves; the last level holds only the root.
    levels: Vec<Vec<Digest32>>,
}

impl MerkleTree {
    pub fn build(leaves: Vec<Digest32>) -> Result<Self> {
        if leaves.is_empty() {
            return Err(Error::EmptyTree);
        }
        let mut levels = vec![leaves];
        while levels.last().map_or(0, Vec::len) > 1 {
            let prev = levels.last().unwrap();
            let next: Vec<Digest32> = prev
                .chunks(2)
                .map(|pair| match pair {
                    [l, r] => node_hash(l, r),
                    [single] => *single,
                    _ => unreachable!(),
                })
                .collect();
            levels.push(next);
        }
        Ok(MerkleTree { levels })
    }

    pub fn root(&self) -> Digest32 {
        self.levels.last().unwrap()[0]
    }

    pub fn len(&self) -> usize {
        self.levels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn leaves(&self) -> &[Digest32] {
        &self.levels[0]
    }

    pub fn prove(&self, t: u64) -> Result<MerklePath> {
        let len = self.len() as u64;
        if t >= len {
            return Err(Error::PositionOutOfRange { t, len });
        }
        let mut idx = t as usize;
        let mut steps = Vec::new();
        for level in &self.levels[..self.levels.len() - 1] {
            let sib = idx ^ 1;
            if sib < level.len() {
                steps.push(PathStep {
                    sibling: level[sib],
                    side: if idx & 1 == 0 { Side::Right } else { Side::Left },
                });
            }
            idx /= 2;
        }
        Ok(MerklePath { steps })
    }
}

pub fn build_tree(leaf_digests: Vec<Digest32>) -> Result<MerkleTree> {
    MerkleTree::build(leaf_digests)
}

pub fn verify_path(root: &Digest32, leaf: Digest32, path: &MerklePath) -> bool {
    path.replay(leaf) == *root
}

/// Accepts iff the recomputed leaf for `(meta, t, sketch)` replays to `root`.
pub fn verify_opening(
    root: &Digest32,
    meta: &SessionMeta,
    t: u64,
    sketch: &TraceSketch,
    path: &MerklePath,
) -> bool {
    match leaf_hash(meta, t, sketch) {
        Ok(leaf) => verify_path(root, leaf, path),
        Err(_) => false,
    }
}

/// [`verify_opening`] plus a check that the path's shape is the one leaf `t`
/// has in a `len`-leaf tree, so a provider cannot commit two leaves for the
/// same position and open whichever suits it.
pub fn verify_opening_at(
    root: &Digest32,
    meta: &SessionMeta,
    t: u64,
    len: u64,
    sketch: &TraceSketch,
    path: &MerklePath,
) -> bool {
    match MerklePath::expected_sides(t, len) {
        Ok(sides) => {
            sides.len() == path.steps.len()
                && sides.iter().zip(&path.steps).all(|(s, step)| *s == step.side)
                && verify_opening(root, meta, t, sketch, path)
        }
        Err(_) => false,
    }
}

/// `root ∥ sketch`, exactly 224 bytes for a width-32 sketch.
pub fn encode_opening_payload(root: &Digest32, sketch: &TraceSketch) -> Result<Vec<u8>> {
    if sketch.k() != 32 {
        return Err(Error::PayloadWidth(sketch.k()));
    }
    let mut out = Vec::with_capacity(OPENING_PAYLOAD_BYTES);
    out.extend_from_slice(&root.0);
    sketch.write_bytes(&mut out);
    debug_assert_eq!(out.len(), OPENING_PAYLOAD_BYTES);
    Ok(out)
}

pub fn decode_opening_payload(bytes: &[u8]) -> Result<(Digest32, TraceSketch)> {
    if bytes.len() != OPENING_PAYLOAD_BYTES {
        return Err(Error::Malformed(format!(
            "opening payload must be {OPENING_PAYLOAD_BYTES} bytes, got {}",
            bytes.len()
        )));
    }
    let mut root = [0u8; 32];
    root.copy_from_slice(&bytes[..32]);
    Ok((Digest32(root), TraceSketch::from_bytes(&bytes[32..])?))
}

/// One conformance record: leaf inputs with the digests they must produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenVector {
    pub meta: SessionMeta,
    pub t: u64,
    pub sketch: TraceSketch,
    pub leaf: Digest32,
}

/// Fixture file: a list of leaves and the root of the tree they form in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenFixture {
    pub vectors: Vec<GoldenVector>,
    pub root: Digest32,
}

impl GoldenFixture {
    /// Recomputes every leaf and the root; returns the first mismatch.
    pub fn check(&self) -> std::result::Result<(), String> {
        let mut leaves = Vec::with_capacity(self.vectors.len());
        for (i, v) in self.vectors.iter().enumerate() {
            let leaf = leaf_hash(&v.meta, v.t, &v.sketch).map_err(|e| e.to_string())?;
            if leaf != v.leaf {
                return Err(format!("vector {i}: leaf {leaf} != expected {}", v.leaf));
            }
            leaves.push(leaf);
        }
        let root = MerkleTree::build(leaves).map_err(|e| e.to_string())?.root();
        if root != self.root {
            return Err(format!("root {root} != expected {}", self.root));
        }
        Ok(())
    }
}
