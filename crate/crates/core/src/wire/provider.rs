//! Sans-IO provider: consumes one message, returns the messages to send.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::message::{
    Message, Opening, ProbeAnswer, SessionId, ERR_INTERNAL, ERR_POSITION_OUT_OF_RANGE, ERR_UNEXPECTED_MESSAGE,
    ERR_UNKNOWN_SESSION,
};
use super::plan::SessionPlan;
use crate::error::{Error, Result};
use crate::hashrng::hash_words;
use crate::merkle::{sha256, LeafHasher, MerkleTree};
use crate::synth::{fleet_tuples, BackendConfig, Deployment, DistortionSpec, TraceModel};
use crate::types::{Bf16Value, SessionMeta, SketchEntry, TraceSketch};

pub const MODEL_ID: &[u8] = b"synthetic-lm-9b";
pub const SAE_RELEASE: &[u8] = b"synthetic-sae-16k";
pub const SAE_LAYER: u16 = 20;

/// What the provider serves and what it commits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Strategy {
    /// A: serve and commit the honest model.
    Honest,
    /// B: serve the substitute and commit its trace.
    Substitute,
    /// C: serve the substitute, commit a parallel honest pass.
    ParallelCommit,
    /// D: serve and commit a blend of the two.
    Mixture { alpha: f64 },
}

impl Strategy {
    fn committed_model(&self, distortion: DistortionSpec) -> TraceModel {
        match *self {
            Strategy::Honest | Strategy::ParallelCommit => TraceModel::Honest,
            Strategy::Substitute => TraceModel::Substitute { distortion },
            Strategy::Mixture { alpha } => TraceModel::Mixture { alpha, distortion },
        }
    }

    fn serves_substitute(&self) -> bool {
        !matches!(self, Strategy::Honest)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Honest => f.write_str("a"),
            Strategy::Substitute => f.write_str("b"),
            Strategy::ParallelCommit => f.write_str("c"),
            Strategy::Mixture { alpha } => write!(f, "d:{alpha}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;
    /// `a|honest`, `b|substitute`, `c|parallel`, `d[:alpha]|mixture[:alpha]`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (head, arg) = lower.split_once(':').map_or((lower.as_str(), None), |(h, a)| (h, Some(a)));
        let parsed = match (head, arg) {
            ("a" | "honest", None) => Strategy::Honest,
            ("b" | "substitute", None) => Strategy::Substitute,
            ("c" | "parallel", None) => Strategy::ParallelCommit,
            ("d" | "mixture", a) => Strategy::Mixture {
                alpha: a
                    .map(str::parse)
                    .transpose()
                    .map_err(|_| Error::InvalidParameter(format!("bad mixture weight in {s:?}")))?
                    .unwrap_or(0.05),
            },
            _ => return Err(Error::InvalidParameter(format!("unknown strategy {s:?}"))),
        };
        if let Strategy::Mixture { alpha } = parsed {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::InvalidParameter(format!("mixture weight {alpha} not in [0, 1]")));
            }
        }
        Ok(parsed)
    }
}

/// Deliberate protocol faults, for exercising the verifier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Misbehavior {
    #[default]
    None,
    /// Withhold the announce until the open request arrives.
    LateCommit,
    /// Flip one value bit in the first opening.
    TamperOpening,
    /// Commit a meta whose output digest is not that of the served output.
    WrongOutputHash,
}

/// How a baseline attacker answers post-hoc probe queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingVariant {
    /// Fresh honest pass for each queried position.
    PerProbe,
    /// One honest pass per queried block.
    Batched,
    /// Honest blocks generated once per configuration and replayed.
    Cached,
}

impl RoutingVariant {
    pub const ALL: [RoutingVariant; 3] = [RoutingVariant::PerProbe, RoutingVariant::Batched, RoutingVariant::Cached];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CommitMode {
    CommitOpen,
    /// No commitment; probes arrive after service. With `routing`, probe
    /// queries are answered from the honest model.
    ProbeAfterReturn { routing: Option<RoutingVariant> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub strategy: Strategy,
    pub misbehavior: Misbehavior,
    pub mode: CommitMode,
    pub plan: SessionPlan,
    pub distortion: DistortionSpec,
    pub seed: u64,
}

impl ProviderConfig {
    pub fn new(strategy: Strategy, plan: SessionPlan, seed: u64) -> Self {
        ProviderConfig {
            strategy,
            misbehavior: Misbehavior::None,
            mode: CommitMode::CommitOpen,
            plan,
            distortion: DistortionSpec::default(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderStats {
    pub sessions: u64,
    pub openings_served: u64,
    pub probe_queries: u64,
    /// Honest trace generations beyond what serving required.
    pub extra_honest_generations: u64,
}

struct Session {
    config: BackendConfig,
    /// Committed (or, without commitment, served) blocks.
    blocks: Vec<Vec<TraceSketch>>,
    meta: SessionMeta,
    tree: Option<MerkleTree>,
    pending_announce: Option<Message>,
}

pub struct Provider {
    deployment: Arc<Deployment>,
    config: ProviderConfig,
    tuples: Vec<BackendConfig>,
    pubkey: [u8; 32],
    sessions: HashMap<SessionId, Session>,
    cache: HashMap<(BackendConfig, usize), Vec<TraceSketch>>,
    counter: u64,
    stats: ProviderStats,
}

/// Opaque output bytes for `prompt` under the honest or substitute model.
pub fn served_output(prompt: &[u8], substitute: bool) -> Vec<u8> {
    let tag: &[u8] = if substitute { b"OUT:M'" } else { b"OUT:M" };
    sha256(&[tag, prompt].concat()).to_vec()
}

impl Provider {
    pub fn new(deployment: Arc<Deployment>, config: ProviderConfig) -> Result<Self> {
        config.strategy.committed_model(config.distortion).validate()?;
        if config.plan.num_probes != deployment.library.len() {
            return Err(Error::InvalidParameter(format!(
                "plan has {} probes, library has {}",
                config.plan.num_probes,
                deployment.library.len()
            )));
        }
        let tuples = fleet_tuples(&deployment.fleet);
        let pubkey = sha256(&[b"PROVIDER".as_slice(), &config.seed.to_be_bytes()].concat());
        Ok(Provider {
            deployment,
            config,
            tuples,
            pubkey,
            sessions: HashMap::new(),
            cache: HashMap::new(),
            counter: 0,
            stats: ProviderStats::default(),
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn stats(&self) -> ProviderStats {
        self.stats
    }

    pub fn open_sessions(&self) -> usize {
        self.sessions.len()
    }

    pub fn handle(&mut self, msg: Message) -> Vec<Message> {
        let sid = msg.session_id().unwrap_or([0; 16]);
        let result = match msg {
            Message::ServeRequest { nonce, prompt } => self.serve(nonce, &prompt),
            Message::OpenRequest { session_id, positions, .. } => self.open(session_id, &positions),
            Message::ProbeQuery { session_id, positions, .. } => self.probe(session_id, &positions),
            other => Err((ERR_UNEXPECTED_MESSAGE, format!("provider does not accept message type 0x{:02x}", other.msg_type()))),
        };
        result.unwrap_or_else(|(code, message)| vec![Message::Error { session_id: sid, code, message }])
    }

    fn serve(&mut self, nonce: [u8; 16], prompt: &[u8]) -> std::result::Result<Vec<Message>, (u16, String)> {
        let internal = |e: Error| (ERR_INTERNAL, e.to_string());
        self.counter += 1;
        let session_id: SessionId = sha256(&[&self.pubkey[..], &nonce, &self.counter.to_be_bytes()].concat())[..16]
            .try_into()
            .expect("16 bytes");
        let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&[
            self.config.seed,
            self.counter,
            u64::from_be_bytes(nonce[..8].try_into().unwrap()),
            u64::from_be_bytes(nonce[8..].try_into().unwrap()),
        ]));
        let config = self.tuples[rng.random_range(0..self.tuples.len())];
        let plan = self.config.plan;
        let backend = &self.deployment.backend;
        let routing = matches!(self.config.mode, CommitMode::ProbeAfterReturn { routing: Some(_) });
        let model = if routing {
            TraceModel::Substitute { distortion: self.config.distortion }
        } else {
            self.config.strategy.committed_model(self.config.distortion)
        };
        let blocks = (0..plan.blocks)
            .map(|b| backend.gen_block(&model, &config.at_position(plan.backend_position(b)), &mut rng))
            .collect::<Result<Vec<_>>>()
            .map_err(internal)?;
        if self.config.strategy == Strategy::ParallelCommit {
            self.stats.extra_honest_generations += plan.num_positions();
        }
        let output = served_output(prompt, routing || self.config.strategy.serves_substitute());
        let mut output_hash = sha256(&output);
        if self.config.misbehavior == Misbehavior::WrongOutputHash {
            output_hash[0] ^= 0x01;
        }
        let meta = SessionMeta {
            model_id: MODEL_ID.to_vec(),
            sae_release: SAE_RELEASE.to_vec(),
            layer: SAE_LAYER,
            input_hash: sha256(prompt),
            output_hash,
            nonce,
            provider_pubkey: self.pubkey,
        };
        self.stats.sessions += 1;
        let response = Message::ServeResponse { session_id, output };
        let mut session = Session { config, blocks, meta, tree: None, pending_announce: None };
        if self.config.mode != CommitMode::CommitOpen {
            self.sessions.insert(session_id, session);
            return Ok(vec![response]);
        }
        let hasher = LeafHasher::new(&session.meta).map_err(internal)?;
        let leaves = session
            .blocks
            .iter()
            .flatten()
            .enumerate()
            .map(|(t, s)| hasher.leaf(t as u64, s))
            .collect();
        let tree = MerkleTree::build(leaves).map_err(internal)?;
        let announce = Message::CommitAnnounce {
            session_id,
            meta: session.meta.clone(),
            num_positions: plan.num_positions(),
            root: tree.root(),
        };
        session.tree = Some(tree);
        let out = if self.config.misbehavior == Misbehavior::LateCommit {
            session.pending_announce = Some(announce);
            vec![response]
        } else {
            vec![announce, response]
        };
        self.sessions.insert(session_id, session);
        Ok(out)
    }

    fn check_positions(&self, positions: &[u64]) -> std::result::Result<(), (u16, String)> {
        let len = self.config.plan.num_positions();
        match positions.iter().find(|&&t| t >= len) {
            Some(t) => Err((ERR_POSITION_OUT_OF_RANGE, format!("position {t} outside [0, {len})"))),
            None => Ok(()),
        }
    }

    fn open(&mut self, sid: SessionId, positions: &[u64]) -> std::result::Result<Vec<Message>, (u16, String)> {
        if !self.sessions.get(&sid).is_some_and(|s| s.tree.is_some()) {
            return Err((ERR_UNKNOWN_SESSION, format!("no committed session {}", hex::encode(sid))));
        }
        self.check_positions(positions)?;
        let mut session = self.sessions.remove(&sid).expect("checked");
        let plan = self.config.plan;
        let tree = session.tree.as_ref().expect("checked");
        let mut openings = positions
            .iter()
            .map(|&t| {
                Ok(Opening {
                    t,
                    sketch: session.blocks[plan.block_of(t)][plan.probe_of(t)].clone(),
                    path: tree.prove(t)?,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| (ERR_INTERNAL, e.to_string()))?;
        if self.config.misbehavior == Misbehavior::TamperOpening {
            if let Some(first) = openings.first_mut() {
                first.sketch = flip_low_bit(&first.sketch);
            }
        }
        self.stats.openings_served += openings.len() as u64;
        let mut out: Vec<Message> = session.pending_announce.take().into_iter().collect();
        out.push(Message::OpenResponse { session_id: sid, openings });
        Ok(out)
    }

    fn probe(&mut self, sid: SessionId, positions: &[u64]) -> std::result::Result<Vec<Message>, (u16, String)> {
        let CommitMode::ProbeAfterReturn { routing } = self.config.mode else {
            return Err((ERR_UNEXPECTED_MESSAGE, "probe queries are not served in commit-open mode".into()));
        };
        if !self.sessions.contains_key(&sid) {
            return Err((ERR_UNKNOWN_SESSION, format!("no session {}", hex::encode(sid))));
        }
        self.check_positions(positions)?;
        let session = self.sessions.remove(&sid).expect("checked");
        let plan = self.config.plan;
        let backend = &self.deployment.backend;
        let internal = |e: Error| (ERR_INTERNAL, e.to_string());
        let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&[self.config.seed, 0x9B0E, self.counter, positions.len() as u64]));
        let at = |block: usize| session.config.at_position(plan.backend_position(block));
        let answers: Vec<ProbeAnswer> = match routing {
            None => positions
                .iter()
                .map(|&t| ProbeAnswer { t, sketch: session.blocks[plan.block_of(t)][plan.probe_of(t)].clone() })
                .collect(),
            Some(RoutingVariant::PerProbe) => {
                self.stats.extra_honest_generations += positions.len() as u64;
                positions
                    .iter()
                    .map(|&t| {
                        let sketch = backend.gen_honest_trace(plan.probe_of(t), &at(plan.block_of(t)), &mut rng)?;
                        Ok(ProbeAnswer { t, sketch })
                    })
                    .collect::<Result<_>>()
                    .map_err(internal)?
            }
            Some(RoutingVariant::Batched) => {
                let mut batch: HashMap<usize, Vec<TraceSketch>> = HashMap::new();
                let mut out = Vec::with_capacity(positions.len());
                for &t in positions {
                    let b = plan.block_of(t);
                    let block = match batch.entry(b) {
                        Entry::Occupied(e) => e.into_mut(),
                        Entry::Vacant(e) => {
                            let block = backend.gen_block(&TraceModel::Honest, &at(b), &mut rng).map_err(internal)?;
                            self.stats.extra_honest_generations += block.len() as u64;
                            e.insert(block)
                        }
                    };
                    out.push(ProbeAnswer { t, sketch: block[plan.probe_of(t)].clone() });
                }
                out
            }
            Some(RoutingVariant::Cached) => {
                let mut out = Vec::with_capacity(positions.len());
                for &t in positions {
                    let b = plan.block_of(t);
                    let key = (session.config, b);
                    if !self.cache.contains_key(&key) {
                        let mut crng = ChaCha8Rng::seed_from_u64(hash_words(&[self.config.seed, 0xCAC4E, b as u64]));
                        let block = backend.gen_block(&TraceModel::Honest, &at(b), &mut crng).map_err(internal)?;
                        self.stats.extra_honest_generations += block.len() as u64;
                        self.cache.insert(key, block);
                    }
                    out.push(ProbeAnswer { t, sketch: self.cache[&key][plan.probe_of(t)].clone() });
                }
                out
            }
        };
        self.stats.probe_queries += 1;
        Ok(vec![Message::ProbeResponse { session_id: sid, answers }])
    }
}

fn flip_low_bit(s: &TraceSketch) -> TraceSketch {
    let mut entries = s.entries().to_vec();
    entries[0] = SketchEntry { feature: entries[0].feature, value: Bf16Value(entries[0].value.0 ^ 0x0001) };
    TraceSketch::new(entries).expect("flipping a mantissa bit keeps values finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_parsing() {
        assert_eq!("A".parse::<Strategy>().unwrap(), Strategy::Honest);
        assert_eq!("substitute".parse::<Strategy>().unwrap(), Strategy::Substitute);
        assert_eq!("c".parse::<Strategy>().unwrap(), Strategy::ParallelCommit);
        assert_eq!("d:0.2".parse::<Strategy>().unwrap(), Strategy::Mixture { alpha: 0.2 });
        assert_eq!("d".parse::<Strategy>().unwrap(), Strategy::Mixture { alpha: 0.05 });
        assert!("d:1.5".parse::<Strategy>().is_err());
        assert!("e".parse::<Strategy>().is_err());
        for s in [Strategy::Honest, Strategy::Substitute, Strategy::ParallelCommit, Strategy::Mixture { alpha: 0.5 }] {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
    }

    #[test]
    fn low_bit_flip_changes_value() {
        let s = TraceSketch::from_pairs(&[(3, 1.5), (9, 2.0)]).unwrap();
        let f = flip_low_bit(&s);
        assert_ne!(f, s);
        assert_eq!(f.entries()[1], s.entries()[1]);
    }
}
