//! Verifier side of the commit-open audit and of the probe-after-return
//! baseline.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::message::{Message, SessionId};
use super::plan::{open_rounds, round_positions, SessionPlan};
use super::transport::{Transport, TransportError};
use crate::error::Error;
use crate::merkle::{sha256, verify_opening_at, Digest32};
use crate::probe::{probe_z, Decision, ProbeLibrary};
use crate::types::{SessionMeta, TraceSketch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub plan: SessionPlan,
    pub k_open: usize,
    pub n_probes: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "detail")]
pub enum RejectReason {
    OpeningVerificationFailed,
    CommitAfterOpen,
    MetaMismatch,
    ThresholdExceeded,
    ProviderError(String),
    ProtocolViolation(String),
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::OpeningVerificationFailed => f.write_str("opening verification failed"),
            RejectReason::CommitAfterOpen => f.write_str("commit-after-open"),
            RejectReason::MetaMismatch => f.write_str("meta mismatch"),
            RejectReason::ThresholdExceeded => f.write_str("threshold exceeded"),
            RejectReason::ProviderError(m) => write!(f, "provider error: {m}"),
            RejectReason::ProtocolViolation(m) => write!(f, "protocol violation: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    #[serde(with = "hex::serde")]
    pub session_id: SessionId,
    /// Joint z of each scored round, in round order.
    pub round_z: Vec<f64>,
    pub decision: Decision,
    pub tau: f64,
    pub reason: Option<RejectReason>,
    pub positions_opened: usize,
    pub probe_seed: u64,
}

impl Verdict {
    fn reject(session_id: SessionId, tau: f64, reason: RejectReason) -> Self {
        Verdict {
            session_id,
            round_z: Vec::new(),
            decision: Decision::Reject,
            tau,
            reason: Some(reason),
            positions_opened: 0,
            probe_seed: 0,
        }
    }

    pub fn accepted(&self) -> bool {
        self.decision == Decision::Accept
    }
}

/// The audit could not reach a verdict.
#[derive(Debug, Error)]
pub enum AuditError {
    #[error("transport failure: {0}")]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Invalid(#[from] Error),
}

/// Per-connection logical clock: every send and receive takes the next tick.
#[derive(Debug, Default)]
struct SeqClock(u64);

impl SeqClock {
    fn tick(&mut self) -> u64 {
        self.0 += 1;
        self.0
    }
}

struct Announce {
    seq: u64,
    session_id: SessionId,
    meta: SessionMeta,
    num_positions: u64,
    root: Digest32,
}

/// One commit-open audit over `transport`.
pub fn verifier_audit<T: Transport, R: Rng + ?Sized>(
    transport: &mut T,
    library: &ProbeLibrary,
    config: &AuditConfig,
    prompt: &[u8],
    rng: &mut R,
) -> Result<Verdict, AuditError> {
    if config.plan.num_probes != library.len() {
        return Err(Error::InvalidParameter("plan and library disagree on probe count".into()).into());
    }
    let mut clock = SeqClock::default();
    let nonce: [u8; 16] = rng.random();
    let probe_seed: u64 = rng.random();
    let rounds = open_rounds(&config.plan, probe_seed, config.k_open, config.n_probes)?;
    let positions = round_positions(&config.plan, &rounds);

    transport.send(&Message::ServeRequest { nonce, prompt: prompt.to_vec() })?;
    clock.tick();
    let mut announce: Option<Announce> = None;
    let take_announce = |m: Message, seq: u64, slot: &mut Option<Announce>| -> Option<RejectReason> {
        let Message::CommitAnnounce { session_id, meta, num_positions, root } = m else { unreachable!() };
        if slot.is_some() {
            return Some(RejectReason::ProtocolViolation("duplicate commit announce".into()));
        }
        *slot = Some(Announce { seq, session_id, meta, num_positions, root });
        None
    };

    let (session_id, output) = loop {
        let m = transport.recv()?;
        let seq = clock.tick();
        match m {
            m @ Message::CommitAnnounce { .. } => {
                if let Some(r) = take_announce(m, seq, &mut announce) {
                    return Ok(Verdict::reject([0; 16], config.tau, r));
                }
            }
            Message::ServeResponse { session_id, output } => break (session_id, output),
            Message::Error { session_id, message, .. } => {
                return Ok(Verdict::reject(session_id, config.tau, RejectReason::ProviderError(message)))
            }
            other => {
                return Ok(Verdict::reject(
                    [0; 16],
                    config.tau,
                    RejectReason::ProtocolViolation(format!("unexpected message 0x{:02x}", other.msg_type())),
                ))
            }
        }
    };

    transport.send(&Message::OpenRequest { session_id, probe_seed, positions: positions.clone() })?;
    let open_seq = clock.tick();
    let openings = loop {
        let m = transport.recv()?;
        let seq = clock.tick();
        match m {
            m @ Message::CommitAnnounce { .. } => {
                if let Some(r) = take_announce(m, seq, &mut announce) {
                    return Ok(Verdict::reject(session_id, config.tau, r));
                }
            }
            Message::OpenResponse { session_id: sid, openings } if sid == session_id => break openings,
            Message::Error { message, .. } => {
                return Ok(Verdict::reject(session_id, config.tau, RejectReason::ProviderError(message)))
            }
            other => {
                return Ok(Verdict::reject(
                    session_id,
                    config.tau,
                    RejectReason::ProtocolViolation(format!("unexpected message 0x{:02x}", other.msg_type())),
                ))
            }
        }
    };

    let reject = |r| Ok(Verdict { positions_opened: openings.len(), probe_seed, ..Verdict::reject(session_id, config.tau, r) });
    let Some(a) = announce else { return reject(RejectReason::CommitAfterOpen) };
    if a.seq >= open_seq {
        return reject(RejectReason::CommitAfterOpen);
    }
    let meta_ok = a.session_id == session_id
        && a.num_positions == config.plan.num_positions()
        && a.meta.input_hash == sha256(prompt)
        && a.meta.output_hash == sha256(&output)
        && a.meta.nonce == nonce;
    if !meta_ok {
        return reject(RejectReason::MetaMismatch);
    }
    if openings.len() != positions.len() || openings.iter().zip(&positions).any(|(o, &t)| o.t != t) {
        return reject(RejectReason::OpeningVerificationFailed);
    }
    if !openings.iter().all(|o| verify_opening_at(&a.root, &a.meta, o.t, a.num_positions, &o.sketch, &o.path)) {
        return reject(RejectReason::OpeningVerificationFailed);
    }
    let sketches: Vec<&TraceSketch> = openings.iter().map(|o| &o.sketch).collect();
    Ok(score_rounds(session_id, &rounds, &sketches, library, config, probe_seed)?)
}

fn score_rounds(
    session_id: SessionId,
    rounds: &[super::plan::OpenRound],
    sketches: &[&TraceSketch],
    library: &ProbeLibrary,
    config: &AuditConfig,
    probe_seed: u64,
) -> crate::Result<Verdict> {
    let mut round_z = Vec::with_capacity(rounds.len());
    let mut offset = 0;
    for r in rounds {
        let n = r.subset.len();
        let mut acc = 0.0;
        for (j, &i) in r.subset.iter().enumerate() {
            acc += probe_z(sketches[offset + j], library.probe(i)?);
        }
        round_z.push(acc / n as f64);
        offset += n;
    }
    let exceeded = round_z.iter().any(|&z| z > config.tau);
    Ok(Verdict {
        session_id,
        round_z,
        decision: if exceeded { Decision::Reject } else { Decision::Accept },
        tau: config.tau,
        reason: exceeded.then_some(RejectReason::ThresholdExceeded),
        positions_opened: sketches.len(),
        probe_seed,
    })
}

/// Probe-after-return baseline: serve, then query probes with no commitment.
/// The verdict depends on the probe responses only.
pub fn svip_baseline_audit<T: Transport, R: Rng + ?Sized>(
    transport: &mut T,
    library: &ProbeLibrary,
    config: &AuditConfig,
    prompt: &[u8],
    rng: &mut R,
) -> Result<Verdict, AuditError> {
    let nonce: [u8; 16] = rng.random();
    let probe_seed: u64 = rng.random();
    let rounds = open_rounds(&config.plan, probe_seed, config.k_open, config.n_probes)?;
    let positions = round_positions(&config.plan, &rounds);
    transport.send(&Message::ServeRequest { nonce, prompt: prompt.to_vec() })?;
    let session_id = match transport.recv()? {
        Message::ServeResponse { session_id, .. } => session_id,
        Message::Error { session_id, message, .. } => {
            return Ok(Verdict::reject(session_id, config.tau, RejectReason::ProviderError(message)))
        }
        other => {
            return Ok(Verdict::reject(
                [0; 16],
                config.tau,
                RejectReason::ProtocolViolation(format!("unexpected message 0x{:02x}", other.msg_type())),
            ))
        }
    };
    transport.send(&Message::ProbeQuery { session_id, probe_seed, positions: positions.clone() })?;
    let answers = match transport.recv()? {
        Message::ProbeResponse { answers, .. } => answers,
        Message::Error { message, .. } => {
            return Ok(Verdict::reject(session_id, config.tau, RejectReason::ProviderError(message)))
        }
        other => {
            return Ok(Verdict::reject(
                session_id,
                config.tau,
                RejectReason::ProtocolViolation(format!("unexpected message 0x{:02x}", other.msg_type())),
            ))
        }
    };
    if answers.len() != positions.len() || answers.iter().zip(&positions).any(|(a, &t)| a.t != t) {
        return Ok(Verdict::reject(
            session_id,
            config.tau,
            RejectReason::ProtocolViolation("probe response does not cover the query".into()),
        ));
    }
    let sketches: Vec<&TraceSketch> = answers.iter().map(|a| &a.sketch).collect();
    Ok(score_rounds(session_id, &rounds, &sketches, library, config, probe_seed)?)
}
