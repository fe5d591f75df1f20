//! Protocol messages and their frame bodies.

use serde::{Deserialize, Serialize};

use super::frame::{encode_frame, FrameDecoder};
use crate::error::{Error, Result};
use crate::merkle::{Digest32, MerklePath, PathStep, Side};
use crate::types::{Reader, SessionMeta, TraceSketch, ENTRY_BYTES};

pub type SessionId = [u8; 16];

pub const MSG_SERVE_REQUEST: u8 = 0x01;
pub const MSG_SERVE_RESPONSE: u8 = 0x02;
pub const MSG_COMMIT_ANNOUNCE: u8 = 0x03;
pub const MSG_OPEN_REQUEST: u8 = 0x04;
pub const MSG_OPEN_RESPONSE: u8 = 0x05;
pub const MSG_ERROR: u8 = 0x06;
pub const MSG_PROBE_QUERY: u8 = 0x07;
pub const MSG_PROBE_RESPONSE: u8 = 0x08;

pub const ERR_UNKNOWN_SESSION: u16 = 1;
pub const ERR_POSITION_OUT_OF_RANGE: u16 = 2;
pub const ERR_UNEXPECTED_MESSAGE: u16 = 3;
pub const ERR_INTERNAL: u16 = 4;

const MAX_BYTES_FIELD: usize = 1 << 20;
const MAX_LIST: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Opening {
    pub t: u64,
    pub sketch: TraceSketch,
    pub path: MerklePath,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeAnswer {
    pub t: u64,
    pub sketch: TraceSketch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    ServeRequest {
        #[serde(with = "hex::serde")]
        nonce: [u8; 16],
        #[serde(with = "hex::serde")]
        prompt: Vec<u8>,
    },
    ServeResponse {
        #[serde(with = "hex::serde")]
        session_id: SessionId,
        #[serde(with = "hex::serde")]
        output: Vec<u8>,
    },
    CommitAnnounce {
        #[serde(with = "hex::serde")]
        session_id: SessionId,
        meta: SessionMeta,
        num_positions: u64,
        root: Digest32,
    },
    OpenRequest {
        #[serde(with = "hex::serde")]
        session_id: SessionId,
        probe_seed: u64,
        positions: Vec<u64>,
    },
    OpenResponse {
        #[serde(with = "hex::serde")]
        session_id: SessionId,
        openings: Vec<Opening>,
    },
    Error {
        #[serde(with = "hex::serde")]
        session_id: SessionId,
        code: u16,
        message: String,
    },
    ProbeQuery {
        #[serde(with = "hex::serde")]
        session_id: SessionId,
        probe_seed: u64,
        positions: Vec<u64>,
    },
    ProbeResponse {
        #[serde(with = "hex::serde")]
        session_id: SessionId,
        answers: Vec<ProbeAnswer>,
    },
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
}

fn put_positions(out: &mut Vec<u8>, positions: &[u64]) {
    out.extend_from_slice(&(positions.len() as u32).to_be_bytes());
    for t in positions {
        out.extend_from_slice(&t.to_be_bytes());
    }
}

fn put_sketch(out: &mut Vec<u8>, s: &TraceSketch) {
    out.extend_from_slice(&(s.k() as u16).to_be_bytes());
    s.write_bytes(out);
}

fn put_path(out: &mut Vec<u8>, p: &MerklePath) -> Result<()> {
    let n = u8::try_from(p.steps.len()).map_err(|_| Error::Malformed("path longer than 255 steps".into()))?;
    out.push(n);
    for step in &p.steps {
        out.push(match step.side {
            Side::Left => 0,
            Side::Right => 1,
        });
        out.extend_from_slice(&step.sibling.0);
    }
    Ok(())
}

fn get_count(r: &mut Reader) -> Result<usize> {
    let n = r.u32()? as usize;
    if n > MAX_LIST {
        return Err(Error::Malformed(format!("list of {n} entries exceeds limit")));
    }
    Ok(n)
}

fn get_positions(r: &mut Reader) -> Result<Vec<u64>> {
    let n = get_count(r)?;
    (0..n).map(|_| r.u64()).collect()
}

fn get_sketch(r: &mut Reader) -> Result<TraceSketch> {
    let k = r.u16()? as usize;
    TraceSketch::from_bytes(r.take(k * ENTRY_BYTES)?)
}

fn get_path(r: &mut Reader) -> Result<MerklePath> {
    let n = r.u8()?;
    let steps = (0..n)
        .map(|_| {
            let side = match r.u8()? {
                0 => Side::Left,
                1 => Side::Right,
                b => return Err(Error::Malformed(format!("invalid path side byte {b}"))),
            };
            Ok(PathStep { sibling: Digest32(r.array::<32>()?), side })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MerklePath { steps })
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::ServeRequest { .. } => MSG_SERVE_REQUEST,
            Message::ServeResponse { .. } => MSG_SERVE_RESPONSE,
            Message::CommitAnnounce { .. } => MSG_COMMIT_ANNOUNCE,
            Message::OpenRequest { .. } => MSG_OPEN_REQUEST,
            Message::OpenResponse { .. } => MSG_OPEN_RESPONSE,
            Message::Error { .. } => MSG_ERROR,
            Message::ProbeQuery { .. } => MSG_PROBE_QUERY,
            Message::ProbeResponse { .. } => MSG_PROBE_RESPONSE,
        }
    }

    pub fn session_id(&self) -> Option<SessionId> {
        match self {
            Message::ServeRequest { .. } => None,
            Message::ServeResponse { session_id, .. }
            | Message::CommitAnnounce { session_id, .. }
            | Message::OpenRequest { session_id, .. }
            | Message::OpenResponse { session_id, .. }
            | Message::Error { session_id, .. }
            | Message::ProbeQuery { session_id, .. }
            | Message::ProbeResponse { session_id, .. } => Some(*session_id),
        }
    }

    pub fn body(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        match self {
            Message::ServeRequest { nonce, prompt } => {
                out.extend_from_slice(nonce);
                put_bytes(&mut out, prompt);
            }
            Message::ServeResponse { session_id, output } => {
                out.extend_from_slice(session_id);
                put_bytes(&mut out, output);
            }
            Message::CommitAnnounce { session_id, meta, num_positions, root } => {
                out.extend_from_slice(session_id);
                meta.write_bytes(&mut out)?;
                out.extend_from_slice(&num_positions.to_be_bytes());
                out.extend_from_slice(&root.0);
            }
            Message::OpenRequest { session_id, probe_seed, positions }
            | Message::ProbeQuery { session_id, probe_seed, positions } => {
                out.extend_from_slice(session_id);
                out.extend_from_slice(&probe_seed.to_be_bytes());
                put_positions(&mut out, positions);
            }
            Message::OpenResponse { session_id, openings } => {
                out.extend_from_slice(session_id);
                out.extend_from_slice(&(openings.len() as u32).to_be_bytes());
                for o in openings {
                    out.extend_from_slice(&o.t.to_be_bytes());
                    put_sketch(&mut out, &o.sketch);
                    put_path(&mut out, &o.path)?;
                }
            }
            Message::Error { session_id, code, message } => {
                out.extend_from_slice(session_id);
                out.extend_from_slice(&code.to_be_bytes());
                put_bytes(&mut out, message.as_bytes());
            }
            Message::ProbeResponse { session_id, answers } => {
                out.extend_from_slice(session_id);
                out.extend_from_slice(&(answers.len() as u32).to_be_bytes());
                for a in answers {
                    out.extend_from_slice(&a.t.to_be_bytes());
                    put_sketch(&mut out, &a.sketch);
                }
            }
        }
        Ok(out)
    }

    /// Full frame: header plus body.
    pub fn encode(&self) -> Result<Vec<u8>> {
        encode_frame(self.msg_type(), &self.body()?)
    }

    pub fn decode_body(msg_type: u8, body: &[u8]) -> Result<Message> {
        let mut r = Reader::new(body);
        let msg = match msg_type {
            MSG_SERVE_REQUEST => Message::ServeRequest {
                nonce: r.array()?,
                prompt: r.len_prefixed(MAX_BYTES_FIELD)?.to_vec(),
            },
            MSG_SERVE_RESPONSE => Message::ServeResponse {
                session_id: r.array()?,
                output: r.len_prefixed(MAX_BYTES_FIELD)?.to_vec(),
            },
            MSG_COMMIT_ANNOUNCE => {
                let session_id = r.array()?;
                let (meta, used) = SessionMeta::parse_prefix(&body[r.pos..])?;
                r.take(used)?;
                Message::CommitAnnounce { session_id, meta, num_positions: r.u64()?, root: Digest32(r.array()?) }
            }
            MSG_OPEN_REQUEST => Message::OpenRequest {
                session_id: r.array()?,
                probe_seed: r.u64()?,
                positions: get_positions(&mut r)?,
            },
            MSG_PROBE_QUERY => Message::ProbeQuery {
                session_id: r.array()?,
                probe_seed: r.u64()?,
                positions: get_positions(&mut r)?,
            },
            MSG_OPEN_RESPONSE => {
                let session_id = r.array()?;
                let n = get_count(&mut r)?;
                let openings = (0..n)
                    .map(|_| Ok(Opening { t: r.u64()?, sketch: get_sketch(&mut r)?, path: get_path(&mut r)? }))
                    .collect::<Result<Vec<_>>>()?;
                Message::OpenResponse { session_id, openings }
            }
            MSG_ERROR => {
                let session_id = r.array()?;
                let code = r.u16()?;
                let message = String::from_utf8(r.len_prefixed(MAX_BYTES_FIELD)?.to_vec())
                    .map_err(|_| Error::Malformed("error message is not UTF-8".into()))?;
                Message::Error { session_id, code, message }
            }
            MSG_PROBE_RESPONSE => {
                let session_id = r.array()?;
                let n = get_count(&mut r)?;
                let answers = (0..n)
                    .map(|_| Ok(ProbeAnswer { t: r.u64()?, sketch: get_sketch(&mut r)? }))
                    .collect::<Result<Vec<_>>>()?;
                Message::ProbeResponse { session_id, answers }
            }
            other => return Err(Error::Malformed(format!("unknown message type 0x{other:02x}"))),
        };
        r.finish()?;
        Ok(msg)
    }

    /// Decodes exactly one frame.
    pub fn decode(frame: &[u8]) -> Result<Message> {
        let mut d = FrameDecoder::new();
        d.push(frame);
        let (t, body) = d.next_frame()?.ok_or_else(|| Error::Malformed("truncated frame".into()))?;
        if d.buffered() != 0 {
            return Err(Error::Malformed("trailing bytes after frame".into()));
        }
        Message::decode_body(t, &body)
    }
}

impl FrameDecoder {
    pub fn next_message(&mut self) -> Result<Option<Message>> {
        self.next_frame()?.map(|(t, body)| Message::decode_body(t, &body)).transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Bf16Value, FeatureIndex, SketchEntry};
    use proptest::prelude::*;

    fn sketch_strategy() -> impl Strategy<Value = TraceSketch> {
        prop::collection::btree_map(any::<u32>(), -1000.0f32..1000.0, 1..40).prop_map(|m| {
            TraceSketch::new(
                m.into_iter()
                    .map(|(f, v)| SketchEntry { feature: FeatureIndex(f), value: Bf16Value::quantize(v).unwrap() })
                    .collect(),
            )
            .unwrap()
        })
    }

    fn path_strategy() -> impl Strategy<Value = MerklePath> {
        prop::collection::vec((any::<[u8; 32]>(), any::<bool>()), 0..20).prop_map(|v| MerklePath {
            steps: v
                .into_iter()
                .map(|(d, s)| PathStep { sibling: Digest32(d), side: if s { Side::Left } else { Side::Right } })
                .collect(),
        })
    }

    fn meta_strategy() -> impl Strategy<Value = SessionMeta> {
        (
            prop::collection::vec(any::<u8>(), 0..40),
            prop::collection::vec(any::<u8>(), 0..40),
            any::<u16>(),
            any::<[u8; 32]>(),
            any::<[u8; 32]>(),
            any::<[u8; 16]>(),
            any::<[u8; 32]>(),
        )
            .prop_map(|(model_id, sae_release, layer, input_hash, output_hash, nonce, provider_pubkey)| SessionMeta {
                model_id,
                sae_release,
                layer,
                input_hash,
                output_hash,
                nonce,
                provider_pubkey,
            })
    }

    fn message_strategy() -> impl Strategy<Value = Message> {
        let id = any::<[u8; 16]>();
        let bytes = prop::collection::vec(any::<u8>(), 0..64);
        let positions = prop::collection::vec(any::<u64>(), 0..50);
        prop_oneof![
            (id, bytes.clone()).prop_map(|(nonce, prompt)| Message::ServeRequest { nonce, prompt }),
            (id, bytes).prop_map(|(session_id, output)| Message::ServeResponse { session_id, output }),
            (id, meta_strategy(), any::<u64>(), any::<[u8; 32]>()).prop_map(|(session_id, meta, num_positions, r)| {
                Message::CommitAnnounce { session_id, meta, num_positions, root: Digest32(r) }
            }),
            (id, any::<u64>(), positions.clone())
                .prop_map(|(session_id, probe_seed, positions)| Message::OpenRequest { session_id, probe_seed, positions }),
            (id, any::<u64>(), positions)
                .prop_map(|(session_id, probe_seed, positions)| Message::ProbeQuery { session_id, probe_seed, positions }),
            (id, prop::collection::vec((any::<u64>(), sketch_strategy(), path_strategy()), 0..6)).prop_map(
                |(session_id, v)| Message::OpenResponse {
                    session_id,
                    openings: v.into_iter().map(|(t, sketch, path)| Opening { t, sketch, path }).collect(),
                }
            ),
            (id, any::<u16>(), ".{0,40}")
                .prop_map(|(session_id, code, message)| Message::Error { session_id, code, message }),
            (id, prop::collection::vec((any::<u64>(), sketch_strategy()), 0..6)).prop_map(|(session_id, v)| {
                Message::ProbeResponse {
                    session_id,
                    answers: v.into_iter().map(|(t, sketch)| ProbeAnswer { t, sketch }).collect(),
                }
            }),
        ]
    }

    proptest! {
        #[test]
        fn frame_round_trip(msg in message_strategy()) {
            let frame = msg.encode().unwrap();
            prop_assert_eq!(u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize, frame.len() - 4);
            prop_assert_eq!(frame[4], msg.msg_type());
            prop_assert_eq!(Message::decode(&frame).unwrap(), msg.clone());
            let json = serde_json::to_string(&msg).unwrap();
            prop_assert_eq!(serde_json::from_str::<Message>(&json).unwrap(), msg);
        }

        #[test]
        fn chunked_stream_round_trip(msgs in prop::collection::vec(message_strategy(), 1..5), chunk in 1usize..50) {
            let bytes: Vec<u8> = msgs.iter().flat_map(|m| m.encode().unwrap()).collect();
            let mut d = FrameDecoder::new();
            let mut out = Vec::new();
            for c in bytes.chunks(chunk) {
                d.push(c);
                while let Some(m) = d.next_message().unwrap() {
                    out.push(m);
                }
            }
            prop_assert_eq!(out, msgs);
        }

        #[test]
        fn garbage_never_panics(t in any::<u8>(), body in prop::collection::vec(any::<u8>(), 0..300)) {
            let _ = Message::decode_body(t, &body);
        }

        #[test]
        fn truncated_bodies_rejected(msg in message_strategy(), cut in 1usize..64) {
            let body = msg.body().unwrap();
            if cut <= body.len() {
                prop_assert!(Message::decode_body(msg.msg_type(), &body[..body.len() - cut]).is_err());
            }
        }
    }

    #[test]
    fn unknown_type_rejected() {
        assert!(Message::decode_body(0x09, &[]).is_err());
        assert!(Message::decode_body(0x00, &[]).is_err());
    }
}
