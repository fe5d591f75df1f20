//! Framed commit-open protocol between a provider and a verifier, the
//! probe-after-return baseline, and the commit-overhead benchmark.

pub mod bench;
pub mod frame;
pub mod message;
pub mod plan;
pub mod provider;
pub mod transport;
pub mod verifier;

pub use bench::{bench_commit, BenchReport, BenchRow};
pub use frame::{encode_frame, FrameDecoder, MAX_FRAME_BYTES};
pub use message::{Message, Opening, ProbeAnswer, SessionId};
pub use plan::{open_rounds, round_positions, OpenRound, SessionPlan};
pub use provider::{CommitMode, Misbehavior, Provider, ProviderConfig, ProviderStats, RoutingVariant, Strategy};
pub use transport::{serve_stream, Loopback, StreamTransport, Transport, TransportError};
pub use verifier::{svip_baseline_audit, verifier_audit, AuditConfig, AuditError, RejectReason, Verdict};
