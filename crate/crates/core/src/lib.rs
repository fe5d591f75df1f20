//! Commit-open verification of hosted-model feature traces.
//!
//! A provider commits, via a Merkle tree, to a per-position top-k sketch of
//! sparse-autoencoder feature activations before a verifier asks for any
//! opening. The verifier opens random positions, checks them against the
//! root, and scores them against a public probe library with a joint z-score.
//!
//! The crate is organised as:
//!
//! * [`types`]: bf16 quantization, trace sketches, session metadata and their
//!   canonical byte layouts.
//! * [`merkle`]: leaf hashing, tree construction, openings and the 224-byte
//!   opening payload.
//! * [`probe`]: probe libraries, per-probe and joint z-scores, threshold
//!   calibration.
//! * [`synth`]: a synthetic backend standing in for model + SAE forward passes.
//! * [`forgery`]: the feature-forgery attack ladder and its lower bounds.
//! * [`stats`]: session-level false-positive analysis, SPRT, AUC sweeps.
//! * [`wire`]: framed provider/verifier protocol, baseline comparison and the
//!   commit-overhead benchmark.

pub mod error;
pub mod forgery;
pub mod merkle;
pub mod probe;
pub mod stats;
pub mod synth;
pub mod types;
pub mod wire;

mod hashrng;

pub use error::{Error, Result};
pub use types::{Bf16Value, FeatureIndex, SessionMeta, SketchEntry, TraceSketch};
