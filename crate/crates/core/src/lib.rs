//! Desk-scale laboratory for dynamic chain-of-thought supervision in
//! multi-modal keyphrase generation.
//!
//! The crate covers the full loop: synthetic multi-modal corpora with
//! controllable keyphrase overlap ([`corpus`]), chain-of-thought data
//! production against an oracle or remote teacher ([`cotgen`]), a
//! from-scratch autoregressive transformer on a hand-built reverse-mode
//! autodiff tape ([`autodiff`], [`model`]), four supervised training
//! strategies including per-step dynamic target switching ([`trainer`]),
//! and seen/unseen/absent keyphrase evaluation ([`eval`]).
//!
//! Numeric code is generic over [`tensor::Scalar`]: f32 for training
//! throughput, f64 for gradient verification. All randomness flows
//! through seeded ChaCha streams and every reduction has a fixed
//! sequential order, so runs are bit-for-bit reproducible; the default
//! `parallel` feature only parallelizes across independent outputs.

pub mod autodiff;
pub mod corpus;
pub mod cotgen;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
