//! Random feature attention (RFA).
//!
//! Linear-time attention kernels built on random Fourier features, the
//! softmax reference they approximate, hand-derived backward passes, a toy
//! trainer, and a decode-time benchmark harness.
//!
//! Module map:
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`numerics`] | dense matrices, seeded Gaussian sampling, stable softmax |
//! | [`feature_maps`] | Gaussian / arc-cosine / elu+1 feature maps and pools |
//! | [`attention`] | softmax, cross/causal/gated/unnormalized RFA |
//! | [`gradients`] | reverse-mode backward passes and finite-difference checks |
//! | [`toytrain`] | single-head classifier on a synthetic recency task |
//! | [`bench`] | approximation-error sweeps and decode scaling benchmarks |
//! | [`verify`] | property suites shared by the CLI and tests |
//! | [`cli`] | the `rfa` command-line entry point |

pub mod attention;
pub mod bench;
pub mod cli;
pub mod error;
pub mod feature_maps;
pub mod gradients;
pub mod numerics;
pub mod toytrain;
pub mod verify;

pub use attention::{AttentionConfig, AttentionKind, AttentionState, GateParams, SequenceBatch};
pub use error::{Result, RfaError};
pub use feature_maps::{FeatureMapKind, FeatureMapPool, FeatureMapSpec, RealizedFeatureMap};
pub use numerics::{Matrix, RngState};
