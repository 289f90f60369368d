//! Dependency-aware parallel decoding for masked diffusion models.
//!
//! - [`depgraph`]: attention-induced dependency graphs and greedy independent-set selection.
//! - [`decode`]: the unmasking loop and its selection strategies.
//! - [`toymdm`]: the synthetic MRF dataset and a small trainable masked denoiser.
//! - [`oracle`]: exact enumeration over the toy distribution.
//! - [`metrics`]: edge-detection, degree-ordering and decoding-quality metrics.

pub mod decode;
pub mod depgraph;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod oracle;
pub mod toymdm;

pub use decode::{
    decode, Committer, DecodeTrace, Denoiser, DenoiserOutput, DependencySignal, SequenceState, StrategyConfig,
    StrategyKind, Symbol,
};
pub use depgraph::{AttentionStack, DependencyGraph, EdgeScoreMatrix, IndependentSet, TauSchedule};
pub use error::{DapdError, Result};
pub use matrix::Matrix;
