//! Differentiable finite-state lattices for sequence transduction.
//!
//! A model here is three independent parts:
//!
//! - a label-history automaton ([`context::ContextDependency`]) whose states
//!   remember the last `order` output labels,
//! - an alignment lattice ([`alignment::AlignmentLattice`]) describing how
//!   labels and epsilon transitions line up with the input frames,
//! - a trainable weight function ([`weights::WeightFunction`]) scoring each
//!   (alignment state, context state, label) transition, optionally locally
//!   normalized.
//!
//! Their product is an acyclic recognition lattice. [`inference`] computes
//! its total weight (the global normalizer), string-restricted weights,
//! losses, gradients, and tropical best paths with a vectorized forward
//! sweep; [`oracle`] materializes the same lattice explicitly and enumerates
//! paths as the ground truth the fast path is validated against. [`dedup`]
//! adds CTC-style collapsing of repeated labels, [`presets`] maps familiar
//! model families (CE, CTC, RNN-T, HAT, bounded LAS) onto configurations,
//! and [`harness`] holds synthetic tasks plus the training loop used to
//! demonstrate the streaming label-bias gap.

// Index arithmetic over state spaces is the subject matter here; iterator
// rewrites of those loops hide the lattice structure.
#![allow(clippy::needless_range_loop)]

pub mod alignment;
pub mod bench;
pub mod checks;
pub mod cli;
pub mod config;
pub mod context;
pub mod dedup;
pub mod harness;
pub mod inference;
pub mod model_io;
pub mod oracle;
pub mod presets;
pub mod semiring;
pub mod weights;

use thiserror::Error;

/// Library-wide error type. The CLI maps variants onto exit codes, so keep
/// the classification stable: config/usage problems, bad input data, failed
/// checks, and internal guard violations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("count overflow: {0}")]
    Overflow(String),
    #[error("size guard exceeded: {0}")]
    SizeGuard(String),
    #[error("path cap exceeded: more than {cap} successful paths")]
    PathCap { cap: usize },
    #[error("target label sequence not emissible by the lattice")]
    UnreachableTarget,
    #[error("empty lattice: total weight is the zero element")]
    EmptyLattice,
    #[error("no outgoing arcs to normalize at a non-final state")]
    AllArcsMasked,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
