//! Essential subspace merging of fine-tuned checkpoints.
//!
//! Given a base checkpoint and several experts fine-tuned from it, each
//! expert's per-layer update `ΔW` is decomposed in the principal subspace of
//! the output shift it causes on a small proxy sample (`X·ΔWᵀ`), truncated to
//! a per-task rank budget, stacked across tasks, orthogonalized and rebuilt
//! into a single merged update. Norm-ratio ("polarized") scaling reweights
//! tasks, input dimensions and layers before the update is added back with a
//! global coefficient α.
//!
//! Modules:
//!
//! - [`tensorstore`]: safetensors-compatible container I/O, task updates,
//!   non-matrix averaging.
//! - [`linalg`]: deterministic SVD, symmetric eigendecomposition, polar
//!   factor, PCA.
//! - [`decomp`]: ESD and truncated SVD, their error formulas, energy
//!   retention, rank budgets.
//! - [`scaling`]: inter-task, inter-dimension and inter-layer coefficients,
//!   variants, layer classification.
//! - [`merge`]: the per-layer pipeline, checkpoint assembly, α search.
//! - [`synthetic`]: seeded toy checkpoints and proxies.
//! - [`verify`]: randomized oracles for the error identities and linear CKA.
//! - [`cli`]: the `esm` command line (`merge`, `verify`, `energy`, `inspect`).
//!
//! The `examples/` directory has one runnable program per capability.

pub mod cli;
pub mod decomp;
pub mod linalg;
pub mod merge;
pub mod scaling;
pub mod synthetic;
pub mod tensorstore;
pub mod verify;

pub use decomp::{EsdFactors, SpectrumKind, SvdTruncFactors};
pub use linalg::{EigFactors, SvdFactors};
pub use merge::{AlphaPolicy, Decomposition, MergeConfig, MergeOutcome, MergedUpdate, RankRule, ScalingOrder, ScalingToggles};
pub use scaling::{LayerRules, LayerType, Variant};
pub use tensorstore::{DenseTensor, TaskUpdate, TensorMap};
pub use verify::OracleReport;
