//! Dual-stream feature augmentation (DFA) for domain generalization.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense `f64` matrices, a small reverse-mode tape, layers,
//!   losses, a seeded counter-based RNG, SGD and finite-difference checks.
//! * [`data`]: synthetic multi-domain datasets with style shift and
//!   label-spurious correlation, leave-one-domain-out splits and
//!   domain-balanced batching.
//! * [`disentangle`]: invariant / per-domain specific encoders and the
//!   domain classifier losses.
//! * [`adversarial_mask`]: Gumbel-softmax dimension masks and the
//!   superior/inferior classification losses.
//! * [`augmentation`]: entropy-guided domain-related and causal-related
//!   hard-feature construction.
//! * [`contrastive`]: supervised contrastive alignment.
//! * [`trainer`]: the three-group optimisation loop, schedules, ablation
//!   variants, evaluation, metrics and checkpoints.

pub mod adversarial_mask;
pub mod augmentation;
pub mod contrastive;
pub mod data;
pub mod disentangle;
mod error;
pub mod numerics;
pub mod trainer;

pub use error::{DfaError, Result};
