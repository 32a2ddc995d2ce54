//! Multimodal mixture-of-experts fusion over cached embeddings.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: tensors and differentiable primitives with analytic backward passes
//! - [`embedstore`]: the dataset model, on-disk cache format, synthetic generator
//! - [`fusion`]: intra-modality expert routing, inter-modality logit fusion, baselines
//! - [`losses`]: task loss and the training-only distillation terms
//! - [`optim`]: AdamW, clipping, warmup, and the training loop
//! - [`corruption`]: missing-modality protocols and sweeps
//! - [`metrics`]: AUROC, AUPRC, macro-F1, accuracy, EffScore
//! - [`eval`]: batched prediction and evaluation

// `!(x >= 0.0)` rejects NaN too; index loops mirror the math they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod corruption;
pub mod diffcore;
pub mod embedstore;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod rng;

pub use error::{MedmixError, Result};
