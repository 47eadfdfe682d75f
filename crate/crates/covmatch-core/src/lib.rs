//! Desk-scale multimodal dataset distillation by cross-covariance matching.
//!
//! A two-tower contrastive setup (one encoder per modality plus linear
//! projection heads) is distilled into a small synthetic paired set whose
//! cross-covariance tracks the real data's. The crate provides the numeric
//! substrate, a toy paired-data generator, the model stack, every loss with
//! analytic gradients, the closed-form inner solver for the projection
//! product, the distillation loop with coreset baselines, retrieval
//! evaluation, and self-contained verification suites for the analytic
//! identities the method rests on.

pub mod closedform;
pub mod datagen;
pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod verify;

pub use error::{CovError, Result};
pub use numerics::{Matrix, Rng, SvdResult};
