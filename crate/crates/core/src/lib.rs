//! A laboratory for studying block-identifiability of shared latent factors
//! under multimodal contrastive learning.
//!
//! The crate simulates a controlled generative process — Gaussian latent
//! blocks (content, style, modality-specific), an optional content-to-style
//! causal link, per-dimension style perturbations, and invertible nonlinear
//! mixing functions — trains MLP encoders with the (symmetrized) InfoNCE
//! objective, and quantifies which latent blocks the learned representation
//! recovers via kernel ridge regression and shallow classifiers.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`latent`]: samples matched latent pairs from the generative process,
//!   including style perturbations, content interventions, and discrete
//!   factors.
//! - [`mixing`]: invertible LeakyReLU MLPs that map latents to observations,
//!   with exact inverses for ground-truth diagnostics.
//! - [`nets`]: feed-forward encoder networks with reverse-mode gradients,
//!   Adam, and global-norm gradient clipping.
//! - [`objective`]: InfoNCE, its symmetrized form, and alignment/entropy
//!   diagnostics.
//! - [`eval`]: kernel ridge regression R^2, classifier accuracy, intervention
//!   scoring, and content-dimension estimation.
//! - [`harness`]: experiment configuration, the training loop, and drivers
//!   that emit CSV reports for each reproducible table or figure.

extern crate blas_src;

// the training loop allocates and frees large score matrices every
// iteration; the system allocator's mmap churn dominates sys time without
// a pooling allocator
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod error;
pub mod eval;
pub mod harness;
pub mod latent;
pub mod mixing;
pub mod nets;
pub mod numeric;
pub mod objective;
pub mod rng;

pub use error::{Error, Result};
