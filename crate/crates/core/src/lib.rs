//! Desk-scale narrative generation with discrete per-entity state tracking.
//!
//! The crate is organized as a pipeline:
//!
//! - [`autodiff`]: reverse-mode automatic differentiation over dense `f64`
//!   tensors, providing exactly the operations the model needs.
//! - [`text`]: tokenization, entity anonymization, sentence structuring,
//!   and a synthetic corpus generator with ground-truth latent states.
//! - [`model`]: the two-stage network — a decoder with an entity state
//!   attention layer, a discrete state codebook, and the three losses.
//! - [`train`]: batching, Adam, checkpointing, and the training loop.
//! - [`infer`]: nucleus sampling, cached incremental decoding, two-stage
//!   generation, and teacher-forced sequence scoring.
//! - [`eval`]: automatic text metrics, the entity-coherence perturbation
//!   probe, and codebook diagnostics.

pub mod autodiff;
pub mod error;
pub mod model;



pub mod rng;
pub mod text;
pub mod train;


pub use error::CoreError;
