//! The two-stage network: a state-tracking narrative model and a plain
//! encoder-decoder mention generator.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;
pub mod quantize;


pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, LoadedCheckpoint};
pub use config::{entity_class, ModelConfig, ENTITY_CLASSES, ENTITY_NONE_CLASS};
pub use forward::{
    bind_params, contrastive_loss, extract_grads, BatchForward, BoundParams, ForwardOptions,
    ForwardTrace, LossBreakdown, MentionForward, MentionItem, MentionModel, Quantization,
    StateModel,
};
pub use params::{init_mention_params, init_state_params, ModelKind, ParamStore};
pub use quantize::{quantize_state, renormalize_codebook};
