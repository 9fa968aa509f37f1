//! Conformer encoder with optional relative self-attention.

pub mod config;
pub mod encoder;
pub mod layers;

pub use config::{ConformerConfig, Preset};
pub use encoder::{
    attention_scores, check_params, conformer_block, encode, encode_batch, encode_features, init_params,
    subsample,
    LayerActivations,
};
pub use layers::Fwd;
