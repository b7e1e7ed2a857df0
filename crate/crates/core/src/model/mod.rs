//! Encoder stack for the two backbones: local encoder `E_l`, point-wise
//! splitter `V`, global encoder `E_g` and classifier `C`.

pub mod checkpoint;
mod config;
mod layers;
mod network;


pub use config::{Backbone, EncoderConfig, DEEPCONV_KERNEL, DEEPCONV_POOL};
pub use layers::{
    blocks_shape, layer_shape, run_blocks, run_layer, Block, BnUpdate, Builder, Layer, RunCtx,
    ELU_ALPHA,
};
pub use network::{
    batch_tensor, global_blocks, split_depth, Architecture, FeatureBundle, FeatureDims, Features,
    Model, ModelConfig,
};
