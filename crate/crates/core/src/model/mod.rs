//! The autoencoder: encoder, selection-and-localization layer and stamp layer.

mod config;
mod gumbel;
mod layers;
mod network;

pub use config::{EncoderConfig, ModelConfig, POOL_STAGES};
pub use gumbel::{gumbel_noise, gumbel_softmax, sample_gumbel_softmax};
pub use layers::{
    aggregate_sl, argmax, build_sl_tensor, constrain_stamps, extract_predictions,
    stamp_layer_forward, Prediction, ShapeLatent, SlTensor, StampBank,
};
pub use network::{ForwardPass, Inference, LatentVars, RunningStats, StampNet};
