//! Tensors, a reverse-mode autodiff tape with the operations the model needs,
//! and the Adam optimizer.

mod adam;
pub mod gradcheck;
pub(crate) mod kernels;
mod rng;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use rng::{stream_rng, SeededRng, Stream};
pub use tape::{BatchNormMode, BatchStats, Gradients, Mode, Padding, Tape, Var};
pub use tensor::Tensor;

/// Elementwise clamp of a tensor in place, used as a projection after
/// optimizer steps (no gradient involvement).
pub fn clip_values(t: &mut Tensor, lo: f64, hi: f64) {
    assert!(lo <= hi, "clip range [{lo}, {hi}] is empty");
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
}

#[cfg(test)]
mod tests;
