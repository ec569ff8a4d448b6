//! StampNet: an autoencoder that discovers, localizes and clusters recurring
//! shapes in images without labels.
//!
//! The encoder predicts, for each of `M` shapes, categorical distributions
//! over the stamp's top-left position and over which of `N` learned stamps to
//! use. Relaxed samples of those distributions are combined into a
//! selection-and-localization tensor, and the stamp layer renders the
//! reconstruction by pasting stamps with that tensor as weights.

mod binio;
pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
pub mod boxes;
pub mod data;
pub mod evaluation;
pub mod model;
pub mod training;
