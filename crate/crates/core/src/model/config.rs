use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer widths and regularization constants of the convolutional encoder.
///
/// Each entry of `block_widths` is one block of `convs_per_block` same-padded
/// 3×3 convolutions, each followed by leaky ReLU and batch norm. The first
/// two blocks end in a 2×2 max pool; the result is flattened into a dense
/// trunk of `dense_width` units with leaky ReLU and dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub block_widths: Vec<usize>,
    pub convs_per_block: usize,
    pub dense_width: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            block_widths: vec![32, 64, 128],
            convs_per_block: 2,
            dense_width: 512,
            leaky_slope: 0.1,
            dropout: 0.25,
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
        }
    }
}

/// Number of 2×2 pooling stages; canvases must be divisible by `2^POOL_STAGES`.
pub const POOL_STAGES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub canvas_width: usize,
    pub canvas_height: usize,
    pub stamp_width: usize,
    pub stamp_height: usize,
    #[serde(default = "one")]
    pub channels: usize,
    /// Maximum number of shapes per image (`M`).
    pub shapes: usize,
    /// Number of learned stamps (`N`).
    pub stamps: usize,
    #[serde(default = "unit")]
    pub v_max: f64,
    #[serde(default)]
    pub encoder: EncoderConfig,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

impl ModelConfig {
    /// Single-channel model with the default encoder.
    pub fn new(canvas: usize, stamp: usize, shapes: usize, stamps: usize) -> Self {
        Self {
            canvas_width: canvas,
            canvas_height: canvas,
            stamp_width: stamp,
            stamp_height: stamp,
            channels: 1,
            shapes,
            stamps,
            v_max: 1.0,
            encoder: EncoderConfig::default(),
        }
    }

    pub fn with_encoder(mut self, encoder: EncoderConfig) -> Self {
        self.encoder = encoder;
        self
    }

    /// Number of horizontal stamp positions, `φx − ψx + 1`.
    pub fn nx(&self) -> usize {
        self.canvas_width - self.stamp_width + 1
    }

    /// Number of vertical stamp positions, `φy − ψy + 1`.
    pub fn ny(&self) -> usize {
        self.canvas_height - self.stamp_height + 1
    }

    pub fn pool_stages(&self) -> usize {
        self.encoder.block_widths.len().min(POOL_STAGES)
    }

    /// Length of the flattened feature map entering the dense trunk.
    pub fn flat_features(&self) -> usize {
        let shrink = 1 << self.pool_stages();
        let last = *self.encoder.block_widths.last().unwrap_or(&self.channels);
        last * (self.canvas_width / shrink) * (self.canvas_height / shrink)
    }

    /// Length of the encoder output that feeds the prediction heads.
    pub fn feature_len(&self) -> usize {
        self.encoder.dense_width
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let checks: [(bool, &str); 12] = [
            (
                self.stamp_width >= 1 && self.stamp_height >= 1,
                "stamp extents must be positive",
            ),
            (
                self.stamp_width <= self.canvas_width,
                "stamp_width exceeds canvas_width",
            ),
            (
                self.stamp_height <= self.canvas_height,
                "stamp_height exceeds canvas_height",
            ),
            (self.channels >= 1, "channels must be at least 1"),
            (self.shapes >= 1, "shapes (M) must be at least 1"),
            (self.stamps >= 1, "stamps (N) must be at least 1"),
            (
                self.v_max > 0.0 && self.v_max.is_finite(),
                "v_max must be positive and finite",
            ),
            (
                !e.block_widths.is_empty() && !e.block_widths.contains(&0),
                "encoder.block_widths must be non-empty and positive",
            ),
            (
                e.convs_per_block >= 1 && e.dense_width >= 1,
                "encoder.convs_per_block and encoder.dense_width must be positive",
            ),
            (
                e.leaky_slope > 0.0 && e.leaky_slope < 1.0,
                "encoder.leaky_slope must lie in (0, 1)",
            ),
            (
                (0.0..1.0).contains(&e.dropout),
                "encoder.dropout must lie in [0, 1)",
            ),
            (
                (0.0..1.0).contains(&e.bn_momentum) && e.bn_epsilon > 0.0,
                "encoder.bn_momentum must lie in [0, 1) and bn_epsilon be positive",
            ),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::config(*msg));
        }
        let div = 1 << self.pool_stages();
        if !self.canvas_width.is_multiple_of(div) || !self.canvas_height.is_multiple_of(div) {
            return Err(Error::config(format!(
                "canvas {}x{} must be divisible by {div} so every pooling stage sees even extents",
                self.canvas_width, self.canvas_height
            )));
        }
        Ok(())
    }

    /// Canonical TOML rendering, used inside checkpoints.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config is always serializable")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("model config: {e}")))
    }
}
