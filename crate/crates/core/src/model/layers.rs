//! The selection-and-localization tensor and the stamp layer, as plain
//! functions over values. The model records the same computation on a tape.

use crate::boxes::BoundingBox;
use crate::error::{Error, Result};
use crate::numerics::{clip_values, Tape, Tensor};

/// Categorical distributions for one shape: horizontal position, vertical
/// position and stamp identity.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeLatent {
    pub p_x: Vec<f64>,
    pub p_y: Vec<f64>,
    pub p_s: Vec<f64>,
}

/// Placement mass over `(y, x, stamp)`, stored as a `[ny, nx, n]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SlTensor {
    values: Tensor,
}

impl SlTensor {
    pub fn from_tensor(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::dim(format!(
                "SL tensor must be [ny, nx, n], got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(nx: usize, ny: usize, n: usize) -> Self {
        Self {
            values: Tensor::zeros([ny, nx, n]),
        }
    }

    /// A single unit of mass placing stamp `k` with its top-left corner at `(x, y)`.
    pub fn one_hot(nx: usize, ny: usize, n: usize, x: usize, y: usize, k: usize) -> Self {
        let mut sl = Self::zeros(nx, ny, n);
        sl.values.set(&[y, x, k], 1.0);
        sl
    }

    pub fn nx(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn ny(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn stamps(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn at(&self, x: usize, y: usize, k: usize) -> f64 {
        self.values.get(&[y, x, k])
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn total(&self) -> f64 {
        self.values.sum()
    }
}

/// The learned stamps, `[n, channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StampBank {
    pub kernels: Tensor,
}

impl StampBank {
    pub fn new(kernels: Tensor) -> Result<Self> {
        if kernels.rank() != 4 {
            return Err(Error::dim(format!(
                "stamp bank must be [n, channels, height, width], got {:?}",
                kernels.shape()
            )));
        }
        Ok(Self { kernels })
    }

    pub fn count(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.kernels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.kernels.shape()[3]
    }

    /// Stamp `k` as a `[channels, height, width]` tensor.
    pub fn stamp(&self, k: usize) -> Tensor {
        let len = self.channels() * self.height() * self.width();
        Tensor::new(
            [self.channels(), self.height(), self.width()],
            self.kernels.data()[k * len..(k + 1) * len].to_vec(),
        )
        .expect("stamp slice matches its shape")
    }
}

/// Outer product `SL[y, x, k] = p_y[y] · p_x[x] · p_s[k]` for one shape.
pub fn build_sl_tensor(latent: &ShapeLatent) -> SlTensor {
    let (nx, ny, n) = (latent.p_x.len(), latent.p_y.len(), latent.p_s.len());
    let mut data = Vec::with_capacity(nx * ny * n);
    for &py in &latent.p_y {
        for &px in &latent.p_x {
            data.extend(latent.p_s.iter().map(|&ps| py * px * ps));
        }
    }
    SlTensor {
        values: Tensor::new([ny, nx, n], data).expect("outer product extents"),
    }
}

/// Sums per-shape SL tensors into the global one.
pub fn aggregate_sl(tensors: &[SlTensor]) -> Result<SlTensor> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::dim("aggregate_sl needs at least one tensor"))?;
    let mut total = first.values.clone();
    for t in &tensors[1..] {
        if t.values.shape() != total.shape() {
            return Err(Error::dim(format!(
                "cannot aggregate SL tensors {:?} and {:?}",
                total.shape(),
                t.values.shape()
            )));
        }
        total
            .data_mut()
            .iter_mut()
            .zip(t.values.data())
            .for_each(|(a, b)| *a += b);
    }
    Ok(SlTensor { values: total })
}

/// Renders a canvas: every unit of SL mass at `(x, y, k)` pastes stamp `k`
/// with its top-left corner at `(x, y)`; the sum is clamped to `[0, v_max]`.
/// An infinite `v_max` disables the clamp entirely.
///
/// Returns a `[channels, canvas_height, canvas_width]` tensor.
pub fn stamp_layer_forward(sl: &SlTensor, bank: &StampBank, v_max: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let sl_var = tape.constant(
        sl.values
            .clone()
            .reshape([1, sl.ny(), sl.nx(), sl.stamps()])?,
    );
    let bank_var = tape.constant(bank.kernels.clone());
    let mut out = tape.stamp(sl_var, bank_var)?;
    if v_max.is_finite() {
        out = tape.clamp(out, 0.0, v_max);
    }
    let shape = tape.value(out).shape()[1..].to_vec();
    tape.value(out).clone().reshape(shape)
}

/// A decoded shape: where its stamp goes and which stamp it is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub bbox: BoundingBox,
    pub stamp: usize,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Reads off each shape's most probable position and stamp.
pub fn extract_predictions(
    latents: &[ShapeLatent],
    stamp_width: usize,
    stamp_height: usize,
) -> Vec<Prediction> {
    latents
        .iter()
        .map(|l| Prediction {
            bbox: BoundingBox::new(
                argmax(&l.p_x) as u32,
                argmax(&l.p_y) as u32,
                stamp_width as u32,
                stamp_height as u32,
            ),
            stamp: argmax(&l.p_s),
        })
        .collect()
}

/// Projects every stamp entry back into `[0, v_max]`.
pub fn constrain_stamps(bank: &mut StampBank, v_max: f64) {
    clip_values(&mut bank.kernels, 0.0, v_max);
}
