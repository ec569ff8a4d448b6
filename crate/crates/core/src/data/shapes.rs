//! The five Simple Shapes rasters. Each is a binary 28×28 image; bars and
//! strokes are 4 pixels wide.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::numerics::Tensor;

pub const SHAPE_SIZE: usize = 28;
const STROKE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    /// Centered horizontal and vertical bars spanning the full raster.
    Plus,
    /// Two full-width horizontal bars, rows 6..10 and 18..22.
    Equal,
    /// `Equal` rotated by 90°, i.e. its transpose.
    EqualRot,
    /// Anti-diagonal stroke from bottom-left to top-right, 4 pixels per row.
    Slash,
    /// Filled isosceles triangle with its apex centered on the top row and
    /// its base spanning the bottom row.
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Plus,
        ShapeKind::Equal,
        ShapeKind::EqualRot,
        ShapeKind::Slash,
        ShapeKind::Triangle,
    ];

    /// Class label used in ground-truth boxes.
    pub fn label(self) -> u32 {
        self as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Plus => "plus",
            ShapeKind::Equal => "equal",
            ShapeKind::EqualRot => "equal_rot",
            ShapeKind::Slash => "slash",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown shape {s:?}")))
    }
}

pub fn raster_shape(kind: ShapeKind) -> Tensor {
    let n = SHAPE_SIZE;
    let lo = (n - STROKE) / 2;
    let bar = |i: usize| (lo..lo + STROKE).contains(&i);
    let equal_bar = |i: usize| (6..6 + STROKE).contains(&i) || (18..18 + STROKE).contains(&i);
    let center = (n as f64 - 1.0) / 2.0;
    Tensor::from_fn([n, n], |i| {
        let (r, c) = (i / n, i % n);
        let on = match kind {
            ShapeKind::Plus => bar(r) || bar(c),
            ShapeKind::Equal => equal_bar(r),
            ShapeKind::EqualRot => equal_bar(c),
            ShapeKind::Slash => (n - 2..n - 2 + STROKE).contains(&(r + c)),
            ShapeKind::Triangle => (c as f64 - center).abs() <= (r as f64 + 1.0) / 2.0,
        };
        if on {
            1.0
        } else {
            0.0
        }
    })
}
