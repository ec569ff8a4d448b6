//! Synthetic datasets: Simple Shapes, Translated MNIST and Cluttered
//! Translated MNIST, plus the `STDS` dataset container.

mod container;
mod mnist;
mod shapes;

use std::path::PathBuf;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::BoundingBox;
use crate::error::{Error, Result};
use crate::numerics::{stream_rng, SeededRng, Stream, Tensor};

pub use container::{load_dataset, save_dataset, Dataset};
pub use mnist::{encode_idx, load_mnist_idx, parse_idx_images, parse_idx_labels, MnistSet};
pub use shapes::{raster_shape, ShapeKind, SHAPE_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    SimpleShapes,
    TMnist,
    CtMnist,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::SimpleShapes => "simple_shapes",
            DatasetKind::TMnist => "t_mnist",
            DatasetKind::CtMnist => "ct_mnist",
        }
    }

    pub fn needs_mnist(self) -> bool {
        self != DatasetKind::SimpleShapes
    }
}

/// An annotated object: where it was pasted and what it was.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroundTruthBox {
    pub bbox: BoundingBox,
    pub class_label: u32,
}

/// One canvas (`[height, width]`, values in `[0, 1]`) and its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub boxes: Vec<GroundTruthBox>,
}

fn default_object_size() -> usize {
    SHAPE_SIZE
}
fn default_clutter_count() -> usize {
    8
}
fn default_clutter_size() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub canvas_width: usize,
    pub canvas_height: usize,
    /// Side length of a shape or digit.
    #[serde(default = "default_object_size")]
    pub object_size: usize,
    /// Annotated objects per image.
    pub objects: usize,
    #[serde(default = "default_clutter_count")]
    pub clutter_count: usize,
    #[serde(default = "default_clutter_size")]
    pub clutter_size: usize,
    pub samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub mnist_images: Option<PathBuf>,
    #[serde(default)]
    pub mnist_labels: Option<PathBuf>,
}

impl DatasetConfig {
    fn preset(kind: DatasetKind, canvas: usize, objects: usize, samples: usize, seed: u64) -> Self {
        Self {
            kind,
            canvas_width: canvas,
            canvas_height: canvas,
            object_size: SHAPE_SIZE,
            objects,
            clutter_count: default_clutter_count(),
            clutter_size: default_clutter_size(),
            samples,
            seed,
            mnist_images: None,
            mnist_labels: None,
        }
    }

    pub fn simple_shapes(canvas: usize, objects: usize, samples: usize, seed: u64) -> Self {
        Self::preset(DatasetKind::SimpleShapes, canvas, objects, samples, seed)
    }

    /// Translated MNIST on the standard 84×84 canvas.
    pub fn translated_mnist(objects: usize, samples: usize, seed: u64) -> Self {
        Self::preset(DatasetKind::TMnist, 84, objects, samples, seed)
    }

    /// Cluttered Translated MNIST on the standard 100×100 canvas.
    pub fn cluttered_mnist(objects: usize, samples: usize, seed: u64) -> Self {
        Self::preset(DatasetKind::CtMnist, 100, objects, samples, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.object_size == 0 || self.canvas_width == 0 || self.canvas_height == 0 {
            return Err(Error::config("canvas and object sizes must be positive"));
        }
        if self.object_size > self.canvas_width || self.object_size > self.canvas_height {
            return Err(Error::config(format!(
                "object_size {} exceeds canvas {}x{}",
                self.object_size, self.canvas_width, self.canvas_height
            )));
        }
        if self.kind == DatasetKind::SimpleShapes && self.object_size != SHAPE_SIZE {
            return Err(Error::config(format!(
                "simple shapes are {SHAPE_SIZE}x{SHAPE_SIZE}; object_size is {}",
                self.object_size
            )));
        }
        if self.kind == DatasetKind::CtMnist {
            let c = self.clutter_size;
            if c == 0 || c > self.object_size || c > self.canvas_width || c > self.canvas_height {
                return Err(Error::config(format!(
                    "clutter_size {c} must be positive and fit in both digit and canvas"
                )));
            }
        }
        Ok(())
    }

    fn expect_kind(&self, kind: DatasetKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::config(format!(
                "dataset kind is {}, expected {}",
                self.kind.name(),
                kind.name()
            )));
        }
        self.validate()
    }
}

/// A uniformly drawn top-left corner for an `size`-sized object.
fn place(rng: &mut SeededRng, cfg: &DatasetConfig, size: usize) -> (usize, usize) {
    let x = rng.random_range(0..=cfg.canvas_width - size);
    let y = rng.random_range(0..=cfg.canvas_height - size);
    (x, y)
}

/// A rectangular window of a patch: top row, left column, height, width.
#[derive(Clone, Copy)]
struct Crop {
    row: usize,
    col: usize,
    height: usize,
    width: usize,
}

impl Crop {
    fn whole(size: usize) -> Self {
        Crop {
            row: 0,
            col: 0,
            height: size,
            width: size,
        }
    }
}

/// Pastes the `crop` window of `patch` at `(x, y)` by elementwise max.
fn paste_max(canvas: &mut [f64], canvas_w: usize, patch: &Tensor, crop: Crop, x: usize, y: usize) {
    let pw = patch.shape()[1];
    let src = patch.data();
    let w = crop.width;
    for r in 0..crop.height {
        let dst = &mut canvas[(y + r) * canvas_w + x..][..w];
        let row = &src[(crop.row + r) * pw + crop.col..][..w];
        for (d, &s) in dst.iter_mut().zip(row) {
            *d = d.max(s);
        }
    }
}

fn gt_box(x: usize, y: usize, size: usize, class_label: u32) -> GroundTruthBox {
    GroundTruthBox {
        bbox: BoundingBox::new(x as u32, y as u32, size as u32, size as u32),
        class_label,
    }
}

/// Draws the classes and positions of sample `index` for Simple Shapes.
/// Exposed separately so placement statistics can be checked cheaply.
pub fn simple_shapes_layout(cfg: &DatasetConfig, index: usize) -> Vec<GroundTruthBox> {
    let mut rng = stream_rng(cfg.seed, Stream::Data, index as u64);
    (0..cfg.objects)
        .map(|_| {
            let class = rng.random_range(0..ShapeKind::ALL.len());
            let (x, y) = place(&mut rng, cfg, SHAPE_SIZE);
            gt_box(x, y, SHAPE_SIZE, class as u32)
        })
        .collect()
}

pub fn gen_simple_shapes(cfg: &DatasetConfig) -> Result<Vec<Sample>> {
    cfg.expect_kind(DatasetKind::SimpleShapes)?;
    let rasters: Vec<Tensor> = ShapeKind::ALL.iter().map(|&k| raster_shape(k)).collect();
    let (w, h) = (cfg.canvas_width, cfg.canvas_height);
    Ok((0..cfg.samples)
        .into_par_iter()
        .map(|i| {
            let boxes = simple_shapes_layout(cfg, i);
            let mut canvas = vec![0.0; w * h];
            for b in &boxes {
                let r = &rasters[b.class_label as usize];
                let (x, y) = (b.bbox.x as usize, b.bbox.y as usize);
                paste_max(&mut canvas, w, r, Crop::whole(SHAPE_SIZE), x, y);
            }
            Sample {
                image: Tensor::new([h, w], canvas).expect("canvas extent"),
                boxes,
            }
        })
        .collect())
}

fn check_mnist(cfg: &DatasetConfig, mnist: &MnistSet) -> Result<()> {
    if mnist.is_empty() {
        return Err(Error::config("MNIST set is empty"));
    }
    let (r, c) = mnist.digit_shape().unwrap();
    if r != cfg.object_size || c != cfg.object_size {
        return Err(Error::config(format!(
            "digits are {r}x{c} but object_size is {}",
            cfg.object_size
        )));
    }
    Ok(())
}

fn mnist_sample(cfg: &DatasetConfig, mnist: &MnistSet, index: usize, clutter: bool) -> Sample {
    let mut rng = stream_rng(cfg.seed, Stream::Data, index as u64);
    let (w, h, s) = (cfg.canvas_width, cfg.canvas_height, cfg.object_size);
    let mut canvas = vec![0.0; w * h];
    let mut boxes = Vec::with_capacity(cfg.objects);
    for _ in 0..cfg.objects {
        let d = rng.random_range(0..mnist.len());
        let (x, y) = place(&mut rng, cfg, s);
        paste_max(&mut canvas, w, &mnist.images[d], Crop::whole(s), x, y);
        boxes.push(gt_box(x, y, s, mnist.labels[d] as u32));
    }
    if clutter {
        let c = cfg.clutter_size;
        for _ in 0..cfg.clutter_count {
            let d = rng.random_range(0..mnist.len());
            let r0 = rng.random_range(0..=s - c);
            let c0 = rng.random_range(0..=s - c);
            let (x, y) = place(&mut rng, cfg, c);
            let crop = Crop {
                row: r0,
                col: c0,
                height: c,
                width: c,
            };
            paste_max(&mut canvas, w, &mnist.images[d], crop, x, y);
        }
    }
    Sample {
        image: Tensor::new([h, w], canvas).expect("canvas extent"),
        boxes,
    }
}

pub fn gen_translated_mnist(cfg: &DatasetConfig, mnist: &MnistSet) -> Result<Vec<Sample>> {
    cfg.expect_kind(DatasetKind::TMnist)?;
    check_mnist(cfg, mnist)?;
    Ok((0..cfg.samples)
        .into_par_iter()
        .map(|i| mnist_sample(cfg, mnist, i, false))
        .collect())
}

pub fn gen_cluttered_translated_mnist(
    cfg: &DatasetConfig,
    mnist: &MnistSet,
) -> Result<Vec<Sample>> {
    cfg.expect_kind(DatasetKind::CtMnist)?;
    check_mnist(cfg, mnist)?;
    Ok((0..cfg.samples)
        .into_par_iter()
        .map(|i| mnist_sample(cfg, mnist, i, true))
        .collect())
}

/// Generates the dataset `cfg` describes. MNIST-based kinds need `mnist`.
pub fn generate(cfg: &DatasetConfig, mnist: Option<&MnistSet>) -> Result<Dataset> {
    let samples = match (cfg.kind, mnist) {
        (DatasetKind::SimpleShapes, _) => gen_simple_shapes(cfg)?,
        (DatasetKind::TMnist, Some(m)) => gen_translated_mnist(cfg, m)?,
        (DatasetKind::CtMnist, Some(m)) => gen_cluttered_translated_mnist(cfg, m)?,
        (kind, None) => {
            return Err(Error::config(format!(
                "{} needs MNIST files (mnist_images, mnist_labels)",
                kind.name()
            )))
        }
    };
    Ok(Dataset {
        canvas_width: cfg.canvas_width,
        canvas_height: cfg.canvas_height,
        samples,
    })
}
