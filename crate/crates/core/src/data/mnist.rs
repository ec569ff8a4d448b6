//! Reader for the big-endian IDX files MNIST is distributed in.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;

/// Digit images scaled to `[0, 1]` with their labels.
#[derive(Clone, Debug)]
pub struct MnistSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
}

impl MnistSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Side length of the (square or rectangular) digit images as `(rows, cols)`.
    pub fn digit_shape(&self) -> Option<(usize, usize)> {
        self.images.first().map(|t| (t.shape()[0], t.shape()[1]))
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(offset as u64, "truncated IDX header"))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    Ok(buf)
}

/// Decodes an IDX image file (`magic 2051, count, rows, cols, pixels`).
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            0,
            format!("bad IDX image magic {magic}, expected {IMAGES_MAGIC}"),
        ));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(8, "zero image extent"));
    }
    let pixels = &bytes[16..];
    let per = rows * cols;
    let need = count
        .checked_mul(per)
        .ok_or_else(|| Error::format(4, "image count overflows"))?;
    if pixels.len() < need {
        let complete = pixels.len() / per;
        return Err(Error::format(
            (16 + complete * per) as u64,
            format!(
                "truncated IDX image data: header promises {count} images, file holds {complete}"
            ),
        ));
    }
    Ok(pixels[..need]
        .chunks_exact(per)
        .map(|px| {
            Tensor::new([rows, cols], px.iter().map(|&b| b as f64 / 255.0).collect())
                .expect("extent matches")
        })
        .collect())
}

/// Decodes an IDX label file (`magic 2049, count, labels`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("bad IDX label magic {magic}, expected {LABELS_MAGIC}"),
        ));
    }
    let count = be_u32(bytes, 4)? as usize;
    let labels = &bytes[8..];
    if labels.len() < count {
        return Err(Error::format(
            (8 + labels.len()) as u64,
            format!(
                "truncated IDX labels: header promises {count}, file holds {}",
                labels.len()
            ),
        ));
    }
    Ok(labels[..count].to_vec())
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<MnistSet> {
    let images = parse_idx_images(&read_all(images_path)?)?;
    let labels = parse_idx_labels(&read_all(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(Error::format(
            4,
            format!("{} images but {} labels", images.len(), labels.len()),
        ));
    }
    Ok(MnistSet { images, labels })
}

/// Encodes images (values in `[0, 1]`, rounded to bytes) and labels as IDX files.
pub fn encode_idx(images: &[Tensor], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let (rows, cols) = images
        .first()
        .map(|t| (t.shape()[0], t.shape()[1]))
        .unwrap_or((28, 28));
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for t in images {
        img.extend(
            t.data()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}
