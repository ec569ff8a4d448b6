//! The `STDS` dataset container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{GroundTruthBox, Sample};
use crate::binio::{put_u32, put_u64, ByteReader};
use crate::boxes::BoundingBox;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"STDS";
const VERSION: u32 = 1;

/// A list of samples sharing one canvas size.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub canvas_width: usize,
    pub canvas_height: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Channels per image (1 for `[H, W]` images).
    pub fn channels(&self) -> usize {
        self.samples
            .first()
            .map(|s| {
                if s.image.rank() == 3 {
                    s.image.shape()[0]
                } else {
                    1
                }
            })
            .unwrap_or(1)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        put_u64(w, self.samples.len() as u64)?;
        put_u32(w, self.canvas_width as u32)?;
        put_u32(w, self.canvas_height as u32)?;
        for s in &self.samples {
            s.image.write_to(w)?;
            put_u32(w, s.boxes.len() as u32)?;
            for b in &s.boxes {
                for v in [
                    b.bbox.x,
                    b.bbox.y,
                    b.bbox.width,
                    b.bbox.height,
                    b.class_label,
                ] {
                    put_u32(w, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        r.expect_magic(MAGIC)?;
        let at = r.offset();
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                at,
                format!("unsupported dataset version {version}"),
            ));
        }
        let count = r.u64()?;
        let at = r.offset();
        let canvas_width = r.u32()? as usize;
        let canvas_height = r.u32()? as usize;
        if canvas_width == 0 || canvas_height == 0 {
            return Err(Error::format(at, "zero canvas extent"));
        }
        let mut samples = Vec::with_capacity(count.min(1 << 16) as usize);
        for i in 0..count {
            let at = r.offset();
            let image = Tensor::decode(&mut r)?;
            let dims = image.shape();
            let rank = dims.len();
            if !(2..=3).contains(&rank)
                || dims[rank - 2] != canvas_height
                || dims[rank - 1] != canvas_width
            {
                return Err(Error::format(
                    at,
                    format!("sample {i}: image shape {dims:?} does not match canvas {canvas_width}x{canvas_height}"),
                ));
            }
            let n = r.u32()?;
            let mut boxes = Vec::with_capacity(n.min(1024) as usize);
            for _ in 0..n {
                let at = r.offset();
                let [x, y, bw, bh, class_label] =
                    [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?];
                if bw == 0 || bh == 0 {
                    return Err(Error::format(at, format!("sample {i}: empty box")));
                }
                let bbox = BoundingBox::new(x, y, bw, bh);
                if !bbox.fits_in(canvas_width as u32, canvas_height as u32) {
                    return Err(Error::format(at, format!("sample {i}: box outside canvas")));
                }
                boxes.push(GroundTruthBox { bbox, class_label });
            }
            samples.push(Sample { image, boxes });
        }
        r.expect_eof()?;
        Ok(Self {
            canvas_width,
            canvas_height,
            samples,
        })
    }
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    dataset.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read_from(&mut BufReader::new(File::open(path)?))
}
