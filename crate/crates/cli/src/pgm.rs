//! Grayscale image export (binary PGM) and the stamp grid layout.

use std::path::Path;

use anyhow::Context;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder};
use stampnet::boxes::BoundingBox;
use stampnet::model::StampBank;
use stampnet::Tensor;

/// Tiles per row in the stamp grid.
pub const GRID_COLUMNS: usize = 5;
/// Value of the one-pixel separators between tiles.
pub const SEPARATOR: u8 = 255;
/// Value used to draw box outlines.
pub const OUTLINE: u8 = 128;

pub fn to_byte(v: f64, v_max: f64) -> u8 {
    (v / v_max * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Averages the channels of a `[H, W]` or `[C, H, W]` image into a gray image
/// scaled from `[0, v_max]`.
pub fn gray_image(t: &Tensor, v_max: f64) -> GrayImage {
    let s = t.shape();
    let (c, h, w) = match s.len() {
        2 => (1, s[0], s[1]),
        _ => (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]),
    };
    let plane = h * w;
    let d = t.data();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let mean = (0..c).map(|ci| d[ci * plane + i]).sum::<f64>() / c as f64;
        image::Luma([to_byte(mean, v_max)])
    })
}

pub fn grid_size(count: usize, tile_w: usize, tile_h: usize) -> (usize, usize) {
    let cols = count.clamp(1, GRID_COLUMNS);
    let rows = count.div_ceil(GRID_COLUMNS).max(1);
    (cols * tile_w + cols - 1, rows * tile_h + rows - 1)
}

/// Tiles the stamps row-major, five per row, with one-pixel separators.
pub fn stamp_grid(bank: &StampBank, v_max: f64) -> GrayImage {
    let (sw, sh) = (bank.width(), bank.height());
    let (w, h) = grid_size(bank.count(), sw, sh);
    let mut img = GrayImage::from_pixel(w as u32, h as u32, image::Luma([SEPARATOR]));
    for k in 0..bank.count() {
        let tile = gray_image(&bank.stamp(k), v_max);
        let (ox, oy) = ((k % GRID_COLUMNS) * (sw + 1), (k / GRID_COLUMNS) * (sh + 1));
        image::imageops::replace(&mut img, &tile, ox as i64, oy as i64);
    }
    img
}

/// Draws the one-pixel border of `b` (clipped to the image).
pub fn draw_outline(img: &mut GrayImage, b: &BoundingBox, value: u8) {
    let (w, h) = img.dimensions();
    let (x1, y1) = ((b.right() - 1).min(w - 1), (b.bottom() - 1).min(h - 1));
    for x in b.x..=x1 {
        img.put_pixel(x, b.y, image::Luma([value]));
        img.put_pixel(x, y1, image::Luma([value]));
    }
    for y in b.y..=y1 {
        img.put_pixel(b.x, y, image::Luma([value]));
        img.put_pixel(x1, y, image::Luma([value]));
    }
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> anyhow::Result<()> {
    let file =
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            ExtendedColorType::L8,
        )
        .with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
pub fn read_pgm(path: &Path) -> anyhow::Result<GrayImage> {
    let img = image::ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .with_guessed_format()?
        .decode()
        .with_context(|| format!("decoding {}", path.display()))?;
    Ok(img.into_luma8())
}
