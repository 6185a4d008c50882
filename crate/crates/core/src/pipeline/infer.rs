//! Whole-image inference by overlapping tiles.

use crate::error::{domain, Result};
use crate::image::Image;
use crate::model::{Model, SIDE_MULTIPLE};
use crate::wavelet::{dwt2_haar, SubBands};

/// Lower clamp of despeckled intensities, so ratio-based indices stay
/// defined.
pub const OUTPUT_FLOOR: f64 = 1.0;
pub const OUTPUT_CEIL: f64 = 255.0;
const TILE_BATCH: usize = 8;

/// Tile origins along one axis: stride `tile / 2`, with the last tile
/// flush against the far edge.
fn origins(len: usize, tile: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let stride = (tile / 2).max(4) / 4 * 4;
    let mut v: Vec<usize> = (0..=len - tile).step_by(stride).collect();
    if *v.last().unwrap_or(&0) != len - tile {
        v.push(len - tile);
    }
    v
}

/// Mirror index for symmetric extension past the far edge.
fn mirror(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * len - 1 - i
    }
}

/// Despeckles an image of any 4-divisible size. The image is mirrored out
/// to the next multiple of [`SIDE_MULTIPLE`]; tiles at the training size are
/// processed in eval mode and averaged where they overlap; the result is
/// cropped back and clamped to `[OUTPUT_FLOOR, OUTPUT_CEIL]`.
pub fn despeckle(model: &Model, noisy: &Image) -> Result<Image> {
    let (w0, h0) = (noisy.width(), noisy.height());
    if w0 == 0 || h0 == 0 || w0 % 4 != 0 || h0 % 4 != 0 {
        return Err(domain(format!("image sides must be divisible by 4, got {w0}x{h0}")));
    }
    noisy.check_finite()?;
    let (w, h) = (w0.next_multiple_of(SIDE_MULTIPLE), h0.next_multiple_of(SIDE_MULTIPLE));
    let padded = Image::from_fn(w, h, |x, y| noisy.get(mirror(x, w0), mirror(y, h0)));
    let t = model.cfg().train_size;
    let (tw, th) = (t.min(w), t.min(h));
    let mut tiles = Vec::new();
    for &y in &origins(h, th) {
        for &x in &origins(w, tw) {
            tiles.push((x, y));
        }
    }
    let mut acc = vec![0.0; w * h];
    let mut count = vec![0u32; w * h];
    for chunk in tiles.chunks(TILE_BATCH) {
        let inputs = chunk
            .iter()
            .map(|&(x, y)| padded.crop(x, y, tw, th))
            .collect::<Result<Vec<_>>>()?;
        for (out, &(x0, y0)) in model.predict(&inputs)?.iter().zip(chunk) {
            for y in 0..th {
                for x in 0..tw {
                    let i = (y0 + y) * w + x0 + x;
                    acc[i] += out.get(x, y);
                    count[i] += 1;
                }
            }
        }
    }
    let px = acc
        .iter()
        .zip(&count)
        .map(|(s, &c)| (s / c as f64).clamp(OUTPUT_FLOOR, OUTPUT_CEIL))
        .collect();
    Image::new(w, h, px)?.crop(0, 0, w0, h0)
}

/// Haar sub-bands of the despeckled image, for inspection.
pub fn despeckle_subbands(model: &Model, noisy: &Image) -> Result<(Image, SubBands)> {
    let out = despeckle(model, noisy)?;
    let bands = dwt2_haar(&out)?;
    Ok((out, bands))
}
