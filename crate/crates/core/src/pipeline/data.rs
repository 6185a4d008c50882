//! Corpus ingestion, grid patches, dihedral augmentation and image I/O.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::image::Image;

/// Mixes seed components into one well-spread 64-bit seed (SplitMix64
/// finalizer applied after each component).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// FNV-1a over the little-endian bytes of every pixel.
pub fn checksum(img: &Image) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let dims = [img.width() as u64, img.height() as u64];
    for b in dims
        .iter()
        .flat_map(|d| d.to_le_bytes())
        .chain(img.pixels().iter().flat_map(|v| v.to_le_bytes()))
    {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn io_err(path: &Path, source: std::io::Error) -> CoreError {
    CoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn decode_err(path: &Path, detail: impl Into<String>) -> CoreError {
    CoreError::Decode {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Reads an 8-bit grayscale PGM or PNG.
pub fn read_gray(path: &Path) -> Result<Image> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| io_err(path, e))?
        .with_guessed_format()
        .map_err(|e| io_err(path, e))?;
    let img = reader.decode().map_err(|e| decode_err(path, e.to_string()))?;
    if img.color() != ColorType::L8 {
        return Err(decode_err(path, format!("expected 8-bit grayscale, found {:?}", img.color())));
    }
    let gray = img.into_luma8();
    let (w, h) = gray.dimensions();
    Image::new(w as usize, h as usize, gray.into_raw().into_iter().map(f64::from).collect())
}

/// Quantizes to 8 bits (round, clamp to `[0, 255]`).
pub fn to_u8(img: &Image) -> Vec<u8> {
    img.pixels()
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes a binary 8-bit PGM.
pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let enc = PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    enc.write_image(&to_u8(img), img.width() as u32, img.height() as u32, ExtendedColorType::L8)
        .map_err(|e| decode_err(path, e.to_string()))
}

/// Decoded images of a directory, in lexicographic file-name order.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub paths: Vec<PathBuf>,
    pub images: Vec<Image>,
    /// One entry per skipped file.
    pub warnings: Vec<String>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn checksums(&self) -> Vec<u64> {
        self.images.iter().map(checksum).collect()
    }
}

/// Loads every readable grayscale PGM/PNG in `dir`. Files that fail to
/// decode are skipped with a warning; a corpus with no images is an error.
pub fn ingest_corpus(dir: &Path) -> Result<Corpus> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "png"))
        })
        .collect();
    paths.sort();
    let mut corpus = Corpus {
        paths: Vec::new(),
        images: Vec::new(),
        warnings: Vec::new(),
    };
    for p in paths {
        match read_gray(&p) {
            Ok(img) => {
                corpus.paths.push(p);
                corpus.images.push(img);
            }
            Err(e) => {
                log::warn!("skipping {e}");
                corpus.warnings.push(e.to_string());
            }
        }
    }
    if corpus.is_empty() {
        return Err(CoreError::EmptyCorpus(0));
    }
    Ok(corpus)
}

/// Element `k` (0..8) of the dihedral group of the square: `k % 4` quarter
/// turns clockwise, then a horizontal flip when `k >= 4`.
pub fn dihedral(img: &Image, k: usize) -> Image {
    let mut out = img.clone();
    for _ in 0..k % 4 {
        let src = out;
        let (w, h) = (src.width(), src.height());
        out = Image::from_fn(h, w, |x, y| src.get(y, h - 1 - x));
    }
    if k % 8 >= 4 {
        let w = out.width();
        let src = out;
        out = Image::from_fn(w, src.height(), |x, y| src.get(w - 1 - x, y));
    }
    out
}

/// Non-overlapping `patch x patch` tiles of every image, row-major per image.
/// With `augment`, each patch is replaced by a dihedral transform drawn from
/// a generator keyed on `(seed, patch index)`.
pub fn make_patches(images: &[Image], patch: usize, augment: bool, seed: u64) -> Result<Vec<Image>> {
    if patch == 0 {
        return Err(CoreError::Config("patch size must be positive".into()));
    }
    let mut out = Vec::new();
    for (i, img) in images.iter().enumerate() {
        if img.width() < patch || img.height() < patch {
            log::warn!(
                "image {i} ({}x{}) is smaller than the {patch}px patch; skipped",
                img.width(),
                img.height()
            );
            continue;
        }
        for py in 0..img.height() / patch {
            for px in 0..img.width() / patch {
                let p = img.crop(px * patch, py * patch, patch, patch)?;
                out.push(if augment {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, out.len() as u64]));
                    dihedral(&p, rng.random_range(0..8))
                } else {
                    p
                });
            }
        }
    }
    Ok(out)
}

/// Piecewise-smooth test scene in `[16, 240]`: a shaded background with
/// random rectangles, discs and a few thin lines.
pub fn synthetic_scene(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = rng.random_range(60.0..160.0);
    let gx = rng.random_range(-0.4..0.4);
    let gy = rng.random_range(-0.4..0.4);
    let mut img = Image::from_fn(width, height, |x, y| base + gx * x as f64 + gy * y as f64);
    let shapes = rng.random_range(6..12);
    for _ in 0..shapes {
        let level = rng.random_range(16.0..240.0);
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let r = rng.random_range(4.0..(width.min(height) as f64 / 3.0).max(5.0));
        let kind = rng.random_range(0..3);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = match kind {
                    0 => dx * dx + dy * dy <= r * r,
                    1 => dx.abs() <= r && dy.abs() <= 0.6 * r,
                    _ => dx.abs() <= 1.5 && dy.abs() <= 2.0 * r,
                };
                if inside {
                    img.set(x, y, level);
                }
            }
        }
    }
    img.map(|v| v.clamp(16.0, 240.0))
}
