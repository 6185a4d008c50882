//! Full-reference and no-reference despeckling quality indices on the
//! `[0, 255]` intensity scale.

use std::fmt;
use std::str::FromStr;

use crate::error::{domain, CoreError, Result};
use crate::image::Image;

pub const PEAK: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Axis-aligned rectangle of pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    pub fn full(img: &Image) -> Self {
        Self {
            x0: 0,
            y0: 0,
            width: img.width(),
            height: img.height(),
        }
    }

    pub fn check(&self, img: &Image) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(domain(format!("empty region {self}")));
        }
        if self.x0 + self.width > img.width() || self.y0 + self.height > img.height() {
            return Err(domain(format!(
                "region {self} outside {}x{} image",
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    fn values<'a>(&'a self, img: &'a Image) -> impl Iterator<Item = f64> + 'a {
        (self.y0..self.y0 + self.height)
            .flat_map(move |y| (self.x0..self.x0 + self.width).map(move |x| img.get(x, y)))
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x0, self.y0, self.width, self.height)
    }
}

impl FromStr for Region {
    type Err = CoreError;

    /// `x0,y0,w,h`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| domain(format!("region must be x0,y0,w,h, got {s:?}")))?;
        match parts[..] {
            [x0, y0, width, height] => Ok(Self {
                x0,
                y0,
                width,
                height,
            }),
            _ => Err(domain(format!("region must be x0,y0,w,h, got {s:?}"))),
        }
    }
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(domain(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.len() as f64)
}

/// `10 log10(255^2 / MSE)`; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / m).log10())
}

pub fn mae(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(s / a.len() as f64)
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering: output is `(w - k + 1) x (h - k + 1)`.
fn filter_valid(px: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &px[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Local SSIM values over every fully contained 11x11 window.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(domain(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (pa, pb) = (a.pixels(), b.pixels());
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(pa, w, h, &taps);
    let mu_b = filter_valid(pb, w, h, &taps);
    let aa = filter_valid(&prod(&|x, _| x * x), w, h, &taps);
    let bb = filter_valid(&prod(&|_, y| y * y), w, h, &taps);
    let ab = filter_valid(&prod(&|x, y| x * y), w, h, &taps);
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    Ok((0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect())
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let map = ssim_map(a, b)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Sobel gradient magnitude with edge-replicated borders.
pub fn sobel_magnitude(img: &Image) -> Image {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let at = |x: isize, y: isize| img.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize);
    Image::from_fn(img.width(), img.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
            - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
        let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
            - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        gx.hypot(gy)
    })
}

/// SSIM of the Sobel gradient-magnitude maps.
pub fn gssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    ssim(&sobel_magnitude(a), &sobel_magnitude(b))
}

/// Pearson correlation of the two pixel populations.
pub fn iicc(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (ma, mb) = (a.mean(), b.mean());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.pixels().iter().zip(b.pixels()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(domain("correlation is undefined for a constant image"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// `mean^2 / variance` over `region`; `+inf` when the region is constant.
pub fn enl(img: &Image, region: &Region) -> Result<f64> {
    region.check(img)?;
    let n = (region.width * region.height) as f64;
    let mean = region.values(img).sum::<f64>() / n;
    let var = region.values(img).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(mean * mean / var)
}

/// Ratio of region means, denoised over noisy.
pub fn moi(denoised: &Image, noisy: &Image, region: &Region) -> Result<f64> {
    same_shape(denoised, noisy)?;
    region.check(denoised)?;
    let d: f64 = region.values(denoised).sum();
    let n: f64 = region.values(noisy).sum();
    if n == 0.0 {
        return Err(domain("noisy region has zero mean"));
    }
    Ok(d / n)
}

/// Mean of the ratio image `noisy / denoised` over the full frame.
pub fn mor(denoised: &Image, noisy: &Image) -> Result<f64> {
    same_shape(denoised, noisy)?;
    let mut s = 0.0;
    for (i, (&d, &n)) in denoised.pixels().iter().zip(noisy.pixels()).enumerate() {
        if d == 0.0 {
            return Err(domain(format!(
                "denoised pixel ({}, {}) is zero",
                i % denoised.width(),
                i / denoised.width()
            )));
        }
        s += n / d;
    }
    Ok(s / denoised.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Horizontal,
    Vertical,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::Horizontal => "hd",
            Direction::Vertical => "vd",
        }
    }
}

fn adjacent_ratio_sum(img: &Image, region: &Region, dir: Direction) -> Result<f64> {
    let (dx, dy) = match dir {
        Direction::Horizontal => (1, 0),
        Direction::Vertical => (0, 1),
    };
    let mut s = 0.0;
    for y in region.y0..region.y0 + region.height - dy {
        for x in region.x0..region.x0 + region.width - dx {
            let den = img.get(x + dx, y + dy);
            if den == 0.0 {
                return Err(domain(format!("zero pixel at ({}, {})", x + dx, y + dy)));
            }
            s += (img.get(x, y) / den).abs();
        }
    }
    Ok(s)
}

/// Edge-preservation degree by ratio of averages: the summed adjacent-pixel
/// ratios of the denoised image over those of the noisy image.
pub fn epd_roa(denoised: &Image, noisy: &Image, region: &Region, dir: Direction) -> Result<f64> {
    same_shape(denoised, noisy)?;
    region.check(denoised)?;
    let along = match dir {
        Direction::Horizontal => region.width,
        Direction::Vertical => region.height,
    };
    if along < 2 {
        return Err(domain(format!("region {region} has fewer than 2 pixels along {}", dir.tag())));
    }
    let d = adjacent_ratio_sum(denoised, region, dir)?;
    let n = adjacent_ratio_sum(noisy, region, dir)?;
    if n == 0.0 {
        return Err(domain("noisy ratio sum is zero"));
    }
    Ok(d / n)
}

/// CSV form of a metric value; infinities print as `inf`.
pub fn format_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricEntry {
    pub name: String,
    pub region: Option<Region>,
    pub value: f64,
}

/// Named metric values in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn push(&mut self, name: &str, region: Option<Region>, value: f64) {
        self.entries.push(MetricEntry {
            name: name.to_string(),
            region,
            value,
        });
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.value)
    }

    /// Rows `image,metric,region,value`; a missing region is left empty.
    pub fn csv_rows(&self, image: &str) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| {
                let region = e.region.map(|r| format!("\"{r}\"")).unwrap_or_default();
                format!("{image},{},{region},{}", e.name, format_value(e.value))
            })
            .collect()
    }

    /// Full-reference metrics of `denoised` against `clean`.
    pub fn full_reference(clean: &Image, denoised: &Image) -> Result<Self> {
        let mut r = Self::default();
        r.push("psnr", None, psnr(clean, denoised)?);
        r.push("ssim", None, ssim(clean, denoised)?);
        r.push("mae", None, mae(clean, denoised)?);
        r.push("gssim", None, gssim(clean, denoised)?);
        match iicc(clean, denoised) {
            Ok(v) => r.push("iicc", None, v),
            Err(e) => log::warn!("iicc skipped: {e}"),
        }
        Ok(r)
    }

    /// No-reference metrics of `denoised` given the speckled input. A metric
    /// whose precondition fails is logged and left out.
    pub fn no_reference(denoised: &Image, noisy: &Image, region: &Region) -> Result<Self> {
        same_shape(denoised, noisy)?;
        region.check(denoised)?;
        let mut r = Self::default();
        let rows: [(&str, bool, Result<f64>); 6] = [
            ("enl", true, enl(denoised, region)),
            ("moi", true, moi(denoised, noisy, region)),
            ("mor", false, mor(denoised, noisy)),
            ("epd_roa_hd", true, epd_roa(denoised, noisy, region, Direction::Horizontal)),
            ("epd_roa_vd", true, epd_roa(denoised, noisy, region, Direction::Vertical)),
            ("enl_noisy", true, enl(noisy, region)),
        ];
        for (name, regional, value) in rows {
            match value {
                Ok(v) => r.push(name, regional.then_some(*region), v),
                Err(e) => log::warn!("{name} skipped: {e}"),
            }
        }
        Ok(r)
    }
}
