//! Multiplicative Gamma speckle, Gamma / generalized-Gaussian densities and
//! their moment fits, and a Monte-Carlo check of how Haar analysis
//! transforms an i.i.d. Gamma field.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use statrs::function::gamma::{gamma, ln_gamma};

use crate::error::{domain, CoreError, Result};
use crate::image::Image;
use crate::wavelet::dwt2_cascade;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaParams {
    pub shape_a: f64,
    pub scale_b: f64,
}

impl GammaParams {
    pub fn new(shape_a: f64, scale_b: f64) -> Result<Self> {
        if !(shape_a > 0.0 && scale_b > 0.0 && shape_a.is_finite() && scale_b.is_finite()) {
            return Err(domain(format!("Gamma({shape_a}, {scale_b}) needs positive finite parameters")));
        }
        Ok(Self { shape_a, scale_b })
    }

    pub fn mean(&self) -> f64 {
        self.shape_a * self.scale_b
    }

    pub fn variance(&self) -> f64 {
        self.shape_a * self.scale_b * self.scale_b
    }

    fn sampler(&self) -> Gamma<f64> {
        Gamma::new(self.shape_a, self.scale_b).expect("validated parameters")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgdParams {
    pub alpha: f64,
    pub beta: f64,
}

impl GgdParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(domain(format!("GGD({alpha}, {beta}) needs positive finite parameters")));
        }
        Ok(Self { alpha, beta })
    }
}

/// Number of looks of a fully developed speckle field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Looks(f64);

impl Looks {
    pub fn new(l: f64) -> Result<Self> {
        if !(l > 0.0 && l.is_finite()) {
            return Err(domain(format!("number of looks must be positive, got {l}")));
        }
        Ok(Self(l))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Unit-mean speckle law `Gamma(L, 1/L)`.
    pub fn speckle_law(self) -> GammaParams {
        GammaParams {
            shape_a: self.0,
            scale_b: 1.0 / self.0,
        }
    }
}

/// `n` i.i.d. draws from `p`.
pub fn sample_gamma(p: GammaParams, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = p.sampler();
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

/// `width x height` field of i.i.d. unit-mean speckle.
pub fn speckle_field(width: usize, height: usize, looks: Looks, seed: u64) -> Image {
    let s = sample_gamma(looks.speckle_law(), width * height, seed);
    Image::new(width, height, s).expect("field size")
}

/// `clean` multiplied pixelwise by an i.i.d. `Gamma(L, 1/L)` field.
pub fn synthesize_speckle(clean: &Image, looks: Looks, seed: u64) -> Result<Image> {
    clean.check_finite()?;
    let field = speckle_field(clean.width(), clean.height(), looks, seed);
    let pixels = clean
        .pixels()
        .iter()
        .zip(field.pixels())
        .map(|(c, s)| c * s)
        .collect();
    Image::new(clean.width(), clean.height(), pixels)
}

pub fn gamma_pdf(x: f64, p: GammaParams) -> f64 {
    let (a, b) = (p.shape_a, p.scale_b);
    if x < 0.0 {
        return 0.0;
    }
    if x == 0.0 {
        return match a.partial_cmp(&1.0) {
            Some(std::cmp::Ordering::Less) => f64::INFINITY,
            Some(std::cmp::Ordering::Equal) => 1.0 / b,
            _ => 0.0,
        };
    }
    ((a - 1.0) * x.ln() - x / b - a * b.ln() - ln_gamma(a)).exp()
}

pub fn ggd_pdf(x: f64, p: GgdParams) -> f64 {
    let (alpha, beta) = (p.alpha, p.beta);
    beta / (2.0 * alpha * gamma(1.0 / beta)) * (-(x.abs() / alpha).powf(beta)).exp()
}

/// Method-of-moments fit: `a = mean^2 / var`, `b = var / mean`.
pub fn fit_gamma(samples: &[f64]) -> Result<GammaParams> {
    if samples.len() < 2 {
        return Err(domain(format!("need at least 2 samples, got {}", samples.len())));
    }
    if let Some(v) = samples.iter().find(|v| !(**v >= 0.0)) {
        return Err(domain(format!("Gamma samples must be non-negative, got {v}")));
    }
    let (mean, var) = mean_var(samples);
    if !(var > 0.0) || !(mean > 0.0) {
        return Err(CoreError::DegenerateFit(format!("mean {mean}, variance {var}")));
    }
    GammaParams::new(mean * mean / var, var / mean)
}

/// `E|x|^2 / (E|x|)^2` for a GGD with shape `beta`; strictly decreasing.
pub fn ggd_moment_ratio(beta: f64) -> f64 {
    (ln_gamma(1.0 / beta) + ln_gamma(3.0 / beta) - 2.0 * ln_gamma(2.0 / beta)).exp()
}

const GGD_BETA_RANGE: (f64, f64) = (0.1, 10.0);

/// Moment-ratio fit with `beta` found by bisection on `[0.1, 10]` and
/// `alpha = E|x| * Gamma(1/beta) / Gamma(2/beta)`.
pub fn fit_ggd(samples: &[f64]) -> Result<GgdParams> {
    if samples.len() < 2 {
        return Err(domain(format!("need at least 2 samples, got {}", samples.len())));
    }
    let n = samples.len() as f64;
    let m1 = samples.iter().map(|v| v.abs()).sum::<f64>() / n;
    let m2 = samples.iter().map(|v| v * v).sum::<f64>() / n;
    if !(m1 > 0.0) || !m2.is_finite() {
        return Err(CoreError::FitFailure("samples carry no spread".into()));
    }
    let target = m2 / (m1 * m1);
    let (mut lo, mut hi) = GGD_BETA_RANGE;
    let (r_lo, r_hi) = (ggd_moment_ratio(lo), ggd_moment_ratio(hi));
    if !(target <= r_lo && target >= r_hi) {
        return Err(CoreError::FitFailure(format!(
            "moment ratio {target:.6} outside [{r_hi:.6}, {r_lo:.6}]"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ggd_moment_ratio(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    let beta = 0.5 * (lo + hi);
    let alpha = m1 * (ln_gamma(1.0 / beta) - ln_gamma(2.0 / beta)).exp();
    GgdParams::new(alpha, beta)
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Population skewness `m3 / m2^1.5`.
pub fn skewness(v: &[f64]) -> f64 {
    let (mean, var) = mean_var(v);
    let n = v.len() as f64;
    let m3 = v.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    m3 / var.powf(1.5)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeLawConfig {
    /// Relative tolerance on the LL mean and variance.
    pub rel_tol: f64,
    /// Bound on `|skewness|` of each detail band.
    pub skew_tol: f64,
    /// Independent fields are pooled until every band holds at least this
    /// many coefficients.
    pub min_coefficients: usize,
}

impl Default for CascadeLawConfig {
    fn default() -> Self {
        Self {
            rel_tol: 0.02,
            skew_tol: 0.02,
            min_coefficients: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeLawReport {
    pub level_j: usize,
    pub field_size: usize,
    pub replicates: usize,
    pub ll_mean: f64,
    pub ll_variance: f64,
    pub predicted_mean: f64,
    pub predicted_variance: f64,
    /// Larger of the relative LL mean and variance errors.
    pub ll_moment_error: f64,
    /// Skewness of LH, HL and HH at the final level.
    pub hf_skewness: [f64; 3],
    pub pass: bool,
}

impl CascadeLawReport {
    pub fn max_abs_skewness(&self) -> f64 {
        self.hf_skewness.iter().map(|s| s.abs()).fold(0.0, f64::max)
    }

    /// `metric,value` rows.
    pub fn csv_rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![
            ("level_j".to_string(), self.level_j.to_string()),
            ("field_size".into(), self.field_size.to_string()),
            ("replicates".into(), self.replicates.to_string()),
            ("ll_mean".into(), self.ll_mean.to_string()),
            ("ll_mean_predicted".into(), self.predicted_mean.to_string()),
            ("ll_variance".into(), self.ll_variance.to_string()),
            ("ll_variance_predicted".into(), self.predicted_variance.to_string()),
            ("ll_moment_error".into(), self.ll_moment_error.to_string()),
        ];
        for (name, s) in ["lh", "hl", "hh"].iter().zip(self.hf_skewness) {
            rows.push((format!("{name}_skewness"), s.to_string()));
        }
        rows.push(("pass".into(), self.pass.to_string()));
        rows
    }
}

pub fn verify_cascade_law(p: GammaParams, level_j: usize, field_size: usize, seed: u64) -> Result<CascadeLawReport> {
    verify_cascade_law_with(p, level_j, field_size, seed, &CascadeLawConfig::default())
}

/// Draws i.i.d. `Gamma(a, b)` fields of side `field_size`, runs the Haar
/// cascade to depth `j`, and compares the final LL moments against
/// `Gamma(4^j a, 2^-j b)` (mean `2^j ab`, variance `ab^2`) and the detail
/// bands against zero skewness.
pub fn verify_cascade_law_with(
    p: GammaParams,
    level_j: usize,
    field_size: usize,
    seed: u64,
    cfg: &CascadeLawConfig,
) -> Result<CascadeLawReport> {
    if !field_size.is_power_of_two() {
        return Err(domain(format!("field size {field_size} is not a power of two")));
    }
    if level_j == 0 || (1usize << level_j) > field_size {
        return Err(domain(format!("level {level_j} too deep for a {field_size}-wide field")));
    }
    let per_field = (field_size >> level_j).pow(2);
    let replicates = cfg.min_coefficients.div_ceil(per_field).max(1);
    let mut bands: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(per_field * replicates));
    let dist = p.sampler();
    for r in 0..replicates {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let field: Vec<f64> = (0..field_size * field_size).map(|_| dist.sample(&mut rng)).collect();
        let img = Image::new(field_size, field_size, field)?;
        let cascade = dwt2_cascade(&img, level_j)?;
        let last = cascade.levels.last().expect("non-empty cascade");
        for (acc, band) in bands.iter_mut().zip(last.bands()) {
            acc.extend_from_slice(band.pixels());
        }
    }
    let (ll_mean, ll_variance) = mean_var(&bands[0]);
    let predicted_mean = (1u64 << level_j) as f64 * p.mean();
    let predicted_variance = p.variance();
    let ll_moment_error = ((ll_mean - predicted_mean) / predicted_mean)
        .abs()
        .max(((ll_variance - predicted_variance) / predicted_variance).abs());
    let hf_skewness = [skewness(&bands[1]), skewness(&bands[2]), skewness(&bands[3])];
    let max_skew = hf_skewness.iter().map(|s| s.abs()).fold(0.0, f64::max);
    Ok(CascadeLawReport {
        level_j,
        field_size,
        replicates,
        ll_mean,
        ll_variance,
        predicted_mean,
        predicted_variance,
        ll_moment_error,
        hf_skewness,
        pass: ll_moment_error < cfg.rel_tol && max_skew < cfg.skew_tol,
    })
}
