//! Central finite-difference gradient checks.
//!
//! The checker only ever runs forward passes to build its numeric estimate,
//! so it stays independent of every backward implementation it audits.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::params::ParamTree;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOpts {
    pub step: f64,
    /// Upper bound on probed coordinates per tensor.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub analytic_norm: f64,
    pub rel_error: f64,
    /// Norm of the analytic-minus-numeric difference.
    pub abs_error: f64,
    /// Expected norm of the rounding noise in the numeric estimate,
    /// `sqrt(coords) * eps * |f| / step`.
    pub roundoff: f64,
}

/// Multiple of the rounding-noise estimate below which a difference is
/// indistinguishable from zero.
pub const ROUNDOFF_FACTOR: f64 = 10.0;

impl TensorCheck {
    /// Relative error under `tol`, or a difference lost in rounding noise.
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol || self.abs_error < ROUNDOFF_FACTOR * self.roundoff
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checks: Vec<TensorCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    /// Every tensor [`TensorCheck::passes`] at `tol`.
    pub fn passes(&self, tol: f64) -> bool {
        self.checks.iter().all(|c| c.passes(tol))
    }

    /// Largest relative error among tensors that fail at `tol`.
    pub fn worst_failure(&self, tol: f64) -> Option<&TensorCheck> {
        self.checks
            .iter()
            .filter(|c| !c.passes(tol))
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Norm below which a gradient counts as zero; central differences at
/// `h = 1e-5` carry roundoff near `1e-10` per coordinate.
pub const ZERO_GRAD_NORM: f64 = 1e-6;

/// `||a - n|| / max(||a||, ||n||, ZERO_GRAD_NORM)` over the probed coordinates.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nn).max(ZERO_GRAD_NORM)
}

/// Reduces `out` to a scalar through a fixed random projection, so every
/// output element contributes with a distinct weight.
pub fn project(g: &mut Graph<'_>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let weights = random_tensor(&shape, seed, -1.0, 1.0);
    let w = g.constant(weights);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(lo, hi).expect("valid range");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("shape")
}

fn coords(len: usize, opts: &GradCheckOpts, salt: u64) -> Vec<usize> {
    if len <= opts.max_coords {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut idx = sample(&mut rng, len, opts.max_coords).into_vec();
    idx.sort_unstable();
    idx
}

/// Checks gradients with respect to free inputs of a scalar function.
pub fn check_inputs<F>(inputs: &[Tensor], mode: Mode, opts: GradCheckOpts, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    check(None, inputs, mode, opts, f)
}

/// Checks gradients with respect to `inputs` and, when `tree` is given, to
/// every trainable leaf of it.
pub fn check<F>(
    tree: Option<&ParamTree>,
    inputs: &[Tensor],
    mode: Mode,
    opts: GradCheckOpts,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let eval = |t: Option<&ParamTree>, ins: &[Tensor]| -> Result<f64> {
        let mut g = match t {
            Some(t) => Graph::with_params(t, mode),
            None => Graph::new(mode),
        };
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = match tree {
        Some(t) => Graph::with_params(t, mode),
        None => Graph::new(mode),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let f0 = g.value(out).item().abs();
    g.backward(out)?;
    let mut report = GradReport::default();

    let mut probe = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let analytic_full = g
            .grad(vars[i])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let idx = coords(t.len(), &opts, i as u64);
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + opts.step;
            let up = eval(tree, &probe)?;
            probe[i].data_mut()[j] = orig - opts.step;
            let down = eval(tree, &probe)?;
            probe[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * opts.step));
        }
        let analytic: Vec<f64> = idx.iter().map(|&j| analytic_full[j]).collect();
        report.checks.push(summary(format!("input{i}"), &analytic, &numeric, f0, opts.step));
    }

    if let Some(tree) = tree {
        let grads: HashMap<String, Tensor> = g.param_grads().into_iter().collect();
        let mut ptree = tree.clone();
        let names: Vec<String> = tree
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect();
        for (salt, name) in names.iter().enumerate() {
            let len = tree.get(name)?.tensor.len();
            let analytic_full = grads
                .get(name)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; len]);
            let idx = coords(len, &opts, salt as u64 + 1000);
            let mut numeric = Vec::with_capacity(idx.len());
            for &j in &idx {
                let orig = ptree.get(name)?.tensor.data()[j];
                ptree.get_mut(name)?.tensor.data_mut()[j] = orig + opts.step;
                let up = eval(Some(&ptree), inputs)?;
                ptree.get_mut(name)?.tensor.data_mut()[j] = orig - opts.step;
                let down = eval(Some(&ptree), inputs)?;
                ptree.get_mut(name)?.tensor.data_mut()[j] = orig;
                numeric.push((up - down) / (2.0 * opts.step));
            }
            let analytic: Vec<f64> = idx.iter().map(|&j| analytic_full[j]).collect();
            report.checks.push(summary(name.clone(), &analytic, &numeric, f0, opts.step));
        }
    }
    Ok(report)
}

fn summary(name: String, analytic: &[f64], numeric: &[f64], f0: f64, step: f64) -> TensorCheck {
    let coords = analytic.len();
    TensorCheck {
        name,
        coords,
        analytic_norm: analytic.iter().map(|v| v * v).sum::<f64>().sqrt(),
        rel_error: relative_error(analytic, numeric),
        abs_error: analytic
            .iter()
            .zip(numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt(),
        roundoff: (coords as f64).sqrt() * f64::EPSILON * f0.max(1.0) / step,
    }
}
