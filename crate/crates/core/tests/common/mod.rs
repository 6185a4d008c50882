#![allow(dead_code)]

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarfah_core::Image;
use sarfah_tensor::gradcheck::{check, project, GradCheckOpts};
use sarfah_tensor::{Graph, Mode, ParamBuilder, ParamTree, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(w: usize, h: usize, seed: u64, lo: f64, hi: f64) -> Image {
    let mut r = rng(seed);
    Image::new(w, h, (0..w * h).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Builds a layer into a fresh tree, then overwrites every trainable leaf
/// with `N(0, std)` so paths that start at zero are exercised.
pub fn randomized_tree<T>(
    std: f64,
    build: impl FnOnce(&mut ParamBuilder<'_>) -> sarfah_core::Result<T>,
) -> (ParamTree, T) {
    let mut tree = ParamTree::new();
    let layer = build(&mut ParamBuilder::new(&mut tree, 17)).unwrap();
    tree.randomize(23, std);
    (tree, layer)
}

/// Finite-difference audit of a layer on input `x` and every trainable leaf.
pub fn assert_grad<F>(name: &str, tree: &ParamTree, x: &Tensor, mode: Mode, max_coords: usize, f: F)
where
    F: Fn(&mut Graph<'_>, Var) -> sarfah_core::Result<Var>,
{
    let opts = GradCheckOpts {
        max_coords,
        seed: 5,
        ..Default::default()
    };
    let report = check(Some(tree), std::slice::from_ref(x), mode, opts, |g, v| {
        let out = f(g, v[0]).map_err(to_tensor_err)?;
        project(g, out, 77)
    })
    .unwrap();
    if let Some(c) = report.worst_failure(GRAD_TOL) {
        panic!(
            "{name}: {} rel error {:.3e}, difference {:.3e} against rounding noise {:.3e}",
            c.name, c.rel_error, c.abs_error, c.roundoff
        );
    }
}

pub fn to_tensor_err(e: sarfah_core::CoreError) -> sarfah_tensor::TensorError {
    match e {
        sarfah_core::CoreError::Tensor(t) => t,
        other => sarfah_tensor::TensorError::Invalid {
            op: "core",
            detail: other.to_string(),
        },
    }
}
