use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TensorError};
use crate::graph::StatUpdate;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameter leaves, ordered by path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamTree {
    leaves: BTreeMap<String, Param>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.leaves.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        self.leaves
            .insert(name.to_string(), Param { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.leaves
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.leaves
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.leaves.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.leaves.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.leaves.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.leaves
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Trainable scalar count of all leaves under `prefix`.
    pub fn trainable_count_under(&self, prefix: &str) -> usize {
        self.leaves
            .iter()
            .filter(|(k, p)| p.trainable && k.starts_with(prefix))
            .map(|(_, p)| p.tensor.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.leaves.values_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Adds gradients produced by a graph into the leaves' grad buffers.
    pub fn accumulate_grads(&mut self, grads: &[(String, Tensor)]) -> Result<()> {
        for (name, g) in grads {
            let p = self.get_mut(name)?;
            let buf = p.tensor.grad_mut();
            for (a, b) in buf.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) -> Result<()> {
        for u in updates {
            let m = u.momentum;
            let mean = self.get_mut(&u.mean_name)?.tensor.data_mut();
            for (r, b) in mean.iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            let var = self.get_mut(&u.var_name)?.tensor.data_mut();
            for (r, b) in var.iter_mut().zip(&u.batch_var_unbiased) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
        Ok(())
    }

    /// Overwrites every trainable leaf with `N(0, std)` draws. Test helper for
    /// probing layers whose default init zeroes a path.
    pub fn randomize(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("valid std");
        for p in self.leaves.values_mut().filter(|p| p.trainable) {
            for v in p.tensor.data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
    }
}

/// Initialization scheme for a new leaf.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Uniform(f64, f64),
    Normal(f64),
    Const(f64),
}

/// Creates leaves under a path prefix with a seeded generator.
pub struct ParamBuilder<'a> {
    tree: &'a mut ParamTree,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(tree: &'a mut ParamTree, seed: u64) -> Self {
        Self {
            tree,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, segment: &str) {
        self.prefix.push(segment.to_string());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` with `segment` appended to the prefix.
    pub fn scoped<T>(&mut self, segment: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.push(segment);
        let out = f(self);
        self.pop();
        out
    }

    pub fn path(&self, leaf: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    pub fn add(&mut self, leaf: &str, shape: &[usize], init: Init) -> Result<String> {
        self.add_with(leaf, shape, init, true)
    }

    pub fn add_buffer(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<String> {
        self.add_with(leaf, shape, Init::Const(value), false)
    }

    /// Adds a leaf with explicit values.
    pub fn add_values(&mut self, leaf: &str, tensor: Tensor) -> Result<String> {
        let name = self.path(leaf);
        self.tree.insert(&name, tensor, true)?;
        Ok(name)
    }

    fn add_with(
        &mut self,
        leaf: &str,
        shape: &[usize],
        init: Init,
        trainable: bool,
    ) -> Result<String> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
            Init::Uniform(lo, hi) => (0..n).map(|_| self.rng.random_range(lo..hi)).collect(),
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| normal.sample(&mut self.rng)).collect()
            }
        };
        let name = self.path(leaf);
        self.tree
            .insert(&name, Tensor::from_vec(shape, data)?, trainable)?;
        Ok(name)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
