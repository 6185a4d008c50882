//! Low-frequency branch: a learned vector field integrated by a fixed-step
//! Euler solver whose evaluation times are jittered during training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarfah_tensor::nn::{Conv2d, ConvBnRelu};
use sarfah_tensor::{Graph, Mode, ParamBuilder, Tensor, Var};

use crate::attention::{Dass, DassConfig};
use crate::error::{domain, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeConfig {
    /// Integration horizon `T`.
    pub horizon: f64,
    /// Number of Euler steps `N`.
    pub steps: usize,
    /// Jitter field-evaluation times in training mode.
    pub randomized: bool,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 2,
            randomized: true,
        }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(domain("ODE step count must be at least 1"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(domain(format!("ODE horizon must be positive, got {}", self.horizon)));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps as f64
    }
}

/// Euler integration `u_{i+1} = u_i + h f(u_i, tau_i)` on the grid
/// `t_i = i T / N`.
///
/// In training mode with `cfg.randomized`, `tau_i = t_i + xi_i h` with
/// `xi_i ~ U[0, 1)` drawn from `seed`; otherwise `tau_i = t_i`. Gradients
/// flow through the unrolled steps.
pub fn ode_solve<F>(g: &mut Graph<'_>, u0: Var, cfg: &OdeConfig, seed: u64, mut field: F) -> Result<Var>
where
    F: FnMut(&mut Graph<'_>, Var, f64) -> Result<Var>,
{
    cfg.validate()?;
    let h = cfg.step_size();
    let jitter = cfg.randomized && g.mode() == Mode::Train;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = u0;
    for i in 0..cfg.steps {
        let t = i as f64 * h;
        let tau = if jitter { t + rng.random::<f64>() * h } else { t };
        let du = field(g, u, tau)?;
        if g.shape(du) != g.shape(u) {
            return Err(domain(format!(
                "field returned {:?} for state {:?}",
                g.shape(du),
                g.shape(u)
            )));
        }
        let step = g.scale(du, h)?;
        u = g.add(u, step)?;
    }
    Ok(u)
}

/// Seven convolutional blocks over `[u || t]`, with optional dual-branch
/// blocks after the third and sixth. The last block is a bare convolution
/// so the derivative estimate can take either sign.
#[derive(Debug, Clone)]
pub struct LfspField {
    pub blocks: Vec<ConvBnRelu>,
    pub last: Conv2d,
    pub dass: Option<[Dass; 2]>,
    pub channels: usize,
}

/// Block indices (zero-based) followed by a dual-branch block.
const DASS_AFTER: [usize; 2] = [2, 5];

impl LfspField {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        channels: usize,
        pos_hw: (usize, usize),
        dass: Option<&DassConfig>,
    ) -> Result<Self> {
        let c = channels;
        pb.push(name);
        let mut blocks = Vec::with_capacity(6);
        for i in 0..6 {
            let cin = if i == 0 { c + 1 } else { c };
            blocks.push(ConvBnRelu::new(pb, &format!("block{}", i + 1), cin, c, 3)?);
        }
        let last = Conv2d::new(pb, "block7", c, c, 3)?;
        let dass = match dass {
            Some(cfg) => Some([
                Dass::new(pb, "dass1", c, pos_hw, cfg)?,
                Dass::new(pb, "dass2", c, pos_hw, cfg)?,
            ]),
            None => None,
        };
        pb.pop();
        Ok(Self {
            blocks,
            last,
            dass,
            channels,
        })
    }

    /// Field value with an explicit time plane `[N, 1, h, w]`.
    pub fn forward_with_time_plane(&self, g: &mut Graph<'_>, u: Var, t_plane: Var) -> Result<Var> {
        let mut x = g.concat_channels(&[u, t_plane])?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, x)?;
            if let Some(dass) = &self.dass {
                if let Some(k) = DASS_AFTER.iter().position(|&j| j == i) {
                    x = dass[k].forward(g, x)?;
                }
            }
        }
        Ok(self.last.forward(g, x)?)
    }

    pub fn forward(&self, g: &mut Graph<'_>, u: Var, t: f64) -> Result<Var> {
        let (n, _, h, w) = g.value(u).dims4()?;
        let plane = g.constant(Tensor::full(&[n, 1, h, w], t));
        self.forward_with_time_plane(g, u, plane)
    }
}

/// The field integrated over `[0, T]`, or applied once at `t = 0` when the
/// integrator is switched off.
#[derive(Debug, Clone)]
pub struct LfspOde {
    pub field: LfspField,
    pub ode: OdeConfig,
    pub integrate: bool,
}

impl LfspOde {
    pub fn forward(&self, g: &mut Graph<'_>, u0: Var, seed: u64) -> Result<Var> {
        if !self.integrate {
            return self.field.forward(g, u0, 0.0);
        }
        ode_solve(g, u0, &self.ode, seed, |g, u, t| self.field.forward(g, u, t))
    }
}
