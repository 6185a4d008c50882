//! Parameterized layers built on [`Graph`] operations.
//!
//! Each layer stores only the names of its leaves; values live in a
//! [`ParamTree`](crate::ParamTree) and are bound per forward pass.

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::ops::conv::Conv2dSpec;
use crate::params::{Init, ParamBuilder};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Self::with_spec(pb, name, cin, cout, k, Conv2dSpec::same(k), true)
    }

    pub fn with_spec(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Result<Self> {
        let groups = spec.groups.max(1);
        let fan_in = cin / groups * k * k;
        pb.scoped(name, |pb| {
            let weight = pb.add("weight", &[cout, cin / groups, k, k], Init::FanIn(fan_in))?;
            let bias = if bias {
                Some(pb.add("bias", &[cout], Init::FanIn(fan_in))?)
            } else {
                None
            };
            Ok(Self { weight, bias, spec })
        })
    }

    /// Same layer with weight and bias set to zero.
    pub fn zeroed(pb: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            let weight = pb.add("weight", &[cout, cin, k, k], Init::Const(0.0))?;
            let bias = Some(pb.add("bias", &[cout], Init::Const(0.0))?);
            Ok(Self {
                weight,
                bias,
                spec: Conv2dSpec::same(k),
            })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = self.bias.as_deref().map(|b| g.param(b)).transpose()?;
        g.conv2d(x, w, b, self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, c: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                gamma: pb.add("gamma", &[c], Init::Const(1.0))?,
                beta: pb.add("beta", &[c], Init::Const(0.0))?,
                running_mean: pb.add_buffer("running_mean", &[c], 0.0)?,
                running_var: pb.add_buffer("running_var", &[c], 1.0)?,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma)?;
        let beta = g.param(&self.beta)?;
        g.batchnorm2d(x, gamma, beta, &self.running_mean, &self.running_var)
    }
}

/// Channel-wise LayerNorm on `[N, C, H, W]` maps.
#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm2d {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, c: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                gamma: pb.add("gamma", &[c], Init::Const(1.0))?,
                beta: pb.add("beta", &[c], Init::Const(0.0))?,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma)?;
        let beta = g.param(&self.beta)?;
        g.layernorm_channels(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, din: usize, dout: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                weight: pb.add("weight", &[dout, din], Init::FanIn(din))?,
                bias: pb.add("bias", &[dout], Init::FanIn(din))?,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        g.linear(x, w, Some(b))
    }
}

/// Conv -> BatchNorm -> ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                conv: Conv2d::new(pb, "conv", cin, cout, k)?,
                bn: BatchNorm2d::new(pb, "bn", cout)?,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        g.relu(y)
    }
}

/// Deformable `k x k` convolution with its offset branch.
///
/// The offset branch is a 3x3 convolution over a two-plane descriptor of the
/// layer input (channel mean and channel max). It starts at zero, so a fresh
/// layer behaves as a plain convolution.
#[derive(Debug, Clone)]
pub struct DeformConv2d {
    pub weight: String,
    pub bias: String,
    pub offset: Conv2d,
    pub k: usize,
}

impl DeformConv2d {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            let fan_in = cin * k * k;
            Ok(Self {
                weight: pb.add("weight", &[cout, cin, k, k], Init::FanIn(fan_in))?,
                bias: pb.add("bias", &[cout], Init::FanIn(fan_in))?,
                offset: Conv2d::zeroed(pb, "offset", 2, 2 * k * k, 3)?,
                k,
            })
        })
    }

    pub fn offsets(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mean = g.channel_mean(x)?;
        let max = g.channel_max(x)?;
        let desc = g.concat_channels(&[mean, max])?;
        self.offset.forward(g, desc)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let off = self.offsets(g, x)?;
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        g.deform_conv2d(x, w, off, Some(b))
    }
}

/// Input-conditioned convex mixture of `K` expert kernels.
///
/// `alpha = softmax(FC(ReLU(FC(GAP(x)))))`; the layer convolves with
/// `sum_k alpha_k W_k` and bias `sum_k alpha_k b_k`.
#[derive(Debug, Clone)]
pub struct DynamicConv2d {
    pub experts: String,
    pub expert_bias: String,
    pub fc1: Linear,
    pub fc2: Linear,
    pub k: usize,
    pub num_experts: usize,
}

impl DynamicConv2d {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        num_experts: usize,
        reduction: usize,
    ) -> Result<Self> {
        if num_experts == 0 {
            return Err(invalid("dynamic_conv", "zero experts"));
        }
        let hidden = (cin / reduction.max(1)).max(1);
        pb.scoped(name, |pb| {
            let fan_in = cin * k * k;
            Ok(Self {
                experts: pb.add("experts", &[num_experts, cout, cin, k, k], Init::FanIn(fan_in))?,
                expert_bias: pb.add("expert_bias", &[num_experts, cout], Init::FanIn(fan_in))?,
                fc1: Linear::new(pb, "attn_fc1", cin, hidden)?,
                fc2: Linear::new(pb, "attn_fc2", hidden, num_experts)?,
                k,
                num_experts,
            })
        })
    }

    /// Expert weights `alpha: [N, K]`.
    pub fn attention(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (n, c, _, _) = g.value(x).dims4()?;
        let pooled = g.global_avg_pool(x)?;
        let flat = g.reshape(pooled, &[n, c])?;
        let h = self.fc1.forward(g, flat)?;
        let h = g.relu(h)?;
        let logits = self.fc2.forward(g, h)?;
        g.softmax(logits)
    }

    pub fn forward_with_attention(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var)> {
        let alpha = self.attention(g, x)?;
        let bank = g.param(&self.experts)?;
        let bias_bank = g.param(&self.expert_bias)?;
        let y = dynamic_conv(g, x, alpha, bank, bias_bank, Conv2dSpec::same(self.k))?;
        Ok((y, alpha))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(g, x)?.0)
    }
}

/// Convolution with the `alpha`-weighted mixture of an expert bank.
///
/// `alpha: [N, K]` (rows sum to one), `bank: [K, Cout, Cin, k, k]`,
/// `bias_bank: [K, Cout]`.
pub fn dynamic_conv(
    g: &mut Graph<'_>,
    x: Var,
    alpha: Var,
    bank: Var,
    bias_bank: Var,
    spec: Conv2dSpec,
) -> Result<Var> {
    if g.shape(bank).first() == Some(&0) {
        return Err(invalid("dynamic_conv", "zero experts"));
    }
    let w = g.mix_bank(alpha, bank)?;
    let b = g.mix_bank(alpha, bias_bank)?;
    g.conv2d_per_sample(x, w, Some(b), spec)
}
