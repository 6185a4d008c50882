//! Channel/spatial attention and the dual-branch block that fuses a local
//! attention branch with a global state-space branch.

use sarfah_tensor::nn::{BatchNorm2d, Conv2d, DynamicConv2d};
use sarfah_tensor::{Conv2dSpec, Graph, ParamBuilder, Var};

use crate::error::Result;
use crate::ssm::VssBlock;

/// `sigmoid(MLP(GAP(f)) + MLP(GMP(f)))` with a shared two-layer MLP, as a
/// `[N, C, 1, 1]` map.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl ChannelAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        pb.push(name);
        let out = Self {
            fc1: Conv2d::new(pb, "fc1", channels, hidden, 1)?,
            fc2: Conv2d::new(pb, "fc2", hidden, channels, 1)?,
        };
        pb.pop();
        Ok(out)
    }

    fn mlp(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h)?;
        Ok(self.fc2.forward(g, h)?)
    }

    pub fn weights(&self, g: &mut Graph<'_>, f: Var) -> Result<Var> {
        let avg = g.global_avg_pool(f)?;
        let max = g.global_max_pool(f)?;
        let a = self.mlp(g, avg)?;
        let m = self.mlp(g, max)?;
        let s = g.add(a, m)?;
        Ok(g.sigmoid(s)?)
    }

    pub fn forward(&self, g: &mut Graph<'_>, f: Var) -> Result<Var> {
        let w = self.weights(g, f)?;
        Ok(g.mul_bcast(f, w)?)
    }
}

/// `sigmoid(Conv7x7([mean_c(f), max_c(f)]))`, as a `[N, 1, H, W]` map.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(pb, name, 2, 1, 7)?,
        })
    }

    pub fn weights(&self, g: &mut Graph<'_>, f: Var) -> Result<Var> {
        let mean = g.channel_mean(f)?;
        let max = g.channel_max(f)?;
        let desc = g.concat_channels(&[mean, max])?;
        let s = self.conv.forward(g, desc)?;
        Ok(g.sigmoid(s)?)
    }
}

/// Channel attention followed by spatial attention, both multiplicative.
#[derive(Debug, Clone)]
pub struct Cbam {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

/// Output of [`Cbam::forward_with_maps`].
pub struct CbamMaps {
    pub out: Var,
    pub channel: Var,
    pub spatial: Var,
}

impl Cbam {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        pb.push(name);
        let out = Self {
            channel: ChannelAttention::new(pb, "channel", channels, reduction)?,
            spatial: SpatialAttention::new(pb, "spatial")?,
        };
        pb.pop();
        Ok(out)
    }

    pub fn forward_with_maps(&self, g: &mut Graph<'_>, f: Var) -> Result<CbamMaps> {
        let wc = self.channel.weights(g, f)?;
        let fc = g.mul_bcast(f, wc)?;
        let ws = self.spatial.weights(g, fc)?;
        let out = g.mul_bcast(fc, ws)?;
        Ok(CbamMaps {
            out,
            channel: wc,
            spatial: ws,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, f: Var) -> Result<Var> {
        Ok(self.forward_with_maps(g, f)?.out)
    }
}

/// Hyper-parameters shared by every dual-branch block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DassConfig {
    pub state_dim: usize,
    pub experts: usize,
    pub reduction: usize,
    /// Plain 1x1 convolution instead of the expert mixture.
    pub plain_fusion: bool,
}

impl Default for DassConfig {
    fn default() -> Self {
        Self {
            state_dim: 8,
            experts: 4,
            reduction: 16,
            plain_fusion: false,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Fusion {
    Dynamic(DynamicConv2d),
    Plain(Conv2d),
}

/// `ReLU(BN(Fuse1x1([cbam(f) || vss(f)])))`, mapping `C` to `C` channels.
#[derive(Debug, Clone)]
pub struct Dass {
    pub cbam: Cbam,
    pub vss: VssBlock,
    pub fusion: Fusion,
    pub bn: BatchNorm2d,
}

impl Dass {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        channels: usize,
        pos_hw: (usize, usize),
        cfg: &DassConfig,
    ) -> Result<Self> {
        let c = channels;
        pb.push(name);
        let cbam = Cbam::new(pb, "cbam", c, cfg.reduction)?;
        let vss = VssBlock::new(pb, "vss", c, cfg.state_dim, pos_hw)?;
        let fusion = if cfg.plain_fusion {
            Fusion::Plain(Conv2d::with_spec(pb, "fusion", 2 * c, c, 1, Conv2dSpec::default(), true)?)
        } else {
            Fusion::Dynamic(DynamicConv2d::new(pb, "fusion", 2 * c, c, 1, cfg.experts, cfg.reduction)?)
        };
        let bn = BatchNorm2d::new(pb, "bn", c)?;
        pb.pop();
        Ok(Self { cbam, vss, fusion, bn })
    }

    /// Output and, for the expert mixture, its `[N, K]` attention.
    pub fn forward_with_attention(&self, g: &mut Graph<'_>, f: Var) -> Result<(Var, Option<Var>)> {
        let local = self.cbam.forward(g, f)?;
        let global = self.vss.forward(g, f)?;
        let cat = g.concat_channels(&[local, global])?;
        let (y, alpha) = match &self.fusion {
            Fusion::Dynamic(d) => {
                let (y, a) = d.forward_with_attention(g, cat)?;
                (y, Some(a))
            }
            Fusion::Plain(c) => (c.forward(g, cat)?, None),
        };
        let y = self.bn.forward(g, y)?;
        Ok((g.relu(y)?, alpha))
    }

    pub fn forward(&self, g: &mut Graph<'_>, f: Var) -> Result<Var> {
        Ok(self.forward_with_attention(g, f)?.0)
    }
}
