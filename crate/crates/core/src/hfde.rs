//! High-frequency branch: an asymmetric U-shaped network with a dual-branch
//! bottleneck, deformable decoder stages and additive skips.
//!
//! Widths for input width `C` at resolution `h x w`:
//!
//! ```text
//! stem        C   -> C/2   h        (+ channel attention)   e0
//! enc1        C/2 -> C     h, pool  -> h/2                   e1
//! enc2        C   -> 2C    h/2, pool -> h/4                  e2
//! bottleneck  2C  -> 2C    conv, deformable conv, dual-branch d0
//! dec1        d0 + e2, up x2, 2C -> C                        d1
//! dec2        d1 + e1, up x2, C  -> C/2                      d2
//! head        d2 + e0, C/2 -> C -> C
//! ```

use std::fmt;
use std::str::FromStr;

use sarfah_tensor::nn::{BatchNorm2d, ConvBnRelu, DeformConv2d};
use sarfah_tensor::{Graph, ParamBuilder, Var};

use crate::attention::{ChannelAttention, Dass, DassConfig};
use crate::error::{domain, CoreError, Result};

/// Where the encoder/decoder stages use deformable convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeformPlacement {
    None,
    Encoder,
    #[default]
    Decoder,
    Both,
}

impl DeformPlacement {
    pub fn encoder(self) -> bool {
        matches!(self, DeformPlacement::Encoder | DeformPlacement::Both)
    }

    pub fn decoder(self) -> bool {
        matches!(self, DeformPlacement::Decoder | DeformPlacement::Both)
    }
}

impl fmt::Display for DeformPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeformPlacement::None => "none",
            DeformPlacement::Encoder => "encoder",
            DeformPlacement::Decoder => "decoder",
            DeformPlacement::Both => "both",
        })
    }
}

impl FromStr for DeformPlacement {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DeformPlacement::None),
            "encoder" => Ok(DeformPlacement::Encoder),
            "decoder" => Ok(DeformPlacement::Decoder),
            "both" => Ok(DeformPlacement::Both),
            other => Err(CoreError::Config(format!(
                "deformable placement must be none|encoder|decoder|both, got {other:?}"
            ))),
        }
    }
}

/// Deformable conv -> BN -> ReLU.
#[derive(Debug, Clone)]
pub struct DeformBnRelu {
    pub conv: DeformConv2d,
    pub bn: BatchNorm2d,
}

impl DeformBnRelu {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        pb.push(name);
        let out = Self {
            conv: DeformConv2d::new(pb, "conv", cin, cout, 3)?,
            bn: BatchNorm2d::new(pb, "bn", cout)?,
        };
        pb.pop();
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.relu(y)?)
    }
}

/// A 3x3 conv-BN-ReLU stage, plain or deformable.
#[derive(Debug, Clone)]
pub enum Stage {
    Plain(ConvBnRelu),
    Deform(DeformBnRelu),
}

impl Stage {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, deform: bool) -> Result<Self> {
        Ok(if deform {
            Stage::Deform(DeformBnRelu::new(pb, name, cin, cout)?)
        } else {
            Stage::Plain(ConvBnRelu::new(pb, name, cin, cout, 3)?)
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        match self {
            Stage::Plain(s) => Ok(s.forward(g, x)?),
            Stage::Deform(s) => s.forward(g, x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Hfde {
    pub stem: ConvBnRelu,
    pub stem_attention: ChannelAttention,
    pub enc1: Stage,
    pub enc2: Stage,
    pub bottleneck_conv: ConvBnRelu,
    pub bottleneck_deform: DeformBnRelu,
    pub bottleneck_dass: Option<Dass>,
    pub dec1: Stage,
    pub dec2: Stage,
    pub head1: ConvBnRelu,
    pub head2: ConvBnRelu,
    pub channels: usize,
}

/// Feature maps of one forward pass, for inspection in tests.
pub struct HfdeTrace {
    pub encoder: [Var; 3],
    pub decoder: [Var; 3],
    pub out: Var,
}

impl Hfde {
    /// `pos_hw` is the input resolution the module is trained at; the
    /// bottleneck runs at a quarter of it.
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        channels: usize,
        placement: DeformPlacement,
        pos_hw: (usize, usize),
        dass: Option<&DassConfig>,
    ) -> Result<Self> {
        let c = channels;
        if c < 2 || !c.is_multiple_of(2) {
            return Err(domain(format!("channel count must be even, got {c}")));
        }
        let half = c / 2;
        let reduction = dass.map_or(DassConfig::default().reduction, |d| d.reduction);
        pb.push(name);
        let out = Self {
            stem: ConvBnRelu::new(pb, "stem", c, half, 3)?,
            stem_attention: ChannelAttention::new(pb, "stem_attention", half, reduction)?,
            enc1: Stage::new(pb, "enc1", half, c, placement.encoder())?,
            enc2: Stage::new(pb, "enc2", c, 2 * c, placement.encoder())?,
            bottleneck_conv: ConvBnRelu::new(pb, "bottleneck_conv", 2 * c, 2 * c, 3)?,
            bottleneck_deform: DeformBnRelu::new(pb, "bottleneck_deform", 2 * c, 2 * c)?,
            bottleneck_dass: match dass {
                Some(cfg) => Some(Dass::new(
                    pb,
                    "bottleneck_dass",
                    2 * c,
                    (pos_hw.0 / 4, pos_hw.1 / 4),
                    cfg,
                )?),
                None => None,
            },
            dec1: Stage::new(pb, "dec1", 2 * c, c, placement.decoder())?,
            dec2: Stage::new(pb, "dec2", c, half, placement.decoder())?,
            head1: ConvBnRelu::new(pb, "head1", half, c, 3)?,
            head2: ConvBnRelu::new(pb, "head2", c, c, 3)?,
            channels: c,
        };
        pb.pop();
        Ok(out)
    }

    pub fn forward_traced(&self, g: &mut Graph<'_>, f: Var) -> Result<HfdeTrace> {
        let (_, c, h, w) = g.value(f).dims4()?;
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(domain(format!("high-frequency branch needs sides divisible by 4, got {h}x{w}")));
        }
        if c != self.channels {
            return Err(domain(format!("expected {} channels, got {c}", self.channels)));
        }
        let e0 = self.stem.forward(g, f)?;
        let e0 = self.stem_attention.forward(g, e0)?;
        let e1 = self.enc1.forward(g, e0)?;
        let e1 = g.maxpool2d(e1, 2)?;
        let e2 = self.enc2.forward(g, e1)?;
        let e2 = g.maxpool2d(e2, 2)?;

        let mut d0 = self.bottleneck_conv.forward(g, e2)?;
        d0 = self.bottleneck_deform.forward(g, d0)?;
        if let Some(dass) = &self.bottleneck_dass {
            d0 = dass.forward(g, d0)?;
        }

        let s1 = g.add(d0, e2)?;
        let s1 = g.upsample2x(s1)?;
        let d1 = self.dec1.forward(g, s1)?;
        let s2 = g.add(d1, e1)?;
        let s2 = g.upsample2x(s2)?;
        let d2 = self.dec2.forward(g, s2)?;

        let s3 = g.add(d2, e0)?;
        let out = self.head1.forward(g, s3)?;
        let out = self.head2.forward(g, out)?;
        Ok(HfdeTrace {
            encoder: [e0, e1, e2],
            decoder: [d0, d1, d2],
            out,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, f: Var) -> Result<Var> {
        Ok(self.forward_traced(g, f)?.out)
    }
}
