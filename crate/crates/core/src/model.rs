//! End-to-end network: Haar split, per-band lift, low-frequency ODE branch,
//! high-frequency U-nets, cross-band fusion and Haar synthesis.

use std::path::Path;

use sarfah_tensor::nn::{BatchNorm2d, Conv2d, ConvBnRelu};
use sarfah_tensor::{Checkpoint, Graph, Mode, ParamBuilder, ParamTree, Tensor, Var};

use crate::attention::DassConfig;
use crate::error::{domain, CoreError, Result};
use crate::hfde::{DeformPlacement, Hfde};
use crate::image::Image;
use crate::lfsp::{LfspField, LfspOde, OdeConfig};
use crate::wavelet::{dwt_op, idwt_op};

/// Intensity scale at the model boundary.
pub const INTENSITY_SCALE: f64 = 255.0;

/// Image sides the network accepts: one Haar split, then two 2x poolings in
/// the high-frequency branch.
pub const SIDE_MULTIPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub ode: OdeConfig,
    /// Integrate the low-frequency field; when off the field is applied once.
    pub ode_enabled: bool,
    pub shared_hfde: bool,
    pub deforconv: DeformPlacement,
    pub dass_in_lfsp: bool,
    pub dass_in_hfde: bool,
    pub dass: DassConfig,
    /// Side of the square training patches; sizes the positional embeddings.
    pub train_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            ode: OdeConfig::default(),
            ode_enabled: true,
            shared_hfde: false,
            deforconv: DeformPlacement::default(),
            dass_in_lfsp: true,
            dass_in_hfde: true,
            dass: DassConfig::default(),
            train_size: 64,
        }
    }
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CoreError::Config(format!("invalid value {value:?} for `{key}`")))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || !self.channels.is_multiple_of(2) {
            return Err(CoreError::Config(format!(
                "channels must be even and at least 2, got {}",
                self.channels
            )));
        }
        if self.train_size == 0 || !self.train_size.is_multiple_of(SIDE_MULTIPLE) {
            return Err(CoreError::Config(format!(
                "train_size must be a positive multiple of {SIDE_MULTIPLE}, got {}",
                self.train_size
            )));
        }
        if self.dass.experts == 0 || self.dass.state_dim == 0 {
            return Err(CoreError::Config("dass_experts and dass_state_dim must be positive".into()));
        }
        self.ode.validate()
    }

    /// Sets one field from a `key=value` pair. Returns `Ok(false)` for keys
    /// that do not belong to the model.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "channels" => self.channels = parse_value(key, value)?,
            "ode_steps" => self.ode.steps = parse_value(key, value)?,
            "ode_horizon" => self.ode.horizon = parse_value(key, value)?,
            "ode_randomized" => self.ode.randomized = parse_value(key, value)?,
            "ode_enabled" => self.ode_enabled = parse_value(key, value)?,
            "shared_hfde" => self.shared_hfde = parse_value(key, value)?,
            "deforconv" => self.deforconv = value.trim().parse()?,
            "dass_in_lfsp" => self.dass_in_lfsp = parse_value(key, value)?,
            "dass_in_hfde" => self.dass_in_hfde = parse_value(key, value)?,
            "dass_state_dim" => self.dass.state_dim = parse_value(key, value)?,
            "dass_experts" => self.dass.experts = parse_value(key, value)?,
            "dass_reduction" => self.dass.reduction = parse_value(key, value)?,
            "dass_plain_fusion" => self.dass.plain_fusion = parse_value(key, value)?,
            "train_size" => self.train_size = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("channels", self.channels.to_string()),
            ("ode_steps", self.ode.steps.to_string()),
            ("ode_horizon", format!("{:?}", self.ode.horizon)),
            ("ode_randomized", self.ode.randomized.to_string()),
            ("ode_enabled", self.ode_enabled.to_string()),
            ("shared_hfde", self.shared_hfde.to_string()),
            ("deforconv", self.deforconv.to_string()),
            ("dass_in_lfsp", self.dass_in_lfsp.to_string()),
            ("dass_in_hfde", self.dass_in_hfde.to_string()),
            ("dass_state_dim", self.dass.state_dim.to_string()),
            ("dass_experts", self.dass.experts.to_string()),
            ("dass_reduction", self.dass.reduction.to_string()),
            ("dass_plain_fusion", self.dass.plain_fusion.to_string()),
            ("train_size", self.train_size.to_string()),
        ]
    }

    pub fn to_header(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Parses a checkpoint header. Unknown keys are ignored so headers can
    /// carry training metadata alongside the model fields.
    pub fn from_header(header: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in header.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("header line without `=`: {line:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Cross-band fusion: concatenated band features are mixed by a 1x1
/// convolution, refined by one residual block and projected to four
/// coefficient planes.
#[derive(Debug, Clone)]
pub struct Cfre {
    pub fuse: Conv2d,
    pub res1: ConvBnRelu,
    pub res2: Conv2d,
    pub res2_bn: BatchNorm2d,
    pub project: Conv2d,
}

impl Cfre {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Result<Self> {
        let wide = 4 * channels;
        pb.push(name);
        let out = Self {
            fuse: Conv2d::new(pb, "fuse", wide, wide, 1)?,
            res1: ConvBnRelu::new(pb, "res1", wide, wide, 3)?,
            res2: Conv2d::new(pb, "res2", wide, wide, 3)?,
            res2_bn: BatchNorm2d::new(pb, "res2_bn", wide)?,
            project: Conv2d::new(pb, "project", wide, 4, 1)?,
        };
        pb.pop();
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph<'_>, bands: &[Var; 4]) -> Result<Var> {
        let cat = g.concat_channels(bands)?;
        let x = self.fuse.forward(g, cat)?;
        let r = self.res1.forward(g, x)?;
        let r = self.res2.forward(g, r)?;
        let r = self.res2_bn.forward(g, r)?;
        let x = g.add(x, r)?;
        Ok(self.project.forward(g, x)?)
    }
}

/// Scales `[N, 1, H, W]` intensities to unit range, splits them into Haar
/// sub-bands `[N, 4, H/2, W/2]`, applies `inner` and synthesizes the result
/// back at the input scale.
pub fn wavelet_plumbing<F>(g: &mut Graph<'_>, x: Var, inner: F) -> Result<Var>
where
    F: FnOnce(&mut Graph<'_>, Var) -> Result<Var>,
{
    let (_, c, h, w) = g.value(x).dims4()?;
    if c != 1 {
        return Err(domain(format!("expected a single-channel batch, got {c} channels")));
    }
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(domain(format!("image sides must be divisible by 4, got {h}x{w}")));
    }
    let unit = g.scale(x, 1.0 / INTENSITY_SCALE)?;
    let bands = dwt_op(g, unit)?;
    let coeffs = inner(g, bands)?;
    if g.shape(coeffs) != g.shape(bands) {
        return Err(domain(format!(
            "band processor returned {:?} for {:?}",
            g.shape(coeffs),
            g.shape(bands)
        )));
    }
    let y = idwt_op(g, coeffs)?;
    Ok(g.scale(y, INTENSITY_SCALE)?)
}

#[derive(Debug, Clone)]
pub struct SarFah {
    pub cfg: ModelConfig,
    /// One 3x3 lift per band: LL, LH, HL, HH.
    pub lift: [Conv2d; 4],
    pub lfsp: LfspOde,
    /// One shared module or one per detail band (LH, HL, HH).
    pub hfde: Vec<Hfde>,
    pub cfre: Cfre,
}

pub const SHARED_HFDE: &str = "hfde_shared";
pub const HFDE_NAMES: [&str; 3] = ["hfde_lh", "hfde_hl", "hfde_hh"];

impl SarFah {
    pub fn new(cfg: &ModelConfig, tree: &mut ParamTree, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let band = (cfg.train_size / 2, cfg.train_size / 2);
        let mut pb = ParamBuilder::new(tree, seed);
        let lift = [
            Conv2d::new(&mut pb, "lift_ll", 1, c, 3)?,
            Conv2d::new(&mut pb, "lift_lh", 1, c, 3)?,
            Conv2d::new(&mut pb, "lift_hl", 1, c, 3)?,
            Conv2d::new(&mut pb, "lift_hh", 1, c, 3)?,
        ];
        let lfsp_dass = cfg.dass_in_lfsp.then_some(&cfg.dass);
        let lfsp = LfspOde {
            field: LfspField::new(&mut pb, "lfsp", c, band, lfsp_dass)?,
            ode: cfg.ode,
            integrate: cfg.ode_enabled,
        };
        let hfde_dass = cfg.dass_in_hfde.then_some(&cfg.dass);
        let names: &[&str] = if cfg.shared_hfde { &[SHARED_HFDE] } else { &HFDE_NAMES };
        let hfde = names
            .iter()
            .map(|name| Hfde::new(&mut pb, name, c, cfg.deforconv, band, hfde_dass))
            .collect::<Result<Vec<_>>>()?;
        let cfre = Cfre::new(&mut pb, "cfre", c)?;
        Ok(Self {
            cfg: *cfg,
            lift,
            lfsp,
            hfde,
            cfre,
        })
    }

    fn hfde_for(&self, band: usize) -> &Hfde {
        if self.hfde.len() == 1 {
            &self.hfde[0]
        } else {
            &self.hfde[band]
        }
    }

    /// Network body on unit-scale sub-bands `[N, 4, h, w]`.
    pub fn process_bands(&self, g: &mut Graph<'_>, bands: Var, seed: u64) -> Result<Var> {
        let mut feats = Vec::with_capacity(4);
        for (i, lift) in self.lift.iter().enumerate() {
            let plane = g.slice_channels(bands, i, 1)?;
            feats.push(lift.forward(g, plane)?);
        }
        let ll = self.lfsp.forward(g, feats[0], seed)?;
        let lh = self.hfde_for(0).forward(g, feats[1])?;
        let hl = self.hfde_for(1).forward(g, feats[2])?;
        let hh = self.hfde_for(2).forward(g, feats[3])?;
        self.cfre.forward(g, &[ll, lh, hl, hh])
    }

    /// `[N, 1, H, W]` speckled intensities in `[0, 255]` to estimates on the
    /// same scale; `H` and `W` must be multiples of [`SIDE_MULTIPLE`].
    /// `seed` drives the solver's time jitter in training mode.
    pub fn forward(&self, g: &mut Graph<'_>, noisy: Var, seed: u64) -> Result<Var> {
        let (_, _, h, w) = g.value(noisy).dims4()?;
        if h == 0 || w == 0 || h % SIDE_MULTIPLE != 0 || w % SIDE_MULTIPLE != 0 {
            return Err(domain(format!(
                "network input sides must be divisible by {SIDE_MULTIPLE}, got {h}x{w}"
            )));
        }
        wavelet_plumbing(g, noisy, |g, bands| self.process_bands(g, bands, seed))
    }
}

/// Mean absolute deviation between two images.
pub fn loss_l1(pred: &Image, clean: &Image) -> Result<f64> {
    if !pred.same_dims(clean) {
        return Err(domain(format!(
            "loss of {}x{} against {}x{}",
            pred.width(),
            pred.height(),
            clean.width(),
            clean.height()
        )));
    }
    let sum: f64 = pred
        .pixels()
        .iter()
        .zip(clean.pixels())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Stacks same-size images into a `[N, 1, H, W]` tensor.
pub fn images_to_tensor(images: &[Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| domain("empty image batch"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if !img.same_dims(first) {
            return Err(domain("images in a batch must share dimensions"));
        }
        data.extend_from_slice(img.pixels());
    }
    Ok(Tensor::from_vec(&[images.len(), 1, h, w], data)?)
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(domain(format!("expected one channel, got {c}")));
    }
    t.data()
        .chunks(h * w)
        .take(n)
        .map(|p| Image::new(w, h, p.to_vec()))
        .collect()
}

/// A network together with its parameter values.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: SarFah,
    pub params: ParamTree,
}

impl Model {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamTree::new();
        let net = SarFah::new(cfg, &mut params, seed)?;
        Ok(Self { net, params })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Eval-mode estimate for a batch of same-size images.
    pub fn predict(&self, noisy: &[Image]) -> Result<Vec<Image>> {
        let mut g = Graph::with_params(&self.params, Mode::Eval);
        let x = g.input(images_to_tensor(noisy)?);
        let y = self.net.forward(&mut g, x, 0)?;
        let out = tensor_to_images(g.value(y))?;
        for img in &out {
            img.check_finite()?;
        }
        Ok(out)
    }

    /// `extra` lines are appended to the configuration header.
    pub fn save(&self, path: &Path, extra: &str) -> Result<()> {
        let mut header = self.cfg().to_header();
        header.push_str(extra);
        Checkpoint::from_tree(&header, &self.params)
            .save(path)
            .map_err(|e| match e {
                sarfah_tensor::TensorError::Io(source) => CoreError::Io {
                    path: path.to_path_buf(),
                    source,
                },
                other => other.into(),
            })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path).map_err(|e| match e {
            sarfah_tensor::TensorError::Io(source) => CoreError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => other.into(),
        })?;
        let cfg = ModelConfig::from_header(&ckpt.header)?;
        let mut model = Self::init(&cfg, 0)?;
        ckpt.restore_into(&mut model.params)?;
        Ok(model)
    }
}

/// Trainable scalar count of the network built from `cfg`.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(Model::init(cfg, 0)?.param_count())
}
