//! Argument handling and subcommand bodies for the `sarfah` binary.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sarfah_core::metrics::{MetricReport, Region};
use sarfah_core::model::{param_count, HFDE_NAMES, SHARED_HFDE};
use sarfah_core::pipeline::{self, parse_kv, TrainConfig};
use sarfah_core::speckle::{fit_gamma, fit_ggd, synthesize_speckle, verify_cascade_law_with, Looks, CascadeLawConfig};
use sarfah_core::{dwt2_haar, CoreError, GammaParams, Image, Model};
use sarfah_tensor::TensorError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USER: u8 = 1;
pub const EXIT_INTERNAL: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "sarfah", version, about = "Frequency-adaptive SAR despeckling toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Multiply a clean image by Gamma speckle, or write synthetic clean scenes.
    Synthesize(SynthesizeArgs),
    /// Fit a Gamma or generalized Gaussian law to samples.
    FitDist(FitDistArgs),
    /// Check the predicted sub-band statistics of Haar-analyzed Gamma fields.
    CascadeCheck(CascadeArgs),
    /// Train a model on a directory of clean grayscale images.
    Train(TrainArgs),
    /// Despeckle one image with a trained checkpoint.
    Despeckle(DespeckleArgs),
    /// Compute quality metrics for a despeckled image.
    Evaluate(EvaluateArgs),
    /// Print trainable parameter counts for a model configuration.
    ParamCount(ParamCountArgs),
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    /// Clean 8-bit grayscale image to speckle.
    #[arg(long, conflicts_with = "scenes")]
    pub input: Option<PathBuf>,
    /// Output path of the speckled image (PGM).
    #[arg(long, requires = "input")]
    pub output: Option<PathBuf>,
    /// Number of synthetic clean scenes to write instead.
    #[arg(long, requires = "out_dir")]
    pub scenes: Option<usize>,
    /// Side of each synthetic scene.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Directory receiving synthetic scenes.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub looks: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Dist {
    Gamma,
    Ggd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Band {
    Ll,
    Lh,
    Hl,
    Hh,
}

#[derive(Debug, Args)]
pub struct FitDistArgs {
    /// Whitespace-separated numbers, or a PGM/PNG image whose pixels are used.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub dist: Dist,
    /// Fit one Haar sub-band of an image input instead of its pixels.
    #[arg(long, value_enum)]
    pub band: Option<Band>,
}

#[derive(Debug, Args)]
pub struct CascadeArgs {
    /// Gamma shape `a`.
    #[arg(long)]
    pub shape: f64,
    /// Gamma scale `b`.
    #[arg(long)]
    pub scale: f64,
    /// Cascade depth `j`.
    #[arg(long)]
    pub level: usize,
    /// Side of each field (a power of two).
    #[arg(long, default_value_t = 1024)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.02)]
    pub rel_tol: f64,
    #[arg(long, default_value_t = 0.02)]
    pub skew_tol: f64,
}

/// Model flags shared by `train` and `param-count`; each overrides the
/// config file.
#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    /// Flat `key=value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub ode_steps: Option<usize>,
    #[arg(long)]
    pub ode_horizon: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub ode_enabled: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub shared_hfde: Option<bool>,
    /// none, encoder, decoder or both.
    #[arg(long)]
    pub deforconv: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub dass_in_lfsp: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub dass_in_hfde: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of clean 8-bit grayscale PGM/PNG images.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory for checkpoints and the epoch log.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr_start: Option<f64>,
    #[arg(long)]
    pub lr_end: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub looks: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_patches: Option<usize>,
    /// Start from the full-size preset instead of the desk-scale defaults.
    #[arg(long)]
    pub full_scale: bool,
}

#[derive(Debug, Args)]
pub struct DespeckleArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the four Haar sub-bands of the result as CSV planes here.
    #[arg(long)]
    pub dump_subbands: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Clean reference; enables the full-reference metrics.
    #[arg(long)]
    pub clean: Option<PathBuf>,
    #[arg(long)]
    pub denoised: PathBuf,
    /// Speckled input; enables the no-reference metrics.
    #[arg(long)]
    pub noisy: Option<PathBuf>,
    /// Region `x0,y0,w,h` for ENL, MoI and EPD-ROA (default: whole image).
    #[arg(long)]
    pub region: Option<Region>,
}

#[derive(Debug, Args)]
pub struct ParamCountArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    /// Also list every ablation variant of the configuration.
    #[arg(long)]
    pub ablations: bool,
}

fn split_kv(s: &str) -> anyhow::Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CoreError::Config(format!("expected KEY=VALUE, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl ModelFlags {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut v = Vec::new();
        let mut push = |k: &str, val: Option<String>| {
            if let Some(val) = val {
                v.push((k.to_string(), val));
            }
        };
        push("channels", self.channels.map(|x| x.to_string()));
        push("ode_steps", self.ode_steps.map(|x| x.to_string()));
        push("ode_horizon", self.ode_horizon.map(|x| x.to_string()));
        push("ode_enabled", self.ode_enabled.map(|x| x.to_string()));
        push("shared_hfde", self.shared_hfde.map(|x| x.to_string()));
        push("deforconv", self.deforconv.clone());
        push("dass_in_lfsp", self.dass_in_lfsp.map(|x| x.to_string()));
        push("dass_in_hfde", self.dass_in_hfde.map(|x| x.to_string()));
        v
    }

    /// Defaults, then the config file, then flags, then `--set` pairs.
    fn resolve(&self, base: TrainConfig, flags: Vec<(String, String)>) -> anyhow::Result<TrainConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply(&parse_kv(&text)?)?;
        }
        cfg.apply(&flags)?;
        cfg.apply(&self.overrides())?;
        let sets = self.set.iter().map(|s| split_kv(s)).collect::<anyhow::Result<Vec<_>>>()?;
        cfg.apply(&sets)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_samples(path: &Path, band: Option<Band>) -> anyhow::Result<Vec<f64>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    if matches!(ext.as_deref(), Some("pgm" | "png")) {
        let img = pipeline::read_gray(path)?;
        let Some(band) = band else {
            return Ok(img.into_pixels());
        };
        let sb = dwt2_haar(&img)?;
        let plane = match band {
            Band::Ll => sb.ll,
            Band::Lh => sb.lh,
            Band::Hl => sb.hl,
            Band::Hh => sb.hh,
        };
        return Ok(plane.into_pixels());
    }
    if band.is_some() {
        bail!(CoreError::Config("--band needs an image input".into()));
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| anyhow::Error::new(CoreError::Config(format!("not a number: {t:?}"))))
        })
        .collect()
}

fn write_plane_csv(path: &Path, img: &Image) -> anyhow::Result<()> {
    let mut s = String::new();
    for y in 0..img.height() {
        let row: Vec<String> = (0..img.width()).map(|x| img.get(x, y).to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn ablation_variants(cfg: &TrainConfig) -> Vec<(String, sarfah_core::ModelConfig)> {
    use sarfah_core::hfde::DeformPlacement;
    let base = cfg.model;
    let mut v = vec![("full".to_string(), base)];
    v.push(("shared_hfde".into(), sarfah_core::ModelConfig { shared_hfde: true, ..base }));
    v.push(("no_ode".into(), sarfah_core::ModelConfig { ode_enabled: false, ..base }));
    let mut plain = base;
    plain.dass.plain_fusion = true;
    v.push(("plain_fusion".into(), plain));
    v.push(("no_dass_lfsp".into(), sarfah_core::ModelConfig { dass_in_lfsp: false, ..base }));
    v.push(("no_dass_hfde".into(), sarfah_core::ModelConfig { dass_in_hfde: false, ..base }));
    v.push((
        "no_dass".into(),
        sarfah_core::ModelConfig {
            dass_in_lfsp: false,
            dass_in_hfde: false,
            ..base
        },
    ));
    for p in [
        DeformPlacement::None,
        DeformPlacement::Encoder,
        DeformPlacement::Decoder,
        DeformPlacement::Both,
    ] {
        v.push((format!("deforconv_{p}"), sarfah_core::ModelConfig { deforconv: p, ..base }));
    }
    v
}

fn execute(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Synthesize(a) => {
            let looks = Looks::new(a.looks)?;
            if let (Some(n), Some(dir)) = (a.scenes, &a.out_dir) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                for i in 0..n {
                    let scene = pipeline::synthetic_scene(a.size, a.size, pipeline::mix_seed(&[a.seed, i as u64]));
                    let path = dir.join(format!("scene_{i:04}.pgm"));
                    pipeline::write_pgm(&path, &scene)?;
                    writeln!(out, "{}", path.display())?;
                }
                return Ok(());
            }
            let (Some(input), Some(output)) = (&a.input, &a.output) else {
                bail!(CoreError::Config("synthesize needs --input and --output, or --scenes and --out-dir".into()));
            };
            let clean = pipeline::read_gray(input)?;
            let noisy = synthesize_speckle(&clean, looks, a.seed)?;
            pipeline::write_pgm(output, &noisy)?;
            writeln!(out, "{}", output.display())?;
        }
        Command::FitDist(a) => {
            let samples = read_samples(&a.input, a.band)?;
            writeln!(out, "metric,value")?;
            writeln!(out, "samples,{}", samples.len())?;
            match a.dist {
                Dist::Gamma => {
                    let p = fit_gamma(&samples)?;
                    writeln!(out, "dist,gamma")?;
                    writeln!(out, "shape_a,{}", p.shape_a)?;
                    writeln!(out, "scale_b,{}", p.scale_b)?;
                }
                Dist::Ggd => {
                    let p = fit_ggd(&samples)?;
                    writeln!(out, "dist,ggd")?;
                    writeln!(out, "alpha,{}", p.alpha)?;
                    writeln!(out, "beta,{}", p.beta)?;
                }
            }
        }
        Command::CascadeCheck(a) => {
            let p = GammaParams::new(a.shape, a.scale)?;
            let cfg = CascadeLawConfig {
                rel_tol: a.rel_tol,
                skew_tol: a.skew_tol,
                ..CascadeLawConfig::default()
            };
            let report = verify_cascade_law_with(p, a.level, a.size, a.seed, &cfg)?;
            writeln!(out, "metric,value")?;
            writeln!(out, "shape_a,{}", a.shape)?;
            writeln!(out, "scale_b,{}", a.scale)?;
            for (k, v) in report.csv_rows() {
                writeln!(out, "{k},{v}")?;
            }
        }
        Command::Train(a) => {
            let mut flags = Vec::new();
            let mut push = |k: &str, v: Option<String>| {
                if let Some(v) = v {
                    flags.push((k.to_string(), v));
                }
            };
            push("epochs", a.epochs.map(|x| x.to_string()));
            push("lr_start", a.lr_start.map(|x| x.to_string()));
            push("lr_end", a.lr_end.map(|x| x.to_string()));
            push("batch_size", a.batch_size.map(|x| x.to_string()));
            push("patch_size", a.patch_size.map(|x| x.to_string()));
            push("looks", a.looks.map(|x| x.to_string()));
            push("seed", a.seed.map(|x| x.to_string()));
            push("max_patches", a.max_patches.map(|x| x.to_string()));
            let base = if a.full_scale {
                TrainConfig::full_scale()
            } else {
                TrainConfig::default()
            };
            let cfg = a.model.resolve(base, flags)?;
            let corpus = pipeline::ingest_corpus(&a.corpus)?;
            let outcome = pipeline::train(&cfg, &corpus.images, &a.out)?;
            writeln!(out, "{}", pipeline::train::LOG_HEADER)?;
            for e in &outcome.epochs {
                writeln!(out, "{}", e.csv())?;
            }
            writeln!(out, "best,{}", outcome.best.display())?;
            writeln!(out, "final,{}", outcome.last.display())?;
        }
        Command::Despeckle(a) => {
            let model = Model::load(&a.model)?;
            let noisy = pipeline::read_gray(&a.input)?;
            let (clean, bands) = pipeline::despeckle_subbands(&model, &noisy)?;
            pipeline::write_pgm(&a.output, &clean)?;
            if let Some(dir) = &a.dump_subbands {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                for (name, plane) in ["ll", "lh", "hl", "hh"].iter().zip(bands.bands()) {
                    write_plane_csv(&dir.join(format!("{name}.csv")), plane)?;
                }
            }
            writeln!(out, "{}", a.output.display())?;
        }
        Command::Evaluate(a) => {
            let denoised = pipeline::read_gray(&a.denoised)?;
            if a.clean.is_none() && a.noisy.is_none() {
                bail!(CoreError::Config("evaluate needs --clean and/or --noisy".into()));
            }
            let name = a
                .denoised
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let mut report = MetricReport::default();
            if let Some(p) = &a.clean {
                report
                    .entries
                    .extend(MetricReport::full_reference(&pipeline::read_gray(p)?, &denoised)?.entries);
            }
            if let Some(p) = &a.noisy {
                let noisy = pipeline::read_gray(p)?;
                let region = a.region.unwrap_or_else(|| Region::full(&denoised));
                report
                    .entries
                    .extend(MetricReport::no_reference(&denoised, &noisy, &region)?.entries);
            }
            writeln!(out, "image,metric,region,value")?;
            for row in report.csv_rows(&name) {
                writeln!(out, "{row}")?;
            }
        }
        Command::ParamCount(a) => {
            let cfg = a.model.resolve(TrainConfig::default(), Vec::new())?;
            writeln!(out, "metric,value")?;
            if a.ablations {
                for (name, m) in ablation_variants(&cfg) {
                    writeln!(out, "{name},{}", param_count(&m)?)?;
                }
            } else {
                let model = Model::init(&cfg.model, 0)?;
                writeln!(out, "param_count,{}", model.param_count())?;
                let subtrees: Vec<&str> = if cfg.model.shared_hfde {
                    vec![SHARED_HFDE]
                } else {
                    HFDE_NAMES.to_vec()
                };
                for prefix in ["lift_ll", "lift_lh", "lift_hl", "lift_hh", "lfsp", "cfre"]
                    .into_iter()
                    .chain(subtrees)
                {
                    writeln!(out, "{prefix},{}", model.params.trainable_count_under(prefix))?;
                }
            }
        }
    }
    Ok(())
}

/// Maps an error to the process exit code: 1 for bad input or usage, 2 for
/// failures inside the computation.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Domain(_)
                | CoreError::DegenerateFit(_)
                | CoreError::FitFailure(_)
                | CoreError::Io { .. }
                | CoreError::Decode { .. }
                | CoreError::EmptyCorpus(_)
                | CoreError::Config(_) => EXIT_USER,
                CoreError::Tensor(t) => tensor_code(t),
                CoreError::NonFinite(_) | CoreError::Diverged { .. } => EXIT_INTERNAL,
            };
        }
        if let Some(t) = cause.downcast_ref::<TensorError>() {
            return tensor_code(t);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_USER;
        }
    }
    EXIT_INTERNAL
}

fn tensor_code(t: &TensorError) -> u8 {
    match t {
        TensorError::Checkpoint(_) | TensorError::Io(_) => EXIT_USER,
        _ => EXIT_INTERNAL,
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the exit code. Results go to `out`, diagnostics to `err`.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{rendered}")
            } else {
                write!(err, "{rendered}")
            };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}
