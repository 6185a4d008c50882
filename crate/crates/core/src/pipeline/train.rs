//! Supervised training on clean patches with speckle synthesized on the fly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarfah_tensor::{Graph, Mode};

use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::metrics::psnr;
use crate::model::{images_to_tensor, tensor_to_images, Model};
use crate::speckle::{synthesize_speckle, Looks};

use super::config::TrainConfig;
use super::data::{make_patches, mix_seed};
use super::optim::{cosine_lr, grad_norm, Adam};

pub const LOG_HEADER: &str = "epoch,step,lr,train_l1,val_l1,val_psnr";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

/// Seed-stream tags separating the draws made from one run seed.
const TAG_SUBSET: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_SOLVER: u64 = 3;
const TAG_VALIDATION: u64 = u64::MAX;

/// Speckled version of training patch `index` in `epoch`.
pub fn noisy_patch(clean: &Image, looks: Looks, run_seed: u64, epoch: usize, index: usize) -> Result<Image> {
    synthesize_speckle(clean, looks, mix_seed(&[run_seed, epoch as u64, index as u64]))
}

/// Fixed speckled version of validation patch `index`.
pub fn validation_patch(clean: &Image, looks: Looks, run_seed: u64, index: usize) -> Result<Image> {
    synthesize_speckle(clean, looks, mix_seed(&[run_seed, TAG_VALIDATION, index as u64]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: usize,
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub train_l1: f64,
    pub val_l1: f64,
    pub val_psnr: f64,
}

impl EpochLog {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:e},{},{},{}",
            self.epoch, self.step, self.lr, self.train_l1, self.val_l1, self.val_psnr
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: PathBuf,
    pub last: PathBuf,
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimizer step in order.
    pub step_losses: Vec<f64>,
    pub train_patches: usize,
    pub val_patches: usize,
}

/// Validation L1 and mean PSNR of `model` on pre-speckled pairs.
pub fn evaluate_pairs(model: &Model, noisy: &[Image], clean: &[Image], batch: usize) -> Result<(f64, f64)> {
    if noisy.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut l1, mut db) = (0.0, 0.0);
    for (nb, cb) in noisy.chunks(batch.max(1)).zip(clean.chunks(batch.max(1))) {
        let mut g = Graph::with_params(&model.params, Mode::Eval);
        let x = g.input(images_to_tensor(nb)?);
        let y = model.net.forward(&mut g, x, 0)?;
        for (pred, c) in tensor_to_images(g.value(y))?.iter().zip(cb) {
            pred.check_finite()?;
            l1 += crate::model::loss_l1(pred, c)?;
            db += psnr(c, pred)?;
        }
    }
    let n = noisy.len() as f64;
    Ok((l1 / n, db / n))
}

/// Clean patches for a run, split into training and validation sets.
pub fn prepare_patches(cfg: &TrainConfig, images: &[Image]) -> Result<(Vec<Image>, Vec<Image>)> {
    let mut patches = make_patches(images, cfg.patch_size, cfg.augment, cfg.seed)?;
    if patches.is_empty() {
        return Err(CoreError::EmptyCorpus(0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, TAG_SUBSET]));
    patches.shuffle(&mut rng);
    if cfg.max_patches > 0 {
        patches.truncate(cfg.max_patches);
    }
    let n_val = if patches.len() < 2 {
        0
    } else {
        ((patches.len() as f64 * cfg.val_fraction).round() as usize).clamp(usize::from(cfg.val_fraction > 0.0), patches.len() - 1)
    };
    let val = patches.split_off(patches.len() - n_val);
    Ok((patches, val))
}

fn write_line(file: &mut fs::File, path: &Path, line: &str) -> Result<()> {
    writeln!(file, "{line}").map_err(|source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `divergence.txt` to `out_dir` and builds the matching error.
fn diverged(out_dir: &Path, epoch: usize, step: usize, lr: f64, grad_norm: f64, loss: f64) -> CoreError {
    let diag = out_dir.join("divergence.txt");
    let dump = format!("step={step}\nepoch={epoch}\nlr={lr:e}\ngrad_norm={grad_norm:e}\nloss={loss}\n");
    if let Err(e) = fs::write(&diag, dump) {
        log::error!("could not write {}: {e}", diag.display());
    }
    CoreError::Diverged {
        step,
        lr,
        grad_norm,
        loss,
    }
}

/// Trains a fresh model on patches of `images`, writing checkpoints and the
/// epoch log to `out_dir`.
pub fn train(cfg: &TrainConfig, images: &[Image], out_dir: &Path) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.model.train_size = cfg.patch_size;
    cfg.validate()?;
    let looks = Looks::new(cfg.looks)?;
    fs::create_dir_all(out_dir).map_err(|source| CoreError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log_file = fs::File::create(&log_path).map_err(|source| CoreError::Io {
        path: log_path.clone(),
        source,
    })?;
    write_line(&mut log_file, &log_path, LOG_HEADER)?;

    let (train_set, val_set) = prepare_patches(&cfg, images)?;
    let val_noisy = val_set
        .iter()
        .enumerate()
        .map(|(i, p)| validation_patch(p, looks, cfg.seed, i))
        .collect::<Result<Vec<_>>>()?;
    log::info!(
        "training on {} patches, validating on {}",
        train_set.len(),
        val_set.len()
    );

    let mut model = Model::init(&cfg.model, cfg.seed)?;
    let mut adam = Adam::default();
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let extra = cfg.header();
    let best = out_dir.join(BEST_CHECKPOINT);
    let last = out_dir.join(FINAL_CHECKPOINT);
    let mut best_val = f64::INFINITY;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut step = 0;
    let mut last_gn = 0.0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, TAG_SHUFFLE, epoch as u64])));
        let mut epoch_loss = 0.0;
        let mut lr = cfg.lr_start;
        for batch in order.chunks(cfg.batch_size) {
            lr = cosine_lr(step, total_steps, cfg.lr_start, cfg.lr_end);
            let clean: Vec<Image> = batch.iter().map(|&i| train_set[i].clone()).collect();
            let noisy = batch
                .iter()
                .map(|&i| noisy_patch(&train_set[i], looks, cfg.seed, epoch, i))
                .collect::<Result<Vec<_>>>()?;

            let (loss, grads, stats) = {
                let mut g = Graph::with_params(&model.params, Mode::Train);
                let x = g.input(images_to_tensor(&noisy)?);
                let target = g.constant(images_to_tensor(&clean)?);
                let y = model
                    .net
                    .forward(&mut g, x, mix_seed(&[cfg.seed, TAG_SOLVER, step as u64]))?;
                let loss_var = g.l1_loss(y, target)?;
                let loss = g.value(loss_var).item();
                g.backward(loss_var)?;
                (loss, g.param_grads(), g.take_stat_updates())
            };
            let gn = grad_norm(&grads);
            last_gn = gn;
            if !loss.is_finite() || !gn.is_finite() {
                return Err(diverged(out_dir, epoch, step, lr, gn, loss));
            }
            adam.step(&mut model.params, &grads, lr)?;
            model.params.apply_stat_updates(&stats)?;
            log::debug!("epoch {epoch} step {step} loss {loss:.4} grad norm {gn:.3e}");
            step_losses.push(loss);
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }

        let (val_l1, val_psnr) = match evaluate_pairs(&model, &val_noisy, &val_set, cfg.batch_size) {
            Err(CoreError::NonFinite(_)) => return Err(diverged(out_dir, epoch, step, lr, last_gn, f64::NAN)),
            other => other?,
        };
        let entry = EpochLog {
            epoch,
            step,
            lr,
            train_l1: epoch_loss / train_set.len() as f64,
            val_l1,
            val_psnr,
        };
        log::info!("{}", entry.csv());
        write_line(&mut log_file, &log_path, &entry.csv())?;
        let score = if val_l1.is_nan() { entry.train_l1 } else { val_l1 };
        if score < best_val {
            best_val = score;
            model.save(&best, &extra)?;
        }
        epochs.push(entry);
    }
    model.save(&last, &extra)?;
    Ok(TrainOutcome {
        best,
        last,
        epochs,
        step_losses,
        train_patches: train_set.len(),
        val_patches: val_set.len(),
    })
}
