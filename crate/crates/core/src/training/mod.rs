//! Joint objective, optimization loop, augmentation and checkpoints.

mod checkpoint;
mod config;
mod optimizer;

use std::io::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{sidecar_path, Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT};
pub use config::TrainConfig;
pub use optimizer::{Adam, AdamConfig};

use crate::backbone::{FrozenBackbone, ImageBatch};
use crate::cfdl::scalar_f64;
use crate::datasets::{gaussian_blur, jpeg_roundtrip, Image, Label, Sample};
use crate::enhancer::triplet_loss;
use crate::error::{config_err, Result, SddError};
use crate::evalkit::{Scorer, ScoredSample, EvalReport};
use crate::model::SddModel;
use crate::nn::abs_zero_subgradient;
use crate::sts::{build_token_bank, random_token_bank, TokenBank};

/// `L = L_bce + λ1·L_tri + λ2·L_r` on host values.
pub fn total_loss_value(bce: f64, tri: f64, rec: f64, lambda1: f64, lambda2: f64) -> f64 {
    bce + lambda1 * tri + lambda2 * rec
}

/// Weighted sum of the three loss tensors. A non-finite component aborts
/// with the offending values in the message.
pub fn total_loss(bce: &Tensor, tri: &Tensor, rec: &Tensor, cfg: &TrainConfig) -> Result<(Tensor, [f64; 3])> {
    let parts = [scalar_f64(bce)?, scalar_f64(tri)?, scalar_f64(rec)?];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(SddError::Training(format!(
            "non-finite loss component: bce={} tri={} rec={}",
            parts[0], parts[1], parts[2]
        )));
    }
    let total = ((bce + (tri * cfg.lambda1)?)? + (rec * cfg.lambda2)?)?;
    Ok((total, parts))
}

/// Mean binary cross-entropy on logits (fake = 1).
pub fn bce_with_logits(logits: &Tensor, labels: &[Label]) -> Result<Tensor> {
    let y: Vec<f64> = labels.iter().map(|l| l.target()).collect();
    let y = Tensor::from_vec(y, labels.len(), logits.device())?.to_dtype(logits.dtype())?;
    let softplus = (logits.relu()? + (abs_zero_subgradient(logits)?.neg()?.exp()? + 1.0)?.log()?)?;
    Ok((softplus - logits.mul(&y)?)?.mean_all()?)
}

/// Blur and JPEG, each applied independently with `augment_prob`.
pub fn augment(image: &Image, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Image> {
    let mut out = image.clone();
    if rng.random::<f64>() < cfg.augment_prob {
        let sigma = rng.random_range(0.0..=cfg.blur_sigma_max);
        out = gaussian_blur(&out, sigma);
    }
    if rng.random::<f64>() < cfg.augment_prob {
        let q = rng.random_range(cfg.jpeg_quality_min..=100);
        out = jpeg_roundtrip(&out, q)?;
    }
    Ok(out)
}

/// Builds the token bank from frozen-encoder patch tokens of the real
/// training images. With `use_sts = false` the bank is a uniform draw of
/// the same size as the stratified one.
pub fn build_bank(frozen: &FrozenBackbone, train: &[Sample], cfg: &TrainConfig) -> Result<TokenBank> {
    let mut real: Vec<&Image> = train.iter().filter(|s| !s.label.is_fake()).map(|s| &s.image).collect();
    if real.is_empty() {
        return Err(config_err("training data holds no real samples"));
    }
    if let Some(n) = cfg.bank_images {
        real.truncate(n);
    }
    let d = frozen.config().embed_dim;
    let mut tokens = Vec::with_capacity(real.len() * frozen.config().num_tokens() * d);
    for chunk in real.chunks(64) {
        let batch = ImageBatch::from_images(chunk, frozen.device(), frozen.dtype())?;
        for f in frozen.encode(&batch)? {
            tokens.extend_from_slice(&f.patches);
        }
    }
    let bank = build_token_bank(&tokens, d, &cfg.sts())?;
    if cfg.use_sts {
        Ok(bank)
    } else {
        random_token_bank(&tokens, d, bank.len(), cfg.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub bce: f64,
    pub tri: f64,
    pub rec: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Default)]
pub struct TrainOptions {
    /// JSON-lines step log.
    pub log_path: Option<PathBuf>,
    /// Where the best checkpoint is written after every improving epoch.
    pub checkpoint_path: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Allow resuming against a different bank.
    pub force: bool,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: SddModel,
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Mean accuracy over generators.
pub fn mean_accuracy(model: &SddModel, samples: &[Sample]) -> Result<f64> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let scores = model.score_images(&images)?;
    let mut by_gen: std::collections::BTreeMap<&str, (usize, usize)> = Default::default();
    for (s, score) in samples.iter().zip(scores) {
        let e = by_gen.entry(s.generator.as_str()).or_default();
        e.1 += 1;
        if (score >= crate::evalkit::THRESHOLD) == s.label.is_fake() {
            e.0 += 1;
        }
    }
    Ok(by_gen.values().map(|(ok, n)| *ok as f64 / *n as f64).sum::<f64>() / by_gen.len() as f64)
}

/// Evaluation report of `model` on `samples`.
pub fn report(model: &SddModel, samples: &[Sample]) -> Result<EvalReport> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let scores = model.score_images(&images)?;
    let scored: Vec<ScoredSample> = samples
        .iter()
        .zip(scores)
        .map(|(s, score)| ScoredSample {
            score,
            label: s.label,
            generator: s.generator.clone(),
            perturb: None,
        })
        .collect();
    EvalReport::from_scored(&scored, &model.config_digest()?)
}

fn item_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64 + 1) << 32) | index as u64);
    rng
}

/// Trains adapters, reconstruction blocks, enhancer and head on `train`,
/// early-stopping on mean accuracy over `val` (when non-empty). The
/// returned model holds the best-validation parameters.
pub fn train(
    cfg: &TrainConfig,
    frozen: Arc<FrozenBackbone>,
    bank: &TokenBank,
    train: &[Sample],
    val: &[Sample],
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !train.iter().any(|s| !s.label.is_fake()) {
        return Err(config_err("training data holds no real samples"));
    }
    let bank_digest = bank.digest()?;
    let checksum_before = frozen.checksum()?;
    let model = SddModel::new(cfg.model_config(), frozen.clone(), bank, cfg.seed)?;
    let (mut adam, start_epoch) = match &opts.resume {
        Some(ck) => {
            ck.check_compat(cfg, &bank_digest, opts.force)?;
            ck.apply(&model)?;
            let mut a = ck.optimizer()?;
            a.lr = cfg.lr;
            a.config = cfg.adam;
            (a, ck.meta.epoch)
        }
        None => (Adam::new(cfg.lr, cfg.adam)?, 0),
    };
    let mut log_file = match &opts.log_path {
        Some(p) => Some(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(|e| SddError::io(p, e))?,
        )),
        None => None,
    };

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best = Checkpoint::capture(&model, &adam, start_epoch, f64::NEG_INFINITY, cfg, &bank_digest)?;
    let mut best_epoch = start_epoch;
    let mut stale = 0;
    let mut budget_left = opts.max_steps;

    for epoch in start_epoch..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut n_steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if budget_left == Some(0) {
                break;
            }
            let images: Vec<Image> = chunk
                .iter()
                .map(|&i| augment(&train[i].image, cfg, &mut item_rng(cfg.seed, epoch, i)))
                .collect::<Result<_>>()?;
            let labels: Vec<Label> = chunk.iter().map(|&i| train[i].label).collect();
            let refs: Vec<&Image> = images.iter().collect();
            let batch = ImageBatch::from_images(&refs, model.device(), model.dtype())?;
            let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            drop_rng.set_stream((1 << 63) | adam.step);
            let out = model.forward(&batch.pixels, Some(&mut drop_rng))?;
            let bce = bce_with_logits(&out.logits, &labels)?;
            let tri = match &out.pyramid {
                Some(p) => triplet_loss(&p.pooled, &labels, cfg.margin)?,
                None => Tensor::zeros((), model.dtype(), model.device())?,
            };
            let real_mask: Vec<bool> = labels.iter().map(|l| !l.is_fake()).collect();
            let rec = model.cfdl.loss(&out.rec, &out.v_h, &real_mask)?;
            let (total, [b, t, r]) = total_loss(&bce, &tri, &rec, cfg)?;
            let grads = total.backward()?;
            adam.step(model.params(), &grads)?;
            let entry = StepLog {
                epoch,
                step: adam.step,
                bce: b,
                tri: t,
                rec: r,
                total: scalar_f64(&total)?,
                lr: adam.lr,
            };
            if let Some(f) = log_file.as_mut() {
                serde_json::to_writer(&mut *f, &entry)?;
                f.write_all(b"\n").map_err(|e| SddError::io("<train log>", e))?;
            }
            loss_sum += entry.total;
            n_steps += 1;
            steps.push(entry);
            if let Some(b) = budget_left.as_mut() {
                *b -= 1;
            }
        }
        let val_acc = if val.is_empty() {
            None
        } else {
            Some(mean_accuracy(&model, val)?)
        };
        let mean_loss = loss_sum / n_steps.max(1) as f64;
        log::info!("epoch {epoch}: loss {mean_loss:.4} val acc {val_acc:?}");
        epochs.push(EpochLog {
            epoch,
            mean_loss,
            val_acc,
        });
        // Without validation data the latest epoch is the one kept.
        let metric = val_acc.unwrap_or(epoch as f64);
        if metric > best.meta.val_metric {
            best = Checkpoint::capture(&model, &adam, epoch + 1, metric, cfg, &bank_digest)?;
            best_epoch = epoch + 1;
            stale = 0;
            if let Some(p) = &opts.checkpoint_path {
                best.save(p)?;
            }
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
        if budget_left == Some(0) {
            break;
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush().map_err(|e| SddError::io("<train log>", e))?;
    }
    best.apply(&model)?;
    if frozen.checksum()? != checksum_before {
        return Err(SddError::Training("frozen backbone weights changed".into()));
    }
    Ok(TrainOutcome {
        model,
        checkpoint: best,
        steps,
        epochs,
        best_epoch,
    })
}

/// Rebuilds a trained model from a checkpoint and its bank.
pub fn restore_model(ck: &Checkpoint, frozen: Arc<FrozenBackbone>, bank: &TokenBank, force: bool) -> Result<SddModel> {
    let cfg = &ck.meta.config;
    ck.check_compat(cfg, &bank.digest()?, force)?;
    if frozen.checksum()? != ck.meta.backbone_checksum {
        let msg = "backbone weights differ from the ones the checkpoint was trained on";
        if !force {
            return Err(SddError::CheckpointMismatch(msg.into()));
        }
        log::warn!("{msg} (forced)");
    }
    let model = SddModel::new(cfg.model_config(), frozen, bank, cfg.seed)?;
    ck.apply(&model)?;
    Ok(model)
}
