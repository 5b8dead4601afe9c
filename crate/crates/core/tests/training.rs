use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdd_core::backbone::{FrozenBackbone, ImageBatch};
use sdd_core::cfdl::{Cfdl, Orientation};
use sdd_core::datasets::{generate_toy_dataset, Image, Label, Sample, Split, ToyConfig};
use sdd_core::nn::{Init, ParamStore};
use sdd_core::sts::{build_token_bank, StsConfig};
use sdd_core::training::{
    build_bank, mean_accuracy, restore_model, sidecar_path, total_loss_value, train, Adam, AdamConfig, Checkpoint,
    TrainConfig, TrainOptions,
};
use sdd_core::SddError;

fn toy(n: usize, val: usize) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let ds = generate_toy_dataset(&ToyConfig {
        n_per_class: n,
        test_per_class: Some(4),
        val_per_class: val,
        ..Default::default()
    })
    .unwrap();
    (ds.samples(Split::Train), ds.samples(Split::Val), ds.samples(Split::Test))
}

fn frozen(cfg: &TrainConfig) -> Arc<FrozenBackbone> {
    Arc::new(FrozenBackbone::load(&cfg.backbone, &Device::Cpu, DType::F32).unwrap())
}

fn small_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        max_epochs: 2,
        delta: 1.0 / 200.0,
        ..Default::default()
    }
}

fn probe_logits(model: &sdd_core::model::SddModel, samples: &[Sample]) -> Vec<f64> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    model.logits(&images, 16).unwrap()
}

#[test]
fn checkpoint_round_trip_reproduces_logits() {
    let cfg = small_config();
    let (tr, va, te) = toy(20, 4);
    let fz = frozen(&cfg);
    let bank = build_bank(&fz, &tr, &cfg).unwrap();
    let before = fz.checksum().unwrap();
    let out = train(&cfg, fz.clone(), &bank, &tr, &va, TrainOptions::default()).unwrap();
    assert_eq!(fz.checksum().unwrap(), before);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.checkpoint.save(&path).unwrap();
    assert!(sidecar_path(&path).is_file());
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.meta, out.checkpoint.meta);
    let restored = restore_model(&loaded, fz.clone(), &bank, false).unwrap();
    let a = probe_logits(&out.model, &te);
    let b = probe_logits(&restored, &te);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

    // A different bank is refused unless forced.
    let other = build_bank(&fz, &tr, &TrainConfig { delta: 1.0 / 50.0, ..cfg.clone() }).unwrap();
    assert!(matches!(restore_model(&loaded, fz.clone(), &other, false), Err(SddError::CheckpointMismatch(_))));
    assert!(restore_model(&loaded, fz, &other, true).is_ok());
}

#[test]
fn resume_continues_the_epoch_counter() {
    let cfg = TrainConfig {
        max_epochs: 1,
        ..small_config()
    };
    let (tr, _, _) = toy(12, 0);
    let fz = frozen(&cfg);
    let bank = build_bank(&fz, &tr, &cfg).unwrap();
    let first = train(&cfg, fz.clone(), &bank, &tr, &[], TrainOptions::default()).unwrap();
    assert_eq!(first.checkpoint.meta.epoch, 1);
    let cfg3 = TrainConfig { max_epochs: 3, ..cfg };
    let opts = TrainOptions {
        resume: Some(first.checkpoint.clone()),
        ..Default::default()
    };
    let second = train(&cfg3, fz, &bank, &tr, &[], opts).unwrap();
    let epochs: Vec<usize> = second.epochs.iter().map(|e| e.epoch).collect();
    assert_eq!(epochs, vec![1, 2]);
    assert_eq!(second.checkpoint.meta.epoch, 3);
    assert!(second.checkpoint.meta.adam_step > first.checkpoint.meta.adam_step);
}

#[test]
fn early_stopping_keeps_the_best_validation_epoch() {
    let cfg = TrainConfig {
        max_epochs: 4,
        early_stop_patience: 2,
        ..small_config()
    };
    let (tr, va, _) = toy(24, 8);
    let fz = frozen(&cfg);
    let bank = build_bank(&fz, &tr, &cfg).unwrap();
    let out = train(&cfg, fz, &bank, &tr, &va, TrainOptions::default()).unwrap();
    let best = out.epochs.iter().filter_map(|e| e.val_acc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.checkpoint.meta.val_metric, best);
    assert_eq!(mean_accuracy(&out.model, &va).unwrap(), best);
}

#[test]
fn logged_total_is_the_weighted_sum_of_components() {
    let cfg = TrainConfig {
        max_epochs: 1,
        ..small_config()
    };
    let (tr, _, _) = toy(12, 0);
    let fz = frozen(&cfg);
    let bank = build_bank(&fz, &tr, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let opts = TrainOptions {
        log_path: Some(log.clone()),
        ..Default::default()
    };
    let out = train(&cfg, fz, &bank, &tr, &[], opts).unwrap();
    for s in &out.steps {
        let expected = total_loss_value(s.bce, s.tri, s.rec, cfg.lambda1, cfg.lambda2);
        assert!((s.total - expected).abs() <= 1e-6 * expected.abs().max(1.0), "{s:?}");
    }
    let text = std::fs::read_to_string(log).unwrap();
    assert_eq!(text.lines().count(), out.steps.len());
}

#[test]
fn training_without_real_samples_is_a_config_error() {
    let cfg = small_config();
    let (tr, _, _) = toy(12, 0);
    let fakes: Vec<Sample> = tr.into_iter().filter(|s| s.label == Label::Fake).collect();
    let fz = frozen(&cfg);
    assert!(matches!(build_bank(&fz, &fakes, &cfg), Err(SddError::Config(_))));
    let bank = build_token_bank(&[0.5f32; 64], 32, &StsConfig::default()).unwrap();
    let err = train(&cfg, fz, &bank, &fakes, &[], TrainOptions::default()).unwrap_err();
    assert!(matches!(err, SddError::Config(_)));
}

#[test]
fn single_batch_overfits() {
    let (tr, _, _) = toy(12, 0);
    let batch: Vec<Sample> = tr.into_iter().take(8).collect();
    assert!(batch.iter().any(|s| s.label == Label::Real) && batch.iter().any(|s| s.label == Label::Fake));
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        max_epochs: 300,
        early_stop_patience: 300,
        augment_prob: 0.0,
        delta: 1.0 / 200.0,
        ..Default::default()
    };
    let fz = frozen(&cfg);
    let bank = build_bank(&fz, &batch, &cfg).unwrap();
    let opts = TrainOptions {
        max_steps: Some(300),
        ..Default::default()
    };
    let out = train(&cfg, fz, &bank, &batch, &[], opts).unwrap();
    let best = out.steps.iter().map(|s| s.total).fold(f64::INFINITY, f64::min);
    assert!(out.steps.len() <= 300);
    assert!(best < 0.05, "lowest total loss {best}");
}

/// Patch tokens of one real toy image and a bank built from all real ones.
fn one_real_sample() -> (Tensor, Tensor) {
    let cfg = TrainConfig::default();
    let (tr, _, _) = toy(12, 0);
    let fz = frozen(&cfg);
    let real: Vec<&Image> = tr.iter().filter(|s| s.label == Label::Real).map(|s| &s.image).collect();
    let batch = ImageBatch::from_images(&real, &Device::Cpu, DType::F32).unwrap();
    let feats = fz.encode(&batch).unwrap();
    let tokens: Vec<f32> = feats.iter().flat_map(|f| f.patches.iter().copied()).collect();
    let bank = build_token_bank(&tokens, 32, &StsConfig { delta: 1.0 / 200.0, ..Default::default() }).unwrap();
    let v_h = Tensor::from_vec(feats[0].patches.clone(), (1, 64, 32), &Device::Cpu).unwrap();
    (v_h, bank.to_tensor(&Device::Cpu, DType::F32).unwrap())
}

/// Trains only the reconstruction blocks on one sample; returns the lowest
/// loss seen in 500 steps and the final per-token spread of `R3`.
fn overfit_reconstruction(residual: bool) -> (f64, f64) {
    let (v_h, bank) = one_real_sample();
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let mut init = Init::new(&mut rng, DType::F32, &Device::Cpu);
    let mut store = ParamStore::new();
    let cfdl = Cfdl::init(&mut init, &mut store, "cfdl", bank, 4, Orientation::TokensAsKv)
        .unwrap()
        .with_residual(residual);
    let mut adam = Adam::new(1e-2, AdamConfig::default()).unwrap();
    let mut best = f64::INFINITY;
    for _ in 0..500 {
        let rec = cfdl.forward(&v_h).unwrap();
        let loss = cfdl.loss(&rec, &v_h, &[true]).unwrap();
        best = best.min(loss.to_scalar::<f32>().unwrap() as f64);
        if best < 1e-3 {
            break;
        }
        adam.step(&store, &loss.backward().unwrap()).unwrap();
    }
    let r3 = cfdl.forward(&v_h).unwrap().r3;
    let spread = r3.broadcast_sub(&r3.mean_keepdim(1).unwrap()).unwrap().sqr().unwrap().mean_all().unwrap();
    (best, spread.to_scalar::<f32>().unwrap() as f64)
}

#[test]
fn residual_reconstruction_overfits_one_real_sample() {
    let (best, _) = overfit_reconstruction(true);
    assert!(best < 1e-3, "lowest reconstruction loss {best}");
}

/// Without residuals the stacked attention blocks lose token identity: `R3`
/// rows coincide and the reconstruction settles on the per-dimension token
/// mean, whose error is the variance of `V_H` around that mean.
#[test]
fn plain_reconstruction_collapses_to_the_token_mean() {
    let (v_h, _) = one_real_sample();
    let centred = v_h.broadcast_sub(&v_h.mean_keepdim(1).unwrap()).unwrap();
    let floor = centred.sqr().unwrap().mean_all().unwrap().to_scalar::<f32>().unwrap() as f64;
    let (best, spread) = overfit_reconstruction(false);
    eprintln!("plain reconstruction: lowest loss {best:.6}, token-mean floor {floor:.6}, R3 spread {spread:.3e}");
    assert!(spread < 1e-6, "R3 spread {spread}");
    assert!((best - floor).abs() < 1e-3 * floor, "lowest {best} vs floor {floor}");
}
