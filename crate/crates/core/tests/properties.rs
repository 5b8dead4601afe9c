use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdd_core::cfdl::{difference_map, reconstruction_loss};
use sdd_core::datasets::{gaussian_blur, Image, Label};
use sdd_core::enhancer::{adaptive_weight, sigmoid};
use sdd_core::evalkit::{accuracy_breakdown, auroc, average_precision};
use sdd_core::nn::{attend, Init};
use sdd_core::sts::{build_token_bank, js_divergence, normalize, StsConfig, TokenBank};
use sdd_core::training::total_loss_value;

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<Label>)> {
    prop::collection::vec((0u8..20, any::<bool>()), 2..60).prop_filter_map("both classes", |v| {
        let labels: Vec<Label> = v.iter().map(|(_, f)| if *f { Label::Fake } else { Label::Real }).collect();
        let both = labels.contains(&Label::Fake) && labels.contains(&Label::Real);
        both.then(|| (v.iter().map(|(s, _)| *s as f64 / 19.0).collect(), labels))
    })
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-9).then(|| v.iter().map(|x| x / s).collect())
    })
}

fn tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Init::new(&mut rng, DType::F64, &Device::Cpu).normal(shape, 2.0).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_lie_in_the_unit_interval((scores, labels) in scored()) {
        let ap = average_precision(&scores, &labels).unwrap();
        let au = auroc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert!((0.0..=1.0).contains(&au));
    }

    #[test]
    fn auroc_flips_under_score_negation((scores, labels) in scored()) {
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = auroc(&scores, &labels).unwrap();
        let b = auroc(&neg, &labels).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranking_metrics_ignore_monotone_rescaling((scores, labels) in scored()) {
        let scaled: Vec<f64> = scores.iter().map(|s| 4.0 * s - 1.0).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&scaled, &labels).unwrap());
        prop_assert_eq!(average_precision(&scores, &labels).unwrap(), average_precision(&scaled, &labels).unwrap());
    }

    #[test]
    fn accuracy_is_prevalence_weighted((scores, labels) in scored(), t in 0.0f64..1.0) {
        let b = accuracy_breakdown(&scores, &labels, t).unwrap();
        let n = (b.n_real + b.n_fake) as f64;
        let weighted = (b.racc * b.n_real as f64 + b.facc * b.n_fake as f64) / n;
        prop_assert!((b.acc - weighted).abs() < 1e-12);
    }

    #[test]
    fn js_is_bounded_and_symmetric(p in distribution(12), q in distribution(12)) {
        let a = js_divergence(&p, &q);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - js_divergence(&q, &p)).abs() < 1e-12);
        prop_assert!(js_divergence(&p, &p).abs() < 1e-12);
    }

    #[test]
    fn normalized_tokens_are_distributions(tok in prop::collection::vec(-30.0f32..30.0, 1..40)) {
        let p = normalize(&tok);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bank_survives_a_byte_round_trip(seed in any::<u64>(), rows in 8usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens: Vec<f32> = (0..rows * 6).map(|_| rand::Rng::random_range(&mut rng, -2.0f32..2.0)).collect();
        let bank = build_token_bank(&tokens, 6, &StsConfig { delta: 0.05, seed, ..Default::default() }).unwrap();
        let back = TokenBank::from_bytes(&bank.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.digest().unwrap(), bank.digest().unwrap());
        prop_assert!(bank.len() <= 20);
    }

    #[test]
    fn attention_rows_are_stochastic(seed in any::<u64>(), tq in 1usize..6, tk in 1usize..9) {
        let q = tensor(seed, &[2, 3, tq, 4]);
        let k = tensor(seed ^ 1, &[2, 3, tk, 4]);
        let v = tensor(seed ^ 2, &[2, 3, tk, 4]);
        let (out, probs) = attend(&q, &k, &v, 0.5).unwrap();
        prop_assert_eq!(out.dims(), &[2, 3, tq, 4]);
        for row in values(&probs.sum(3).unwrap()) {
            prop_assert!((row - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn difference_map_is_nonnegative_and_zero_on_identity(seed in any::<u64>()) {
        let a = tensor(seed, &[2, 5, 3]);
        let b = tensor(seed ^ 7, &[2, 5, 3]);
        let d = difference_map(&a, &b).unwrap();
        prop_assert_eq!(d.dims(), a.dims());
        prop_assert!(values(&d).iter().all(|v| *v >= 0.0));
        prop_assert!(values(&difference_map(&a, &a).unwrap()).iter().all(|v| *v == 0.0));
        let l = reconstruction_loss(&a, &b, &[false, false]).unwrap();
        prop_assert_eq!(l.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn adaptive_weight_lies_in_zero_one(seed in any::<u64>()) {
        let a = tensor(seed, &[1, 2, 3, 3]);
        let b = tensor(seed ^ 3, &[1, 2, 3, 3]);
        let w = values(&adaptive_weight(&a, &b, false).unwrap());
        prop_assert!(w.iter().all(|v| *v > 0.0 && *v <= 1.0));
        prop_assert!(values(&adaptive_weight(&a, &a, true).unwrap()).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn total_loss_is_linear(bce in 0.0f64..5.0, tri in 0.0f64..5.0, rec in 0.0f64..5.0, l1 in 0.0f64..2.0, l2 in 0.0f64..2.0) {
        let t = total_loss_value(bce, tri, rec, l1, l2);
        prop_assert!((t - (bce + l1 * tri + l2 * rec)).abs() < 1e-12);
        prop_assert_eq!(total_loss_value(bce, tri, rec, 0.0, 0.0), bce);
    }

    #[test]
    fn sigmoid_is_a_probability(x in -800.0f64..800.0) {
        let s = sigmoid(x);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s + sigmoid(-x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_keeps_the_pixel_range(seed in any::<u64>(), sigma in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..3 * 12 * 10).map(|_| rand::Rng::random_range(&mut rng, 0.0f32..1.0)).collect();
        let img = Image::new(12, 10, data).unwrap();
        let out = gaussian_blur(&img, sigma);
        prop_assert_eq!((out.width, out.height), (12, 10));
        prop_assert!(out.data.iter().all(|v| (-1e-6..=1.0 + 1e-6).contains(v)));
        if sigma == 0.0 {
            prop_assert_eq!(&out.data, &img.data);
        }
    }
}
