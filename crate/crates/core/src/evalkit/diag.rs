//! Feature diagnostics: per-dimension class means and pairwise cosine
//! similarity histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Label;
use crate::error::{config_err, shape_err, Result};

pub const DEFAULT_PAIRS: usize = 5000;

/// One feature vector with its category and label.
#[derive(Debug, Clone)]
pub struct LabelledFeature {
    pub category: String,
    pub label: Label,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category: String,
    pub real_mean: Vec<f64>,
    pub fake_mean: Vec<f64>,
    /// Euclidean norm of `fake_mean − real_mean`.
    pub gap_norm: f64,
    pub n_real: usize,
    pub n_fake: usize,
}

/// Per-dimension means of real and fake features within each category.
/// Needs at least two (category, label) groups; categories missing one
/// class are skipped.
pub fn embedding_stats(features: &[LabelledFeature]) -> Result<Vec<CategoryStats>> {
    let dim = features.first().map(|f| f.values.len()).unwrap_or(0);
    if features.iter().any(|f| f.values.len() != dim) {
        return Err(shape_err("feature vectors differ in length"));
    }
    let mut groups: BTreeMap<(&str, Label), (Vec<f64>, usize)> = BTreeMap::new();
    for f in features {
        let g = groups
            .entry((f.category.as_str(), f.label))
            .or_insert_with(|| (vec![0.0; dim], 0));
        for (s, v) in g.0.iter_mut().zip(&f.values) {
            *s += *v as f64;
        }
        g.1 += 1;
    }
    if groups.len() < 2 {
        return Err(config_err("feature statistics need at least two groups"));
    }
    let mut out = Vec::new();
    let categories: Vec<&str> = groups.keys().map(|(c, _)| *c).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    for c in categories {
        let (Some(r), Some(f)) = (groups.get(&(c, Label::Real)), groups.get(&(c, Label::Fake))) else {
            continue;
        };
        let real_mean: Vec<f64> = r.0.iter().map(|s| s / r.1 as f64).collect();
        let fake_mean: Vec<f64> = f.0.iter().map(|s| s / f.1 as f64).collect();
        let gap_norm = real_mean
            .iter()
            .zip(&fake_mean)
            .map(|(a, b)| (b - a).powi(2))
            .sum::<f64>()
            .sqrt();
        out.push(CategoryStats {
            category: c.to_string(),
            real_mean,
            fake_mean,
            gap_norm,
            n_real: r.1,
            n_fake: f.1,
        });
    }
    Ok(out)
}

/// CSV `category,dim,real_mean,fake_mean`.
pub fn stats_csv(stats: &[CategoryStats]) -> String {
    let mut out = String::from("category,dim,real_mean,fake_mean\n");
    for s in stats {
        for (d, (r, f)) in s.real_mean.iter().zip(&s.fake_mean).enumerate() {
            writeln!(out, "{},{d},{r:.6},{f:.6}", s.category).unwrap();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineHistogram {
    /// `bins + 1` edges spanning the observed range.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub n_pairs: usize,
    pub min: f64,
    pub max: f64,
    /// Centre of the fullest bin.
    pub mode: f64,
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Maps a linear index in `[0, n(n−1)/2)` to the pair `(i, j)`, `i < j`.
fn pair_at(mut k: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    while k >= n - 1 - i {
        k -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + k)
}

/// Cosine similarities of `n_pairs` distinct random pairs, binned over
/// their observed range. Uses every pair when fewer exist.
pub fn cosine_histogram(features: &[Vec<f32>], n_pairs: usize, seed: u64, bins: usize) -> Result<CosineHistogram> {
    let n = features.len();
    if n < 2 {
        return Err(config_err("cosine histogram needs at least two vectors"));
    }
    if bins == 0 {
        return Err(config_err("bin count must be positive"));
    }
    let total = n * (n - 1) / 2;
    let k = n_pairs.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, total, k).into_vec();
    picks.sort_unstable();
    let sims: Vec<f64> = picks
        .into_iter()
        .map(|p| {
            let (i, j) = pair_at(p, n);
            cosine(&features[i], &features[j])
        })
        .collect();
    let min = sims.iter().copied().fold(f64::INFINITY, f64::min);
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|b| min + width * b as f64).collect();
    let mut counts = vec![0usize; bins];
    for s in &sims {
        let b = if width > 0.0 {
            (((s - min) / width) as usize).min(bins - 1)
        } else {
            bins - 1
        };
        counts[b] += 1;
    }
    let best = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(CosineHistogram {
        mode: (edges[best] + edges[best + 1]) / 2.0,
        edges,
        counts,
        n_pairs: k,
        min,
        max,
    })
}

/// CSV `bin_lo,bin_hi,count`.
pub fn histogram_csv(h: &CosineHistogram) -> String {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        writeln!(out, "{:.6},{:.6},{c}", h.edges[i], h.edges[i + 1]).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lf(cat: &str, label: Label, values: Vec<f32>) -> LabelledFeature {
        LabelledFeature {
            category: cat.into(),
            label,
            values,
        }
    }

    #[test]
    fn identical_groups_have_zero_gap() {
        let s = embedding_stats(&[
            lf("a", Label::Real, vec![1.0, 2.0]),
            lf("a", Label::Fake, vec![1.0, 2.0]),
        ])
        .unwrap();
        assert_eq!(s[0].gap_norm, 0.0);
    }

    #[test]
    fn constant_offset_gap_is_c_sqrt_d() {
        let d = 9;
        let real: Vec<f32> = (0..d).map(|i| i as f32).collect();
        let fake: Vec<f32> = real.iter().map(|v| v + 0.5).collect();
        let s = embedding_stats(&[lf("a", Label::Real, real), lf("a", Label::Fake, fake)]).unwrap();
        assert!((s[0].gap_norm - 0.5 * 3.0).abs() < 1e-12);
        assert!(embedding_stats(&[lf("a", Label::Real, vec![1.0])]).is_err());
    }

    #[test]
    fn pair_indexing_covers_all_pairs() {
        let n = 7;
        let pairs: Vec<_> = (0..n * (n - 1) / 2).map(|k| pair_at(k, n)).collect();
        let mut expected = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                expected.push((i, j));
            }
        }
        assert_eq!(pairs, expected);
    }

    #[test]
    fn histogram_reference_cases() {
        let same = vec![vec![1.0f32, 2.0, 3.0]; 10];
        let h = cosine_histogram(&same, DEFAULT_PAIRS, 46, 20).unwrap();
        assert_eq!(h.n_pairs, 45);
        assert!((h.min - 1.0).abs() < 1e-12 && (h.max - 1.0).abs() < 1e-12);
        let ortho = vec![vec![1.0f32, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let h = cosine_histogram(&ortho, 10, 1, 4).unwrap();
        assert_eq!((h.min, h.max), (0.0, 0.0));
        assert_eq!(h.counts.iter().sum::<usize>(), 3);
    }

    #[test]
    fn histogram_is_seeded() {
        let feats: Vec<Vec<f32>> = (0..200).map(|i| vec![(i as f32).sin(), (i as f32 * 0.3).cos(), 1.0]).collect();
        let a = cosine_histogram(&feats, 5000, 46, 30).unwrap();
        let b = cosine_histogram(&feats, 5000, 46, 30).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_pairs, 5000);
        assert_eq!(a.counts.iter().sum::<usize>(), 5000);
    }
}
