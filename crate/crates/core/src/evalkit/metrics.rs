use serde::{Deserialize, Serialize};

use crate::datasets::{Label, PerturbSpec};
use crate::error::{shape_err, Result, SddError};

/// Scores at or above this value count as fake.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: Label,
    pub generator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb: Option<PerturbSpec>,
}

fn check(scores: &[f64], labels: &[Label]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(shape_err(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|l| l.is_fake()).count();
    Ok((pos, labels.len() - pos))
}

/// Mean over positives of precision at each positive's rank. Ranking is a
/// stable sort by score, highest first, so ties keep input order.
pub fn average_precision(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(SddError::UndefinedMetric(
            "average precision needs both classes".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i].is_fake() {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

/// Probability that a fake outscores a real, ties counting half, via
/// midranks.
pub fn auroc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(SddError::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k].is_fake() {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBreakdown {
    pub acc: f64,
    /// Accuracy on real samples; 0 when there are none.
    pub racc: f64,
    /// Accuracy on fake samples; 0 when there are none.
    pub facc: f64,
    pub n_real: usize,
    pub n_fake: usize,
}

pub fn accuracy_breakdown(scores: &[f64], labels: &[Label], threshold: f64) -> Result<AccuracyBreakdown> {
    let (n_fake, n_real) = check(scores, labels)?;
    if scores.is_empty() {
        return Err(SddError::UndefinedMetric("accuracy of an empty set".into()));
    }
    let mut real_ok = 0usize;
    let mut fake_ok = 0usize;
    for (s, l) in scores.iter().zip(labels) {
        let says_fake = *s >= threshold;
        match l {
            Label::Real if !says_fake => real_ok += 1,
            Label::Fake if says_fake => fake_ok += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(AccuracyBreakdown {
        acc: (real_ok + fake_ok) as f64 / scores.len() as f64,
        racc: ratio(real_ok, n_real),
        facc: ratio(fake_ok, n_fake),
        n_real,
        n_fake,
    })
}
