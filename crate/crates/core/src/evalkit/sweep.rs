use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::ScoredSample;
use super::report::EvalReport;
use crate::datasets::{perturb, Image, PerturbSpec, Sample};
use crate::error::Result;
use crate::model::SddModel;

/// Anything that maps images to fake-ness probabilities.
pub trait Scorer {
    fn score_images(&self, images: &[&Image]) -> Result<Vec<f64>>;

    /// Identifies the scorer's weights and settings in reports.
    fn config_digest(&self) -> Result<String>;
}

impl Scorer for SddModel {
    fn score_images(&self, images: &[&Image]) -> Result<Vec<f64>> {
        self.scores(images, 64)
    }

    fn config_digest(&self) -> Result<String> {
        self.digest()
    }
}

/// Scores `samples`, optionally after a perturbation, and builds a report.
pub fn evaluate(scorer: &dyn Scorer, samples: &[Sample], spec: Option<&PerturbSpec>) -> Result<EvalReport> {
    let scored = score_samples(scorer, samples, spec)?;
    EvalReport::from_scored(&scored, &scorer.config_digest()?)
}

pub fn score_samples(scorer: &dyn Scorer, samples: &[Sample], spec: Option<&PerturbSpec>) -> Result<Vec<ScoredSample>> {
    let perturbed: Vec<Image> = match spec {
        Some(s) => samples
            .par_iter()
            .map(|x| perturb(&x.image, s))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let images: Vec<&Image> = match spec {
        Some(_) => perturbed.iter().collect(),
        None => samples.iter().map(|s| &s.image).collect(),
    };
    let scores = scorer.score_images(&images)?;
    Ok(samples
        .iter()
        .zip(scores)
        .map(|(s, score)| ScoredSample {
            score,
            label: s.label,
            generator: s.generator.clone(),
            perturb: spec.copied(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Blur,
    Jpeg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub kind: SweepKind,
    pub level: f64,
    pub report: EvalReport,
}

/// The perturbation applied at one sweep level. Blur at σ = 0 and JPEG at
/// quality 100 are the unperturbed reference points.
pub fn sweep_spec(kind: SweepKind, level: f64) -> Option<PerturbSpec> {
    match kind {
        SweepKind::Blur if level > 0.0 => Some(PerturbSpec::GaussianBlur { sigma: level }),
        SweepKind::Jpeg if level < 100.0 => Some(PerturbSpec::Jpeg { quality: level as u8 }),
        _ => None,
    }
}

/// Evaluates the blur axis, then the JPEG axis, one report per level.
pub fn robustness_sweep(
    scorer: &dyn Scorer,
    samples: &[Sample],
    blur_sigmas: &[f64],
    jpeg_qualities: &[u8],
) -> Result<Vec<SweepPoint>> {
    let levels = blur_sigmas
        .iter()
        .map(|s| (SweepKind::Blur, *s))
        .chain(jpeg_qualities.iter().map(|q| (SweepKind::Jpeg, *q as f64)));
    let mut out = Vec::new();
    for (kind, level) in levels {
        let spec = sweep_spec(kind, level);
        if let Some(s) = &spec {
            s.validate()?;
        }
        let report = evaluate(scorer, samples, spec.as_ref())?;
        log::info!("{kind:?} {level}: mAP {:.4}", report.means.ap);
        out.push(SweepPoint { kind, level, report });
    }
    Ok(out)
}

/// CSV with columns `kind,level,generator,ap,acc,auroc`; one row per
/// generator and a `mean` row per level.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("kind,level,generator,ap,acc,auroc\n");
    for p in points {
        let kind = match p.kind {
            SweepKind::Blur => "blur",
            SweepKind::Jpeg => "jpeg",
        };
        for (g, m) in &p.report.generators {
            writeln!(out, "{kind},{},{g},{:.6},{:.6},{:.6}", p.level, m.ap, m.acc, m.auroc).unwrap();
        }
        let a = &p.report.means;
        writeln!(out, "{kind},{},mean,{:.6},{:.6},{:.6}", p.level, a.ap, a.acc, a.auroc).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Label;

    /// Scores by mean brightness, so blur and JPEG change scores slightly.
    struct Brightness;

    impl Scorer for Brightness {
        fn score_images(&self, images: &[&Image]) -> Result<Vec<f64>> {
            Ok(images
                .iter()
                .map(|i| i.data.iter().map(|v| *v as f64).sum::<f64>() / i.data.len() as f64)
                .collect())
        }

        fn config_digest(&self) -> Result<String> {
            Ok("brightness".into())
        }
    }

    fn samples() -> Vec<Sample> {
        (0..8)
            .map(|i| {
                let mut img = Image::zeros(16, 16);
                for (k, v) in img.data.iter_mut().enumerate() {
                    *v = ((k * 13 + i * 29) % 17) as f32 / 40.0 + if i % 2 == 0 { 0.0 } else { 0.2 };
                }
                Sample {
                    image: img.quantized(),
                    label: if i % 2 == 0 { Label::Real } else { Label::Fake },
                    generator: "toy".into(),
                }
            })
            .collect()
    }

    #[test]
    fn identity_points_match_the_baseline() {
        let s = samples();
        let base = evaluate(&Brightness, &s, None).unwrap();
        let pts = robustness_sweep(&Brightness, &s, &[0.0], &[100]).unwrap();
        assert_eq!(pts.len(), 2);
        assert!(pts.iter().all(|p| p.report == base));
    }

    #[test]
    fn one_report_per_level_and_csv_rows() {
        let s = samples();
        let pts = robustness_sweep(&Brightness, &s, &[0.0, 1.0, 2.0, 3.0], &[]).unwrap();
        assert_eq!(pts.len(), 4);
        let csv = sweep_csv(&pts);
        assert_eq!(csv.lines().count(), 1 + 4 * 2);
        assert!(csv.starts_with("kind,level,generator,ap,acc,auroc\n"));
    }
}
