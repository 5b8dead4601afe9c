//! Seeded toy forgery corpus. Real images are smooth random textures
//! (Gaussian-filtered white noise); each fake image is the texture of its
//! paired real image plus a periodic artifact, so the artifact is the only
//! systematic difference between the classes.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gaussian_blur, save_manifest, Image, Label, Sample, SampleRecord, Split};
use crate::error::{config_err, Result, SddError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Artifact {
    /// Period-2 checkerboard, the signature of stride-2 transposed
    /// convolution upsampling.
    Checker,
    /// Sum of cosines on a ring of radius `size / 4` in the frequency plane.
    Ring,
}

impl Artifact {
    pub fn generator_tag(self) -> &'static str {
        match self {
            Artifact::Checker => "toy-checker",
            Artifact::Ring => "toy-ring",
        }
    }
}

impl std::str::FromStr for Artifact {
    type Err = SddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checker" => Ok(Artifact::Checker),
            "ring" => Ok(Artifact::Ring),
            other => Err(config_err(format!("unknown artifact `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    /// Images per class (real/fake pairs).
    pub n_per_class: usize,
    /// Pairs assigned to the test split; half of `n_per_class` when unset.
    pub test_per_class: Option<usize>,
    pub val_per_class: usize,
    pub artifact: Artifact,
    /// RMS amplitude of the injected artifact, in `[0, 1]` intensity units.
    pub amplitude: f64,
    pub image_size: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 46,
            n_per_class: 100,
            test_per_class: None,
            val_per_class: 0,
            artifact: Artifact::Checker,
            amplitude: 0.04,
            image_size: 64,
        }
    }
}

impl ToyConfig {
    fn test_count(&self) -> usize {
        self.test_per_class.unwrap_or(self.n_per_class / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(config_err("toy dataset needs n_per_class ≥ 1"));
        }
        if self.test_count() + self.val_per_class > self.n_per_class {
            return Err(config_err(format!(
                "test ({}) + val ({}) pairs exceed n_per_class ({})",
                self.test_count(),
                self.val_per_class,
                self.n_per_class
            )));
        }
        if self.image_size < 4 || self.image_size % 2 != 0 {
            return Err(config_err("toy image size must be even and ≥ 4"));
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(config_err("artifact amplitude must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ToyItem {
    pub name: String,
    pub image: Image,
    pub label: Label,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub config: ToyConfig,
    pub items: Vec<ToyItem>,
}

impl ToyDataset {
    pub fn generator(&self) -> &'static str {
        self.config.artifact.generator_tag()
    }

    pub fn samples(&self, split: Split) -> Vec<Sample> {
        self.items
            .iter()
            .filter(|it| it.split == split)
            .map(|it| Sample {
                image: it.image.clone(),
                label: it.label,
                generator: self.generator().to_string(),
            })
            .collect()
    }
}

/// Integer frequency pairs `(u, v)` (cycles per image) carrying the artifact.
pub fn artifact_frequencies(artifact: Artifact, size: usize) -> Vec<(i64, i64)> {
    match artifact {
        Artifact::Checker => vec![(size as i64 / 2, size as i64 / 2)],
        Artifact::Ring => {
            let r = size as f64 / 4.0;
            let mut out: Vec<(i64, i64)> = Vec::new();
            for k in 0..8 {
                let theta = k as f64 * PI / 8.0;
                let f = ((r * theta.cos()).round() as i64, (r * theta.sin()).round() as i64);
                if !out.contains(&f) {
                    out.push(f);
                }
            }
            out
        }
    }
}

/// Mean over channels of `Σ |DFT(u, v)|²` for the given frequencies, computed
/// on the mean-removed image by direct summation.
pub fn band_energy(image: &Image, freqs: &[(i64, i64)]) -> f64 {
    let (w, h) = (image.width, image.height);
    let mut total = 0.0;
    for c in 0..Image::CHANNELS {
        let plane = image.plane(c);
        let mean = plane.iter().map(|v| *v as f64).sum::<f64>() / plane.len() as f64;
        for &(u, v) in freqs {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let phase =
                        -2.0 * PI * (u as f64 * x as f64 / w as f64 + v as f64 * y as f64 / h as f64);
                    let p = plane[y * w + x] as f64 - mean;
                    re += p * phase.cos();
                    im += p * phase.sin();
                }
            }
            total += re * re + im * im;
        }
    }
    total / Image::CHANNELS as f64
}

fn texture(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let noise: Vec<f32> = (0..3 * size * size).map(|_| rng.random::<f32>()).collect();
    let sigma = rng.random_range(2.0..4.0);
    let mut img = gaussian_blur(&Image::new(size, size, noise).expect("sized buffer"), sigma);
    for c in 0..Image::CHANNELS {
        let target_mean = rng.random_range(0.3..0.7);
        let target_std = rng.random_range(0.06..0.14);
        let plane = img.plane_mut(c);
        let n = plane.len() as f64;
        let mean = plane.iter().map(|v| *v as f64).sum::<f64>() / n;
        let std = (plane.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n)
            .sqrt()
            .max(1e-9);
        for v in plane.iter_mut() {
            *v = (((*v as f64 - mean) / std) * target_std + target_mean).clamp(0.02, 0.98) as f32;
        }
    }
    img
}

fn add_artifact(base: &Image, artifact: Artifact, amplitude: f64, rng: &mut ChaCha8Rng) -> Image {
    let size = base.width;
    let mut out = base.clone();
    match artifact {
        Artifact::Checker => {
            for c in 0..Image::CHANNELS {
                let plane = out.plane_mut(c);
                for y in 0..size {
                    for x in 0..size {
                        let s = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                        plane[y * size + x] += (amplitude * s) as f32;
                    }
                }
            }
        }
        Artifact::Ring => {
            let freqs = artifact_frequencies(artifact, size);
            let norm = (freqs.len() as f64 / 2.0).sqrt();
            let phases: Vec<f64> = freqs.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            for y in 0..size {
                for x in 0..size {
                    let s: f64 = freqs
                        .iter()
                        .zip(&phases)
                        .map(|(&(u, v), ph)| {
                            (2.0 * PI * (u as f64 * x as f64 + v as f64 * y as f64) / size as f64 + ph)
                                .cos()
                        })
                        .sum::<f64>()
                        / norm;
                    for c in 0..Image::CHANNELS {
                        out.plane_mut(c)[y * size + x] += (amplitude * s) as f32;
                    }
                }
            }
        }
    }
    out
}

/// Generates `n_per_class` real/fake pairs. Output is a pure function of the
/// config; both images of a pair always land in the same split.
pub fn generate_toy_dataset(cfg: &ToyConfig) -> Result<ToyDataset> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..cfg.n_per_class).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    split_rng.set_stream(u64::MAX);
    order.shuffle(&mut split_rng);
    let mut split_of = vec![Split::Train; cfg.n_per_class];
    for (rank, &pair) in order.iter().enumerate() {
        split_of[pair] = if rank < cfg.test_count() {
            Split::Test
        } else if rank < cfg.test_count() + cfg.val_per_class {
            Split::Val
        } else {
            Split::Train
        };
    }

    let mut items = Vec::with_capacity(2 * cfg.n_per_class);
    for pair in 0..cfg.n_per_class {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(pair as u64);
        let base = texture(&mut rng, cfg.image_size);
        let fake = add_artifact(&base, cfg.artifact, cfg.amplitude, &mut rng).quantized();
        let real = base.quantized();
        for (label, image) in [(Label::Real, real), (Label::Fake, fake)] {
            items.push(ToyItem {
                name: format!("{pair:06}"),
                image,
                label,
                split: split_of[pair],
            });
        }
    }
    Ok(ToyDataset {
        config: cfg.clone(),
        items,
    })
}

/// Writes `out/<split>/<label>/<name>.png` plus `out/manifest.jsonl` with
/// paths relative to `out`. Returns the records as written.
pub fn write_toy_dataset(ds: &ToyDataset, out: &Path) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::with_capacity(ds.items.len());
    for it in &ds.items {
        let split = match it.split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        let rel = Path::new(split)
            .join(it.label.to_string())
            .join(format!("{}.png", it.name));
        let abs = out.join(&rel);
        if let Some(parent) = abs.parent() {
            std::fs::create_dir_all(parent).map_err(|e| SddError::io(parent, e))?;
        }
        it.image.save_png(&abs)?;
        records.push(SampleRecord {
            path: rel,
            label: it.label,
            generator: ds.generator().to_string(),
            split: it.split,
        });
    }
    save_manifest(&out.join("manifest.jsonl"), &records)?;
    Ok(records)
}
