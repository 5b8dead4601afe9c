use std::fmt;

use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{config_err, Result};

/// A post-processing operation applied to an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbSpec {
    /// Gaussian blur with standard deviation `sigma` in pixels.
    GaussianBlur { sigma: f64 },
    /// JPEG encode/decode round trip at `quality` (1–100).
    Jpeg { quality: u8 },
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PerturbSpec::GaussianBlur { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(config_err(format!("blur sigma must be finite and ≥ 0, got {sigma}")))
            }
            PerturbSpec::Jpeg { quality } if !(1..=100).contains(&quality) => {
                Err(config_err(format!("jpeg quality must be in [1, 100], got {quality}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PerturbSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbSpec::GaussianBlur { sigma } => write!(f, "blur(sigma={sigma})"),
            PerturbSpec::Jpeg { quality } => write!(f, "jpeg(q={quality})"),
        }
    }
}

pub fn perturb(image: &Image, spec: &PerturbSpec) -> Result<Image> {
    spec.validate()?;
    match *spec {
        PerturbSpec::GaussianBlur { sigma } => Ok(gaussian_blur(image, sigma)),
        PerturbSpec::Jpeg { quality } => jpeg_roundtrip(image, quality),
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (4.0 * sigma).ceil().max(1.0) as usize;
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| (v / s) as f32).collect()
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Separable Gaussian blur (kernel truncated at 4σ, mirrored borders).
/// `sigma == 0` returns the input unchanged.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return image.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (image.width, image.height);
    let mut out = image.clone();
    let mut tmp = vec![0.0f32; w * h];
    for c in 0..Image::CHANNELS {
        let src = image.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = reflect(x as isize + k as isize - r, w);
                    acc += kv * src[y * w + xx];
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = reflect(y as isize + k as isize - r, h);
                    acc += kv * tmp[yy * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

/// Encodes to baseline JPEG at `quality` and decodes back.
pub fn jpeg_roundtrip(image: &Image, quality: u8) -> Result<Image> {
    let rgb = image.to_rgb8();
    let mut buf = Vec::new();
    let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
    rgb.write_with_encoder(encoder)?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?.to_rgb8();
    Ok(Image::from_rgb8(&decoded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(seed: u64, size: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * size * size).map(|_| rng.random::<f32>()).collect();
        Image::new(size, size, data).unwrap().quantized()
    }

    fn laplacian_energy(img: &Image) -> f64 {
        let mut e = 0.0;
        for c in 0..3 {
            for y in 1..img.height - 1 {
                for x in 1..img.width - 1 {
                    let l = 4.0 * img.at(c, y, x) as f64
                        - img.at(c, y - 1, x) as f64
                        - img.at(c, y + 1, x) as f64
                        - img.at(c, y, x - 1) as f64
                        - img.at(c, y, x + 1) as f64;
                    e += l * l;
                }
            }
        }
        e
    }

    #[test]
    fn zero_sigma_is_bitwise_identity() {
        let img = noise_image(1, 16);
        let out = perturb(&img, &PerturbSpec::GaussianBlur { sigma: 0.0 }).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn blur_reduces_high_frequency_energy() {
        let img = noise_image(2, 32);
        let blurred = gaussian_blur(&img, 3.0);
        assert!(laplacian_energy(&blurred) < laplacian_energy(&img));
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::new(8, 8, vec![0.25; 3 * 64]).unwrap();
        let out = gaussian_blur(&img, 1.5);
        assert!(out.data.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn jpeg_at_quality_100_is_idempotent_within_codec_tolerance() {
        // The encoder always subsamples chroma 4:2:2, which bounds the
        // second-pass drift at 3 levels rather than 2.
        let img = gaussian_blur(&noise_image(3, 32), 1.5).quantized();
        let once = jpeg_roundtrip(&img, 100).unwrap();
        let twice = jpeg_roundtrip(&once, 100).unwrap();
        let max_delta = once
            .to_rgb8()
            .as_raw()
            .iter()
            .zip(twice.to_rgb8().as_raw())
            .map(|(a, b)| (*a as i32 - *b as i32).abs())
            .max()
            .unwrap();
        assert!(max_delta <= 3, "max channel delta {max_delta}");
    }

    #[test]
    fn perturbations_keep_dimensions() {
        let img = noise_image(4, 24);
        for spec in [
            PerturbSpec::GaussianBlur { sigma: 2.0 },
            PerturbSpec::Jpeg { quality: 30 },
        ] {
            let out = perturb(&img, &spec).unwrap();
            assert_eq!((out.width, out.height), (24, 24));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(PerturbSpec::GaussianBlur { sigma: -1.0 }.validate().is_err());
        assert!(PerturbSpec::Jpeg { quality: 0 }.validate().is_err());
        assert!(PerturbSpec::Jpeg { quality: 101 }.validate().is_err());
    }
}
