//! Dataset plumbing: the in-memory image type, JSON-lines manifests,
//! directory import for per-generator corpora, perturbations and the
//! synthetic toy-forgery generator.

mod manifest;
mod perturb;
mod toy;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SddError};

pub use manifest::{import_directory, load_manifest, save_manifest, SampleRecord};
pub use perturb::{gaussian_blur, jpeg_roundtrip, perturb, PerturbSpec};
pub use toy::{
    artifact_frequencies, band_energy, generate_toy_dataset, write_toy_dataset, Artifact,
    ToyConfig, ToyDataset,
};

/// Ground-truth class. Fake is the positive class everywhere (label 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = SddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(SddError::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// RGB image, channel-major (`3 × height × width`), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * width * height {
            return Err(SddError::Shape(format!(
                "image buffer has {} values, expected 3×{height}×{width}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; Self::CHANNELS * width * height],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * w * h];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = p.0[c] as f32 / 255.0;
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }

    /// Quantizes to 8 bits per channel (round-half-up, clamped).
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (w, h) = (self.width, self.height);
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                *v = quantize(self.at(c, y as usize, x as usize));
            }
            image::Rgb(px)
        })
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| quantize(*v) as f32 / 255.0).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(SddError::from)
    }

    /// Resizes the shorter side to `size` and center-crops to `size × size`.
    /// Already-square images of the right size are returned unchanged.
    pub fn preprocess(&self, size: usize) -> Self {
        if self.width == size && self.height == size {
            return self.clone();
        }
        let scale = size as f64 / self.width.min(self.height) as f64;
        let nw = ((self.width as f64 * scale).round() as usize).max(size);
        let nh = ((self.height as f64 * scale).round() as usize).max(size);
        let buf: image::Rgb32FImage = image::ImageBuffer::from_fn(
            self.width as u32,
            self.height as u32,
            |x, y| {
                image::Rgb([
                    self.at(0, y as usize, x as usize),
                    self.at(1, y as usize, x as usize),
                    self.at(2, y as usize, x as usize),
                ])
            },
        );
        let resized = image::imageops::resize(
            &buf,
            nw as u32,
            nh as u32,
            image::imageops::FilterType::CatmullRom,
        );
        let (ox, oy) = ((nw - size) / 2, (nh - size) / 2);
        let mut out = Image::zeros(size, size);
        for y in 0..size {
            for x in 0..size {
                let p = resized.get_pixel((x + ox) as u32, (y + oy) as u32);
                for c in 0..3 {
                    out.data[(c * size + y) * size + x] = p.0[c].clamp(0.0, 1.0);
                }
            }
        }
        out
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

/// An image with its ground truth, ready for training or scoring.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub label: Label,
    pub generator: String,
}

/// Loads every record of `split` from disk, preprocessed to `size`.
pub fn load_samples(records: &[SampleRecord], split: Split, size: usize) -> Result<Vec<Sample>> {
    records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            Ok(Sample {
                image: Image::load(&r.path)?.preprocess(size),
                label: r.label,
                generator: r.generator.clone(),
            })
        })
        .collect()
}
