//! Token bank selection by Jensen-Shannon stratification.
//!
//! Every candidate token is turned into a probability vector with a softmax
//! over its channels. Its divergence from an anchor token falls into one of
//! `M = round(1/δ)` equal-width bins over `[0, 1]`; one token per occupied
//! bin is kept. The result spans the divergence range evenly instead of
//! following the density of the source tokens.

use std::io::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result, SddError};

pub const BANK_FORMAT: &str = "sdd-token-bank/1";

/// How the reference token is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnchorPolicy {
    /// Token closest (Euclidean) to the mean of all tokens.
    MeanNearest,
    /// Uniformly drawn token.
    SeededRandom,
    /// Token at a fixed index of the source.
    Explicit { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsConfig {
    pub delta: f64,
    pub seed: u64,
    pub anchor: AnchorPolicy,
}

impl Default for StsConfig {
    fn default() -> Self {
        Self {
            delta: 1e-3,
            seed: 46,
            anchor: AnchorPolicy::MeanNearest,
        }
    }
}

impl StsConfig {
    pub fn bins(&self) -> Result<usize> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(config_err(format!(
                "bin width must lie in (0, 1], got {}",
                self.delta
            )));
        }
        Ok(((1.0 / self.delta).round() as usize).max(1))
    }
}

/// Softmax over the channels of one token, in `f64`.
pub fn normalize(token: &[f32]) -> Vec<f64> {
    let max = token.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v as f64));
    let e: Vec<f64> = token.iter().map(|v| (*v as f64 - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Base-2 Jensen-Shannon divergence, clamped to `[0, 1]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            acc += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            acc += 0.5 * b * (b / m).log2();
        }
    }
    acc.clamp(0.0, 1.0)
}

/// 1-based bin of a divergence value: the `j` with `(j−1)/M < js ≤ j/M`,
/// where a divergence of exactly zero belongs to bin 1.
pub fn bin_index(js: f64, bins: usize) -> usize {
    ((bins as f64 * js).ceil() as usize).clamp(1, bins)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenBank {
    pub dim: usize,
    pub bins: usize,
    pub delta: f64,
    pub seed: u64,
    pub anchor_policy: AnchorPolicy,
    pub anchor: Vec<f32>,
    /// Occupied bins, one flag per bin.
    pub fill: Vec<bool>,
    /// `len × dim` row-major, sorted by bin.
    pub rows: Vec<f32>,
    pub source_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankHeader {
    format: String,
    dim: usize,
    bins: usize,
    delta: f64,
    seed: u64,
    anchor_policy: AnchorPolicy,
    fill_mask: String,
    rows: usize,
    source_count: usize,
}

fn check_tokens(tokens: &[f32], dim: usize) -> Result<usize> {
    if dim == 0 || tokens.len() % dim != 0 {
        return Err(SddError::Shape(format!(
            "token buffer of {} values is not a whole number of {dim}-dim rows",
            tokens.len()
        )));
    }
    let n = tokens.len() / dim;
    if n == 0 {
        return Err(SddError::Build("no source tokens".into()));
    }
    if let Some(i) = tokens.iter().position(|v| !v.is_finite()) {
        return Err(SddError::Value(format!(
            "source token {} contains a non-finite value",
            i / dim
        )));
    }
    Ok(n)
}

fn choose_anchor(tokens: &[f32], dim: usize, n: usize, policy: &AnchorPolicy, seed: u64) -> Result<usize> {
    match policy {
        AnchorPolicy::Explicit { index } => {
            if *index >= n {
                return Err(config_err(format!("anchor index {index} out of range for {n} tokens")));
            }
            Ok(*index)
        }
        AnchorPolicy::SeededRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            Ok(rng.random_range(0..n))
        }
        AnchorPolicy::MeanNearest => {
            let mut mean = vec![0.0f64; dim];
            for row in tokens.chunks_exact(dim) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += *v as f64;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let dist = |row: &[f32]| -> f64 {
                row.iter().zip(&mean).map(|(v, m)| (*v as f64 - m).powi(2)).sum()
            };
            let best = tokens
                .par_chunks_exact(dim)
                .enumerate()
                .map(|(i, row)| (dist(row), i))
                .reduce(|| (f64::INFINITY, usize::MAX), |a, b| {
                    if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
                        b
                    } else {
                        a
                    }
                });
            Ok(best.1)
        }
    }
}

/// Divergence of every token from the anchor row.
pub fn divergences(tokens: &[f32], dim: usize, anchor: &[f32]) -> Vec<f64> {
    let a = normalize(anchor);
    tokens
        .par_chunks_exact(dim)
        .map(|row| js_divergence(&normalize(row), &a))
        .collect()
}

/// Builds a bank from `tokens` (`n × dim`, row-major). Within a bin the
/// kept token is the one ranked first by a seeded shuffle of source indices.
pub fn build_token_bank(tokens: &[f32], dim: usize, cfg: &StsConfig) -> Result<TokenBank> {
    let bins = cfg.bins()?;
    let n = check_tokens(tokens, dim)?;
    let anchor_idx = choose_anchor(tokens, dim, n, &cfg.anchor, cfg.seed)?;
    let anchor = tokens[anchor_idx * dim..(anchor_idx + 1) * dim].to_vec();
    let js = divergences(tokens, dim, &anchor);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let mut rank = vec![0usize; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }

    let mut best: Vec<Option<usize>> = vec![None; bins];
    for (i, &d) in js.iter().enumerate() {
        let slot = &mut best[bin_index(d, bins) - 1];
        match slot {
            Some(j) if rank[*j] <= rank[i] => {}
            _ => *slot = Some(i),
        }
    }
    let fill: Vec<bool> = best.iter().map(Option::is_some).collect();
    let mut rows = Vec::with_capacity(fill.iter().filter(|f| **f).count() * dim);
    for i in best.into_iter().flatten() {
        rows.extend_from_slice(&tokens[i * dim..(i + 1) * dim]);
    }
    Ok(TokenBank {
        dim,
        bins,
        delta: cfg.delta,
        seed: cfg.seed,
        anchor_policy: cfg.anchor.clone(),
        anchor,
        fill,
        rows,
        source_count: n,
    })
}

/// `k` tokens drawn uniformly without replacement, for comparison with a
/// stratified bank of the same size.
pub fn random_token_bank(tokens: &[f32], dim: usize, k: usize, seed: u64) -> Result<TokenBank> {
    let n = check_tokens(tokens, dim)?;
    if k == 0 || k > n {
        return Err(SddError::Build(format!("cannot draw {k} tokens from {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    let mut rows = Vec::with_capacity(k * dim);
    for i in picked {
        rows.extend_from_slice(&tokens[i * dim..(i + 1) * dim]);
    }
    Ok(TokenBank {
        dim,
        bins: k,
        delta: 1.0 / k as f64,
        seed,
        anchor_policy: AnchorPolicy::SeededRandom,
        anchor: rows[..dim].to_vec(),
        fill: vec![true; k],
        rows,
        source_count: n,
    })
}

impl TokenBank {
    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// 1-based bin of each row, in row order.
    pub fn row_bins(&self) -> Vec<usize> {
        self.fill
            .iter()
            .enumerate()
            .filter(|(_, f)| **f)
            .map(|(j, _)| j + 1)
            .collect()
    }

    pub fn filled_bins(&self) -> usize {
        self.fill.iter().filter(|f| **f).count()
    }

    /// Fraction of bins holding a token.
    pub fn coverage(&self) -> f64 {
        self.filled_bins() as f64 / self.bins as f64
    }

    /// `(K, D)` tensor of the bank rows.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.rows.clone(), (self.len(), self.dim), device)?.to_dtype(dtype)?)
    }

    fn fill_hex(&self) -> String {
        let mut bytes = vec![0u8; self.bins.div_ceil(8)];
        for (j, f) in self.fill.iter().enumerate() {
            if *f {
                bytes[j / 8] |= 1 << (j % 8);
            }
        }
        hex::encode(bytes)
    }

    /// Serialized form: u64 LE header length, JSON header, anchor and rows
    /// as f32 LE, then a CRC-32 of everything before it.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = BankHeader {
            format: BANK_FORMAT.into(),
            dim: self.dim,
            bins: self.bins,
            delta: self.delta,
            seed: self.seed,
            anchor_policy: self.anchor_policy.clone(),
            fill_mask: self.fill_hex(),
            rows: self.len(),
            source_count: self.source_count,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + 4 * (self.dim + self.rows.len()) + 4);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.anchor.iter().chain(&self.rows) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| SddError::CorruptBank(m.to_string());
        if bytes.len() < 12 {
            return Err(corrupt("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let hlen = u64::from_le_bytes(body[..8].try_into().unwrap()) as usize;
        if hlen > body.len() - 8 {
            return Err(corrupt("header length exceeds file size"));
        }
        let header: BankHeader = serde_json::from_slice(&body[8..8 + hlen])
            .map_err(|e| corrupt(&format!("bad header: {e}")))?;
        if header.format != BANK_FORMAT {
            return Err(corrupt(&format!("unknown format `{}`", header.format)));
        }
        let payload = &body[8 + hlen..];
        if header.dim == 0 || payload.len() != 4 * header.dim * (header.rows + 1) {
            return Err(corrupt("payload size does not match header"));
        }
        let mask = hex::decode(&header.fill_mask).map_err(|_| corrupt("bad fill mask"))?;
        if mask.len() != header.bins.div_ceil(8) {
            return Err(corrupt("fill mask length does not match bin count"));
        }
        let fill: Vec<bool> = (0..header.bins).map(|j| mask[j / 8] & (1 << (j % 8)) != 0).collect();
        if fill.iter().filter(|f| **f).count() != header.rows {
            return Err(corrupt("fill mask disagrees with row count"));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let (anchor, rows) = values.split_at(header.dim);
        Ok(Self {
            dim: header.dim,
            bins: header.bins,
            delta: header.delta,
            seed: header.seed,
            anchor_policy: header.anchor_policy,
            anchor: anchor.to_vec(),
            fill,
            rows: rows.to_vec(),
            source_count: header.source_count,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| SddError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| SddError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SddError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized bank.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}
