//! Residual training data: `gt − base`, global standardization, seeded crops.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::melio;
use crate::melpipe::{MelConfig, MelSpectrogram};
use crate::seed::derive_seed;

pub const STD_FLOOR: f64 = 1e-6;

/// A residual matrix with its conditioning mel. Values are kept in `f64` so
/// that `gt == f32(base + residual)` holds exactly for ordinary mel ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSample {
    pub values: Array2<f64>,
    pub standardized: bool,
    pub cond: MelSpectrogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub mean: f64,
    pub std: f64,
}

impl ResidualStats {
    pub const IDENTITY: ResidualStats = ResidualStats {
        mean: 0.0,
        std: 1.0,
    };
}

/// Scalar normalization for the conditioning mel fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CondStats {
    pub mean: f64,
    pub std: f64,
}

impl CondStats {
    pub fn normalize(&self, mel: &Array2<f32>) -> Array2<f32> {
        mel.mapv(|v| ((v as f64 - self.mean) / self.std) as f32)
    }
}

pub fn compute_residual(gt: &MelSpectrogram, base: &MelSpectrogram) -> Result<ResidualSample> {
    if gt.shape() != base.shape() {
        return Err(Error::Shape(format!(
            "ground truth {:?} and base {:?} differ in shape",
            gt.shape(),
            base.shape()
        )));
    }
    if gt.config != base.config {
        return Err(Error::Config(
            "ground truth and base use different mel configs".into(),
        ));
    }
    let values = ndarray::Zip::from(&gt.values)
        .and(&base.values)
        .map_collect(|g, b| *g as f64 - *b as f64);
    Ok(ResidualSample {
        values,
        standardized: false,
        cond: base.clone(),
    })
}

/// `f32(base + residual)`, the inverse of [`compute_residual`].
pub fn add_residual(base: &MelSpectrogram, residual: &Array2<f64>) -> Result<MelSpectrogram> {
    if base.shape() != residual.dim() {
        return Err(Error::Shape(format!(
            "base {:?} vs residual {:?}",
            base.shape(),
            residual.dim()
        )));
    }
    let values = ndarray::Zip::from(&base.values)
        .and(residual)
        .map_collect(|b, r| (*b as f64 + *r) as f32);
    MelSpectrogram::new(values, base.config.clone())
}

fn moments(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    // Welford
    let (mut n, mut mean, mut m2) = (0u64, 0.0f64, 0.0f64);
    for v in values {
        n += 1;
        let d = v - mean;
        mean += d / n as f64;
        m2 += d * (v - mean);
    }
    (n > 0).then(|| (mean, (m2 / n as f64).sqrt()))
}

pub fn fit_stats(samples: &[ResidualSample]) -> Result<ResidualStats> {
    if samples.iter().any(|s| s.standardized) {
        return Err(Error::InvalidArgument(
            "fit_stats needs raw residuals".into(),
        ));
    }
    let (mean, std) = moments(samples.iter().flat_map(|s| s.values.iter().copied()))
        .ok_or_else(|| Error::InvalidArgument("no residual entries to fit".into()))?;
    Ok(ResidualStats {
        mean,
        std: std.max(STD_FLOOR),
    })
}

pub fn fit_cond_stats(samples: &[ResidualSample]) -> Result<CondStats> {
    let (mean, std) = moments(
        samples
            .iter()
            .flat_map(|s| s.cond.values.iter().map(|v| *v as f64)),
    )
    .ok_or_else(|| Error::InvalidArgument("no conditioning entries to fit".into()))?;
    Ok(CondStats {
        mean,
        std: std.max(STD_FLOOR),
    })
}

pub fn standardize(sample: &ResidualSample, stats: &ResidualStats) -> Result<ResidualSample> {
    if sample.standardized {
        return Err(Error::InvalidArgument(
            "sample is already standardized".into(),
        ));
    }
    Ok(ResidualSample {
        values: sample.values.mapv(|v| (v - stats.mean) / stats.std),
        standardized: true,
        cond: sample.cond.clone(),
    })
}

pub fn destandardize(sample: &ResidualSample, stats: &ResidualStats) -> Result<ResidualSample> {
    if !sample.standardized {
        return Err(Error::InvalidArgument("sample is not standardized".into()));
    }
    Ok(ResidualSample {
        values: sample.values.mapv(|v| v * stats.std + stats.mean),
        standardized: false,
        cond: sample.cond.clone(),
    })
}

/// One training example: standardized residual crop and normalized
/// conditioning over the same frame range.
#[derive(Debug, Clone)]
pub struct Crop {
    pub residual: Array2<f32>,
    pub cond: Array2<f32>,
    pub start: usize,
}

#[derive(Debug, Clone)]
pub struct ResidualDataset {
    pub ids: Vec<String>,
    /// Standardized, full length.
    pub samples: Vec<ResidualSample>,
    pub stats: ResidualStats,
    pub cond_stats: CondStats,
    pub max_frames: usize,
    pub seed: u64,
}

impl ResidualDataset {
    /// Residuals for every pair, statistics fit on this (training) set, then
    /// standardized. Crops are taken lazily per (epoch, index).
    pub fn build(
        pairs: &[(String, MelSpectrogram, MelSpectrogram)],
        crop_seconds: f64,
        seed: u64,
    ) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty corpus".into()))?;
        if !(crop_seconds > 0.0) {
            return Err(Error::Config("crop_seconds must be positive".into()));
        }
        let raw = pairs
            .iter()
            .map(|(id, gt, base)| {
                compute_residual(gt, base).map_err(|e| match e {
                    Error::Shape(m) => Error::Shape(format!("{id}: {m}")),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let stats = fit_stats(&raw)?;
        let cond_stats = fit_cond_stats(&raw)?;
        let samples = raw
            .iter()
            .map(|s| standardize(s, &stats))
            .collect::<Result<Vec<_>>>()?;
        Ok(ResidualDataset {
            ids: pairs.iter().map(|p| p.0.clone()).collect(),
            samples,
            stats,
            cond_stats,
            max_frames: first.1.config.frames_for_seconds(crop_seconds),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_mels(&self) -> usize {
        self.samples[0].cond.n_mels()
    }

    pub fn mel_config(&self) -> &MelConfig {
        &self.samples[0].cond.config
    }

    /// Crop of `len` frames from sample `index`, offset keyed by `(epoch, index)`.
    pub fn crop(&self, epoch: u64, index: usize, len: usize) -> Result<Crop> {
        let sample = &self.samples[index];
        let frames = sample.values.nrows();
        if len == 0 || len > frames {
            return Err(Error::Shape(format!(
                "cannot take {len} frames from a {frames}-frame sample"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[epoch, index as u64]));
        let start = rng.gen_range(0..=frames - len);
        let rows = s![start..start + len, ..];
        Ok(Crop {
            residual: sample.values.slice(rows).mapv(|v| v as f32),
            cond: self
                .cond_stats
                .normalize(&sample.cond.values.slice(rows).to_owned()),
            start,
        })
    }

    /// Crops for a batch sharing one length: the shortest member (capped at
    /// `max_frames`) rounded down to a multiple of `multiple`.
    pub fn batch(&self, epoch: u64, indices: &[usize], multiple: usize) -> Result<Vec<Crop>> {
        let shortest = indices
            .iter()
            .map(|i| self.samples[*i].values.nrows())
            .min()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let len = shortest.min(self.max_frames) / multiple * multiple;
        if len == 0 {
            return Err(Error::Shape(format!(
                "utterance of {shortest} frames is shorter than the network stride {multiple}"
            )));
        }
        indices.iter().map(|i| self.crop(epoch, *i, len)).collect()
    }
}

/// One line of a corpus manifest; paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub gt_path: PathBuf,
    pub base_path: PathBuf,
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(entries)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads every (id, gt, base) triple listed in a manifest.
pub fn load_corpus(
    manifest: impl AsRef<Path>,
) -> Result<Vec<(String, MelSpectrogram, MelSpectrogram)>> {
    let manifest = manifest.as_ref();
    let root = manifest.parent().unwrap_or_else(|| Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let gt = melio::load_mel(root.join(&e.gt_path))?;
            let base = melio::load_mel(root.join(&e.base_path))?;
            Ok((e.utt_id, gt, base))
        })
        .collect()
}
