//! Synthetic harmonic-stack "spectrograms" for desk-scale experiments.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::basesynth::BaseModel;
use crate::error::{Error, Result};
use crate::melpipe::{MelConfig, MelSpectrogram};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_harmonics: usize,
    pub max_harmonics: usize,
    /// Std of the i.i.d. additive texture, in log units.
    pub texture: f64,
    pub floor: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            min_frames: 96,
            max_frames: 160,
            min_harmonics: 3,
            max_harmonics: 6,
            texture: 0.05,
            floor: -8.0,
        }
    }
}

/// One ground-truth utterance, keyed by `(seed, index)` so any subset can
/// be regenerated independently.
pub fn toy_utterance(cfg: &ToyConfig, seed: u64, index: u64) -> MelSpectrogram {
    let mel_cfg = MelConfig::toy();
    let n_mels = mel_cfg.n_mels;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[index]));
    let frames = rng.gen_range(cfg.min_frames..=cfg.max_frames);
    let harmonics = rng.gen_range(cfg.min_harmonics..=cfg.max_harmonics);
    let f0 = rng.gen_range(4.0..9.0f64);
    let drift = rng.gen_range(0.3..2.0f64);
    let period = rng.gen_range(40.0..120.0f64);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let level = rng.gen_range(4.0..6.0f64);
    let decay = rng.gen_range(0.55..0.75f64);
    let width = rng.gen_range(0.6..1.0f64);
    let env_period = rng.gen_range(30.0..90.0f64);
    let texture = Normal::new(0.0, cfg.texture.max(0.0)).expect("finite std");
    let values = Array2::from_shape_fn((frames, n_mels), |(t, b)| {
        let tf = t as f64;
        let pitch = f0 + drift * (std::f64::consts::TAU * tf / period + phase).sin();
        let env = 0.8 + 0.2 * (std::f64::consts::TAU * tf / env_period).sin();
        let mut v = cfg.floor;
        for h in 1..=harmonics {
            let center = pitch * h as f64;
            let d = b as f64 - center;
            let amp = level * env * decay.powi(h as i32 - 1);
            v += amp * (-d * d / (2.0 * width * width)).exp();
        }
        v as f32
    });
    let values = values.mapv(|v| v + texture.sample(&mut rng) as f32);
    MelSpectrogram::new(values, mel_cfg).expect("toy values are finite")
}

/// `(utt_id, gt, base)` triples for indices `0..n`.
pub fn toy_corpus(
    n: usize,
    seed: u64,
    cfg: &ToyConfig,
    base: &BaseModel,
) -> Result<Vec<(String, MelSpectrogram, MelSpectrogram)>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "toy corpus needs at least one utterance".into(),
        ));
    }
    (0..n as u64)
        .map(|i| {
            let gt = toy_utterance(cfg, seed, i);
            let b = base.synthesize_from_gt(&gt, i)?;
            Ok((utt_id(i), gt, b))
        })
        .collect()
}

pub fn utt_id(index: u64) -> String {
    format!("toy_{index:05}")
}
