//! Deterministic stand-ins for a fast non-iterative synthesizer whose output
//! is over-smoothed relative to ground truth.

mod regressor;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::reflect_index;
use crate::melpipe::MelSpectrogram;

pub use regressor::{fit_regressor, Regressor, RegressorTrainConfig, RegressorTrainReport};

/// Number of coarse bands in [`FeatureSeq`].
pub const FEATURE_BANDS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitchMode {
    /// Base output keeps the ground-truth harmonic positions.
    GtPitch,
    /// Base output is displaced by a seeded per-utterance frequency shift.
    PredPitch,
}

impl std::fmt::Display for PitchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PitchMode::GtPitch => "gt_pitch",
            PitchMode::PredPitch => "pred_pitch",
        })
    }
}

impl std::str::FromStr for PitchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt_pitch" | "gt" => Ok(PitchMode::GtPitch),
            "pred_pitch" | "pred" => Ok(PitchMode::PredPitch),
            other => Err(Error::Config(format!("unknown pitch mode `{other}`"))),
        }
    }
}

/// Frame-aligned conditioning for the regressor: the ground-truth mel
/// averaged into [`FEATURE_BANDS`] contiguous bands.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    pub values: Array2<f32>,
}

impl FeatureSeq {
    pub fn from_mel(mel: &MelSpectrogram) -> Self {
        let n = mel.n_mels();
        let values = Array2::from_shape_fn((mel.frames(), FEATURE_BANDS), |(f, b)| {
            let lo = b * n / FEATURE_BANDS;
            let hi = ((b + 1) * n / FEATURE_BANDS).max(lo + 1).min(n);
            let row = mel.values.row(f);
            row.slice(ndarray::s![lo..hi]).sum() / (hi - lo) as f32
        });
        FeatureSeq { values }
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }
}

#[derive(Debug, Clone)]
pub enum BaseKind {
    Blur { sigma_time: f64, sigma_freq: f64 },
    Regressor(Box<Regressor>),
}

/// Serializable description of a base model; regressor weights live in
/// checkpoint tensor files next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseSpec {
    Blur {
        sigma_time: f64,
        sigma_freq: f64,
        pitch_mode: PitchMode,
        pitch_seed: u64,
    },
    Regressor {
        pitch_mode: PitchMode,
        pitch_seed: u64,
    },
}

#[derive(Debug, Clone)]
pub struct BaseModel {
    pub kind: BaseKind,
    pub pitch_mode: PitchMode,
    pub pitch_seed: u64,
}

/// What a base model consumes.
#[derive(Debug, Clone, Copy)]
pub enum BaseInput<'a> {
    Mel(&'a MelSpectrogram),
    Features(&'a FeatureSeq, &'a crate::melpipe::MelConfig),
}

impl BaseModel {
    pub fn blur(sigma_time: f64, sigma_freq: f64) -> Result<Self> {
        if !(sigma_time >= 0.0 && sigma_freq >= 0.0) {
            return Err(Error::InvalidArgument("blur sigmas must be >= 0".into()));
        }
        Ok(BaseModel {
            kind: BaseKind::Blur {
                sigma_time,
                sigma_freq,
            },
            pitch_mode: PitchMode::GtPitch,
            pitch_seed: 0,
        })
    }

    pub fn with_pitch(mut self, mode: PitchMode, seed: u64) -> Self {
        self.pitch_mode = mode;
        self.pitch_seed = seed;
        self
    }

    pub fn spec(&self) -> BaseSpec {
        match &self.kind {
            BaseKind::Blur {
                sigma_time,
                sigma_freq,
            } => BaseSpec::Blur {
                sigma_time: *sigma_time,
                sigma_freq: *sigma_freq,
                pitch_mode: self.pitch_mode,
                pitch_seed: self.pitch_seed,
            },
            BaseKind::Regressor(_) => BaseSpec::Regressor {
                pitch_mode: self.pitch_mode,
                pitch_seed: self.pitch_seed,
            },
        }
    }

    /// Rebuild a blur base from its spec; regressors need their weights and
    /// are restored through the checkpoint module.
    pub fn from_blur_spec(spec: &BaseSpec) -> Result<Self> {
        match spec {
            BaseSpec::Blur {
                sigma_time,
                sigma_freq,
                pitch_mode,
                pitch_seed,
            } => {
                Ok(BaseModel::blur(*sigma_time, *sigma_freq)?.with_pitch(*pitch_mode, *pitch_seed))
            }
            BaseSpec::Regressor { .. } => Err(Error::Config(
                "regressor base needs its weights; load it from a checkpoint".into(),
            )),
        }
    }

    /// Seeded frequency displacement for utterance `utt_index` (zero in
    /// `gt_pitch` mode, otherwise one of ±1..=±3 bins).
    pub fn pitch_shift(&self, utt_index: u64) -> i32 {
        match self.pitch_mode {
            PitchMode::GtPitch => 0,
            PitchMode::PredPitch => pred_pitch_shift(self.pitch_seed, utt_index),
        }
    }

    /// `f_ψ(y)`: the base estimate for one utterance. Frame count always
    /// equals the input's.
    pub fn synthesize(&self, input: BaseInput<'_>, utt_index: u64) -> Result<MelSpectrogram> {
        let shift = self.pitch_shift(utt_index);
        match (&self.kind, input) {
            (
                BaseKind::Blur {
                    sigma_time,
                    sigma_freq,
                },
                BaseInput::Mel(mel),
            ) => {
                let warped = if shift != 0 {
                    pitch_warp(mel, shift)?
                } else {
                    mel.clone()
                };
                Ok(blur_corrupt(&warped, *sigma_time, *sigma_freq))
            }
            (BaseKind::Regressor(net), BaseInput::Features(feats, cfg)) => {
                let out = net.predict(feats, cfg)?;
                if shift != 0 {
                    pitch_warp(&out, shift)
                } else {
                    Ok(out)
                }
            }
            (BaseKind::Blur { .. }, BaseInput::Features(..)) => Err(Error::InvalidArgument(
                "blur base expects a mel input".into(),
            )),
            (BaseKind::Regressor(_), BaseInput::Mel(_)) => Err(Error::InvalidArgument(
                "regressor base expects a feature sequence".into(),
            )),
        }
    }

    /// Convenience for paired corpora: derives the right input from the
    /// ground-truth mel.
    pub fn synthesize_from_gt(
        &self,
        gt: &MelSpectrogram,
        utt_index: u64,
    ) -> Result<MelSpectrogram> {
        match &self.kind {
            BaseKind::Blur { .. } => self.synthesize(BaseInput::Mel(gt), utt_index),
            BaseKind::Regressor(_) => {
                let feats = FeatureSeq::from_mel(gt);
                self.synthesize(BaseInput::Features(&feats, &gt.config), utt_index)
            }
        }
    }
}

pub fn pred_pitch_shift(seed: u64, utt_index: u64) -> i32 {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(seed, &[utt_index]));
    let mag = rng.gen_range(1..=3);
    if rng.gen_bool(0.5) {
        mag
    } else {
        -mag
    }
}

/// Normalized Gaussian taps, truncated at `ceil(4σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn smooth_axis(x: &Array2<f32>, sigma: f64, axis: Axis) -> Array2<f32> {
    if sigma <= 0.0 {
        return x.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut out = x.clone();
    for (src, mut dst) in x.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
        let n = src.len();
        for i in 0..n {
            let mut acc = 0.0f64;
            for (j, w) in k.iter().enumerate() {
                let idx = reflect_index(i as isize + j as isize - r, n);
                acc += w * src[idx] as f64;
            }
            dst[i] = acc as f32;
        }
    }
    out
}

/// Separable Gaussian smoothing along time, then frequency (reflect edges).
pub fn blur_corrupt(mel: &MelSpectrogram, sigma_time: f64, sigma_freq: f64) -> MelSpectrogram {
    let t = smooth_axis(&mel.values, sigma_time, Axis(0));
    let values = smooth_axis(&t, sigma_freq, Axis(1));
    MelSpectrogram {
        values,
        config: mel.config.clone(),
    }
}

/// Shift along the frequency axis by `shift_bins` with edge replication.
pub fn pitch_warp(mel: &MelSpectrogram, shift_bins: i32) -> Result<MelSpectrogram> {
    let n = mel.n_mels();
    if (shift_bins.unsigned_abs() as usize) * 4 >= n {
        return Err(Error::InvalidArgument(format!(
            "|shift| {} must be below n_mels/4 = {}",
            shift_bins,
            n as f64 / 4.0
        )));
    }
    let values = Array2::from_shape_fn(mel.shape(), |(f, b)| {
        let src = (b as i64 - shift_bins as i64).clamp(0, n as i64 - 1) as usize;
        mel.values[[f, src]]
    });
    Ok(MelSpectrogram {
        values,
        config: mel.config.clone(),
    })
}
