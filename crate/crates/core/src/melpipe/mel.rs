use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::audio::AudioClip;
use crate::error::{Error, Result};
use crate::grid::reflect_index;

pub const DEFAULT_LOG_FLOOR: f64 = 1e-5;

/// Mel extraction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: u32,
    pub log_floor: f64,
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be >= 1".into()));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config(format!(
                "hop {} must be in 1..={}",
                self.hop, self.n_fft
            )));
        }
        if self.win == 0 || self.win > self.n_fft {
            return Err(Error::Config(format!("win {} exceeds n_fft", self.win)));
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(Error::Config(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got {}..{}",
                self.fmin, self.fmax
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn n_freqs(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced for `len` samples under center padding.
    pub fn frames_for(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Largest frame count covering at most `seconds` of audio.
    pub fn frames_for_seconds(&self, seconds: f64) -> usize {
        ((seconds * self.sample_rate as f64) / self.hop as f64).floor() as usize + 1
    }

    pub fn frame_seconds(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    pub fn log_floor_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }

    /// 64-bin configuration attached to the synthetic toy corpus.
    pub fn toy() -> Self {
        MelConfig {
            n_mels: 64,
            n_fft: 1024,
            hop: 256,
            win: 1024,
            fmin: 0.0,
            fmax: 8000.0,
            sample_rate: 22050,
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }
}

/// Extraction parameters of the three reference corpora, plus `toy`.
pub fn preset_config(name: &str) -> Result<MelConfig> {
    if name == "toy" {
        return Ok(MelConfig::toy());
    }
    let (n_mels, n_fft, hop, fmin, fmax, sample_rate) = match name {
        "ljspeech" => (80, 1024, 256, 80.0, 7600.0, 22050),
        "libritts" => (80, 2048, 300, 80.0, 7600.0, 24000),
        "vctk" => (128, 2048, 480, 0.0, 24000.0, 48000),
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (expected toy, ljspeech, libritts or vctk)"
            )))
        }
    };
    Ok(MelConfig {
        n_mels,
        n_fft,
        hop,
        win: n_fft,
        fmin,
        fmax,
        sample_rate,
        log_floor: DEFAULT_LOG_FLOOR,
    })
}

/// `frames × n_mels` natural-log mel amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f32>,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn new(values: Array2<f32>, config: MelConfig) -> Result<Self> {
        if values.ncols() != config.n_mels {
            return Err(Error::Shape(format!(
                "{} mel columns but config says {}",
                values.ncols(),
                config.n_mels
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("mel contains non-finite entries".into()));
        }
        Ok(MelSpectrogram { values, config })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames() as f64 * self.config.frame_seconds()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequency of every mel filter.
pub fn mel_center_frequencies(cfg: &MelConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular HTK-scale filters with unit peak, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let edges = mel_edges(cfg);
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    Array2::from_shape_fn((cfg.n_mels, cfg.n_freqs()), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let rise = (f - l) / (c - l);
        let fall = (r - f) / (r - c);
        rise.min(fall).max(0.0)
    })
}

/// Periodic Hann window of length `win`, zero-padded and centered in `n_fft`.
pub fn hann_window(cfg: &MelConfig) -> Vec<f64> {
    let mut w = vec![0.0; cfg.n_fft];
    let off = (cfg.n_fft - cfg.win) / 2;
    for i in 0..cfg.win {
        w[off + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.win as f64).cos();
    }
    w
}

/// Complex STFT with reflect center padding, `frames × (n_fft/2 + 1)`.
pub fn stft(samples: &[f64], cfg: &MelConfig) -> Array2<Complex<f64>> {
    let n_fft = cfg.n_fft;
    let half = n_fft / 2;
    let frames = cfg.frames_for(samples.len());
    let window = hann_window(cfg);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut out = Array2::zeros((frames, cfg.n_freqs()));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for f in 0..frames {
        let start = (f * cfg.hop) as isize - half as isize;
        for (i, b) in buf.iter_mut().enumerate() {
            let idx = reflect_index(start + i as isize, samples.len());
            *b = Complex::new(samples[idx] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, v) in buf[..cfg.n_freqs()].iter().enumerate() {
            out[[f, k]] = *v;
        }
    }
    out
}

/// Weighted overlap-add inverse of [`stft`]; returns `(frames - 1) · hop` samples.
pub fn istft(spec: &Array2<Complex<f64>>, cfg: &MelConfig) -> Vec<f64> {
    let n_fft = cfg.n_fft;
    let frames = spec.nrows();
    let window = hann_window(cfg);
    let ifft = FftPlanner::new().plan_fft_inverse(n_fft);
    let total = n_fft + (frames - 1) * cfg.hop;
    let mut y = vec![0.0; total];
    let mut wsum = vec![0.0; total];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for f in 0..frames {
        for k in 0..n_fft {
            buf[k] = if k < cfg.n_freqs() {
                spec[[f, k]]
            } else {
                spec[[f, n_fft - k]].conj()
            };
        }
        ifft.process(&mut buf);
        let off = f * cfg.hop;
        for i in 0..n_fft {
            y[off + i] += window[i] * buf[i].re / n_fft as f64;
            wsum[off + i] += window[i] * window[i];
        }
    }
    for (v, w) in y.iter_mut().zip(&wsum) {
        if *w > 1e-8 {
            *v /= w;
        }
    }
    let half = n_fft / 2;
    y[half..half + (frames - 1) * cfg.hop].to_vec()
}

/// Log-mel features: |STFT| → mel filterbank → clamp at `log_floor` → `ln`.
pub fn extract_mel(clip: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if clip.sample_rate() != cfg.sample_rate {
        return Err(Error::Config(format!(
            "clip is {} Hz but config expects {} Hz",
            clip.sample_rate(),
            cfg.sample_rate
        )));
    }
    if clip.len() < cfg.win {
        return Err(Error::Audio(format!(
            "clip of {} samples is shorter than one {}-sample window",
            clip.len(),
            cfg.win
        )));
    }
    let samples: Vec<f64> = clip.samples().iter().map(|s| *s as f64).collect();
    let spec = stft(&samples, cfg);
    let fb = mel_filterbank(cfg);
    let mag = spec.mapv(|c| c.norm());
    let mel = mag.dot(&fb.t());
    let values = mel.mapv(|v| v.max(cfg.log_floor).ln() as f32);
    MelSpectrogram::new(values, cfg.clone())
}
