//! Classical phase reconstruction for listening to mels without a neural vocoder.

use nalgebra::DMatrix;
use ndarray::Array2;
use rustfft::num_complex::Complex;

use super::audio::AudioClip;
use super::mel::{istft, mel_filterbank, stft, MelConfig, MelSpectrogram};
use crate::error::{Error, Result};

/// Non-negative least-squares-ish linear magnitude from log-mel:
/// `max(pinv(F) · exp(mel), 0)`, `frames × (n_fft/2 + 1)`.
pub fn mel_to_linear(mel: &MelSpectrogram) -> Result<Array2<f64>> {
    let cfg = &mel.config;
    let fb = mel_filterbank(cfg);
    let (m, k) = fb.dim();
    let fbm = DMatrix::from_fn(m, k, |i, j| fb[[i, j]]);
    let pinv = fbm
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Numerical(format!("filterbank pseudo-inverse: {e}")))?;
    let amp = mel.values.mapv(|v| (v as f64).exp());
    let mut out = Array2::zeros((mel.frames(), k));
    for f in 0..mel.frames() {
        for j in 0..k {
            let mut s = 0.0;
            for i in 0..m {
                s += pinv[(j, i)] * amp[[f, i]];
            }
            out[[f, j]] = s.max(0.0);
        }
    }
    Ok(out)
}

/// `‖ |STFT(x)| - target ‖_F / ‖target‖_F`
pub fn spectral_convergence(samples: &[f64], target: &Array2<f64>, cfg: &MelConfig) -> f64 {
    let spec = stft(samples, cfg);
    let mut num = 0.0;
    let mut den = 0.0;
    for (c, t) in spec.iter().zip(target.iter()) {
        num += (c.norm() - t).powi(2);
        den += t * t;
    }
    if den == 0.0 {
        return 0.0;
    }
    (num / den).sqrt()
}

/// Result of a phase-reconstruction run.
#[derive(Debug, Clone)]
pub struct Inversion {
    pub clip: AudioClip,
    pub spectral_convergence: f64,
}

/// Iterative phase reconstruction starting from zero phase.
pub fn griffin_lim(mel: &MelSpectrogram, iters: usize) -> Result<Inversion> {
    if iters == 0 {
        return Err(Error::InvalidArgument("iters must be >= 1".into()));
    }
    if mel.frames() < 2 {
        return Err(Error::Shape("need at least two frames to invert".into()));
    }
    let cfg = &mel.config;
    cfg.validate()?;
    let target = mel_to_linear(mel)?;
    let mut spec = target.mapv(|m| Complex::new(m, 0.0));
    let mut x = istft(&spec, cfg);
    for _ in 0..iters {
        let est = stft(&x, cfg);
        for (s, (e, m)) in spec.iter_mut().zip(est.iter().zip(target.iter())) {
            let n = e.norm();
            *s = if n > 1e-12 {
                e * (*m / n)
            } else {
                Complex::new(*m, 0.0)
            };
        }
        x = istft(&spec, cfg);
    }
    let sc = spectral_convergence(&x, &target, cfg);
    let samples = x.iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect();
    Ok(Inversion {
        clip: AudioClip::new(samples, cfg.sample_rate)?,
        spectral_convergence: sc,
    })
}

pub fn griffin_lim_invert(mel: &MelSpectrogram, iters: usize) -> Result<AudioClip> {
    griffin_lim(mel, iters).map(|inv| inv.clip)
}
