use std::f64::consts::{LN_10, PI};

use crate::error::{Error, Result};
use crate::melpipe::MelSpectrogram;

/// Natural-log amplitude to decibels.
pub const DB_PER_NEPER: f64 = 10.0 / LN_10;

/// Number of cepstral coefficients compared by [`mcd`] (coefficient 0 excluded).
pub const MCD_COEFFS: usize = 13;

fn check_shapes(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "metric inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.frames() == 0 {
        return Err(Error::Shape("metric inputs are empty".into()));
    }
    Ok(())
}

/// Log-spectral distance in dB: per-frame RMS of the dB difference, averaged
/// over frames.
pub fn lsd(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    check_shapes(a, b)?;
    let n_mels = a.n_mels() as f64;
    let total: f64 = a
        .values
        .outer_iter()
        .zip(b.values.outer_iter())
        .map(|(ra, rb)| {
            let ms = ra
                .iter()
                .zip(rb.iter())
                .map(|(x, y)| (DB_PER_NEPER * (*x as f64 - *y as f64)).powi(2))
                .sum::<f64>()
                / n_mels;
            ms.sqrt()
        })
        .sum();
    Ok(total / a.frames() as f64)
}

/// Orthonormal DCT-II coefficients `1..=MCD_COEFFS` of one log-mel frame.
fn cepstrum(frame: impl Iterator<Item = f64> + Clone, n: usize) -> [f64; MCD_COEFFS] {
    let mut out = [0.0; MCD_COEFFS];
    let scale = (2.0 / n as f64).sqrt();
    for (k, c) in out.iter_mut().enumerate() {
        let k = k + 1;
        *c = scale
            * frame
                .clone()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (i as f64 + 0.5) / n as f64).cos())
                .sum::<f64>();
    }
    out
}

/// Mel-cepstral distance in dB, `10·√2/ln10 · mean_frames ‖c_a − c_b‖`.
pub fn mcd(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.n_mels();
    let k = 10.0 * 2f64.sqrt() / LN_10;
    let mut total = 0.0;
    for (ra, rb) in a.values.outer_iter().zip(b.values.outer_iter()) {
        let diff = ra.iter().zip(rb.iter()).map(|(x, y)| *x as f64 - *y as f64);
        let c = cepstrum(diff, n);
        total += c.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    Ok(k * total / a.frames() as f64)
}

/// Mean squared entry of a residual matrix.
pub fn residual_energy(gt: &MelSpectrogram, base: &MelSpectrogram) -> Result<f64> {
    check_shapes(gt, base)?;
    let n = gt.values.len() as f64;
    Ok(gt
        .values
        .iter()
        .zip(base.values.iter())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Wall time over audio duration.
pub fn rtf(audio_seconds: f64, wall_seconds: f64) -> Result<f64> {
    if !(audio_seconds > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "audio duration must be positive, got {audio_seconds}"
        )));
    }
    if !(wall_seconds >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "wall time must be non-negative, got {wall_seconds}"
        )));
    }
    Ok(wall_seconds / audio_seconds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::melpipe::MelConfig;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mel(seed: u64, frames: usize, bins: usize) -> MelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = MelConfig {
            n_mels: bins,
            ..MelConfig::toy()
        };
        MelSpectrogram::new(
            Array2::from_shape_fn((frames, bins), |_| rng.gen_range(-8.0..2.0)),
            cfg,
        )
        .unwrap()
    }

    fn naive_lsd(a: &MelSpectrogram, b: &MelSpectrogram) -> f64 {
        let (t, m) = a.shape();
        let mut acc = 0.0;
        for i in 0..t {
            let mut s = 0.0;
            for j in 0..m {
                let d = 10.0 / 10f64.ln() * (a.values[[i, j]] as f64 - b.values[[i, j]] as f64);
                s += d * d;
            }
            acc += (s / m as f64).sqrt();
        }
        acc / t as f64
    }

    fn naive_mcd(a: &MelSpectrogram, b: &MelSpectrogram) -> f64 {
        let (t, m) = a.shape();
        let dct = |row: Vec<f64>, k: usize| -> f64 {
            let mut s = 0.0;
            for (i, v) in row.iter().enumerate() {
                s += v * (std::f64::consts::PI / m as f64 * (i as f64 + 0.5) * k as f64).cos();
            }
            s * (2.0 / m as f64).sqrt()
        };
        let mut acc = 0.0;
        for i in 0..t {
            let ra: Vec<f64> = (0..m).map(|j| a.values[[i, j]] as f64).collect();
            let rb: Vec<f64> = (0..m).map(|j| b.values[[i, j]] as f64).collect();
            let mut s = 0.0;
            for k in 1..=13 {
                let d = dct(ra.clone(), k) - dct(rb.clone(), k);
                s += d * d;
            }
            acc += s.sqrt();
        }
        10.0 * 2f64.sqrt() / 10f64.ln() * acc / t as f64
    }

    #[test]
    fn lsd_units() {
        let a = random_mel(1, 9, 64);
        assert_eq!(lsd(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.values.mapv_inplace(|v| (v as f64 + LN_10 / 10.0) as f32);
        assert!((lsd(&a, &b).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn lsd_matches_naive() {
        let a = random_mel(2, 31, 80);
        let b = random_mel(3, 31, 80);
        assert!((lsd(&a, &b).unwrap() - naive_lsd(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn mcd_matches_naive_and_ignores_dc() {
        let a = random_mel(4, 17, 64);
        let b = random_mel(5, 17, 64);
        assert!((mcd(&a, &b).unwrap() - naive_mcd(&a, &b)).abs() < 1e-9);
        assert_eq!(mcd(&a, &a).unwrap(), 0.0);
        let mut c = a.clone();
        c.values.mapv_inplace(|v| v + 0.75);
        assert!(mcd(&c, &a).unwrap() < 1e-5);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = random_mel(1, 9, 64);
        let b = random_mel(1, 10, 64);
        assert!(matches!(lsd(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(mcd(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn rtf_arithmetic() {
        assert!((rtf(10.0, 1.0).unwrap() - 0.1).abs() < 1e-15);
        assert!(rtf(0.0, 1.0).is_err());
        assert!(rtf(-1.0, 1.0).is_err());
        // reference ratio from the published ResGrad-50 / ResGrad-4 timings
        assert!((0.169f64 / 0.018 - 9.4).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn metrics_symmetric_and_nonnegative(s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = random_mel(s1, 6, 32);
            let b = random_mel(s2, 6, 32);
            let l = lsd(&a, &b).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!((l - lsd(&b, &a).unwrap()).abs() < 1e-12);
            let m = mcd(&a, &b).unwrap();
            prop_assert!(m >= 0.0);
            prop_assert!((m - mcd(&b, &a).unwrap()).abs() < 1e-9);
        }
    }
}
