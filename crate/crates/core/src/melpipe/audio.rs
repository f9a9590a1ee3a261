use std::path::Path;

use crate::error::{Error, Result};

/// Mono waveform with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Audio("zero-length audio".into()));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::Audio(format!("sample {bad} outside [-1, 1]")));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        let s: f64 = self.samples.iter().map(|v| (*v as f64).powi(2)).sum();
        (s / self.samples.len() as f64).sqrt()
    }
}

/// Read a 16- or 24-bit PCM WAV file. Multi-channel files keep channel 0.
pub fn load_audio(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || !matches!(spec.bits_per_sample, 16 | 24) {
        return Err(Error::Audio(format!(
            "{}: only 16/24-bit integer PCM is supported (got {:?} {}-bit)",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let full_scale = (1u32 << (spec.bits_per_sample - 1)) as f32;
    let channels = spec.channels.max(1) as usize;
    let mut samples = Vec::with_capacity(reader.len() as usize / channels);
    for (i, s) in reader.samples::<i32>().enumerate() {
        let s = s.map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
        if i % channels == 0 {
            samples.push(s as f32 / full_scale);
        }
    }
    AudioClip::new(samples, spec.sample_rate)
}

/// Write a clip as 16-bit mono PCM.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio(other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for s in &clip.samples {
        let v = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}
