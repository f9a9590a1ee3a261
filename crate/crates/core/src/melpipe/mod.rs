//! Audio ingestion, log-mel extraction and Griffin-Lim inversion.

mod audio;
mod griffin_lim;
mod mel;

pub use audio::{load_audio, write_wav, AudioClip};
pub use griffin_lim::{
    griffin_lim, griffin_lim_invert, mel_to_linear, spectral_convergence, Inversion,
};
pub use mel::{
    extract_mel, hann_window, hz_to_mel, istft, mel_center_frequencies, mel_filterbank, mel_to_hz,
    preset_config, stft, MelConfig, MelSpectrogram, DEFAULT_LOG_FLOOR,
};
