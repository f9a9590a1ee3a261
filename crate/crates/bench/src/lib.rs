//! In-memory fixtures shared by the benchmarks. Weights are untrained; only
//! the cost of a forward pass matters here.

use ndarray::Array2;
use resgrad_core::basesynth::BaseModel;
use resgrad_core::diffcore::{DiffusionCheckpoint, NoiseSchedule, TrainConfig};
use resgrad_core::melpipe::{MelConfig, MelSpectrogram};
use resgrad_core::reg_baseline::{RegBaseline, ResUnet, ResUnetArch};
use resgrad_core::residual::{CondStats, ResidualStats};
use resgrad_core::scorenet::{ScoreNet, ScoreNetArch};
use resgrad_core::toy::{toy_utterance, ToyConfig};

/// Frame count of a typical toy utterance.
pub const FRAMES: usize = 128;

pub fn base_mel(frames: usize) -> MelSpectrogram {
    let cfg = ToyConfig {
        min_frames: frames,
        max_frames: frames,
        ..Default::default()
    };
    let gt = toy_utterance(&cfg, 0, 0);
    BaseModel::blur(2.0, 2.0)
        .and_then(|b| b.synthesize_from_gt(&gt, 0))
        .expect("blur base")
}

pub fn checkpoint(arch: &str) -> DiffusionCheckpoint {
    DiffusionCheckpoint {
        net: ScoreNet::new(ScoreNetArch::preset(arch).expect("arch"), 0).expect("score net"),
        schedule: NoiseSchedule::default_linear(),
        stats: ResidualStats::IDENTITY,
        cond_stats: CondStats {
            mean: -5.0,
            std: 3.0,
        },
        mel_config: MelConfig::toy(),
        base: BaseModel::blur(2.0, 2.0).expect("blur"),
        train: TrainConfig::default(),
        step: 0,
    }
}

pub fn baseline(arch: &str) -> RegBaseline {
    RegBaseline {
        net: ResUnet::new(ResUnetArch::preset(arch).expect("arch"), 0).expect("resunet"),
        stats: ResidualStats::IDENTITY,
        cond_stats: CondStats {
            mean: -5.0,
            std: 3.0,
        },
        mel_config: MelConfig::toy(),
        base: BaseModel::blur(2.0, 2.0).expect("blur"),
        train: TrainConfig::default(),
        step: 0,
    }
}

/// Deterministic pseudo-noise of the given shape.
pub fn noise(frames: usize, bins: usize) -> Array2<f64> {
    Array2::from_shape_fn((frames, bins), |(i, j)| {
        (((i * 31 + j * 17) % 97) as f64 / 48.5) - 1.0
    })
}
