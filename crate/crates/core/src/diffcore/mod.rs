//! Forward noising process, score targets, the training objective and loop,
//! and the on-disk checkpoint format.

pub mod checkpoint;
mod schedule;
mod score;
mod train;

pub use checkpoint::DiffusionCheckpoint;
pub use schedule::{
    gaussian_analytic_score, q_sample, score_target, NoiseSchedule, NoisedSample, ScheduleSpec,
    DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T,
};
pub use score::{
    loss, score_loss, AffineScore, GaussianOracle, ScoreFunction, ScoreModel, ZeroResidualOracle,
};
pub use train::{
    eval_loss, smooth, train, BatchOrder, LossWeighting, TrainConfig, TrainEvent, TrainReport,
};
