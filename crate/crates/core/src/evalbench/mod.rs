//! Objective quality metrics and inference-speed measurement.

mod bench;
mod metrics;

pub use bench::{
    bench, from_csv, to_csv, utt_seed, write_reports, BenchConfig, BenchModel, BenchUtt,
    MetricReport, Refiner, CSV_COLUMNS, ONE_SHOT_STEPS,
};
pub use metrics::{lsd, mcd, residual_energy, rtf, DB_PER_NEPER, MCD_COEFFS};
