use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use resgrad_core::{Error, Result};

use crate::commands::{self, PlotKind};
use crate::config::{RunConfig, SEED_ENV};

#[derive(Debug, Parser)]
#[command(
    name = "resgrad",
    version,
    about = "Residual diffusion refinement of mel-spectrograms"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options every configurable command accepts.
#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// key = value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Falls back to RESGRAD_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct BaseArgs {
    /// blur or regressor.
    #[arg(long)]
    pub base: Option<String>,
    /// Blur widths as `time,freq`.
    #[arg(long)]
    pub sigma: Option<String>,
    /// gt_pitch or pred_pitch.
    #[arg(long)]
    pub pitch_mode: Option<String>,
    #[arg(long)]
    pub regressor_steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract mels from a directory of WAV files and synthesize base mels.
    Prepare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        base: BaseArgs,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Generate the synthetic harmonic-stack corpus.
    GenToy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        base: BaseArgs,
        #[arg(long)]
        n_utts: Option<usize>,
        /// Index of the first utterance; held-out sets use a disjoint range.
        #[arg(long)]
        first_index: Option<u64>,
    },
    /// Train the diffusion refiner or the regression baseline.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// resgrad or resunet.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        arch: Option<String>,
        /// Optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        crop_seconds: Option<f64>,
    },
    /// Refine one mel file or a directory of mel files.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Sampler steps.
        #[arg(long)]
        steps: Option<usize>,
        /// beta or beta_tilde.
        #[arg(long)]
        sigma_kind: Option<String>,
        #[arg(long = "in")]
        input: PathBuf,
        /// Directory for per-step chain states and their figure.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Metrics for one checkpoint on a held-out corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated sampler step counts.
        #[arg(long)]
        steps: Option<String>,
        #[arg(long)]
        sigma_kind: Option<String>,
    },
    /// Metrics plus median-of-repeats timing for several checkpoints.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1..)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<String>,
        #[arg(long)]
        sigma_kind: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Time only the first K utterances.
        #[arg(long)]
        timing_utts: Option<usize>,
    },
    /// Render figures.
    Plot {
        #[command(subcommand)]
        kind: PlotCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum PlotCommand {
    /// base | refined | ground truth.
    Triptych {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        refined: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ground-truth residual next to the sampled residual.
    Residual {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        refined: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One panel per sampler step from a saved trajectory tensor.
    Trajectory {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn new(common: &Common) -> Result<Self> {
        let mut o = Overrides(Vec::new());
        for kv in &common.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
            o.0.push((k.trim().to_string(), v.trim().to_string()));
        }
        o.opt("seed", common.seed);
        o.opt("jobs", common.jobs);
        o.opt("out", common.out.as_ref().map(|p| p.display()));
        Ok(o)
    }

    fn opt(&mut self, key: &str, v: Option<impl ToString>) {
        if let Some(v) = v {
            self.0.push((key.to_string(), v.to_string()));
        }
    }

    fn base(&mut self, b: &BaseArgs) {
        self.opt("base", b.base.as_ref());
        self.opt("sigma", b.sigma.as_ref());
        self.opt("pitch_mode", b.pitch_mode.as_ref());
        self.opt("regressor_steps", b.regressor_steps);
    }

    fn resolve(self, common: &Common) -> Result<RunConfig> {
        let env = std::env::var(SEED_ENV).ok();
        RunConfig::resolve(common.config.as_deref(), &self.0, env.as_deref())
    }
}

impl Cli {
    pub fn run(self) -> Result<()> {
        match self.command {
            Command::Prepare {
                common,
                base,
                preset,
                input,
            } => {
                let mut o = Overrides::new(&common)?;
                o.base(&base);
                o.opt("preset", preset);
                commands::prepare(&o.resolve(&common)?, &input)
            }
            Command::GenToy {
                common,
                base,
                n_utts,
                first_index,
            } => {
                let mut o = Overrides::new(&common)?;
                o.base(&base);
                o.opt("n_utts", n_utts);
                o.opt("first_index", first_index);
                commands::gen_toy(&o.resolve(&common)?)
            }
            Command::Train {
                common,
                data,
                model,
                arch,
                steps,
                lr,
                batch,
                crop_seconds,
            } => {
                let mut o = Overrides::new(&common)?;
                o.opt("data", data.as_ref().map(|p| p.display()));
                o.opt("model", model);
                o.opt("arch", arch);
                o.opt("steps", steps);
                o.opt("lr", lr);
                o.opt("batch", batch);
                o.opt("crop_seconds", crop_seconds);
                commands::train_cmd(&o.resolve(&common)?)
            }
            Command::Refine {
                common,
                ckpt,
                steps,
                sigma_kind,
                input,
                trajectory,
            } => {
                let mut o = Overrides::new(&common)?;
                o.opt("ckpt", ckpt.as_ref().map(|p| p.display()));
                o.opt("sample_steps", steps);
                o.opt("sigma_kind", sigma_kind);
                commands::refine_cmd(&o.resolve(&common)?, &input, trajectory.as_deref())
            }
            Command::Eval {
                common,
                ckpt,
                data,
                steps,
                sigma_kind,
            } => {
                let mut o = Overrides::new(&common)?;
                o.opt("ckpt", ckpt.as_ref().map(|p| p.display()));
                o.opt("data", data.as_ref().map(|p| p.display()));
                o.opt("eval_steps", steps);
                o.opt("sigma_kind", sigma_kind);
                let cfg = o.resolve(&common)?;
                cfg.require_ckpt()?;
                commands::evaluate(&cfg, 1, "eval").map(|_| ())
            }
            Command::Bench {
                common,
                ckpt,
                data,
                steps,
                sigma_kind,
                repeats,
                timing_utts,
            } => {
                let mut o = Overrides::new(&common)?;
                if !ckpt.is_empty() {
                    let list: Vec<String> = ckpt.iter().map(|p| p.display().to_string()).collect();
                    o.opt("ckpt", Some(list.join(",")));
                }
                o.opt("data", data.as_ref().map(|p| p.display()));
                o.opt("eval_steps", steps);
                o.opt("sigma_kind", sigma_kind);
                o.opt("timing_repeats", repeats);
                o.opt("timing_utts", timing_utts);
                let cfg = o.resolve(&common)?;
                commands::evaluate(&cfg, cfg.timing_repeats, "bench").map(|_| ())
            }
            Command::Plot { kind } => match kind {
                PlotCommand::Triptych {
                    base,
                    refined,
                    gt,
                    out,
                } => commands::plot_cmd(
                    PlotKind::Triptych {
                        base: &base,
                        refined: &refined,
                        gt: &gt,
                    },
                    &out,
                ),
                PlotCommand::Residual {
                    base,
                    refined,
                    gt,
                    out,
                } => commands::plot_cmd(
                    PlotKind::Residual {
                        base: &base,
                        refined: &refined,
                        gt: &gt,
                    },
                    &out,
                ),
                PlotCommand::Trajectory { input, out } => {
                    commands::plot_cmd(PlotKind::Trajectory { states: &input }, &out)
                }
            },
        }
    }
}
