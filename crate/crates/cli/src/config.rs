//! Run configuration: file values, then flag overrides, then the
//! `RESGRAD_SEED` environment fallback for the seed.

use std::path::{Path, PathBuf};

use resgrad_core::basesynth::{BaseModel, PitchMode};
use resgrad_core::diffcore::TrainConfig;
use resgrad_core::kvconfig;
use resgrad_core::sampler::SigmaKind;
use resgrad_core::{Error, Result};

pub const SEED_ENV: &str = "RESGRAD_SEED";
pub const RESOLVED_FILE: &str = "resolved.cfg";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Resgrad,
    Resunet,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resgrad" => Ok(ModelKind::Resgrad),
            "resunet" => Ok(ModelKind::Resunet),
            o => Err(Error::Config(format!(
                "unknown model `{o}` (expected resgrad or resunet)"
            ))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Resgrad => "resgrad",
            ModelKind::Resunet => "resunet",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseChoice {
    Blur,
    Regressor,
}

impl std::str::FromStr for BaseChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blur" => Ok(BaseChoice::Blur),
            "regressor" => Ok(BaseChoice::Regressor),
            o => Err(Error::Config(format!(
                "unknown base `{o}` (expected blur or regressor)"
            ))),
        }
    }
}

impl std::fmt::Display for BaseChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaseChoice::Blur => "blur",
            BaseChoice::Regressor => "regressor",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `toy` or a real-audio mel preset.
    pub preset: String,
    pub model: ModelKind,
    pub arch: String,
    pub base: BaseChoice,
    pub sigma: (f64, f64),
    pub pitch_mode: PitchMode,
    pub pitch_seed: u64,
    pub n_utts: usize,
    pub first_index: u64,
    pub train: TrainConfig,
    pub sample_steps: usize,
    pub sigma_kind: SigmaKind,
    pub regressor_steps: usize,
    /// Step counts evaluated by `eval` and `bench`.
    pub eval_steps: Vec<usize>,
    pub timing_repeats: usize,
    /// Utterances timed by `bench`; 0 times all of them.
    pub timing_utts: usize,
    pub jobs: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Checkpoint directories; `bench` accepts several.
    pub ckpt: Vec<PathBuf>,
    seed_set: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "toy".into(),
            model: ModelKind::Resgrad,
            arch: "desk".into(),
            base: BaseChoice::Blur,
            sigma: (2.0, 2.0),
            pitch_mode: PitchMode::GtPitch,
            pitch_seed: 0,
            n_utts: 512,
            first_index: 0,
            train: TrainConfig::default(),
            sample_steps: 4,
            sigma_kind: SigmaKind::default(),
            regressor_steps: 2000,
            eval_steps: vec![4, 50],
            timing_repeats: 5,
            timing_utts: 0,
            jobs: 1,
            data: None,
            out: None,
            ckpt: Vec::new(),
            seed_set: false,
        }
    }
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("`{key}` expects two comma-separated numbers")))?;
    Ok((
        kvconfig::value(key, a.trim())?,
        kvconfig::value(key, b.trim())?,
    ))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "preset",
        "model",
        "arch",
        "base",
        "sigma",
        "pitch_mode",
        "pitch_seed",
        "n_utts",
        "first_index",
        "sample_steps",
        "sigma_kind",
        "regressor_steps",
        "eval_steps",
        "timing_repeats",
        "timing_utts",
        "jobs",
        "data",
        "out",
        "ckpt",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if self.train.set(key, v)? {
            if key == "seed" {
                self.seed_set = true;
            }
            return Ok(());
        }
        match key {
            "preset" => self.preset = v.to_string(),
            "model" => self.model = v.parse()?,
            "arch" => self.arch = v.to_string(),
            "base" => self.base = v.parse()?,
            "sigma" => self.sigma = parse_pair(key, v)?,
            "pitch_mode" => self.pitch_mode = v.parse()?,
            "pitch_seed" => self.pitch_seed = kvconfig::value(key, v)?,
            "n_utts" => self.n_utts = kvconfig::value(key, v)?,
            "first_index" => self.first_index = kvconfig::value(key, v)?,
            "sample_steps" => self.sample_steps = kvconfig::value(key, v)?,
            "sigma_kind" => self.sigma_kind = v.parse()?,
            "regressor_steps" => self.regressor_steps = kvconfig::value(key, v)?,
            "eval_steps" => {
                self.eval_steps = v
                    .split(',')
                    .map(|x| kvconfig::value(key, x.trim()))
                    .collect::<Result<_>>()?
            }
            "timing_repeats" => self.timing_repeats = kvconfig::value(key, v)?,
            "timing_utts" => self.timing_utts = kvconfig::value(key, v)?,
            "jobs" => self.jobs = kvconfig::value(key, v)?,
            "data" => self.data = opt_path(v),
            "out" => self.out = opt_path(v),
            "ckpt" => self.ckpt = v.split(',').filter_map(|p| opt_path(p.trim())).collect(),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Builds the config from an optional file plus ordered overrides.
    /// `env_seed` is consulted only when neither source sets `seed`.
    pub fn resolve(
        file: Option<&Path>,
        overrides: &[(String, String)],
        env_seed: Option<&str>,
    ) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            for (k, v) in kvconfig::read(path)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        if !cfg.seed_set {
            if let Some(s) = env_seed {
                cfg.train.seed = kvconfig::value(SEED_ENV, s.trim())?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        if self.n_utts == 0 {
            return Err(Error::Config("n_utts must be >= 1".into()));
        }
        for &n in self.eval_steps.iter().chain([&self.sample_steps]) {
            if n == 0 || n > self.train.t_max {
                return Err(Error::Config(format!(
                    "sampler steps {n} must lie in 1..={}",
                    self.train.t_max
                )));
            }
        }
        if self.eval_steps.is_empty() || self.timing_repeats == 0 {
            return Err(Error::Config(
                "eval_steps and timing_repeats must be nonempty".into(),
            ));
        }
        if !(self.sigma.0 >= 0.0 && self.sigma.1 >= 0.0) {
            return Err(Error::Config("sigma values must be >= 0".into()));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("preset".to_string(), self.preset.clone()),
            ("model".into(), self.model.to_string()),
            ("arch".into(), self.arch.clone()),
            ("base".into(), self.base.to_string()),
            ("sigma".into(), format!("{},{}", self.sigma.0, self.sigma.1)),
            ("pitch_mode".into(), self.pitch_mode.to_string()),
            ("pitch_seed".into(), self.pitch_seed.to_string()),
            ("n_utts".into(), self.n_utts.to_string()),
            ("first_index".into(), self.first_index.to_string()),
            ("sample_steps".into(), self.sample_steps.to_string()),
            ("sigma_kind".into(), self.sigma_kind.to_string()),
            ("regressor_steps".into(), self.regressor_steps.to_string()),
            (
                "eval_steps".into(),
                self.eval_steps
                    .iter()
                    .map(|n| n.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("timing_repeats".into(), self.timing_repeats.to_string()),
            ("timing_utts".into(), self.timing_utts.to_string()),
            ("jobs".into(), self.jobs.to_string()),
            ("data".into(), path_str(&self.data)),
            ("out".into(), path_str(&self.out)),
            (
                "ckpt".into(),
                self.ckpt
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        ];
        out.extend(self.train.pairs());
        out
    }

    pub fn render(&self) -> String {
        kvconfig::render(&self.pairs())
    }

    /// Writes the resolved config into `dir`, creating it if needed.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_FILE);
        std::fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Blur base from `sigma`/`pitch_*`; regressor bases are fitted by `prepare`.
    pub fn blur_base(&self) -> Result<BaseModel> {
        Ok(BaseModel::blur(self.sigma.0, self.sigma.1)?
            .with_pitch(self.pitch_mode, self.pitch_seed))
    }

    pub fn require_data(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("missing data directory (--data or data = ...)".into()))
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("missing output path (--out or out = ...)".into()))
    }

    pub fn require_ckpt(&self) -> Result<&Path> {
        match self.ckpt.as_slice() {
            [one] => Ok(one),
            [] => Err(Error::Config(
                "missing checkpoint (--ckpt or ckpt = ...)".into(),
            )),
            _ => Err(Error::Config(
                "this command takes exactly one checkpoint".into(),
            )),
        }
    }
}
