//! Checkpoint directory: `manifest.json` plus one TNSR file per tensor.
//!
//! Shared by the diffusion refiner and the regression baseline. A regressor
//! base model stores its weights in the same directory under `base/`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schedule::{NoiseSchedule, ScheduleSpec};
use super::score::ScoreModel;
use super::train::TrainConfig;
use crate::basesynth::{BaseKind, BaseModel, BaseSpec, Regressor};
use crate::error::{Error, Result};
use crate::melio::{decode_tensor, encode_tensor};
use crate::melpipe::{MelConfig, MelSpectrogram};
use crate::nn::Parameterized;
use crate::reg_baseline::ResUnetArch;
use crate::residual::{CondStats, ResidualStats};
use crate::sampler::{refine, RefineContext, RefinementResult, SamplerPlan};
use crate::scorenet::{ScoreNet, ScoreNetArch};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    ScoreNet {
        arch: ScoreNetArch,
        schedule: ScheduleSpec,
    },
    ResUnet {
        arch: ResUnetArch,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelSpec,
    pub param_count: usize,
    pub step: u64,
    pub stats: ResidualStats,
    pub cond_stats: CondStats,
    pub mel_config: MelConfig,
    pub base: BaseSpec,
    pub train: TrainConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub base_tensors: Vec<TensorEntry>,
}

/// Writes every parameter (and buffer) of `model` into `dir/prefix`.
pub fn save_params(
    dir: &Path,
    prefix: &str,
    model: &dyn Parameterized,
) -> Result<Vec<TensorEntry>> {
    let sub = dir.join(prefix);
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let mut entries = Vec::new();
    let mut err = None;
    model.visit(&mut |p| {
        if err.is_some() {
            return;
        }
        let file = if prefix.is_empty() {
            format!("{}.tnsr", p.name)
        } else {
            format!("{prefix}/{}.tnsr", p.name)
        };
        let path = dir.join(&file);
        let res = encode_tensor(&p.shape, &p.value)
            .and_then(|bytes| fs::write(&path, bytes).map_err(|e| Error::io(&path, e)));
        match res {
            Ok(()) => entries.push(TensorEntry {
                name: p.name.clone(),
                file,
                dims: p.shape.clone(),
            }),
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(entries),
    }
}

/// Fills `model` from tensor files; names, order and dims must match.
pub fn load_params(
    dir: &Path,
    entries: &[TensorEntry],
    model: &mut dyn Parameterized,
) -> Result<()> {
    let mut i = 0;
    let mut err = None;
    model.visit_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        let Some(e) = entries.get(i) else {
            err = Some(Error::Format(format!(
                "checkpoint lacks tensor `{}`",
                p.name
            )));
            return;
        };
        i += 1;
        if e.name != p.name || e.dims != p.shape {
            err = Some(Error::Format(format!(
                "tensor `{}` {:?} does not match model `{}` {:?}",
                e.name, e.dims, p.name, p.shape
            )));
            return;
        }
        let path = dir.join(&e.file);
        let loaded = fs::read(&path)
            .map_err(|x| Error::io(&path, x))
            .and_then(|b| decode_tensor(&b));
        match loaded {
            Ok((dims, data)) if dims == p.shape => p.value = data,
            Ok((dims, _)) => err = Some(Error::Format(format!("{}: stored dims {dims:?}", e.file))),
            Err(x) => err = Some(x),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != entries.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {i}",
            entries.len()
        )));
    }
    Ok(())
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format {} (expected {CHECKPOINT_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

pub fn save_base(dir: &Path, base: &BaseModel) -> Result<Vec<TensorEntry>> {
    match &base.kind {
        BaseKind::Blur { .. } => Ok(Vec::new()),
        BaseKind::Regressor(net) => save_params(dir, "base", net.as_ref()),
    }
}

pub fn load_base(
    dir: &Path,
    spec: &BaseSpec,
    entries: &[TensorEntry],
    mel: &MelConfig,
) -> Result<BaseModel> {
    match spec {
        BaseSpec::Blur { .. } => BaseModel::from_blur_spec(spec),
        BaseSpec::Regressor {
            pitch_mode,
            pitch_seed,
        } => {
            let mut net = Regressor::new(mel.n_mels, 0);
            load_params(dir, entries, &mut net)?;
            Ok(BaseModel {
                kind: BaseKind::Regressor(Box::new(net)),
                pitch_mode: *pitch_mode,
                pitch_seed: *pitch_seed,
            })
        }
    }
}

pub const BASE_FILE: &str = "base.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BaseManifest {
    format_version: u32,
    base: BaseSpec,
    mel_config: MelConfig,
    tensors: Vec<TensorEntry>,
}

/// Stores a base model on its own (corpus directories carry one so that
/// training can record which base produced the conditioning).
pub fn save_base_model(dir: &Path, base: &BaseModel, mel: &MelConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = BaseManifest {
        format_version: CHECKPOINT_VERSION,
        base: base.spec(),
        mel_config: mel.clone(),
        tensors: save_base(dir, base)?,
    };
    let path = dir.join(BASE_FILE);
    fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&path, e))
}

pub fn load_base_model(dir: &Path) -> Result<(BaseModel, MelConfig)> {
    let path = dir.join(BASE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: BaseManifest = serde_json::from_str(&text)?;
    if m.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{}: format {}",
            path.display(),
            m.format_version
        )));
    }
    Ok((
        load_base(dir, &m.base, &m.tensors, &m.mel_config)?,
        m.mel_config,
    ))
}

/// A trained diffusion refiner and everything needed to run it.
#[derive(Debug, Clone)]
pub struct DiffusionCheckpoint {
    pub net: ScoreNet,
    pub schedule: NoiseSchedule,
    pub stats: ResidualStats,
    pub cond_stats: CondStats,
    pub mel_config: MelConfig,
    pub base: BaseModel,
    pub train: TrainConfig,
    pub step: u64,
}

impl DiffusionCheckpoint {
    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Refines one base mel with this checkpoint's score network.
    pub fn refine(
        &self,
        base: &MelSpectrogram,
        plan: &SamplerPlan,
        seed: u64,
        keep_trajectory: bool,
    ) -> Result<RefinementResult> {
        if base.config != self.mel_config {
            return Err(Error::Config(
                "base mel config differs from the checkpoint's".into(),
            ));
        }
        let model = ScoreModel {
            net: &self.net,
            schedule: &self.schedule,
        };
        let ctx = RefineContext {
            score: &model,
            schedule: &self.schedule,
            stats: self.stats,
            cond_stats: self.cond_stats,
        };
        refine(base, &ctx, plan, seed, keep_trajectory)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: CHECKPOINT_VERSION,
            model: ModelSpec::ScoreNet {
                arch: self.net.arch().clone(),
                schedule: self.schedule.spec,
            },
            param_count: self.net.param_count(),
            step: self.step,
            stats: self.stats,
            cond_stats: self.cond_stats,
            mel_config: self.mel_config.clone(),
            base: self.base.spec(),
            train: self.train.clone(),
            tensors: Vec::new(),
            base_tensors: Vec::new(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut m = self.manifest();
        m.tensors = save_params(dir, "", &self.net)?;
        m.base_tensors = save_base(dir, &self.base)?;
        write_manifest(dir, &m)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m = read_manifest(dir)?;
        let ModelSpec::ScoreNet { arch, schedule } = &m.model else {
            return Err(Error::Format(
                "checkpoint does not hold a score network".into(),
            ));
        };
        let mut net = ScoreNet::new(arch.clone(), 0)?;
        load_params(dir, &m.tensors, &mut net)?;
        Ok(DiffusionCheckpoint {
            net,
            schedule: NoiseSchedule::from_spec(*schedule)?,
            stats: m.stats,
            cond_stats: m.cond_stats,
            base: load_base(dir, &m.base, &m.base_tensors, &m.mel_config)?,
            mel_config: m.mel_config,
            train: m.train,
            step: m.step,
        })
    }
}
