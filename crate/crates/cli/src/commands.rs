use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array2;
use rayon::prelude::*;
use resgrad_core::basesynth::{fit_regressor, BaseModel, FeatureSeq, RegressorTrainConfig};
use resgrad_core::diffcore::checkpoint::{
    load_base_model, read_manifest, save_base_model, ModelSpec,
};
use resgrad_core::diffcore::{train, DiffusionCheckpoint, TrainEvent};
use resgrad_core::evalbench::{
    bench, utt_seed, write_reports, BenchConfig, BenchModel, BenchUtt, MetricReport, Refiner,
};
use resgrad_core::melio::{encode_tensor, load_mel, save_mel};
use resgrad_core::melpipe::{extract_mel, load_audio, preset_config, MelConfig, MelSpectrogram};
use resgrad_core::nn::Parameterized;
use resgrad_core::reg_baseline::{
    fit_baseline, refine_with_baseline, RegBaseline, ResUnet, ResUnetArch,
};
use resgrad_core::residual::{load_corpus, write_manifest, ManifestEntry, ResidualDataset};
use resgrad_core::sampler::{plan_steps, RefinementResult};
use resgrad_core::scorenet::{ScoreNet, ScoreNetArch};
use resgrad_core::toy::{toy_utterance, utt_id, ToyConfig};
use resgrad_core::{Error, Result};

use crate::config::{BaseChoice, ModelKind, RunConfig};
use crate::plot;

pub const CORPUS_MANIFEST: &str = "manifest.json";
pub const TRAIN_LOG: &str = "train_log.csv";

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `gt/`, `base/`, `manifest.json` and `base.json` under `out`.
fn write_corpus(
    out: &Path,
    utts: &[(String, MelSpectrogram, MelSpectrogram)],
    base: &BaseModel,
    mel: &MelConfig,
) -> Result<()> {
    create_dir(&out.join("gt"))?;
    create_dir(&out.join("base"))?;
    let mut entries = Vec::with_capacity(utts.len());
    for (id, gt, b) in utts {
        let gt_path = PathBuf::from("gt").join(format!("{id}.mels"));
        let base_path = PathBuf::from("base").join(format!("{id}.mels"));
        save_mel(out.join(&gt_path), gt)?;
        save_mel(out.join(&base_path), b)?;
        entries.push(ManifestEntry {
            utt_id: id.clone(),
            gt_path,
            base_path,
        });
    }
    write_manifest(out.join(CORPUS_MANIFEST), &entries)?;
    save_base_model(out, base, mel)
}

/// Builds base mels for ground-truth mels at `indices`, fitting a regressor
/// first when configured.
fn make_base(
    cfg: &RunConfig,
    gts: &[MelSpectrogram],
    indices: &[u64],
) -> Result<(BaseModel, Vec<MelSpectrogram>)> {
    let base = match cfg.base {
        BaseChoice::Blur => cfg.blur_base()?,
        BaseChoice::Regressor => {
            let pairs: Vec<_> = gts
                .iter()
                .map(|g| (FeatureSeq::from_mel(g), g.clone()))
                .collect();
            let rc = RegressorTrainConfig {
                steps: cfg.regressor_steps,
                seed: cfg.seed(),
                ..Default::default()
            };
            info!("fitting regressor base on {} utterances", pairs.len());
            let (model, report) = fit_regressor(&pairs, &rc)?;
            if let Some(l) = report.losses.last() {
                info!("regressor final loss {l:.5}");
            }
            model.with_pitch(cfg.pitch_mode, cfg.pitch_seed)
        }
    };
    let bases = pool(cfg.jobs)?.install(|| {
        gts.par_iter()
            .zip(indices)
            .map(|(g, i)| base.synthesize_from_gt(g, *i))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok((base, bases))
}

pub fn gen_toy(cfg: &RunConfig) -> Result<()> {
    let out = cfg.require_out()?;
    cfg.write_resolved(out)?;
    let toy = ToyConfig::default();
    let indices: Vec<u64> = (cfg.first_index..cfg.first_index + cfg.n_utts as u64).collect();
    let gts: Vec<MelSpectrogram> = pool(cfg.jobs)?.install(|| {
        indices
            .par_iter()
            .map(|i| toy_utterance(&toy, cfg.seed(), *i))
            .collect()
    });
    let (base, bases) = make_base(cfg, &gts, &indices)?;
    let utts: Vec<_> = indices
        .iter()
        .zip(gts)
        .zip(bases)
        .map(|((i, g), b)| (utt_id(*i), g, b))
        .collect();
    write_corpus(out, &utts, &base, &MelConfig::toy())?;
    info!("wrote {} toy utterances to {}", utts.len(), out.display());
    Ok(())
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn prepare(cfg: &RunConfig, input: &Path) -> Result<()> {
    let out = cfg.require_out()?;
    cfg.write_resolved(out)?;
    let mel_cfg = preset_config(&cfg.preset)?;
    let wavs = sorted_files(input, "wav")?;
    if wavs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .wav files in {}",
            input.display()
        )));
    }
    let gts = pool(cfg.jobs)?.install(|| {
        wavs.par_iter()
            .map(|p| extract_mel(&load_audio(p)?, &mel_cfg))
            .collect::<Result<Vec<_>>>()
    })?;
    let indices: Vec<u64> = (0..gts.len() as u64).collect();
    let (base, bases) = make_base(cfg, &gts, &indices)?;
    let utts: Vec<_> = wavs
        .iter()
        .zip(gts)
        .zip(bases)
        .map(|((p, g), b)| (stem(p), g, b))
        .collect();
    write_corpus(out, &utts, &base, &mel_cfg)?;
    info!("prepared {} utterances into {}", utts.len(), out.display());
    Ok(())
}

fn corpus_manifest(dir: &Path) -> PathBuf {
    dir.join(CORPUS_MANIFEST)
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let data = cfg.require_data()?;
    let out = cfg.require_out()?;
    cfg.write_resolved(out)?;
    let corpus = load_corpus(corpus_manifest(data))?;
    let (base, _) = load_base_model(data)?;
    let ds = ResidualDataset::build(&corpus, cfg.train.crop_seconds, cfg.seed())?;
    info!(
        "{} utterances, residual mean {:.4} std {:.4}, crops of {} frames",
        ds.len(),
        ds.stats.mean,
        ds.stats.std,
        ds.max_frames
    );
    let log_path = out.join(TRAIN_LOG);
    let mut log_lines = String::from("step,loss\n");
    match cfg.model {
        ModelKind::Resgrad => {
            let mut net = ScoreNet::new(ScoreNetArch::preset(&cfg.arch)?, cfg.seed())?;
            info!("score net `{}`: {} parameters", cfg.arch, net.param_count());
            let schedule = cfg.train.schedule()?;
            let mut on_event = |e: TrainEvent<'_>| -> Result<()> {
                match e {
                    TrainEvent::Log { step, loss } => {
                        info!("step {step} loss {loss:.5}");
                        log_lines.push_str(&format!("{step},{loss:.8}\n"));
                        fs::write(&log_path, &log_lines).map_err(|e| Error::io(&log_path, e))
                    }
                    TrainEvent::Checkpoint { step, net } => DiffusionCheckpoint {
                        net: net.clone(),
                        schedule: schedule.clone(),
                        stats: ds.stats,
                        cond_stats: ds.cond_stats,
                        mel_config: ds.mel_config().clone(),
                        base: base.clone(),
                        train: cfg.train.clone(),
                        step: step as u64,
                    }
                    .save(out),
                }
            };
            train(&mut net, &ds, &cfg.train, &mut on_event)?;
        }
        ModelKind::Resunet => {
            let mut net = ResUnet::new(ResUnetArch::preset(&cfg.arch)?, cfg.seed())?;
            info!("resunet `{}`: {} parameters", cfg.arch, net.param_count());
            let mut on_event = |e: TrainEvent<'_>| -> Result<()> {
                if let TrainEvent::Log { step, loss } = e {
                    info!("step {step} loss {loss:.5}");
                    log_lines.push_str(&format!("{step},{loss:.8}\n"));
                    fs::write(&log_path, &log_lines).map_err(|e| Error::io(&log_path, e))?;
                }
                Ok(())
            };
            fit_baseline(&mut net, &ds, &cfg.train, &mut on_event)?;
            RegBaseline {
                net,
                stats: ds.stats,
                cond_stats: ds.cond_stats,
                mel_config: ds.mel_config().clone(),
                base,
                train: cfg.train.clone(),
                step: cfg.train.steps as u64,
            }
            .save(out)?;
        }
    }
    info!("checkpoint written to {}", out.display());
    Ok(())
}

/// A checkpoint of either kind.
pub enum Loaded {
    Diffusion(DiffusionCheckpoint),
    Regression(RegBaseline),
}

impl Loaded {
    pub fn load(dir: &Path) -> Result<Self> {
        match read_manifest(dir)?.model {
            ModelSpec::ScoreNet { .. } => Ok(Loaded::Diffusion(DiffusionCheckpoint::load(dir)?)),
            ModelSpec::ResUnet { .. } => Ok(Loaded::Regression(RegBaseline::load(dir)?)),
        }
    }

    pub fn refiner(&self) -> Refiner<'_> {
        match self {
            Loaded::Diffusion(c) => Refiner::Diffusion(c),
            Loaded::Regression(m) => Refiner::Regression(m),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Loaded::Diffusion(_) => ModelKind::Resgrad,
            Loaded::Regression(_) => ModelKind::Resunet,
        }
    }
}

fn refine_one(
    model: &Loaded,
    cfg: &RunConfig,
    base: &MelSpectrogram,
    seed: u64,
    keep: bool,
) -> Result<RefinementResult> {
    match model {
        Loaded::Diffusion(c) => {
            let plan = plan_steps(c.schedule.t_max(), cfg.sample_steps, cfg.sigma_kind)?;
            c.refine(base, &plan, seed, keep)
        }
        Loaded::Regression(m) => refine_with_baseline(base, m),
    }
}

fn save_trajectory(dir: &Path, name: &str, states: &[Array2<f64>]) -> Result<()> {
    create_dir(dir)?;
    let (frames, bins) = states[0].dim();
    let data: Vec<f32> = states
        .iter()
        .flat_map(|s| s.iter().map(|v| *v as f32))
        .collect();
    let path = dir.join(format!("{name}.trajectory.tnsr"));
    let bytes = encode_tensor(&[states.len(), frames, bins], &data)?;
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    let f32s: Vec<Array2<f32>> = states.iter().map(|s| s.mapv(|v| v as f32)).collect();
    let views: Vec<_> = f32s.iter().map(|s| s.view()).collect();
    plot::trajectory(&views)?.save(&dir.join(format!("{name}.trajectory.png")))
}

/// Refines one `.mels` file or every `.mels` file in a directory.
pub fn refine_cmd(cfg: &RunConfig, input: &Path, trajectory: Option<&Path>) -> Result<()> {
    let out = cfg.require_out()?;
    let model = Loaded::load(cfg.require_ckpt()?)?;
    if cfg.model != model.kind() {
        warn!(
            "model = {} ignored; checkpoint holds {}",
            cfg.model,
            model.kind()
        );
    }
    let single = input.is_file();
    let (inputs, outputs): (Vec<PathBuf>, Vec<PathBuf>) = if single {
        let parent = out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        create_dir(parent)?;
        let name = format!(
            "{}.resolved.cfg",
            out.file_name()
                .map(|n| n.to_string_lossy())
                .unwrap_or_default()
        );
        fs::write(parent.join(&name), cfg.render())
            .map_err(|e| Error::io(parent.join(&name), e))?;
        (vec![input.to_path_buf()], vec![out.to_path_buf()])
    } else {
        cfg.write_resolved(out)?;
        let files = sorted_files(input, "mels")?;
        if files.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no .mels files in {}",
                input.display()
            )));
        }
        let outs = files
            .iter()
            .map(|f| out.join(f.file_name().expect("file name")))
            .collect();
        (files, outs)
    };
    if trajectory.is_some() && matches!(model, Loaded::Regression(_)) {
        warn!("regression baseline has no sampling trajectory; --trajectory ignored");
    }
    let keep = trajectory.is_some() && matches!(model, Loaded::Diffusion(_));
    pool(cfg.jobs)?.install(|| {
        inputs
            .par_iter()
            .zip(&outputs)
            .enumerate()
            .map(|(i, (src, dst))| {
                let base = load_mel(src)?;
                let r = refine_one(&model, cfg, &base, utt_seed(cfg.seed(), i), keep)?;
                save_mel(dst, &r.mel_ref)?;
                if let (Some(dir), Some(states)) = (trajectory, r.trajectory.as_deref()) {
                    save_trajectory(dir, &stem(src), states)?;
                }
                Ok(())
            })
            .collect::<Result<Vec<()>>>()
    })?;
    info!("refined {} file(s) into {}", inputs.len(), out.display());
    Ok(())
}

fn bench_corpus(data: &Path) -> Result<Vec<BenchUtt>> {
    Ok(load_corpus(corpus_manifest(data))?
        .into_iter()
        .map(|(id, gt, base)| BenchUtt { id, gt, base })
        .collect())
}

fn model_name(dir: &Path, model: &Loaded) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| model.kind().to_string())
}

/// Shared by `eval` (single timing pass) and `bench` (median of several).
pub fn evaluate(cfg: &RunConfig, repeats: usize, stem_name: &str) -> Result<Vec<MetricReport>> {
    let out = cfg.require_out()?;
    cfg.write_resolved(out)?;
    if cfg.ckpt.is_empty() {
        return Err(Error::Config(
            "missing checkpoint (--ckpt or ckpt = ...)".into(),
        ));
    }
    let corpus = bench_corpus(cfg.require_data()?)?;
    let loaded = cfg
        .ckpt
        .iter()
        .map(|d| Loaded::load(d))
        .collect::<Result<Vec<_>>>()?;
    let models: Vec<BenchModel<'_>> = cfg
        .ckpt
        .iter()
        .zip(&loaded)
        .map(|(d, m)| BenchModel {
            name: model_name(d, m),
            refiner: m.refiner(),
        })
        .collect();
    let bc = BenchConfig {
        steps: cfg.eval_steps.clone(),
        sigma_kind: cfg.sigma_kind,
        seed: cfg.seed(),
        timing_repeats: repeats,
        timing_utts: (cfg.timing_utts > 0).then_some(cfg.timing_utts),
        jobs: cfg.jobs,
    };
    let rows = bench(&models, &corpus, &bc)?;
    for r in &rows {
        info!(
            "{} N={}: lsd {:.3} dB (base {:.3}), mcd {:.3} dB, wins {}/{}, rtf {:.4}",
            r.model, r.steps, r.lsd_db, r.base_lsd_db, r.mcd_db, r.wins, r.n_utts, r.rtf
        );
    }
    write_reports(
        &out.join(format!("{stem_name}.csv")),
        &out.join(format!("{stem_name}.json")),
        &rows,
    )?;
    Ok(rows)
}

pub enum PlotKind<'a> {
    Triptych {
        base: &'a Path,
        refined: &'a Path,
        gt: &'a Path,
    },
    Residual {
        base: &'a Path,
        refined: &'a Path,
        gt: &'a Path,
    },
    Trajectory {
        states: &'a Path,
    },
}

pub fn plot_cmd(kind: PlotKind<'_>, out: &Path) -> Result<()> {
    let fig = match kind {
        PlotKind::Triptych { base, refined, gt } => {
            let (b, r, g) = (load_mel(base)?, load_mel(refined)?, load_mel(gt)?);
            plot::triptych(b.values.view(), r.values.view(), g.values.view())?
        }
        PlotKind::Residual { base, refined, gt } => {
            let (b, r, g) = (load_mel(base)?, load_mel(refined)?, load_mel(gt)?);
            let truth = &g.values - &b.values;
            let sampled = &r.values - &b.values;
            plot::residual_pair(truth.view(), sampled.view())?
        }
        PlotKind::Trajectory { states } => {
            let bytes = fs::read(states).map_err(|e| Error::io(states, e))?;
            let (dims, data) = resgrad_core::melio::decode_tensor(&bytes)?;
            let [n, f, b] = dims[..] else {
                return Err(Error::Format(format!(
                    "trajectory tensor has dims {dims:?}"
                )));
            };
            let panels: Vec<Array2<f32>> = data
                .chunks(f * b)
                .take(n)
                .map(|c| Array2::from_shape_vec((f, b), c.to_vec()).expect("chunk size"))
                .collect();
            let views: Vec<_> = panels.iter().map(|p| p.view()).collect();
            plot::trajectory(&views)?
        }
    };
    fig.save(out)?;
    info!("wrote {} ({} panels)", out.display(), fig.panels.len());
    Ok(())
}
