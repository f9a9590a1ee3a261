use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{lsd, mcd, residual_energy, rtf};
use crate::diffcore::DiffusionCheckpoint;
use crate::error::{Error, Result};
use crate::melpipe::MelSpectrogram;
use crate::reg_baseline::{refine_with_baseline, RegBaseline};
use crate::sampler::{plan_steps, RefinementResult, SigmaKind};
use crate::seed::derive_seed;

/// Step count recorded for one-shot regression rows.
pub const ONE_SHOT_STEPS: usize = 1;

pub const CSV_COLUMNS: [&str; 11] = [
    "model",
    "steps",
    "lsd_db",
    "mcd_db",
    "rtf",
    "params",
    "n_utts",
    "residual_energy",
    "base_lsd_db",
    "wins",
    "rtf_spread",
];

#[derive(Debug, Clone, Copy)]
pub enum Refiner<'a> {
    Diffusion(&'a DiffusionCheckpoint),
    Regression(&'a RegBaseline),
}

impl Refiner<'_> {
    pub fn param_count(&self) -> usize {
        match self {
            Refiner::Diffusion(c) => c.param_count(),
            Refiner::Regression(m) => m.param_count(),
        }
    }

    fn run(
        &self,
        base: &MelSpectrogram,
        steps: usize,
        kind: SigmaKind,
        seed: u64,
    ) -> Result<RefinementResult> {
        match self {
            Refiner::Diffusion(c) => {
                let plan = plan_steps(c.schedule.t_max(), steps, kind)?;
                c.refine(base, &plan, seed, false)
            }
            Refiner::Regression(m) => refine_with_baseline(base, m),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchModel<'a> {
    pub name: String,
    pub refiner: Refiner<'a>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchUtt {
    pub id: String,
    pub gt: MelSpectrogram,
    pub base: MelSpectrogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub steps: Vec<usize>,
    pub sigma_kind: SigmaKind,
    pub seed: u64,
    /// Timed passes per row; the median is reported.
    pub timing_repeats: usize,
    /// Time only the first `k` utterances (all when `None`).
    pub timing_utts: Option<usize>,
    /// Worker threads for the metric pass. Timing always runs on one thread.
    pub jobs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            steps: vec![4, 50],
            sigma_kind: SigmaKind::default(),
            seed: 0,
            timing_repeats: 5,
            timing_utts: None,
            jobs: 1,
        }
    }
}

/// One row of the evaluation table. `rtf` and `rtf_spread` are measured
/// timings and vary between runs; every other field is seeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub steps: usize,
    pub lsd_db: f64,
    pub mcd_db: f64,
    pub residual_energy: f64,
    pub rtf: f64,
    pub params: usize,
    pub n_utts: usize,
    /// Mean LSD of the unrefined base on the same utterances.
    pub base_lsd_db: f64,
    /// Utterances where refinement lowered LSD.
    pub wins: usize,
    /// (max − min) / median over the timed passes.
    pub rtf_spread: f64,
}

impl MetricReport {
    pub fn win_fraction(&self) -> f64 {
        self.wins as f64 / self.n_utts as f64
    }

    pub fn timing_free(&self) -> MetricReport {
        MetricReport {
            rtf: 0.0,
            rtf_spread: 0.0,
            ..self.clone()
        }
    }
}

/// Per-utterance refinement seed shared by the metric and timing passes.
pub fn utt_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[index as u64])
}

struct UttScore {
    lsd: f64,
    mcd: f64,
    energy: f64,
    base_lsd: f64,
}

fn score_utts(
    refiner: Refiner<'_>,
    corpus: &[BenchUtt],
    steps: usize,
    cfg: &BenchConfig,
) -> Result<Vec<UttScore>> {
    let score_one = |i: usize, u: &BenchUtt| -> Result<UttScore> {
        let r = refiner.run(&u.base, steps, cfg.sigma_kind, utt_seed(cfg.seed, i))?;
        Ok(UttScore {
            lsd: lsd(&r.mel_ref, &u.gt)?,
            mcd: mcd(&r.mel_ref, &u.gt)?,
            energy: residual_energy(&u.gt, &r.mel_ref)?,
            base_lsd: lsd(&u.base, &u.gt)?,
        })
    };
    let jobs = cfg.jobs.clamp(1, corpus.len().max(1));
    if jobs == 1 {
        return corpus
            .iter()
            .enumerate()
            .map(|(i, u)| score_one(i, u))
            .collect();
    }
    let chunk = corpus.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = corpus
            .chunks(chunk)
            .enumerate()
            .map(|(k, part)| {
                let score_one = &score_one;
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, u)| score_one(k * chunk + j, u))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(corpus.len());
        for h in handles {
            out.extend(
                h.join()
                    .map_err(|_| Error::Numerical("bench worker panicked".into()))??,
            );
        }
        Ok(out)
    })
}

/// Median-of-`repeats` RTF over the timed subset for each step count, with
/// its relative spread. Repeats cycle through the step counts so slow drift
/// in machine load hits every count alike.
fn time_utts(
    refiner: Refiner<'_>,
    corpus: &[BenchUtt],
    step_list: &[usize],
    cfg: &BenchConfig,
) -> Result<Vec<(f64, f64)>> {
    let k = cfg
        .timing_utts
        .unwrap_or(corpus.len())
        .clamp(1, corpus.len());
    let audio: f64 = corpus[..k].iter().map(|u| u.base.duration_seconds()).sum();
    let mut rtfs = vec![Vec::with_capacity(cfg.timing_repeats); step_list.len()];
    for _ in 0..cfg.timing_repeats.max(1) {
        for (steps, out) in step_list.iter().zip(rtfs.iter_mut()) {
            let mut wall = 0.0;
            for (i, u) in corpus[..k].iter().enumerate() {
                wall += refiner
                    .run(&u.base, *steps, cfg.sigma_kind, utt_seed(cfg.seed, i))?
                    .wall_time;
            }
            out.push(rtf(audio, wall)?);
        }
    }
    Ok(rtfs
        .into_iter()
        .map(|mut r| {
            r.sort_by(f64::total_cmp);
            let median = r[r.len() / 2];
            let spread = if median > 0.0 {
                (r[r.len() - 1] - r[0]) / median
            } else {
                0.0
            };
            (median, spread)
        })
        .collect())
}

/// Refines the corpus with every model at every step count and reports
/// metrics plus median timing. Regression models get a single one-shot row.
pub fn bench(
    models: &[BenchModel<'_>],
    corpus: &[BenchUtt],
    cfg: &BenchConfig,
) -> Result<Vec<MetricReport>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("bench corpus is empty".into()));
    }
    if cfg.steps.is_empty() {
        return Err(Error::InvalidArgument(
            "bench needs at least one step count".into(),
        ));
    }
    let mut rows = Vec::new();
    for m in models {
        let step_list = match m.refiner {
            Refiner::Diffusion(_) => cfg.steps.clone(),
            Refiner::Regression(_) => vec![ONE_SHOT_STEPS],
        };
        let timings = time_utts(m.refiner, corpus, &step_list, cfg)?;
        for (steps, (rtf, rtf_spread)) in step_list.into_iter().zip(timings) {
            let scores = score_utts(m.refiner, corpus, steps, cfg)?;
            let n = scores.len() as f64;
            let mean = |f: fn(&UttScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
            rows.push(MetricReport {
                model: m.name.clone(),
                steps,
                lsd_db: mean(|s| s.lsd),
                mcd_db: mean(|s| s.mcd),
                residual_energy: mean(|s| s.energy),
                rtf,
                params: m.refiner.param_count(),
                n_utts: scores.len(),
                base_lsd_db: mean(|s| s.base_lsd),
                wins: scores.iter().filter(|s| s.lsd < s.base_lsd).count(),
                rtf_spread,
            });
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[MetricReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(CSV_COLUMNS).map_err(fail)?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.steps.to_string(),
            format!("{:.6}", r.lsd_db),
            format!("{:.6}", r.mcd_db),
            format!("{:.6}", r.rtf),
            r.params.to_string(),
            r.n_utts.to_string(),
            format!("{:.6}", r.residual_energy),
            format!("{:.6}", r.base_lsd_db),
            r.wins.to_string(),
            format!("{:.4}", r.rtf_spread),
        ])
        .map_err(fail)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn from_csv(text: &str) -> Result<Vec<MetricReport>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Format(format!("csv: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != CSV_COLUMNS {
        return Err(Error::Format(format!(
            "unexpected bench columns {header:?}"
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("csv: {e}"))))
        .collect()
}

pub fn write_reports(csv_path: &Path, json_path: &Path, rows: &[MetricReport]) -> Result<()> {
    std::fs::write(csv_path, to_csv(rows)?).map_err(|e| Error::io(csv_path, e))?;
    let mut f = std::fs::File::create(json_path).map_err(|e| Error::io(json_path, e))?;
    let json = serde_json::to_string_pretty(rows)?;
    f.write_all(json.as_bytes())
        .map_err(|e| Error::io(json_path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(json_path, e))
}
