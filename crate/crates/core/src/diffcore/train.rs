use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::{
    NoiseSchedule, ScheduleSpec, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T,
};
use crate::error::{Error, Result};
use crate::kvconfig;
use crate::nn::{Adam, Parameterized, Tensor};
use crate::residual::{Crop, ResidualDataset};
use crate::scorenet::{ScoreNet, ScoreNetCache};
use crate::seed::derive_seed;

const STREAM_ORDER: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_EVAL: u64 = 3;

/// Per-example weight of the squared noise error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Squared score error, i.e. noise error scaled by `1/(1 − ab_t)`.
    Score,
    /// Unweighted noise error.
    Noise,
}

impl std::str::FromStr for LossWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "score" => Ok(LossWeighting::Score),
            "noise" => Ok(LossWeighting::Noise),
            o => Err(Error::Config(format!("unknown loss weighting `{o}`"))),
        }
    }
}

impl std::fmt::Display for LossWeighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossWeighting::Score => "score",
            LossWeighting::Noise => "noise",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub crop_seconds: f64,
    pub log_every: usize,
    pub ckpt_every: usize,
    pub loss_weighting: LossWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            steps: 20_000,
            batch: 4,
            seed: 0,
            t_max: DEFAULT_T,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            crop_seconds: 4.0,
            log_every: 100,
            ckpt_every: 1000,
            loss_weighting: LossWeighting::Score,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lr",
        "steps",
        "batch",
        "seed",
        "t_max",
        "beta_start",
        "beta_end",
        "crop_seconds",
        "log_every",
        "ckpt_every",
        "loss_weighting",
    ];

    /// Applies one config entry; `Ok(false)` if the key is not a training key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = kvconfig::value(key, v)?,
            "steps" => self.steps = kvconfig::value(key, v)?,
            "batch" => self.batch = kvconfig::value(key, v)?,
            "seed" => self.seed = kvconfig::value(key, v)?,
            "t_max" => self.t_max = kvconfig::value(key, v)?,
            "beta_start" => self.beta_start = kvconfig::value(key, v)?,
            "beta_end" => self.beta_end = kvconfig::value(key, v)?,
            "crop_seconds" => self.crop_seconds = kvconfig::value(key, v)?,
            "log_every" => self.log_every = kvconfig::value(key, v)?,
            "ckpt_every" => self.ckpt_every = kvconfig::value(key, v)?,
            "loss_weighting" => self.loss_weighting = v.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        vec![
            ("lr".into(), self.lr.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("t_max".into(), self.t_max.to_string()),
            ("beta_start".into(), self.beta_start.to_string()),
            ("beta_end".into(), self.beta_end.to_string()),
            ("crop_seconds".into(), self.crop_seconds.to_string()),
            ("log_every".into(), self.log_every.to_string()),
            ("ckpt_every".into(), self.ckpt_every.to_string()),
            ("loss_weighting".into(), self.loss_weighting.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch == 0 || self.log_every == 0 || self.ckpt_every == 0 {
            return Err(Error::Config(
                "batch, log_every and ckpt_every must be >= 1".into(),
            ));
        }
        if !(self.crop_seconds > 0.0) {
            return Err(Error::Config("crop_seconds must be positive".into()));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            t_max: self.t_max,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_spec(self.schedule_spec())
    }
}

/// Epoch-wise seeded shuffling; batches never straddle an epoch boundary.
#[derive(Debug, Clone)]
pub struct BatchOrder {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchOrder {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut b = BatchOrder {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        b.shuffle();
        b
    }

    fn shuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[STREAM_ORDER, self.epoch]));
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    /// Next `(epoch, indices)`; the last batch of an epoch may be short.
    pub fn next_batch(&mut self, size: usize) -> (u64, Vec<usize>) {
        if self.cursor >= self.n {
            self.epoch += 1;
            self.shuffle();
        }
        let end = (self.cursor + size).min(self.n);
        let idx = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        (self.epoch, idx)
    }
}

#[derive(Debug)]
pub enum TrainEvent<'a> {
    Log { step: usize, loss: f64 },
    Checkpoint { step: usize, net: &'a ScoreNet },
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Batch loss after every optimizer step, in the configured weighting.
    pub losses: Vec<f64>,
    pub steps: usize,
}

/// Noises a batch of crops with `rng`, runs the network, and returns the
/// weighted loss with its output gradient and forward cache.
fn batch_loss(
    net: &ScoreNet,
    crops: &[Crop],
    weighting: LossWeighting,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> (f64, Tensor, ScoreNetCache) {
    let (rows, cols) = crops[0].residual.dim();
    let mut ts = Vec::with_capacity(crops.len());
    let mut noises = Vec::with_capacity(crops.len());
    let mut noisy = Vec::with_capacity(crops.len());
    for c in crops {
        let t = rng.gen_range(1..=sched.t_max());
        let ab = sched.alpha_bar(t);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let eps = ndarray::Array2::<f32>::from_shape_simple_fn((rows, cols), || {
            StandardNormal.sample(&mut *rng)
        });
        noisy.push(
            ndarray::Zip::from(&c.residual)
                .and(&eps)
                .map_collect(|x, e| a * x + b * e),
        );
        noises.push(eps);
        ts.push(t);
    }
    let pairs: Vec<_> = noisy
        .iter()
        .zip(crops)
        .map(|(x, c)| (x.view(), c.cond.view()))
        .collect();
    let input = net.pack_inputs(&pairs);
    let (out, cache) = net.forward_batch(&input, &ts);

    let bsz = crops.len() as f64;
    let per = (rows * cols) as f64;
    let mut dout = Tensor::zeros_like(&out);
    let mut total = 0.0f64;
    for (n, (eps, t)) in noises.iter().zip(&ts).enumerate() {
        let w = match weighting {
            LossWeighting::Score => 1.0 / (1.0 - sched.alpha_bar(*t)),
            LossWeighting::Noise => 1.0,
        };
        let o = out.channel(n, 0);
        let mut sq = 0.0f64;
        let mut g = vec![0.0f32; o.len()];
        for r in 0..rows {
            for c in 0..cols {
                let i = r * out.w + c;
                let d = o[i] as f64 - eps[[r, c]] as f64;
                sq += d * d;
                g[i] = (2.0 * w * d / (bsz * per)) as f32;
            }
        }
        total += w * sq / per;
        dout.channel_mut(n, 0).copy_from_slice(&g);
    }
    (total / bsz, dout, cache)
}

/// One optimizer step of the denoising objective on a batch of crops.
/// Returns the batch loss before the update.
fn train_step(
    net: &mut ScoreNet,
    data: &ResidualDataset,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    opt: &mut Adam,
    step: usize,
    order: &mut BatchOrder,
) -> Result<f64> {
    let (epoch, idx) = order.next_batch(cfg.batch);
    let crops = data.batch(epoch, &idx, net.arch().divisor())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_NOISE, step as u64]));
    let (loss, dout, cache) = batch_loss(net, &crops, cfg.loss_weighting, sched, &mut rng);
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "training loss is not finite at step {step}"
        )));
    }
    net.zero_grad();
    net.backward(&cache, &dout);
    opt.step(net);
    Ok(loss)
}

/// Objective on a fixed batch without touching parameters; `seed` fixes
/// timesteps and noise so repeated calls agree.
pub fn eval_loss(
    net: &ScoreNet,
    data: &ResidualDataset,
    cfg: &TrainConfig,
    indices: &[usize],
    seed: u64,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation batch".into()));
    }
    let sched = cfg.schedule()?;
    let crops = data.batch(0, indices, net.arch().divisor())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_EVAL]));
    Ok(batch_loss(net, &crops, cfg.loss_weighting, &sched, &mut rng).0)
}

/// Fits `net` to the residual dataset. `on_event` receives periodic loss
/// logs and checkpoint opportunities; a non-finite loss aborts with an error,
/// leaving whatever the last checkpoint event persisted.
pub fn train(
    net: &mut ScoreNet,
    data: &ResidualDataset,
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let sched = cfg.schedule()?;
    let mut opt = Adam::new(cfg.lr);
    let mut order = BatchOrder::new(data.len(), cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut window = 0.0;
    for step in 1..=cfg.steps {
        let loss = train_step(net, data, cfg, &sched, &mut opt, step, &mut order)?;
        losses.push(loss);
        window += loss;
        if step % cfg.log_every == 0 {
            on_event(TrainEvent::Log {
                step,
                loss: window / cfg.log_every as f64,
            })?;
            window = 0.0;
        }
        if step % cfg.ckpt_every == 0 || step == cfg.steps {
            on_event(TrainEvent::Checkpoint { step, net })?;
        }
    }
    Ok(TrainReport {
        losses,
        steps: cfg.steps,
    })
}

/// Mean of consecutive windows, for comparing noisy loss curves.
pub fn smooth(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .chunks(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
