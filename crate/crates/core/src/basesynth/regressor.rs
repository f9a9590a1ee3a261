//! Small frame-wise conv regressor from coarse band features to a full mel.
//! Trained with plain L2, so it averages away fine detail.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BaseKind, BaseModel, FeatureSeq, PitchMode, FEATURE_BANDS};
use crate::error::{Error, Result};
use crate::melpipe::{MelConfig, MelSpectrogram};
use crate::nn::{leaky_relu, leaky_relu_backward, Adam, Conv2d, Param, Parameterized, Tensor};

const HIDDEN: usize = 64;
const KERNEL: usize = 5;

#[derive(Debug, Clone)]
pub struct Regressor {
    pub n_mels: usize,
    layers: Vec<Conv2d>,
    // scalar standardization of inputs and targets, saved with the weights
    in_mean: Param,
    in_std: Param,
    out_mean: Param,
    out_std: Param,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorTrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for RegressorTrainConfig {
    fn default() -> Self {
        RegressorTrainConfig {
            steps: 2000,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegressorTrainReport {
    /// Per-step mean-squared error in mel units.
    pub losses: Vec<f32>,
}

impl Regressor {
    pub fn new(n_mels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = (KERNEL, 1);
        let layers = vec![
            Conv2d::with_kernel("reg.conv0", FEATURE_BANDS, HIDDEN, k, 1, &mut rng),
            Conv2d::with_kernel("reg.conv1", HIDDEN, HIDDEN, k, 1, &mut rng),
            Conv2d::with_kernel("reg.conv2", HIDDEN, HIDDEN, k, 1, &mut rng),
            Conv2d::with_kernel("reg.out", HIDDEN, n_mels, (1, 1), 1, &mut rng),
        ];
        Regressor {
            n_mels,
            layers,
            in_mean: Param::buffer("reg.in_mean", vec![1], 0.0),
            in_std: Param::buffer("reg.in_std", vec![1], 1.0),
            out_mean: Param::buffer("reg.out_mean", vec![1], 0.0),
            out_std: Param::buffer("reg.out_std", vec![1], 1.0),
        }
    }

    fn input_tensor(&self, feats: &FeatureSeq) -> Tensor {
        let frames = feats.frames();
        let (m, s) = (self.in_mean.value[0], self.in_std.value[0]);
        let mut t = Tensor::zeros(1, FEATURE_BANDS, frames, 1);
        for b in 0..FEATURE_BANDS {
            let ch = t.channel_mut(0, b);
            for f in 0..frames {
                ch[f] = (feats.values[[f, b]] - m) / s;
            }
        }
        t
    }

    /// Returns every layer input plus the final standardized output.
    fn forward_trace(&self, x: Tensor) -> (Vec<Tensor>, Tensor) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&h);
            inputs.push(h);
            h = if i + 1 < self.layers.len() {
                leaky_relu(&y)
            } else {
                y
            };
        }
        (inputs, h)
    }

    pub fn predict(&self, feats: &FeatureSeq, cfg: &MelConfig) -> Result<MelSpectrogram> {
        if cfg.n_mels != self.n_mels {
            return Err(Error::Shape(format!(
                "regressor emits {} bins, config wants {}",
                self.n_mels, cfg.n_mels
            )));
        }
        let (_, y) = self.forward_trace(self.input_tensor(feats));
        let (m, s) = (self.out_mean.value[0], self.out_std.value[0]);
        let values = Array2::from_shape_fn((feats.frames(), self.n_mels), |(f, b)| {
            y.channel(0, b)[f] * s + m
        });
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "regressor produced non-finite output".into(),
            ));
        }
        MelSpectrogram::new(values, cfg.clone())
    }

    /// One L2 step on a single pair; returns the loss in mel units.
    fn train_step(&mut self, feats: &FeatureSeq, target: &MelSpectrogram, opt: &mut Adam) -> f32 {
        self.zero_grad();
        let frames = feats.frames();
        let (inputs, y) = self.forward_trace(self.input_tensor(feats));
        let (m, s) = (self.out_mean.value[0], self.out_std.value[0]);
        let n = (frames * self.n_mels) as f32;
        let mut dy = Tensor::zeros_like(&y);
        let mut loss = 0.0f64;
        for b in 0..self.n_mels {
            let yc = y.channel(0, b);
            let dc = dy.channel_mut(0, b);
            for f in 0..frames {
                let err = yc[f] - (target.values[[f, b]] - m) / s;
                loss += (err as f64).powi(2);
                dc[f] = 2.0 * err / n;
            }
        }
        let last = self.layers.len() - 1;
        let mut g = dy;
        for i in (0..=last).rev() {
            let dx = self.layers[i].backward(&inputs[i], &g);
            if i > 0 {
                // inputs[i] is the activated output of layer i-1; recover the
                // pre-activation sign from it (leaky slope keeps the sign)
                g = leaky_relu_backward(&inputs[i], &dx);
            }
        }
        opt.step(self);
        (loss / n as f64) as f32 * s * s
    }
}

impl Parameterized for Regressor {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for l in &self.layers {
            l.visit(f);
        }
        f(&self.in_mean);
        f(&self.in_std);
        f(&self.out_mean);
        f(&self.out_std);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
        f(&mut self.in_mean);
        f(&mut self.in_std);
        f(&mut self.out_mean);
        f(&mut self.out_std);
    }
}

fn scalar_moments<'a>(values: impl Iterator<Item = &'a f32>) -> (f32, f32) {
    let (mut n, mut s, mut ss) = (0usize, 0.0f64, 0.0f64);
    for v in values {
        n += 1;
        s += *v as f64;
        ss += (*v as f64).powi(2);
    }
    let mean = s / n.max(1) as f64;
    let var = (ss / n.max(1) as f64 - mean * mean).max(0.0);
    (mean as f32, var.sqrt().max(1e-3) as f32)
}

/// Fit the regressor base on paired (features, target mel) data.
pub fn fit_regressor(
    data: &[(FeatureSeq, MelSpectrogram)],
    cfg: &RegressorTrainConfig,
) -> Result<(BaseModel, RegressorTrainReport)> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty regressor dataset".into()))?;
    let n_mels = first.1.n_mels();
    for (i, (f, m)) in data.iter().enumerate() {
        if f.frames() != m.frames() || m.n_mels() != n_mels || f.values.ncols() != FEATURE_BANDS {
            return Err(Error::Shape(format!(
                "pair {i}: features {:?} vs mel {:?}",
                f.values.dim(),
                m.shape()
            )));
        }
    }
    let mut net = Regressor::new(n_mels, cfg.seed);
    let (im, is) = scalar_moments(data.iter().flat_map(|(f, _)| f.values.iter()));
    let (om, os) = scalar_moments(data.iter().flat_map(|(_, m)| m.values.iter()));
    net.in_mean.value[0] = im;
    net.in_std.value[0] = is;
    net.out_mean.value[0] = om;
    net.out_std.value[0] = os;

    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (f, m) = &data[rng.gen_range(0..data.len())];
        let loss = net.train_step(f, m, &mut opt);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "regressor loss diverged at step {step}"
            )));
        }
        losses.push(loss);
    }
    let base = BaseModel {
        kind: BaseKind::Regressor(Box::new(net)),
        pitch_mode: PitchMode::GtPitch,
        pitch_seed: 0,
    };
    Ok((base, RegressorTrainReport { losses }))
}
