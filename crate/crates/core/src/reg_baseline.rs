//! Direct-regression residual predictor: a residual U-Net built from
//! batch-norm → leaky-ReLU → conv units, mapping the conditioning mel to the
//! residual in one forward pass.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basesynth::BaseModel;
use crate::diffcore::checkpoint::{
    load_base, load_params, read_manifest, save_base, save_params, write_manifest, Manifest,
    ModelSpec, CHECKPOINT_VERSION,
};
use crate::diffcore::{BatchOrder, TrainConfig, TrainEvent, TrainReport};
use crate::error::{Error, Result};
use crate::grid::{crop_top_left, reflect_pad_to};
use crate::melpipe::{MelConfig, MelSpectrogram};
use crate::nn::{
    leaky_relu, leaky_relu_backward, upsample2, upsample2_backward, Adam, BatchNorm2d,
    BatchNormCache, Conv2d, Param, Parameterized, Tensor,
};
use crate::residual::{CondStats, ResidualDataset, ResidualStats};
use crate::sampler::{finish_refinement, RefinementResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResUnetArch {
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    /// Residual blocks at the bottleneck.
    pub mid_blocks: usize,
}

impl ResUnetArch {
    /// About 19 M parameters, just over 10× the standard score network.
    pub fn standard() -> Self {
        ResUnetArch {
            base_channels: 64,
            channel_mult: vec![1, 2, 4, 8],
            mid_blocks: 2,
        }
    }

    /// About 4.8 M parameters, 25× the desk score network.
    pub fn desk() -> Self {
        ResUnetArch {
            base_channels: 32,
            channel_mult: vec![1, 2, 4, 8],
            mid_blocks: 2,
        }
    }

    pub fn tiny() -> Self {
        ResUnetArch {
            base_channels: 8,
            channel_mult: vec![1, 2],
            mid_blocks: 1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            o => Err(Error::Config(format!("unknown resunet preset `{o}`"))),
        }
    }

    /// Number of 2× downsamplings.
    pub fn depth(&self) -> usize {
        self.channel_mult.len() - 1
    }

    pub fn divisor(&self) -> usize {
        1 << self.depth()
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.channel_mult.len() < 2 || self.channel_mult.contains(&0)
        {
            return Err(Error::Config(
                "resunet needs base_channels >= 1 and at least two nonzero multipliers".into(),
            ));
        }
        Ok(())
    }
}

/// BN → LeakyReLU → conv.
#[derive(Debug, Clone)]
struct Unit {
    bn: BatchNorm2d,
    conv: Conv2d,
}

struct UnitCache {
    bn: BatchNormCache,
    pre: Tensor,
    act: Tensor,
}

impl Unit {
    fn new(name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Unit {
            bn: BatchNorm2d::new(&format!("{name}.bn"), cin),
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, k, 1, rng),
        }
    }

    fn forward_train(&mut self, x: &Tensor) -> (Tensor, UnitCache) {
        let (pre, bn) = self.bn.forward(x, true);
        let act = leaky_relu(&pre);
        let out = self.conv.forward(&act);
        (out, UnitCache { bn, pre, act })
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        self.conv.forward(&leaky_relu(&self.bn.forward_eval(x)))
    }

    fn backward(&mut self, c: &UnitCache, dy: &Tensor) -> Tensor {
        let dact = self.conv.backward(&c.act, dy);
        let dpre = leaky_relu_backward(&c.pre, &dact);
        self.bn.backward(&c.bn, &dpre)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.bn.visit(f);
        self.conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.bn.visit_mut(f);
        self.conv.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
struct Block {
    u1: Unit,
    u2: Unit,
    skip: Option<Conv2d>,
}

struct BlockCache {
    x: Tensor,
    c1: UnitCache,
    c2: UnitCache,
}

impl Block {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Block {
            u1: Unit::new(&format!("{name}.u1"), cin, cout, 3, rng),
            u2: Unit::new(&format!("{name}.u2"), cout, cout, 3, rng),
            skip: (cin != cout).then(|| Conv2d::new(&format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    fn forward_train(&mut self, x: &Tensor) -> (Tensor, BlockCache) {
        let (h, c1) = self.u1.forward_train(x);
        let (mut out, c2) = self.u2.forward_train(&h);
        match &self.skip {
            Some(s) => out.add_assign(&s.forward(x)),
            None => out.add_assign(x),
        }
        (
            out,
            BlockCache {
                x: x.clone(),
                c1,
                c2,
            },
        )
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        let mut out = self.u2.forward_eval(&self.u1.forward_eval(x));
        match &self.skip {
            Some(s) => out.add_assign(&s.forward(x)),
            None => out.add_assign(x),
        }
        out
    }

    fn backward(&mut self, c: &BlockCache, dy: &Tensor) -> Tensor {
        let dh = self.u2.backward(&c.c2, dy);
        let mut dx = self.u1.backward(&c.c1, &dh);
        match &mut self.skip {
            Some(s) => dx.add_assign(&s.backward(&c.x, dy)),
            None => dx.add_assign(dy),
        }
        dx
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.u1.visit(f);
        self.u2.visit(f);
        if let Some(s) = &self.skip {
            s.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.u1.visit_mut(f);
        self.u2.visit_mut(f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResUnet {
    arch: ResUnetArch,
    in_conv: Conv2d,
    enc: Vec<Block>,
    down: Vec<Conv2d>,
    mid: Vec<Block>,
    up: Vec<Conv2d>,
    dec: Vec<Block>,
    out: Unit,
}

pub struct ResUnetCache {
    input: Tensor,
    h0: Tensor,
    enc: Vec<BlockCache>,
    skips: Vec<Tensor>,
    mid: Vec<BlockCache>,
    up_in: Vec<Tensor>,
    dec: Vec<BlockCache>,
    out: UnitCache,
}

impl ResUnet {
    pub fn new(arch: ResUnetArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = arch.depth();
        let c0 = arch.channels(0);
        let in_conv = Conv2d::new("res.in", 1, c0, 3, 1, &mut rng);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut ch = c0;
        for l in 0..depth {
            enc.push(Block::new(
                &format!("res.enc{l}"),
                ch,
                arch.channels(l),
                &mut rng,
            ));
            ch = arch.channels(l);
            down.push(Conv2d::new(&format!("res.down{l}"), ch, ch, 3, 2, &mut rng));
        }
        let mut mid = Vec::new();
        for m in 0..=arch.mid_blocks {
            mid.push(Block::new(
                &format!("res.mid{m}"),
                ch,
                arch.channels(depth),
                &mut rng,
            ));
            ch = arch.channels(depth);
        }
        let mut up = vec![];
        let mut dec = vec![];
        for l in (0..depth).rev() {
            let cl = arch.channels(l);
            up.push(Conv2d::new(&format!("res.up{l}"), ch, cl, 3, 1, &mut rng));
            dec.push(Block::new(&format!("res.dec{l}"), 2 * cl, cl, &mut rng));
            ch = cl;
        }
        let out = Unit::new("res.out", ch, 1, 1, &mut rng);
        Ok(ResUnet {
            arch,
            in_conv,
            enc,
            down,
            mid,
            up,
            dec,
            out,
        })
    }

    pub fn arch(&self) -> &ResUnetArch {
        &self.arch
    }

    /// Training-mode forward on `[b, 1, h, w]` with `h`, `w` divisible by
    /// `2^depth`; batch statistics are used and running averages updated.
    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, ResUnetCache) {
        let h0 = self.in_conv.forward(x);
        let mut h = h0.clone();
        let mut enc_c = Vec::new();
        let mut skips = Vec::new();
        for (b, d) in self.enc.iter_mut().zip(&self.down) {
            let (o, c) = b.forward_train(&h);
            enc_c.push(c);
            h = d.forward(&o);
            skips.push(o);
        }
        let mut mid_c = Vec::new();
        for b in &mut self.mid {
            let (o, c) = b.forward_train(&h);
            mid_c.push(c);
            h = o;
        }
        let mut up_in = Vec::new();
        let mut dec_c = Vec::new();
        for (i, (u, b)) in self.up.iter().zip(self.dec.iter_mut()).enumerate() {
            let upsampled = upsample2(&h);
            let uh = u.forward(&upsampled);
            up_in.push(upsampled);
            let skip = &skips[skips.len() - 1 - i];
            let (o, c) = b.forward_train(&Tensor::concat_channels(&uh, skip));
            dec_c.push(c);
            h = o;
        }
        let (y, out_c) = self.out.forward_train(&h);
        (
            y,
            ResUnetCache {
                input: x.clone(),
                h0,
                enc: enc_c,
                skips,
                mid: mid_c,
                up_in,
                dec: dec_c,
                out: out_c,
            },
        )
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let mut h = self.in_conv.forward(x);
        let mut skips = Vec::new();
        for (b, d) in self.enc.iter().zip(&self.down) {
            let o = b.forward_eval(&h);
            h = d.forward(&o);
            skips.push(o);
        }
        for b in &self.mid {
            h = b.forward_eval(&h);
        }
        for (i, (u, b)) in self.up.iter().zip(&self.dec).enumerate() {
            let uh = u.forward(&upsample2(&h));
            h = b.forward_eval(&Tensor::concat_channels(&uh, &skips[skips.len() - 1 - i]));
        }
        self.out.forward_eval(&h)
    }

    /// Accumulates parameter gradients for `dout` (same shape as the output).
    pub fn backward(&mut self, cache: &ResUnetCache, dout: &Tensor) {
        let mut g = self.out.backward(&cache.out, dout);
        let depth = self.enc.len();
        let mut dskips: Vec<Option<Tensor>> = vec![None; depth];
        for i in (0..self.dec.len()).rev() {
            let dcat = self.dec[i].backward(&cache.dec[i], &g);
            let cl = self.up[i].cout;
            let (duh, dskip) = dcat.split_channels(cl);
            dskips[depth - 1 - i] = Some(dskip);
            let dup = self.up[i].backward(&cache.up_in[i], &duh);
            g = upsample2_backward(&dup);
        }
        for i in (0..self.mid.len()).rev() {
            g = self.mid[i].backward(&cache.mid[i], &g);
        }
        for l in (0..depth).rev() {
            let mut d = self.down[l].backward(&cache.skips[l], &g);
            d.add_assign(dskips[l].as_ref().expect("skip gradient"));
            g = self.enc[l].backward(&cache.enc[l], &d);
        }
        let _ = self.in_conv.backward(&cache.input, &g);
        let _ = &cache.h0;
    }

    /// Eval-mode prediction of the standardized residual for one normalized
    /// conditioning mel of any frame count.
    pub fn predict(&self, cond: ArrayView2<f32>) -> Result<Array2<f32>> {
        let (rows, cols) = cond.dim();
        let div = self.arch.divisor();
        let (h, w) = (rows.div_ceil(div) * div, cols.div_ceil(div) * div);
        let x = Tensor::from_vec(1, 1, h, w, reflect_pad_to(cond, h, w));
        let y = self.forward_eval(&x);
        let out = crop_top_left(y.channel(0, 0), h, w, rows, cols);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "resunet produced non-finite output".into(),
            ));
        }
        Ok(out)
    }
}

impl Parameterized for ResUnet {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.in_conv.visit(f);
        for b in &self.enc {
            b.visit(f);
        }
        for d in &self.down {
            d.visit(f);
        }
        for b in &self.mid {
            b.visit(f);
        }
        for u in &self.up {
            u.visit(f);
        }
        for b in &self.dec {
            b.visit(f);
        }
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.in_conv.visit_mut(f);
        for b in &mut self.enc {
            b.visit_mut(f);
        }
        for d in &mut self.down {
            d.visit_mut(f);
        }
        for b in &mut self.mid {
            b.visit_mut(f);
        }
        for u in &mut self.up {
            u.visit_mut(f);
        }
        for b in &mut self.dec {
            b.visit_mut(f);
        }
        self.out.visit_mut(f);
    }
}

/// Trained baseline plus the data statistics it was fit under.
#[derive(Debug, Clone)]
pub struct RegBaseline {
    pub net: ResUnet,
    pub stats: ResidualStats,
    pub cond_stats: CondStats,
    pub mel_config: MelConfig,
    pub base: BaseModel,
    pub train: TrainConfig,
    pub step: u64,
}

impl RegBaseline {
    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = Manifest {
            format_version: CHECKPOINT_VERSION,
            model: ModelSpec::ResUnet {
                arch: self.net.arch().clone(),
            },
            param_count: self.param_count(),
            step: self.step,
            stats: self.stats,
            cond_stats: self.cond_stats,
            mel_config: self.mel_config.clone(),
            base: self.base.spec(),
            train: self.train.clone(),
            tensors: save_params(dir, "", &self.net)?,
            base_tensors: save_base(dir, &self.base)?,
        };
        write_manifest(dir, &m)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m = read_manifest(dir)?;
        let ModelSpec::ResUnet { arch } = &m.model else {
            return Err(Error::Format("checkpoint does not hold a resunet".into()));
        };
        let mut net = ResUnet::new(arch.clone(), 0)?;
        load_params(dir, &m.tensors, &mut net)?;
        Ok(RegBaseline {
            net,
            stats: m.stats,
            cond_stats: m.cond_stats,
            base: load_base(dir, &m.base, &m.base_tensors, &m.mel_config)?,
            mel_config: m.mel_config,
            train: m.train,
            step: m.step,
        })
    }
}

fn batch_step(
    net: &mut ResUnet,
    data: &ResidualDataset,
    cfg: &TrainConfig,
    opt: &mut Adam,
    order: &mut BatchOrder,
) -> Result<f64> {
    let (epoch, idx) = order.next_batch(cfg.batch);
    let crops = data.batch(epoch, &idx, net.arch().divisor())?;
    let (rows, cols) = crops[0].residual.dim();
    let div = net.arch().divisor();
    let (h, w) = (rows, cols.div_ceil(div) * div);
    let mut x = Tensor::zeros(crops.len(), 1, h, w);
    for (n, c) in crops.iter().enumerate() {
        x.channel_mut(n, 0)
            .copy_from_slice(&reflect_pad_to(c.cond.view(), h, w));
    }
    let (y, cache) = net.forward_train(&x);
    let count = (crops.len() * rows * cols) as f64;
    let mut dy = Tensor::zeros_like(&y);
    let mut total = 0.0f64;
    for (n, c) in crops.iter().enumerate() {
        let o = y.channel(n, 0);
        let g = dy.channel_mut(n, 0);
        for r in 0..rows {
            for k in 0..cols {
                let d = o[r * w + k] as f64 - c.residual[[r, k]] as f64;
                total += d * d;
                g[r * w + k] = (2.0 * d / count) as f32;
            }
        }
    }
    let loss = total / count;
    if !loss.is_finite() {
        return Err(Error::Numerical("baseline loss is not finite".into()));
    }
    net.zero_grad();
    net.backward(&cache, &dy);
    opt.step(net);
    Ok(loss)
}

/// Mean-squared-error fit from normalized conditioning to the standardized
/// residual, reusing the diffusion training budget (`steps`, `batch`, `lr`).
pub fn fit_baseline(
    net: &mut ResUnet,
    data: &ResidualDataset,
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut opt = Adam::new(cfg.lr);
    let mut order = BatchOrder::new(data.len(), cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut window = 0.0;
    for step in 1..=cfg.steps {
        let loss = batch_step(net, data, cfg, &mut opt, &mut order)?;
        losses.push(loss);
        window += loss;
        if step % cfg.log_every == 0 {
            on_event(TrainEvent::Log {
                step,
                loss: window / cfg.log_every as f64,
            })?;
            window = 0.0;
        }
    }
    Ok(TrainReport {
        losses,
        steps: cfg.steps,
    })
}

/// `mel_ref = base + predicted residual`, one forward pass.
pub fn refine_with_baseline(
    base: &MelSpectrogram,
    model: &RegBaseline,
) -> Result<RefinementResult> {
    if base.config != model.mel_config {
        return Err(Error::Config(
            "base mel config differs from the baseline's".into(),
        ));
    }
    let cond = model.cond_stats.normalize(&base.values);
    let started = Instant::now();
    let pred = model.net.predict(cond.view())?;
    let residual = pred.mapv(|v| v as f64 * model.stats.std + model.stats.mean);
    finish_refinement(base, &residual, None, started)
}
