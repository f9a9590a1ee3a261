//! Conditional U-Net over (frames × mel-bin) grids.
//!
//! Input is the noisy residual and the conditioning mel stacked as two
//! channels. A sinusoidal embedding of the diffusion step feeds an MLP whose
//! output is projected into every residual block as a per-channel bias.
//! The raw network output is a noise estimate; [`crate::diffcore::ScoreModel`]
//! turns it into a score by dividing by `-sqrt(1 - alpha_bar_t)`.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{crop_top_left, reflect_pad_to};
use crate::nn::{
    add_channel_bias, add_channel_bias_backward, silu, silu_backward, timestep_embedding,
    upsample2, upsample2_backward, Conv2d, GroupNorm, GroupNormCache, Linear, Param, Parameterized,
    Tensor,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreNetArch {
    pub base_channels: usize,
    /// Number of 2× down/up-sampling stages.
    pub depth: usize,
    pub time_embed_dim: usize,
    /// Channel multiplier per resolution level, `depth + 1` entries.
    pub channel_mult: Vec<usize>,
}

impl ScoreNetArch {
    /// About 2.0 M parameters.
    pub fn standard() -> Self {
        ScoreNetArch {
            base_channels: 32,
            depth: 2,
            time_embed_dim: 64,
            channel_mult: vec![1, 2, 4],
        }
    }

    /// About 7.7 M parameters, the enlarged variant for model-size ablations.
    pub fn large() -> Self {
        ScoreNetArch {
            base_channels: 64,
            depth: 2,
            time_embed_dim: 64,
            channel_mult: vec![1, 2, 4],
        }
    }

    /// Small network sized for single-core training on the toy corpus.
    pub fn desk() -> Self {
        ScoreNetArch {
            base_channels: 16,
            depth: 2,
            time_embed_dim: 32,
            channel_mult: vec![1, 2, 2],
        }
    }

    pub fn tiny() -> Self {
        ScoreNetArch {
            base_channels: 8,
            depth: 1,
            time_embed_dim: 16,
            channel_mult: vec![1, 1],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "standard" | "default" => Ok(Self::standard()),
            "large" => Ok(Self::large()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown score-net preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("score-net depth must be >= 1".into()));
        }
        if self.channel_mult.len() != self.depth + 1 {
            return Err(Error::Config(format!(
                "channel_mult needs {} entries, got {}",
                self.depth + 1,
                self.channel_mult.len()
            )));
        }
        if self.base_channels == 0 || self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(
                "base_channels must be positive and time_embed_dim even".into(),
            ));
        }
        if self.channel_mult.contains(&0) {
            return Err(Error::Config("channel multipliers must be positive".into()));
        }
        Ok(())
    }

    /// Both grid axes are padded up to a multiple of this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResBlockCache {
    x: Tensor,
    g1: GroupNormCache,
    n1: Tensor,
    a1: Tensor,
    g2: GroupNormCache,
    n2: Tensor,
    a2: Tensor,
}

impl ResBlock {
    fn new(name: &str, cin: usize, cout: usize, temb: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            gn1: GroupNorm::new(&format!("{name}.gn1"), cin),
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, 1, rng),
            temb_proj: Linear::new(&format!("{name}.temb"), temb, cout, rng),
            gn2: GroupNorm::new(&format!("{name}.gn2"), cout),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(&format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    fn forward(&self, x: &Tensor, temb_act: &Tensor) -> (Tensor, ResBlockCache) {
        let (n1, g1) = self.gn1.forward(x);
        let a1 = silu(&n1);
        let mut h = self.conv1.forward(&a1);
        add_channel_bias(&mut h, &self.temb_proj.forward(temb_act));
        let (n2, g2) = self.gn2.forward(&h);
        let a2 = silu(&n2);
        let mut out = self.conv2.forward(&a2);
        match &self.skip {
            Some(s) => out.add_assign(&s.forward(x)),
            None => out.add_assign(x),
        }
        let cache = ResBlockCache {
            x: x.clone(),
            g1,
            n1,
            a1,
            g2,
            n2,
            a2,
        };
        (out, cache)
    }

    fn backward(
        &mut self,
        cache: &ResBlockCache,
        dout: &Tensor,
        temb_act: &Tensor,
        dtemb_act: &mut Tensor,
    ) -> Tensor {
        let da2 = self.conv2.backward(&cache.a2, dout);
        let dn2 = silu_backward(&cache.n2, &da2);
        let dh = self.gn2.backward(&cache.g2, &dn2);
        let de = add_channel_bias_backward(&dh);
        dtemb_act.add_assign(&self.temb_proj.backward(temb_act, &de));
        let da1 = self.conv1.backward(&cache.a1, &dh);
        let dn1 = silu_backward(&cache.n1, &da1);
        let mut dx = self.gn1.backward(&cache.g1, &dn1);
        match &mut self.skip {
            Some(s) => dx.add_assign(&s.backward(&cache.x, dout)),
            None => dx.add_assign(dout),
        }
        dx
    }
}

impl Parameterized for ResBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.gn1.visit(f);
        self.conv1.visit(f);
        self.temb_proj.visit(f);
        self.gn2.visit(f);
        self.conv2.visit(f);
        if let Some(s) = &self.skip {
            s.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.gn1.visit_mut(f);
        self.conv1.visit_mut(f);
        self.temb_proj.visit_mut(f);
        self.gn2.visit_mut(f);
        self.conv2.visit_mut(f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScoreNet {
    arch: ScoreNetArch,
    t_lin1: Linear,
    t_lin2: Linear,
    in_conv: Conv2d,
    enc: Vec<ResBlock>,
    down: Vec<Conv2d>,
    mid: [ResBlock; 2],
    dec: Vec<ResBlock>,
    up: Vec<Conv2d>,
    out_gn: GroupNorm,
    out_conv: Conv2d,
}

/// Activations retained by [`ScoreNet::forward_batch`] for the backward pass.
pub struct ScoreNetCache {
    x: Tensor,
    temb0: Tensor,
    z1: Tensor,
    a_t: Tensor,
    temb: Tensor,
    temb_act: Tensor,
    enc: Vec<ResBlockCache>,
    down_in: Vec<Tensor>,
    mid: Vec<ResBlockCache>,
    dec: Vec<ResBlockCache>,
    dec_split: Vec<usize>,
    up_in: Vec<Tensor>,
    out_g: GroupNormCache,
    out_n: Tensor,
    out_a: Tensor,
}

impl ScoreNet {
    pub fn new(arch: ScoreNetArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ted = arch.time_embed_dim;
        let d = arch.depth;
        let ch0 = arch.channels(0);
        let t_lin1 = Linear::new("time.lin1", ted, ted * 4, &mut rng);
        let t_lin2 = Linear::new("time.lin2", ted * 4, ted, &mut rng);
        let in_conv = Conv2d::new("in_conv", 2, ch0, 3, 1, &mut rng);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for l in 0..=d {
            let cin = if l == 0 { ch0 } else { arch.channels(l - 1) };
            enc.push(ResBlock::new(
                &format!("enc{l}"),
                cin,
                arch.channels(l),
                ted,
                &mut rng,
            ));
            if l < d {
                let c = arch.channels(l);
                down.push(Conv2d::new(&format!("down{l}"), c, c, 3, 2, &mut rng));
            }
        }
        let cd = arch.channels(d);
        let mid = [
            ResBlock::new("mid0", cd, cd, ted, &mut rng),
            ResBlock::new("mid1", cd, cd, ted, &mut rng),
        ];
        let mut dec = Vec::new();
        let mut up = Vec::new();
        for l in (0..=d).rev() {
            let below = if l == d { cd } else { arch.channels(l + 1) };
            let c = arch.channels(l);
            dec.push(ResBlock::new(
                &format!("dec{l}"),
                below + c,
                c,
                ted,
                &mut rng,
            ));
            if l > 0 {
                up.push(Conv2d::new(&format!("up{l}"), c, c, 3, 1, &mut rng));
            }
        }
        let out_gn = GroupNorm::new("out_gn", ch0);
        let out_conv = Conv2d::new("out_conv", ch0, 1, 3, 1, &mut rng);
        Ok(ScoreNet {
            arch,
            t_lin1,
            t_lin2,
            in_conv,
            enc,
            down,
            mid,
            dec,
            up,
            out_gn,
            out_conv,
        })
    }

    pub fn arch(&self) -> &ScoreNetArch {
        &self.arch
    }

    /// Batched forward over `[b, 2, h, w]` inputs whose spatial sizes are
    /// multiples of [`ScoreNetArch::divisor`]. `ts` holds one step per sample.
    pub fn forward_batch(&self, x: &Tensor, ts: &[usize]) -> (Tensor, ScoreNetCache) {
        assert_eq!(x.c, 2, "score net expects 2 input channels");
        assert_eq!(x.b, ts.len(), "one timestep per sample");
        let div = self.arch.divisor();
        assert!(
            x.h % div == 0 && x.w % div == 0,
            "input not padded to {div}"
        );
        let tf: Vec<f32> = ts.iter().map(|t| *t as f32).collect();
        let temb0 = timestep_embedding(&tf, self.arch.time_embed_dim);
        let z1 = self.t_lin1.forward(&temb0);
        let a_t = silu(&z1);
        let temb = self.t_lin2.forward(&a_t);
        let temb_act = silu(&temb);

        let mut h = self.in_conv.forward(x);
        let mut enc_c = Vec::new();
        let mut skips = Vec::new();
        let mut down_in = Vec::new();
        for (l, block) in self.enc.iter().enumerate() {
            let (o, c) = block.forward(&h, &temb_act);
            enc_c.push(c);
            skips.push(o.clone());
            h = o;
            if l < self.arch.depth {
                let next = self.down[l].forward(&h);
                down_in.push(std::mem::replace(&mut h, next));
            }
        }
        let mut mid_c = Vec::new();
        for block in &self.mid {
            let (o, c) = block.forward(&h, &temb_act);
            mid_c.push(c);
            h = o;
        }
        let mut dec_c = Vec::new();
        let mut dec_split = Vec::new();
        let mut up_in = Vec::new();
        for (i, block) in self.dec.iter().enumerate() {
            let l = self.arch.depth - i;
            dec_split.push(h.c);
            let cat = Tensor::concat_channels(&h, &skips[l]);
            let (o, c) = block.forward(&cat, &temb_act);
            dec_c.push(c);
            h = o;
            if l > 0 {
                let u = upsample2(&h);
                h = self.up[i].forward(&u);
                up_in.push(u);
            }
        }
        let (out_n, out_g) = self.out_gn.forward(&h);
        let out_a = silu(&out_n);
        let out = self.out_conv.forward(&out_a);
        let cache = ScoreNetCache {
            x: x.clone(),
            temb0,
            z1,
            a_t,
            temb,
            temb_act,
            enc: enc_c,
            down_in,
            mid: mid_c,
            dec: dec_c,
            dec_split,
            up_in,
            out_g,
            out_n,
            out_a,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients for `dout = dLoss/dOutput`.
    pub fn backward(&mut self, cache: &ScoreNetCache, dout: &Tensor) {
        let mut dtemb_act = Tensor::zeros_like(&cache.temb_act);
        let da = self.out_conv.backward(&cache.out_a, dout);
        let dn = silu_backward(&cache.out_n, &da);
        let mut dh = self.out_gn.backward(&cache.out_g, &dn);

        let depth = self.arch.depth;
        let mut dskips: Vec<Option<Tensor>> = (0..=depth).map(|_| None).collect();
        for i in (0..self.dec.len()).rev() {
            let l = depth - i;
            if l > 0 {
                let du = self.up[i].backward(&cache.up_in[i], &dh);
                dh = upsample2_backward(&du);
            }
            let dcat = self.dec[i].backward(&cache.dec[i], &dh, &cache.temb_act, &mut dtemb_act);
            let (dprev, dskip) = dcat.split_channels(cache.dec_split[i]);
            dskips[l] = Some(dskip);
            dh = dprev;
        }
        for i in (0..self.mid.len()).rev() {
            dh = self.mid[i].backward(&cache.mid[i], &dh, &cache.temb_act, &mut dtemb_act);
        }
        for l in (0..=depth).rev() {
            if l < depth {
                dh = self.down[l].backward(&cache.down_in[l], &dh);
            }
            if let Some(ds) = dskips[l].take() {
                dh.add_assign(&ds);
            }
            dh = self.enc[l].backward(&cache.enc[l], &dh, &cache.temb_act, &mut dtemb_act);
        }
        let _ = self.in_conv.backward(&cache.x, &dh);

        let dtemb = silu_backward(&cache.temb, &dtemb_act);
        let da_t = self.t_lin2.backward(&cache.a_t, &dtemb);
        let dz1 = silu_backward(&cache.z1, &da_t);
        let _ = self.t_lin1.backward(&cache.temb0, &dz1);
    }

    /// Single-utterance inference on `frames × bins` grids of any size.
    /// Inputs are reflect-padded to the divisibility requirement and the
    /// output is cropped back.
    pub fn forward(
        &self,
        x_t: ArrayView2<f32>,
        t: usize,
        c: ArrayView2<f32>,
    ) -> Result<Array2<f32>> {
        if x_t.dim() != c.dim() {
            return Err(Error::Shape(format!(
                "x_t {:?} vs conditioning {:?}",
                x_t.dim(),
                c.dim()
            )));
        }
        let input = self.pack_inputs(&[(x_t, c)]);
        let (out, _) = self.forward_batch(&input, &[t]);
        let (rows, cols) = x_t.dim();
        let grid = crop_top_left(out.channel(0, 0), out.h, out.w, rows, cols);
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "score net produced non-finite output".into(),
            ));
        }
        Ok(grid)
    }

    /// Pads and stacks equally-shaped `(x_t, c)` pairs into a `[b, 2, h, w]` tensor.
    pub fn pack_inputs(&self, pairs: &[(ArrayView2<f32>, ArrayView2<f32>)]) -> Tensor {
        let (rows, cols) = pairs[0].0.dim();
        let div = self.arch.divisor();
        let (h, w) = (rows.div_ceil(div) * div, cols.div_ceil(div) * div);
        let mut t = Tensor::zeros(pairs.len(), 2, h, w);
        for (n, (x, c)) in pairs.iter().enumerate() {
            assert_eq!(x.dim(), (rows, cols), "batch members must share a shape");
            t.channel_mut(n, 0)
                .copy_from_slice(&reflect_pad_to(*x, h, w));
            t.channel_mut(n, 1)
                .copy_from_slice(&reflect_pad_to(*c, h, w));
        }
        t
    }
}

impl Parameterized for ScoreNet {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.t_lin1.visit(f);
        self.t_lin2.visit(f);
        self.in_conv.visit(f);
        for b in &self.enc {
            b.visit(f);
        }
        for c in &self.down {
            c.visit(f);
        }
        for b in &self.mid {
            b.visit(f);
        }
        for b in &self.dec {
            b.visit(f);
        }
        for c in &self.up {
            c.visit(f);
        }
        self.out_gn.visit(f);
        self.out_conv.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.t_lin1.visit_mut(f);
        self.t_lin2.visit_mut(f);
        self.in_conv.visit_mut(f);
        for b in &mut self.enc {
            b.visit_mut(f);
        }
        for c in &mut self.down {
            c.visit_mut(f);
        }
        for b in &mut self.mid {
            b.visit_mut(f);
        }
        for b in &mut self.dec {
            b.visit_mut(f);
        }
        for c in &mut self.up {
            c.visit_mut(f);
        }
        self.out_gn.visit_mut(f);
        self.out_conv.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn random_grid(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn preset_parameter_budgets() {
        let std = ScoreNet::new(ScoreNetArch::standard(), 0)
            .unwrap()
            .param_count();
        assert!((1_800_000..=2_200_000).contains(&std), "standard = {std}");
        let large = ScoreNet::new(ScoreNetArch::large(), 0)
            .unwrap()
            .param_count();
        assert!((7_000_000..=8_500_000).contains(&large), "large = {large}");
    }

    #[test]
    fn param_count_equals_tensor_sum() {
        let net = ScoreNet::new(ScoreNetArch::desk(), 1).unwrap();
        let mut total = 0;
        net.visit(&mut |p| total += p.shape.iter().product::<usize>());
        assert_eq!(total, net.param_count());
    }

    #[test]
    fn tiny_net_preserves_square_shape() {
        let net = ScoreNet::new(ScoreNetArch::tiny(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_grid(&mut rng, 16, 16);
        let c = random_grid(&mut rng, 16, 16);
        assert_eq!(net.forward(x.view(), 10, c.view()).unwrap().dim(), (16, 16));
    }

    #[test]
    fn crop_back_for_odd_frame_counts() {
        let net = ScoreNet::new(ScoreNetArch::desk(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for frames in [37, 64, 345] {
            let x = random_grid(&mut rng, frames, 64);
            let c = random_grid(&mut rng, frames, 64);
            let y = net.forward(x.view(), 500, c.view()).unwrap();
            assert_eq!(y.dim(), (frames, 64));
        }
    }

    #[test]
    fn deterministic_conditioned_and_time_aware() {
        let net = ScoreNet::new(ScoreNetArch::tiny(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_grid(&mut rng, 12, 16);
        let c = random_grid(&mut rng, 12, 16);
        let a = net.forward(x.view(), 7, c.view()).unwrap();
        let b = net.forward(x.view(), 7, c.view()).unwrap();
        assert_eq!(a, b);

        let c2 = &c + &random_grid(&mut rng, 12, 16).mapv(|v| 0.1 * v);
        let d = net.forward(x.view(), 7, c2.view()).unwrap();
        let diff = (&a - &d).iter().fold(0f32, |m, v| m.max(v.abs()));
        assert!(diff > 0.0);

        let early = net.forward(x.view(), 1, c.view()).unwrap();
        let late = net.forward(x.view(), 1000, c.view()).unwrap();
        let diff = (&early - &late).iter().fold(0f32, |m, v| m.max(v.abs()));
        assert!(diff > 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let net = ScoreNet::new(ScoreNetArch::tiny(), 0).unwrap();
        let x = Array2::<f32>::zeros((8, 8));
        let c = Array2::<f32>::zeros((8, 6));
        assert!(matches!(
            net.forward(x.view(), 1, c.view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn invalid_arch_rejected() {
        let mut a = ScoreNetArch::tiny();
        a.depth = 0;
        assert!(ScoreNet::new(a, 0).is_err());
        let mut b = ScoreNetArch::tiny();
        b.channel_mult = vec![1];
        assert!(ScoreNet::new(b, 0).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = ScoreNet::new(ScoreNetArch::tiny(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = net.pack_inputs(&[
            (
                random_grid(&mut rng, 8, 8).view(),
                random_grid(&mut rng, 8, 8).view(),
            ),
            (
                random_grid(&mut rng, 8, 8).view(),
                random_grid(&mut rng, 8, 8).view(),
            ),
        ]);
        let ts = [3, 400];
        let wts: Vec<f32> = (0..2 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |net: &ScoreNet| -> f64 {
            let (y, _) = net.forward_batch(&x, &ts);
            y.data
                .iter()
                .zip(&wts)
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        net.zero_grad();
        let (_, cache) = net.forward_batch(&x, &ts);
        net.backward(&cache, &Tensor::from_vec(2, 1, 8, 8, wts.clone()));

        let mut grads = Vec::new();
        net.visit(&mut |p| grads.push((p.name.clone(), p.grad.clone())));
        let probes = [
            "time.lin1.weight",
            "enc0.conv1.weight",
            "down0.weight",
            "mid1.gn2.gamma",
            "dec1.skip.weight",
            "up1.weight",
            "out_conv.bias",
            "in_conv.weight",
        ];
        let h = 5e-3f32;
        for name in probes {
            let (_, g) = grads.iter().find(|(n, _)| n == name).expect(name);
            let idx = g.len() / 3;
            let bump = |net: &mut ScoreNet, delta: f32| {
                net.visit_mut(&mut |p| {
                    if p.name == name {
                        p.value[idx] += delta;
                    }
                })
            };
            bump(&mut net, h);
            let fp = objective(&net);
            bump(&mut net, -2.0 * h);
            let fm = objective(&net);
            bump(&mut net, h);
            let num = (fp - fm) / (2.0 * h as f64);
            let ana = g[idx] as f64;
            let denom = num.abs().max(ana.abs()).max(1e-2);
            assert!((num - ana).abs() / denom < 3e-2, "{name}: {ana} vs {num}");
        }
    }
}
