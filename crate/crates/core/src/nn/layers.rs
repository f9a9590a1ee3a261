use rand::Rng;

use super::tensor::{Param, Parameterized, Tensor};

/// `c = a · b + beta · c` for row/column-strided single-precision matrices.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserted bounds cover every element the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn uniform_init(rng: &mut impl Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Kernel geometry shared by [`im2col`] and [`col2im`].
#[derive(Debug, Clone, Copy)]
struct Window {
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
}

/// Unfold a `[c, h, w]` image into `[c·kh·kw, ho·wo]` patch columns (zero padding).
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    ho: usize,
    wo: usize,
    cols: &mut [f32],
) {
    let Window {
        kh,
        kw,
        stride,
        pad_h,
        pad_w,
    } = win;
    let pad = pad_w;
    let p = ho * wo;
    for ci in 0..c {
        let img = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad_h as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &img[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // contiguous run, only the borders need zeroing
                        let lo = pad.saturating_sub(kx).min(wo);
                        let hi = (w + pad).saturating_sub(kx).min(wo).max(lo);
                        line[..lo].iter_mut().for_each(|v| *v = 0.0);
                        line[hi..].iter_mut().for_each(|v| *v = 0.0);
                        let start = lo + kx - pad;
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *v = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[c, h, w]` image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    ho: usize,
    wo: usize,
    dx: &mut [f32],
) {
    let Window {
        kh,
        kw,
        stride,
        pad_h,
        pad_w,
    } = win;
    let pad = pad_w;
    let p = ho * wo;
    for ci in 0..c {
        let img = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let dst = &mut img[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        let lo = pad.saturating_sub(kx).min(wo);
                        let hi = (w + pad).saturating_sub(kx).min(wo).max(lo);
                        let start = lo + kx - pad;
                        for (d, v) in dst[start..start + hi - lo].iter_mut().zip(&line[lo..hi]) {
                            *d += *v;
                        }
                        continue;
                    }
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with odd kernel sizes and "same" zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_kernel(name, cin, cout, (k, k), stride, rng)
    }

    pub fn with_kernel(
        name: &str,
        cin: usize,
        cout: usize,
        (kh, kw): (usize, usize),
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kh * kw;
        let bound = 1.0 / (fan_in as f32).sqrt();
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                vec![cout, cin, kh, kw],
                uniform_init(rng, cout * fan_in, bound),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                vec![cout],
                uniform_init(rng, cout, bound),
            ),
            cin,
            cout,
            kh,
            kw,
            stride,
        }
    }

    fn window(&self) -> Window {
        Window {
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad_h: self.kh / 2,
            pad_w: self.kw / 2,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let win = self.window();
        (
            (h + 2 * win.pad_h - self.kh) / self.stride + 1,
            (w + 2 * win.pad_w - self.kw) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "{}: input channels", self.weight.name);
        let (ho, wo) = self.out_hw(x.h, x.w);
        let p = ho * wo;
        let kk = self.cin * self.kh * self.kw;
        let mut out = Tensor::zeros(x.b, self.cout, ho, wo);
        let mut cols = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; kk * p]
        };
        for n in 0..x.b {
            let cols_ref: &[f32] = if self.is_pointwise() {
                x.sample(n)
            } else {
                im2col(x.sample(n), x.c, x.h, x.w, self.window(), ho, wo, &mut cols);
                &cols
            };
            let y = out.sample_mut(n);
            for (co, b) in self.bias.value.iter().enumerate() {
                y[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = *b);
            }
            sgemm(
                self.cout,
                kk,
                p,
                &self.weight.value,
                (kk, 1),
                cols_ref,
                (p, 1),
                1.0,
                y,
                (p, 1),
            );
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (ho, wo) = (dy.h, dy.w);
        let p = ho * wo;
        let kk = self.cin * self.kh * self.kw;
        let mut dx = Tensor::zeros_like(x);
        let pointwise = self.is_pointwise();
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![0.0; kk * p]
        };
        let mut dcols = vec![0.0; kk * p];
        for n in 0..x.b {
            let g = dy.sample(n);
            for co in 0..self.cout {
                self.bias.grad[co] += g[co * p..(co + 1) * p].iter().sum::<f32>();
            }
            let cols_ref: &[f32] = if pointwise {
                x.sample(n)
            } else {
                im2col(x.sample(n), x.c, x.h, x.w, self.window(), ho, wo, &mut cols);
                &cols
            };
            // dW[cout, kk] += dY[cout, p] · cols[kk, p]^T
            sgemm(
                self.cout,
                p,
                kk,
                g,
                (p, 1),
                cols_ref,
                (1, p),
                1.0,
                &mut self.weight.grad,
                (kk, 1),
            );
            // dcols[kk, p] = W^T[kk, cout] · dY[cout, p]
            sgemm(
                kk,
                self.cout,
                p,
                &self.weight.value,
                (1, kk),
                g,
                (p, 1),
                0.0,
                &mut dcols,
                (p, 1),
            );
            if pointwise {
                dx.sample_mut(n).copy_from_slice(&dcols);
            } else {
                col2im(
                    &dcols,
                    x.c,
                    x.h,
                    x.w,
                    self.window(),
                    ho,
                    wo,
                    dx.sample_mut(n),
                );
            }
        }
        dx
    }
}

impl Parameterized for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Fully connected layer over `[b, features, 1, 1]` tensors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn new(name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fin as f32).sqrt();
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                vec![fout, fin],
                uniform_init(rng, fin * fout, bound),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                vec![fout],
                uniform_init(rng, fout, bound),
            ),
            fin,
            fout,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(
            x.sample_len(),
            self.fin,
            "{}: input width",
            self.weight.name
        );
        let mut out = Tensor::zeros(x.b, self.fout, 1, 1);
        for n in 0..x.b {
            out.sample_mut(n).copy_from_slice(&self.bias.value);
        }
        // out[b, fout] += x[b, fin] · W^T
        sgemm(
            x.b,
            self.fin,
            self.fout,
            &x.data,
            (self.fin, 1),
            &self.weight.value,
            (1, self.fin),
            1.0,
            &mut out.data,
            (self.fout, 1),
        );
        out
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        for n in 0..x.b {
            for (g, d) in self.bias.grad.iter_mut().zip(dy.sample(n)) {
                *g += *d;
            }
        }
        // dW[fout, fin] += dY^T[fout, b] · x[b, fin]
        sgemm(
            self.fout,
            x.b,
            self.fin,
            &dy.data,
            (1, self.fout),
            &x.data,
            (self.fin, 1),
            1.0,
            &mut self.weight.grad,
            (self.fin, 1),
        );
        let mut dx = Tensor::zeros_like(x);
        sgemm(
            x.b,
            self.fout,
            self.fin,
            &dy.data,
            (self.fout, 1),
            &self.weight.value,
            (self.fin, 1),
            0.0,
            &mut dx.data,
            (self.fin, 1),
        );
        dx
    }
}

impl Parameterized for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Largest group count `<= 8` that divides `channels` and leaves at least
/// four channels per group, so per-channel biases survive normalization.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0 && channels / g >= 4)
        .unwrap_or(1)
}

const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    pub groups: usize,
    pub channels: usize,
}

pub struct GroupNormCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl GroupNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        GroupNorm {
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], 1.0),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            groups: group_count(channels),
            channels,
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, GroupNormCache) {
        let cpg = self.channels / self.groups;
        let span = cpg * x.plane();
        let mut xhat = Tensor::zeros_like(x);
        let mut out = Tensor::zeros_like(x);
        let mut inv_std = Vec::with_capacity(x.b * self.groups);
        for n in 0..x.b {
            let xs = x.sample(n);
            for g in 0..self.groups {
                let seg = &xs[g * span..(g + 1) * span];
                let mean = seg.iter().map(|v| *v as f64).sum::<f64>() / span as f64;
                let var = seg.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / span as f64;
                let istd = 1.0 / (var + NORM_EPS as f64).sqrt();
                inv_std.push(istd as f32);
                let xh = &mut xhat.sample_mut(n)[g * span..(g + 1) * span];
                for (d, v) in xh.iter_mut().zip(seg) {
                    *d = ((*v as f64 - mean) * istd) as f32;
                }
            }
            for c in 0..self.channels {
                let (ga, be) = (self.gamma.value[c], self.beta.value[c]);
                let src = xhat.channel(n, c);
                let dst = out.channel_mut(n, c);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = ga * *s + be;
                }
            }
        }
        (out, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &GroupNormCache, dy: &Tensor) -> Tensor {
        let cpg = self.channels / self.groups;
        let plane = dy.plane();
        let span = cpg * plane;
        let mut dx = Tensor::zeros_like(dy);
        let mut dxhat = vec![0.0f32; span];
        for n in 0..dy.b {
            for c in 0..self.channels {
                let g = dy.channel(n, c);
                let xh = cache.xhat.channel(n, c);
                let mut sg = 0.0f32;
                let mut sgx = 0.0f32;
                for (a, b) in g.iter().zip(xh) {
                    sg += *a;
                    sgx += *a * *b;
                }
                self.beta.grad[c] += sg;
                self.gamma.grad[c] += sgx;
            }
            for g in 0..self.groups {
                for ci in 0..cpg {
                    let c = g * cpg + ci;
                    let ga = self.gamma.value[c];
                    for (d, v) in dxhat[ci * plane..(ci + 1) * plane]
                        .iter_mut()
                        .zip(dy.channel(n, c))
                    {
                        *d = *v * ga;
                    }
                }
                let xh = &cache.xhat.sample(n)[g * span..(g + 1) * span];
                let mut sum_d = 0.0f64;
                let mut sum_dx = 0.0f64;
                for (d, x) in dxhat.iter().zip(xh) {
                    sum_d += *d as f64;
                    sum_dx += (*d * *x) as f64;
                }
                let m = span as f64;
                let (mean_d, mean_dx) = ((sum_d / m) as f32, (sum_dx / m) as f32);
                let istd = cache.inv_std[n * self.groups + g];
                let out = &mut dx.sample_mut(n)[g * span..(g + 1) * span];
                for ((o, d), x) in out.iter_mut().zip(&dxhat).zip(xh) {
                    *o = istd * (*d - mean_d - *x * mean_dx);
                }
            }
        }
        dx
    }
}

impl Parameterized for GroupNorm {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Per-channel batch normalization with running statistics for inference.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
}

pub struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], 1.0),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            running_mean: Param::buffer(format!("{name}.running_mean"), vec![channels], 0.0),
            running_var: Param::buffer(format!("{name}.running_var"), vec![channels], 1.0),
            momentum: 0.1,
        }
    }

    /// In training mode, normalizes with batch statistics and updates the
    /// running averages; otherwise uses the running averages.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> (Tensor, BatchNormCache) {
        let channels = self.gamma.len();
        assert_eq!(x.c, channels, "{}: channels", self.gamma.name);
        let count = (x.b * x.plane()) as f64;
        let mut xhat = Tensor::zeros_like(x);
        let mut out = Tensor::zeros_like(x);
        let mut inv_std = vec![0.0f32; channels];
        for c in 0..channels {
            let (mean, var) = if train {
                let mut s = 0.0f64;
                for n in 0..x.b {
                    s += x.channel(n, c).iter().map(|v| *v as f64).sum::<f64>();
                }
                let mean = s / count;
                let mut v = 0.0f64;
                for n in 0..x.b {
                    v += x
                        .channel(n, c)
                        .iter()
                        .map(|a| (*a as f64 - mean).powi(2))
                        .sum::<f64>();
                }
                let var = v / count;
                let m = self.momentum;
                let unbiased = if count > 1.0 {
                    var * count / (count - 1.0)
                } else {
                    var
                };
                self.running_mean.value[c] =
                    (1.0 - m) * self.running_mean.value[c] + m * mean as f32;
                self.running_var.value[c] =
                    (1.0 - m) * self.running_var.value[c] + m * unbiased as f32;
                (mean, var)
            } else {
                (
                    self.running_mean.value[c] as f64,
                    self.running_var.value[c] as f64,
                )
            };
            let istd = 1.0 / (var + NORM_EPS as f64).sqrt();
            inv_std[c] = istd as f32;
            let (ga, be) = (self.gamma.value[c], self.beta.value[c]);
            for n in 0..x.b {
                let src = x.channel(n, c);
                let xh: Vec<f32> = src
                    .iter()
                    .map(|v| ((*v as f64 - mean) * istd) as f32)
                    .collect();
                for (o, h) in out.channel_mut(n, c).iter_mut().zip(&xh) {
                    *o = ga * *h + be;
                }
                xhat.channel_mut(n, c).copy_from_slice(&xh);
            }
        }
        (
            out,
            BatchNormCache {
                xhat,
                inv_std,
                train,
            },
        )
    }

    /// Inference with running statistics; never mutates the layer.
    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros_like(x);
        for c in 0..self.gamma.len() {
            let istd = 1.0 / (self.running_var.value[c] as f64 + NORM_EPS as f64).sqrt();
            let mean = self.running_mean.value[c] as f64;
            let (ga, be) = (self.gamma.value[c], self.beta.value[c]);
            for n in 0..x.b {
                for (o, v) in out.channel_mut(n, c).iter_mut().zip(x.channel(n, c)) {
                    *o = ga * (((*v as f64 - mean) * istd) as f32) + be;
                }
            }
        }
        out
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: &Tensor) -> Tensor {
        let channels = self.gamma.len();
        let count = (dy.b * dy.plane()) as f32;
        let mut dx = Tensor::zeros_like(dy);
        for c in 0..channels {
            let mut sg = 0.0f32;
            let mut sgx = 0.0f32;
            for n in 0..dy.b {
                for (g, x) in dy.channel(n, c).iter().zip(cache.xhat.channel(n, c)) {
                    sg += *g;
                    sgx += *g * *x;
                }
            }
            self.beta.grad[c] += sg;
            self.gamma.grad[c] += sgx;
            let ga = self.gamma.value[c];
            let istd = cache.inv_std[c];
            for n in 0..dy.b {
                let g = dy.channel(n, c);
                let xh = cache.xhat.channel(n, c);
                let o = dx.channel_mut(n, c);
                for i in 0..o.len() {
                    o[i] = if cache.train {
                        ga * istd * (g[i] - sg / count - xh[i] * sgx / count)
                    } else {
                        ga * istd * g[i]
                    };
                }
            }
        }
        dx
    }
}

impl Parameterized for BatchNorm2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// `x · sigmoid(x)`
pub fn silu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v *= sigmoid(*v));
    out
}

pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, v) in dx.data.iter_mut().zip(&x.data) {
        let s = sigmoid(*v);
        *d *= s * (1.0 + *v * (1.0 - s));
    }
    dx
}

pub const LEAKY_SLOPE: f32 = 0.2;

pub fn leaky_relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data
        .iter_mut()
        .for_each(|v| *v = if *v > 0.0 { *v } else { *v * LEAKY_SLOPE });
    out
}

pub fn leaky_relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, v) in dx.data.iter_mut().zip(&x.data) {
        if *v <= 0.0 {
            *d *= LEAKY_SLOPE;
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.b, x.c, h2, w2);
    for n in 0..x.b {
        for c in 0..x.c {
            let src = x.channel(n, c);
            let dst = out.channel_mut(n, c);
            for y in 0..h2 {
                let row = &src[(y / 2) * x.w..(y / 2 + 1) * x.w];
                for (xx, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                    *d = row[xx / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.b, dy.c, h, w);
    for n in 0..dy.b {
        for c in 0..dy.c {
            let src = dy.channel(n, c);
            let dst = dx.channel_mut(n, c);
            for y in 0..dy.h {
                for x in 0..dy.w {
                    dst[(y / 2) * w + x / 2] += src[y * dy.w + x];
                }
            }
        }
    }
    dx
}

/// Broadcast-add a `[b, c, 1, 1]` vector over every spatial position.
pub fn add_channel_bias(x: &mut Tensor, bias: &Tensor) {
    assert_eq!(
        (x.b, x.c),
        (bias.b, bias.sample_len()),
        "channel bias shape"
    );
    for n in 0..x.b {
        for c in 0..x.c {
            let v = bias.data[n * x.c + c];
            x.channel_mut(n, c).iter_mut().for_each(|a| *a += v);
        }
    }
}

pub fn add_channel_bias_backward(dy: &Tensor) -> Tensor {
    let mut d = Tensor::zeros(dy.b, dy.c, 1, 1);
    for n in 0..dy.b {
        for c in 0..dy.c {
            d.data[n * dy.c + c] = dy.channel(n, c).iter().sum();
        }
    }
    d
}
