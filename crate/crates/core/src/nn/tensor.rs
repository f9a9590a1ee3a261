use serde::{Deserialize, Serialize};

/// Dense `[batch, channels, height, width]` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            b,
            c,
            h,
            w,
            data: vec![0.0; b * c * h * w],
        }
    }

    pub fn from_vec(b: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), b * c * h * w, "tensor data length");
        Tensor { b, c, h, w, data }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.b, other.c, other.h, other.w)
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.b, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, b: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f32] {
        let n = self.sample_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn channel(&self, b: usize, c: usize) -> &[f32] {
        let p = self.plane();
        let off = (b * self.c + c) * p;
        &self.data[off..off + p]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [f32] {
        let p = self.plane();
        let off = (b * self.c + c) * p;
        &mut self.data[off..off + p]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.b, a.h, a.w), (b.b, b.h, b.w), "concat shape");
        let mut out = Tensor::zeros(a.b, a.c + b.c, a.h, a.w);
        for n in 0..a.b {
            let dst = out.sample_mut(n);
            let na = a.sample_len();
            dst[..na].copy_from_slice(a.sample(n));
            dst[na..].copy_from_slice(b.sample(n));
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`]: split off the first `ca` channels.
    pub fn split_channels(&self, ca: usize) -> (Tensor, Tensor) {
        let cb = self.c - ca;
        let mut a = Tensor::zeros(self.b, ca, self.h, self.w);
        let mut b = Tensor::zeros(self.b, cb, self.h, self.w);
        let na = a.sample_len();
        for n in 0..self.b {
            let src = self.sample(n);
            a.sample_mut(n).copy_from_slice(&src[..na]);
            b.sample_mut(n).copy_from_slice(&src[na..]);
        }
        (a, b)
    }
}

/// Trainable (or buffered) tensor with an accumulated gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    #[serde(skip)]
    pub grad: Vec<f32>,
    /// Buffers such as batch-norm running statistics are saved but never optimized.
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "param size");
        Param {
            name: name.into(),
            shape,
            grad: vec![0.0; n],
            value,
            trainable: true,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![0.0; n])
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![v; n])
    }

    pub fn buffer(name: impl Into<String>, shape: Vec<usize>, v: f32) -> Self {
        let mut p = Self::filled(name, shape, v);
        p.trainable = false;
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        } else {
            self.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Anything that owns parameters. Visiting order is stable and defines
/// checkpoint layout and optimizer state alignment.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    /// Number of trainable scalars.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }
}
