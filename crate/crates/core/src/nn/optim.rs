use super::tensor::{Param, Parameterized};

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub clip_norm: Option<f32>,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Returns the pre-clipping global gradient norm.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M) -> f32 {
        let mut sq = 0.0f64;
        model.visit(&mut |p: &Param| {
            if p.trainable {
                sq += p.grad.iter().map(|g| (*g as f64).powi(2)).sum::<f64>();
            }
        });
        let norm = sq.sqrt() as f32;
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        model.visit_mut(&mut |p: &mut Param| {
            if !p.trainable {
                return;
            }
            if ms.len() <= idx {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for i in 0..p.value.len() {
                let g = p.grad[i] * scale;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.value[i] -= lr * mh / (vh.sqrt() + eps);
            }
            idx += 1;
        });
        norm
    }
}
