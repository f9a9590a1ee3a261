//! Minimal CPU neural-network toolkit: NCHW tensors, layers with explicit
//! backward passes, and Adam. Convolutions run as im2col + SGEMM.

mod layers;
mod optim;
mod tensor;

pub use layers::{
    add_channel_bias, add_channel_bias_backward, group_count, leaky_relu, leaky_relu_backward,
    silu, silu_backward, upsample2, upsample2_backward, BatchNorm2d, BatchNormCache, Conv2d,
    GroupNorm, GroupNormCache, Linear, LEAKY_SLOPE,
};
pub use optim::Adam;
pub use tensor::{Param, Parameterized, Tensor};

/// Sinusoidal embedding of a (possibly fractional) timestep, `[b, dim, 1, 1]`.
pub fn timestep_embedding(ts: &[f32], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(ts.len(), dim, 1, 1);
    for (n, t) in ts.iter().enumerate() {
        let row = out.sample_mut(n);
        for i in 0..half {
            let freq = (-(10000f32.ln()) * i as f32 / half as f32).exp();
            let a = t * freq;
            row[i] = a.sin();
            row[half + i] = a.cos();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Tensor {
        use rand::Rng;
        let data = (0..b * c * h * w)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(b, c, h, w, data)
    }

    /// Weighted-sum objective so every output element has a distinct gradient.
    fn objective(y: &Tensor, wts: &Tensor) -> f64 {
        y.data
            .iter()
            .zip(&wts.data)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum()
    }

    fn check_close(analytic: f64, numeric: f64, what: &str) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-2);
        assert!(
            (analytic - numeric).abs() / denom < 2e-2,
            "{what}: analytic {analytic} vs numeric {numeric}"
        );
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (kernel, stride) in [
            ((3, 3), 1),
            ((3, 3), 2),
            ((1, 1), 1),
            ((5, 1), 1),
            ((1, 3), 1),
        ] {
            let mut conv = Conv2d::with_kernel("c", 3, 4, kernel, stride, &mut rng);
            let x = rand_tensor(&mut rng, 2, 3, 6, 5);
            let y = conv.forward(&x);
            let wts = rand_tensor(&mut rng, y.b, y.c, y.h, y.w);
            conv.zero_grad();
            let dx = conv.backward(&x, &wts);
            let h = 1e-2f32;
            for i in [0usize, 7, 20] {
                let mut xp = x.clone();
                xp.data[i] += h;
                let mut xm = x.clone();
                xm.data[i] -= h;
                let num = (objective(&conv.forward(&xp), &wts)
                    - objective(&conv.forward(&xm), &wts))
                    / (2.0 * h as f64);
                check_close(dx.data[i] as f64, num, "conv dx");
            }
            for i in [0usize, 5, conv.weight.len() - 1] {
                let orig = conv.weight.value[i];
                conv.weight.value[i] = orig + h;
                let fp = objective(&conv.forward(&x), &wts);
                conv.weight.value[i] = orig - h;
                let fm = objective(&conv.forward(&x), &wts);
                conv.weight.value[i] = orig;
                check_close(
                    conv.weight.grad[i] as f64,
                    (fp - fm) / (2.0 * h as f64),
                    "conv dw",
                );
            }
        }
    }

    #[test]
    fn group_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut gn = GroupNorm::new("g", 4);
        gn.gamma.value = vec![0.5, 1.5, -1.0, 2.0];
        gn.beta.value = vec![0.1, 0.0, 0.3, -0.2];
        let x = rand_tensor(&mut rng, 2, 4, 3, 3);
        let (y, cache) = gn.forward(&x);
        let wts = rand_tensor(&mut rng, y.b, y.c, y.h, y.w);
        gn.zero_grad();
        let dx = gn.backward(&cache, &wts);
        let h = 1e-2f32;
        for i in [0usize, 11, 40, 71] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let num = (objective(&gn.forward(&xp).0, &wts) - objective(&gn.forward(&xm).0, &wts))
                / (2.0 * h as f64);
            check_close(dx.data[i] as f64, num, "gn dx");
        }
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut bn = BatchNorm2d::new("b", 3);
        bn.gamma.value = vec![0.5, 1.5, -1.0];
        let x = rand_tensor(&mut rng, 2, 3, 3, 2);
        let (y, cache) = bn.forward(&x, true);
        let wts = rand_tensor(&mut rng, y.b, y.c, y.h, y.w);
        bn.zero_grad();
        let dx = bn.backward(&cache, &wts);
        let h = 1e-2f32;
        for i in [0usize, 9, 30] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let mut probe = bn.clone();
            let fp = objective(&probe.forward(&xp, true).0, &wts);
            let fm = objective(&probe.forward(&xm, true).0, &wts);
            check_close(dx.data[i] as f64, (fp - fm) / (2.0 * h as f64), "bn dx");
        }
    }

    #[test]
    fn batch_norm_eval_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bn = BatchNorm2d::new("b", 2);
        for _ in 0..3 {
            bn.forward(&rand_tensor(&mut rng, 2, 2, 4, 4), true);
        }
        let x = rand_tensor(&mut rng, 1, 2, 4, 4);
        let frozen = bn.clone();
        let (y, _) = bn.forward(&x, false);
        assert_eq!(y.data, frozen.forward_eval(&x).data);
        assert_eq!(bn.running_mean.value, frozen.running_mean.value);
    }

    #[test]
    fn linear_and_activations_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut lin = Linear::new("l", 5, 3, &mut rng);
        let x = rand_tensor(&mut rng, 2, 5, 1, 1);
        let wts = rand_tensor(&mut rng, 2, 3, 1, 1);
        let f = |lin: &Linear, x: &Tensor| objective(&leaky_relu(&silu(&lin.forward(x))), &wts);
        lin.zero_grad();
        let z = lin.forward(&x);
        let a = silu(&z);
        let da = leaky_relu_backward(&a, &wts);
        let dz = silu_backward(&z, &da);
        let dx = lin.backward(&x, &dz);
        let h = 1e-2f32;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            check_close(
                dx.data[i] as f64,
                (f(&lin, &xp) - f(&lin, &xm)) / (2.0 * h as f64),
                "linear dx",
            );
        }
        let i = 4;
        let orig = lin.weight.value[i];
        lin.weight.value[i] = orig + h;
        let fp = f(&lin, &x);
        lin.weight.value[i] = orig - h;
        let fm = f(&lin, &x);
        check_close(
            lin.weight.grad[i] as f64,
            (fp - fm) / (2.0 * h as f64),
            "linear dw",
        );
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, 1, 2, 3, 4);
        let y = upsample2(&x);
        assert_eq!(y.dims(), [1, 2, 6, 8]);
        let g = rand_tensor(&mut rng, 1, 2, 6, 8);
        let lhs = objective(&y, &g);
        let rhs = objective(&x, &upsample2_backward(&g));
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn group_count_divides() {
        assert_eq!(group_count(64), 8);
        assert_eq!(group_count(32), 8);
        assert_eq!(group_count(16), 4);
        assert_eq!(group_count(12), 3);
        assert_eq!(group_count(2), 1);
        assert_eq!(group_count(7), 1);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut lin = Linear {
            weight: Param::new("w", vec![1, 1], vec![1.0]),
            bias: Param::new("b", vec![1], vec![0.0]),
            fin: 1,
            fout: 1,
        };
        lin.weight.grad = vec![0.5];
        lin.bias.grad = vec![-0.5];
        let mut opt = Adam::new(0.1);
        opt.step(&mut lin);
        assert!((lin.weight.value[0] - 0.9).abs() < 1e-5);
        assert!((lin.bias.value[0] - 0.1).abs() < 1e-5);
    }
}
