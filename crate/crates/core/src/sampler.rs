//! Few-step ancestral sampling of the residual and the final refinement.

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{NoiseSchedule, ScoreFunction};
use crate::error::{Error, Result};
use crate::melpipe::MelSpectrogram;
use crate::residual::{add_residual, CondStats, ResidualStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaKind {
    /// `σ² = 1 − ab_t/ab_next`
    Beta,
    /// Posterior variance `(1 − ab_next)/(1 − ab_t) · (1 − ab_t/ab_next)`.
    BetaTilde,
}

impl Default for SigmaKind {
    fn default() -> Self {
        SigmaKind::Beta
    }
}

impl std::str::FromStr for SigmaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SigmaKind::Beta),
            "beta_tilde" => Ok(SigmaKind::BetaTilde),
            o => Err(Error::Config(format!("unknown sigma kind `{o}`"))),
        }
    }
}

impl std::fmt::Display for SigmaKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SigmaKind::Beta => "beta",
            SigmaKind::BetaTilde => "beta_tilde",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerPlan {
    pub t_max: usize,
    /// Strictly decreasing, starts at `t_max`, ends at 1 (or is `[t_max]`).
    pub steps: Vec<usize>,
    pub sigma_kind: SigmaKind,
}

impl SamplerPlan {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// `round(linspace(T, 1, n))`, deduplicated.
pub fn plan_steps(t_max: usize, n: usize, sigma_kind: SigmaKind) -> Result<SamplerPlan> {
    if n == 0 || n > t_max {
        return Err(Error::Config(format!(
            "sampler steps must lie in 1..={t_max}, got {n}"
        )));
    }
    let mut steps: Vec<usize> = if n == 1 {
        vec![t_max]
    } else {
        (0..n)
            .map(|i| {
                let v = t_max as f64 - (t_max as f64 - 1.0) * i as f64 / (n as f64 - 1.0);
                v.round() as usize
            })
            .collect()
    };
    steps.dedup();
    Ok(SamplerPlan {
        t_max,
        steps,
        sigma_kind,
    })
}

/// Denoised estimate implied by a score at step `t`.
pub fn predict_x0(
    x_t: &Array2<f64>,
    t: usize,
    score: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Array2<f64> {
    let ab = sched.alpha_bar(t);
    let s = (1.0 - ab).sqrt();
    let root = ab.sqrt();
    // eps_hat = −s·score; x0 = (x_t − s·eps_hat)/sqrt(ab)
    Zip::from(x_t)
        .and(score)
        .map_collect(|x, sc| (x - s * (-s * sc)) / root)
}

/// One reverse step from `t` to `t_next` (`t_next == 0` returns the
/// denoised estimate with no noise).
pub fn ancestral_step(
    x_t: &Array2<f64>,
    t: usize,
    t_next: usize,
    score: &Array2<f64>,
    sched: &NoiseSchedule,
    z: &Array2<f64>,
    sigma_kind: SigmaKind,
) -> Result<Array2<f64>> {
    if !(t > t_next && t <= sched.t_max()) {
        return Err(Error::InvalidArgument(format!(
            "ancestral step needs T >= t > t_next >= 0, got {t} -> {t_next}"
        )));
    }
    if x_t.dim() != score.dim() || x_t.dim() != z.dim() {
        return Err(Error::Shape("x_t, score and z must share a shape".into()));
    }
    let x0 = predict_x0(x_t, t, score, sched);
    let out = if t_next == 0 {
        x0
    } else {
        let ab_t = sched.alpha_bar(t);
        let ab_n = sched.alpha_bar(t_next);
        let alpha = ab_t / ab_n;
        let beta = 1.0 - alpha;
        let c0 = ab_n.sqrt() * beta / (1.0 - ab_t);
        let ct = alpha.sqrt() * (1.0 - ab_n) / (1.0 - ab_t);
        let var = match sigma_kind {
            SigmaKind::Beta => beta,
            SigmaKind::BetaTilde => (1.0 - ab_n) / (1.0 - ab_t) * beta,
        };
        let sigma = var.sqrt();
        Zip::from(&x0)
            .and(x_t)
            .and(z)
            .map_collect(|a, b, e| c0 * a + ct * b + sigma * e)
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite sample at step {t}")));
    }
    Ok(out)
}

fn normal_matrix(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Runs the reverse chain from `x_T ~ N(0, I)` and returns the destandardized
/// residual. `cond` is the network-ready (normalized) conditioning.
pub fn sample_residual(
    f: &dyn ScoreFunction,
    cond: ArrayView2<f32>,
    plan: &SamplerPlan,
    sched: &NoiseSchedule,
    stats: &ResidualStats,
    seed: u64,
    mut trajectory: Option<&mut Vec<Array2<f64>>>,
) -> Result<Array2<f64>> {
    if plan.t_max != sched.t_max() {
        return Err(Error::Config(format!(
            "plan built for T={} but schedule has T={}",
            plan.t_max,
            sched.t_max()
        )));
    }
    let shape = cond.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = normal_matrix(&mut rng, shape);
    let zeros = Array2::zeros(shape);
    for (i, &t) in plan.steps.iter().enumerate() {
        let t_next = plan.steps.get(i + 1).copied().unwrap_or(0);
        let score = f.score(&x, t, cond)?;
        let z = if t_next == 0 {
            zeros.clone()
        } else {
            normal_matrix(&mut rng, shape)
        };
        x = ancestral_step(&x, t, t_next, &score, sched, &z, plan.sigma_kind)?;
        if let Some(tr) = trajectory.as_deref_mut() {
            tr.push(x.clone());
        }
    }
    Ok(x.mapv(|v| v * stats.std + stats.mean))
}

#[derive(Debug, Clone)]
pub struct RefinementResult {
    pub mel_ref: MelSpectrogram,
    /// `mel_ref − base`, computed in `f64` from the stored mels.
    pub residual_hat: Array2<f64>,
    /// Chain state after each step, standardized space.
    pub trajectory: Option<Vec<Array2<f64>>>,
    pub wall_time: f64,
}

/// Everything needed to refine a base mel with a score function.
pub struct RefineContext<'a> {
    pub score: &'a dyn ScoreFunction,
    pub schedule: &'a NoiseSchedule,
    pub stats: ResidualStats,
    pub cond_stats: CondStats,
}

pub fn finish_refinement(
    base: &MelSpectrogram,
    residual: &Array2<f64>,
    trajectory: Option<Vec<Array2<f64>>>,
    started: Instant,
) -> Result<RefinementResult> {
    let mel_ref = add_residual(base, residual)?;
    let wall_time = started.elapsed().as_secs_f64();
    let residual_hat = Zip::from(&mel_ref.values)
        .and(&base.values)
        .map_collect(|r, b| *r as f64 - *b as f64);
    Ok(RefinementResult {
        mel_ref,
        residual_hat,
        trajectory,
        wall_time,
    })
}

/// `mel_ref = base + sampled residual`. Timing covers the sampling loop and
/// the addition only.
pub fn refine(
    base: &MelSpectrogram,
    ctx: &RefineContext<'_>,
    plan: &SamplerPlan,
    seed: u64,
    keep_trajectory: bool,
) -> Result<RefinementResult> {
    let cond = ctx.cond_stats.normalize(&base.values);
    let mut traj = keep_trajectory.then(Vec::new);
    let started = Instant::now();
    let residual = sample_residual(
        ctx.score,
        cond.view(),
        plan,
        ctx.schedule,
        &ctx.stats,
        seed,
        traj.as_mut(),
    )?;
    finish_refinement(base, &residual, traj, started)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{q_sample, score_target, GaussianOracle, ZeroResidualOracle};
    use crate::melpipe::MelConfig;
    use rand::Rng;

    #[test]
    fn plans() {
        assert_eq!(
            plan_steps(1000, 4, SigmaKind::BetaTilde).unwrap().steps,
            vec![1000, 667, 334, 1]
        );
        let full = plan_steps(50, 50, SigmaKind::Beta).unwrap().steps;
        assert_eq!(full, (1..=50).rev().collect::<Vec<_>>());
        assert_eq!(
            plan_steps(1000, 1, SigmaKind::Beta).unwrap().steps,
            vec![1000]
        );
        assert!(plan_steps(10, 11, SigmaKind::Beta).is_err());
        assert!(plan_steps(10, 0, SigmaKind::Beta).is_err());
        // independent linspace-round oracle
        let n = 50;
        let p = plan_steps(1000, n, SigmaKind::Beta).unwrap().steps;
        for (i, s) in p.iter().enumerate() {
            let expect = (1000.0 - 999.0 * i as f64 / 49.0).round() as usize;
            assert_eq!(*s, expect);
        }
        assert!(p.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn final_step_with_zero_score() {
        let s = NoiseSchedule::default_linear();
        let x = Array2::from_elem((2, 3), 0.8);
        let zero = Array2::zeros((2, 3));
        let out = ancestral_step(&x, 7, 0, &zero, &s, &zero, SigmaKind::BetaTilde).unwrap();
        for v in out.iter() {
            assert!((v - 0.8 / s.alpha_bar(7).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn denoised_estimate_inverts_forward_process() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = normal_matrix(&mut rng, (4, 4));
        let eps = normal_matrix(&mut rng, (4, 4));
        for t in [1, 100, 700, 1000] {
            let xt = q_sample(&x0, t, &eps, &s).unwrap().x_t;
            let est = predict_x0(&xt, t, &score_target(&eps, t, &s).unwrap(), &s);
            for (a, b) in est.iter().zip(x0.iter()) {
                // sqrt(ab_T) ≈ 6e-3 amplifies rounding at t = T
                assert!((a - b).abs() < 1e-6, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn invalid_steps_rejected() {
        let s = NoiseSchedule::default_linear();
        let z = Array2::zeros((1, 1));
        assert!(ancestral_step(&z, 5, 5, &z, &s, &z, SigmaKind::Beta).is_err());
        assert!(ancestral_step(&z, 1001, 5, &z, &s, &z, SigmaKind::Beta).is_err());
    }

    fn chain_samples(n_steps: usize, kind: SigmaKind, chains: usize, seed: u64) -> Vec<f64> {
        let s = NoiseSchedule::default_linear();
        let oracle = GaussianOracle {
            mu: 0.3,
            var: 0.25,
            schedule: &s,
        };
        let plan = plan_steps(1000, n_steps, kind).unwrap();
        let cond = Array2::<f32>::zeros((chains, 1));
        sample_residual(
            &oracle,
            cond.view(),
            &plan,
            &s,
            &ResidualStats::IDENTITY,
            seed,
            None,
        )
        .unwrap()
        .into_raw_vec_and_offset()
        .0
    }

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        (
            mean,
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt(),
        )
    }

    /// For Gaussian data every step is affine in x, so the chain's output
    /// law can be propagated exactly: returns (mean, std).
    fn closed_form_chain(n_steps: usize, kind: SigmaKind) -> (f64, f64) {
        let s = NoiseSchedule::default_linear();
        let (mu, var) = (0.3, 0.25);
        let steps = plan_steps(1000, n_steps, kind).unwrap().steps;
        let (mut m, mut v) = (0.0, 1.0);
        for (i, &t) in steps.iter().enumerate() {
            let a = s.alpha_bar(t);
            let vt = a * var + 1.0 - a;
            let k = (1.0 - (1.0 - a) / vt) / a.sqrt();
            let c = (1.0 - a) * mu / vt;
            let (x0m, x0v) = (k * m + c, k * k * v);
            let Some(&tn) = steps.get(i + 1) else {
                return (x0m, x0v.sqrt());
            };
            let an = s.alpha_bar(tn);
            let beta = 1.0 - a / an;
            let c0 = an.sqrt() * beta / (1.0 - a);
            let ct = (a / an).sqrt() * (1.0 - an) / (1.0 - a);
            let s2 = match kind {
                SigmaKind::Beta => beta,
                SigmaKind::BetaTilde => (1.0 - an) / (1.0 - a) * beta,
            };
            let g = c0 * k + ct;
            m = g * m + c0 * c;
            v = g * g * v + s2;
        }
        unreachable!()
    }

    #[test]
    fn analytic_chain_recovers_data_moments() {
        let (mean, std) = moments(&chain_samples(50, SigmaKind::default(), 5000, 2));
        assert!((mean - 0.3).abs() <= 0.03, "mean {mean}");
        assert!((std - 0.5).abs() <= 0.05, "std {std}");
    }

    #[test]
    fn chain_matches_closed_form_law() {
        for kind in [SigmaKind::Beta, SigmaKind::BetaTilde] {
            for n in [4, 50] {
                let (cm, cs) = closed_form_chain(n, kind);
                let (m, s) = moments(&chain_samples(n, kind, 20_000, 4));
                assert!((m - cm).abs() < 0.02, "{kind:?} n={n}: mean {m} vs {cm}");
                assert!(
                    (s / cs - 1.0).abs() < 0.03,
                    "{kind:?} n={n}: std {s} vs {cs}"
                );
            }
        }
        // skipped-step posterior variance under-disperses; full variance does not
        assert!((closed_form_chain(50, SigmaKind::BetaTilde).1 - 0.443).abs() < 1e-3);
        assert!((closed_form_chain(50, SigmaKind::Beta).1 - 0.518).abs() < 1e-3);
        assert!((closed_form_chain(1000, SigmaKind::BetaTilde).1 - 0.5).abs() < 0.01);
    }

    /// W1 between an empirical sample and N(mu, sd²) via sorted quantiles.
    fn wasserstein_to_normal(xs: &mut [f64], mu: f64, sd: f64) -> f64 {
        use statrs::distribution::{ContinuousCDF, Normal};
        let q = Normal::new(mu, sd).unwrap();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, x)| (x - q.inverse_cdf((i as f64 + 0.5) / n)).abs())
            .sum::<f64>()
            / n
    }

    #[test]
    fn more_steps_do_not_increase_w1() {
        let (mut w4, mut w50) = (0.0, 0.0);
        for seed in 0..5 {
            let k = SigmaKind::default();
            w4 += wasserstein_to_normal(&mut chain_samples(4, k, 2000, seed), 0.3, 0.5);
            w50 += wasserstein_to_normal(&mut chain_samples(50, k, 2000, seed), 0.3, 0.5);
        }
        assert!(w50 <= w4, "W1 at 50 steps {w50} > at 4 steps {w4}");
    }

    fn random_base(seed: u64, frames: usize) -> MelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MelSpectrogram::new(
            Array2::from_shape_fn((frames, 64), |_| rng.gen_range(-10.0f32..2.0)),
            MelConfig::toy(),
        )
        .unwrap()
    }

    #[test]
    fn zero_residual_oracle_returns_base_exactly() {
        let s = NoiseSchedule::default_linear();
        let stats = ResidualStats {
            mean: 0.07,
            std: 0.4,
        };
        let oracle = ZeroResidualOracle {
            stats,
            schedule: &s,
        };
        let ctx = RefineContext {
            score: &oracle,
            schedule: &s,
            stats,
            cond_stats: CondStats {
                mean: -5.0,
                std: 3.0,
            },
        };
        for n in [1, 4, 50] {
            let plan = plan_steps(1000, n, SigmaKind::BetaTilde).unwrap();
            let base = random_base(n as u64, 37);
            let r = refine(&base, &ctx, &plan, 9, true).unwrap();
            assert_eq!(r.mel_ref, base);
            assert!(r.residual_hat.iter().all(|v| *v == 0.0));
            assert_eq!(r.trajectory.unwrap().len(), plan.len());
        }
    }

    #[test]
    fn refinement_is_seeded_and_additive() {
        let s = NoiseSchedule::default_linear();
        let oracle = GaussianOracle {
            mu: 0.0,
            var: 1.0,
            schedule: &s,
        };
        let ctx = RefineContext {
            score: &oracle,
            schedule: &s,
            stats: ResidualStats {
                mean: 0.1,
                std: 0.3,
            },
            cond_stats: CondStats {
                mean: 0.0,
                std: 1.0,
            },
        };
        let plan = plan_steps(1000, 4, SigmaKind::BetaTilde).unwrap();
        let base = random_base(3, 20);
        let a = refine(&base, &ctx, &plan, 5, false).unwrap();
        let b = refine(&base, &ctx, &plan, 5, false).unwrap();
        assert_eq!(a.mel_ref, b.mel_ref);
        assert_eq!(a.mel_ref.shape(), base.shape());
        assert!(a.trajectory.is_none());
        let c = refine(&base, &ctx, &plan, 6, false).unwrap();
        assert_ne!(a.mel_ref, c.mel_ref);
        for ((r, b), h) in a
            .mel_ref
            .values
            .iter()
            .zip(base.values.iter())
            .zip(a.residual_hat.iter())
        {
            assert_eq!(*r as f64 - *b as f64, *h);
        }
    }

    #[test]
    fn plan_schedule_mismatch() {
        let s = NoiseSchedule::new(100, 1e-4, 0.05).unwrap();
        let oracle = GaussianOracle {
            mu: 0.0,
            var: 1.0,
            schedule: &s,
        };
        let plan = plan_steps(1000, 4, SigmaKind::Beta).unwrap();
        let cond = Array2::<f32>::zeros((2, 2));
        assert!(matches!(
            sample_residual(
                &oracle,
                cond.view(),
                &plan,
                &s,
                &ResidualStats::IDENTITY,
                0,
                None
            ),
            Err(Error::Config(_))
        ));
    }
}
