use ndarray::{Array2, ArrayView2, Zip};

use super::schedule::{gaussian_analytic_score, q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::scorenet::ScoreNet;

/// Anything that estimates `∇ log q_t(x_t | c)` in standardized residual space.
pub trait ScoreFunction {
    fn score(&self, x_t: &Array2<f64>, t: usize, cond: ArrayView2<f32>) -> Result<Array2<f64>>;
}

/// The trained network. Its raw output is a noise estimate, rescaled here
/// to a score with the schedule it was trained under.
pub struct ScoreModel<'a> {
    pub net: &'a ScoreNet,
    pub schedule: &'a NoiseSchedule,
}

impl ScoreFunction for ScoreModel<'_> {
    fn score(&self, x_t: &Array2<f64>, t: usize, cond: ArrayView2<f32>) -> Result<Array2<f64>> {
        if t == 0 || t > self.schedule.t_max() {
            return Err(Error::InvalidArgument(format!("step {t} outside schedule")));
        }
        let x = x_t.mapv(|v| v as f32);
        let eps_hat = self.net.forward(x.view(), t, cond)?;
        let s = (1.0 - self.schedule.alpha_bar(t)).sqrt();
        Ok(eps_hat.mapv(|e| -(e as f64) / s))
    }
}

/// Closed-form score for i.i.d. `N(mu, var)` data.
#[derive(Debug, Clone)]
pub struct GaussianOracle<'a> {
    pub mu: f64,
    pub var: f64,
    pub schedule: &'a NoiseSchedule,
}

impl ScoreFunction for GaussianOracle<'_> {
    fn score(&self, x_t: &Array2<f64>, t: usize, _cond: ArrayView2<f32>) -> Result<Array2<f64>> {
        Ok(gaussian_analytic_score(
            x_t,
            t,
            self.mu,
            self.var,
            self.schedule,
        ))
    }
}

/// Oracle whose denoised estimate is always the standardized value of a
/// zero residual, i.e. `−mean/std`.
#[derive(Debug, Clone)]
pub struct ZeroResidualOracle<'a> {
    pub stats: crate::residual::ResidualStats,
    pub schedule: &'a NoiseSchedule,
}

impl ScoreFunction for ZeroResidualOracle<'_> {
    fn score(&self, x_t: &Array2<f64>, t: usize, _cond: ArrayView2<f32>) -> Result<Array2<f64>> {
        let mu = -self.stats.mean / self.stats.std;
        Ok(gaussian_analytic_score(x_t, t, mu, 0.0, self.schedule))
    }
}

/// Mean over entries of `(s + eps/sqrt(1 − ab_t))²`.
pub fn score_loss(
    score: &Array2<f64>,
    eps: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if score.dim() != eps.dim() {
        return Err(Error::Shape(format!(
            "score {:?} vs eps {:?}",
            score.dim(),
            eps.dim()
        )));
    }
    if score.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite score".into()));
    }
    let s = (1.0 - sched.alpha_bar(t)).sqrt();
    let n = score.len().max(1) as f64;
    Ok(Zip::from(score)
        .and(eps)
        .fold(0.0, |acc, sc, e| acc + (sc + e / s).powi(2))
        / n)
}

/// Training objective for one example: noise `x0` to step `t` with `eps`,
/// query the score function, compare against the conditional score.
pub fn loss(
    f: &dyn ScoreFunction,
    x0: &Array2<f64>,
    cond: ArrayView2<f32>,
    t: usize,
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if x0.dim() != cond.dim() {
        return Err(Error::Shape(format!(
            "x0 {:?} vs cond {:?}",
            x0.dim(),
            cond.dim()
        )));
    }
    let noised = q_sample(x0, t, eps, sched)?;
    let score = f.score(&noised.x_t, t, cond)?;
    score_loss(&score, eps, t, sched)
}

/// Two-parameter linear score `w·x_t + v·c`, small enough for exact
/// gradient checks of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineScore {
    pub w: f64,
    pub v: f64,
}

impl ScoreFunction for AffineScore {
    fn score(&self, x_t: &Array2<f64>, _t: usize, cond: ArrayView2<f32>) -> Result<Array2<f64>> {
        Ok(Zip::from(x_t)
            .and(cond)
            .map_collect(|x, c| self.w * x + self.v * *c as f64))
    }
}

impl AffineScore {
    /// Loss and its analytic gradient with respect to `(w, v)`.
    pub fn loss_and_grad(
        &self,
        x0: &Array2<f64>,
        cond: ArrayView2<f32>,
        t: usize,
        eps: &Array2<f64>,
        sched: &NoiseSchedule,
    ) -> Result<(f64, [f64; 2])> {
        let xt = q_sample(x0, t, eps, sched)?.x_t;
        let s = (1.0 - sched.alpha_bar(t)).sqrt();
        let n = x0.len() as f64;
        let (mut l, mut gw, mut gv) = (0.0, 0.0, 0.0);
        Zip::from(&xt).and(cond).and(eps).for_each(|x, c, e| {
            let c = *c as f64;
            let r = self.w * x + self.v * c + e / s;
            l += r * r;
            gw += 2.0 * r * x;
            gv += 2.0 * r * c;
        });
        Ok((l / n, [gw / n, gv / n]))
    }
}
