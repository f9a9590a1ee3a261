use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Parameters that fully determine a [`NoiseSchedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            t_max: DEFAULT_T,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

/// Linear variance schedule. Steps are 1-based: `beta(1) .. beta(T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::from_spec(ScheduleSpec {
            t_max,
            beta_start,
            beta_end,
        })
    }

    pub fn from_spec(spec: ScheduleSpec) -> Result<Self> {
        let ScheduleSpec {
            t_max,
            beta_start,
            beta_end,
        } = spec;
        if t_max == 0 {
            return Err(Error::Config("schedule needs T >= 1".into()));
        }
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        let ordered = if t_max == 1 {
            beta_start <= beta_end
        } else {
            beta_start < beta_end
        };
        if !(in_unit(beta_start) && in_unit(beta_end) && ordered) {
            return Err(Error::Config(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta: Vec<f64> = if t_max == 1 {
            vec![beta_start]
        } else {
            (0..t_max)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
                .collect()
        };
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule {
            spec,
            beta,
            alpha_bar,
        })
    }

    pub fn default_linear() -> Self {
        Self::from_spec(ScheduleSpec::default()).expect("default schedule is valid")
    }

    pub fn t_max(&self) -> usize {
        self.spec.t_max
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.t_max() {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside 1..={}",
                self.t_max()
            )));
        }
        Ok(t - 1)
    }

    /// Panics outside `1..=T`; use after validating `t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    /// Cumulative signal retention; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Forward-process draw together with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    pub x_t: Array2<f64>,
    pub t: usize,
    pub eps: Array2<f64>,
}

/// `x_t = sqrt(ab_t)·x0 + sqrt(1 − ab_t)·eps`
pub fn q_sample(
    x0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<NoisedSample> {
    sched.check(t)?;
    if x0.dim() != eps.dim() {
        return Err(Error::Shape(format!(
            "x0 {:?} vs eps {:?}",
            x0.dim(),
            eps.dim()
        )));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x_t = Zip::from(x0).and(eps).map_collect(|x, e| a * x + b * e);
    Ok(NoisedSample {
        x_t,
        t,
        eps: eps.clone(),
    })
}

/// Score of `q(x_t | x_0)` expressed through the noise: `−eps / sqrt(1 − ab_t)`.
pub fn score_target(eps: &Array2<f64>, t: usize, sched: &NoiseSchedule) -> Result<Array2<f64>> {
    sched.check(t)?;
    let var = 1.0 - sched.alpha_bar(t);
    if var <= 0.0 {
        return Err(Error::Numerical(format!("alpha_bar({t}) == 1")));
    }
    let s = var.sqrt();
    Ok(eps.mapv(|e| -e / s))
}

/// Exact marginal score when data are i.i.d. `N(mu, var)`.
pub fn gaussian_analytic_score(
    x_t: &Array2<f64>,
    t: usize,
    mu: f64,
    var: f64,
    sched: &NoiseSchedule,
) -> Array2<f64> {
    let ab = sched.alpha_bar(t);
    let m = ab.sqrt() * mu;
    let v = ab * var + 1.0 - ab;
    x_t.mapv(|x| -(x - m) / v)
}
