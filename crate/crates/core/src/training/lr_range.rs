use serde::{Deserialize, Serialize};

use super::trainer::StepRunner;
use super::{TrainConfig, TrainError};
use crate::dataset::Dataset;
use crate::models::ModelSpec;

/// Anything that can take one optimisation step at a given rate and report
/// the loss it saw before the update.
pub trait LrSubject {
    fn step(&mut self, eta: f64) -> Result<f64, TrainError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrRangeConfig {
    pub eta_start: f64,
    /// Rate reached after `max_steps` steps; fixes the growth factor.
    pub eta_end: f64,
    pub max_steps: usize,
    pub beta: f64,
    /// Stop once the smoothed loss exceeds this multiple of its minimum.
    pub divergence_factor: f64,
    /// The recommendation is the argmin rate divided by this.
    pub backoff: f64,
}

impl Default for LrRangeConfig {
    fn default() -> Self {
        Self {
            eta_start: 1e-8,
            eta_end: 10.0,
            max_steps: 1000,
            beta: 0.98,
            divergence_factor: 4.0,
            backoff: 10.0,
        }
    }
}

impl LrRangeConfig {
    pub fn growth(&self) -> f64 {
        (self.eta_end / self.eta_start).powf(1.0 / self.max_steps as f64)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.eta_start > 0.0 && self.eta_end.is_finite()) {
            return bad("eta_start must be positive and eta_end finite");
        }
        if self.max_steps == 0
            || self.growth().partial_cmp(&1.0) != Some(std::cmp::Ordering::Greater)
        {
            return bad("the rate must grow: eta_end > eta_start and max_steps > 0");
        }
        if !(0.0..1.0).contains(&self.beta)
            || !(self.divergence_factor > 1.0)
            || !(self.backoff > 0.0)
        {
            return bad("beta must lie in [0, 1), divergence_factor above 1, backoff positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrPoint {
    pub eta: f64,
    pub loss: f64,
    pub smoothed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrRangeResult {
    pub curve: Vec<LrPoint>,
    pub argmin_eta: f64,
    pub recommended: f64,
    /// The sweep used every step without meeting the stopping rule; the
    /// recommendation is then only a best estimate.
    pub never_diverged: bool,
}

/// Rate at the smallest smoothed loss and that rate divided by `backoff`.
pub fn recommend_from_curve(curve: &[LrPoint], backoff: f64) -> Option<(f64, f64)> {
    let best = curve
        .iter()
        .filter(|p| p.smoothed.is_finite())
        .min_by(|a, b| a.smoothed.total_cmp(&b.smoothed))?;
    Some((best.eta, best.eta / backoff))
}

/// Multiplies the rate by a constant factor every step, tracking a
/// bias-corrected exponential moving average of the loss, until the
/// average is non-finite or exceeds `divergence_factor` times its minimum.
pub fn lr_range_test(
    subject: &mut dyn LrSubject,
    config: &LrRangeConfig,
) -> Result<LrRangeResult, TrainError> {
    config.validate()?;
    let growth = config.growth();
    let mut curve = Vec::new();
    let mut avg = 0.0;
    let mut min = f64::INFINITY;
    let mut diverged = false;
    let mut eta = config.eta_start;
    for i in 0..config.max_steps {
        let loss = subject.step(eta)?;
        avg = config.beta * avg + (1.0 - config.beta) * loss;
        let smoothed = avg / (1.0 - config.beta.powi(i as i32 + 1));
        if !smoothed.is_finite() {
            diverged = true;
            break;
        }
        curve.push(LrPoint {
            eta,
            loss,
            smoothed,
        });
        if smoothed > config.divergence_factor * min {
            diverged = true;
            break;
        }
        min = min.min(smoothed);
        eta *= growth;
    }
    let (argmin_eta, recommended) =
        recommend_from_curve(&curve, config.backoff).ok_or_else(|| {
            TrainError::InvalidConfig("the loss was non-finite from the first step".into())
        })?;
    Ok(LrRangeResult {
        curve,
        argmin_eta,
        recommended,
        never_diverged: !diverged,
    })
}

/// `½ λ θ²` minimised by (optionally Nesterov) momentum descent.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticToy {
    pub curvature: f64,
    pub theta: f64,
    pub velocity: f64,
    pub momentum: f64,
}

impl QuadraticToy {
    pub fn new(curvature: f64, theta: f64, momentum: f64) -> Self {
        Self {
            curvature,
            theta,
            velocity: 0.0,
            momentum,
        }
    }

    pub fn loss(&self) -> f64 {
        0.5 * self.curvature * self.theta * self.theta
    }
}

impl LrSubject for QuadraticToy {
    fn step(&mut self, eta: f64) -> Result<f64, TrainError> {
        let loss = self.loss();
        let g = self.curvature * self.theta;
        let mut theta = [self.theta];
        let mut v = [self.velocity];
        super::sgd_nesterov_step(&mut theta, &[g], &mut v, eta, self.momentum);
        self.theta = theta[0];
        self.velocity = v[0];
        Ok(loss)
    }
}

/// Range test subject training a freshly initialised network on minibatches.
pub struct ModelLrSubject<'a> {
    runner: StepRunner<'a>,
}

impl<'a> ModelLrSubject<'a> {
    pub fn new(
        spec: &ModelSpec,
        data: &'a Dataset,
        config: &TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if data.is_empty() {
            return Err(TrainError::DataEmpty);
        }
        Ok(Self {
            runner: StepRunner::new(spec, data, config, config.seed),
        })
    }
}

impl LrSubject for ModelLrSubject<'_> {
    fn step(&mut self, eta: f64) -> Result<f64, TrainError> {
        Ok(self.runner.step(eta)?.aggregate)
    }
}
