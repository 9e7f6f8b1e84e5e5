//! Task losses, the weighted multitask objective, Nesterov SGD, the
//! learning-rate range test and the training loop with restarts.

mod lr_range;
mod trainer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Element, Graph, ParamStore, Tensor, Var};
use crate::dataset::BatchTargets;
use crate::evaluation::EvalError;
use crate::models::{BatchPredictions, ModelError, Task, NUM_TASKS};

pub use lr_range::{
    lr_range_test, recommend_from_curve, LrPoint, LrRangeConfig, LrRangeResult, LrSubject,
    ModelLrSubject, QuadraticToy,
};
pub use trainer::{
    attempt_seed, train, train_with_faults, LogEvent, TaskLossRecord, TrainOutcome, TrainStatus,
};

/// Clamp applied to probabilities inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    DataEmpty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("writing log: {0}")]
    Log(#[from] std::io::Error),
}

/// Per-task loss weights λ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub onset: f64,
    pub intermediate: f64,
    pub offset: f64,
    pub velocity: f64,
    pub sustain: f64,
}

impl TaskWeights {
    pub fn new(
        onset: f64,
        intermediate: f64,
        offset: f64,
        velocity: f64,
        sustain: f64,
    ) -> Result<Self, TrainError> {
        let w = Self {
            onset,
            intermediate,
            offset,
            velocity,
            sustain,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn uniform(value: f64) -> Self {
        Self::from_array([value; NUM_TASKS])
    }

    pub fn from_array(a: [f64; NUM_TASKS]) -> Self {
        Self {
            onset: a[0],
            intermediate: a[1],
            offset: a[2],
            velocity: a[3],
            sustain: a[4],
        }
    }

    pub fn as_array(&self) -> [f64; NUM_TASKS] {
        [
            self.onset,
            self.intermediate,
            self.offset,
            self.velocity,
            self.sustain,
        ]
    }

    pub fn get(&self, task: Task) -> f64 {
        self.as_array()[task.index()]
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let a = self.as_array();
        if a.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(TrainError::InvalidConfig(
                "task weights must be finite and non-negative".into(),
            ));
        }
        if a.iter().all(|&w| w == 0.0) {
            return Err(TrainError::InvalidConfig(
                "at least one task weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

/// Which cells the velocity loss covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VelocityLoss {
    /// Every key of every frame; the target is zero away from onsets.
    #[default]
    Dense,
    /// Only cells where the onset target is active.
    OnsetMasked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Restarts allowed after a divergence before the run is unstable.
    pub restart_limit: u32,
    pub weights: TaskWeights,
    pub velocity_loss: VelocityLoss,
    /// Write a step record every this many steps (0: never).
    pub log_every: usize,
    /// Evaluate on the validation set every this many steps (0: never).
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            nesterov: true,
            batch_size: 64,
            steps: 20_000,
            seed: 0,
            restart_limit: 3,
            weights: TaskWeights::default(),
            velocity_loss: VelocityLoss::Dense,
            log_every: 1,
            validate_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig(
                "momentum must lie in [0, 1)".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size must be at least 1".into(),
            ));
        }
        self.weights.validate()
    }
}

fn to_elements<T: Element>(values: &[f32]) -> Vec<T> {
    values
        .iter()
        .map(|&v| T::from_f64_lossy(f64::from(v)))
        .collect()
}

/// Records the five task losses for the prediction nodes `outputs`.
pub fn task_loss_vars<T: Element>(
    g: &mut Graph<T>,
    outputs: &[Var; NUM_TASKS],
    targets: &BatchTargets,
    velocity_loss: VelocityLoss,
) -> Result<[Var; NUM_TASKS], AutodiffError> {
    let eps = T::from_f64_lossy(BCE_EPS);
    let mut out = *outputs;
    for task in Task::ALL {
        let i = task.index();
        let y = to_elements(targets.task(task));
        out[i] = match task {
            Task::Onset | Task::Intermediate | Task::Offset => {
                g.binary_cross_entropy(outputs[i], y, eps)?
            }
            Task::Velocity => {
                let mask = match velocity_loss {
                    VelocityLoss::Dense => None,
                    VelocityLoss::OnsetMasked => Some(to_elements(&targets.onset)),
                };
                g.squared_error(outputs[i], y, mask)?
            }
            Task::Sustain => g.squared_error(outputs[i], y, None)?,
        };
    }
    Ok(out)
}

/// `Σ λ_m L_m` on the graph. Tasks with zero weight are left out, so no
/// gradient reaches anything that serves only them.
pub fn aggregate_var<T: Element>(
    g: &mut Graph<T>,
    losses: &[Var; NUM_TASKS],
    weights: &TaskWeights,
) -> Result<Var, AutodiffError> {
    let mut total: Option<Var> = None;
    for task in Task::ALL {
        let w = weights.get(task);
        if w == 0.0 {
            continue;
        }
        let term = g.scale(losses[task.index()], T::from_f64_lossy(w));
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    total.ok_or_else(|| AutodiffError::ShapeMismatch("all task weights are zero".into()))
}

/// Values of the five task losses for given predictions.
pub fn task_losses(
    pred: &BatchPredictions<f64>,
    targets: &BatchTargets,
    velocity_loss: VelocityLoss,
) -> Result<[f64; NUM_TASKS], AutodiffError> {
    let mut g = Graph::<f64>::new();
    let mut outputs = Vec::with_capacity(NUM_TASKS);
    for task in Task::ALL {
        let p = pred.task(task).to_vec();
        outputs.push(g.constant(Tensor::new(vec![pred.batch, task.units()], p)?));
    }
    let outputs: [Var; NUM_TASKS] = outputs.try_into().expect("one output per task");
    let vars = task_loss_vars(&mut g, &outputs, targets, velocity_loss)?;
    Ok(vars.map(|v| g.value(v).item()))
}

/// `Σ λ_m L_m`.
pub fn aggregate_loss(losses: &[f64; NUM_TASKS], weights: &TaskWeights) -> f64 {
    losses
        .iter()
        .zip(weights.as_array())
        .map(|(l, w)| w * l)
        .sum()
}

/// One Nesterov update in place: `v ← μv − ηg`, `θ ← θ + μv − ηg`.
pub fn sgd_nesterov_step<T: Element>(
    theta: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    eta: T,
    mu: T,
) {
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v - eta * g;
        *t = *t + mu * *v - eta * g;
    }
}

/// Classical momentum: `v ← μv − ηg`, `θ ← θ + v`.
pub fn sgd_momentum_step<T: Element>(
    theta: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    eta: T,
    mu: T,
) {
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v - eta * g;
        *t = *t + *v;
    }
}

/// Momentum buffers for every parameter of a store.
#[derive(Clone, Debug)]
pub struct MomentumSgd<T> {
    momentum: f64,
    nesterov: bool,
    velocity: ParamStore<T>,
}

impl<T: Element> MomentumSgd<T> {
    pub fn new(params: &ParamStore<T>, momentum: f64, nesterov: bool) -> Self {
        let mut velocity = ParamStore::new();
        for (name, t) in params.iter() {
            velocity.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        Self {
            momentum,
            nesterov,
            velocity,
        }
    }

    /// Panics if `grads` does not cover every parameter.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, eta: f64) {
        let eta = T::from_f64_lossy(eta);
        let mu = T::from_f64_lossy(self.momentum);
        for ((name, theta), (_, v)) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let g = grads
                .get(name)
                .unwrap_or_else(|| panic!("no gradient for {name}"));
            if self.nesterov {
                sgd_nesterov_step(theta.data_mut(), g.data(), v.data_mut(), eta, mu);
            } else {
                sgd_momentum_step(theta.data_mut(), g.data(), v.data_mut(), eta, mu);
            }
        }
    }
}
