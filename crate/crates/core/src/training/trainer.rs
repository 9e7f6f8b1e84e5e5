use std::io::Write;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{
    aggregate_var, task_loss_vars, MomentumSgd, TaskWeights, TrainConfig, TrainError, VelocityLoss,
};
use crate::autodiff::{derive_seed, Graph, RunRng, Tensor};
use crate::dataset::{BatchOrder, BatchTargets, Dataset};
use crate::evaluation::{evaluate, EvalReport, DEFAULT_THRESHOLD};
use crate::features::{CONTEXT_FRAMES, N_BINS};
use crate::models::{Model, ModelError, ModelSpec, NUM_TASKS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStatus {
    Converged,
    Unstable,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLossRecord {
    pub on: f64,
    pub int: f64,
    pub off: f64,
    pub vel: f64,
    pub sus: f64,
}

impl From<[f64; NUM_TASKS]> for TaskLossRecord {
    fn from(l: [f64; NUM_TASKS]) -> Self {
        Self {
            on: l[0],
            int: l[1],
            off: l[2],
            vel: l[3],
            sus: l[4],
        }
    }
}

/// One line of the JSON-lines run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Step {
        attempt: u32,
        step: usize,
        eta: f64,
        losses: TaskLossRecord,
        aggregate: f64,
    },
    Restart {
        /// The attempt that starts now.
        attempt: u32,
        /// Step at which the previous attempt diverged.
        diverged_at: usize,
        seed: u64,
    },
    Validation {
        attempt: u32,
        step: usize,
        report: EvalReport,
    },
    Status {
        status: TrainStatus,
        attempts: u32,
        steps: usize,
    },
    Report {
        report: EvalReport,
    },
}

impl LogEvent {
    pub fn write_line(&self, mut out: impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n")
    }
}

/// Seed of attempt `attempt`; the first attempt uses the configured seed.
pub fn attempt_seed(seed: u64, attempt: u32) -> u64 {
    if attempt == 0 {
        seed
    } else {
        derive_seed(seed, u64::from(attempt))
    }
}

pub struct TrainOutcome {
    pub status: TrainStatus,
    /// Parameters at the end of the last attempt.
    pub model: Model<f32>,
    pub attempts: u32,
    pub seed: u64,
    /// Aggregate loss of every completed step of the last attempt.
    pub history: Vec<f64>,
}

pub(crate) struct StepLosses {
    pub per_task: [f64; NUM_TASKS],
    pub aggregate: f64,
}

/// Minibatch SGD state for one attempt. The model is initialised from
/// `seed`; batch order and noise draws use streams derived from it.
pub(crate) struct StepRunner<'a> {
    pub model: Model<f32>,
    opt: MomentumSgd<f32>,
    data: &'a Dataset,
    order: BatchOrder,
    noise: RunRng,
    weights: TaskWeights,
    velocity_loss: VelocityLoss,
    batch_size: usize,
    inputs: Vec<f32>,
    targets: BatchTargets,
}

impl<'a> StepRunner<'a> {
    pub fn new(spec: &ModelSpec, data: &'a Dataset, config: &TrainConfig, seed: u64) -> Self {
        let model = Model::build(ModelSpec {
            seed,
            ..spec.clone()
        });
        let opt = MomentumSgd::new(model.params(), config.momentum, config.nesterov);
        Self {
            model,
            opt,
            data,
            order: BatchOrder::new(data.len(), derive_seed(seed, 1)),
            noise: RunRng::seed_from_u64(derive_seed(seed, 2)),
            weights: config.weights,
            velocity_loss: config.velocity_loss,
            batch_size: config.batch_size,
            inputs: Vec::new(),
            targets: BatchTargets::default(),
        }
    }

    /// Losses of the next minibatch at the current parameters, followed by
    /// an update with rate `eta`. A non-finite loss or activation leaves the
    /// parameters untouched and reports a NaN aggregate.
    pub fn step(&mut self, eta: f64) -> Result<StepLosses, TrainError> {
        let frames = self.order.next_batch(self.batch_size);
        self.data
            .fill_batch(&frames, &mut self.inputs, &mut self.targets);
        let mut g = Graph::new();
        let input = g.constant(Tensor::new(
            vec![1, frames.len(), CONTEXT_FRAMES, N_BINS],
            std::mem::take(&mut self.inputs),
        )?);
        let pass = match self.model.forward(&mut g, input, Some(&mut self.noise)) {
            Ok(p) => p,
            Err(ModelError::NonFiniteActivation(_)) => {
                return Ok(StepLosses {
                    per_task: [f64::NAN; NUM_TASKS],
                    aggregate: f64::NAN,
                })
            }
            Err(e) => return Err(e.into()),
        };
        let losses = task_loss_vars(&mut g, &pass.outputs, &self.targets, self.velocity_loss)?;
        let total = aggregate_var(&mut g, &losses, &self.weights)?;
        let per_task = losses.map(|v| f64::from(g.value(v).item()));
        let aggregate = f64::from(g.value(total).item());
        if aggregate.is_finite() {
            let grads = g.backward(total)?;
            let grads = pass.params.gradients(&g, &grads);
            self.opt.step(self.model.params_mut(), &grads, eta);
        }
        Ok(StepLosses {
            per_task,
            aggregate,
        })
    }
}

/// Trains from scratch; see [`train_with_faults`].
pub fn train(
    config: &TrainConfig,
    spec: &ModelSpec,
    data: &Dataset,
    validation: Option<&Dataset>,
    log: &mut dyn Write,
) -> Result<TrainOutcome, TrainError> {
    train_with_faults(config, spec, data, validation, log, &|_, _| false)
}

/// Runs `config.steps` updates. A non-finite loss abandons the attempt and
/// starts over from a fresh seed; after `restart_limit` restarts the next
/// divergence ends the run as [`TrainStatus::Unstable`]. `fault(attempt,
/// step)` returning true makes that step's loss NaN.
pub fn train_with_faults(
    config: &TrainConfig,
    spec: &ModelSpec,
    data: &Dataset,
    validation: Option<&Dataset>,
    log: &mut dyn Write,
    fault: &dyn Fn(u32, usize) -> bool,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::DataEmpty);
    }
    let mut attempt = 0u32;
    loop {
        let seed = attempt_seed(config.seed, attempt);
        let mut runner = StepRunner::new(spec, data, config, seed);
        let mut history = Vec::with_capacity(config.steps);
        let mut diverged_at = None;
        for step in 0..config.steps {
            let losses = if fault(attempt, step) {
                None
            } else {
                Some(runner.step(config.learning_rate)?)
            };
            let losses = match losses {
                Some(l) if l.aggregate.is_finite() => l,
                _ => {
                    diverged_at = Some(step);
                    break;
                }
            };
            history.push(losses.aggregate);
            if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps) {
                LogEvent::Step {
                    attempt,
                    step,
                    eta: config.learning_rate,
                    losses: losses.per_task.into(),
                    aggregate: losses.aggregate,
                }
                .write_line(&mut *log)?;
            }
            if let Some(val) = validation {
                if config.validate_every > 0 && (step + 1) % config.validate_every == 0 {
                    let report = evaluate(
                        &runner.model,
                        val,
                        DEFAULT_THRESHOLD,
                        config.weights,
                        Some(config.learning_rate),
                    )?;
                    LogEvent::Validation {
                        attempt,
                        step,
                        report,
                    }
                    .write_line(&mut *log)?;
                }
            }
        }
        let status = match diverged_at {
            None => TrainStatus::Converged,
            Some(_) if attempt >= config.restart_limit => TrainStatus::Unstable,
            Some(step) => {
                attempt += 1;
                LogEvent::Restart {
                    attempt,
                    diverged_at: step,
                    seed: attempt_seed(config.seed, attempt),
                }
                .write_line(&mut *log)?;
                continue;
            }
        };
        LogEvent::Status {
            status,
            attempts: attempt + 1,
            steps: history.len(),
        }
        .write_line(&mut *log)?;
        log.flush()?;
        return Ok(TrainOutcome {
            status,
            model: runner.model,
            attempts: attempt + 1,
            seed,
            history,
        });
    }
}
