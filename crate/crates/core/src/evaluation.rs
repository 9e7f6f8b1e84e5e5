//! Framewise precision, recall and F1, coefficient of determination, and
//! report rows.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BatchTargets, Dataset};
use crate::models::{
    AlphaInit, Architecture, BatchPredictions, Model, ModelError, ModelSpec, StitchMode, Task,
};
use crate::training::TaskWeights;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const EVAL_BATCH: usize = 128;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {pred} predictions vs {target} targets")]
    LengthMismatch { pred: usize, target: usize },
    #[error("R² needs at least two values, got {0}")]
    TooShort(usize),
    #[error("target has zero variance")]
    DegenerateTarget,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("evaluation set is empty")]
    Empty,
}

/// `1` where the value is strictly above `tau`.
pub fn binarize<T: Copy + Into<f64>>(values: &[T], tau: f64) -> Vec<bool> {
    values.iter().map(|&v| v.into() > tau).collect()
}

/// Cell counts summed over all frames and keys.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramewiseCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl FramewiseCounts {
    pub fn count(pred: &[bool], target: &[bool]) -> Result<Self, MetricError> {
        if pred.len() != target.len() {
            return Err(MetricError::LengthMismatch {
                pred: pred.len(),
                target: target.len(),
            });
        }
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(target) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }

    /// 0 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// 0 when there is nothing to find.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// 0 when precision and recall are both 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 from globally summed counts.
pub fn framewise_prf(pred: &[bool], target: &[bool]) -> Result<Prf, MetricError> {
    let c = FramewiseCounts::count(pred, target)?;
    Ok(Prf {
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
    })
}

/// `1 - Σ(y - ŷ)² / Σ(y - ȳ)²`, accumulated in f64.
pub fn r_squared<P, T>(pred: &[P], target: &[T]) -> Result<f64, MetricError>
where
    P: Copy + Into<f64>,
    T: Copy + Into<f64>,
{
    if pred.len() != target.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    if target.len() < 2 {
        return Err(MetricError::TooShort(target.len()));
    }
    let mean = target.iter().map(|&y| y.into()).sum::<f64>() / target.len() as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (&p, &y) in pred.iter().zip(target) {
        let y = y.into();
        ss_res += (y - p.into()).powi(2);
        ss_tot += (y - mean).powi(2);
    }
    if ss_tot == 0.0 {
        return Err(MetricError::DegenerateTarget);
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// One results row. Metrics are `None` where they are not reported: the
/// whole row for unstable runs, a regression task trained with zero
/// weight, or a regression target without variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub architecture: Architecture,
    pub stitch_mode: Option<StitchMode>,
    pub alpha_init: Option<AlphaInit>,
    pub weights: TaskWeights,
    pub learning_rate: Option<f64>,
    pub threshold: f64,
    pub unstable: bool,
    pub onset_f1: Option<f64>,
    pub intermediate_f1: Option<f64>,
    pub offset_f1: Option<f64>,
    pub velocity_r2: Option<f64>,
    pub sustain_r2: Option<f64>,
}

impl EvalReport {
    fn blank(spec: &ModelSpec, weights: TaskWeights, learning_rate: Option<f64>, tau: f64) -> Self {
        let (stitch_mode, alpha_init) = match spec.architecture {
            Architecture::HardSharing => (None, None),
            Architecture::CrossStitch => (Some(spec.stitch_mode), Some(spec.alpha_init)),
        };
        Self {
            architecture: spec.architecture,
            stitch_mode,
            alpha_init,
            weights,
            learning_rate,
            threshold: tau,
            unstable: false,
            onset_f1: None,
            intermediate_f1: None,
            offset_f1: None,
            velocity_r2: None,
            sustain_r2: None,
        }
    }

    /// Row for a weight combination that kept diverging.
    pub fn unstable(spec: &ModelSpec, weights: TaskWeights, learning_rate: Option<f64>) -> Self {
        Self {
            unstable: true,
            ..Self::blank(spec, weights, learning_rate, DEFAULT_THRESHOLD)
        }
    }

    pub fn metric(&self, task: Task) -> Option<f64> {
        match task {
            Task::Onset => self.onset_f1,
            Task::Intermediate => self.intermediate_f1,
            Task::Offset => self.offset_f1,
            Task::Velocity => self.velocity_r2,
            Task::Sustain => self.sustain_r2,
        }
    }
}

/// Evaluation-mode predictions for every frame of `data`, with the
/// matching targets, both in dataset order.
pub fn predict_dataset(
    model: &Model<f32>,
    data: &Dataset,
) -> Result<(BatchPredictions<f32>, BatchTargets), EvalError> {
    if data.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut all_pred = BatchPredictions {
        batch: 0,
        onset: Vec::new(),
        intermediate: Vec::new(),
        offset: Vec::new(),
        velocity: Vec::new(),
        sustain: Vec::new(),
    };
    let mut all_targets = BatchTargets::default();
    let mut inputs = Vec::new();
    let mut targets = BatchTargets::default();
    let frames: Vec<usize> = (0..data.len()).collect();
    for chunk in frames.chunks(EVAL_BATCH) {
        data.fill_batch(chunk, &mut inputs, &mut targets);
        let p = model.predict(chunk.len(), &inputs)?;
        all_pred.batch += p.batch;
        all_pred.onset.extend(p.onset);
        all_pred.intermediate.extend(p.intermediate);
        all_pred.offset.extend(p.offset);
        all_pred.velocity.extend(p.velocity);
        all_pred.sustain.extend(p.sustain);
        all_targets.batch += targets.batch;
        all_targets.onset.extend(&targets.onset);
        all_targets.intermediate.extend(&targets.intermediate);
        all_targets.offset.extend(&targets.offset);
        all_targets.velocity.extend(&targets.velocity);
        all_targets.sustain.extend(&targets.sustain);
    }
    Ok((all_pred, all_targets))
}

/// Scores predictions against targets. F1 for the three detection tasks
/// at threshold `tau`; R² over all velocity cells and all sustain frames.
pub fn score(
    pred: &BatchPredictions<f32>,
    targets: &BatchTargets,
    spec: &ModelSpec,
    weights: TaskWeights,
    learning_rate: Option<f64>,
    tau: f64,
) -> Result<EvalReport, MetricError> {
    let mut report = EvalReport::blank(spec, weights, learning_rate, tau);
    let f1 = |task: Task| -> Result<f64, MetricError> {
        Ok(FramewiseCounts::count(
            &binarize(pred.task(task), tau),
            &binarize(targets.task(task), tau),
        )?
        .f1())
    };
    report.onset_f1 = Some(f1(Task::Onset)?);
    report.intermediate_f1 = Some(f1(Task::Intermediate)?);
    report.offset_f1 = Some(f1(Task::Offset)?);
    let regression = |task: Task| -> Result<Option<f64>, MetricError> {
        if weights.get(task) == 0.0 {
            return Ok(None);
        }
        match r_squared(pred.task(task), targets.task(task)) {
            Ok(r) => Ok(Some(r)),
            Err(MetricError::DegenerateTarget) => Ok(None),
            Err(e) => Err(e),
        }
    };
    report.velocity_r2 = regression(Task::Velocity)?;
    report.sustain_r2 = regression(Task::Sustain)?;
    Ok(report)
}

/// Evaluation-mode pass over every frame of `data`.
pub fn evaluate(
    model: &Model<f32>,
    data: &Dataset,
    tau: f64,
    weights: TaskWeights,
    learning_rate: Option<f64>,
) -> Result<EvalReport, EvalError> {
    let (pred, targets) = predict_dataset(model, data)?;
    Ok(score(
        &pred,
        &targets,
        model.spec(),
        weights,
        learning_rate,
        tau,
    )?)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn fmt_weight(v: f64) -> String {
    format!("{v}")
}

/// Aligned text table, one line per report.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = [
        "#", "Type", "Init", "η", "λon", "λint", "λoff", "λvel", "λsus", "On F1", "Int F1",
        "Off F1", "Vel R²", "Sus R²",
    ];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let kind = match (r.architecture, r.stitch_mode) {
                (Architecture::HardSharing, _) => "HS",
                (Architecture::CrossStitch, Some(StitchMode::Detached)) => "Det",
                (Architecture::CrossStitch, _) => "Full",
            };
            let init = match r.alpha_init {
                Some(AlphaInit::Balanced) => "Bal",
                Some(AlphaInit::Imbalanced) => "Imb",
                None => "-",
            };
            let w = r.weights;
            let mut row = vec![
                (i + 1).to_string(),
                kind.to_string(),
                init.to_string(),
                r.learning_rate
                    .map_or_else(|| "-".into(), |v| format!("{v}")),
                fmt_weight(w.onset),
                fmt_weight(w.intermediate),
                fmt_weight(w.offset),
                fmt_weight(w.velocity),
                fmt_weight(w.sustain),
            ];
            for task in Task::ALL {
                row.push(if r.unstable {
                    "-".into()
                } else {
                    fmt_metric(r.metric(task))
                });
            }
            row
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<String>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join(" | ").trim_end());
    };
    line(header.iter().map(|h| h.to_string()).collect(), &mut out);
    let _ = writeln!(
        out,
        "{}",
        widths
            .iter()
            .map(|&w| "-".repeat(w))
            .collect::<Vec<_>>()
            .join("-+-")
    );
    for row in rows {
        line(row, &mut out);
    }
    out
}
