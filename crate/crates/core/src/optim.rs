//! First-order optimizers (SGD, Adam, Adagrad), annealing schedules, and
//! validation-loss early stopping.

use std::collections::BTreeMap;
use std::fmt;

use crate::graph::ParamStore;
use crate::tensor::Tensor;

/// Error raised by the optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimError {
    /// A gradient contained NaN or infinity.
    NonFiniteGradient { param: String },
    /// A gradient was supplied for an unknown parameter.
    UnknownParam { param: String },
    /// Gradient and parameter shapes disagree.
    ShapeMismatch { param: String },
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient for parameter '{}'", param)
            }
            OptimError::UnknownParam { param } => write!(f, "no such parameter '{}'", param),
            OptimError::ShapeMismatch { param } => {
                write!(f, "gradient shape mismatch for parameter '{}'", param)
            }
        }
    }
}

impl std::error::Error for OptimError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adagrad,
}

/// Optimizer with per-parameter accumulators, keyed by parameter name.
///
/// Adam uses beta1 = 0.9, beta2 = 0.999, eps = 1e-8 with bias correction.
/// Adagrad starts its squared-gradient accumulator at 0.1.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step_count: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADAGRAD_INITIAL_ACCUMULATOR: f64 = 0.1;
pub const ADAGRAD_EPS: f64 = 1e-10;

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    /// Applies one deterministic update. Parameters without a gradient entry
    /// are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), OptimError> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGradient { param: name.clone() });
            }
            let p = params
                .get(name)
                .ok_or_else(|| OptimError::UnknownParam { param: name.clone() })?;
            if p.shape() != g.shape() {
                return Err(OptimError::ShapeMismatch { param: name.clone() });
            }
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (name, g) in grads {
                    let p = params.get_mut(name).expect("validated above");
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for (name, g) in grads {
                    let p = params.get_mut(name).expect("validated above");
                    let m = self
                        .first_moment
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; g.numel()]);
                    let v = self
                        .second_moment
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; g.numel()]);
                    for ((pv, gv), (mv, vv)) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
            OptimizerKind::Adagrad => {
                for (name, g) in grads {
                    let p = params.get_mut(name).expect("validated above");
                    let acc = self
                        .second_moment
                        .entry(name.clone())
                        .or_insert_with(|| vec![ADAGRAD_INITIAL_ACCUMULATOR; g.numel()]);
                    for ((pv, gv), av) in p.data_mut().iter_mut().zip(g.data()).zip(acc.iter_mut()) {
                        *av += gv * gv;
                        *pv -= lr * gv / (av.sqrt() + ADAGRAD_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// What a schedule anneals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleTarget {
    GumbelTemperature,
    AblationTemperature,
    SmoothStepGamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleSpacing {
    /// Values evenly spaced on a logarithmic scale.
    LogEven,
    Linear,
}

/// Annealing schedule from `start` to `end` over `steps` points, clamped at
/// `end` beyond the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub target: ScheduleTarget,
    pub start: f64,
    pub end: f64,
    pub steps: usize,
    pub spacing: ScheduleSpacing,
}

impl Schedule {
    pub fn new(
        target: ScheduleTarget,
        start: f64,
        end: f64,
        steps: usize,
        spacing: ScheduleSpacing,
    ) -> Result<Self, String> {
        if steps < 1 {
            return Err("schedule needs at least one step".into());
        }
        if start <= 0.0 || end <= 0.0 {
            return Err(format!("schedule endpoints must be positive, got {} -> {}", start, end));
        }
        Ok(Schedule { target, start, end, steps, spacing })
    }
}

/// Value of the schedule at a step index.
pub fn schedule_value(schedule: &Schedule, step_index: usize) -> f64 {
    if schedule.steps == 1 || step_index + 1 >= schedule.steps {
        return schedule.end;
    }
    let t = step_index as f64 / (schedule.steps - 1) as f64;
    match schedule.spacing {
        ScheduleSpacing::LogEven => {
            (schedule.start.ln() + t * (schedule.end.ln() - schedule.start.ln())).exp()
        }
        ScheduleSpacing::Linear => schedule.start + t * (schedule.end - schedule.start),
    }
}

/// Validation-loss early stopping: stop after `patience` evaluations without
/// an improvement of more than `min_delta`.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopper { patience, min_delta, best: f64::INFINITY, stale: 0 }
    }

    /// Records one validation loss; returns true when training should stop.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}
