//! Minibatch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ScanMode;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::head::{LossConfig, LossReport};
use crate::model::{KeypointDetector, Model};
use crate::params::{Grads, Optimizer, OptimizerKind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Linear warmup, then cosine decay to a tenth of the base rate.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    /// Global gradient norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Validation interval in steps; 0 validates only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: Schedule::Cosine,
            warmup_steps: 100,
            grad_clip: 1.0,
            eval_every: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be a non-negative number".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("weight_decay and grad_clip must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate at `step` (zero-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
                self.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
    pub rle: f64,
    pub class: f64,
    pub iou: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValLog {
    pub step: usize,
    pub metrics: MetricsReport,
}

pub enum Event<'a> {
    Step(&'a StepLog),
    Validation(&'a ValLog),
}

pub struct TrainOutcome {
    pub last: ParamStore,
    /// Weights with the lowest validation error seen, or the final weights
    /// when there is no validation set.
    pub best: ParamStore,
    pub best_step: usize,
    pub steps: Vec<StepLog>,
    pub validations: Vec<ValLog>,
}

/// Mean loss and gradient over a batch, accumulated in index order.
pub fn batch_gradient(
    model: &Model,
    ps: &ParamStore,
    batch: &[&Example],
    loss: &LossConfig,
    mode: ScanMode,
) -> Result<(LossReport, Grads)> {
    let mut grads = Grads::zeros_like(ps);
    let mut report = LossReport::default();
    let s = 1.0 / batch.len() as f64;
    for ex in batch {
        let (r, _) = model.loss_and_grad(ps, &ex.image, &ex.keypoints, loss, mode, None, &mut grads)?;
        report.add_scaled(&r, s);
    }
    grads.scale(s);
    Ok((report, grads))
}

fn validate_on(model: &Model, ps: &ParamStore, val: &[Example]) -> Result<MetricsReport> {
    let det = KeypointDetector::from_parts(model.clone(), ps.clone());
    Ok(evaluate(&det, val, &[0.05, 0.1])?.0.without_timing())
}

/// Train with shuffled epochs drawn from `seed`. The backbone runs in
/// parallel-scan mode.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &Model,
    mut ps: ParamStore,
    train_set: &[Example],
    val_set: &[Example],
    loss: &LossConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_event: impl FnMut(Event<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.momentum, cfg.weight_decay, &ps);
    let mut order: Vec<usize> = Vec::new();
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut validations = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let run_validation = |step: usize, ps: &ParamStore, best: &mut Option<(f64, usize, ParamStore)>| -> Result<ValLog> {
        let metrics = validate_on(model, ps, val_set)?;
        let err = metrics.epe.unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|b| err < b.0) {
            *best = Some((err, step, ps.clone()));
        }
        Ok(ValLog { step, metrics })
    };
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(train_set.len()) {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().expect("refilled"));
        }
        idx.sort_unstable();
        let batch: Vec<&Example> = idx.iter().map(|&i| &train_set[i]).collect();
        let (report, mut grads) = batch_gradient(model, &ps, &batch, loss, ScanMode::Parallel)?;
        if !report.total.is_finite() {
            return Err(Error::Evaluation(format!("loss diverged at step {step}")));
        }
        let grad_norm = grads.global_norm();
        if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
            grads.scale(cfg.grad_clip / grad_norm);
        }
        let lr = cfg.lr_at(step);
        opt.set_lr(lr);
        opt.step(&mut ps, &grads);
        let log = StepLog {
            step: step + 1,
            loss: report.total,
            mse: report.mse_term,
            rle: report.rle_term,
            class: report.class_term,
            iou: report.iou_term,
            lr,
            grad_norm,
        };
        on_event(Event::Step(&log))?;
        steps.push(log);
        let done = step + 1 == cfg.steps;
        if !val_set.is_empty() && (done || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0)) {
            let v = run_validation(step + 1, &ps, &mut best)?;
            on_event(Event::Validation(&v))?;
            validations.push(v);
        }
    }
    let (best_step, best) = match best {
        Some((_, s, p)) => (s, p),
        None => (cfg.steps, ps.clone()),
    };
    Ok(TrainOutcome {
        last: ps,
        best,
        best_step,
        steps,
        validations,
    })
}
