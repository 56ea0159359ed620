use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSet, Role};
use crate::error::{Error, Result};
use crate::model::ParamModel;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    OneCycle,
    Constant,
}

/// Optimization budget and learning-rate schedule of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_max: f64,
    pub schedule_kind: ScheduleKind,
    pub seed: u64,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr_initial >= 0.0 && self.lr_initial <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::config(format!(
                "learning rates must satisfy 0 <= lr_initial ({}) <= lr_max ({})",
                self.lr_initial, self.lr_max
            )));
        }
        Ok(())
    }

    /// Learning rate at training progress `t` in `[0, 1]`. One-cycle warms
    /// up linearly to `lr_max` at `t = 0.5`, then decays linearly to
    /// `lr_initial / 10` at `t = 1`.
    pub fn lr_at(&self, t: f64) -> f64 {
        match self.schedule_kind {
            ScheduleKind::Constant => self.lr_initial,
            ScheduleKind::OneCycle => {
                let t = t.clamp(0.0, 1.0);
                if t <= 0.5 {
                    self.lr_initial + (self.lr_max - self.lr_initial) * (t / 0.5)
                } else {
                    let end = self.lr_initial / 10.0;
                    self.lr_max + (end - self.lr_max) * ((t - 0.5) / 0.5)
                }
            }
        }
    }

    /// Rate for step `step` of `steps` within `epoch`.
    pub fn lr_for(&self, epoch: usize, step: usize, steps: usize) -> f64 {
        let t = (epoch as f64 + step as f64 / steps.max(1) as f64) / self.epochs as f64;
        self.lr_at(t)
    }
}

/// Shuffled mini-batches of record indices for one epoch.
pub(crate) fn epoch_batches(n: usize, plan: &TrainPlan, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(plan.seed, "shuffle", epoch as u64));
    order.chunks(plan.batch_size).map(<[usize]>::to_vec).collect()
}

pub(crate) fn check_training_set(data: &LabeledSet, plan: &TrainPlan) -> Result<()> {
    plan.validate()?;
    if data.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    if data.role() != Role::Train {
        return Err(Error::input(format!(
            "expected a training set, got role {:?}",
            data.role()
        )));
    }
    Ok(())
}

/// One epoch of mini-batch SGD on the mean cross-entropy. Returns the mean
/// batch loss.
pub fn train_epoch(model: &mut ParamModel, data: &LabeledSet, plan: &TrainPlan, epoch: usize) -> Result<f64> {
    check_training_set(data, plan)?;
    let batches = epoch_batches(data.len(), plan, epoch);
    let steps = batches.len();
    let mut total = 0.0;
    for (step, batch) in batches.iter().enumerate() {
        let inputs: Vec<&[f64]> = batch.iter().map(|&i| data.records()[i].input.as_slice()).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| data.records()[i].label).collect();
        let (grad, loss) = model.batch_grad(&inputs, &labels).map_err(|e| offset_index(e, batch))?;
        model.sgd_step(&grad, plan.lr_for(epoch, step, steps));
        total += loss;
    }
    Ok(total / steps as f64)
}

/// Maps a batch-relative numerical error index back to the record index.
pub(crate) fn offset_index(err: Error, batch: &[usize]) -> Error {
    match err {
        Error::Numerical { index, message } => Error::Numerical {
            index: batch.get(index).copied().unwrap_or(index),
            message,
        },
        other => other,
    }
}

/// Runs `plan.epochs` epochs of [`train_epoch`]; returns per-epoch losses.
pub fn fit(model: &mut ParamModel, data: &LabeledSet, plan: &TrainPlan) -> Result<Vec<f64>> {
    (0..plan.epochs).map(|e| train_epoch(model, data, plan, e)).collect()
}

/// Fraction of records whose argmax prediction equals the label.
pub fn eval_accuracy(model: &ParamModel, data: &LabeledSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("cannot evaluate accuracy on an empty set"));
    }
    if data.input_shape().iter().product::<usize>() != model.input_len() {
        return Err(Error::Shape {
            expected: model.topology().input_shape.clone(),
            actual: data.input_shape().to_vec(),
        });
    }
    let correct = data
        .records()
        .iter()
        .filter(|r| model.predict(&r.input) == r.label)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
