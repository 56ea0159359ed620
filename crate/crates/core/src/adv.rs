//! L∞ projected gradient descent, adversarial training and robust accuracy.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::model::ParamModel;
use crate::rng;
use crate::train::{check_training_set, epoch_batches, offset_index, TrainPlan};

fn default_true() -> bool {
    true
}

/// L∞ attack budget and PGD schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvSpec {
    pub gamma: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Start from a uniform point in the ball instead of the clean input.
    #[serde(default = "default_true")]
    pub random_start: bool,
    /// Training epochs over which the budget ramps linearly up to `gamma`;
    /// attacks outside training always use the full budget.
    #[serde(default)]
    pub gamma_warmup_epochs: usize,
}

impl AdvSpec {
    pub const DEFAULT_STEPS: usize = 10;

    /// 10 steps of size `2.5 γ / 10` from a random start.
    pub fn standard(gamma: f64) -> Self {
        Self {
            gamma,
            steps: Self::DEFAULT_STEPS,
            step_size: 2.5 * gamma / Self::DEFAULT_STEPS as f64,
            random_start: true,
            gamma_warmup_epochs: 0,
        }
    }

    /// The spec used to train epoch `epoch`: budget and step size scaled by
    /// `(epoch + 1) / (gamma_warmup_epochs + 1)` during the warm-up.
    pub fn for_epoch(&self, epoch: usize) -> Self {
        if epoch >= self.gamma_warmup_epochs {
            return self.clone();
        }
        let f = (epoch + 1) as f64 / (self.gamma_warmup_epochs + 1) as f64;
        Self {
            gamma: self.gamma * f,
            step_size: self.step_size * f,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma must be non-negative"));
        }
        if self.steps == 0 {
            return Err(Error::config("PGD needs at least one step"));
        }
        if !(self.step_size > 0.0 || self.gamma == 0.0) {
            return Err(Error::config("PGD step_size must be positive"));
        }
        Ok(())
    }
}

/// Sign with `sign(0) = 0`.
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projected gradient ascent on the cross-entropy within the L∞ ball of
/// radius `gamma` around `x`, clipped to `[0, 1]`.
pub fn pgd_attack(model: &ParamModel, x: &[f64], y: usize, spec: &AdvSpec, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::input("PGD inputs must lie in [0, 1]"));
    }
    if spec.gamma == 0.0 {
        return Ok(x.to_vec());
    }
    let lo: Vec<f64> = x.iter().map(|v| (v - spec.gamma).max(0.0)).collect();
    let hi: Vec<f64> = x.iter().map(|v| (v + spec.gamma).min(1.0)).collect();
    let mut adv = x.to_vec();
    if spec.random_start {
        let mut rng = rng::stream(seed, "pgd-start", 0);
        for (i, v) in adv.iter_mut().enumerate() {
            *v = (*v + rng.random_range(-spec.gamma..=spec.gamma)).clamp(lo[i], hi[i]);
        }
    }
    for _ in 0..spec.steps {
        let (_, grad) = model.input_grad(&adv, y)?;
        for (i, v) in adv.iter_mut().enumerate() {
            *v = (*v + spec.step_size * sign(grad[i])).clamp(lo[i], hi[i]);
        }
    }
    Ok(adv)
}

/// One epoch of adversarial training: every batch is replaced by its PGD
/// counterpart before the SGD step. Records for which `exempt` returns true
/// are trained on as given.
pub(crate) fn adv_epoch(
    model: &mut ParamModel,
    data: &LabeledSet,
    plan: &TrainPlan,
    spec: &AdvSpec,
    epoch: usize,
    exempt: &dyn Fn(usize) -> bool,
) -> Result<f64> {
    check_training_set(data, plan)?;
    spec.validate()?;
    let spec = &spec.for_epoch(epoch);
    let batches = epoch_batches(data.len(), plan, epoch);
    let steps = batches.len();
    let mut total = 0.0;
    for (step, batch) in batches.iter().enumerate() {
        let mut inputs = Vec::with_capacity(batch.len());
        for &i in batch {
            let r = &data.records()[i];
            if exempt(i) {
                inputs.push(r.input.clone());
            } else {
                let seed = rng::derive(plan.seed, "pgd-train", (epoch * data.len() + i) as u64);
                inputs.push(pgd_attack(model, &r.input, r.label, spec, seed).map_err(|e| offset_index(e, &[i]))?);
            }
        }
        let views: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| data.records()[i].label).collect();
        let (grad, loss) = model.batch_grad(&views, &labels).map_err(|e| offset_index(e, batch))?;
        model.sgd_step(&grad, plan.lr_for(epoch, step, steps));
        total += loss;
    }
    Ok(total / steps as f64)
}

pub fn adv_train_epoch(
    model: &mut ParamModel,
    data: &LabeledSet,
    plan: &TrainPlan,
    spec: &AdvSpec,
    epoch: usize,
) -> Result<f64> {
    adv_epoch(model, data, plan, spec, epoch, &|_| false)
}

/// Fraction of records classified correctly both as given and after the
/// attack.
pub fn eval_robust_accuracy(model: &ParamModel, data: &LabeledSet, spec: &AdvSpec, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("cannot evaluate robust accuracy on an empty set"));
    }
    let mut robust = 0usize;
    for (i, r) in data.records().iter().enumerate() {
        if model.predict(&r.input) != r.label {
            continue;
        }
        let adv = pgd_attack(model, &r.input, r.label, spec, rng::derive(seed, "pgd-eval", i as u64))?;
        if model.predict(&adv) == r.label {
            robust += 1;
        }
    }
    Ok(robust as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, Topology};

    #[test]
    fn zero_budget_is_identity() {
        let topo = Topology::new(vec![4], vec![LayerSpec::Dense { out: 3 }, LayerSpec::Relu], 2).unwrap();
        let model = ParamModel::new(topo, 1).unwrap();
        let x = [0.1, 0.9, 0.5, 0.0];
        assert_eq!(
            pgd_attack(&model, &x, 1, &AdvSpec::standard(0.0), 3).unwrap(),
            x.to_vec()
        );
    }

    #[test]
    fn standard_schedule() {
        let s = AdvSpec::standard(0.25);
        assert_eq!(s.steps, 10);
        assert!((s.step_size - 0.0625).abs() < 1e-15);
        assert!(AdvSpec { steps: 0, ..s.clone() }.validate().is_err());
        assert!(AdvSpec {
            step_size: 0.0,
            ..s.clone()
        }
        .validate()
        .is_err());
        let ramp = AdvSpec {
            gamma_warmup_epochs: 3,
            ..s
        };
        assert!((ramp.for_epoch(0).gamma - 0.0625).abs() < 1e-15);
        assert!((ramp.for_epoch(2).step_size - 0.046875).abs() < 1e-15);
        assert_eq!(ramp.for_epoch(3), ramp);
    }

    #[test]
    fn out_of_range_input() {
        let topo = Topology::new(vec![2], vec![], 2).unwrap();
        let model = ParamModel::new(topo, 1).unwrap();
        assert!(pgd_attack(&model, &[1.5, 0.0], 0, &AdvSpec::standard(0.1), 0).is_err());
    }
}
