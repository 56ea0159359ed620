//! DPSGD: per-example clipping, Gaussian noise and Poisson-sampled epochs.

mod accountant;

pub use accountant::{
    account_privacy, calibrate_sigma, rdp_subsampled_gaussian, PrivacyBudget, RdpEntry, MAX_ORDER, MIN_ORDER,
    SIGMA_RANGE, SIGMA_TOL,
};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::model::{GradStore, ParamModel};
use crate::rng;
use crate::train::{check_training_set, TrainPlan};

/// DPSGD parameters. `noise_sigma` is in units of `clip_c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSpec {
    pub clip_c: f64,
    pub noise_sigma: f64,
    pub delta: f64,
    pub target_epsilon: f64,
    pub sample_rate_q: f64,
}

impl DpSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_c > 0.0 && self.clip_c.is_finite()) {
            return Err(Error::config("clip_c must be positive"));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta must lie in (0, 1)"));
        }
        if !(self.sample_rate_q > 0.0 && self.sample_rate_q <= 1.0) {
            return Err(Error::config("sample_rate_q must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Poisson-sampled steps per epoch: `round(1 / q)`, at least one.
    pub fn steps_per_epoch(&self) -> u64 {
        (1.0 / self.sample_rate_q).round().max(1.0) as u64
    }
}

/// Per-step inputs of [`dp_train_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpStep {
    pub lr: f64,
    /// Divisor of the noisy sum, `q * |D|` under Poisson sampling.
    pub expected_batch: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpStepReport {
    /// Norm of every per-example gradient after clipping.
    pub clipped_norms: Vec<f64>,
    /// Norm of the clipped sum before noise.
    pub aggregate_norm: f64,
    /// Mean loss over the sampled examples (0 for an empty batch).
    pub loss: f64,
}

/// Rescales each gradient to norm at most `clip_c` and sums them. Returns
/// the sum and the clipped norms.
pub fn clip_and_aggregate(model: &ParamModel, grads: &[GradStore], clip_c: f64) -> (GradStore, Vec<f64>) {
    let mut sum = model.params().zeros_like();
    let mut norms = Vec::with_capacity(grads.len());
    for g in grads {
        let norm = g.norm();
        let factor = if norm > clip_c { clip_c / norm } else { 1.0 };
        sum.add_scaled(g, factor);
        norms.push(norm * factor);
    }
    (sum, norms)
}

/// One DPSGD update: clip, sum, add `N(0, (σc)²)` per coordinate, divide by
/// the expected batch size and take an SGD step.
pub fn dp_train_step(
    model: &mut ParamModel,
    inputs: &[&[f64]],
    labels: &[usize],
    spec: &DpSpec,
    step: &DpStep,
) -> Result<DpStepReport> {
    spec.validate()?;
    if inputs.len() != labels.len() {
        return Err(Error::input("inputs and labels differ in length"));
    }
    if !(step.expected_batch > 0.0) {
        return Err(Error::input("expected batch size must be positive"));
    }
    let mut grads = Vec::with_capacity(inputs.len());
    let mut loss = 0.0;
    for (i, (x, &y)) in inputs.iter().zip(labels).enumerate() {
        let (g, l) = model.example_grad(x, y).map_err(|e| match e {
            Error::Numerical { message, .. } => Error::Numerical { index: i, message },
            other => other,
        })?;
        if g.values().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                index: i,
                message: "non-finite gradient".into(),
            });
        }
        grads.push(g);
        loss += l;
    }
    let (mut noisy, clipped_norms) = clip_and_aggregate(model, &grads, spec.clip_c);
    let aggregate_norm = noisy.norm();
    let normal = Normal::new(0.0, spec.noise_sigma * spec.clip_c)
        .map_err(|e| Error::config(format!("noise distribution: {e}")))?;
    let mut rng = rng::stream(step.seed, "dp-noise", 0);
    for v in noisy.values_mut() {
        *v += normal.sample(&mut rng);
    }
    noisy.scale(1.0 / step.expected_batch);
    model.sgd_step(&noisy, step.lr);
    Ok(DpStepReport {
        clipped_norms,
        aggregate_norm,
        loss: if inputs.is_empty() {
            0.0
        } else {
            loss / inputs.len() as f64
        },
    })
}

/// One epoch of DPSGD with Poisson sampling at rate `q`. `observe` sees the
/// report of every step. Returns the mean loss over non-empty steps.
pub fn dp_train_epoch_with(
    model: &mut ParamModel,
    data: &LabeledSet,
    plan: &TrainPlan,
    spec: &DpSpec,
    epoch: usize,
    mut observe: impl FnMut(&DpStepReport),
) -> Result<f64> {
    check_training_set(data, plan)?;
    spec.validate()?;
    let steps = spec.steps_per_epoch();
    let expected_batch = spec.sample_rate_q * data.len() as f64;
    let (mut total, mut counted) = (0.0, 0usize);
    for s in 0..steps {
        let index = epoch as u64 * steps + s;
        let mut sampler = rng::stream(plan.seed, "poisson", index);
        let picked: Vec<usize> = (0..data.len())
            .filter(|_| sampler.random_bool(spec.sample_rate_q))
            .collect();
        let inputs: Vec<&[f64]> = picked.iter().map(|&i| data.records()[i].input.as_slice()).collect();
        let labels: Vec<usize> = picked.iter().map(|&i| data.records()[i].label).collect();
        let step = DpStep {
            lr: plan.lr_for(epoch, s as usize, steps as usize),
            expected_batch,
            seed: rng::derive(plan.seed, "dp-step", index),
        };
        let report =
            dp_train_step(model, &inputs, &labels, spec, &step).map_err(|e| crate::train::offset_index(e, &picked))?;
        if !picked.is_empty() {
            total += report.loss;
            counted += 1;
        }
        observe(&report);
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}

pub fn dp_train_epoch(
    model: &mut ParamModel,
    data: &LabeledSet,
    plan: &TrainPlan,
    spec: &DpSpec,
    epoch: usize,
) -> Result<f64> {
    dp_train_epoch_with(model, data, plan, spec, epoch, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, Topology};

    fn model() -> ParamModel {
        let topo = Topology::new(vec![3], vec![LayerSpec::Dense { out: 4 }, LayerSpec::Relu], 2).unwrap();
        ParamModel::new(topo, 5).unwrap()
    }

    fn spec(sigma: f64) -> DpSpec {
        DpSpec {
            clip_c: 1.0,
            noise_sigma: sigma,
            delta: 1e-6,
            target_epsilon: 3.0,
            sample_rate_q: 0.5,
        }
    }

    #[test]
    fn large_gradient_is_clipped_to_c() {
        let m = model();
        let mut g = m.params().zeros_like();
        let n = g.len() as f64;
        g.values_mut().for_each(|v| *v = 10.0 / n.sqrt());
        assert!((g.norm() - 10.0).abs() < 1e-9);
        let (sum, norms) = clip_and_aggregate(&m, &[g], 1.0);
        assert!((sum.norm() - 1.0).abs() < 1e-9);
        assert!((norms[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tiny_noise_matches_sgd_when_unclipped() {
        let xs: [&[f64]; 2] = [&[0.1, 0.2, 0.3], &[0.3, 0.1, 0.0]];
        let labels = [0, 1];
        let base = model();
        let grads = base.example_grads(&xs, &labels).unwrap();
        let spec = DpSpec {
            clip_c: 1e6,
            noise_sigma: 1e-300,
            ..spec(1.0)
        };
        assert!(grads.iter().all(|g| g.norm() <= spec.clip_c));
        let mut dp = base.clone();
        let step = DpStep {
            lr: 0.1,
            expected_batch: 2.0,
            seed: 9,
        };
        dp_train_step(&mut dp, &xs, &labels, &spec, &step).unwrap();
        let mut sgd = base.clone();
        let (mean, _) = base.batch_grad(&xs, &labels).unwrap();
        sgd.sgd_step(&mean, 0.1);
        assert!(dp.params().max_abs_diff(sgd.params()) < 1e-12);
    }

    #[test]
    fn noise_is_seeded() {
        let xs: [&[f64]; 1] = [&[0.5, 0.5, 0.5]];
        let step = DpStep {
            lr: 0.1,
            expected_batch: 1.0,
            seed: 3,
        };
        let (mut a, mut b) = (model(), model());
        dp_train_step(&mut a, &xs, &[1], &spec(1.0), &step).unwrap();
        dp_train_step(&mut b, &xs, &[1], &spec(1.0), &step).unwrap();
        assert_eq!(a.params(), b.params());
        let mut c = model();
        dp_train_step(&mut c, &xs, &[1], &spec(1.0), &DpStep { seed: 4, ..step }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn spec_validation() {
        assert!(spec(1.0).validate().is_ok());
        assert!(DpSpec {
            clip_c: 0.0,
            ..spec(1.0)
        }
        .validate()
        .is_err());
        assert!(DpSpec {
            delta: 1.0,
            ..spec(1.0)
        }
        .validate()
        .is_err());
        assert!(DpSpec {
            sample_rate_q: 0.0,
            ..spec(1.0)
        }
        .validate()
        .is_err());
        assert_eq!(
            DpSpec {
                sample_rate_q: 0.02,
                ..spec(1.0)
            }
            .steps_per_epoch(),
            50
        );
    }
}
