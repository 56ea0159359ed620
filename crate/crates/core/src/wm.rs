//! Trigger-set watermarking: embedding, watermark accuracy and the binomial
//! verification confidence.

use serde::{Deserialize, Serialize};

use crate::compose::UpdateRule;
use crate::data::{LabeledSet, Role};
use crate::error::{Error, Result};
use crate::model::ParamModel;
use crate::rng;
use crate::stats::special::{ln_choose, log_sum_exp};
use crate::train::{eval_accuracy, train_epoch, TrainPlan};

/// How trigger records enter training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    /// Triggers are shuffled into the training set and share its update rule.
    Joint,
    /// Each epoch runs the surrounding rule on the training set, then a
    /// plain SGD pass over the triggers.
    Separate,
}

fn default_repeat() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WmSpec {
    pub trigger_size: usize,
    pub mix_mode: MixMode,
    /// Tolerated error `e` for the confidence; `1 − ϕ_WM` when absent.
    #[serde(default)]
    pub tolerated_error: Option<f64>,
    /// Copies of each trigger per epoch.
    #[serde(default = "default_repeat")]
    pub trigger_repeat: usize,
}

impl WmSpec {
    pub fn new(trigger_size: usize, mix_mode: MixMode) -> Self {
        Self {
            trigger_size,
            mix_mode,
            tolerated_error: None,
            trigger_repeat: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.tolerated_error {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::config("tolerated_error must lie in [0, 1]"));
            }
        }
        if self.trigger_repeat == 0 {
            return Err(Error::config("trigger_repeat must be at least 1"));
        }
        Ok(())
    }
}

/// The trigger set as training records, repeated `spec.trigger_repeat`
/// times and at least enough to fill one batch.
pub(crate) fn trigger_training_set(trigger: &LabeledSet, spec: &WmSpec, batch_size: usize) -> LabeledSet {
    if trigger.is_empty() {
        return trigger.subset(&[], Role::Train);
    }
    let copies = spec.trigger_repeat.max(batch_size.div_ceil(trigger.len()));
    let indices: Vec<usize> = (0..copies).flat_map(|_| 0..trigger.len()).collect();
    trigger.subset(&indices, Role::Train)
}

fn check_trigger(trigger: &LabeledSet, spec: &WmSpec) -> Result<()> {
    spec.validate()?;
    if trigger.role() != Role::Trigger {
        return Err(Error::input(format!(
            "expected a trigger set, got role {:?}",
            trigger.role()
        )));
    }
    if spec.trigger_size > 0 && trigger.is_empty() {
        return Err(Error::input(format!(
            "trigger set is empty but trigger_size is {}",
            spec.trigger_size
        )));
    }
    Ok(())
}

/// Trains with the watermark embedded. `rule` is the surrounding update
/// rule; in joint mode it also applies to the triggers. Returns per-epoch
/// losses of the main pass.
pub fn embed_watermark_train(
    model: &mut ParamModel,
    train: &LabeledSet,
    trigger: &LabeledSet,
    plan: &TrainPlan,
    spec: &WmSpec,
    rule: &UpdateRule,
) -> Result<Vec<f64>> {
    check_trigger(trigger, spec)?;
    let triggers = trigger_training_set(trigger, spec, plan.batch_size);
    match spec.mix_mode {
        MixMode::Joint => {
            let union = train.union(&triggers)?;
            (0..plan.epochs).map(|e| rule.epoch(model, &union, plan, e)).collect()
        }
        MixMode::Separate => {
            let trigger_plan = TrainPlan {
                seed: rng::derive(plan.seed, "trigger-pass", 0),
                ..plan.clone()
            };
            let mut losses = Vec::with_capacity(plan.epochs);
            for e in 0..plan.epochs {
                losses.push(rule.epoch(model, train, plan, e)?);
                if !triggers.is_empty() {
                    train_epoch(model, &triggers, &trigger_plan, e)?;
                }
            }
            Ok(losses)
        }
    }
}

/// Accuracy on the trigger set.
pub fn eval_wm_accuracy(model: &ParamModel, trigger: &LabeledSet) -> Result<f64> {
    if trigger.is_empty() {
        return Err(Error::input("watermark accuracy is undefined for an empty trigger set"));
    }
    eval_accuracy(model, trigger)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WmConfidence {
    /// Natural log of `V`.
    pub ln_v: f64,
    pub v: f64,
    /// `1 − V`.
    pub confidence: f64,
}

impl WmConfidence {
    pub fn log10_v(&self) -> f64 {
        self.ln_v / std::f64::consts::LN_10
    }
}

/// Probability `V` that a model without the watermark matches at least a
/// `ϕ_WM` fraction of `trigger_size` uniformly random labels over `m`
/// classes:
///
/// `V = Σ_{i=0}^{⌊e n⌋} C(n, i) ((m−1)/m)^i (1/m)^(n−i)` with `e = 1 − ϕ_WM`.
///
/// Summed in log space; `(1/m)^n` underflows f64 for realistic `n`.
pub fn wm_confidence(phi_wm: f64, trigger_size: usize, m: usize) -> Result<WmConfidence> {
    if trigger_size == 0 {
        return Err(Error::input("confidence is undefined without triggers"));
    }
    if m < 2 {
        return Err(Error::input("confidence needs at least two classes"));
    }
    if !(0.0..=1.0).contains(&phi_wm) {
        return Err(Error::input(format!("watermark accuracy {phi_wm} outside [0, 1]")));
    }
    let n = trigger_size as u64;
    let e = 1.0 - phi_wm;
    // Absorbs rounding such as 0.57 * 100 = 56.999...
    let k_max = ((e * n as f64 + 1e-9).floor() as u64).min(n);
    let (ln_m, ln_m1) = ((m as f64).ln(), ((m - 1) as f64).ln());
    let terms: Vec<f64> = (0..=k_max)
        .map(|i| ln_choose(n, i) + i as f64 * ln_m1 - n as f64 * ln_m)
        .collect();
    let ln_v = log_sum_exp(&terms).min(0.0);
    let v = ln_v.exp();
    Ok(WmConfidence {
        ln_v,
        v,
        confidence: -ln_v.exp_m1(),
    })
}
