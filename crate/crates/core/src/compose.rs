//! Pairwise composition of a base mechanism (DPSGD or adversarial training)
//! with an ownership mechanism, in joint or relaxed mode.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adv::{adv_epoch, eval_robust_accuracy, AdvSpec};
use crate::conflict::{Mechanism, MetricKind};
use crate::data::{LabeledSet, Role};
use crate::di::{verify_ownership, DiSpec};
use crate::dp::{account_privacy, calibrate_sigma, dp_train_epoch, DpSpec, PrivacyBudget};
use crate::error::{Error, Result};
use crate::model::{ParamModel, Topology};
use crate::rad::{craft_marks, eval_rad_score, MarkedPairSet, RadSpec};
use crate::rng;
use crate::train::{eval_accuracy, fit, train_epoch, TrainPlan};
use crate::wm::{embed_watermark_train, eval_wm_accuracy, wm_confidence, MixMode, WmConfidence, WmSpec};

/// Per-epoch parameter update applied to a training set.
#[derive(Clone, Debug, PartialEq)]
pub enum UpdateRule {
    Sgd,
    /// DPSGD with the spec as given; `sample_rate_q` must match the set.
    Dp(DpSpec),
    Adv(AdvSpec),
}

impl UpdateRule {
    pub fn epoch(&self, model: &mut ParamModel, data: &LabeledSet, plan: &TrainPlan, epoch: usize) -> Result<f64> {
        match self {
            UpdateRule::Sgd => train_epoch(model, data, plan, epoch),
            UpdateRule::Dp(spec) => dp_train_epoch(model, data, plan, spec, epoch),
            UpdateRule::Adv(spec) => adv_epoch(model, data, plan, spec, epoch, &|_| false),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseMechanism {
    None,
    Dp,
    Adv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ownership {
    None,
    Wm,
    Rad,
    Di,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposeMode {
    #[default]
    Joint,
    /// The base rule sees only the primary data; ownership artifacts train
    /// without it.
    Relaxed,
}

/// At most one base and one ownership mechanism.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    pub base: BaseMechanism,
    pub ownership: Ownership,
    pub mode: ComposeMode,
}

impl Composition {
    pub fn new(base: BaseMechanism, ownership: Ownership, mode: ComposeMode) -> Self {
        Self { base, ownership, mode }
    }

    pub fn single(mechanism: Mechanism) -> Self {
        let (base, ownership) = match mechanism {
            Mechanism::Dp => (BaseMechanism::Dp, Ownership::None),
            Mechanism::Adv => (BaseMechanism::Adv, Ownership::None),
            Mechanism::Wm => (BaseMechanism::None, Ownership::Wm),
            Mechanism::Rad => (BaseMechanism::None, Ownership::Rad),
            Mechanism::Di => (BaseMechanism::None, Ownership::Di),
        };
        Self::new(base, ownership, ComposeMode::Joint)
    }

    /// Mechanisms switched on, base first.
    pub fn mechanisms(&self) -> Vec<Mechanism> {
        let base = match self.base {
            BaseMechanism::None => None,
            BaseMechanism::Dp => Some(Mechanism::Dp),
            BaseMechanism::Adv => Some(Mechanism::Adv),
        };
        let own = match self.ownership {
            Ownership::None => None,
            Ownership::Wm => Some(Mechanism::Wm),
            Ownership::Rad => Some(Mechanism::Rad),
            Ownership::Di => Some(Mechanism::Di),
        };
        base.into_iter().chain(own).collect()
    }

    /// Metrics a run of this composition reports.
    pub fn metrics(&self) -> Vec<MetricKind> {
        let mut out = vec![MetricKind::Acc];
        for m in self.mechanisms() {
            out.push(match m {
                Mechanism::Dp => MetricKind::Epsilon,
                Mechanism::Adv => MetricKind::Adv,
                Mechanism::Wm => MetricKind::Wm,
                Mechanism::Rad => MetricKind::Rad,
                Mechanism::Di => MetricKind::Di,
            });
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == ComposeMode::Relaxed && self.ownership == Ownership::Di {
            return Err(Error::config(
                "dataset inference embeds no artifact, so it has no relaxed mode",
            ));
        }
        Ok(())
    }
}

/// Mechanism parameters; only those of the active mechanisms are required.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MechanismSpecs {
    pub dp: Option<DpSpec>,
    pub adv: Option<AdvSpec>,
    pub wm: Option<WmSpec>,
    pub rad: Option<RadSpec>,
    pub di: Option<DiSpec>,
}

fn need<'a, T>(spec: &'a Option<T>, name: &str) -> Result<&'a T> {
    spec.as_ref()
        .ok_or_else(|| Error::config(format!("missing {name} parameters")))
}

/// Marked training set and its clean/marked pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct RadMarks {
    pub pairs: MarkedPairSet,
    pub marked_train: LabeledSet,
}

/// Trains the owner's marking model on the clean training set and crafts
/// the marks with it.
pub fn prepare_marks(train: &LabeledSet, topology: &Topology, plan: &TrainPlan, spec: &RadSpec) -> Result<RadMarks> {
    let seed = rng::derive(spec.carrier_seed, "marking-model", 0);
    let mut marker = ParamModel::new(topology.clone(), seed)?;
    fit(&mut marker, train, &TrainPlan { seed, ..plan.clone() })?;
    let (pairs, marked_train) = craft_marks(train, &marker, spec)?;
    Ok(RadMarks { pairs, marked_train })
}

/// Inputs shared by every run of a matrix.
#[derive(Clone, Copy, Debug)]
pub struct ComposeData<'a> {
    pub train: &'a LabeledSet,
    pub test: &'a LabeledSet,
    /// Required for watermarking.
    pub trigger: Option<&'a LabeledSet>,
    /// Required for radioactive marking.
    pub marks: Option<&'a RadMarks>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: ParamModel,
    pub metrics: BTreeMap<MetricKind, f64>,
    pub privacy: Option<PrivacyBudget>,
    /// Calibrated noise multiplier.
    pub sigma: Option<f64>,
    pub wm_confidence: Option<WmConfidence>,
    pub losses: Vec<f64>,
    pub warnings: Vec<String>,
}

/// DPSGD spec for a set of `n` records: `q = batch / n` and σ calibrated to
/// the target ε over the whole plan.
fn calibrated_dp(spec: &DpSpec, n: usize, plan: &TrainPlan) -> Result<(DpSpec, u64)> {
    let q = (plan.batch_size as f64 / n as f64).min(1.0);
    let mut spec = DpSpec {
        sample_rate_q: q,
        ..spec.clone()
    };
    let steps = plan.epochs as u64 * spec.steps_per_epoch();
    spec.noise_sigma = calibrate_sigma(&spec, steps)?;
    Ok((spec, steps))
}

/// Trains one model under `composition` and measures every applicable
/// metric on it.
///
/// Joint mode applies the base rule to all training data, trigger and
/// marked records included. Relaxed mode applies it to the primary data
/// only: triggers get a separate plain SGD pass each epoch, and marked
/// records are exempt from adversarial replacement (or, under DPSGD, are
/// trained by plain SGD after the private pass).
pub fn compose_training(
    composition: &Composition,
    specs: &MechanismSpecs,
    data: &ComposeData<'_>,
    topology: &Topology,
    plan: &TrainPlan,
    seed: u64,
) -> Result<RunOutcome> {
    composition.validate()?;
    let plan = TrainPlan {
        seed: rng::derive(seed, "plan", 0),
        ..plan.clone()
    };
    plan.validate()?;
    let mut model = ParamModel::new(topology.clone(), rng::derive(seed, "init", 0))?;
    let relaxed = composition.mode == ComposeMode::Relaxed;
    let mut warnings = Vec::new();
    let mut dp_used: Option<(DpSpec, u64)> = None;

    // Record count the base rule runs over, for DPSGD's sampling rate.
    let wm = match composition.ownership {
        Ownership::Wm => {
            let trigger = data
                .trigger
                .ok_or_else(|| Error::config("watermarking needs a trigger set"))?;
            let mut spec = need(&specs.wm, "wm")?.clone();
            spec.mix_mode = if relaxed { MixMode::Separate } else { MixMode::Joint };
            Some((trigger, spec))
        }
        _ => None,
    };
    let marks = match composition.ownership {
        Ownership::Rad => Some(
            data.marks
                .ok_or_else(|| Error::config("radioactive marking needs crafted marks"))?,
        ),
        _ => None,
    };
    let marked: BTreeSet<usize> = marks
        .map(|m| m.pairs.marked_indices().into_iter().collect())
        .unwrap_or_default();
    let dp_split_marks = relaxed && composition.base == BaseMechanism::Dp && marks.is_some();
    let base_set_len = match (&wm, marks) {
        (Some((trigger, spec)), _) if spec.mix_mode == MixMode::Joint => {
            data.train.len() + crate::wm::trigger_training_set(trigger, spec, plan.batch_size).len()
        }
        (_, Some(_)) if dp_split_marks => data.train.len() - marked.len(),
        _ => data.train.len(),
    };

    let rule = match composition.base {
        BaseMechanism::None => UpdateRule::Sgd,
        BaseMechanism::Adv => UpdateRule::Adv(need(&specs.adv, "adv")?.clone()),
        BaseMechanism::Dp => {
            let (spec, steps) = calibrated_dp(need(&specs.dp, "dp")?, base_set_len.max(1), &plan)?;
            dp_used = Some((spec.clone(), steps));
            UpdateRule::Dp(spec)
        }
    };

    let losses = if let Some((trigger, spec)) = &wm {
        embed_watermark_train(&mut model, data.train, trigger, &plan, spec, &rule)?
    } else if let Some(marks) = marks {
        let set = &marks.marked_train;
        if !relaxed {
            (0..plan.epochs)
                .map(|e| rule.epoch(&mut model, set, &plan, e))
                .collect::<Result<_>>()?
        } else {
            match &rule {
                UpdateRule::Adv(spec) => (0..plan.epochs)
                    .map(|e| adv_epoch(&mut model, set, &plan, spec, e, &|i| marked.contains(&i)))
                    .collect::<Result<_>>()?,
                UpdateRule::Dp(_) => {
                    let (m_idx, c_idx): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|i| marked.contains(i));
                    let clean = set.subset(&c_idx, Role::Train);
                    let marked_part = set.subset(&m_idx, Role::Train);
                    let mark_plan = TrainPlan {
                        seed: rng::derive(plan.seed, "mark-pass", 0),
                        ..plan.clone()
                    };
                    let mut losses = Vec::with_capacity(plan.epochs);
                    for e in 0..plan.epochs {
                        losses.push(rule.epoch(&mut model, &clean, &plan, e)?);
                        if !marked_part.is_empty() {
                            train_epoch(&mut model, &marked_part, &mark_plan, e)?;
                        }
                    }
                    losses
                }
                UpdateRule::Sgd => (0..plan.epochs)
                    .map(|e| rule.epoch(&mut model, set, &plan, e))
                    .collect::<Result<_>>()?,
            }
        }
    } else {
        (0..plan.epochs)
            .map(|e| rule.epoch(&mut model, data.train, &plan, e))
            .collect::<Result<_>>()?
    };

    let mut metrics = BTreeMap::new();
    metrics.insert(MetricKind::Acc, eval_accuracy(&model, data.test)?);
    let mut privacy = None;
    let mut sigma = None;
    if let Some((spec, steps)) = &dp_used {
        let budget = account_privacy(spec, *steps);
        metrics.insert(MetricKind::Epsilon, budget.epsilon);
        sigma = Some(spec.noise_sigma);
        privacy = Some(budget);
    }
    if let UpdateRule::Adv(spec) = &rule {
        let robust = eval_robust_accuracy(&model, data.test, spec, rng::derive(seed, "adv-eval", 0))?;
        metrics.insert(MetricKind::Adv, robust);
    }
    let mut confidence = None;
    if let Some((trigger, spec)) = &wm {
        let phi = eval_wm_accuracy(&model, trigger)?;
        metrics.insert(MetricKind::Wm, phi);
        let phi_for_v = spec.tolerated_error.map_or(phi, |e| 1.0 - e);
        confidence = Some(wm_confidence(phi_for_v, trigger.len(), trigger.num_classes())?);
    }
    if let Some(marks) = marks {
        metrics.insert(MetricKind::Rad, eval_rad_score(&model, &marks.pairs)?);
    }
    if composition.ownership == Ownership::Di {
        let spec = need(&specs.di, "di")?;
        let outcome = verify_ownership(&model, &model, data.train, data.test, spec, rng::derive(seed, "di", 0))?;
        metrics.insert(MetricKind::Di, outcome.p_value);
        warnings.extend(outcome.warning);
    }
    Ok(RunOutcome {
        model,
        metrics,
        privacy,
        sigma,
        wm_confidence: confidence,
        losses,
        warnings,
    })
}
