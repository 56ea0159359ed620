//! Radioactive data: marking a fraction of the training set toward class
//! carriers in a marking model's feature space, and black-box verification
//! through the clean/marked loss gap.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adv::sign;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::model::ParamModel;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadSpec {
    pub mark_fraction: f64,
    pub carrier_seed: u64,
    /// L∞ bound on the mark.
    pub perturb_budget: f64,
    pub craft_steps: usize,
    pub craft_rate: f64,
}

impl RadSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mark_fraction > 0.0 && self.mark_fraction <= 1.0) {
            return Err(Error::config("mark_fraction must lie in (0, 1]"));
        }
        if !(self.perturb_budget >= 0.0 && self.perturb_budget.is_finite()) {
            return Err(Error::config("perturb_budget must be non-negative"));
        }
        if !(self.craft_rate > 0.0) {
            return Err(Error::config("craft_rate must be positive"));
        }
        Ok(())
    }

    /// Number of marked records in a training set of `n`.
    pub fn mark_count(&self, n: usize) -> usize {
        ((self.mark_fraction * n as f64).round() as usize).min(n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkedPair {
    /// Position of the record in the training set.
    pub index: usize,
    pub clean: Vec<f64>,
    pub marked: Vec<f64>,
    pub label: usize,
    /// Carrier alignment of the feature shift at the crafting start.
    pub cos_before: f64,
    /// Carrier alignment after crafting.
    pub cos_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkedPairSet {
    pub pairs: Vec<MarkedPair>,
    /// One unit vector per class in the marking model's feature space.
    pub carrier_directions: Vec<Vec<f64>>,
    pub perturb_budget: f64,
}

impl MarkedPairSet {
    pub fn marked_indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.index).collect()
    }
}

fn unit_carriers(classes: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, "carriers", 0);
    (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / norm).collect()
        })
        .collect()
}

fn cosine(d: &[f64], u: &[f64]) -> f64 {
    let norm = d.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    d.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / norm
}

/// d cos(d, u) / dd for unit `u`; `u` itself when `d = 0`.
fn cosine_grad(d: &[f64], u: &[f64]) -> Vec<f64> {
    let norm = d.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 {
        return u.to_vec();
    }
    let c = cosine(d, u);
    d.iter().zip(u).map(|(a, b)| (b - c * a / norm) / norm).collect()
}

/// Marks `spec.mark_fraction` of `train`: each selected input moves, by
/// signed-gradient ascent within the L∞ budget, so that its feature shift
/// aligns with the carrier of its class. Returns the pairs and the training
/// set with the marked inputs substituted.
pub fn craft_marks(
    train: &LabeledSet,
    marking_model: &ParamModel,
    spec: &RadSpec,
) -> Result<(MarkedPairSet, LabeledSet)> {
    spec.validate()?;
    if marking_model.hidden_depth() == 0 {
        return Err(Error::config(
            "radioactive marking needs a model with a hidden feature layer",
        ));
    }
    let count = spec.mark_count(train.len());
    let mut select = rng::stream(spec.carrier_seed, "mark-select", 0);
    let mut indices = rand::seq::index::sample(&mut select, train.len(), count).into_vec();
    indices.sort_unstable();
    let carriers = unit_carriers(train.num_classes(), marking_model.feature_len(), spec.carrier_seed);
    let budget = spec.perturb_budget;
    let mut pairs = Vec::with_capacity(count);
    for &index in &indices {
        let record = &train.records()[index];
        let x = &record.input;
        let u = &carriers[record.label];
        let lo: Vec<f64> = x.iter().map(|v| (v - budget).max(0.0)).collect();
        let hi: Vec<f64> = x.iter().map(|v| (v + budget).min(1.0)).collect();
        let base = marking_model.features(x);
        let mut rng = rng::stream(spec.carrier_seed, "mark-start", index as u64);
        let mut marked: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if budget > 0.0 {
                    (v + rng.random_range(-0.25 * budget..=0.25 * budget)).clamp(lo[i], hi[i])
                } else {
                    *v
                }
            })
            .collect();
        let shift = |m: &[f64]| -> Vec<f64> {
            marking_model
                .features(m)
                .iter()
                .zip(&base)
                .map(|(a, b)| a - b)
                .collect()
        };
        let cos_before = cosine(&shift(&marked), u);
        if budget > 0.0 {
            for _ in 0..spec.craft_steps {
                let (_, grad) = marking_model.feature_vjp(&marked, |f| {
                    let d: Vec<f64> = f.iter().zip(&base).map(|(a, b)| a - b).collect();
                    cosine_grad(&d, u)
                });
                for (i, v) in marked.iter_mut().enumerate() {
                    *v = (*v + spec.craft_rate * sign(grad[i])).clamp(lo[i], hi[i]);
                }
            }
        }
        let cos_after = cosine(&shift(&marked), u);
        pairs.push(MarkedPair {
            index,
            clean: x.clone(),
            marked,
            label: record.label,
            cos_before,
            cos_after,
        });
    }
    let mut marked_set = train.clone();
    marked_set.replace(pairs.iter().map(|p| (p.index, p.marked.clone())))?;
    Ok((
        MarkedPairSet {
            pairs,
            carrier_directions: carriers,
            perturb_budget: budget,
        },
        marked_set,
    ))
}

/// Mean over pairs of `L(x) − L(x_φ)`; positive when marked inputs are
/// fit better than their clean originals.
pub fn eval_rad_score(model: &ParamModel, pairs: &MarkedPairSet) -> Result<f64> {
    if pairs.pairs.is_empty() {
        return Err(Error::input("radioactive score needs at least one pair"));
    }
    let total: f64 = pairs
        .pairs
        .iter()
        .map(|p| model.loss(&p.clean, p.label) - model.loss(&p.marked, p.label))
        .sum();
    Ok(total / pairs.pairs.len() as f64)
}
