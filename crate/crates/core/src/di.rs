//! Dataset inference: Blind Walk margin embeddings, a logistic distinguisher
//! and the one-sided ownership p-value.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSet, Role};
use crate::error::{Error, Result};
use crate::model::ParamModel;
use crate::rng;
use crate::stats::{mean_var, welch_greater};

fn default_fit_size() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiSpec {
    pub walk_count: usize,
    /// L∞ length of one hop.
    pub walk_step: f64,
    pub max_hops: usize,
    pub ver_subset_size: usize,
    /// Records per origin used to fit the distinguisher.
    #[serde(default = "default_fit_size")]
    pub fit_size: usize,
}

impl DiSpec {
    pub const MIN_SUBSET: usize = 10;

    pub fn validate(&self) -> Result<()> {
        if self.walk_count == 0 || self.max_hops == 0 {
            return Err(Error::config("walk_count and max_hops must be at least 1"));
        }
        if !(self.walk_step > 0.0) {
            return Err(Error::config("walk_step must be positive"));
        }
        if self.ver_subset_size < Self::MIN_SUBSET || self.fit_size < Self::MIN_SUBSET {
            return Err(Error::config(format!(
                "ver_subset_size and fit_size must be at least {}",
                Self::MIN_SUBSET
            )));
        }
        Ok(())
    }

    pub fn cap(&self) -> f64 {
        self.max_hops as f64 * self.walk_step
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginEmbedding {
    /// Flip distance along each walk direction.
    pub distances: Vec<f64>,
    pub origin: Origin,
}

/// Seeded `±1` directions shared by every record.
fn walk_directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|d| {
            let mut rng = rng::stream(seed, "walk", d as u64);
            (0..dim)
                .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect()
        })
        .collect()
}

/// For every record and direction, the distance `hops · walk_step` at the
/// first hop where the predicted class differs from the prediction at the
/// record itself, or `max_hops · walk_step` if it never does.
pub fn blind_walk_embed(
    model: &ParamModel,
    records: &LabeledSet,
    spec: &DiSpec,
    seed: u64,
) -> Result<Vec<MarginEmbedding>> {
    spec.validate()?;
    if records.is_empty() {
        return Err(Error::input("blind walk needs at least one record"));
    }
    if records.input_shape().iter().product::<usize>() != model.input_len() {
        return Err(Error::Shape {
            expected: model.topology().input_shape.clone(),
            actual: records.input_shape().to_vec(),
        });
    }
    let origin = match records.role() {
        Role::Train | Role::Verification | Role::Marked => Origin::Train,
        Role::Test | Role::Trigger => Origin::Test,
    };
    let directions = walk_directions(model.input_len(), spec.walk_count, seed);
    let mut probe = vec![0.0; model.input_len()];
    Ok(records
        .records()
        .iter()
        .map(|r| {
            let start = model.predict(&r.input);
            let distances = directions
                .iter()
                .map(|dir| {
                    for hop in 1..=spec.max_hops {
                        let dist = hop as f64 * spec.walk_step;
                        for ((p, x), d) in probe.iter_mut().zip(&r.input).zip(dir) {
                            *p = x + dist * d;
                        }
                        if model.predict(&probe) != start {
                            return dist;
                        }
                    }
                    spec.cap()
                })
                .collect();
            MarginEmbedding { distances, origin }
        })
        .collect())
}

/// Logistic scorer over standardized embeddings. Higher scores mean more
/// train-like.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distinguisher {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Features with zero variance in the fit data carry no weight.
    active: Vec<bool>,
    weights: Vec<f64>,
    bias: f64,
    pub warning: Option<String>,
}

const RIDGE: f64 = 1e-4;
const MAX_NEWTON: usize = 100;

impl Distinguisher {
    /// Log-odds of train origin.
    pub fn score(&self, distances: &[f64]) -> f64 {
        let mut s = self.bias;
        for (j, &d) in distances.iter().enumerate().take(self.weights.len()) {
            if self.active[j] {
                s += self.weights[j] * (d - self.mean[j]) / self.scale[j];
            }
        }
        s
    }

    pub fn is_constant(&self) -> bool {
        !self.active.iter().any(|&a| a)
    }
}

/// Solves `a x = b` for symmetric positive definite `a` (row-major `n × n`).
fn cholesky_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        for k in 0..i {
            b[i] -= a[i * n + k] * b[k];
        }
        b[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            b[i] -= a[k * n + i] * b[k];
        }
        b[i] /= a[i * n + i];
    }
    Some(b)
}

/// Fits a ridge-regularized logistic regression (Newton iterations)
/// separating train-origin from test-origin embeddings.
pub fn train_distinguisher(train_emb: &[MarginEmbedding], test_emb: &[MarginEmbedding]) -> Result<Distinguisher> {
    if train_emb.is_empty() || test_emb.is_empty() {
        return Err(Error::input("distinguisher needs embeddings of both origins"));
    }
    let dim = train_emb[0].distances.len();
    if train_emb.iter().chain(test_emb).any(|e| e.distances.len() != dim) {
        return Err(Error::input("embeddings differ in length"));
    }
    let rows: Vec<(&[f64], f64)> = train_emb
        .iter()
        .map(|e| (e.distances.as_slice(), 1.0))
        .chain(test_emb.iter().map(|e| (e.distances.as_slice(), 0.0)))
        .collect();
    let (mut mean, mut scale, mut active) = (vec![0.0; dim], vec![1.0; dim], vec![false; dim]);
    for j in 0..dim {
        let column: Vec<f64> = rows.iter().map(|(x, _)| x[j]).collect();
        let (m, v) = mean_var(&column);
        mean[j] = m;
        if v > 1e-24 {
            scale[j] = v.sqrt();
            active[j] = true;
        }
    }
    let cols: Vec<usize> = (0..dim).filter(|&j| active[j]).collect();
    let mut weights = vec![0.0; dim];
    if cols.is_empty() {
        return Ok(Distinguisher {
            mean,
            scale,
            active,
            weights,
            bias: 0.0,
            warning: Some("all embedding features are constant; scorer is constant".into()),
        });
    }
    // Parameter vector: bias followed by the active weights.
    let k = cols.len() + 1;
    let design: Vec<Vec<f64>> = rows
        .iter()
        .map(|(x, _)| {
            std::iter::once(1.0)
                .chain(cols.iter().map(|&j| (x[j] - mean[j]) / scale[j]))
                .collect()
        })
        .collect();
    let mut beta = vec![0.0; k];
    let mut warning = None;
    for iter in 0..MAX_NEWTON {
        let mut hess = vec![0.0; k * k];
        let mut grad = vec![0.0; k];
        for (z, (_, y)) in design.iter().zip(&rows) {
            let eta: f64 = z.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-eta).exp());
            let w = (p * (1.0 - p)).max(1e-12);
            for a in 0..k {
                grad[a] += (y - p) * z[a];
                for b in 0..k {
                    hess[a * k + b] += w * z[a] * z[b];
                }
            }
        }
        for a in 1..k {
            grad[a] -= RIDGE * beta[a];
            hess[a * k + a] += RIDGE;
        }
        let Some(step) = cholesky_solve(hess, grad, k) else {
            warning = Some("singular Newton system; stopped early".into());
            break;
        };
        let change = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        beta.iter_mut().zip(&step).for_each(|(b, s)| *b += s);
        if change < 1e-10 {
            break;
        }
        if iter + 1 == MAX_NEWTON {
            warning = Some("Newton iterations did not converge (separable data?)".into());
        }
    }
    for (c, &j) in cols.iter().enumerate() {
        weights[j] = beta[c + 1];
    }
    Ok(Distinguisher {
        mean,
        scale,
        active,
        weights,
        bias: beta[0],
        warning,
    })
}

/// One-sided Welch p-value that the suspect's embeddings of `ver_subset`
/// score higher than those of `held_out`.
pub fn di_pvalue(
    suspect: &ParamModel,
    ver_subset: &LabeledSet,
    held_out: &LabeledSet,
    scorer: &Distinguisher,
    spec: &DiSpec,
    seed: u64,
) -> Result<f64> {
    for (name, set) in [("verification", ver_subset), ("held-out", held_out)] {
        if set.len() < DiSpec::MIN_SUBSET {
            return Err(Error::input(format!(
                "{name} subset has {} records, need at least {}",
                set.len(),
                DiSpec::MIN_SUBSET
            )));
        }
    }
    let score = |set: &LabeledSet| -> Result<Vec<f64>> {
        Ok(blind_walk_embed(suspect, set, spec, seed)?
            .iter()
            .map(|e| scorer.score(&e.distances))
            .collect())
    };
    welch_greater(&score(ver_subset)?, &score(held_out)?)
}

/// Disjoint index subsets for one verification.
#[derive(Clone, Debug, PartialEq)]
pub struct DiSplit {
    pub fit_train: Vec<usize>,
    pub ver: Vec<usize>,
    pub fit_test: Vec<usize>,
    pub held_out: Vec<usize>,
}

impl DiSplit {
    /// Draws `fit_size` + `ver_subset_size` train indices and as many test
    /// indices, all disjoint within their source.
    pub fn draw(n_train: usize, n_test: usize, spec: &DiSpec, seed: u64) -> Result<Self> {
        let need = spec.fit_size + spec.ver_subset_size;
        if n_train < need || n_test < need {
            return Err(Error::input(format!(
                "dataset inference needs {need} train and test records, have {n_train} and {n_test}"
            )));
        }
        let take = |n: usize, tag: &str| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(seed, tag, 0));
            order.truncate(need);
            let ver = order.split_off(spec.fit_size);
            (order, ver)
        };
        let (fit_train, ver) = take(n_train, "di-train-split");
        let (fit_test, held_out) = take(n_test, "di-test-split");
        Ok(Self {
            fit_train,
            ver,
            fit_test,
            held_out,
        })
    }
}

/// Result of a full verification: distinguisher fitted on the victim,
/// p-value on the suspect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiOutcome {
    pub p_value: f64,
    pub warning: Option<String>,
}

/// Fits the distinguisher on the victim's view of train and test records
/// and tests whether the suspect treats held-back train records
/// (the verification subset) as more train-like than held-back test records.
pub fn verify_ownership(
    victim: &ParamModel,
    suspect: &ParamModel,
    train: &LabeledSet,
    test: &LabeledSet,
    spec: &DiSpec,
    seed: u64,
) -> Result<DiOutcome> {
    spec.validate()?;
    let split = DiSplit::draw(train.len(), test.len(), spec, seed)?;
    let walk_seed = rng::derive(seed, "di-walk", 0);
    let scorer = train_distinguisher(
        &blind_walk_embed(victim, &train.subset(&split.fit_train, Role::Train), spec, walk_seed)?,
        &blind_walk_embed(victim, &test.subset(&split.fit_test, Role::Test), spec, walk_seed)?,
    )?;
    let p_value = di_pvalue(
        suspect,
        &train.subset(&split.ver, Role::Verification),
        &test.subset(&split.held_out, Role::Test),
        &scorer,
        spec,
        walk_seed,
    )?;
    Ok(DiOutcome {
        p_value,
        warning: scorer.warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(values: &[f64], origin: Origin) -> MarginEmbedding {
        MarginEmbedding {
            distances: values.to_vec(),
            origin,
        }
    }

    #[test]
    fn cholesky_solves_small_system() {
        let a = vec![4.0, 2.0, 2.0, 3.0];
        let x = cholesky_solve(a, vec![2.0, 1.0], 2).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-14 && x[1].abs() < 1e-14);
        assert!(cholesky_solve(vec![0.0], vec![1.0], 1).is_none());
    }

    #[test]
    fn constant_embeddings_warn() {
        let a: Vec<_> = (0..5).map(|_| emb(&[1.0, 2.0], Origin::Train)).collect();
        let b: Vec<_> = (0..5).map(|_| emb(&[1.0, 2.0], Origin::Test)).collect();
        let d = train_distinguisher(&a, &b).unwrap();
        assert!(d.warning.is_some() && d.is_constant());
        assert_eq!(d.score(&[5.0, 7.0]), d.score(&[0.0, 0.0]));
    }

    #[test]
    fn scores_grow_with_train_likeness() {
        let a: Vec<_> = (0..20).map(|i| emb(&[1.0 + 0.01 * i as f64], Origin::Train)).collect();
        let b: Vec<_> = (0..20).map(|i| emb(&[0.5 + 0.01 * i as f64], Origin::Test)).collect();
        let d = train_distinguisher(&a, &b).unwrap();
        assert!(d.score(&[1.1]) > d.score(&[0.5]));
    }

    #[test]
    fn split_is_disjoint() {
        let spec = DiSpec {
            walk_count: 2,
            walk_step: 0.1,
            max_hops: 5,
            ver_subset_size: 10,
            fit_size: 15,
        };
        let s = DiSplit::draw(40, 30, &spec, 1).unwrap();
        assert_eq!((s.fit_train.len(), s.ver.len()), (15, 10));
        assert!(s.ver.iter().all(|i| !s.fit_train.contains(i)));
        assert!(s.held_out.iter().all(|i| !s.fit_test.contains(i)));
        assert!(DiSplit::draw(20, 30, &spec, 1).is_err());
    }
}
