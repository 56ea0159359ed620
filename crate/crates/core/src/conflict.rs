//! Effectiveness guards and the pairwise conflict decision.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{mean_var, tost_equivalence, welch_t, TostResult, WelchResult};

/// Protection mechanisms that can be paired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Dp,
    Adv,
    Wm,
    Rad,
    Di,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Dp => "DPSGD",
            Mechanism::Adv => "ADVTR",
            Mechanism::Wm => "WM",
            Mechanism::Rad => "RADDATA",
            Mechanism::Di => "DI",
        }
    }

    /// The metric a mechanism is judged by, if it must be present.
    pub fn required_metric(self) -> Option<MetricKind> {
        match self {
            Mechanism::Dp => None,
            Mechanism::Adv => Some(MetricKind::Adv),
            Mechanism::Wm => Some(MetricKind::Wm),
            Mechanism::Rad => Some(MetricKind::Rad),
            Mechanism::Di => Some(MetricKind::Di),
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Acc,
    Wm,
    Adv,
    Rad,
    Di,
    Epsilon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
    ThresholdCompare,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] = [
        MetricKind::Acc,
        MetricKind::Wm,
        MetricKind::Adv,
        MetricKind::Rad,
        MetricKind::Di,
        MetricKind::Epsilon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Acc => "acc",
            MetricKind::Wm => "wm",
            MetricKind::Adv => "adv",
            MetricKind::Rad => "rad",
            MetricKind::Di => "di",
            MetricKind::Epsilon => "epsilon",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            MetricKind::Acc | MetricKind::Wm | MetricKind::Adv => Direction::HigherBetter,
            MetricKind::Epsilon => Direction::LowerBetter,
            MetricKind::Rad | MetricKind::Di => Direction::ThresholdCompare,
        }
    }

    fn is_drop_metric(self) -> bool {
        self.direction() == Direction::HigherBetter
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Repeated measurements of one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub metric: MetricKind,
    pub values: Vec<f64>,
    pub direction: Direction,
    /// Mechanism set and dataset the values come from.
    pub context: String,
}

impl MetricSample {
    pub fn new(metric: MetricKind, values: Vec<f64>, context: impl Into<String>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(format!("{metric} sample has non-finite values")));
        }
        Ok(Self {
            metric,
            values,
            direction: metric.direction(),
            context: context.into(),
        })
    }

    /// `n` values with exactly the given sample mean and standard deviation,
    /// for replaying published summaries.
    pub fn from_moments(metric: MetricKind, mean: f64, sd: f64, n: usize, context: impl Into<String>) -> Result<Self> {
        if n < 2 {
            return Err(Error::input("a summary needs n >= 2"));
        }
        let centre = (n as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..n).map(|i| i as f64 - centre).collect();
        let (_, var) = mean_var(&raw);
        let values = raw.iter().map(|z| mean + sd * z / var.sqrt()).collect();
        Self::new(metric, values, context)
    }

    pub fn mean(&self) -> f64 {
        mean_var(&self.values).0
    }

    pub fn sd(&self) -> f64 {
        mean_var(&self.values).1.sqrt()
    }
}

/// Effectiveness thresholds. Drop thresholds are absolute differences of
/// fractional metrics (0.10 = 10pp).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdPolicy {
    pub t_acc: f64,
    pub t_wm: f64,
    pub t_adv: f64,
    pub di_p_max: f64,
    pub rad_min: f64,
    pub epsilon_cap_factor: f64,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self {
            t_acc: 0.10,
            t_wm: 0.30,
            t_adv: 0.10,
            di_p_max: 1e-3,
            rad_min: 1e-2,
            epsilon_cap_factor: 1.0,
        }
    }
}

impl ThresholdPolicy {
    /// ε inflation of 1.5x or more is rejected as too permissive.
    pub const MAX_EPSILON_CAP: f64 = 1.5;

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.t_acc,
            self.t_wm,
            self.t_adv,
            self.di_p_max,
            self.rad_min,
            self.epsilon_cap_factor,
        ];
        if all.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config("all thresholds must be positive"));
        }
        if self.epsilon_cap_factor >= Self::MAX_EPSILON_CAP {
            return Err(Error::config(format!(
                "epsilon_cap_factor {} is too permissive (must stay below {})",
                self.epsilon_cap_factor,
                Self::MAX_EPSILON_CAP
            )));
        }
        Ok(())
    }

    /// Allowed drop of a drop-style metric.
    pub fn drop_threshold(&self, metric: MetricKind) -> Option<f64> {
        match metric {
            MetricKind::Acc => Some(self.t_acc),
            MetricKind::Wm => Some(self.t_wm),
            MetricKind::Adv => Some(self.t_adv),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsPolicy {
    /// Level of the Welch test of equal means.
    pub alpha: f64,
    /// Level of the equivalence test.
    pub alpha_star: f64,
}

impl Default for StatsPolicy {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            alpha_star: 0.05,
        }
    }
}

impl StatsPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0 && self.alpha_star > 0.0 && self.alpha_star < 1.0) {
            return Err(Error::config("alpha and alpha_star must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Statistical reading of a drop-style metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropOutcome {
    /// Equal means not rejected.
    Equal,
    /// Difference significant but within the bound by TOST.
    Equivalent,
    /// Difference significant, equivalence unproven, observed drop within
    /// the bound.
    WithinThresholdUnproven,
    /// Difference significant and the observed drop exceeds the bound.
    Exceeds,
}

/// Outcome for one metric of a pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub metric: MetricKind,
    pub baseline_mean: Option<f64>,
    pub combined_mean: f64,
    /// `|baseline − combined|` (0 without a baseline).
    pub delta: f64,
    /// The threshold the guard compares against.
    pub threshold: f64,
    pub passes_threshold: bool,
    pub outcome: Option<DropOutcome>,
    pub t_test: Option<WelchResult>,
    pub tost: Option<TostResult>,
    pub conflict: bool,
}

/// Samples of one (pair, dataset) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSamples {
    pub pair: [Mechanism; 2],
    pub dataset: String,
    /// Single-mechanism samples. Accuracy may appear once per mechanism.
    pub baselines: Vec<MetricSample>,
    pub combined: Vec<MetricSample>,
    /// Configured ε budget; the DP baseline's mean ε is used when absent.
    pub epsilon_budget: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictVerdict {
    pub pair: [Mechanism; 2],
    pub dataset: String,
    pub metrics: Vec<DeltaReport>,
    /// Accuracy Welch test and TOST, repeated from `metrics` for convenience.
    pub t_test: Option<WelchResult>,
    pub tost: Option<TostResult>,
    pub conflict: bool,
    /// Combined accuracy within the lower single-mechanism accuracy plus slack.
    pub bound_check: bool,
    pub policy: ThresholdPolicy,
    pub stats: StatsPolicy,
}

impl ConflictVerdict {
    pub fn conflicting_metrics(&self) -> Vec<MetricKind> {
        self.metrics.iter().filter(|m| m.conflict).map(|m| m.metric).collect()
    }

    pub fn report(&self, metric: MetricKind) -> Option<&DeltaReport> {
        self.metrics.iter().find(|m| m.metric == metric)
    }
}

/// Sampling slack of the accuracy upper bound.
pub const ACCURACY_BOUND_SLACK: f64 = 0.02;

/// Combined accuracy is bounded by the lower of the two single-mechanism
/// accuracies, up to [`ACCURACY_BOUND_SLACK`].
pub fn check_accuracy_bound(acc_combined: f64, acc_m1: f64, acc_m2: f64) -> bool {
    acc_combined <= acc_m1.min(acc_m2) + ACCURACY_BOUND_SLACK
}

fn drop_report(
    metric: MetricKind,
    baseline: &MetricSample,
    combined: &MetricSample,
    threshold: f64,
    stats: &StatsPolicy,
) -> Result<DeltaReport> {
    let (b, c) = (baseline.mean(), combined.mean());
    let drop = b - c;
    let t_test = welch_t(&baseline.values, &combined.values)?;
    let tost = tost_equivalence(&baseline.values, &combined.values, threshold, stats.alpha_star)?;
    let outcome = if t_test.p >= stats.alpha {
        DropOutcome::Equal
    } else if tost.equivalent {
        DropOutcome::Equivalent
    } else if drop <= threshold {
        DropOutcome::WithinThresholdUnproven
    } else {
        DropOutcome::Exceeds
    };
    Ok(DeltaReport {
        metric,
        baseline_mean: Some(b),
        combined_mean: c,
        delta: drop.abs(),
        threshold,
        passes_threshold: drop <= threshold,
        outcome: Some(outcome),
        t_test: Some(t_test),
        tost: Some(tost),
        conflict: outcome == DropOutcome::Exceeds,
    })
}

fn guard_report(
    metric: MetricKind,
    baseline: Option<&MetricSample>,
    combined: &MetricSample,
    threshold: f64,
    passes: bool,
) -> DeltaReport {
    let baseline_mean = baseline.map(MetricSample::mean);
    let combined_mean = combined.mean();
    DeltaReport {
        metric,
        baseline_mean,
        combined_mean,
        delta: baseline_mean.map_or(0.0, |b| (b - combined_mean).abs()),
        threshold,
        passes_threshold: passes,
        outcome: None,
        t_test: None,
        tost: None,
        conflict: !passes,
    }
}

/// Applies every guard to a pair:
///
/// * accuracy, watermark and robust accuracy: conflict when the drop is
///   statistically significant (Welch, `alpha`), not shown equivalent
///   (TOST, `alpha_star`) and larger than its threshold; accuracy is
///   compared against the lower single-mechanism baseline;
/// * radioactive score: conflict when the combined mean is below `rad_min`;
/// * dataset inference: conflict when the combined mean p-value exceeds
///   `di_p_max`;
/// * ε: conflict when it exceeds `epsilon_cap_factor` times the budget.
pub fn decide_conflict(
    samples: &PairSamples,
    policy: &ThresholdPolicy,
    stats: &StatsPolicy,
) -> Result<ConflictVerdict> {
    policy.validate()?;
    stats.validate()?;
    let combined: BTreeMap<MetricKind, &MetricSample> = samples.combined.iter().map(|s| (s.metric, s)).collect();
    let find_combined = |m: MetricKind| {
        combined
            .get(&m)
            .copied()
            .ok_or_else(|| Error::MissingMetric(format!("combined {m}")))
    };
    let baseline_of = |m: MetricKind| samples.baselines.iter().find(|s| s.metric == m);

    let acc_baselines: Vec<&MetricSample> = samples
        .baselines
        .iter()
        .filter(|s| s.metric == MetricKind::Acc)
        .collect();
    let acc_baseline = acc_baselines
        .iter()
        .copied()
        .min_by(|a, b| a.mean().total_cmp(&b.mean()))
        .ok_or_else(|| Error::MissingMetric("baseline acc".into()))?;
    let acc_combined = find_combined(MetricKind::Acc)?;
    let mut metrics = vec![drop_report(
        MetricKind::Acc,
        acc_baseline,
        acc_combined,
        policy.t_acc,
        stats,
    )?];

    let mut required: Vec<MetricKind> = samples.pair.iter().filter_map(|m| m.required_metric()).collect();
    if samples.pair.contains(&Mechanism::Dp) && combined.contains_key(&MetricKind::Epsilon) {
        required.push(MetricKind::Epsilon);
    }
    required.sort();
    required.dedup();
    for metric in required {
        let c = find_combined(metric)?;
        let report = match metric {
            MetricKind::Wm | MetricKind::Adv => {
                let b = baseline_of(metric).ok_or_else(|| Error::MissingMetric(format!("baseline {metric}")))?;
                let threshold = policy.drop_threshold(metric).expect("drop metric");
                drop_report(metric, b, c, threshold, stats)?
            }
            MetricKind::Rad => guard_report(
                metric,
                baseline_of(metric),
                c,
                policy.rad_min,
                c.mean() >= policy.rad_min,
            ),
            MetricKind::Di => guard_report(
                metric,
                baseline_of(metric),
                c,
                policy.di_p_max,
                c.mean() <= policy.di_p_max,
            ),
            MetricKind::Epsilon => {
                let budget = match samples.epsilon_budget {
                    Some(b) => b,
                    None => baseline_of(metric)
                        .ok_or_else(|| Error::MissingMetric("baseline epsilon or budget".into()))?
                        .mean(),
                };
                let cap = policy.epsilon_cap_factor * budget;
                guard_report(metric, baseline_of(metric), c, cap, c.mean() <= cap)
            }
            MetricKind::Acc => unreachable!("accuracy is handled first"),
        };
        debug_assert!(!metric.is_drop_metric() || report.outcome.is_some());
        metrics.push(report);
    }

    let acc_means: Vec<f64> = acc_baselines.iter().map(|s| s.mean()).collect();
    let bound_check = check_accuracy_bound(
        acc_combined.mean(),
        acc_means[0],
        *acc_means.get(1).unwrap_or(&acc_means[0]),
    );
    Ok(ConflictVerdict {
        pair: samples.pair,
        dataset: samples.dataset.clone(),
        t_test: metrics[0].t_test,
        tost: metrics[0].tost,
        conflict: metrics.iter().any(|m| m.conflict),
        metrics,
        bound_check,
        policy: policy.clone(),
        stats: stats.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(metric: MetricKind, mean: f64, sd: f64, n: usize) -> MetricSample {
        MetricSample::from_moments(metric, mean, sd, n, "t").unwrap()
    }

    #[test]
    fn moments_are_exact() {
        let m = s(MetricKind::Wm, 0.36, 0.06, 10);
        assert!((m.mean() - 0.36).abs() < 1e-14);
        assert!((m.sd() - 0.06).abs() < 1e-14);
    }

    #[test]
    fn bound_examples() {
        assert!(check_accuracy_bound(0.38, 0.82, 0.38));
        assert!(!check_accuracy_bound(0.50, 0.40, 0.45));
        assert!(check_accuracy_bound(0.40, 0.40, 0.45));
    }

    #[test]
    fn missing_metric_is_named() {
        let samples = PairSamples {
            pair: [Mechanism::Dp, Mechanism::Wm],
            dataset: "d".into(),
            baselines: vec![s(MetricKind::Acc, 0.9, 0.01, 5), s(MetricKind::Wm, 0.9, 0.01, 5)],
            combined: vec![s(MetricKind::Acc, 0.9, 0.01, 10)],
            epsilon_budget: None,
        };
        match decide_conflict(&samples, &ThresholdPolicy::default(), &StatsPolicy::default()) {
            Err(Error::MissingMetric(name)) => assert_eq!(name, "combined wm"),
            other => panic!("expected missing metric, got {other:?}"),
        }
    }

    #[test]
    fn permissive_epsilon_cap_rejected() {
        let p = ThresholdPolicy {
            epsilon_cap_factor: 1.5,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn epsilon_over_budget_conflicts() {
        let samples = PairSamples {
            pair: [Mechanism::Dp, Mechanism::Di],
            dataset: "d".into(),
            baselines: vec![s(MetricKind::Acc, 0.9, 0.01, 5)],
            combined: vec![
                s(MetricKind::Acc, 0.9, 0.01, 10),
                s(MetricKind::Di, 1e-5, 0.0, 10),
                s(MetricKind::Epsilon, 3.2, 0.0, 10),
            ],
            epsilon_budget: Some(3.0),
        };
        let v = decide_conflict(&samples, &ThresholdPolicy::default(), &StatsPolicy::default()).unwrap();
        assert_eq!(v.conflicting_metrics(), vec![MetricKind::Epsilon]);
    }
}
