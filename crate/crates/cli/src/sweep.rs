//! One-axis hyperparameter sweeps over a matrix.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::bail;
use conflicts_core::{Composition, Mechanism, MetricKind};
use serde::{Deserialize, Serialize};

use crate::config::{AdvConfig, DpConfig, ExperimentConfig, RadConfig, WmConfig};
use crate::matrix::{alone_label, run_matrix, MatrixOptions, MatrixResult, COMBINED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Axis {
    Gamma,
    TriggerSize,
    Epsilon,
    MarkFraction,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Gamma => "gamma",
            Axis::TriggerSize => "trigger_size",
            Axis::Epsilon => "epsilon",
            Axis::MarkFraction => "mark_fraction",
        }
    }

    /// The mechanism whose parameter the axis moves.
    pub fn mechanism(self) -> Mechanism {
        match self {
            Axis::Gamma => Mechanism::Adv,
            Axis::TriggerSize => Mechanism::Wm,
            Axis::Epsilon => Mechanism::Dp,
            Axis::MarkFraction => Mechanism::Rad,
        }
    }

    /// `config` with the axis set to `value`.
    pub fn apply(self, config: &ExperimentConfig, value: f64) -> anyhow::Result<ExperimentConfig> {
        if !config.pair.contains(&self.mechanism()) {
            bail!(
                "sweep axis `{}` moves {} which is not part of the pair",
                self.name(),
                self.mechanism()
            );
        }
        if !(value.is_finite() && value > 0.0) {
            bail!("sweep axis `{}`: value {value} must be positive", self.name());
        }
        let mut c = config.clone();
        match self {
            Axis::Gamma => {
                let adv = c.adv.get_or_insert_with(AdvConfig::default);
                adv.gamma = value;
                // A fixed step size would not scale with the budget.
                adv.step_size = None;
            }
            Axis::TriggerSize => {
                if value.fract() != 0.0 {
                    bail!("sweep axis `trigger_size`: {value} is not a whole number");
                }
                c.wm.get_or_insert_with(WmConfig::default).trigger_size = value as usize;
            }
            Axis::Epsilon => c.dp.get_or_insert_with(DpConfig::default).target_epsilon = value,
            Axis::MarkFraction => c.rad.get_or_insert_with(RadConfig::default).mark_fraction = value,
        }
        c.validate()?;
        Ok(c)
    }
}

/// One row of the curve table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub value: f64,
    pub acc: Option<f64>,
    /// Combined-run means of the pair's metrics.
    pub combined: Vec<(MetricKind, Option<f64>)>,
    /// The moved mechanism's own metric when it runs alone.
    pub alone: Option<f64>,
    /// Mean log10 V of the combined runs (watermark pairs).
    pub log10_v: Option<f64>,
    pub conflict: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: Axis,
    pub points: Vec<CurvePoint>,
    pub matrices: Vec<MatrixResult>,
}

/// Record file of one sweep value: `<stem>.<axis>-<value>.jsonl`.
pub fn sweep_output(base: &Path, axis: Axis, value: f64) -> PathBuf {
    let stem = base
        .file_stem()
        .map_or_else(|| "sweep".into(), |s| s.to_string_lossy().into_owned());
    base.with_file_name(format!("{stem}.{}-{value}.jsonl", axis.name()))
}

pub fn sweep_hyperparams(
    config: &ExperimentConfig,
    base_dir: &Path,
    output: &Path,
    axis: Axis,
    values: &[f64],
    options: &MatrixOptions,
) -> anyhow::Result<SweepResult> {
    if values.is_empty() {
        bail!("a sweep needs at least one value");
    }
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|&v| axis.apply(config, v))
        .collect::<anyhow::Result<_>>()?;
    let mut points = Vec::new();
    let mut matrices = Vec::new();
    for (value, c) in values.iter().zip(&configs) {
        let result = run_matrix(c, base_dir, &sweep_output(output, axis, *value), options)?;
        points.push(curve_point(c, axis, *value, &result)?);
        matrices.push(result);
    }
    Ok(SweepResult { axis, points, matrices })
}

fn curve_point(config: &ExperimentConfig, axis: Axis, value: f64, result: &MatrixResult) -> anyhow::Result<CurvePoint> {
    let metrics = config.composition()?.metrics();
    let own_metric = Composition::single(axis.mechanism()).metrics()[1];
    let log10: Vec<f64> = result
        .records
        .iter()
        .filter(|r| r.label == COMBINED && r.succeeded())
        .filter_map(|r| r.wm_confidence.map(|c| c.log10_v()))
        .collect();
    Ok(CurvePoint {
        value,
        acc: result.mean(COMBINED, MetricKind::Acc),
        combined: metrics
            .iter()
            .filter(|&&m| m != MetricKind::Acc)
            .map(|&m| (m, result.mean(COMBINED, m)))
            .collect(),
        alone: result.mean(&alone_label(axis.mechanism()), own_metric),
        log10_v: (!log10.is_empty()).then(|| log10.iter().sum::<f64>() / log10.len() as f64),
        conflict: result.conflict(),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl SweepResult {
    /// Comma-separated curve table, one row per value.
    pub fn curve_csv(&self) -> String {
        let mut out = String::new();
        let metrics: Vec<MetricKind> = self
            .points
            .first()
            .map(|p| p.combined.iter().map(|(m, _)| *m).collect())
            .unwrap_or_default();
        let mut header = vec![self.axis.name().to_string(), "acc".into()];
        header.extend(metrics.iter().map(|m| m.to_string()));
        let own = Composition::single(self.axis.mechanism()).metrics()[1];
        header.extend([format!("{own}_alone"), "log10_v".into(), "conflict".into()]);
        let _ = writeln!(out, "{}", header.join(","));
        for p in &self.points {
            let mut row = vec![format!("{}", p.value), cell(p.acc)];
            row.extend(p.combined.iter().map(|(_, v)| cell(*v)));
            row.push(cell(p.alone));
            row.push(cell(p.log10_v));
            row.push(p.conflict.map_or_else(|| "incomplete".into(), |c| c.to_string()));
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}
