//! Markdown, CSV and JSON renderings of assessed matrices.
//!
//! Output depends only on the records' configs, seeds and metric values
//! (never on wall time), so a resumed matrix renders byte-identically to an
//! uninterrupted one.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::bail;
use conflicts_core::{ConflictVerdict, DeltaReport, DropOutcome, MetricKind};
use serde::Serialize;

use crate::matrix::MatrixResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Markdown,
    Csv,
    Json,
}

/// Successful runs of one label, grouped per metric.
struct LabelSummary<'a> {
    label: &'a str,
    values: BTreeMap<MetricKind, Vec<f64>>,
    seeds: Vec<u64>,
    failed: usize,
}

fn summarize(result: &MatrixResult) -> Vec<LabelSummary<'_>> {
    let mut out: Vec<LabelSummary> = Vec::new();
    for r in &result.records {
        let pos = match out.iter().position(|s| s.label == r.label) {
            Some(p) => p,
            None => {
                out.push(LabelSummary {
                    label: &r.label,
                    values: BTreeMap::new(),
                    seeds: Vec::new(),
                    failed: 0,
                });
                out.len() - 1
            }
        };
        let s = &mut out[pos];
        if !r.succeeded() {
            s.failed += 1;
            continue;
        }
        s.seeds.push(r.seed);
        for (m, v) in &r.metrics {
            s.values.entry(*m).or_default().push(*v);
        }
    }
    out
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn fmt_value(metric: MetricKind, v: f64) -> String {
    match metric {
        MetricKind::Di => format!("{v:.2e}"),
        MetricKind::Epsilon => format!("{v:.2}"),
        _ => format!("{v:.3}"),
    }
}

fn pair_name(result: &MatrixResult) -> String {
    match &result.verdict {
        Some(v) => format!("{}+{}", v.pair[0], v.pair[1]),
        None => result.name.clone(),
    }
}

fn dataset(result: &MatrixResult) -> String {
    result.verdict.as_ref().map_or_else(String::new, |v| v.dataset.clone())
}

fn outcome_word(r: &DeltaReport) -> &'static str {
    match (r.conflict, r.outcome) {
        (true, _) => "CONFLICT",
        (false, Some(DropOutcome::Equal)) => "ok (equal)",
        (false, Some(DropOutcome::Equivalent)) => "ok (equivalent)",
        (false, Some(DropOutcome::WithinThresholdUnproven)) => "ok (within threshold)",
        (false, _) => "ok",
    }
}

fn verdict_cell(v: Option<&ConflictVerdict>) -> String {
    match v {
        None => "incomplete".into(),
        Some(v) if v.conflict => {
            let metrics: Vec<String> = v.conflicting_metrics().iter().map(|m| m.to_string()).collect();
            format!("**conflict** ({})", metrics.join(", "))
        }
        Some(_) => "no conflict".into(),
    }
}

pub fn render_report(results: &[MatrixResult], format: Format) -> anyhow::Result<String> {
    if results.is_empty() {
        bail!("nothing to report: no matrices in the record files");
    }
    Ok(match format {
        Format::Markdown => markdown(results),
        Format::Csv => csv(results),
        Format::Json => json(results)?,
    })
}

fn markdown(results: &[MatrixResult]) -> String {
    let mut out = String::from(
        "# Conflict report\n\n## Summary\n\n| Pair | Dataset | Verdict | Accuracy bound |\n|---|---|---|---|\n",
    );
    for r in results {
        let bound = r
            .verdict
            .as_ref()
            .map_or("", |v| if v.bound_check { "holds" } else { "violated" });
        let _ = writeln!(
            out,
            "| {} | {} | {} | {bound} |",
            pair_name(r),
            dataset(r),
            verdict_cell(r.verdict.as_ref())
        );
    }
    for r in results {
        let _ = write!(
            out,
            "\n## {}\n\nConfig `{}`.\n\n",
            r.name,
            &r.config_hash[..12.min(r.config_hash.len())]
        );
        let summaries = summarize(r);
        let metrics: Vec<MetricKind> = MetricKind::ALL
            .into_iter()
            .filter(|m| summaries.iter().any(|s| s.values.contains_key(m)))
            .collect();
        let _ = write!(out, "| Runs | n |");
        for m in &metrics {
            let _ = write!(out, " {m} |");
        }
        let _ = write!(out, "\n|---|---|{}\n", "---|".repeat(metrics.len()));
        for s in &summaries {
            let n = s.seeds.len();
            let failed = if s.failed > 0 {
                format!(" ({} failed)", s.failed)
            } else {
                String::new()
            };
            let _ = write!(out, "| {} | {n}{failed} |", s.label);
            for m in &metrics {
                match s.values.get(m) {
                    Some(v) => {
                        let (mean, sd) = mean_sd(v);
                        let _ = write!(out, " {} ± {} |", fmt_value(*m, mean), fmt_value(*m, sd));
                    }
                    None => out.push_str(" |"),
                }
            }
            out.push('\n');
        }
        match &r.verdict {
            None => {
                let _ = write!(out, "\nNo verdict: {}.\n", r.incomplete.join("; "));
            }
            Some(v) => {
                out.push_str("\n| Metric | Baseline | Combined | Δ | Threshold | Welch p | TOST p | Outcome |\n|---|---|---|---|---|---|---|---|\n");
                for d in &v.metrics {
                    let base = d.baseline_mean.map_or_else(String::new, |b| fmt_value(d.metric, b));
                    let welch = d.t_test.map_or_else(String::new, |t| format!("{:.2e}", t.p));
                    let tost = d
                        .tost
                        .map_or_else(String::new, |t| format!("{:.2e}", t.p_lower.max(t.p_upper)));
                    let _ = writeln!(
                        out,
                        "| {} | {base} | {} | {} | {} | {welch} | {tost} | {} |",
                        d.metric,
                        fmt_value(d.metric, d.combined_mean),
                        fmt_value(d.metric, d.delta),
                        fmt_value(d.metric, d.threshold),
                        outcome_word(d)
                    );
                }
                let p = &v.policy;
                let _ = write!(
                    out,
                    "\nThresholds: t_acc {}, t_wm {}, t_adv {}, rad_min {}, di_p_max {}, ε cap ×{}; α {}, α* {}.\n",
                    p.t_acc,
                    p.t_wm,
                    p.t_adv,
                    p.rad_min,
                    p.di_p_max,
                    p.epsilon_cap_factor,
                    v.stats.alpha,
                    v.stats.alpha_star
                );
            }
        }
    }
    out
}

fn csv(results: &[MatrixResult]) -> String {
    let mut out = String::from("config_hash,pair,dataset,label,metric,n,mean,sd,values\n");
    for r in results {
        for s in summarize(r) {
            for (m, v) in &s.values {
                let (mean, sd) = mean_sd(v);
                let values: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    r.config_hash,
                    pair_name(r),
                    dataset(r),
                    s.label,
                    m,
                    v.len(),
                    mean,
                    sd,
                    values.join(";")
                );
            }
        }
    }
    out
}

#[derive(Serialize)]
struct JsonRun<'a> {
    label: &'a str,
    index: usize,
    seed: u64,
    metrics: &'a BTreeMap<MetricKind, f64>,
    sigma: Option<f64>,
    error: Option<&'a str>,
}

#[derive(Serialize)]
struct JsonMatrix<'a> {
    name: &'a str,
    config_hash: &'a str,
    verdict: Option<&'a ConflictVerdict>,
    incomplete: &'a [String],
    runs: Vec<JsonRun<'a>>,
}

fn json(results: &[MatrixResult]) -> anyhow::Result<String> {
    let matrices: Vec<JsonMatrix> = results
        .iter()
        .map(|r| JsonMatrix {
            name: &r.name,
            config_hash: &r.config_hash,
            verdict: r.verdict.as_ref(),
            incomplete: &r.incomplete,
            runs: r
                .records
                .iter()
                .map(|x| JsonRun {
                    label: &x.label,
                    index: x.index,
                    seed: x.seed,
                    metrics: &x.metrics,
                    sigma: x.sigma,
                    error: x.error.as_deref(),
                })
                .collect(),
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&matrices)?;
    s.push('\n');
    Ok(s)
}
