//! Seeded run matrix: each mechanism of the pair alone, then the pair, then
//! the conflict verdict.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use conflicts_core::data::resize_inputs;
use conflicts_core::{
    build_trigger_set, compose_training, decide_conflict, prepare_marks, rng, ComposeData, Composition,
    ConflictVerdict, LabeledSet, Mechanism, MechanismSpecs, MetricKind, MetricSample, PairSamples, RadMarks, Topology,
    TrainPlan,
};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::pool::run_pool;
use crate::records::{Entry, RecordFile, RecordWriter, RunKey, RunRecord};

pub const COMBINED: &str = "combined";

pub fn mechanism_key(m: Mechanism) -> &'static str {
    match m {
        Mechanism::Dp => "dp",
        Mechanism::Adv => "adv",
        Mechanism::Wm => "wm",
        Mechanism::Rad => "rad",
        Mechanism::Di => "di",
    }
}

pub fn alone_label(m: Mechanism) -> String {
    format!("{}-alone", mechanism_key(m))
}

/// One scheduled run.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedRun {
    pub label: String,
    pub composition: Composition,
    pub index: usize,
    pub seed: u64,
}

/// Baselines first (in pair order), then the combined runs.
pub fn planned_runs(config: &ExperimentConfig) -> anyhow::Result<Vec<PlannedRun>> {
    let mut out = Vec::new();
    let mut push = |label: String, composition: Composition, repeats: usize| {
        for index in 0..repeats {
            let seed = rng::derive(config.seed, &label, index as u64);
            out.push(PlannedRun {
                label: label.clone(),
                composition,
                index,
                seed,
            });
        }
    };
    for m in config.mechanisms()? {
        push(alone_label(m), Composition::single(m), config.baseline_repeats);
    }
    push(COMBINED.into(), config.composition()?, config.repeats);
    Ok(out)
}

/// Data and models shared by every run of a matrix.
pub struct Prepared {
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub trigger: Option<LabeledSet>,
    pub marks: Option<RadMarks>,
    pub topology: Topology,
    pub plan: TrainPlan,
    pub specs: MechanismSpecs,
}

impl Prepared {
    /// Loads the data and builds the trigger set and radioactive marks
    /// once, so every seed sees the same artifacts.
    pub fn new(config: &ExperimentConfig, base_dir: &Path) -> anyhow::Result<Self> {
        let (train, test) = config.dataset.load(base_dir)?;
        let topology = config.topology(train.input_shape(), train.num_classes())?;
        let plan = config.train.plan();
        let specs = config.specs();
        let pair = config.mechanisms()?;
        let trigger = match &specs.wm {
            Some(wm) if pair.contains(&Mechanism::Wm) => {
                let (ood, _) = config
                    .trigger_source()?
                    .load(base_dir)
                    .context("loading the trigger source")?;
                let ood = if ood.input_shape() == train.input_shape() {
                    ood
                } else {
                    resize_inputs(&ood, train.input_shape())?
                };
                let seed = rng::derive(config.seed, "trigger", 0);
                Some(build_trigger_set(&ood, wm.trigger_size, train.num_classes(), seed)?)
            }
            _ => None,
        };
        let marks = match &specs.rad {
            Some(rad) if pair.contains(&Mechanism::Rad) => Some(prepare_marks(&train, &topology, &plan, rad)?),
            _ => None,
        };
        Ok(Self {
            train,
            test,
            trigger,
            marks,
            topology,
            plan,
            specs,
        })
    }

    fn data(&self) -> ComposeData<'_> {
        ComposeData {
            train: &self.train,
            test: &self.test,
            trigger: self.trigger.as_ref(),
            marks: self.marks.as_ref(),
        }
    }

    /// Trains and measures one run; failures become records too.
    pub fn execute(&self, config_hash: &str, run: &PlannedRun, artifacts_dir: Option<&Path>) -> RunRecord {
        let start = Instant::now();
        let outcome = compose_training(
            &run.composition,
            &self.specs,
            &self.data(),
            &self.topology,
            &self.plan,
            run.seed,
        );
        let mut record = RunRecord {
            config_hash: config_hash.to_string(),
            label: run.label.clone(),
            index: run.index,
            seed: run.seed,
            metrics: BTreeMap::new(),
            privacy: None,
            sigma: None,
            wm_confidence: None,
            warnings: Vec::new(),
            wall_time_s: 0.0,
            error: None,
            artifacts: Vec::new(),
        };
        match outcome {
            Ok(out) => {
                if let Some(dir) = artifacts_dir {
                    let path = dir.join(format!("{}-{}-{}.json", &config_hash[..12], run.label, run.index));
                    let saved = std::fs::create_dir_all(dir)
                        .map_err(anyhow::Error::from)
                        .and_then(|_| Ok(std::fs::write(&path, out.model.to_json()?)?));
                    match saved {
                        Ok(()) => record.artifacts.push(path),
                        Err(e) => record.warnings.push(format!("model not saved: {e}")),
                    }
                }
                record.metrics = out.metrics;
                record.privacy = out.privacy;
                record.sigma = out.sigma;
                record.wm_confidence = out.wm_confidence;
                record.warnings.extend(out.warnings);
            }
            Err(e) => record.error = Some(e.to_string()),
        }
        record.wall_time_s = start.elapsed().as_secs_f64();
        record
    }
}

#[derive(Clone, Debug, Default)]
pub struct MatrixOptions {
    pub workers: usize,
    /// Saves each trained model as JSON here.
    pub artifacts_dir: Option<PathBuf>,
    /// Stops after this many new runs (the rest resume later).
    pub max_new_runs: Option<usize>,
}

/// Outcome of a matrix: its runs and, with enough surviving seeds, a verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub name: String,
    pub config_hash: String,
    /// Successful and failed runs, in schedule order.
    pub records: Vec<RunRecord>,
    pub samples: Option<PairSamples>,
    pub verdict: Option<ConflictVerdict>,
    /// Why no verdict was reached (missing seeds per label).
    pub incomplete: Vec<String>,
    /// Runs trained by this invocation.
    pub executed: usize,
}

impl MatrixResult {
    pub fn conflict(&self) -> Option<bool> {
        self.verdict.as_ref().map(|v| v.conflict)
    }

    /// Mean of a metric over the successful runs of `label`.
    pub fn mean(&self, label: &str, metric: MetricKind) -> Option<f64> {
        let values: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.label == label && r.succeeded())
            .filter_map(|r| r.metrics.get(&metric).copied())
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Runs (or resumes) the matrix of `config`, appending to `output`.
pub fn run_matrix(
    config: &ExperimentConfig,
    base_dir: &Path,
    output: &Path,
    options: &MatrixOptions,
) -> anyhow::Result<MatrixResult> {
    config.validate()?;
    let hash = config.hash();
    let existing = RecordFile::read(output)?;
    let done = existing.completed(&hash);
    let schedule = planned_runs(config)?;
    let mut todo: Vec<PlannedRun> = schedule
        .iter()
        .filter(|r| !done.contains_key(&key(&hash, r)))
        .cloned()
        .collect();
    if let Some(limit) = options.max_new_runs {
        todo.truncate(limit);
    }

    let mut fresh = Vec::new();
    if !todo.is_empty() {
        let prepared = Prepared::new(config, base_dir)?;
        let mut writer = RecordWriter::open(output)?;
        if !existing.configs.contains_key(&hash) {
            writer.append(&Entry::Config {
                hash: hash.clone(),
                config: Box::new(config.clone()),
            })?;
        }
        let mut write_error = None;
        run_pool(
            todo,
            options.workers,
            |run| prepared.execute(&hash, &run, options.artifacts_dir.as_deref()),
            |record| {
                if write_error.is_none() {
                    write_error = writer.append(&Entry::Run(Box::new(record.clone()))).err();
                }
                fresh.push(record);
            },
        );
        if let Some(e) = write_error {
            return Err(e.context(format!("writing {}", output.display())));
        }
    }
    let executed = fresh.len();

    // Latest record per key: completed runs from disk, then this invocation.
    let mut latest: BTreeMap<RunKey, RunRecord> = existing
        .runs
        .into_iter()
        .filter(|r| r.config_hash == hash)
        .map(|r| (r.key(), r))
        .collect();
    latest.extend(done);
    for r in fresh {
        let k = r.key();
        if !latest.get(&k).is_some_and(RunRecord::succeeded) {
            latest.insert(k, r);
        }
    }
    let records: Vec<RunRecord> = schedule
        .iter()
        .filter_map(|r| latest.get(&key(&hash, r)).cloned())
        .collect();
    let mut result = assess(config, &hash, records)?;
    result.executed = executed;
    Ok(result)
}

fn key(hash: &str, run: &PlannedRun) -> RunKey {
    RunKey {
        config_hash: hash.to_string(),
        label: run.label.clone(),
        index: run.index,
    }
}

/// Builds samples and the verdict from records alone.
pub fn assess(config: &ExperimentConfig, hash: &str, records: Vec<RunRecord>) -> anyhow::Result<MatrixResult> {
    let pair = config.mechanisms()?;
    let dataset = config.dataset_name();
    let mut by_label: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.succeeded()) {
        by_label.entry(r.label.as_str()).or_default().push(r);
    }
    let sample = |label: &str, metric: MetricKind, context: &str| -> anyhow::Result<Option<MetricSample>> {
        let values: Vec<f64> = by_label
            .get(label)
            .map(|rs| rs.iter().filter_map(|r| r.metrics.get(&metric).copied()).collect())
            .unwrap_or_default();
        if values.len() < 2 {
            return Ok(None);
        }
        Ok(Some(MetricSample::new(metric, values, context)?))
    };

    let mut incomplete = Vec::new();
    let mut baselines = Vec::new();
    for m in pair {
        let label = alone_label(m);
        let context = format!("{m} / {dataset}");
        for metric in Composition::single(m).metrics() {
            match sample(&label, metric, &context)? {
                Some(s) => baselines.push(s),
                None => incomplete.push(format!("{label}: fewer than 2 runs report {metric}")),
            }
        }
    }
    let mut combined = Vec::new();
    let context = format!("{}+{} / {dataset}", pair[0], pair[1]);
    for metric in config.composition()?.metrics() {
        match sample(COMBINED, metric, &context)? {
            Some(s) => combined.push(s),
            None => incomplete.push(format!("{COMBINED}: fewer than 2 runs report {metric}")),
        }
    }
    incomplete.sort();
    incomplete.dedup();

    let (samples, verdict) = if incomplete.is_empty() {
        let samples = PairSamples {
            pair,
            dataset,
            baselines,
            combined,
            epsilon_budget: config.dp.as_ref().map(|d| d.target_epsilon),
        };
        let verdict = decide_conflict(&samples, &config.thresholds, &config.stats)?;
        (Some(samples), Some(verdict))
    } else {
        (None, None)
    };
    Ok(MatrixResult {
        name: config.display_name(),
        config_hash: hash.to_string(),
        records,
        samples,
        verdict,
        incomplete,
        executed: 0,
    })
}

/// Re-derives every matrix stored in a record file.
pub fn assess_file(file: &RecordFile) -> anyhow::Result<Vec<MatrixResult>> {
    let hashes: BTreeSet<&String> = file.configs.keys().collect();
    let mut out = Vec::new();
    for hash in hashes {
        let config = &file.configs[hash];
        let mut latest: BTreeMap<RunKey, RunRecord> = BTreeMap::new();
        for r in file.runs.iter().filter(|r| &r.config_hash == hash) {
            if !latest.get(&r.key()).is_some_and(RunRecord::succeeded) {
                latest.insert(r.key(), r.clone());
            }
        }
        let records = planned_runs(config)?
            .iter()
            .filter_map(|p| latest.get(&key(hash, p)).cloned())
            .collect();
        out.push(assess(config, hash, records)?);
    }
    Ok(out)
}
