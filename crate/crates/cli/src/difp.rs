//! Dataset-inference false positives: two models trained on disjoint
//! halves of the same training set.
//!
//! The victim trains on chunk A and an independent model on chunk B. Each
//! trial fits a distinguisher on the victim (chunk A against test records)
//! and reports three p-values:
//!
//! * self: the victim, queried on held-back chunk-A records;
//! * chunk B: the independent model, queried on the same records;
//! * null: the victim, queried on test records that played no part in
//!   fitting, against other unseen test records.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::bail;
use conflicts_core::di::DiSplit;
use conflicts_core::{
    blind_walk_embed, di_pvalue, eval_accuracy, fit, rng, split_chunks, train_distinguisher, DiSpec, ParamModel, Role,
};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::pool::parallel_map;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiTrial {
    pub seed: u64,
    pub self_p: f64,
    pub chunk_b_p: f64,
    pub null_p: f64,
    #[serde(default)]
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiFalsePositive {
    pub dataset: String,
    pub chunk_sizes: [usize; 2],
    pub victim_acc: f64,
    pub chunk_b_acc: f64,
    /// Flagging threshold on p.
    pub p_max: f64,
    pub trials: Vec<DiTrial>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl DiFalsePositive {
    pub fn self_p(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.self_p).collect()
    }

    pub fn chunk_b_p(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.chunk_b_p).collect()
    }

    pub fn null_p(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.null_p).collect()
    }

    /// Median p-values (self, chunk B, null).
    pub fn medians(&self) -> [f64; 3] {
        [median(self.self_p()), median(self.chunk_b_p()), median(self.null_p())]
    }

    /// Fraction of trials in which each p-value is flagged.
    pub fn flag_rates(&self) -> [f64; 3] {
        let rate = |v: Vec<f64>| v.iter().filter(|&&p| p < self.p_max).count() as f64 / v.len().max(1) as f64;
        [rate(self.self_p()), rate(self.chunk_b_p()), rate(self.null_p())]
    }

    pub fn to_markdown(&self) -> String {
        let [s, b, n] = self.medians();
        let [rs, rb, rn] = self.flag_rates();
        let mut out = format!(
            "## Dataset inference on disjoint chunks ({})\n\n\
             Chunks of {} and {} records; test accuracy {:.3} (victim) and {:.3} (chunk B). \
             Flagged when p < {:e}; {} trials.\n\n\
             | Suspect | Median p | Flagged |\n|---|---|---|\n",
            self.dataset,
            self.chunk_sizes[0],
            self.chunk_sizes[1],
            self.victim_acc,
            self.chunk_b_acc,
            self.p_max,
            self.trials.len()
        );
        for (name, p, r) in [
            ("Victim (chunk A)", s, rs),
            ("Independent (chunk B)", b, rb),
            ("Test (null)", n, rn),
        ] {
            out.push_str(&format!("| {name} | {p:.3e} | {:.0}% |\n", 100.0 * r));
        }
        out
    }
}

/// Runs the scenario for `trials` independent verifications.
pub fn run_di_false_positive(
    config: &ExperimentConfig,
    base_dir: &Path,
    trials: usize,
    workers: usize,
) -> anyhow::Result<DiFalsePositive> {
    if trials == 0 {
        bail!("at least one trial is needed");
    }
    let spec: DiSpec = config.di.clone().unwrap_or_default().spec();
    spec.validate()?;
    let (train, test) = config.dataset.load(base_dir)?;
    let chunks = split_chunks(&train, rng::derive(config.seed, "chunks", 0))?;
    let (a, b) = (&chunks.chunk_a, &chunks.chunk_b);
    let need_test = spec.fit_size + 2 * spec.ver_subset_size;
    if test.len() < need_test {
        bail!("the null needs {need_test} test records, have {}", test.len());
    }
    let topology = config.topology(train.input_shape(), train.num_classes())?;
    let plan = config.train.plan();

    let models = parallel_map(vec![("victim", a), ("chunk-b", b)], workers, |(tag, chunk)| {
        let mut model = ParamModel::new(topology.clone(), rng::derive(config.seed, tag, 0))?;
        let plan = conflicts_core::TrainPlan {
            seed: rng::derive(config.seed, tag, 1),
            ..plan.clone()
        };
        fit(&mut model, chunk, &plan)?;
        anyhow::Ok(model)
    });
    let mut models = models.into_iter();
    let victim = models.next().expect("two models")?;
    let independent = models.next().expect("two models")?;

    let seeds: Vec<u64> = (0..trials)
        .map(|t| rng::derive(config.seed, "di-fp-trial", t as u64))
        .collect();
    let trials = parallel_map(seeds, workers, |seed| -> anyhow::Result<DiTrial> {
        let split = DiSplit::draw(a.len(), test.len(), &spec, seed)?;
        let walk = rng::derive(seed, "di-walk", 0);
        let scorer = train_distinguisher(
            &blind_walk_embed(&victim, &a.subset(&split.fit_train, Role::Train), &spec, walk)?,
            &blind_walk_embed(&victim, &test.subset(&split.fit_test, Role::Test), &spec, walk)?,
        )?;
        let ver = a.subset(&split.ver, Role::Verification);
        let held_out = test.subset(&split.held_out, Role::Test);
        let used: BTreeSet<usize> = split.fit_test.iter().chain(&split.held_out).copied().collect();
        // A seed-dependent window over the unused test records.
        let unused: Vec<usize> = (0..test.len()).filter(|i| !used.contains(i)).collect();
        let start = (seed % unused.len() as u64) as usize;
        let null_ver: Vec<usize> = unused
            .iter()
            .cycle()
            .skip(start)
            .take(spec.ver_subset_size)
            .copied()
            .collect();
        let null_ver = test.subset(&null_ver, Role::Verification);
        Ok(DiTrial {
            seed,
            self_p: di_pvalue(&victim, &ver, &held_out, &scorer, &spec, walk)?,
            chunk_b_p: di_pvalue(&independent, &ver, &held_out, &scorer, &spec, walk)?,
            null_p: di_pvalue(&victim, &null_ver, &held_out, &scorer, &spec, walk)?,
            warning: scorer.warning.clone(),
        })
    })
    .into_iter()
    .collect::<anyhow::Result<Vec<_>>>()?;

    Ok(DiFalsePositive {
        dataset: config.dataset_name(),
        chunk_sizes: [a.len(), b.len()],
        victim_acc: eval_accuracy(&victim, &test)?,
        chunk_b_acc: eval_accuracy(&independent, &test)?,
        p_max: config.thresholds.di_p_max,
        trials,
    })
}
