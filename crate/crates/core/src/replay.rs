//! Published per-dataset summaries (mean, sd) of the single-mechanism
//! baselines and the DPSGD / adversarial-training pairings, as
//! [`PairSamples`] ready for [`decide_conflict`](crate::conflict::decide_conflict).
//!
//! Baselines were repeated 5 times and pairs 10 times; samples are rebuilt
//! with [`MetricSample::from_moments`]. A reported `< 1e-30` is stored as
//! `1e-30` with zero spread.

use crate::conflict::{Mechanism, MetricKind, MetricSample, PairSamples};
use crate::error::Result;

pub const BASELINE_RUNS: usize = 5;
pub const PAIR_RUNS: usize = 10;
pub const DI_FLOOR: f64 = 1e-30;

pub const DATASETS: [&str; 3] = ["MNIST", "FMNIST", "CIFAR10"];

/// (mean, sd)
type Ms = (f64, f64);

struct Baselines {
    no_def_acc: Ms,
    adv_acc: Ms,
    adv: Ms,
    dp_acc: Ms,
    wm_acc: Ms,
    wm: Ms,
    rad_acc: Ms,
    rad: Ms,
}

const BASELINES: [Baselines; 3] = [
    Baselines {
        no_def_acc: (0.99, 0.00),
        adv_acc: (0.99, 0.00),
        adv: (0.95, 0.00),
        dp_acc: (0.98, 0.00),
        wm_acc: (0.99, 0.00),
        wm: (0.97, 0.01),
        rad_acc: (0.98, 0.00),
        rad: (0.284, 0.001),
    },
    Baselines {
        no_def_acc: (0.91, 0.00),
        adv_acc: (0.87, 0.00),
        adv: (0.69, 0.00),
        dp_acc: (0.86, 0.01),
        wm_acc: (0.87, 0.02),
        wm: (0.99, 0.02),
        rad_acc: (0.88, 0.01),
        rad: (0.191, 0.002),
    },
    Baselines {
        no_def_acc: (0.92, 0.00),
        adv_acc: (0.88, 0.00),
        adv: (0.82, 0.00),
        dp_acc: (0.38, 0.00),
        wm_acc: (0.82, 0.00),
        wm: (0.97, 0.02),
        rad_acc: (0.85, 0.00),
        rad: (0.202, 0.001),
    },
];

/// Combined-run summaries with DPSGD: (acc, wm), (acc, rad).
const WITH_DP: [(Ms, Ms, Ms, Ms); 3] = [
    ((0.97, 0.00), (0.36, 0.06), (0.97, 0.00), (0.091, 0.01)),
    ((0.86, 0.00), (0.30, 0.05), (0.84, 0.01), (0.11, 0.01)),
    ((0.38, 0.01), (0.12, 0.01), (0.35, 0.01), (0.19, 0.01)),
];

/// Combined-run summaries with adversarial training: (acc, wm, adv),
/// (acc, rad, adv).
const WITH_ADV: [([Ms; 3], [Ms; 3]); 3] = [
    (
        [(0.97, 0.02), (0.99, 0.01), (0.88, 0.09)],
        [(0.94, 0.01), (0.001, 0.001), (0.95, 0.01)],
    ),
    (
        [(0.80, 0.06), (0.99, 0.00), (0.51, 0.11)],
        [(0.87, 0.02), (0.000, 0.001), (0.69, 0.02)],
    ),
    (
        [(0.78, 0.00), (0.97, 0.01), (0.65, 0.01)],
        [(0.81, 0.01), (0.003, 0.002), (0.81, 0.01)],
    ),
];

fn sample(metric: MetricKind, ms: Ms, n: usize, context: &str) -> Result<MetricSample> {
    MetricSample::from_moments(metric, ms.0, ms.1, n, context)
}

fn base(metric: MetricKind, ms: Ms, mechanism: Mechanism, dataset: &str) -> Result<MetricSample> {
    sample(metric, ms, BASELINE_RUNS, &format!("{mechanism} / {dataset}"))
}

fn combined(metric: MetricKind, ms: Ms, pair: [Mechanism; 2], dataset: &str) -> Result<MetricSample> {
    sample(metric, ms, PAIR_RUNS, &format!("{}+{} / {dataset}", pair[0], pair[1]))
}

/// All 18 (pair, dataset) cells: for each dataset, WM, RADDATA and DI with
/// DPSGD, then with adversarial training.
///
/// DI leaves training untouched, so its pairs take accuracy (and robust
/// accuracy) from the base mechanism's own runs, and the DI baseline
/// accuracy is the unprotected model's.
pub fn published_samples() -> Result<Vec<PairSamples>> {
    use Mechanism::*;
    use MetricKind as K;
    let mut out = Vec::with_capacity(18);
    for (d, dataset) in DATASETS.iter().enumerate() {
        let b = &BASELINES[d];
        let (dp_wm_acc, dp_wm, dp_rad_acc, dp_rad) = WITH_DP[d];
        let di_floor = (DI_FLOOR, 0.0);
        let cell = |pair: [Mechanism; 2], baselines, combined| PairSamples {
            pair,
            dataset: dataset.to_string(),
            baselines,
            combined,
            epsilon_budget: None,
        };

        let p = [Dp, Wm];
        out.push(cell(
            p,
            vec![
                base(K::Acc, b.dp_acc, Dp, dataset)?,
                base(K::Acc, b.wm_acc, Wm, dataset)?,
                base(K::Wm, b.wm, Wm, dataset)?,
            ],
            vec![
                combined(K::Acc, dp_wm_acc, p, dataset)?,
                combined(K::Wm, dp_wm, p, dataset)?,
            ],
        ));
        let p = [Dp, Rad];
        out.push(cell(
            p,
            vec![
                base(K::Acc, b.dp_acc, Dp, dataset)?,
                base(K::Acc, b.rad_acc, Rad, dataset)?,
                base(K::Rad, b.rad, Rad, dataset)?,
            ],
            vec![
                combined(K::Acc, dp_rad_acc, p, dataset)?,
                combined(K::Rad, dp_rad, p, dataset)?,
            ],
        ));
        let p = [Dp, Di];
        out.push(cell(
            p,
            vec![
                base(K::Acc, b.dp_acc, Dp, dataset)?,
                base(K::Acc, b.no_def_acc, Di, dataset)?,
                base(K::Di, di_floor, Di, dataset)?,
            ],
            vec![
                combined(K::Acc, b.dp_acc, p, dataset)?,
                combined(K::Di, di_floor, p, dataset)?,
            ],
        ));

        let (wm_row, rad_row) = WITH_ADV[d];
        let p = [Adv, Wm];
        out.push(cell(
            p,
            vec![
                base(K::Acc, b.adv_acc, Adv, dataset)?,
                base(K::Adv, b.adv, Adv, dataset)?,
                base(K::Acc, b.wm_acc, Wm, dataset)?,
                base(K::Wm, b.wm, Wm, dataset)?,
            ],
            vec![
                combined(K::Acc, wm_row[0], p, dataset)?,
                combined(K::Wm, wm_row[1], p, dataset)?,
                combined(K::Adv, wm_row[2], p, dataset)?,
            ],
        ));
        let p = [Adv, Rad];
        out.push(cell(
            p,
            vec![
                base(K::Acc, b.adv_acc, Adv, dataset)?,
                base(K::Adv, b.adv, Adv, dataset)?,
                base(K::Acc, b.rad_acc, Rad, dataset)?,
                base(K::Rad, b.rad, Rad, dataset)?,
            ],
            vec![
                combined(K::Acc, rad_row[0], p, dataset)?,
                combined(K::Rad, rad_row[1], p, dataset)?,
                combined(K::Adv, rad_row[2], p, dataset)?,
            ],
        ));
        let p = [Adv, Di];
        out.push(cell(
            p,
            vec![
                base(K::Acc, b.adv_acc, Adv, dataset)?,
                base(K::Adv, b.adv, Adv, dataset)?,
                base(K::Acc, b.no_def_acc, Di, dataset)?,
                base(K::Di, di_floor, Di, dataset)?,
            ],
            vec![
                combined(K::Acc, b.adv_acc, p, dataset)?,
                combined(K::Adv, b.adv, p, dataset)?,
                combined(K::Di, di_floor, p, dataset)?,
            ],
        ));
    }
    Ok(out)
}
