use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabeledSet, Record, Role};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// `[1, side, side]` images: a sparse binary prototype per class plus
    /// Gaussian pixel noise.
    GaussianBlobs,
    /// Points in `[0, 1]^2` along interleaved spiral arms.
    TwoSpirals,
}

fn default_side() -> usize {
    10
}
fn default_noise() -> f64 {
    0.5
}
fn default_density() -> f64 {
    0.25
}
fn default_scale() -> f64 {
    1.0
}

/// Parameters of a synthetic train/test pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    /// Source name recorded on both sets; defaults to the kind.
    #[serde(default)]
    pub name: Option<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
    #[serde(default = "default_side")]
    pub side: usize,
    /// Standard deviation of the per-pixel (per-coordinate) noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Fraction of foreground pixels in each class prototype.
    #[serde(default = "default_density")]
    pub density: f64,
    /// Multiplier applied to `noise` for the test split only.
    #[serde(default = "default_scale")]
    pub test_noise_scale: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, n_train: usize, n_test: usize, classes: usize, seed: u64) -> Self {
        Self {
            kind,
            name: None,
            n_train,
            n_test,
            classes,
            side: default_side(),
            noise: default_noise(),
            density: default_density(),
            test_noise_scale: default_scale(),
            seed,
        }
    }

    pub fn source_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            match self.kind {
                SynthKind::GaussianBlobs => "gaussian-blobs",
                SynthKind::TwoSpirals => "two-spirals",
            }
            .to_string()
        })
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self.kind {
            SynthKind::GaussianBlobs => vec![1, self.side, self.side],
            SynthKind::TwoSpirals => vec![2],
        }
    }
}

const FOREGROUND: f64 = 0.85;
const BACKGROUND: f64 = 0.15;

/// Deterministic, class-balanced (±1) train and test sets.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(LabeledSet, LabeledSet)> {
    if spec.classes < 2 {
        return Err(Error::input("synthetic data needs at least two classes"));
    }
    if spec.n_train < spec.classes {
        return Err(Error::input(format!(
            "{} training records cannot cover {} classes",
            spec.n_train, spec.classes
        )));
    }
    if !(spec.noise >= 0.0 && spec.test_noise_scale >= 0.0) {
        return Err(Error::input("noise levels must be non-negative"));
    }
    if spec.kind == SynthKind::GaussianBlobs && (spec.side == 0 || !(0.0..=1.0).contains(&spec.density)) {
        return Err(Error::input("blob images need side > 0 and density in [0, 1]"));
    }
    let prototypes = prototypes(spec);
    let make = |n: usize, noise: f64, role: Role, tag: &str| {
        let mut rng = rng::stream(spec.seed, tag, 0);
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
        labels.shuffle(&mut rng);
        let records = labels
            .into_iter()
            .map(|label| Record {
                input: sample(spec, &prototypes, label, noise, &mut rng),
                label,
            })
            .collect();
        LabeledSet::new(records, spec.input_shape(), spec.classes, role, spec.source_name())
    };
    Ok((
        make(spec.n_train, spec.noise, Role::Train, "synth-train")?,
        make(
            spec.n_test,
            spec.noise * spec.test_noise_scale,
            Role::Test,
            "synth-test",
        )?,
    ))
}

fn prototypes(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(spec.seed, "synth-prototypes", 0);
    match spec.kind {
        SynthKind::GaussianBlobs => {
            let pixels = spec.side * spec.side;
            (0..spec.classes)
                .map(|_| {
                    (0..pixels)
                        .map(|_| {
                            if rng.random_bool(spec.density) {
                                FOREGROUND
                            } else {
                                BACKGROUND
                            }
                        })
                        .collect()
                })
                .collect()
        }
        // One phase offset per arm.
        SynthKind::TwoSpirals => (0..spec.classes)
            .map(|k| vec![std::f64::consts::TAU * k as f64 / spec.classes as f64])
            .collect(),
    }
}

fn sample(spec: &SynthSpec, prototypes: &[Vec<f64>], label: usize, noise: f64, rng: &mut rng::Rng) -> Vec<f64> {
    match spec.kind {
        SynthKind::GaussianBlobs => prototypes[label]
            .iter()
            .map(|p| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                (p + noise * z).clamp(0.0, 1.0)
            })
            .collect(),
        SynthKind::TwoSpirals => {
            let t: f64 = rng.random_range(0.05..1.0);
            let angle = prototypes[label][0] + 3.0 * std::f64::consts::PI * t;
            let mut gauss = || -> f64 { StandardNormal.sample(&mut *rng) };
            vec![
                (0.5 + 0.45 * t * angle.cos() + noise * gauss()).clamp(0.0, 1.0),
                (0.5 + 0.45 * t * angle.sin() + noise * gauss()).clamp(0.0, 1.0),
            ]
        }
    }
}
