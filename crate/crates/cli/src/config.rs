//! Experiment configuration: TOML parsing, defaults, validation and the
//! stable config hash.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use conflicts_core::data::{load_dataset, synth_dataset, DatasetFiles, SynthSpec};
use conflicts_core::{
    AdvSpec, BaseMechanism, ComposeMode, Composition, DiSpec, DpSpec, LabeledSet, LayerSpec, Mechanism, MechanismSpecs,
    Ownership, RadSpec, ScheduleKind, StatsPolicy, ThresholdPolicy, Topology, TrainPlan, WmSpec,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where records come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth(SynthSpec),
    Files(DatasetFiles),
}

impl DataSource {
    pub fn load(&self, base_dir: &Path) -> anyhow::Result<(LabeledSet, LabeledSet)> {
        Ok(match self {
            DataSource::Synth(spec) => synth_dataset(spec)?,
            DataSource::Files(files) => {
                let rebase = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                let files = DatasetFiles {
                    train: rebase(&files.train),
                    test: rebase(&files.test),
                    train_labels: files.train_labels.as_ref().map(rebase),
                    test_labels: files.test_labels.as_ref().map(rebase),
                    ..files.clone()
                };
                load_dataset(&files).with_context(|| format!("loading {}", files.train.display()))?
            }
        })
    }

    fn name(&self) -> String {
        match self {
            DataSource::Synth(spec) => spec.source_name(),
            DataSource::Files(files) => files
                .train
                .file_stem()
                .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr_initial")]
    pub lr_initial: f64,
    #[serde(default = "d_lr_max")]
    pub lr_max: f64,
    #[serde(default = "d_schedule")]
    pub schedule_kind: ScheduleKind,
}

fn d_epochs() -> usize {
    30
}
fn d_batch() -> usize {
    50
}
fn d_lr_initial() -> f64 {
    0.01
}
fn d_lr_max() -> f64 {
    0.2
}
fn d_schedule() -> ScheduleKind {
    ScheduleKind::OneCycle
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr_initial: d_lr_initial(),
            lr_max: d_lr_max(),
            schedule_kind: d_schedule(),
        }
    }
}

impl TrainConfig {
    /// The plan with a placeholder seed; every run derives its own.
    pub fn plan(&self) -> TrainPlan {
        TrainPlan {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_initial: self.lr_initial,
            lr_max: self.lr_max,
            schedule_kind: self.schedule_kind,
            seed: 0,
        }
    }
}

/// DPSGD settings; σ and q are derived per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    #[serde(default = "d_clip")]
    pub clip_c: f64,
    #[serde(default = "d_delta")]
    pub delta: f64,
    #[serde(default = "d_epsilon")]
    pub target_epsilon: f64,
}

fn d_clip() -> f64 {
    1.0
}
fn d_delta() -> f64 {
    1e-6
}
fn d_epsilon() -> f64 {
    3.0
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            clip_c: d_clip(),
            delta: d_delta(),
            target_epsilon: d_epsilon(),
        }
    }
}

impl DpConfig {
    fn spec(&self) -> DpSpec {
        DpSpec {
            clip_c: self.clip_c,
            noise_sigma: 1.0,
            delta: self.delta,
            target_epsilon: self.target_epsilon,
            sample_rate_q: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvConfig {
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_pgd_steps")]
    pub steps: usize,
    /// Defaults to `2.5 γ / steps`.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "d_true")]
    pub random_start: bool,
    #[serde(default)]
    pub gamma_warmup_epochs: usize,
}

fn d_gamma() -> f64 {
    0.25
}
fn d_pgd_steps() -> usize {
    AdvSpec::DEFAULT_STEPS
}
fn d_true() -> bool {
    true
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            gamma: d_gamma(),
            steps: d_pgd_steps(),
            step_size: None,
            random_start: true,
            gamma_warmup_epochs: 0,
        }
    }
}

impl AdvConfig {
    fn spec(&self) -> AdvSpec {
        AdvSpec {
            gamma: self.gamma,
            steps: self.steps,
            step_size: self.step_size.unwrap_or(2.5 * self.gamma / self.steps.max(1) as f64),
            random_start: self.random_start,
            gamma_warmup_epochs: self.gamma_warmup_epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WmConfig {
    #[serde(default = "d_trigger_size")]
    pub trigger_size: usize,
    #[serde(default = "d_one")]
    pub trigger_repeat: usize,
    #[serde(default)]
    pub tolerated_error: Option<f64>,
}

fn d_trigger_size() -> usize {
    100
}
fn d_one() -> usize {
    1
}

impl Default for WmConfig {
    fn default() -> Self {
        Self {
            trigger_size: d_trigger_size(),
            trigger_repeat: 1,
            tolerated_error: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadConfig {
    #[serde(default = "d_mark_fraction")]
    pub mark_fraction: f64,
    #[serde(default = "d_budget")]
    pub perturb_budget: f64,
    #[serde(default = "d_craft_steps")]
    pub craft_steps: usize,
    /// Defaults to `perturb_budget / 4`.
    #[serde(default)]
    pub craft_rate: Option<f64>,
    #[serde(default)]
    pub carrier_seed: u64,
}

fn d_mark_fraction() -> f64 {
    0.1
}
fn d_budget() -> f64 {
    0.25
}
fn d_craft_steps() -> usize {
    10
}

impl Default for RadConfig {
    fn default() -> Self {
        Self {
            mark_fraction: d_mark_fraction(),
            perturb_budget: d_budget(),
            craft_steps: d_craft_steps(),
            craft_rate: None,
            carrier_seed: 0,
        }
    }
}

impl RadConfig {
    fn spec(&self) -> RadSpec {
        RadSpec {
            mark_fraction: self.mark_fraction,
            carrier_seed: self.carrier_seed,
            perturb_budget: self.perturb_budget,
            craft_steps: self.craft_steps,
            craft_rate: self.craft_rate.unwrap_or(self.perturb_budget / 4.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiConfig {
    #[serde(default = "d_walks")]
    pub walk_count: usize,
    #[serde(default = "d_walk_step")]
    pub walk_step: f64,
    #[serde(default = "d_hops")]
    pub max_hops: usize,
    #[serde(default = "d_ver")]
    pub ver_subset_size: usize,
    #[serde(default = "d_fit")]
    pub fit_size: usize,
}

fn d_walks() -> usize {
    20
}
fn d_walk_step() -> f64 {
    0.05
}
fn d_hops() -> usize {
    30
}
fn d_ver() -> usize {
    200
}
fn d_fit() -> usize {
    400
}

impl Default for DiConfig {
    fn default() -> Self {
        Self {
            walk_count: d_walks(),
            walk_step: d_walk_step(),
            max_hops: d_hops(),
            ver_subset_size: d_ver(),
            fit_size: d_fit(),
        }
    }
}

impl DiConfig {
    pub fn spec(&self) -> DiSpec {
        DiSpec {
            walk_count: self.walk_count,
            walk_step: self.walk_step,
            max_hops: self.max_hops,
            ver_subset_size: self.ver_subset_size,
            fit_size: self.fit_size,
        }
    }
}

/// A full experiment. Mechanism sections missing from the file take the
/// default operating point when the mechanism is part of the pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub dataset: DataSource,
    /// Out-of-distribution source for triggers; by default the dataset's
    /// generator under another seed.
    #[serde(default)]
    pub trigger_source: Option<DataSource>,
    /// Hidden layers; the reference topology when absent.
    #[serde(default)]
    pub layers: Option<Vec<LayerSpec>>,
    #[serde(default)]
    pub train: TrainConfig,
    pub pair: Vec<Mechanism>,
    #[serde(default)]
    pub mode: ComposeMode,
    /// Seeds per combined run.
    #[serde(default = "d_pair_repeats")]
    pub repeats: usize,
    /// Seeds per single-mechanism baseline.
    #[serde(default = "d_baseline_repeats")]
    pub baseline_repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dp: Option<DpConfig>,
    #[serde(default)]
    pub adv: Option<AdvConfig>,
    #[serde(default)]
    pub wm: Option<WmConfig>,
    #[serde(default)]
    pub rad: Option<RadConfig>,
    #[serde(default)]
    pub di: Option<DiConfig>,
    #[serde(default)]
    pub thresholds: ThresholdPolicy,
    #[serde(default)]
    pub stats: StatsPolicy,
    /// Record file; relative paths resolve against the config's directory.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn d_pair_repeats() -> usize {
    10
}
fn d_baseline_repeats() -> usize {
    5
}

impl ExperimentConfig {
    /// Parses TOML text; unknown keys and bad values are reported with
    /// their key path.
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let de = toml::Deserializer::new(text);
        let mut config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("config key `{path}`: {}", e.into_inner().message().trim())
        })?;
        config.apply_defaults();
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Fills every section the pair needs with its default operating point.
    pub fn apply_defaults(&mut self) {
        for m in self.pair.clone() {
            match m {
                Mechanism::Dp => {
                    self.dp.get_or_insert_with(DpConfig::default);
                }
                Mechanism::Adv => {
                    self.adv.get_or_insert_with(AdvConfig::default);
                }
                Mechanism::Wm => {
                    self.wm.get_or_insert_with(WmConfig::default);
                }
                Mechanism::Rad => {
                    self.rad.get_or_insert_with(RadConfig::default);
                }
                Mechanism::Di => {
                    self.di.get_or_insert_with(DiConfig::default);
                }
            }
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.repeats < 2 || self.baseline_repeats < 2 {
            bail!("config key `repeats`: at least 2 seeds are needed for the statistics");
        }
        self.composition()?.validate()?;
        self.train.plan().validate().context("config key `train`")?;
        self.thresholds.validate().context("config key `thresholds`")?;
        self.stats.validate().context("config key `stats`")?;
        let specs = self.specs();
        if let Some(s) = &specs.adv {
            s.validate().context("config key `adv`")?;
        }
        if let Some(s) = &specs.wm {
            s.validate().context("config key `wm`")?;
        }
        if let Some(s) = &specs.rad {
            s.validate().context("config key `rad`")?;
        }
        if let Some(s) = &specs.di {
            s.validate().context("config key `di`")?;
        }
        if let Some(dp) = &self.dp {
            let mut spec = dp.spec();
            spec.noise_sigma = 1.0;
            spec.validate().context("config key `dp`")?;
            if !(dp.target_epsilon > 0.0) {
                bail!("config key `dp.target_epsilon`: must be positive");
            }
        }
        Ok(())
    }

    /// The pair as a composition: one base mechanism (DPSGD or adversarial
    /// training) and one ownership mechanism.
    pub fn composition(&self) -> anyhow::Result<Composition> {
        let mut base = BaseMechanism::None;
        let mut ownership = Ownership::None;
        for m in &self.pair {
            match m {
                Mechanism::Dp | Mechanism::Adv if base != BaseMechanism::None => {
                    bail!("config key `pair`: at most one of dp and adv")
                }
                Mechanism::Dp => base = BaseMechanism::Dp,
                Mechanism::Adv => base = BaseMechanism::Adv,
                _ if ownership != Ownership::None => bail!("config key `pair`: at most one of wm, rad and di"),
                Mechanism::Wm => ownership = Ownership::Wm,
                Mechanism::Rad => ownership = Ownership::Rad,
                Mechanism::Di => ownership = Ownership::Di,
            }
        }
        if self.pair.len() != 2 {
            bail!("config key `pair`: exactly two mechanisms are compared");
        }
        Ok(Composition::new(base, ownership, self.mode))
    }

    /// The pair in base-first order.
    pub fn mechanisms(&self) -> anyhow::Result<[Mechanism; 2]> {
        let m = self.composition()?.mechanisms();
        Ok([m[0], m[1]])
    }

    pub fn specs(&self) -> MechanismSpecs {
        MechanismSpecs {
            dp: self.dp.as_ref().map(DpConfig::spec),
            adv: self.adv.as_ref().map(AdvConfig::spec),
            wm: self.wm.as_ref().map(|w| WmSpec {
                trigger_size: w.trigger_size,
                mix_mode: conflicts_core::MixMode::Joint,
                tolerated_error: w.tolerated_error,
                trigger_repeat: w.trigger_repeat,
            }),
            rad: self.rad.as_ref().map(RadConfig::spec),
            di: self.di.as_ref().map(DiConfig::spec),
        }
    }

    pub fn topology(&self, input_shape: &[usize], num_classes: usize) -> anyhow::Result<Topology> {
        Ok(match &self.layers {
            Some(layers) => Topology::new(input_shape.to_vec(), layers.clone(), num_classes)?,
            None => Topology::reference(input_shape, num_classes)?,
        })
    }

    pub fn dataset_name(&self) -> String {
        self.dataset.name()
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            let pair: Vec<&str> = self.pair.iter().map(|m| m.name()).collect();
            format!("{} / {}", pair.join("+"), self.dataset_name())
        })
    }

    /// Trigger source: the configured one, or the dataset generator under a
    /// different seed and name.
    pub fn trigger_source(&self) -> anyhow::Result<DataSource> {
        if let Some(src) = &self.trigger_source {
            return Ok(src.clone());
        }
        match &self.dataset {
            DataSource::Synth(spec) => {
                let mut ood = spec.clone();
                ood.seed = spec.seed.wrapping_add(0x9e37_79b9);
                ood.name = Some(format!("{}-ood", spec.source_name()));
                let size = self
                    .wm
                    .as_ref()
                    .map_or(WmConfig::default().trigger_size, |w| w.trigger_size);
                ood.n_train = size.max(ood.classes);
                ood.n_test = ood.classes;
                Ok(DataSource::Synth(ood))
            }
            DataSource::Files(_) => bail!("config key `trigger_source`: required for file datasets"),
        }
    }

    /// SHA-256 of the canonical JSON form (object keys sorted).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Record file location for a config read from `config_path`.
    pub fn output_path(&self, config_path: &Path) -> PathBuf {
        let dir = config_path.parent().unwrap_or(Path::new("."));
        match &self.output {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => dir.join(p),
            None => config_path.with_extension("jsonl"),
        }
    }
}

pub fn parse_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
pair = ["dp", "wm"]
[dataset.synth]
kind = "gaussian-blobs"
n_train = 200
n_test = 50
classes = 4
seed = 1
"#;

    #[test]
    fn minimal_config_gets_operating_point() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.dp.as_ref().unwrap().target_epsilon, 3.0);
        assert_eq!(c.dp.as_ref().unwrap().clip_c, 1.0);
        assert_eq!(c.wm.as_ref().unwrap().trigger_size, 100);
        assert!(c.adv.is_none());
        assert_eq!((c.repeats, c.baseline_repeats), (10, 5));
    }

    #[test]
    fn unknown_key_names_its_path() {
        let text = MINIMAL.replace("seed = 1", "seed = 1\nwobble = 2");
        let err = format!("{:#}", ExperimentConfig::from_toml(&text).unwrap_err());
        assert!(err.contains("dataset.synth"), "{err}");
        assert!(err.contains("wobble"), "{err}");
    }

    #[test]
    fn hash_survives_round_trip() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c.hash(), back.hash());
    }

    #[test]
    fn invalid_pairs() {
        for pair in [r#"["dp", "adv"]"#, r#"["wm", "rad"]"#, r#"["wm"]"#] {
            let text = MINIMAL.replace(r#"["dp", "wm"]"#, pair);
            assert!(ExperimentConfig::from_toml(&text).is_err(), "{pair}");
        }
        let relaxed_di = MINIMAL.replace(r#"["dp", "wm"]"#, r#"["dp", "di"]"#) + "mode = \"relaxed\"\n";
        assert!(ExperimentConfig::from_toml(&relaxed_di).is_err());
    }
}
