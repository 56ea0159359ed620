//! Training small classifiers under pairs of protection mechanisms
//! (DPSGD, adversarial training, trigger-set watermarks, radioactive data,
//! dataset inference) and deciding whether a pair conflicts.

// Range checks are written `!(x > 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adv;
pub mod compose;
pub mod conflict;
pub mod data;
pub mod di;
pub mod dp;
pub mod error;
pub mod model;
pub mod rad;
pub mod replay;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod wm;

pub use adv::{adv_train_epoch, eval_robust_accuracy, pgd_attack, AdvSpec};
pub use compose::{
    compose_training, prepare_marks, BaseMechanism, ComposeData, ComposeMode, Composition, MechanismSpecs, Ownership,
    RadMarks, RunOutcome, UpdateRule,
};
pub use conflict::{
    check_accuracy_bound, decide_conflict, ConflictVerdict, DeltaReport, Direction, DropOutcome, Mechanism, MetricKind,
    MetricSample, PairSamples, StatsPolicy, ThresholdPolicy,
};
pub use data::{build_trigger_set, load_dataset, split_chunks, synth_dataset, ChunkSplit, LabeledSet, Record, Role};
pub use di::{blind_walk_embed, di_pvalue, train_distinguisher, verify_ownership, DiOutcome, DiSpec, Distinguisher};
pub use dp::{account_privacy, calibrate_sigma, dp_train_epoch, dp_train_step, DpSpec, PrivacyBudget};
pub use error::{Error, Result};
pub use model::{backward_grad, forward_eval, per_example_grads, LayerSpec, ParamModel, Topology};
pub use rad::{craft_marks, eval_rad_score, MarkedPairSet, RadSpec};
pub use stats::{tost_equivalence, welch_t, TostResult, WelchResult};
pub use tensor::Tensor;
pub use train::{eval_accuracy, fit, train_epoch, ScheduleKind, TrainPlan};
pub use wm::{embed_watermark_train, eval_wm_accuracy, wm_confidence, MixMode, WmConfidence, WmSpec};
