//! Declarative experiment harness around `conflicts-core`: TOML configs,
//! resumable seeded run matrices, sweeps, the disjoint-chunk dataset
//! inference scenario and report rendering.

// Range checks are written `!(x > 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod difp;
pub mod matrix;
pub mod pool;
pub mod records;
pub mod report;
pub mod sweep;

pub use config::{parse_config, ExperimentConfig};
pub use difp::{run_di_false_positive, DiFalsePositive};
pub use matrix::{assess_file, run_matrix, MatrixOptions, MatrixResult};
pub use records::{RecordFile, RunRecord};
pub use report::{render_report, Format};
pub use sweep::{sweep_hyperparams, Axis, SweepResult};
