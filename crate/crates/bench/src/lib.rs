//! Fixtures shared by the benchmarks.

use conflicts_core::data::{SynthKind, SynthSpec};
use conflicts_core::{synth_dataset, LabeledSet, ParamModel, Tensor, Topology};

/// Reference CNN on 10×10 blob images with ten classes.
pub fn reference_model(seed: u64) -> ParamModel {
    let topo = Topology::reference(&[1, 10, 10], 10).expect("valid reference topology");
    ParamModel::new(topo, seed).expect("model")
}

/// Training split of the desk task.
pub fn blobs(n: usize) -> LabeledSet {
    synth_dataset(&SynthSpec::new(SynthKind::GaussianBlobs, n, 10, 10, 1))
        .expect("synthetic data")
        .0
}

/// The first `n` records of `set` as a batch tensor and labels.
pub fn batch(set: &LabeledSet, n: usize) -> (Tensor, Vec<usize>) {
    let idx: Vec<usize> = (0..n).collect();
    let sub = set.subset(&idx, set.role());
    (sub.to_tensor().expect("tensor"), sub.labels())
}
