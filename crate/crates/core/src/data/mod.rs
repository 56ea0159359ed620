//! Labeled datasets, synthetic generators, file loaders and splits.

mod csv;
mod idx;
mod synth;

pub use self::csv::read_csv;
pub use self::idx::{read_idx, read_idx_pair, write_idx_pair};
pub use self::synth::{synth_dataset, SynthKind, SynthSpec};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Purpose of a set within an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Test,
    Trigger,
    Marked,
    Verification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub input: Vec<f64>,
    pub label: usize,
}

/// Records sharing one input shape, with a role and a source name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    records: Vec<Record>,
    input_shape: Vec<usize>,
    num_classes: usize,
    role: Role,
    source_name: String,
}

impl LabeledSet {
    pub fn new(
        records: Vec<Record>,
        input_shape: Vec<usize>,
        num_classes: usize,
        role: Role,
        source_name: impl Into<String>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::input("a labeled set needs at least two classes"));
        }
        let width: usize = input_shape.iter().product();
        for (i, r) in records.iter().enumerate() {
            if r.input.len() != width {
                return Err(Error::Shape {
                    expected: input_shape.clone(),
                    actual: vec![r.input.len()],
                });
            }
            if r.label >= num_classes {
                return Err(Error::input(format!(
                    "record {i} has label {} outside [0, {num_classes})",
                    r.label
                )));
            }
            if r.input.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    index: i,
                    message: "non-finite input".into(),
                });
            }
        }
        Ok(Self {
            records,
            input_shape,
            num_classes,
            role,
            source_name: source_name.into(),
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn inputs(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.input.as_slice()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Records at `indices`, in that order, under a new role.
    pub fn subset(&self, indices: &[usize], role: Role) -> Self {
        Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            role,
            source_name: self.source_name.clone(),
        }
    }

    /// Concatenation of `self` and `other` keeping `self`'s role and name.
    pub fn union(&self, other: &LabeledSet) -> Result<Self> {
        if other.input_shape != self.input_shape || other.num_classes != self.num_classes {
            return Err(Error::input(format!(
                "cannot merge `{}` ({:?}, {} classes) into `{}` ({:?}, {} classes)",
                other.source_name,
                other.input_shape,
                other.num_classes,
                self.source_name,
                self.input_shape,
                self.num_classes
            )));
        }
        let mut merged = self.clone();
        merged.records.extend(other.records.iter().cloned());
        Ok(merged)
    }

    /// Replaces the records at the given positions.
    pub fn replace(&mut self, replacements: impl IntoIterator<Item = (usize, Vec<f64>)>) -> Result<()> {
        let width: usize = self.input_shape.iter().product();
        for (i, input) in replacements {
            if input.len() != width {
                return Err(Error::Shape {
                    expected: self.input_shape.clone(),
                    actual: vec![input.len()],
                });
            }
            self.records
                .get_mut(i)
                .ok_or_else(|| Error::input(format!("record index {i} out of range")))?
                .input = input;
        }
        Ok(())
    }

    /// Inputs stacked as a `[len, ..input_shape]` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::stack(&self.inputs(), &self.input_shape)
    }

    /// Number of records per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }
}

/// On-disk dataset formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Idx,
    Csv,
}

/// File locations of a train/test dataset. IDX needs separate image and
/// label files; CSV keeps labels in the first column.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFiles {
    pub format: Format,
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default)]
    pub num_classes: Option<usize>,
}

/// Loads a (train, test) pair. Pixel values land in `[0, 1]`.
pub fn load_dataset(files: &DatasetFiles) -> Result<(LabeledSet, LabeledSet)> {
    let load = |data: &Path, labels: Option<&PathBuf>, role| match files.format {
        Format::Csv => read_csv(data, role, files.num_classes),
        Format::Idx => {
            let labels = labels.ok_or_else(|| Error::config("IDX datasets need a label file per split"))?;
            read_idx_pair(data, labels, role, files.num_classes)
        }
    };
    let train = load(&files.train, files.train_labels.as_ref(), Role::Train)?;
    let test = load(&files.test, files.test_labels.as_ref(), Role::Test)?;
    if train.input_shape() != test.input_shape() {
        return Err(Error::input(format!(
            "train shape {:?} differs from test shape {:?}",
            train.input_shape(),
            test.input_shape()
        )));
    }
    let classes = train.num_classes().max(test.num_classes());
    Ok((train.with_classes(classes), test.with_classes(classes)))
}

impl LabeledSet {
    fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }
}

/// Samples `size` out-of-distribution records without replacement and gives
/// each an independent uniform label in `[0, m)`.
pub fn build_trigger_set(ood_source: &LabeledSet, size: usize, m: usize, seed: u64) -> Result<LabeledSet> {
    if m < 2 {
        return Err(Error::input("trigger labels need at least two classes"));
    }
    if ood_source.len() < size {
        return Err(Error::input(format!(
            "trigger set of {size} requested from a source of {} records",
            ood_source.len()
        )));
    }
    let mut rng = rng::stream(seed, "trigger", 0);
    let picks = rand::seq::index::sample(&mut rng, ood_source.len(), size);
    let records = picks
        .iter()
        .map(|i| Record {
            input: ood_source.records[i].input.clone(),
            label: rng.random_range(0..m),
        })
        .collect();
    Ok(LabeledSet {
        records,
        input_shape: ood_source.input_shape.clone(),
        num_classes: m,
        role: Role::Trigger,
        source_name: ood_source.source_name.clone(),
    })
}

/// Nearest-neighbour resampling of `[c, h, w]` inputs to a new shape; the
/// channel count is adapted by averaging (to one channel) or replication.
pub fn resize_inputs(set: &LabeledSet, shape: &[usize]) -> Result<LabeledSet> {
    let (&[sc, sh, sw], &[tc, th, tw]) = (set.input_shape(), shape) else {
        return Err(Error::input("resizing needs [channels, height, width] shapes"));
    };
    if tc != sc && tc != 1 && sc != 1 {
        return Err(Error::input(format!("cannot map {sc} channels onto {tc}")));
    }
    let records = set
        .records
        .iter()
        .map(|r| {
            let pixel = |c: usize, y: usize, x: usize| r.input[(c * sh + y) * sw + x];
            let mut out = Vec::with_capacity(tc * th * tw);
            for c in 0..tc {
                for y in 0..th {
                    for x in 0..tw {
                        let (sy, sx) = (y * sh / th, x * sw / tw);
                        let v = if tc == sc {
                            pixel(c, sy, sx)
                        } else if sc == 1 {
                            pixel(0, sy, sx)
                        } else {
                            (0..sc).map(|k| pixel(k, sy, sx)).sum::<f64>() / sc as f64
                        };
                        out.push(v);
                    }
                }
            }
            Record {
                input: out,
                label: r.label,
            }
        })
        .collect();
    Ok(LabeledSet {
        records,
        input_shape: shape.to_vec(),
        ..set.clone()
    })
}

/// Two disjoint random halves of a training set.
#[derive(Clone, Debug)]
pub struct ChunkSplit {
    pub chunk_a: LabeledSet,
    pub chunk_b: LabeledSet,
    pub seed: u64,
}

/// Splits `train` into halves; with an odd count chunk A gets the extra record.
pub fn split_chunks(train: &LabeledSet, seed: u64) -> Result<ChunkSplit> {
    if train.len() < 2 {
        return Err(Error::input("splitting needs at least two records"));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng::stream(seed, "chunks", 0));
    let cut = train.len().div_ceil(2);
    Ok(ChunkSplit {
        chunk_a: train.subset(&order[..cut], train.role()),
        chunk_b: train.subset(&order[cut..], train.role()),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> LabeledSet {
        let records = (0..n)
            .map(|i| Record {
                input: vec![i as f64],
                label: i % 2,
            })
            .collect();
        LabeledSet::new(records, vec![1], 2, Role::Train, "toy").unwrap()
    }

    fn sorted_inputs(sets: &[&LabeledSet]) -> Vec<f64> {
        let mut v: Vec<f64> = sets.iter().flat_map(|s| s.records.iter().map(|r| r.input[0])).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn chunks_partition_input() {
        for (n, a, b) in [(10, 5, 5), (11, 6, 5)] {
            let set = toy(n);
            let split = split_chunks(&set, 4).unwrap();
            assert_eq!((split.chunk_a.len(), split.chunk_b.len()), (a, b));
            assert_eq!(sorted_inputs(&[&split.chunk_a, &split.chunk_b]), sorted_inputs(&[&set]));
        }
        assert!(split_chunks(&toy(1), 0).is_err());
    }

    #[test]
    fn trigger_set_sizes() {
        let src = toy(150);
        let t = build_trigger_set(&src, 100, 10, 1).unwrap();
        assert_eq!(t.len(), 100);
        assert_eq!(t.role(), Role::Trigger);
        assert_eq!(t.num_classes(), 10);
        assert!(build_trigger_set(&src, 0, 10, 1).unwrap().is_empty());
        assert!(build_trigger_set(&src, 151, 10, 1).is_err());
    }

    #[test]
    fn trigger_inputs_are_distinct_source_records() {
        let t = build_trigger_set(&toy(50), 50, 3, 2).unwrap();
        assert_eq!(sorted_inputs(&[&t]), sorted_inputs(&[&toy(50)]));
    }

    #[test]
    fn invalid_records_are_rejected() {
        let bad = vec![Record {
            input: vec![0.0],
            label: 2,
        }];
        assert!(LabeledSet::new(bad, vec![1], 2, Role::Train, "x").is_err());
        let wide = vec![Record {
            input: vec![0.0, 1.0],
            label: 0,
        }];
        assert!(matches!(
            LabeledSet::new(wide, vec![1], 2, Role::Train, "x"),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn resize_nearest() {
        let records = vec![Record {
            input: vec![0.0, 1.0, 2.0, 3.0],
            label: 0,
        }];
        let set = LabeledSet::new(records, vec![1, 2, 2], 2, Role::Test, "s").unwrap();
        let up = resize_inputs(&set, &[1, 4, 4]).unwrap();
        assert_eq!(&up.records()[0].input[..4], &[0.0, 0.0, 1.0, 1.0]);
        let rgb = resize_inputs(&set, &[3, 2, 2]).unwrap();
        assert_eq!(rgb.records()[0].input.len(), 12);
    }
}
