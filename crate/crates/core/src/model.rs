//! Sequential classifiers with hand-written reverse-mode gradients.
//!
//! A model is a stack of hidden layers followed by an implicit dense
//! classifier head producing `num_classes` logits. Every layer keeps its
//! input activation during the forward pass so that the backward pass can
//! replay it in reverse. The output of the hidden stack (the classifier's
//! input) is the model's feature space.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// One hidden layer of a [`Topology`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Stride-1 "valid" convolution over a `[channels, height, width]` input.
    Conv {
        out_channels: usize,
        kernel: usize,
    },
    /// Non-overlapping max pooling with a square window.
    MaxPool {
        size: usize,
    },
    Relu,
    Flatten,
    /// Fully connected layer; flattens its input implicitly.
    Dense {
        out: usize,
    },
}

/// Architecture descriptor: input shape, hidden layers and class count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl Topology {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, num_classes: usize) -> Result<Self> {
        let topology = Self {
            input_shape,
            layers,
            num_classes,
        };
        topology.resolve()?;
        Ok(topology)
    }

    /// Small reference CNN (two conv blocks and a dense feature layer) for
    /// `[1, h, w]` inputs with `h, w >= 8`; a one-hidden-layer MLP otherwise.
    pub fn reference(input_shape: &[usize], num_classes: usize) -> Result<Self> {
        let layers = match input_shape {
            [_, h, w] if *h >= 8 && *w >= 8 => vec![
                LayerSpec::Conv {
                    out_channels: 6,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv {
                    out_channels: 12,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 32 },
                LayerSpec::Relu,
            ],
            _ => vec![LayerSpec::Dense { out: 32 }, LayerSpec::Relu],
        };
        Self::new(input_shape.to_vec(), layers, num_classes)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn resolve(&self) -> Result<(Vec<Layer>, Vec<Vec<usize>>, usize)> {
        if self.num_classes < 2 {
            return Err(Error::config("a classifier needs at least two classes"));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::config(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut layers = Vec::with_capacity(self.layers.len() + 1);
        let mut shapes = vec![self.input_shape.clone()];
        let mut params = 0;
        let mut current = self.input_shape.clone();
        let head = LayerSpec::Dense { out: self.num_classes };
        for spec in self.layers.iter().chain(std::iter::once(&head)) {
            let (layer, next) = match *spec {
                LayerSpec::Conv { out_channels, kernel } => {
                    let [c, h, w] = current[..] else {
                        return Err(Error::config(format!(
                            "convolution needs a [channels, height, width] input, got {current:?}"
                        )));
                    };
                    if kernel == 0 || kernel > h || kernel > w || out_channels == 0 {
                        return Err(Error::config(format!(
                            "convolution kernel {kernel} does not fit input {current:?}"
                        )));
                    }
                    let next = vec![out_channels, h - kernel + 1, w - kernel + 1];
                    params += 1;
                    (
                        Layer::Conv {
                            in_c: c,
                            h,
                            w,
                            out_c: out_channels,
                            k: kernel,
                            param: params - 1,
                        },
                        next,
                    )
                }
                LayerSpec::MaxPool { size } => {
                    let [c, h, w] = current[..] else {
                        return Err(Error::config(format!(
                            "max pooling needs a [channels, height, width] input, got {current:?}"
                        )));
                    };
                    if size == 0 || size > h || size > w {
                        return Err(Error::config(format!(
                            "pool size {size} does not fit input {current:?}"
                        )));
                    }
                    (Layer::MaxPool { c, h, w, size }, vec![c, h / size, w / size])
                }
                LayerSpec::Relu => (Layer::Relu, current.clone()),
                LayerSpec::Flatten => (Layer::Flatten, vec![current.iter().product()]),
                LayerSpec::Dense { out } => {
                    if out == 0 {
                        return Err(Error::config("dense layer with zero outputs"));
                    }
                    params += 1;
                    (
                        Layer::Dense {
                            input: current.iter().product(),
                            output: out,
                            param: params - 1,
                        },
                        vec![out],
                    )
                }
            };
            layers.push(layer);
            shapes.push(next.clone());
            current = next;
        }
        Ok((layers, shapes, params))
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Dense {
        input: usize,
        output: usize,
        param: usize,
    },
    Conv {
        in_c: usize,
        h: usize,
        w: usize,
        out_c: usize,
        k: usize,
        param: usize,
    },
    MaxPool {
        c: usize,
        h: usize,
        w: usize,
        size: usize,
    },
    Relu,
    Flatten,
}

/// Weight and bias tensors of every parametrized layer, in layer order
/// (`[w0, b0, w1, b1, ...]`). Gradients use the same layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

/// Gradients share the parameter layout.
pub type GradStore = ParamStore;

impl ParamStore {
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    /// Total number of scalar entries.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data().iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.tensors.iter_mut().flat_map(|t| t.data_mut().iter_mut())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().collect()
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &ParamStore, factor: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += factor * y;
            }
        }
    }

    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn weight(&self, param: usize) -> &[f64] {
        self.tensors[2 * param].data()
    }

    fn bias(&self, param: usize) -> &[f64] {
        self.tensors[2 * param + 1].data()
    }

    fn pair_mut(&mut self, param: usize) -> (&mut [f64], &mut [f64]) {
        let (w, b) = self.tensors[2 * param..2 * param + 2].split_at_mut(1);
        (w[0].data_mut(), b[0].data_mut())
    }
}

/// Architecture plus parameters of a classifier.
#[derive(Clone, Debug)]
pub struct ParamModel {
    topology: Topology,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
    params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    topology: Topology,
    params: ParamStore,
}

impl ParamModel {
    /// Initializes weights uniformly in `±sqrt(6 / fan_in)` and biases at zero.
    pub fn new(topology: Topology, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(topology)?;
        let mut rng = rng::stream(seed, "init", 0);
        for layer in &model.layers {
            let (param, fan_in) = match *layer {
                Layer::Dense { input, param, .. } => (param, input),
                Layer::Conv { in_c, k, param, .. } => (param, in_c * k * k),
                _ => continue,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let (w, _) = model.params.pair_mut(param);
            for v in w.iter_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Ok(model)
    }

    /// All parameters zero; every input maps to the uniform distribution.
    pub fn zeroed(topology: Topology) -> Result<Self> {
        let (layers, shapes, _) = topology.resolve()?;
        let mut tensors = Vec::new();
        for layer in &layers {
            match *layer {
                Layer::Dense { input, output, .. } => {
                    tensors.push(Tensor::zeros(vec![output, input]));
                    tensors.push(Tensor::zeros(vec![output]));
                }
                Layer::Conv { in_c, out_c, k, .. } => {
                    tensors.push(Tensor::zeros(vec![out_c, in_c, k, k]));
                    tensors.push(Tensor::zeros(vec![out_c]));
                }
                _ => {}
            }
        }
        Ok(Self {
            topology,
            layers,
            shapes,
            params: ParamStore { tensors },
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn num_classes(&self) -> usize {
        self.topology.num_classes
    }

    pub fn input_len(&self) -> usize {
        self.topology.input_len()
    }

    /// Width of the feature space feeding the classifier head.
    pub fn feature_len(&self) -> usize {
        self.shapes[self.layers.len() - 1].iter().product()
    }

    /// Number of hidden layers in front of the classifier head.
    pub fn hidden_depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces the parameters; shapes must match.
    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        let same = params.tensors.len() == self.params.tensors.len()
            && params
                .tensors
                .iter()
                .zip(&self.params.tensors)
                .all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::input("parameter layout does not match the model"));
        }
        self.params = params;
        Ok(())
    }

    /// Plain gradient step `params -= lr * grad`.
    pub fn sgd_step(&mut self, grad: &GradStore, lr: f64) {
        if lr != 0.0 {
            self.params.add_scaled(grad, -lr);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile {
            topology: self.topology.clone(),
            params: self.params.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        let mut model = Self::zeroed(file.topology)?;
        model.set_params(file.params)?;
        Ok(model)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_len() {
            return Err(Error::Shape {
                expected: self.topology.input_shape.clone(),
                actual: vec![x.len()],
            });
        }
        Ok(())
    }

    /// Activations at every layer boundary; `trace[0]` is the input and the
    /// last entry holds the logits.
    fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let out = self.layer_forward(layer, acts.last().expect("input pushed"));
            acts.push(out);
        }
        acts
    }

    fn layer_forward(&self, layer: &Layer, x: &[f64]) -> Vec<f64> {
        match *layer {
            Layer::Dense { input, output, param } => {
                let w = self.params.weight(param);
                let b = self.params.bias(param);
                (0..output)
                    .map(|o| {
                        let row = &w[o * input..(o + 1) * input];
                        b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
                    })
                    .collect()
            }
            Layer::Conv {
                in_c,
                h,
                w,
                out_c,
                k,
                param,
            } => {
                let weights = self.params.weight(param);
                let bias = self.params.bias(param);
                let (oh, ow) = (h - k + 1, w - k + 1);
                let mut out = vec![0.0; out_c * oh * ow];
                for o in 0..out_c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut s = bias[o];
                            for c in 0..in_c {
                                for u in 0..k {
                                    let xs = &x[(c * h + i + u) * w + j..][..k];
                                    let ws = &weights[((o * in_c + c) * k + u) * k..][..k];
                                    s += xs.iter().zip(ws).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                            out[(o * oh + i) * ow + j] = s;
                        }
                    }
                }
                out
            }
            Layer::MaxPool { c, h, w, size } => {
                let (oh, ow) = (h / size, w / size);
                let mut out = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut m = f64::NEG_INFINITY;
                            for a in 0..size {
                                for b in 0..size {
                                    m = m.max(x[(ch * h + i * size + a) * w + j * size + b]);
                                }
                            }
                            out[(ch * oh + i) * ow + j] = m;
                        }
                    }
                }
                out
            }
            Layer::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            Layer::Flatten => x.to_vec(),
        }
    }

    /// Back-propagates `grad`, the gradient w.r.t. `acts[from]`, down to the
    /// input. Parameter gradients are accumulated into `sink` scaled by its
    /// factor. The input gradient is returned when `want_input` is set.
    fn backprop(
        &self,
        acts: &[Vec<f64>],
        from: usize,
        mut grad: Vec<f64>,
        mut sink: Option<(&mut ParamStore, f64)>,
        want_input: bool,
    ) -> Vec<f64> {
        for l in (0..from).rev() {
            let x = &acts[l];
            let need_dx = l > 0 || want_input;
            grad = match self.layers[l] {
                Layer::Dense { input, output, param } => {
                    if let Some((store, scale)) = sink.as_mut() {
                        let (dw, db) = store.pair_mut(param);
                        for o in 0..output {
                            let g = grad[o] * *scale;
                            if g == 0.0 {
                                continue;
                            }
                            db[o] += g;
                            for (d, xi) in dw[o * input..(o + 1) * input].iter_mut().zip(x) {
                                *d += g * xi;
                            }
                        }
                    }
                    if need_dx {
                        let w = self.params.weight(param);
                        let mut dx = vec![0.0; input];
                        for o in 0..output {
                            let g = grad[o];
                            if g == 0.0 {
                                continue;
                            }
                            for (d, wi) in dx.iter_mut().zip(&w[o * input..(o + 1) * input]) {
                                *d += g * wi;
                            }
                        }
                        dx
                    } else {
                        Vec::new()
                    }
                }
                Layer::Conv {
                    in_c,
                    h,
                    w,
                    out_c,
                    k,
                    param,
                } => {
                    let (oh, ow) = (h - k + 1, w - k + 1);
                    if let Some((store, scale)) = sink.as_mut() {
                        let (dw, db) = store.pair_mut(param);
                        for o in 0..out_c {
                            for i in 0..oh {
                                for j in 0..ow {
                                    let g = grad[(o * oh + i) * ow + j] * *scale;
                                    if g == 0.0 {
                                        continue;
                                    }
                                    db[o] += g;
                                    for c in 0..in_c {
                                        for u in 0..k {
                                            let xs = &x[(c * h + i + u) * w + j..][..k];
                                            let ds = &mut dw[((o * in_c + c) * k + u) * k..][..k];
                                            for (d, xv) in ds.iter_mut().zip(xs) {
                                                *d += g * xv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if need_dx {
                        let weights = self.params.weight(param);
                        let mut dx = vec![0.0; in_c * h * w];
                        for o in 0..out_c {
                            for i in 0..oh {
                                for j in 0..ow {
                                    let g = grad[(o * oh + i) * ow + j];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    for c in 0..in_c {
                                        for u in 0..k {
                                            let ws = &weights[((o * in_c + c) * k + u) * k..][..k];
                                            let ds = &mut dx[(c * h + i + u) * w + j..][..k];
                                            for (d, wv) in ds.iter_mut().zip(ws) {
                                                *d += g * wv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        dx
                    } else {
                        Vec::new()
                    }
                }
                Layer::MaxPool { c, h, w, size } => {
                    if !need_dx {
                        Vec::new()
                    } else {
                        let (oh, ow) = (h / size, w / size);
                        let mut dx = vec![0.0; c * h * w];
                        for ch in 0..c {
                            for i in 0..oh {
                                for j in 0..ow {
                                    let mut best = (f64::NEG_INFINITY, 0);
                                    for a in 0..size {
                                        for b in 0..size {
                                            let idx = (ch * h + i * size + a) * w + j * size + b;
                                            if x[idx] > best.0 {
                                                best = (x[idx], idx);
                                            }
                                        }
                                    }
                                    dx[best.1] += grad[(ch * oh + i) * ow + j];
                                }
                            }
                        }
                        dx
                    }
                }
                Layer::Relu => {
                    for (g, xv) in grad.iter_mut().zip(x) {
                        if *xv <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    grad
                }
                Layer::Flatten => grad,
            };
        }
        grad
    }

    /// Class probabilities for one input.
    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let logits = self.trace(x).pop().expect("logits");
        Ok(softmax(&logits))
    }

    /// Most likely class (first index on ties).
    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.trace(x).pop().expect("logits");
        argmax(&logits)
    }

    /// Cross-entropy loss of one example.
    pub fn loss(&self, x: &[f64], label: usize) -> f64 {
        let logits = self.trace(x).pop().expect("logits");
        cross_entropy(&logits, label).0
    }

    /// Penultimate representation (input of the classifier head).
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut acts = self.trace(x);
        acts.swap_remove(self.layers.len() - 1)
    }

    /// Loss of one example and its gradient w.r.t. the input.
    pub fn input_grad(&self, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        self.check_label(label)?;
        let acts = self.trace(x);
        let (loss, g) = cross_entropy(&acts[self.layers.len()], label);
        if !loss.is_finite() {
            return Err(Error::Numerical {
                index: 0,
                message: "non-finite loss".into(),
            });
        }
        let dx = self.backprop(&acts, self.layers.len(), g, None, true);
        Ok((loss, dx))
    }

    /// Features of `x` together with the vector-Jacobian product of
    /// `feature_grad` w.r.t. the input, computed by `feature_grad_fn` from
    /// the features.
    pub fn feature_vjp<F>(&self, x: &[f64], feature_grad_fn: F) -> (Vec<f64>, Vec<f64>)
    where
        F: FnOnce(&[f64]) -> Vec<f64>,
    {
        let from = self.layers.len() - 1;
        let acts = self.trace(x);
        let feats = acts[from].clone();
        let g = feature_grad_fn(&feats);
        let dx = self.backprop(&acts, from, g, None, true);
        (feats, dx)
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes() {
            return Err(Error::input(format!(
                "label {label} outside [0, {})",
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// Accumulates `scale * dLoss/dParams` for one example into `sink`;
    /// returns the example loss.
    fn accumulate_example(&self, x: &[f64], label: usize, sink: &mut ParamStore, scale: f64) -> f64 {
        let acts = self.trace(x);
        let (loss, g) = cross_entropy(&acts[self.layers.len()], label);
        self.backprop(&acts, self.layers.len(), g, Some((sink, scale)), false);
        loss
    }

    /// Gradient and loss of a single example.
    pub fn example_grad(&self, x: &[f64], label: usize) -> Result<(GradStore, f64)> {
        self.check_input(x)?;
        self.check_label(label)?;
        let mut grad = self.params.zeros_like();
        let loss = self.accumulate_example(x, label, &mut grad, 1.0);
        if !loss.is_finite() {
            return Err(Error::Numerical {
                index: 0,
                message: "non-finite loss".into(),
            });
        }
        Ok((grad, loss))
    }

    /// Mean cross-entropy gradient and mean loss over the given examples.
    pub fn batch_grad(&self, inputs: &[&[f64]], labels: &[usize]) -> Result<(GradStore, f64)> {
        self.check_batch(inputs, labels)?;
        let mut grad = self.params.zeros_like();
        if inputs.is_empty() {
            return Ok((grad, 0.0));
        }
        let scale = 1.0 / inputs.len() as f64;
        let mut total = 0.0;
        for (i, (x, &y)) in inputs.iter().zip(labels).enumerate() {
            let loss = self.accumulate_example(x, y, &mut grad, scale);
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    index: i,
                    message: "non-finite loss".into(),
                });
            }
            total += loss;
        }
        Ok((grad, total * scale))
    }

    /// Gradient of each example's loss, in input order.
    pub fn example_grads(&self, inputs: &[&[f64]], labels: &[usize]) -> Result<Vec<GradStore>> {
        self.check_batch(inputs, labels)?;
        inputs
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (x, &y))| {
                let mut grad = self.params.zeros_like();
                let loss = self.accumulate_example(x, y, &mut grad, 1.0);
                if loss.is_finite() {
                    Ok(grad)
                } else {
                    Err(Error::Numerical {
                        index: i,
                        message: "non-finite loss".into(),
                    })
                }
            })
            .collect()
    }

    fn check_batch(&self, inputs: &[&[f64]], labels: &[usize]) -> Result<()> {
        if inputs.len() != labels.len() {
            return Err(Error::input(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        for x in inputs {
            self.check_input(x)?;
        }
        for &y in labels {
            self.check_label(y)?;
        }
        Ok(())
    }
}

fn batch_rows<'a>(model: &ParamModel, batch: &'a Tensor) -> Result<Vec<&'a [f64]>> {
    let width = model.input_len();
    let shape = batch.shape();
    if shape.len() < 2 || shape[1..].iter().product::<usize>() != width {
        let mut expected = vec![shape.first().copied().unwrap_or(0)];
        expected.extend_from_slice(&model.topology.input_shape);
        return Err(Error::Shape {
            expected,
            actual: shape.to_vec(),
        });
    }
    Ok((0..batch.rows()).map(|i| batch.row(i)).collect())
}

/// Class probabilities for a `[batch, ..input_shape]` tensor; output is `[batch, m]`.
pub fn forward_eval(model: &ParamModel, batch: &Tensor) -> Result<Tensor> {
    let rows = batch_rows(model, batch)?;
    let m = model.num_classes();
    let mut data = Vec::with_capacity(rows.len() * m);
    for x in rows {
        data.extend(model.probabilities(x)?);
    }
    Tensor::new(vec![batch.rows(), m], data)
}

/// Gradient of the mean cross-entropy over the batch w.r.t. every parameter.
pub fn backward_grad(model: &ParamModel, batch: &Tensor, labels: &[usize]) -> Result<GradStore> {
    let rows = batch_rows(model, batch)?;
    Ok(model.batch_grad(&rows, labels)?.0)
}

/// One gradient store per example; their mean equals [`backward_grad`].
pub fn per_example_grads(model: &ParamModel, batch: &Tensor, labels: &[usize]) -> Result<Vec<GradStore>> {
    let rows = batch_rows(model, batch)?;
    model.example_grads(&rows, labels)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// Loss and gradient w.r.t. the logits.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let mut grad: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
    grad[label] -= 1.0;
    (lse - logits[label], grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(input: usize, hidden: usize, classes: usize) -> Topology {
        Topology::new(
            vec![input],
            vec![LayerSpec::Dense { out: hidden }, LayerSpec::Relu],
            classes,
        )
        .unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let model = ParamModel::zeroed(mlp(5, 4, 4)).unwrap();
        let batch = Tensor::new(vec![2, 5], vec![0.3; 10]).unwrap();
        let probs = forward_eval(&model, &batch).unwrap();
        assert_eq!(probs.shape(), &[2, 4]);
        assert!(probs.data().iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn linear_identity_prefers_matching_class() {
        let topo = Topology::new(vec![2], vec![], 2).unwrap();
        let mut model = ParamModel::zeroed(topo).unwrap();
        let mut params = model.params().clone();
        params.tensors[0] = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        model.set_params(params).unwrap();
        let p = model.probabilities(&[1.0, 0.0]).unwrap();
        assert!(p[0] > p[1]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = ParamModel::new(mlp(4, 3, 2), 1).unwrap();
        let batch = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(forward_eval(&model, &batch), Err(Error::Shape { .. })));
        let ok = Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap();
        assert!(backward_grad(&model, &ok, &[2]).is_err());
    }

    #[test]
    fn reference_cnn_resolves() {
        let topo = Topology::reference(&[1, 10, 10], 10).unwrap();
        let model = ParamModel::new(topo, 3).unwrap();
        assert_eq!(model.feature_len(), 32);
        assert_eq!(model.hidden_depth(), 8);
        let p = model.probabilities(&[0.5; 100]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_topologies() {
        assert!(Topology::new(vec![4], vec![], 1).is_err());
        assert!(Topology::new(vec![4], vec![LayerSpec::MaxPool { size: 2 }], 2).is_err());
        assert!(Topology::new(
            vec![1, 3, 3],
            vec![LayerSpec::Conv {
                out_channels: 2,
                kernel: 4
            }],
            2
        )
        .is_err());
    }

    #[test]
    fn cnn_input_gradient_matches_finite_difference() {
        let model = ParamModel::new(Topology::reference(&[1, 10, 10], 4).unwrap(), 11).unwrap();
        let x: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64 / 100.0).collect();
        let (_, dx) = model.input_grad(&x, 2).unwrap();
        for i in (0..100).step_by(7) {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (model.loss(&p, 2) - model.loss(&m, 2)) / 2e-6;
            assert!(
                (fd - dx[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "pixel {i}: {fd} vs {}",
                dx[i]
            );
        }
    }

    #[test]
    fn json_round_trip() {
        let model = ParamModel::new(Topology::reference(&[1, 8, 8], 3).unwrap(), 9).unwrap();
        let back = ParamModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back.params(), model.params());
    }
}
