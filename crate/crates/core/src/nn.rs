//! A small multilayer perceptron over flat parameter vectors.
//!
//! Parameters live in one contiguous `Vec<f64>` so that the codec and the
//! federation layer can treat a model as a plain vector; a shared [`Layout`]
//! records where each weight matrix and bias vector sits.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::data::{ClientDataset, Dataset};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("a model needs at least two layers of positive width, got {0:?}")]
    BadLayers(Vec<usize>),
    #[error("input dimension {found} does not match model input width {expected}")]
    InputDim { expected: usize, found: usize },
    #[error("model has {expected} outputs but data has {found} classes")]
    ClassCount { expected: usize, found: usize },
    #[error("parameter vector has {found} values, layout needs {expected}")]
    ParamCount { expected: usize, found: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("learning rate must be non-negative and finite, got {0}")]
    LearningRate(f64),
    #[error("{0} must be positive")]
    ZeroArgument(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

/// Position of one dense layer inside the flat vector. Weights are stored
/// row-major as `(outputs, inputs)`, followed by the bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseBlock {
    pub inputs: usize,
    pub outputs: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    layer_sizes: Vec<usize>,
    activation: Activation,
    blocks: Vec<DenseBlock>,
    len: usize,
}

impl Layout {
    pub fn new(layer_sizes: &[usize], activation: Activation) -> Result<Self, NnError> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(NnError::BadLayers(layer_sizes.to_vec()));
        }
        let mut blocks = Vec::with_capacity(layer_sizes.len() - 1);
        let mut offset = 0;
        for pair in layer_sizes.windows(2) {
            let (inputs, outputs) = (pair[0], pair[1]);
            blocks.push(DenseBlock {
                inputs,
                outputs,
                weight_offset: offset,
                bias_offset: offset + inputs * outputs,
            });
            offset += inputs * outputs + outputs;
        }
        Ok(Layout {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            blocks,
            len: offset,
        })
    }

    /// Number of parameters.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn blocks(&self) -> &[DenseBlock] {
        &self.blocks
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }
}

/// Model parameters together with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self, NnError> {
        if values.len() != layout.len() {
            return Err(NnError::ParamCount {
                expected: layout.len(),
                found: values.len(),
            });
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParamVector {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    /// Weights uniform in `[-1/√fan_in, 1/√fan_in]`, biases zero.
    pub fn init<R: Rng + ?Sized>(layout: Arc<Layout>, rng: &mut R) -> Self {
        let mut values = vec![0.0; layout.len()];
        for b in layout.blocks() {
            let s = 1.0 / (b.inputs as f64).sqrt();
            for w in &mut values[b.weight_offset..b.bias_offset] {
                *w = rng.random_range(-s..=s);
            }
        }
        ParamVector { values, layout }
    }

    pub fn from_config(config: &ModelConfig) -> Result<Self, NnError> {
        use rand::SeedableRng;
        let layout = Arc::new(Layout::new(&config.layer_sizes, config.activation)?);
        let mut rng = crate::rng::Stream::seed_from_u64(config.seed);
        Ok(Self::init(layout, &mut rng))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, NnError> {
        Self::new(values, Arc::clone(&self.layout))
    }
}

/// Gradient of the batch-mean loss, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
}

/// Elementwise clamp to `[-1, 1]`.
pub fn clip(params: &ParamVector) -> ParamVector {
    let mut out = params.clone();
    clip_in_place(out.values_mut());
    out
}

pub fn clip_in_place(values: &mut [f64]) {
    for v in values {
        *v = v.clamp(-1.0, 1.0);
    }
}

fn check_data(layout: &Layout, data: &Dataset) -> Result<(), NnError> {
    if data.dim() != layout.inputs() {
        return Err(NnError::InputDim {
            expected: layout.inputs(),
            found: data.dim(),
        });
    }
    if data.classes() > layout.classes() {
        return Err(NnError::ClassCount {
            expected: layout.classes(),
            found: data.classes(),
        });
    }
    Ok(())
}

/// Per-example scratch buffers: pre-activations and activations per layer.
struct Scratch {
    z: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Scratch {
    fn new(layout: &Layout) -> Self {
        let sizes = layout.layer_sizes();
        let widest = *sizes.iter().max().expect("non-empty");
        Scratch {
            z: sizes[1..].iter().map(|&n| vec![0.0; n]).collect(),
            a: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            delta: vec![0.0; widest],
            delta_prev: vec![0.0; widest],
        }
    }
}

/// Forward one example; returns its cross-entropy loss. Logits end up in
/// `scratch.z.last()`.
fn forward_one(params: &[f64], layout: &Layout, x: &[f32], label: usize, s: &mut Scratch) -> f64 {
    for (dst, &src) in s.a[0].iter_mut().zip(x) {
        *dst = src as f64;
    }
    let last = layout.blocks().len() - 1;
    for (l, b) in layout.blocks().iter().enumerate() {
        let (input, rest) = s.a.split_at_mut(l + 1);
        let input = &input[l];
        let z = &mut s.z[l];
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &params[b.weight_offset + o * b.inputs..b.weight_offset + (o + 1) * b.inputs];
            let dot: f64 = row.iter().zip(input.iter()).map(|(w, a)| w * a).sum();
            *zo = dot + params[b.bias_offset + o];
        }
        if l < last {
            for (ao, &zo) in rest[0].iter_mut().zip(z.iter()) {
                *ao = layout.activation().apply(zo);
            }
        }
    }
    let logits = &s.z[last];
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Accumulate `scale · ∂loss/∂params` for the example last run through
/// [`forward_one`].
fn backward_one(
    params: &[f64],
    layout: &Layout,
    label: usize,
    scale: f64,
    s: &mut Scratch,
    grad: &mut [f64],
) {
    let blocks = layout.blocks();
    let last = blocks.len() - 1;
    {
        let logits = &s.z[last];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
        for (o, &v) in logits.iter().enumerate() {
            let p = (v - max).exp() / denom;
            s.delta[o] = p - if o == label { 1.0 } else { 0.0 };
        }
    }
    for l in (0..=last).rev() {
        let b = blocks[l];
        let input = &s.a[l];
        for o in 0..b.outputs {
            let d = s.delta[o] * scale;
            grad[b.bias_offset + o] += d;
            if d != 0.0 {
                let row =
                    &mut grad[b.weight_offset + o * b.inputs..b.weight_offset + (o + 1) * b.inputs];
                for (g, &a) in row.iter_mut().zip(input.iter()) {
                    *g += d * a;
                }
            }
        }
        if l == 0 {
            break;
        }
        let prev = &mut s.delta_prev[..b.inputs];
        prev.fill(0.0);
        for o in 0..b.outputs {
            let d = s.delta[o];
            if d == 0.0 {
                continue;
            }
            let row = &params[b.weight_offset + o * b.inputs..b.weight_offset + (o + 1) * b.inputs];
            for (p, &w) in prev.iter_mut().zip(row) {
                *p += d * w;
            }
        }
        let act = layout.activation();
        for (i, p) in prev.iter_mut().enumerate() {
            *p *= act.derivative(s.z[l - 1][i], s.a[l][i]);
        }
        std::mem::swap(&mut s.delta, &mut s.delta_prev);
    }
}

/// Logits and mean cross-entropy loss of `model` on the examples at `batch`.
pub struct ForwardOutput {
    /// Row-major `(batch, classes)`.
    pub logits: Vec<f64>,
    pub loss: f64,
}

pub fn forward(
    model: &ParamVector,
    data: &Dataset,
    batch: &[usize],
) -> Result<ForwardOutput, NnError> {
    let layout = model.layout();
    check_data(layout, data)?;
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let mut s = Scratch::new(layout);
    let mut logits = Vec::with_capacity(batch.len() * layout.classes());
    let mut total = 0.0;
    for &i in batch {
        total += forward_one(
            model.values(),
            layout,
            data.feature(i),
            data.label(i),
            &mut s,
        );
        logits.extend_from_slice(s.z.last().expect("output layer"));
    }
    Ok(ForwardOutput {
        logits,
        loss: total / batch.len() as f64,
    })
}

/// Mean loss and its gradient over the examples at `batch`.
pub fn loss_and_gradient(
    model: &ParamVector,
    data: &Dataset,
    batch: &[usize],
) -> Result<(f64, Gradient), NnError> {
    let layout = model.layout();
    check_data(layout, data)?;
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let mut s = Scratch::new(layout);
    let mut grad = vec![0.0; layout.len()];
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for &i in batch {
        total += forward_one(
            model.values(),
            layout,
            data.feature(i),
            data.label(i),
            &mut s,
        );
        backward_one(
            model.values(),
            layout,
            data.label(i),
            scale,
            &mut s,
            &mut grad,
        );
    }
    Ok((total * scale, Gradient { values: grad }))
}

pub fn backward(model: &ParamVector, data: &Dataset, batch: &[usize]) -> Result<Gradient, NnError> {
    loss_and_gradient(model, data, batch).map(|(_, g)| g)
}

/// Mini-batch SGD from `global` over the client's data, then clipping.
pub fn local_train<R: Rng + ?Sized>(
    global: &ParamVector,
    client: &ClientDataset,
    learning_rate: f64,
    epochs: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<ParamVector, NnError> {
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(NnError::LearningRate(learning_rate));
    }
    if epochs == 0 {
        return Err(NnError::ZeroArgument("epochs"));
    }
    if batch_size == 0 {
        return Err(NnError::ZeroArgument("batch_size"));
    }
    let data = &client.data;
    check_data(global.layout(), data)?;
    if data.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let mut model = global.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for batch in order.chunks(batch_size) {
            let grad = backward(&model, data, batch)?;
            for (w, g) in model.values_mut().iter_mut().zip(&grad.values) {
                *w -= learning_rate * g;
            }
        }
    }
    clip_in_place(model.values_mut());
    Ok(model)
}

/// Accuracy and mean loss over every example of `data`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

pub fn evaluate(model: &ParamVector, data: &Dataset) -> Result<Evaluation, NnError> {
    let layout = model.layout();
    check_data(layout, data)?;
    if data.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let mut s = Scratch::new(layout);
    let mut total = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let label = data.label(i);
        total += forward_one(model.values(), layout, data.feature(i), label, &mut s);
        if argmax(s.z.last().expect("output layer")) == label {
            correct += 1;
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        loss: total / data.len() as f64,
    })
}

/// Cross-entropy loss of `model` on a single example.
pub fn example_loss(model: &ParamVector, features: &[f32], label: usize) -> Result<f64, NnError> {
    let layout = model.layout();
    if features.len() != layout.inputs() {
        return Err(NnError::InputDim {
            expected: layout.inputs(),
            found: features.len(),
        });
    }
    let mut s = Scratch::new(layout);
    Ok(forward_one(model.values(), layout, features, label, &mut s))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
