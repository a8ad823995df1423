//! Minimal MLP: softmax cross-entropy, exact analytic gradients, and the
//! empirical Fisher diagonal. All training math is f64.
//!
//! Flat parameter order: for each layer, the weight matrix in row-major
//! order (one row per output neuron), then that layer's biases.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::data::Dataset;
use crate::param::{check_same_len, ParamVector};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Domain(format!(
                "unknown activation `{other}` (expected relu or tanh)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the *activated* value a = f(z).
    /// relu'(0) is taken as 0.
    fn deriv_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Architecture: layer sizes from input to logits, plus the hidden
/// activation. The output layer emits raw logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Domain(
                "an MLP needs at least input and output layer sizes".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Domain("layer sizes must be positive".into()));
        }
        Ok(MlpSpec {
            layer_sizes,
            activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total parameter count: Σ (fan_in·fan_out + fan_out).
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

}

/// A spec plus its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: MlpSpec,
    flat: ParamVector,
}

impl ModelParams {
    pub fn from_flat(spec: MlpSpec, flat: ParamVector) -> Result<Self> {
        check_same_len("model parameter count", spec.param_count(), flat.len())?;
        Ok(ModelParams { spec, flat })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn flat(&self) -> &ParamVector {
        &self.flat
    }

    pub fn into_flat(self) -> ParamVector {
        self.flat
    }

    /// Zero-copy views of layer l's weight matrix [out × in] and bias vector.
    pub fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (fan_in, fan_out) = (self.spec.layer_sizes[l], self.spec.layer_sizes[l + 1]);
        let off = layer_offset(&self.spec, l);
        let slice = self.flat.as_slice();
        let w = ArrayView2::from_shape((fan_out, fan_in), &slice[off..off + fan_in * fan_out])
            .expect("layer weight view");
        let b = ArrayView1::from(&slice[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]);
        (w, b)
    }

    /// Rebuild from per-layer (weights, biases) arrays in layer order.
    pub fn from_layers(spec: MlpSpec, layers: &[(Array2<f64>, Array1<f64>)]) -> Result<Self> {
        if layers.len() != spec.num_layers() {
            return Err(Error::Dimension {
                context: "layer count",
                left: layers.len(),
                right: spec.num_layers(),
            });
        }
        let mut flat = Vec::with_capacity(spec.param_count());
        for (l, (w, b)) in layers.iter().enumerate() {
            let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
            if w.dim() != (fan_out, fan_in) {
                return Err(Error::Dimension {
                    context: "layer weight shape",
                    left: w.nrows() * w.ncols(),
                    right: fan_out * fan_in,
                });
            }
            check_same_len("layer bias length", b.len(), fan_out)?;
            for row in w.rows() {
                flat.extend(row.iter());
            }
            flat.extend(b.iter());
        }
        ModelParams::from_flat(spec, ParamVector::new(flat)?)
    }
}

/// Start of layer l's block (weights then biases) within the flat vector.
fn layer_offset(spec: &MlpSpec, l: usize) -> usize {
    spec.layer_sizes[..=l]
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum()
}

/// A training batch: inputs [n × dim] plus integer labels.
#[derive(Debug, Clone)]
pub struct Batch {
    inputs: Array2<f64>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Dimension {
                context: "batch rows vs labels",
                left: inputs.nrows(),
                right: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn from_dataset(data: &Dataset, indices: &[usize]) -> Result<Self> {
        let sel = data.select(indices);
        Batch::new(sel.inputs().clone(), sel.labels().to_vec())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Non-negative per-parameter curvature weights (empirical Fisher diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal(Vec<f64>);

impl FisherDiagonal {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain(format!(
                "Fisher entries must be finite and non-negative (index {i})"
            )));
        }
        Ok(FisherDiagonal(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Uniform diagonal c·I.
    pub fn uniform(len: usize, c: f64) -> Result<Self> {
        FisherDiagonal::new(vec![c; len])
    }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

/// Glorot-uniform weights (range ±√(6/(fan_in+fan_out))), zero biases.
/// Weights are drawn in flat order, so a seed pins every bit.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ModelParams {
    let mut rng = Rng::new(seed);
    let mut flat = Vec::with_capacity(spec.param_count());
    for w in spec.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            flat.push(rng.uniform(-s, s));
        }
        flat.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ModelParams {
        spec: spec.clone(),
        flat: ParamVector::from_raw(flat),
    }
}

struct ForwardTrace {
    /// Activations per layer; index 0 is the input batch.
    activations: Vec<Array2<f64>>,
}

fn forward_trace(params: &ModelParams, inputs: &Array2<f64>) -> Result<ForwardTrace> {
    check_same_len("input feature dim", inputs.ncols(), params.spec.input_dim())?;
    let act = params.spec.activation;
    let mut activations = Vec::with_capacity(params.spec.num_layers() + 1);
    activations.push(inputs.clone());
    for l in 0..params.spec.num_layers() {
        let (w, b) = params.layer(l);
        let mut z = activations[l].dot(&w.t());
        z += &b;
        if l + 1 < params.spec.num_layers() {
            z.mapv_inplace(|v| act.apply(v));
        }
        activations.push(z);
    }
    Ok(ForwardTrace { activations })
}

/// Raw logits for a batch of inputs, one row per example.
pub fn forward(params: &ModelParams, inputs: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(forward_trace(params, inputs)?.activations.pop().unwrap())
}

/// Row-wise softmax probabilities computed stably from logits.
fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    probs
}

/// Mean softmax cross-entropy over the batch and its exact gradient in flat
/// parameter order.
pub fn loss_and_grad(params: &ModelParams, batch: &Batch) -> Result<(f64, ParamVector)> {
    check_labels(params, batch.labels())?;
    let trace = forward_trace(params, &batch.inputs)?;
    let n = batch.len();
    let logits = trace.activations.last().unwrap();

    let mut loss = 0.0;
    let mut dz = softmax_rows(logits);
    for (i, &label) in batch.labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        dz[[i, label]] -= 1.0;
    }
    loss /= n as f64;
    dz.mapv_inplace(|v| v / n as f64);

    let grad = backprop(params, &trace, dz);
    if loss.is_finite() {
        Ok((loss, ParamVector::from_raw(grad)))
    } else {
        Err(Error::NonFinite("loss_and_grad"))
    }
}

/// Backpropagate dL/dlogits through the trace; returns the flat gradient.
fn backprop(params: &ModelParams, trace: &ForwardTrace, mut dz: Array2<f64>) -> Vec<f64> {
    let spec = &params.spec;
    let act = spec.activation;
    let mut grad = vec![0.0; spec.param_count()];
    for l in (0..spec.num_layers()).rev() {
        let a_prev = &trace.activations[l];
        let dw = dz.t().dot(a_prev); // [out × in]
        let db = dz.sum_axis(Axis(0));
        let off = layer_offset(spec, l);
        let fan_in = spec.layer_sizes[l];
        let fan_out = spec.layer_sizes[l + 1];
        for r in 0..fan_out {
            for c in 0..fan_in {
                grad[off + r * fan_in + c] = dw[[r, c]];
            }
        }
        for r in 0..fan_out {
            grad[off + fan_in * fan_out + r] = db[r];
        }
        if l > 0 {
            let (w, _) = params.layer(l);
            let mut da = dz.dot(&w); // [n × fan_in]
            let a = &trace.activations[l];
            for (mut da_row, a_row) in da.rows_mut().into_iter().zip(a.rows()) {
                for (d, &av) in da_row.iter_mut().zip(a_row.iter()) {
                    *d *= act.deriv_from_output(av);
                }
            }
            dz = da;
        }
    }
    grad
}

fn check_labels(params: &ModelParams, labels: &[usize]) -> Result<()> {
    let classes = params.spec.class_count();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Domain(format!(
            "label {bad} outside the model's {classes}-class output"
        )));
    }
    Ok(())
}

/// Index of the row maximum; ties resolve to the lowest index.
fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_v = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Fraction of examples whose argmax logit equals the label
/// (argmax ties go to the lowest class index).
pub fn accuracy(params: &ModelParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Domain("accuracy over an empty dataset".into()));
    }
    check_labels(params, data.labels())?;
    let logits = forward(params, data.inputs())?;
    let mut correct = 0;
    for (row, &label) in logits.rows().into_iter().zip(data.labels()) {
        if argmax(row) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy with predictions restricted to `classes` (a task's own label
/// group): the argmax runs over those logits only, ties resolving to the
/// lowest class index. Every label in `data` must belong to `classes`.
pub fn masked_accuracy(params: &ModelParams, data: &Dataset, classes: &[usize]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Domain("accuracy over an empty dataset".into()));
    }
    if classes.is_empty() {
        return Err(Error::Domain("empty class mask".into()));
    }
    check_labels(params, data.labels())?;
    let mut mask: Vec<usize> = classes.to_vec();
    mask.sort_unstable();
    mask.dedup();
    if let Some(&bad) = mask.iter().find(|&&c| c >= params.spec.class_count()) {
        return Err(Error::Domain(format!(
            "mask class {bad} outside the model's {}-class output",
            params.spec.class_count()
        )));
    }
    if let Some(&bad) = data.labels().iter().find(|&&l| !mask.contains(&l)) {
        return Err(Error::Domain(format!(
            "label {bad} not covered by the evaluation mask"
        )));
    }
    let logits = forward(params, data.inputs())?;
    let mut correct = 0;
    for (row, &label) in logits.rows().into_iter().zip(data.labels()) {
        let mut best = mask[0];
        let mut best_v = row[mask[0]];
        for &c in &mask[1..] {
            if row[c] > best_v {
                best = c;
                best_v = row[c];
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Empirical Fisher diagonal: the mean squared per-example gradient of the
/// labeled-class log-likelihood.
///
/// `n_samples = None` uses the whole dataset in row order. A sample count
/// at most the dataset size draws without replacement; a larger count draws
/// with replacement. Deterministic given the seed.
pub fn fisher_diagonal(
    params: &ModelParams,
    data: &Dataset,
    n_samples: Option<usize>,
    seed: u64,
) -> Result<FisherDiagonal> {
    if data.is_empty() {
        return Err(Error::Domain("fisher over an empty dataset".into()));
    }
    check_labels(params, data.labels())?;
    let n = n_samples.unwrap_or(data.len());
    if n == 0 {
        return Err(Error::Domain("n_samples must be positive".into()));
    }
    let indices: Vec<usize> = if n == data.len() {
        (0..n).collect()
    } else if n < data.len() {
        Rng::derive(seed, 0xF15E).sample_indices(data.len(), n)
    } else {
        let mut rng = Rng::derive(seed, 0xF15E);
        (0..n).map(|_| rng.below(data.len())).collect()
    };

    let spec = &params.spec;
    let act = spec.activation;
    let mut fisher = vec![0.0; spec.param_count()];
    // Per-example squared gradients accumulate in closed form per chunk:
    // for dW = dzᵀ·a, the per-example square sums to (dz∘dz)ᵀ·(a∘a).
    for chunk in indices.chunks(256) {
        let batch = Batch::from_dataset(data, chunk)?;
        let trace = forward_trace(params, &batch.inputs)?;
        let logits = trace.activations.last().unwrap();
        let mut dz = softmax_rows(logits);
        for (i, &label) in batch.labels.iter().enumerate() {
            dz[[i, label]] -= 1.0;
        }
        for l in (0..spec.num_layers()).rev() {
            let a_prev = &trace.activations[l];
            let dz_sq = dz.mapv(|v| v * v);
            let a_sq = a_prev.mapv(|v| v * v);
            let w_sq = dz_sq.t().dot(&a_sq); // [out × in]
            let b_sq = dz_sq.sum_axis(Axis(0));
            let off = layer_offset(spec, l);
            let fan_in = spec.layer_sizes[l];
            let fan_out = spec.layer_sizes[l + 1];
            for r in 0..fan_out {
                for c in 0..fan_in {
                    fisher[off + r * fan_in + c] += w_sq[[r, c]];
                }
            }
            for r in 0..fan_out {
                fisher[off + fan_in * fan_out + r] += b_sq[r];
            }
            if l > 0 {
                let (w, _) = params.layer(l);
                let mut da = dz.dot(&w);
                let a = &trace.activations[l];
                for (mut da_row, a_row) in da.rows_mut().into_iter().zip(a.rows()) {
                    for (d, &av) in da_row.iter_mut().zip(a_row.iter()) {
                        *d *= act.deriv_from_output(av);
                    }
                }
                dz = da;
            }
        }
    }
    for v in fisher.iter_mut() {
        *v /= n as f64;
    }
    FisherDiagonal::new(fisher)
}
