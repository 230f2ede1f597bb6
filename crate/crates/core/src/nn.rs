//! Minimal dense feedforward networks with exact backpropagation.
//!
//! Parameters live in a single flat [`ParamVector`]; every layer reads its
//! weights and biases from fixed offsets, so the whole network state can be
//! treated as one point in R^d by the meta-learning code.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed in terms of the post-activation value.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputHead {
    RegressionLinear,
    ClassificationSoftmax,
}

/// Architecture description: sizes, hidden activations, output head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    output_head: OutputHead,
}

/// Offsets of one affine layer inside the flat parameter vector.
/// Weights are row-major `(out_dim, in_dim)`, biases follow the weights.
#[derive(Debug, Clone, Copy)]
pub struct LayerLayout {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w_offset: usize,
    pub b_offset: usize,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, activations: Vec<Activation>, output_head: OutputHead) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec("a network needs at least 2 layers".into()));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidSpec("layer sizes must be positive".into()));
        }
        let hidden = layer_sizes.len() - 2;
        if activations.len() != hidden {
            return Err(Error::InvalidSpec(format!(
                "expected {} hidden activations, got {}",
                hidden,
                activations.len()
            )));
        }
        Ok(NetworkSpec { layer_sizes, activations, output_head })
    }

    /// All hidden layers share one activation.
    pub fn uniform(layer_sizes: &[usize], activation: Activation, output_head: OutputHead) -> Result<Self> {
        let hidden = layer_sizes.len().saturating_sub(2);
        NetworkSpec::new(layer_sizes.to_vec(), vec![activation; hidden], output_head)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn output_head(&self) -> OutputHead {
        self.output_head
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    /// Number of affine layers.
    pub fn layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.layer_count() {
            Activation::Linear // output layer is affine; the head handles the rest
        } else {
            self.activations[layer]
        }
    }

    pub fn layouts(&self) -> Vec<LayerLayout> {
        let mut out = Vec::with_capacity(self.layer_count());
        let mut offset = 0;
        for l in 0..self.layer_count() {
            let in_dim = self.layer_sizes[l];
            let out_dim = self.layer_sizes[l + 1];
            out.push(LayerLayout { in_dim, out_dim, w_offset: offset, b_offset: offset + in_dim * out_dim });
            offset += in_dim * out_dim + out_dim;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Flat vector of all network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector { values }
    }

    pub fn zeros(d: usize) -> Self {
        ParamVector { values: vec![0.0; d] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// self += a * other
    pub fn add_scaled(&mut self, other: &ParamVector, a: f64) {
        debug_assert_eq!(self.len(), other.len());
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.len(), other.len());
        ParamVector::new(self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect())
    }

    /// Unit-norm copy, or None when the norm underflows.
    pub fn normalized(&self) -> Option<ParamVector> {
        let n = self.norm();
        if n <= 1e-300 {
            return None;
        }
        let mut v = self.clone();
        v.scale(1.0 / n);
        Some(v)
    }
}

/// One affine layer in structured form; see `trajectory::flatten`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Row-major `(out_dim, in_dim)`.
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

/// Training samples: inputs are row-per-sample, targets either real-valued
/// rows (regression) or class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
}

#[derive(Debug, Clone)]
pub enum Targets {
    Values(Matrix),
    Labels(Vec<usize>),
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sub-batch of the given sample indices (in index order).
    pub fn subset(&self, indices: &[usize]) -> Batch {
        let rows: Vec<Vec<f64>> = indices.iter().map(|&i| self.inputs.row(i).to_vec()).collect();
        let inputs = Matrix::from_rows(&rows).expect("subset rows share width");
        let targets = match &self.targets {
            Targets::Values(m) => {
                let t: Vec<Vec<f64>> = indices.iter().map(|&i| m.row(i).to_vec()).collect();
                Targets::Values(Matrix::from_rows(&t).expect("subset rows share width"))
            }
            Targets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
        };
        Batch { inputs, targets }
    }

    fn validate(&self, spec: &NetworkSpec, kind: LossKind) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if self.inputs.cols() != spec.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "batch input dim",
                expected: spec.input_dim(),
                got: self.inputs.cols(),
            });
        }
        match (&self.targets, kind) {
            (Targets::Values(m), LossKind::Mse) => {
                if spec.output_head() != OutputHead::RegressionLinear {
                    return Err(Error::InvalidSpec("mse loss requires a regression head".into()));
                }
                if m.rows() != self.len() {
                    return Err(Error::DimensionMismatch { what: "target rows", expected: self.len(), got: m.rows() });
                }
                if m.cols() != spec.output_dim() {
                    return Err(Error::DimensionMismatch {
                        what: "target dim",
                        expected: spec.output_dim(),
                        got: m.cols(),
                    });
                }
            }
            (Targets::Labels(l), LossKind::CrossEntropy) => {
                if spec.output_head() != OutputHead::ClassificationSoftmax {
                    return Err(Error::InvalidSpec("cross-entropy requires a softmax head".into()));
                }
                if l.len() != self.len() {
                    return Err(Error::DimensionMismatch { what: "label count", expected: self.len(), got: l.len() });
                }
                if let Some(&bad) = l.iter().find(|&&c| c >= spec.output_dim()) {
                    return Err(Error::InvalidSpec(format!(
                        "label {} out of range for {} classes",
                        bad,
                        spec.output_dim()
                    )));
                }
            }
            _ => {
                return Err(Error::InvalidSpec(
                    "loss kind does not match target kind (mse needs values, cross-entropy needs labels)".into(),
                ))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer settings plus mutable Adam moments. Moment vectors are sized on
/// first use and must then match the parameter count.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: 0.0,
            beta2: 0.999,
            epsilon: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn adam(learning_rate: f64, beta1: f64) -> Self {
        OptimizerState { kind: OptimizerKind::Adam, beta1, ..OptimizerState::sgd(learning_rate) }
    }

    /// Same settings, zeroed moments and step counter.
    pub fn fresh(&self) -> Self {
        OptimizerState { m: Vec::new(), v: Vec::new(), step: 0, ..self.clone() }
    }
}

/// Fan-based uniform weights (±sqrt(6/(fan_in+fan_out))), zero biases.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParamVector {
    let mut rng = seeds::rng_from(&[seed, seeds::tag::INIT]);
    let mut values = vec![0.0; spec.param_count()];
    for layout in spec.layouts() {
        let limit = (6.0 / (layout.in_dim + layout.out_dim) as f64).sqrt();
        for w in &mut values[layout.w_offset..layout.w_offset + layout.in_dim * layout.out_dim] {
            *w = rng.gen_range(-limit..limit);
        }
        // biases stay zero
    }
    ParamVector::new(values)
}

struct Trace {
    /// Post-activation output of every affine layer; the last entry holds
    /// the raw logits (head not applied).
    layer_outputs: Vec<Matrix>,
}

/// Dot product with four accumulators; the inner loops live on the hot
/// path and a strict left-to-right reduction defeats vectorization.
#[inline]
fn dot_unrolled(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let k = i * 4;
        s0 += a[k] * b[k];
        s1 += a[k + 1] * b[k + 1];
        s2 += a[k + 2] * b[k + 2];
        s3 += a[k + 3] * b[k + 3];
    }
    let mut rest = 0.0;
    for k in chunks * 4..a.len() {
        rest += a[k] * b[k];
    }
    (s0 + s1) + (s2 + s3) + rest
}

fn forward_trace(params: &ParamVector, spec: &NetworkSpec, inputs: &Matrix) -> Result<Trace> {
    if inputs.cols() != spec.input_dim() {
        return Err(Error::DimensionMismatch { what: "input dim", expected: spec.input_dim(), got: inputs.cols() });
    }
    if params.len() != spec.param_count() {
        return Err(Error::DimensionMismatch { what: "param count", expected: spec.param_count(), got: params.len() });
    }
    let p = params.as_slice();
    let samples = inputs.rows();
    let mut outputs = Vec::with_capacity(spec.layer_count());
    let mut current = inputs;
    for (l, layout) in spec.layouts().iter().enumerate() {
        let act = spec.activation_of(l);
        let mut out = Matrix::zeros(samples, layout.out_dim);
        let biases = &p[layout.b_offset..layout.b_offset + layout.out_dim];
        for s in 0..samples {
            let in_row = current.row(s);
            let out_row = out.row_mut(s);
            for o in 0..layout.out_dim {
                let w_row = &p[layout.w_offset + o * layout.in_dim..layout.w_offset + (o + 1) * layout.in_dim];
                out_row[o] = act.apply(biases[o] + dot_unrolled(in_row, w_row));
            }
        }
        outputs.push(out);
        current = outputs.last().unwrap();
    }
    Ok(Trace { layer_outputs: outputs })
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
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
    out
}

/// Network outputs: raw values for a regression head, row-normalized
/// probabilities for a softmax head.
pub fn forward(params: &ParamVector, spec: &NetworkSpec, inputs: &Matrix) -> Result<Matrix> {
    let trace = forward_trace(params, spec, inputs)?;
    let logits = trace.layer_outputs.last().unwrap();
    Ok(match spec.output_head() {
        OutputHead::RegressionLinear => logits.clone(),
        OutputHead::ClassificationSoftmax => softmax_rows(logits),
    })
}

fn per_sample_losses_from_logits(logits: &Matrix, targets: &Targets, kind: LossKind) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.rows());
    match (kind, targets) {
        (LossKind::Mse, Targets::Values(t)) => {
            for s in 0..logits.rows() {
                let err: f64 = logits
                    .row(s)
                    .iter()
                    .zip(t.row(s))
                    .map(|(p, y)| (p - y) * (p - y))
                    .sum();
                out.push(err);
            }
        }
        (LossKind::CrossEntropy, Targets::Labels(labels)) => {
            for s in 0..logits.rows() {
                let row = logits.row(s);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                out.push(lse - row[labels[s]]);
            }
        }
        _ => unreachable!("validated before"),
    }
    out
}

/// Loss of each sample (squared error summed over output dims, or negative
/// log-likelihood). Used for ISPL prior voting.
pub fn per_sample_losses(params: &ParamVector, spec: &NetworkSpec, batch: &Batch, kind: LossKind) -> Result<Vec<f64>> {
    batch.validate(spec, kind)?;
    let trace = forward_trace(params, spec, &batch.inputs)?;
    Ok(per_sample_losses_from_logits(trace.layer_outputs.last().unwrap(), &batch.targets, kind))
}

/// Mean loss over the batch.
pub fn loss(params: &ParamVector, spec: &NetworkSpec, batch: &Batch, kind: LossKind) -> Result<f64> {
    let losses = per_sample_losses(params, spec, batch, kind)?;
    let l = losses.iter().sum::<f64>() / losses.len() as f64;
    if !l.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(l)
}

/// Weighted loss `sum_i w_i * loss_i` and its exact gradient.
///
/// Callers pick the normalization: `loss_and_grad` uses uniform `1/S`
/// weights, the masked inner loop uses `v_i / sum(v)`.
pub fn loss_and_grad_weighted(
    params: &ParamVector,
    spec: &NetworkSpec,
    batch: &Batch,
    kind: LossKind,
    weights: &[f64],
) -> Result<(f64, ParamVector)> {
    batch.validate(spec, kind)?;
    if weights.len() != batch.len() {
        return Err(Error::DimensionMismatch { what: "sample weights", expected: batch.len(), got: weights.len() });
    }
    let trace = forward_trace(params, spec, &batch.inputs)?;
    let logits = trace.layer_outputs.last().unwrap();
    let samples = batch.len();
    let out_dim = spec.output_dim();

    let per_sample = per_sample_losses_from_logits(logits, &batch.targets, kind);
    let total: f64 = per_sample.iter().zip(weights).map(|(l, w)| l * w).sum();
    if !total.is_finite() {
        return Err(Error::NonFinite("loss"));
    }

    // d(total)/d(logits)
    let mut delta = Matrix::zeros(samples, out_dim);
    match (kind, &batch.targets) {
        (LossKind::Mse, Targets::Values(t)) => {
            for s in 0..samples {
                let d_row = delta.row_mut(s);
                for ((d, p), y) in d_row.iter_mut().zip(logits.row(s)).zip(t.row(s)) {
                    *d = weights[s] * 2.0 * (p - y);
                }
            }
        }
        (LossKind::CrossEntropy, Targets::Labels(labels)) => {
            let probs = softmax_rows(logits);
            for s in 0..samples {
                let d_row = delta.row_mut(s);
                d_row.copy_from_slice(probs.row(s));
                d_row[labels[s]] -= 1.0;
                for d in d_row.iter_mut() {
                    *d *= weights[s];
                }
            }
        }
        _ => unreachable!("validated before"),
    }

    let p = params.as_slice();
    let mut grad = vec![0.0; params.len()];
    let layouts = spec.layouts();
    for l in (0..spec.layer_count()).rev() {
        let layout = layouts[l];
        let input_act: &Matrix = if l == 0 { &batch.inputs } else { &trace.layer_outputs[l - 1] };
        // weight and bias gradients
        for s in 0..samples {
            let d_row = delta.row(s);
            let in_row = input_act.row(s);
            for o in 0..layout.out_dim {
                let d = d_row[o];
                if d == 0.0 {
                    continue;
                }
                let w_grad =
                    &mut grad[layout.w_offset + o * layout.in_dim..layout.w_offset + (o + 1) * layout.in_dim];
                for (g, x) in w_grad.iter_mut().zip(in_row) {
                    *g += d * x;
                }
            }
            for o in 0..layout.out_dim {
                grad[layout.b_offset + o] += d_row[o];
            }
        }
        // propagate to the previous layer through its activation
        if l > 0 {
            let prev_act = spec.activation_of(l - 1);
            let prev = &trace.layer_outputs[l - 1];
            let mut new_delta = Matrix::zeros(samples, layout.in_dim);
            for s in 0..samples {
                let d_row = delta.row(s);
                let nd_row = new_delta.row_mut(s);
                for o in 0..layout.out_dim {
                    let d = d_row[o];
                    if d == 0.0 {
                        continue;
                    }
                    let w_row = &p[layout.w_offset + o * layout.in_dim..layout.w_offset + (o + 1) * layout.in_dim];
                    for (nd, w) in nd_row.iter_mut().zip(w_row) {
                        *nd += d * w;
                    }
                }
                for (nd, a) in nd_row.iter_mut().zip(prev.row(s)) {
                    *nd *= prev_act.derivative_from_output(*a);
                }
            }
            delta = new_delta;
        }
    }
    Ok((total, ParamVector::new(grad)))
}

/// Mean loss and its gradient.
pub fn loss_and_grad(params: &ParamVector, spec: &NetworkSpec, batch: &Batch, kind: LossKind) -> Result<(f64, ParamVector)> {
    let w = vec![1.0 / batch.len().max(1) as f64; batch.len()];
    loss_and_grad_weighted(params, spec, batch, kind, &w)
}

/// Gradient of the mean loss with respect to all parameters.
pub fn grad(params: &ParamVector, spec: &NetworkSpec, batch: &Batch, kind: LossKind) -> Result<ParamVector> {
    loss_and_grad(params, spec, batch, kind).map(|(_, g)| g)
}

/// One optimizer step, mutating `params` and `state`.
pub fn step_in_place(params: &mut ParamVector, grad: &ParamVector, state: &mut OptimizerState) -> Result<()> {
    if grad.len() != params.len() {
        return Err(Error::DimensionMismatch { what: "gradient", expected: params.len(), got: grad.len() });
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let lr = state.learning_rate;
    match state.kind {
        OptimizerKind::Sgd => {
            params.add_scaled(grad, -lr);
        }
        OptimizerKind::Adam => {
            if state.m.is_empty() {
                state.m = vec![0.0; params.len()];
                state.v = vec![0.0; params.len()];
            }
            if state.m.len() != params.len() {
                return Err(Error::DimensionMismatch { what: "adam moments", expected: params.len(), got: state.m.len() });
            }
            state.step += 1;
            let b1 = state.beta1;
            let b2 = state.beta2;
            let bc1 = 1.0 - b1.powi(state.step as i32);
            let bc2 = 1.0 - b2.powi(state.step as i32);
            let eps = state.epsilon;
            let ps = params.as_mut_slice();
            for i in 0..ps.len() {
                let g = grad.as_slice()[i];
                state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
                state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                ps[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Functional form of [`step_in_place`].
pub fn step(params: &ParamVector, grad: &ParamVector, state: &OptimizerState) -> Result<(ParamVector, OptimizerState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    step_in_place(&mut p, grad, &mut s)?;
    Ok((p, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_regressor() -> NetworkSpec {
        NetworkSpec::uniform(&[1, 1], Activation::Tanh, OutputHead::RegressionLinear).unwrap()
    }

    #[test]
    fn param_count_matches_hand_count() {
        let spec = NetworkSpec::uniform(&[1, 64, 64, 1], Activation::Tanh, OutputHead::RegressionLinear).unwrap();
        // 1*64+64 + 64*64+64 + 64*1+1
        assert_eq!(spec.param_count(), 4353);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = NetworkSpec::uniform(&[1, 64, 64, 1], Activation::Tanh, OutputHead::RegressionLinear).unwrap();
        let a = init_params(&spec, 42);
        let b = init_params(&spec, 42);
        assert_eq!(a, b);
        assert_ne!(a, init_params(&spec, 43));
        for layout in spec.layouts() {
            for o in 0..layout.out_dim {
                assert_eq!(a.as_slice()[layout.b_offset + o], 0.0);
            }
        }
        // weights bounded by the fan rule
        for layout in spec.layouts() {
            let limit = (6.0 / (layout.in_dim + layout.out_dim) as f64).sqrt();
            for i in 0..layout.in_dim * layout.out_dim {
                assert!(a.as_slice()[layout.w_offset + i].abs() <= limit);
            }
        }
    }

    #[test]
    fn forward_single_affine_layer() {
        let spec = tiny_regressor();
        // weight 2, bias 1, input 3 -> 7
        let params = ParamVector::new(vec![2.0, 1.0]);
        let inputs = Matrix::from_rows(&[vec![3.0]]).unwrap();
        let out = forward(&params, &spec, &inputs).unwrap();
        assert_eq!(out[(0, 0)], 7.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let spec = NetworkSpec::uniform(&[3, 8, 5], Activation::Tanh, OutputHead::ClassificationSoftmax).unwrap();
        let params = init_params(&spec, 7);
        let inputs = Matrix::from_rows(&[vec![0.3, -1.0, 2.0], vec![5.0, 5.0, -5.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let out = forward(&params, &spec, &inputs).unwrap();
        for r in 0..out.rows() {
            let sum: f64 = out.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
        }
    }

    #[test]
    fn tanh_net_is_odd_at_zero() {
        let spec = NetworkSpec::uniform(&[2, 16, 16, 3], Activation::Tanh, OutputHead::RegressionLinear).unwrap();
        let params = init_params(&spec, 3); // biases are zero by construction
        let inputs = Matrix::zeros(1, 2);
        let out = forward(&params, &spec, &inputs).unwrap();
        for c in 0..3 {
            assert_eq!(out[(0, c)], 0.0);
        }
    }

    #[test]
    fn mse_zero_when_exact_and_hand_value_otherwise() {
        let spec = tiny_regressor();
        let params = ParamVector::new(vec![1.0, 0.0]); // identity map
        let exact = Batch {
            inputs: Matrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap(),
            targets: Targets::Values(Matrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap()),
        };
        assert_eq!(loss(&params, &spec, &exact, LossKind::Mse).unwrap(), 0.0);

        // predictions [1,3] vs targets [1,1]: (0 + 4)/2 = 2
        let off = Batch {
            inputs: Matrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap(),
            targets: Targets::Values(Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap()),
        };
        assert_eq!(loss(&params, &spec, &off, LossKind::Mse).unwrap(), 2.0);
    }

    #[test]
    fn cross_entropy_of_uniform_prediction_is_ln_n() {
        let spec = NetworkSpec::uniform(&[2, 5], Activation::Tanh, OutputHead::ClassificationSoftmax).unwrap();
        let params = ParamVector::zeros(spec.param_count()); // all logits zero -> uniform
        let batch = Batch {
            inputs: Matrix::from_rows(&[vec![0.4, -0.2]]).unwrap(),
            targets: Targets::Labels(vec![3]),
        };
        let l = loss(&params, &spec, &batch, LossKind::CrossEntropy).unwrap();
        assert!((l - 5.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let spec = tiny_regressor();
        let params = init_params(&spec, 0);
        let batch = Batch { inputs: Matrix::zeros(0, 1), targets: Targets::Values(Matrix::zeros(0, 1)) };
        assert!(matches!(loss(&params, &spec, &batch, LossKind::Mse), Err(Error::EmptyBatch)));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let spec = tiny_regressor();
        let params = init_params(&spec, 0);
        let inputs = Matrix::zeros(2, 3);
        assert!(matches!(
            forward(&params, &spec, &inputs),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    /// Central finite differences on the mean loss.
    fn numerical_grad(params: &ParamVector, spec: &NetworkSpec, batch: &Batch, kind: LossKind, h: f64) -> ParamVector {
        let mut g = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[i] -= h;
            let lp = loss(&plus, spec, batch, kind).unwrap();
            let lm = loss(&minus, spec, batch, kind).unwrap();
            g.push((lp - lm) / (2.0 * h));
        }
        ParamVector::new(g)
    }

    pub(crate) fn max_rel_error(analytic: &ParamVector, numeric: &ParamVector) -> f64 {
        analytic
            .as_slice()
            .iter()
            .zip(numeric.as_slice())
            // floor keeps finite-difference roundoff on near-zero components
            // from dominating the relative measure
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = crate::seeds::rng_from(&[11, 0xF00D]);
        for case in 0..6 {
            let (spec, kind) = if case % 2 == 0 {
                (
                    NetworkSpec::uniform(&[3, 6, 4, 2], Activation::Tanh, OutputHead::RegressionLinear).unwrap(),
                    LossKind::Mse,
                )
            } else {
                (
                    NetworkSpec::uniform(&[3, 6, 4], Activation::Tanh, OutputHead::ClassificationSoftmax).unwrap(),
                    LossKind::CrossEntropy,
                )
            };
            let params = init_params(&spec, 100 + case);
            let samples = 5;
            let inputs = Matrix::from_rows(
                &(0..samples)
                    .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let targets = match kind {
                LossKind::Mse => Targets::Values(
                    Matrix::from_rows(
                        &(0..samples)
                            .map(|_| (0..spec.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect())
                            .collect::<Vec<_>>(),
                    )
                    .unwrap(),
                ),
                LossKind::CrossEntropy => {
                    Targets::Labels((0..samples).map(|_| rng.gen_range(0..spec.output_dim())).collect())
                }
            };
            let batch = Batch { inputs, targets };
            let analytic = grad(&params, &spec, &batch, kind).unwrap();
            let numeric = numerical_grad(&params, &spec, &batch, kind, 1e-5);
            let err = max_rel_error(&analytic, &numeric);
            assert!(err < 1e-5, "case {case}: max rel error {err:.3e}");
        }
    }

    #[test]
    fn relu_gradient_matches_finite_differences() {
        let spec = NetworkSpec::uniform(&[2, 8, 2], Activation::Relu, OutputHead::RegressionLinear).unwrap();
        // fixed seed checked to keep pre-activations away from the kink
        let params = init_params(&spec, 9);
        let batch = Batch {
            inputs: Matrix::from_rows(&[vec![0.7, -0.4], vec![-1.1, 0.9]]).unwrap(),
            targets: Targets::Values(Matrix::from_rows(&[vec![0.2, -0.3], vec![1.0, 0.5]]).unwrap()),
        };
        let analytic = grad(&params, &spec, &batch, LossKind::Mse).unwrap();
        let numeric = numerical_grad(&params, &spec, &batch, LossKind::Mse, 1e-5);
        assert!(max_rel_error(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn gradient_vanishes_at_exact_fit() {
        let spec = tiny_regressor();
        let params = ParamVector::new(vec![2.0, 1.0]);
        let inputs = Matrix::from_rows(&[vec![-1.0], vec![0.5], vec![2.0]]).unwrap();
        let targets = Matrix::from_rows(&[vec![-1.0], vec![2.0], vec![5.0]]).unwrap();
        let batch = Batch { inputs, targets: Targets::Values(targets.clone()) };
        let g = grad(&params, &spec, &batch, LossKind::Mse).unwrap();
        assert!(g.norm() < 1e-10);
    }

    #[test]
    fn weighted_loss_is_linear_in_weights() {
        let spec = NetworkSpec::uniform(&[2, 4, 1], Activation::Tanh, OutputHead::RegressionLinear).unwrap();
        let params = init_params(&spec, 5);
        let batch = Batch {
            inputs: Matrix::from_rows(&[vec![0.1, 0.2], vec![-0.4, 1.0]]).unwrap(),
            targets: Targets::Values(Matrix::from_rows(&[vec![0.3], vec![-0.8]]).unwrap()),
        };
        let uniform = vec![0.5, 0.5];
        let scaled: Vec<f64> = uniform.iter().map(|w| 3.0 * w).collect();
        let (l1, g1) = loss_and_grad_weighted(&params, &spec, &batch, LossKind::Mse, &uniform).unwrap();
        let (l3, g3) = loss_and_grad_weighted(&params, &spec, &batch, LossKind::Mse, &scaled).unwrap();
        assert!((l3 - 3.0 * l1).abs() < 1e-12);
        for (a, b) in g1.as_slice().iter().zip(g3.as_slice()) {
            assert!((b - 3.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let spec = NetworkSpec::uniform(&[2, 6, 2], Activation::Tanh, OutputHead::RegressionLinear).unwrap();
        let params = init_params(&spec, 21);
        let rows = vec![vec![0.1, 0.9], vec![-0.5, 0.3], vec![1.2, -1.1], vec![0.0, 0.4]];
        let targs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.7, 0.7], vec![-0.2, 0.1]];
        let batch = Batch {
            inputs: Matrix::from_rows(&rows).unwrap(),
            targets: Targets::Values(Matrix::from_rows(&targs).unwrap()),
        };
        let perm = [2usize, 0, 3, 1];
        let batch_p = Batch {
            inputs: Matrix::from_rows(&perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>()).unwrap(),
            targets: Targets::Values(
                Matrix::from_rows(&perm.iter().map(|&i| targs[i].clone()).collect::<Vec<_>>()).unwrap(),
            ),
        };
        let a = loss(&params, &spec, &batch, LossKind::Mse).unwrap();
        let b = loss(&params, &spec, &batch_p, LossKind::Mse).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn sgd_step_and_zero_lr() {
        let params = ParamVector::new(vec![0.0, 0.0]);
        let g = ParamVector::new(vec![1.0, 2.0]);
        let (next, _) = step(&params, &g, &OptimizerState::sgd(0.1)).unwrap();
        assert_eq!(next.as_slice(), &[-0.1, -0.2]);
        let (same, _) = step(&params, &g, &OptimizerState::sgd(0.0)).unwrap();
        assert_eq!(same.as_slice(), params.as_slice());
    }

    #[test]
    fn adam_first_step_is_signed() {
        // beta1 = 0: bias-corrected first moment equals the raw gradient, so
        // the first update is -lr * g / (|g| + eps) = about -lr * sign(g)
        let params = ParamVector::new(vec![1.0, 1.0, 1.0]);
        let g = ParamVector::new(vec![0.5, -2.0, 1e-3]);
        let lr = 0.01;
        let (next, state) = step(&params, &g, &OptimizerState::adam(lr, 0.0)).unwrap();
        assert_eq!(state.step, 1);
        for (i, (&p, &gi)) in next.as_slice().iter().zip(g.as_slice()).enumerate() {
            let delta = p - 1.0;
            assert!(delta.signum() == -gi.signum(), "component {i}");
            let expected = lr * gi.abs() / (gi.abs() + 1e-8);
            assert!((delta.abs() - expected).abs() < 1e-15, "component {i}");
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut params = ParamVector::new(vec![0.0]);
        let g = ParamVector::new(vec![f64::NAN]);
        let mut state = OptimizerState::sgd(0.1);
        assert!(matches!(step_in_place(&mut params, &g, &mut state), Err(Error::NonFinite(_))));
    }
}
