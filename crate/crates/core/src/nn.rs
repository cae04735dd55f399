//! Dense feed-forward numerics: row-major matrices, layers with cached
//! forward passes, analytic backpropagation, Adam, and a finite-difference
//! gradient checker. Everything is `f64`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NETWORK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported network format version {0}")]
    FormatVersion(u32),
}

fn shape_err(context: &'static str, expected: impl ToString, actual: impl ToString) -> NnError {
    NnError::Shape {
        context,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, NnError> {
        if values.len() != rows * cols {
            return Err(shape_err("Matrix::from_vec", rows * cols, values.len()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err("Matrix::from_rows", cols, r.len()));
            }
            values.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..chunks {
        let i = 4 * k;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in 4 * chunks..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    /// d(activation)/dz at pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
            Activation::Softplus => {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `outputs × inputs`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self, NnError> {
        let layer = Self {
            weights,
            bias,
            activation,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Glorot-uniform weights in `±sqrt(6/(fan_in+fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let values = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weights: Matrix {
                rows: outputs,
                cols: inputs,
                values,
            },
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows
    }

    pub fn param_count(&self) -> usize {
        self.weights.values.len() + self.bias.len()
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.weights.values.len() != self.weights.rows * self.weights.cols {
            return Err(shape_err(
                "DenseLayer weights",
                self.weights.rows * self.weights.cols,
                self.weights.values.len(),
            ));
        }
        if self.bias.len() != self.weights.rows {
            return Err(shape_err("DenseLayer bias", self.weights.rows, self.bias.len()));
        }
        Ok(())
    }

    /// Returns `(pre_activation, activation)` for a batch `input` (`batch × inputs`).
    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, Matrix), NnError> {
        if input.cols != self.inputs() {
            return Err(shape_err("DenseLayer::forward input width", self.inputs(), input.cols));
        }
        let out = self.outputs();
        let mut pre = Matrix::zeros(input.rows, out);
        for b in 0..input.rows {
            let x = input.row(b);
            let z = pre.row_mut(b);
            for (o, zo) in z.iter_mut().enumerate() {
                *zo = self.bias[o] + dot(self.weights.row(o), x);
            }
        }
        let act = pre.map(|z| self.activation.apply(z));
        Ok((pre, act))
    }
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// `activations[0]` is the input; `activations[i + 1]` is layer `i`'s output.
    pub activations: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
}

impl ForwardPass {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("forward pass holds the input")
    }
}

pub fn forward(layers: &[DenseLayer], input: &Matrix) -> Result<ForwardPass, NnError> {
    let mut activations = Vec::with_capacity(layers.len() + 1);
    let mut pre_activations = Vec::with_capacity(layers.len());
    activations.push(input.clone());
    for layer in layers {
        let (pre, act) = layer.forward(activations.last().unwrap())?;
        pre_activations.push(pre);
        activations.push(act);
    }
    Ok(ForwardPass {
        activations,
        pre_activations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: Matrix::zeros(layer.outputs(), layer.inputs()),
            bias: vec![0.0; layer.outputs()],
        }
    }
}

/// Backpropagates `output_grad` (dLoss/d output) through `layers`.
/// Returns per-layer parameter gradients and dLoss/d input.
pub fn backward(
    layers: &[DenseLayer],
    pass: &ForwardPass,
    output_grad: &Matrix,
) -> Result<(Vec<LayerGrad>, Matrix), NnError> {
    if pass.pre_activations.len() != layers.len() || pass.activations.len() != layers.len() + 1 {
        return Err(shape_err(
            "backward cache depth",
            layers.len(),
            pass.pre_activations.len(),
        ));
    }
    if output_grad.shape() != pass.output().shape() {
        return Err(shape_err(
            "backward output gradient",
            format!("{:?}", pass.output().shape()),
            format!("{:?}", output_grad.shape()),
        ));
    }
    let mut grads: Vec<LayerGrad> = layers.iter().map(LayerGrad::zeros_like).collect();
    let mut upstream = output_grad.clone();
    for (idx, layer) in layers.iter().enumerate().rev() {
        let pre = &pass.pre_activations[idx];
        let input = &pass.activations[idx];
        let mut delta = upstream;
        for (d, &z) in delta.values.iter_mut().zip(&pre.values) {
            *d *= layer.activation.derivative(z);
        }
        let grad = &mut grads[idx];
        let mut input_grad = Matrix::zeros(input.rows, input.cols);
        for b in 0..input.rows {
            let x = input.row(b);
            let d_row = delta.row(b);
            let gx = input_grad.row_mut(b);
            for (o, &d) in d_row.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grad.bias[o] += d;
                axpy(d, x, grad.weights.row_mut(o));
                axpy(d, layer.weights.row(o), gx);
            }
        }
        upstream = input_grad;
    }
    Ok((grads, upstream))
}

/// Flat access to a model's trainable parameters, in a fixed order.
pub trait Parameters {
    fn parameter_slices(&self) -> Vec<&[f64]>;
    fn parameter_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.parameter_slices().iter().map(|s| s.len()).sum()
    }

    fn flat_parameters(&self) -> Vec<f64> {
        self.parameter_slices().concat()
    }

    fn param(&self, mut index: usize) -> f64 {
        for s in self.parameter_slices() {
            if index < s.len() {
                return s[index];
            }
            index -= s.len();
        }
        panic!("parameter index out of range");
    }

    fn set_param(&mut self, mut index: usize, value: f64) {
        for s in self.parameter_slices_mut() {
            if index < s.len() {
                s[index] = value;
                return;
            }
            index -= s.len();
        }
        panic!("parameter index out of range");
    }
}

/// Weights then bias, layer by layer.
impl Parameters for Vec<DenseLayer> {
    fn parameter_slices(&self) -> Vec<&[f64]> {
        self.iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn parameter_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut()
            .flat_map(|l| [l.weights.values.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

/// Flattens layer gradients in the same order as `Parameters for Vec<DenseLayer>`.
pub fn flatten_grads(grads: &[LayerGrad]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend_from_slice(g.weights.as_slice());
        out.extend_from_slice(&g.bias);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamConfig,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &[&[f64]], hyper: AdamConfig) -> Self {
        Self {
            hyper,
            first_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(shape_err("adam_step tensor count", state.first_moment.len(), params.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first_moment[i].len() {
            return Err(shape_err("adam_step tensor length", state.first_moment[i].len(), g.len()));
        }
    }
    state.step_count += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.hyper;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub probed: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-7)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradient from `loss_and_grad` against central
/// differences on `probes` randomly chosen parameters (all of them when
/// `probes` exceeds the parameter count).
pub fn gradient_check<P, F>(
    model: &mut P,
    loss_and_grad: F,
    epsilon: f64,
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport, NnError>
where
    P: Parameters,
    F: Fn(&P) -> (f64, Vec<f64>),
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(NnError::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let n = model.param_count();
    let (_, analytic) = loss_and_grad(model);
    if analytic.len() != n {
        return Err(shape_err("gradient_check gradient length", n, analytic.len()));
    }
    let indices: Vec<usize> = if probes >= n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, n, probes).into_vec()
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        probed: indices.len(),
    };
    for &i in &indices {
        let original = model.param(i);
        model.set_param(i, original + epsilon);
        let plus = loss_and_grad(model).0;
        model.set_param(i, original - epsilon);
        let minus = loss_and_grad(model).0;
        model.set_param(i, original);
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDocument {
    pub format_version: u32,
    pub layers: Vec<DenseLayer>,
}

impl NetworkDocument {
    pub fn new(layers: Vec<DenseLayer>) -> Self {
        Self {
            format_version: NETWORK_FORMAT_VERSION,
            layers,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.format_version != NETWORK_FORMAT_VERSION {
            return Err(NnError::FormatVersion(self.format_version));
        }
        validate_chain(&self.layers)
    }
}

/// Checks each layer and that consecutive widths line up.
pub fn validate_chain(layers: &[DenseLayer]) -> Result<(), NnError> {
    for l in layers {
        l.validate()?;
    }
    for pair in layers.windows(2) {
        if pair[0].outputs() != pair[1].inputs() {
            return Err(shape_err("layer chain", pair[0].outputs(), pair[1].inputs()));
        }
    }
    Ok(())
}
