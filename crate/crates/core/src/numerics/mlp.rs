use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use super::ops::{sigmoid, softmax_in_place};
use crate::error::{Error, Result};

/// Half-width of the uniform bias initialization.
pub const INIT_BIAS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HiddenActivation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutputActivation {
    Linear,
    Sigmoid,
    Softmax,
}

/// Layer layout of a fully connected network.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MlpSpec {
    layer_dims: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        layer_dims: Vec<usize>,
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least input and output dims, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::Config(format!("zero-width layer in {layer_dims:?}")));
        }
        Ok(Self {
            layer_dims,
            hidden_activation,
            output_activation,
        })
    }

    /// Single affine layer `d_in -> d_out`.
    pub fn linear(d_in: usize, d_out: usize, output: OutputActivation) -> Result<Self> {
        Self::new(vec![d_in, d_out], HiddenActivation::Relu, output)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }
}

/// Weights (`dims[l+1] x dims[l]`) and biases (`dims[l+1]`) for each layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let dims = spec.layer_dims();
        Self {
            weights: dims.windows(2).map(|w| DenseMatrix::zeros(w[1], w[0])).collect(),
            biases: dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
        }
    }

    /// Glorot initialization: weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases uniform in
    /// `±INIT_BIAS`.
    pub fn glorot<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut p = Self::zeros(spec);
        for (w, b) in p.weights.iter_mut().zip(&mut p.biases) {
            let r = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
            for v in w.as_mut_slice() {
                *v = rng.random_range(-r..r);
            }
            // nonzero biases keep embeddings away from the all-zero vector
            for v in b.iter_mut() {
                *v = rng.random_range(-INIT_BIAS..INIT_BIAS);
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| DenseMatrix::zeros(w.rows(), w.cols())).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn matches(&self, spec: &MlpSpec) -> bool {
        let dims = spec.layer_dims();
        self.weights.len() == spec.n_layers()
            && self.biases.len() == spec.n_layers()
            && self
                .weights
                .iter()
                .zip(&self.biases)
                .zip(dims.windows(2))
                .all(|((w, b), d)| w.shape() == (d[1], d[0]) && b.len() == d[1])
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.as_slice().len()).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Parameters in storage order: for each layer, weights row-major then bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.as_slice().iter().chain(b.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.as_mut_slice().iter_mut().chain(b.iter_mut()))
    }

    /// `self += scale * other`; shapes must agree.
    pub fn add_scaled(&mut self, other: &MlpParams, scale: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

/// Intermediate values from a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: DenseMatrix,
    pub pre_activations: Vec<DenseMatrix>,
    pub activations: Vec<DenseMatrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &DenseMatrix {
        self.activations.last().expect("trace of an MLP with no layers")
    }

    pub fn into_output(mut self) -> DenseMatrix {
        self.activations.pop().expect("trace of an MLP with no layers")
    }
}

pub fn mlp_forward(params: &MlpParams, spec: &MlpSpec, input: &DenseMatrix) -> Result<ForwardTrace> {
    if input.cols() != spec.input_dim() {
        return Err(Error::dim("mlp input (layer 0)", spec.input_dim(), input.cols()));
    }
    if !params.matches(spec) {
        return Err(Error::Config("MLP parameters do not match their spec".into()));
    }
    let n_layers = spec.n_layers();
    let mut pre_activations = Vec::with_capacity(n_layers);
    let mut activations: Vec<DenseMatrix> = Vec::with_capacity(n_layers);
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let x = if l == 0 { input } else { &activations[l - 1] };
        let mut z = x.matmul_transposed(w).map_err(|_| {
            Error::dim(format!("mlp layer {l} input"), w.cols(), x.cols())
        })?;
        z.add_row_vector(b)?;
        let a = if l + 1 == n_layers {
            apply_output(spec.output_activation, &z)
        } else {
            apply_hidden(spec.hidden_activation, &z)
        };
        pre_activations.push(z);
        activations.push(a);
    }
    Ok(ForwardTrace {
        input: input.clone(),
        pre_activations,
        activations,
    })
}

/// Gradients of a scalar loss with respect to every parameter and the input, given the
/// loss gradient with respect to the network output.
pub fn mlp_backward(
    params: &MlpParams,
    spec: &MlpSpec,
    trace: &ForwardTrace,
    upstream: &DenseMatrix,
) -> Result<(MlpParams, DenseMatrix)> {
    let out = trace.output();
    if upstream.shape() != out.shape() {
        return Err(Error::dim(
            "mlp upstream gradient",
            out.rows() * out.cols(),
            upstream.rows() * upstream.cols(),
        ));
    }
    let n_layers = spec.n_layers();
    let mut grads = params.zeros_like();
    let mut delta = output_delta(spec.output_activation, out, upstream);
    for l in (0..n_layers).rev() {
        let x = if l == 0 { &trace.input } else { &trace.activations[l - 1] };
        grads.weights[l] = delta.transposed_matmul(x)?;
        grads.biases[l] = delta.column_sums();
        let dx = delta.matmul(&params.weights[l])?;
        if l == 0 {
            return Ok((grads, dx));
        }
        delta = hidden_delta(spec.hidden_activation, &trace.pre_activations[l - 1], &trace.activations[l - 1], dx);
    }
    unreachable!("MlpSpec guarantees at least one layer")
}

fn apply_hidden(act: HiddenActivation, z: &DenseMatrix) -> DenseMatrix {
    match act {
        HiddenActivation::Relu => z.map(|v| v.max(0.0)),
        HiddenActivation::Tanh => z.map(f64::tanh),
    }
}

fn apply_output(act: OutputActivation, z: &DenseMatrix) -> DenseMatrix {
    match act {
        OutputActivation::Linear => z.clone(),
        OutputActivation::Sigmoid => z.map(sigmoid),
        OutputActivation::Softmax => {
            let mut a = z.clone();
            for i in 0..a.rows() {
                softmax_in_place(a.row_mut(i));
            }
            a
        }
    }
}

fn hidden_delta(act: HiddenActivation, z: &DenseMatrix, a: &DenseMatrix, mut grad: DenseMatrix) -> DenseMatrix {
    match act {
        HiddenActivation::Relu => {
            for (g, &zv) in grad.as_mut_slice().iter_mut().zip(z.as_slice()) {
                if zv <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        HiddenActivation::Tanh => {
            for (g, &av) in grad.as_mut_slice().iter_mut().zip(a.as_slice()) {
                *g *= 1.0 - av * av;
            }
        }
    }
    grad
}

fn output_delta(act: OutputActivation, a: &DenseMatrix, upstream: &DenseMatrix) -> DenseMatrix {
    match act {
        OutputActivation::Linear => upstream.clone(),
        OutputActivation::Sigmoid => {
            let mut d = upstream.clone();
            for (g, &av) in d.as_mut_slice().iter_mut().zip(a.as_slice()) {
                *g *= av * (1.0 - av);
            }
            d
        }
        OutputActivation::Softmax => {
            let mut d = upstream.clone();
            for i in 0..d.rows() {
                let p = a.row(i);
                let s: f64 = d.row(i).iter().zip(p).map(|(g, p)| g * p).sum();
                for (g, &pv) in d.row_mut(i).iter_mut().zip(p) {
                    *g = pv * (*g - s);
                }
            }
            d
        }
    }
}

/// A network: its layout together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

impl Network {
    pub fn new(spec: MlpSpec, params: MlpParams) -> Result<Self> {
        if !params.matches(&spec) {
            return Err(Error::Config(format!(
                "parameter shapes do not match layer dims {:?}",
                spec.layer_dims()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn glorot<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let params = MlpParams::glorot(&spec, rng);
        Self { spec, params }
    }

    pub fn forward(&self, input: &DenseMatrix) -> Result<ForwardTrace> {
        mlp_forward(&self.params, &self.spec, input)
    }

    pub fn backward(&self, trace: &ForwardTrace, upstream: &DenseMatrix) -> Result<(MlpParams, DenseMatrix)> {
        mlp_backward(&self.params, &self.spec, trace, upstream)
    }

    pub fn apply(&self, input: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward(input)?.into_output())
    }
}
