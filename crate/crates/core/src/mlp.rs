//! Target MLPs: evaluation, rank-1 gradient decomposition and the
//! hidden-neuron permutation action on parameters and decompositions.
//!
//! Parameters are stored flat in the order `W₁ (row-major, d₁×d₀), b₁, …,
//! W_L, b_L`. Layer `l` computes `u⁽ˡ⁾ = W_l a⁽ˡ⁻¹⁾ + b_l` and
//! `a⁽ˡ⁾ = σ(u⁽ˡ⁾)`, except the output layer which is linear.
//!
//! For a per-sample loss the weight gradient of layer `l` is the outer
//! product `g⁽ˡ⁾ a⁽ˡ⁻¹⁾ᵀ` and the bias gradient is `g⁽ˡ⁾`, where `g⁽ˡ⁾` is the
//! derivative with respect to `u⁽ˡ⁾`. [`backward_decomposed`] returns the
//! pairs `(a⁽ˡ⁾, g⁽ˡ⁾)` instead of the expanded gradient.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Unary, Var};
use crate::perm::HiddenPerm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Sine,
}

impl Activation {
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Activation::Relu => u.max(0.0),
            Activation::Sine => u.sin(),
        }
    }

    pub fn derivative(self, u: f64) -> f64 {
        match self {
            Activation::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sine => u.cos(),
        }
    }

    pub(crate) fn unary(self) -> Unary {
        match self {
            Activation::Relu => Unary::Relu,
            Activation::Sine => Unary::Sin,
        }
    }
}

/// A vector shaped like the parameters of an MLP with the given dims.
///
/// Used for parameters, per-sample gradients, model outputs and curvature
/// targets alike.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    dims: Vec<usize>,
    data: Vec<f64>,
}

/// A per-sample gradient, expanded to parameter shape.
pub type FlatGradient = ParamVector;

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Contract(format!(
            "need at least two non-empty layers, got dims {dims:?}"
        )));
    }
    Ok(())
}

impl ParamVector {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![0.0; param_count(dims)],
        })
    }

    pub fn from_data(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != param_count(dims) {
            return Err(Error::dims("parameter vector", &[param_count(dims)], &[data.len()]));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of weight layers `L`.
    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Offset of `W_l` (for `l` in `1..=L`).
    fn weight_offset(&self, l: usize) -> usize {
        param_count(&self.dims[..l])
    }

    fn bias_offset(&self, l: usize) -> usize {
        self.weight_offset(l) + self.dims[l] * self.dims[l - 1]
    }

    /// `W_l` as a row-major `d_l × d_{l−1}` slice.
    pub fn weight(&self, l: usize) -> &[f64] {
        let o = self.weight_offset(l);
        &self.data[o..o + self.dims[l] * self.dims[l - 1]]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut [f64] {
        let o = self.weight_offset(l);
        let n = self.dims[l] * self.dims[l - 1];
        &mut self.data[o..o + n]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let o = self.bias_offset(l);
        &self.data[o..o + self.dims[l]]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let o = self.bias_offset(l);
        let n = self.dims[l];
        &mut self.data[o..o + n]
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// The action of `h` on parameter-shaped data:
    /// `W'_l[σ_l(i), σ_{l−1}(j)] = W_l[i, j]`, `b'_l[σ_l(i)] = b_l[i]`, with
    /// the input and output layers left in place.
    pub fn act(&self, h: &HiddenPerm) -> Result<ParamVector> {
        h.check(&self.dims)?;
        let mut out = self.clone();
        for l in 1..=self.num_layers() {
            let (rows, cols) = (self.dims[l], self.dims[l - 1]);
            let row_map = |i: usize| h.layer(l).map_or(i, |p| p.map(i));
            let col_map = |j: usize| h.layer(l - 1).map_or(j, |p| p.map(j));
            let w = self.weight(l);
            let wo = out.weight_mut(l);
            for i in 0..rows {
                for j in 0..cols {
                    wo[row_map(i) * cols + col_map(j)] = w[i * cols + j];
                }
            }
            let b = self.bias(l);
            let bo = out.bias_mut(l);
            for i in 0..rows {
                bo[row_map(i)] = b[i];
            }
        }
        Ok(out)
    }
}

/// Weights and biases of a target network plus its hidden activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub activation: Activation,
    pub values: ParamVector,
}

impl MlpParams {
    pub fn new(activation: Activation, values: ParamVector) -> Self {
        Self { activation, values }
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        Ok(Self::new(activation, ParamVector::zeros(dims)?))
    }

    /// Every weight and bias drawn i.i.d. from N(0, 1).
    pub fn standard_normal<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut values = ParamVector::zeros(dims)?;
        for v in values.data_mut() {
            *v = rng.sample(StandardNormal);
        }
        Ok(Self::new(activation, values))
    }

    pub fn dims(&self) -> &[usize] {
        self.values.dims()
    }

    pub fn num_layers(&self) -> usize {
        self.values.num_layers()
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn act(&self, h: &HiddenPerm) -> Result<MlpParams> {
        Ok(Self::new(self.activation, self.values.act(h)?))
    }
}

/// Activations `a⁽⁰⁾…a⁽ᴸ⁾` and pre-activations `u⁽⁰⁾…u⁽ᴸ⁾` of one forward pass
/// (`u⁽⁰⁾ = a⁽⁰⁾ = x`).
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub acts: Vec<Vec<f64>>,
    pub preacts: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }
}

pub fn forward(params: &MlpParams, x: &[f64]) -> Result<ForwardTrace> {
    let dims = params.dims();
    if x.len() != dims[0] {
        return Err(Error::dims("mlp input", &[dims[0]], &[x.len()]));
    }
    let l_max = params.num_layers();
    let mut acts = vec![x.to_vec()];
    let mut preacts = vec![x.to_vec()];
    for l in 1..=l_max {
        let (rows, cols) = (dims[l], dims[l - 1]);
        let w = params.values.weight(l);
        let b = params.values.bias(l);
        let prev = &acts[l - 1];
        let u: Vec<f64> = (0..rows)
            .map(|i| {
                let mut s = b[i];
                for j in 0..cols {
                    s += w[i * cols + j] * prev[j];
                }
                s
            })
            .collect();
        let a = if l == l_max {
            u.clone()
        } else {
            u.iter().map(|&v| params.activation.apply(v)).collect()
        };
        preacts.push(u);
        acts.push(a);
    }
    Ok(ForwardTrace { acts, preacts })
}

/// Per-layer pairs `(a⁽ˡ⁾, g⁽ˡ⁾)` for `l = 0..=L`.
///
/// `g⁽⁰⁾` is the tangent with respect to the input itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposedGradient {
    pub acts: Vec<Vec<f64>>,
    pub tangents: Vec<Vec<f64>>,
}

impl DecomposedGradient {
    pub fn dims(&self) -> Vec<usize> {
        self.acts.iter().map(Vec::len).collect()
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            acts: dims.iter().map(|&d| vec![0.0; d]).collect(),
            tangents: dims.iter().map(|&d| vec![0.0; d]).collect(),
        }
    }

    fn check(&self) -> Result<()> {
        let dims = self.dims();
        let tdims: Vec<usize> = self.tangents.iter().map(Vec::len).collect();
        if dims != tdims {
            return Err(Error::dims("decomposed gradient", &dims, &tdims));
        }
        check_dims(&dims)
    }

    /// Weight block `g⁽ˡ⁾ a⁽ˡ⁻¹⁾ᵀ` and bias block `g⁽ˡ⁾` for every layer.
    pub fn expand(&self) -> Result<FlatGradient> {
        self.check()?;
        let dims = self.dims();
        let mut out = ParamVector::zeros(&dims)?;
        for l in 1..dims.len() {
            let g = &self.tangents[l];
            let a = &self.acts[l - 1];
            let w = out.weight_mut(l);
            for (i, gi) in g.iter().enumerate() {
                for (j, aj) in a.iter().enumerate() {
                    w[i * a.len() + j] = gi * aj;
                }
            }
            out.bias_mut(l).copy_from_slice(g);
        }
        Ok(out)
    }

    /// Hidden-layer pairs permuted by `h`; layers `0` and `L` untouched.
    pub fn act(&self, h: &HiddenPerm) -> Result<DecomposedGradient> {
        self.check()?;
        h.check(&self.dims())?;
        let mut out = self.clone();
        for l in 0..self.acts.len() {
            if let Some(p) = h.layer(l) {
                out.acts[l] = p.apply_rows(&self.acts[l], 1);
                out.tangents[l] = p.apply_rows(&self.tangents[l], 1);
            }
        }
        Ok(out)
    }
}

/// Backpropagates `seed = ∂ℓ/∂y` and returns the rank-1 factors of every layer.
pub fn backward_decomposed(params: &MlpParams, x: &[f64], seed: &[f64]) -> Result<DecomposedGradient> {
    let trace = forward(params, x)?;
    backward_from_trace(params, &trace, seed)
}

pub fn backward_from_trace(params: &MlpParams, trace: &ForwardTrace, seed: &[f64]) -> Result<DecomposedGradient> {
    let dims = params.dims();
    let l_max = params.num_layers();
    if seed.len() != dims[l_max] {
        return Err(Error::dims("output seed", &[dims[l_max]], &[seed.len()]));
    }
    let mut tangents = vec![Vec::new(); l_max + 1];
    tangents[l_max] = seed.to_vec();
    for l in (0..l_max).rev() {
        let (rows, cols) = (dims[l + 1], dims[l]);
        let w = params.values.weight(l + 1);
        let up = &tangents[l + 1];
        let mut g: Vec<f64> = (0..cols)
            .map(|j| (0..rows).map(|i| w[i * cols + j] * up[i]).sum())
            .collect();
        if l > 0 {
            for (gj, &u) in g.iter_mut().zip(&trace.preacts[l]) {
                *gj *= params.activation.derivative(u);
            }
        }
        tangents[l] = g;
    }
    Ok(DecomposedGradient {
        acts: trace.acts.clone(),
        tangents,
    })
}

/// Seed for the squared-error loss `‖y − y*‖²`.
pub fn mse_seed(y: &[f64], target: &[f64]) -> Vec<f64> {
    y.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect()
}

/// Leaves of an MLP recorded on a tape: `(W_l, b_l)` for `l = 1..=L`.
pub struct RecordedMlp {
    pub layers: Vec<(Var, Var)>,
    pub input: Var,
    pub output: Var,
}

/// Records the forward pass on `tape` with every weight and bias as a leaf.
pub fn record_forward(tape: &mut Tape, params: &MlpParams, x: &[f64]) -> Result<RecordedMlp> {
    let dims = params.dims().to_vec();
    if x.len() != dims[0] {
        return Err(Error::dims("mlp input", &[dims[0]], &[x.len()]));
    }
    let input = tape.leaf(Tensor::vector(x.to_vec()));
    let mut a = input;
    let mut layers = Vec::new();
    let l_max = params.num_layers();
    for l in 1..=l_max {
        let w = tape.leaf(Tensor::new(
            vec![dims[l], dims[l - 1]],
            params.values.weight(l).to_vec(),
        )?);
        let b = tape.leaf(Tensor::vector(params.values.bias(l).to_vec()));
        let wa = tape.linear(a, w)?;
        let u = tape.add(wa, b)?;
        a = if l == l_max {
            u
        } else {
            tape.unary(u, params.activation.unary())?
        };
        layers.push((w, b));
    }
    Ok(RecordedMlp {
        layers,
        input,
        output: a,
    })
}
