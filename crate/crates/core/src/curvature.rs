//! Fisher information, damped natural gradient, pruning saliencies, and a
//! pair of gradient sets that share a mean but not a Fisher matrix.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{backward_decomposed, Activation, DecomposedGradient, FlatGradient, MlpParams, ParamVector};
use crate::numerics::linalg::damped_factor;
use crate::numerics::Tensor;

/// Largest parameter count for which a dense Fisher matrix is formed.
pub const MAX_DENSE_PARAMS: usize = 4096;

/// Default damping.
pub const DEFAULT_EPS: f64 = 1e-3;

/// Dense empirical Fisher matrix over the flat parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherMatrix {
    matrix: Tensor,
}

impl FisherMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.matrix.at2(i, i)).collect()
    }
}

fn check_grads(grads: &[FlatGradient]) -> Result<usize> {
    let first = grads
        .first()
        .ok_or_else(|| Error::Contract("curvature estimates need at least one gradient".into()))?;
    for g in grads {
        if g.dims() != first.dims() {
            return Err(Error::dims("gradient shapes", first.dims(), g.dims()));
        }
    }
    Ok(first.len())
}

/// `F = (1/n) Σ_k ∇_k ∇_kᵀ`. Each entry sums over `k` in order, then divides by `n`.
pub fn fisher(grads: &[FlatGradient]) -> Result<FisherMatrix> {
    let p = check_grads(grads)?;
    if p > MAX_DENSE_PARAMS {
        return Err(Error::Contract(format!(
            "dense Fisher matrix capped at {MAX_DENSE_PARAMS} parameters, got {p}"
        )));
    }
    let n = grads.len() as f64;
    let mut m = vec![0.0; p * p];
    for g in grads {
        let v = g.data();
        for i in 0..p {
            let vi = v[i];
            let row = &mut m[i * p..i * p + p];
            for j in i..p {
                row[j] += vi * v[j];
            }
        }
    }
    for i in 0..p {
        for j in i..p {
            let x = m[i * p + j] / n;
            m[i * p + j] = x;
            m[j * p + i] = x;
        }
    }
    Ok(FisherMatrix {
        matrix: Tensor::new(vec![p, p], m)?,
    })
}

/// Diagonal of [`fisher`] without forming the matrix; bitwise equal to it.
pub fn fisher_diag(grads: &[FlatGradient]) -> Result<Vec<f64>> {
    let p = check_grads(grads)?;
    let mut d = vec![0.0; p];
    for g in grads {
        for (acc, v) in d.iter_mut().zip(g.data()) {
            *acc += v * v;
        }
    }
    let n = grads.len() as f64;
    d.iter_mut().for_each(|x| *x /= n);
    Ok(d)
}

/// `(F + εI)⁻¹ ∇`.
pub fn natural_gradient(nabla: &FlatGradient, grads: &[FlatGradient], eps: f64) -> Result<FlatGradient> {
    check_grads(grads)?;
    if nabla.dims() != grads[0].dims() {
        return Err(Error::dims("natural gradient", grads[0].dims(), nabla.dims()));
    }
    let f = fisher(grads)?;
    let chol = damped_factor(f.matrix(), eps)?;
    let mut x = nabla.data().to_vec();
    chol.solve_in_place(&mut x);
    ParamVector::from_data(nabla.dims(), x)
}

/// `θ² ⊙ diag(F)`.
pub fn obd_saliency(theta: &MlpParams, grads: &[FlatGradient]) -> Result<ParamVector> {
    check_grads(grads)?;
    if theta.dims() != grads[0].dims() {
        return Err(Error::dims("saliency", theta.dims(), grads[0].dims()));
    }
    let d = fisher_diag(grads)?;
    let s = theta.values.data().iter().zip(&d).map(|(t, f)| t * t * f).collect();
    ParamVector::from_data(theta.dims(), s)
}

/// `θ² ⊘ diag((F + εI)⁻¹)`.
pub fn obs_saliency(theta: &MlpParams, grads: &[FlatGradient], eps: f64) -> Result<ParamVector> {
    check_grads(grads)?;
    if theta.dims() != grads[0].dims() {
        return Err(Error::dims("saliency", theta.dims(), grads[0].dims()));
    }
    let f = fisher(grads)?;
    let inv_diag = damped_factor(f.matrix(), eps)?.inverse_diagonal();
    let s = theta
        .values
        .data()
        .iter()
        .zip(&inv_diag)
        .map(|(t, q)| t * t / q)
        .collect();
    ParamVector::from_data(theta.dims(), s)
}

/// Two gradient sets on a single-layer network `[n, 1]` with identical
/// (zero) mean gradients and Fisher matrices `(1/n)I` and `(4/n)I`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prop1Pair {
    pub dims: Vec<usize>,
    pub first: Vec<DecomposedGradient>,
    pub second: Vec<DecomposedGradient>,
}

impl Prop1Pair {
    pub fn first_flat(&self) -> Result<Vec<FlatGradient>> {
        self.first.iter().map(DecomposedGradient::expand).collect()
    }

    pub fn second_flat(&self) -> Result<Vec<FlatGradient>> {
        self.second.iter().map(DecomposedGradient::expand).collect()
    }
}

/// Builds the pair from `4n` samples per set: inputs `±√n·e_i` with output
/// tangents `±1/√n` (first set) or `±2/√n` (second set), all sign combinations.
/// The sample order is shuffled by `seed`.
pub fn prop1_pair(n: usize, seed: u64) -> Result<Prop1Pair> {
    if n < 2 {
        return Err(Error::Contract(format!("the separating pair needs n >= 2, got {n}")));
    }
    let dims = vec![n, 1];
    let zero = MlpParams::zeros(&dims, Activation::Relu)?;
    let c = (n as f64).sqrt();
    let mut first = Vec::with_capacity(4 * n);
    let mut second = Vec::with_capacity(4 * n);
    for i in 0..n {
        for s_in in [1.0, -1.0] {
            for s_out in [1.0, -1.0] {
                let mut x = vec![0.0; n];
                x[i] = s_in * c;
                first.push(backward_decomposed(&zero, &x, &[s_out / c])?);
                second.push(backward_decomposed(&zero, &x, &[2.0 * s_out / c])?);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..first.len()).collect();
    order.shuffle(&mut rng);
    let pick = |v: &[DecomposedGradient]| order.iter().map(|&k| v[k].clone()).collect();
    Ok(Prop1Pair {
        first: pick(&first),
        second: pick(&second),
        dims,
    })
}
