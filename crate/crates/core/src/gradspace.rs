//! Batches of decomposed gradients and the action of `S_b × G` on them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{DecomposedGradient, FlatGradient, ParamVector};
use crate::numerics::Tensor;
use crate::perm::{HiddenPerm, Permutation};

/// Width of the positional code appended to every neuron by default.
pub const DEFAULT_PE_WIDTH: usize = 16;

/// Default tolerance for [`GradBatch::degenerate_witness`].
pub const DEFAULT_DEGENERATE_TOL: f64 = 1e-9;

/// A batch of `b` decomposed gradients with `f` features per neuron.
///
/// Block `l` has shape `[b, d_l, f]`. Freshly stacked batches carry two
/// channels: activation (0) and pre-activation tangent (1).
#[derive(Clone, Debug, PartialEq)]
pub struct GradBatch {
    dims: Vec<usize>,
    batch: usize,
    features: usize,
    blocks: Vec<Tensor>,
}

/// An element `(τ, h)` of `S_b × G`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupElement {
    pub batch: Permutation,
    pub hidden: HiddenPerm,
}

impl GroupElement {
    pub fn identity(batch: usize, dims: &[usize]) -> Self {
        Self {
            batch: Permutation::identity(batch),
            hidden: HiddenPerm::identity(dims),
        }
    }

    pub fn random<R: Rng + ?Sized>(batch: usize, dims: &[usize], rng: &mut R) -> Self {
        Self {
            batch: Permutation::random(batch, rng),
            hidden: HiddenPerm::random(dims, rng),
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &GroupElement) -> Self {
        Self {
            batch: self.batch.compose(&other.batch),
            hidden: self.hidden.compose(&other.hidden),
        }
    }

    pub fn inverse(&self) -> Self {
        Self {
            batch: self.batch.inverse(),
            hidden: self.hidden.inverse(),
        }
    }
}

/// Two hidden neurons whose batch-summed features coincide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegenerateWitness {
    pub layer: usize,
    pub first: usize,
    pub second: usize,
}

impl GradBatch {
    pub fn new(dims: &[usize], batch: usize, features: usize, blocks: Vec<Tensor>) -> Result<Self> {
        if blocks.len() != dims.len() {
            return Err(Error::dims("gradient batch layers", &[dims.len()], &[blocks.len()]));
        }
        for (l, b) in blocks.iter().enumerate() {
            let want = [batch, dims[l], features];
            if b.shape() != want {
                return Err(Error::dims("gradient batch block", &want, b.shape()));
            }
        }
        Ok(Self {
            dims: dims.to_vec(),
            batch,
            features,
            blocks,
        })
    }

    pub fn zeros(dims: &[usize], batch: usize, features: usize) -> Self {
        Self {
            dims: dims.to_vec(),
            batch,
            features,
            blocks: dims.iter().map(|&d| Tensor::zeros(&[batch, d, features])).collect(),
        }
    }

    /// Stacks per-sample decompositions; channel 0 holds `a`, channel 1 holds `g`.
    pub fn stack(gammas: &[DecomposedGradient]) -> Result<Self> {
        let first = gammas
            .first()
            .ok_or_else(|| Error::Contract("cannot stack an empty set of gradients".into()))?;
        let dims = first.dims();
        let b = gammas.len();
        let mut out = Self::zeros(&dims, b, 2);
        for (i, gamma) in gammas.iter().enumerate() {
            let gd = gamma.dims();
            if gd != dims {
                return Err(Error::dims("stack", &dims, &gd));
            }
            for (l, &d) in dims.iter().enumerate() {
                if gamma.tangents[l].len() != d {
                    return Err(Error::dims("stack tangents", &[d], &[gamma.tangents[l].len()]));
                }
                let blk = out.blocks[l].data_mut();
                for j in 0..d {
                    blk[(i * d + j) * 2] = gamma.acts[l][j];
                    blk[(i * d + j) * 2 + 1] = gamma.tangents[l][j];
                }
            }
        }
        Ok(out)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn blocks(&self) -> &[Tensor] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Tensor] {
        &mut self.blocks
    }

    /// Total neuron count `Σ d_l`.
    pub fn neurons(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn value(&self, layer: usize, sample: usize, neuron: usize, channel: usize) -> f64 {
        let d = self.dims[layer];
        self.blocks[layer].data()[(sample * d + neuron) * self.features + channel]
    }

    /// Sample `i` read back as a decomposed gradient (channels 0 and 1).
    pub fn sample(&self, i: usize) -> Result<DecomposedGradient> {
        if self.features < 2 || i >= self.batch {
            return Err(Error::Contract(format!(
                "sample {i} of a batch with b={} f={}",
                self.batch, self.features
            )));
        }
        let mut out = DecomposedGradient::zeros(&self.dims);
        for (l, &d) in self.dims.iter().enumerate() {
            for j in 0..d {
                out.acts[l][j] = self.value(l, i, j, 0);
                out.tangents[l][j] = self.value(l, i, j, 1);
            }
        }
        Ok(out)
    }

    /// `((τ, h)·x)[τ(i), h_l(j), :] = x[i, j, :]`; layers 0 and L keep their neuron order.
    pub fn act(&self, g: &GroupElement) -> Result<GradBatch> {
        if g.batch.len() != self.batch {
            return Err(Error::dims("batch permutation", &[self.batch], &[g.batch.len()]));
        }
        g.hidden.check(&self.dims)?;
        let f = self.features;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (l, blk) in self.blocks.iter().enumerate() {
            let d = self.dims[l];
            let mut out = vec![0.0; blk.len()];
            let src = blk.data();
            for i in 0..self.batch {
                let ti = g.batch.map(i);
                for j in 0..d {
                    let hj = g.hidden.layer(l).map_or(j, |p| p.map(j));
                    let s = (i * d + j) * f;
                    let t = (ti * d + hj) * f;
                    out[t..t + f].copy_from_slice(&src[s..s + f]);
                }
            }
            blocks.push(Tensor::new(blk.shape().to_vec(), out)?);
        }
        Ok(Self {
            dims: self.dims.clone(),
            batch: self.batch,
            features: f,
            blocks,
        })
    }

    /// Appends a `k`-channel sinusoidal code to every neuron.
    ///
    /// Hidden neurons receive a code of their layer index, input and output
    /// neurons a code of their position within the layer. The three groups
    /// are placed on disjoint thirds of the unit interval so no two of them
    /// share a code.
    pub fn positional_encode(&self, k: usize) -> Result<GradBatch> {
        if !k.is_multiple_of(2) {
            return Err(Error::Contract(format!("encoding width must be even, got {k}")));
        }
        let codes = positional_codes(&self.dims, k);
        let f = self.features;
        let fo = f + k;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (l, blk) in self.blocks.iter().enumerate() {
            let d = self.dims[l];
            let mut out = Vec::with_capacity(self.batch * d * fo);
            for i in 0..self.batch {
                for j in 0..d {
                    let s = (i * d + j) * f;
                    out.extend_from_slice(&blk.data()[s..s + f]);
                    out.extend_from_slice(&codes[l][j]);
                }
            }
            blocks.push(Tensor::new(vec![self.batch, d, fo], out)?);
        }
        Ok(Self {
            dims: self.dims.clone(),
            batch: self.batch,
            features: fo,
            blocks,
        })
    }

    /// Gradient of the average loss, `(1/b) Σ_i expand(γ_i)`.
    pub fn average_gradient(&self) -> Result<FlatGradient> {
        if self.features != 2 {
            return Err(Error::Contract(format!(
                "average gradient needs the two raw channels, batch has f={}",
                self.features
            )));
        }
        let mut acc = ParamVector::zeros(&self.dims)?;
        for i in 0..self.batch {
            let e = self.sample(i)?.expand()?;
            for (a, v) in acc.data_mut().iter_mut().zip(e.data()) {
                *a += v;
            }
        }
        let inv = 1.0 / self.batch as f64;
        acc.data_mut().iter_mut().for_each(|v| *v *= inv);
        Ok(acc)
    }

    /// Finds two neurons of one hidden layer whose batch-summed feature vectors
    /// agree within `tol` in the ∞-norm.
    pub fn degenerate_witness(&self, tol: f64) -> Option<DegenerateWitness> {
        let f = self.features;
        let l_max = self.dims.len() - 1;
        for l in 1..l_max {
            let d = self.dims[l];
            let mut sums = vec![0.0; d * f];
            for i in 0..self.batch {
                let row = &self.blocks[l].data()[i * d * f..(i + 1) * d * f];
                for (s, v) in sums.iter_mut().zip(row) {
                    *s += v;
                }
            }
            for i1 in 0..d {
                for i2 in i1 + 1..d {
                    let gap = (0..f)
                        .map(|c| (sums[i1 * f + c] - sums[i2 * f + c]).abs())
                        .fold(0.0, f64::max);
                    if gap <= tol {
                        return Some(DegenerateWitness {
                            layer: l,
                            first: i1,
                            second: i2,
                        });
                    }
                }
            }
        }
        None
    }

    pub fn in_degenerate_set(&self, tol: f64) -> bool {
        self.degenerate_witness(tol).is_some()
    }

    /// All layers concatenated along the neuron axis: `[b, Σ d_l, f]`.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.neurons();
        let f = self.features;
        let mut out = Vec::with_capacity(self.batch * n * f);
        for i in 0..self.batch {
            for (l, blk) in self.blocks.iter().enumerate() {
                let d = self.dims[l];
                out.extend_from_slice(&blk.data()[i * d * f..(i + 1) * d * f]);
            }
        }
        Tensor::new(vec![self.batch, n, f], out).expect("consistent")
    }

    /// Inverse of [`GradBatch::to_tensor`].
    pub fn from_tensor(dims: &[usize], t: &Tensor) -> Result<Self> {
        let n: usize = dims.iter().sum();
        let [b, tn, f] = *t.shape() else {
            return Err(Error::dims("gradient batch tensor", &[0, n, 0], t.shape()));
        };
        if tn != n {
            return Err(Error::dims("gradient batch tensor", &[b, n, f], t.shape()));
        }
        let mut out = Self::zeros(dims, b, f);
        for i in 0..b {
            let mut off = 0;
            for (l, &d) in dims.iter().enumerate() {
                let src = &t.data()[(i * n + off) * f..(i * n + off + d) * f];
                out.blocks[l].data_mut()[i * d * f..(i + 1) * d * f].copy_from_slice(src);
                off += d;
            }
        }
        Ok(out)
    }
}

/// Sinusoidal code of a position `t`: `sin(2^m π t), cos(2^m π t)` interleaved.
pub fn sinusoid(t: f64, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k);
    for m in 0..k / 2 {
        let w = (1u64 << m) as f64 * std::f64::consts::PI * t;
        out.push(w.sin());
        out.push(w.cos());
    }
    out
}

/// Per layer, per neuron positional codes of width `k`.
pub fn positional_codes(dims: &[usize], k: usize) -> Vec<Vec<Vec<f64>>> {
    let l_max = dims.len() - 1;
    let third = 1.0 / 3.0;
    dims.iter()
        .enumerate()
        .map(|(l, &d)| {
            (0..d)
                .map(|j| {
                    let t = if l == 0 {
                        third * j as f64 / d as f64
                    } else if l == l_max {
                        2.0 * third + third * j as f64 / d as f64
                    } else {
                        third + third * l as f64 / l_max as f64
                    };
                    sinusoid(t, k)
                })
                .collect()
        })
        .collect()
}
