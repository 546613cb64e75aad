//! Equivariant layer primitives over neuron-feature tensors.
//!
//! A batch of decomposed gradients is carried as a `[b, N, f]` tensor whose
//! neuron axis concatenates every layer of the target network (see
//! [`GradBatch::to_tensor`](crate::gradspace::GradBatch::to_tensor)). Single
//! neuron-space elements use `b = 1`. All layers record onto a [`Tape`] with
//! parameters bound through [`ParamStore::bind`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::params::{ParamId, ParamStore};

/// Fixed multipliers on the aggregated terms of a layer.
///
/// The layers compute plain sums; a multiplier `c` on a sum term is the same
/// function as replacing that term's matrix `M` with `c·M`. Setting both
/// hints to 1 gives the literal sum formulas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregation {
    pub batch: f64,
    pub neurons: f64,
}

impl Aggregation {
    pub const SUM: Aggregation = Aggregation {
        batch: 1.0,
        neurons: 1.0,
    };

    /// Multipliers that turn sums into means for the expected sizes.
    pub fn normalized(batch_hint: usize, neurons: usize) -> Self {
        Self {
            batch: 1.0 / batch_hint.max(1) as f64,
            neurons: 1.0 / neurons.max(1) as f64,
        }
    }

    pub fn both(&self) -> f64 {
        self.batch * self.neurons
    }
}

fn width(tape: &Tape, x: Var) -> usize {
    tape.shape(x).last().copied().unwrap_or(0)
}

fn expect_width(tape: &Tape, x: Var, f: usize, what: &'static str) -> Result<()> {
    let got = width(tape, x);
    if got != f {
        return Err(Error::dims(what, &[f], &[got]));
    }
    Ok(())
}

fn expect_rank3(tape: &Tape, x: Var, what: &'static str) -> Result<[usize; 3]> {
    match *tape.shape(x) {
        [b, n, f] => Ok([b, n, f]),
        ref s => Err(Error::dims(what, &[0, 0, 0], s)),
    }
}

/// Adds a bias vector along the last axis of `x`.
fn add_bias(tape: &mut Tape, x: Var, bias: Var) -> Result<Var> {
    let mut shape = vec![1; tape.shape(x).len()];
    let f = tape.shape(bias)[0];
    *shape.last_mut().expect("rank >= 1") = f;
    let b = tape.reshape(bias, &shape)?;
    tape.add(x, b)
}

/// Linear map with `w ∈ ℝ^{f_out × f_in}` and an optional bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: usize,
    pub b: Option<usize>,
    pub f_in: usize,
    pub f_out: usize,
}

impl Dense {
    /// Weights `N(0, 1/f_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (f_in.max(1) as f64).sqrt();
        let w = store.gaussian(format!("{name}.w"), &[f_out, f_in], std, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[f_out]));
        Self {
            w: w.index(),
            b: b.map(ParamId::index),
            f_in,
            f_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        expect_width(tape, x, self.f_in, "dense input width")?;
        let y = tape.linear(x, p[self.w])?;
        match self.b {
            Some(b) => add_bias(tape, y, p[b]),
            None => Ok(y),
        }
    }
}

/// Pointwise MLP on the last axis with ReLU between layers and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointwiseMlp {
    pub layers: Vec<Dense>,
}

impl PointwiseMlp {
    /// `widths = [f_in, h₁, …, f_out]`, every layer with a bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Contract("an MLP needs at least input and output widths".into()));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn f_in(&self) -> usize {
        self.layers[0].f_in
    }

    pub fn f_out(&self) -> usize {
        self.layers[self.layers.len() - 1].f_out
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = self.layers[0].forward(tape, p, x)?;
        self.forward_tail(tape, p, y, 1)
    }

    /// Continues from the output of layer `from − 1`.
    pub fn forward_tail(&self, tape: &mut Tape, p: &[Var], mut y: Var, from: usize) -> Result<Var> {
        for layer in &self.layers[from..] {
            y = tape.relu(y)?;
            y = layer.forward(tape, p, y)?;
        }
        Ok(y)
    }
}

/// Batch-and-neuron layer:
/// `M₁x_{i,j} + M₂Σ_{i'}x_{i',j} + M₃Σ_{j'}x_{i,j'} + M₄Σ_{i',j'}x_{i',j'}`,
/// neuron sums running over every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradsBLayer {
    pub m: [usize; 4],
    pub bias: Option<usize>,
    pub agg: Aggregation,
    pub f_in: usize,
    pub f_out: usize,
}

impl GradsBLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        agg: Aggregation,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (f_in.max(1) as f64).sqrt();
        let m = [1, 2, 3, 4].map(|t| store.gaussian(format!("{name}.m{t}"), &[f_out, f_in], std, rng).index());
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), &[f_out]).index());
        Self {
            m,
            bias,
            agg,
            f_in,
            f_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        expect_rank3(tape, x, "gradient batch layer input")?;
        expect_width(tape, x, self.f_in, "gradient batch layer width")?;
        let s_batch = tape.sum_axes(x, &[0])?;
        let s_neuron = tape.sum_axes(x, &[1])?;
        let s_all = tape.sum_axes(s_batch, &[1])?;
        let s_batch = tape.scale(s_batch, self.agg.batch)?;
        let s_neuron = tape.scale(s_neuron, self.agg.neurons)?;
        let s_all = tape.scale(s_all, self.agg.both())?;
        let mut y = tape.linear(x, p[self.m[0]])?;
        for (s, m) in [(s_batch, 1), (s_neuron, 2), (s_all, 3)] {
            let t = tape.linear(s, p[self.m[m]])?;
            y = tape.add(y, t)?;
        }
        match self.bias {
            Some(b) => add_bias(tape, y, p[b]),
            None => Ok(y),
        }
    }
}

/// Batch pooling: `M₁Σ_{i'}x_{i',j} + M₂Σ_{i',j'}x_{i',j'}`, output with `b = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolLayer {
    pub m: [usize; 2],
    pub agg: Aggregation,
    pub f_in: usize,
    pub f_out: usize,
}

impl PoolLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        agg: Aggregation,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (f_in.max(1) as f64).sqrt();
        let m = [1, 2].map(|t| store.gaussian(format!("{name}.m{t}"), &[f_out, f_in], std, rng).index());
        Self { m, agg, f_in, f_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        expect_rank3(tape, x, "pool input")?;
        expect_width(tape, x, self.f_in, "pool width")?;
        let s_batch = tape.sum_axes(x, &[0])?;
        let s_all = tape.sum_axes(s_batch, &[1])?;
        let s_batch = tape.scale(s_batch, self.agg.batch)?;
        let s_all = tape.scale(s_all, self.agg.both())?;
        let a = tape.linear(s_batch, p[self.m[0]])?;
        let b = tape.linear(s_all, p[self.m[1]])?;
        tape.add(a, b)
    }
}

/// DeepSets layer over all neurons: `M₁x_j + M₂Σ_{j'}x_{j'}`, independently per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradsLayer {
    pub m: [usize; 2],
    pub bias: Option<usize>,
    pub agg: Aggregation,
    pub f_in: usize,
    pub f_out: usize,
}

impl GradsLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        agg: Aggregation,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (f_in.max(1) as f64).sqrt();
        let m = [1, 2].map(|t| store.gaussian(format!("{name}.m{t}"), &[f_out, f_in], std, rng).index());
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), &[f_out]).index());
        Self {
            m,
            bias,
            agg,
            f_in,
            f_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        expect_rank3(tape, x, "neuron layer input")?;
        expect_width(tape, x, self.f_in, "neuron layer width")?;
        let s = tape.sum_axes(x, &[1])?;
        let s = tape.scale(s, self.agg.neurons)?;
        let a = tape.linear(x, p[self.m[0]])?;
        let b = tape.linear(s, p[self.m[1]])?;
        let y = tape.add(a, b)?;
        match self.bias {
            Some(b) => add_bias(tape, y, p[b]),
            None => Ok(y),
        }
    }
}

/// Invariant readout `M Σ x` over every sample and neuron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VecLayer {
    pub m: usize,
    pub agg: Aggregation,
    pub f_in: usize,
    pub f_out: usize,
}

impl VecLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        agg: Aggregation,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (f_in.max(1) as f64).sqrt();
        let m = store.gaussian(format!("{name}.m"), &[f_out, f_in], std, rng);
        Self {
            m: m.index(),
            agg,
            f_in,
            f_out,
        }
    }

    /// Returns a vector of length `f_out`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        expect_rank3(tape, x, "readout input")?;
        expect_width(tape, x, self.f_in, "readout width")?;
        let s = tape.sum_axes(x, &[0, 1])?;
        let s = tape.scale(s, self.agg.neurons)?;
        let y = tape.linear(s, p[self.m])?;
        tape.reshape(y, &[self.f_out])
    }
}

/// Per-weight head: `W^{(l)}_{i,j} = Σ_k MLP₁([x^{(l−1)}_{k,j}, x^{(l)}_{k,i}])`,
/// `b^{(l)}_i = Σ_k MLP₂(x^{(l)}_{k,i})`.
///
/// With `b = 1` this is the single-element product layer; with a batch it is
/// the batch-summed variant. `batch_scale` multiplies the batch sums.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProdHead {
    pub mlp1: PointwiseMlp,
    pub mlp2: PointwiseMlp,
    pub f_in: usize,
    pub batch_scale: f64,
}

impl ProdHead {
    /// Both MLPs get the listed hidden widths and a scalar output.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut w1 = vec![2 * f_in];
        w1.extend_from_slice(hidden);
        w1.push(1);
        let mut w2 = vec![f_in];
        w2.extend_from_slice(hidden);
        w2.push(1);
        Ok(Self {
            mlp1: PointwiseMlp::new(store, &format!("{name}.mlp1"), &w1, rng)?,
            mlp2: PointwiseMlp::new(store, &format!("{name}.mlp2"), &w2, rng)?,
            f_in,
            batch_scale: 1.0,
        })
    }

    /// Maps `[b, Σd_l, f]` features to a flat parameter vector of `dims`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, dims: &[usize]) -> Result<Var> {
        let [b, n, _] = expect_rank3(tape, x, "product head input")?;
        expect_width(tape, x, self.f_in, "product head width")?;
        if n != dims.iter().sum::<usize>() || dims.len() < 2 {
            return Err(Error::dims("product head neurons", dims, &[n]));
        }
        let f = self.f_in;
        let first = &self.mlp1.layers[0];
        let h = first.f_out;
        if first.f_in != 2 * f || self.mlp2.f_in() != f {
            return Err(Error::dims(
                "product head MLP inputs",
                &[2 * f, f],
                &[first.f_in, self.mlp2.f_in()],
            ));
        }
        // The first layer of MLP₁ on a concatenation splits into two per-neuron maps.
        let w_in = tape.slice(p[first.w], 1, 0, f)?;
        let w_out = tape.slice(p[first.w], 1, f, f)?;
        let from_in = tape.linear(x, w_in)?;
        let mut from_out = tape.linear(x, w_out)?;
        if let Some(bias) = first.b {
            from_out = add_bias(tape, from_out, p[bias])?;
        }
        let mut offsets = vec![0];
        for d in dims {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut pieces = Vec::with_capacity(2 * (dims.len() - 1));
        for l in 1..dims.len() {
            let (d_prev, d) = (dims[l - 1], dims[l]);
            let cols = tape.slice(from_in, 1, offsets[l - 1], d_prev)?;
            let cols = tape.reshape(cols, &[b, 1, d_prev, h])?;
            let rows = tape.slice(from_out, 1, offsets[l], d)?;
            let rows = tape.reshape(rows, &[b, d, 1, h])?;
            let z = tape.add(rows, cols)?;
            let z = self.mlp1.forward_tail(tape, p, z, 1)?;
            let w = tape.sum_axes(z, &[0])?;
            pieces.push(tape.reshape(w, &[d * d_prev])?);

            let xl = tape.slice(x, 1, offsets[l], d)?;
            let bl = self.mlp2.forward(tape, p, xl)?;
            let bl = tape.sum_axes(bl, &[0])?;
            pieces.push(tape.reshape(bl, &[d])?);
        }
        let out = tape.concat(&pieces, 0)?;
        if self.batch_scale == 1.0 {
            Ok(out)
        } else {
            tape.scale(out, self.batch_scale)
        }
    }
}

/// Multi-head softmax attention along the middle axis of `[B, S, f]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub q: Vec<usize>,
    pub k: Vec<usize>,
    pub v: Vec<usize>,
    /// `[f, H·f]`
    pub o: usize,
    pub f: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        f: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Contract("attention needs at least one head".into()));
        }
        let std = 1.0 / (f.max(1) as f64).sqrt();
        let mut mk = |tag: &str, h: usize| store.gaussian(format!("{name}.{tag}{h}"), &[f, f], std, rng).index();
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        for h in 0..heads {
            q.push(mk("q", h));
            k.push(mk("k", h));
            v.push(mk("v", h));
        }
        let o = store.gaussian(
            format!("{name}.o"),
            &[f, heads * f],
            1.0 / ((heads * f).max(1) as f64).sqrt(),
            rng,
        );
        Ok(Self {
            q,
            k,
            v,
            o: o.index(),
            f,
        })
    }

    pub fn heads(&self) -> usize {
        self.q.len()
    }

    /// `out_i = M_O [Σ_k softmax_k(⟨M_Q x_k, M_K x_i⟩/√f) M_V x_k]_heads`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        expect_rank3(tape, x, "attention input")?;
        expect_width(tape, x, self.f, "attention width")?;
        let o_in = tape.shape(p[self.o])[1];
        if o_in != self.heads() * self.f {
            return Err(Error::dims("attention output mix", &[self.heads() * self.f], &[o_in]));
        }
        let scale = 1.0 / (self.f as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads());
        for h in 0..self.heads() {
            let q = tape.linear(x, p[self.q[h]])?;
            let k = tape.linear(x, p[self.k[h]])?;
            let v = tape.linear(x, p[self.v[h]])?;
            let s = tape.bmm(k, q, true)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax(s)?;
            outs.push(tape.bmm(a, v, false)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 2)?
        };
        tape.linear(cat, p[self.o])
    }
}

/// Attention block `MLP(x + Attention_b(x) + Attention_g(x))`.
///
/// `Attention_b` attends across the batch at each neuron, `Attention_g`
/// across all neurons of each sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UGradsB {
    pub att_batch: Attention,
    pub att_neurons: Attention,
    pub mlp: PointwiseMlp,
}

impl UGradsB {
    /// Attention at width `f_in`; the MLP maps `f_in → f_out → f_out`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            att_batch: Attention::new(store, &format!("{name}.att_b"), f_in, heads, rng)?,
            att_neurons: Attention::new(store, &format!("{name}.att_g"), f_in, heads, rng)?,
            mlp: PointwiseMlp::new(store, &format!("{name}.mlp"), &[f_in, f_out, f_out], rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        expect_rank3(tape, x, "attention block input")?;
        let xt = tape.permute(x, &[1, 0, 2])?;
        let ab = self.att_batch.forward(tape, p, xt)?;
        let ab = tape.permute(ab, &[1, 0, 2])?;
        let ag = self.att_neurons.forward(tape, p, x)?;
        let s = tape.add(x, ab)?;
        let s = tape.add(s, ag)?;
        self.mlp.forward(tape, p, s)
    }
}
