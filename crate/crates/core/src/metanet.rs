//! Complete metanetworks: the equivariant model, its attention variant, the
//! invariant readout, and three non-equivariant baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradspace::{positional_codes, GradBatch};
use crate::layers::{
    Aggregation, Dense, GradsBLayer, GradsLayer, PointwiseMlp, PoolLayer, ProdHead, UGradsB, VecLayer,
};
use crate::mlp::{param_count, ParamVector};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Gradmetanet,
    GradmetanetPp,
    Invariant,
    BatchAsym,
    NeuronAsym,
    MlpConcat,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Gradmetanet,
        Variant::GradmetanetPp,
        Variant::Invariant,
        Variant::BatchAsym,
        Variant::NeuronAsym,
        Variant::MlpConcat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gradmetanet => "gradmetanet",
            Variant::GradmetanetPp => "gradmetanet_pp",
            Variant::Invariant => "invariant",
            Variant::BatchAsym => "batch_asym",
            Variant::NeuronAsym => "neuron_asym",
            Variant::MlpConcat => "mlp_concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown model variant `{s}`")))
    }

    /// True when the output is a parameter-shaped vector.
    pub fn predicts_parameters(self) -> bool {
        self != Variant::Invariant
    }
}

/// How the aggregated terms of the equivariant layers are scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Plain sums.
    Sum,
    /// Sums divided by the expected batch size and the neuron count.
    Normalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Batch-and-neuron layers (attention blocks for the `++` variant).
    pub k1: usize,
    /// Neuron-only layers after pooling.
    pub k2: usize,
    /// Hidden feature width.
    pub hidden: usize,
    /// Positional-encoding width.
    pub pe_width: usize,
    pub heads: usize,
    /// Hidden widths of the product-head MLPs; empty means `[hidden, hidden]`.
    pub head_hidden: Vec<usize>,
    /// Output width of the invariant readout.
    pub invariant_out: usize,
    /// Raw per-neuron input channels.
    pub input_features: usize,
    /// Expected gradient-set size. Fixed for the baselines that flatten the batch axis.
    pub batch: usize,
    pub aggregation: AggregationMode,
    /// Hidden layers of the flattened-MLP baseline.
    pub mlp_hidden_layers: usize,
    /// Parameter count the config was fitted to, if any.
    pub budget: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Gradmetanet,
            k1: 2,
            k2: 1,
            hidden: 32,
            pe_width: crate::gradspace::DEFAULT_PE_WIDTH,
            heads: 8,
            head_hidden: Vec::new(),
            invariant_out: 32,
            input_features: 2,
            batch: 128,
            aggregation: AggregationMode::Normalized,
            mlp_hidden_layers: 2,
            budget: None,
        }
    }
}

impl ModelConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    fn head_widths(&self) -> Vec<usize> {
        if self.head_hidden.is_empty() {
            vec![self.hidden, self.hidden]
        } else {
            self.head_hidden.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch == 0 || self.input_features == 0 {
            return Err(Error::Contract("widths and batch size must be positive".into()));
        }
        if !self.pe_width.is_multiple_of(2) {
            return Err(Error::Contract("positional-encoding width must be even".into()));
        }
        if self.variant == Variant::GradmetanetPp && (self.k1 == 0 || self.heads == 0) {
            return Err(Error::Contract(
                "the attention variant needs k1 >= 1 and heads >= 1".into(),
            ));
        }
        if self.head_hidden.contains(&0) {
            return Err(Error::Contract("product-head widths must be positive".into()));
        }
        Ok(())
    }

    /// Searches the hidden width whose parameter count on `dims` is closest to `budget`.
    ///
    /// The flattened-MLP baseline first tries the configured depth and drops to
    /// a single hidden layer when even width 1 overshoots.
    pub fn fit_budget(variant: Variant, dims: &[usize], budget: usize) -> Result<Self> {
        let mut base = Self::for_variant(variant);
        base.budget = Some(budget);
        let count = |c: &ModelConfig| -> Result<usize> { Ok(build(c, dims, 0)?.num_params()) };
        if variant == Variant::MlpConcat {
            let mut best: Option<(usize, ModelConfig)> = None;
            for layers in (1..=base.mlp_hidden_layers).rev() {
                for h in 1..=64 {
                    let c = ModelConfig {
                        hidden: h,
                        mlp_hidden_layers: layers,
                        ..base.clone()
                    };
                    let n = count(&c)?;
                    let gap = n.abs_diff(budget);
                    if best.as_ref().is_none_or(|(g, _)| gap < *g) {
                        best = Some((gap, c));
                    }
                    if n > budget {
                        break;
                    }
                }
                if best.as_ref().is_some_and(|(g, _)| *g * 10 <= budget) {
                    break;
                }
            }
            return Ok(best.expect("searched at least one width").1);
        }
        let mut best: Option<(usize, ModelConfig)> = None;
        for h in 1..=256 {
            let c = ModelConfig {
                hidden: h,
                invariant_out: h,
                ..base.clone()
            };
            let n = count(&c)?;
            let gap = n.abs_diff(budget);
            if best.as_ref().is_none_or(|(g, _)| gap < *g) {
                best = Some((gap, c));
            }
            if n > budget {
                break;
            }
        }
        Ok(best.expect("searched at least one width").1)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Head {
    Prod(ProdHead),
    Vec(VecLayer),
}

#[derive(Clone, Debug, PartialEq)]
enum Arch {
    /// Positional encoding, batch-and-neuron layers, pooling, neuron layers, head.
    /// `fold_batch` moves the batch axis into the features first.
    Stack {
        fold_batch: bool,
        gb: Vec<GradsBLayer>,
        pool: Option<PoolLayer>,
        g: Vec<GradsLayer>,
        head: Head,
    },
    Attention {
        blocks: Vec<UGradsB>,
        head: ProdHead,
    },
    /// DeepSets over the batch of per-sample neuron concatenations.
    NeuronAsym {
        layers: Vec<GradsLayer>,
        pool_scale: f64,
        out: Dense,
    },
    MlpConcat {
        mlp: PointwiseMlp,
    },
}

/// A built metanetwork: configuration, target dims and parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaNetModel {
    pub config: ModelConfig,
    dims: Vec<usize>,
    pub params: ParamStore,
    arch: Arch,
}

/// Builds a model for target networks of shape `dims`; deterministic in `seed`.
pub fn build(config: &ModelConfig, dims: &[usize], seed: u64) -> Result<MetaNetModel> {
    config.validate()?;
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Contract(format!("invalid target dims {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut store = ParamStore::new();
    let n: usize = dims.iter().sum();
    let p_out = param_count(dims);
    let h = config.hidden;
    let agg = |batch: usize| match config.aggregation {
        AggregationMode::Sum => Aggregation::SUM,
        AggregationMode::Normalized => Aggregation::normalized(batch, n),
    };
    let arch = match config.variant {
        Variant::Gradmetanet | Variant::Invariant | Variant::BatchAsym => {
            let fold = config.variant == Variant::BatchAsym;
            let (f0, b_eff) = if fold {
                (config.input_features * config.batch + config.pe_width, 1)
            } else {
                (config.input_features + config.pe_width, config.batch)
            };
            let a = agg(b_eff);
            let mut f = f0;
            let mut gb = Vec::new();
            for i in 0..config.k1 {
                gb.push(GradsBLayer::new(&mut store, &format!("gb{i}"), f, h, a, false, rng));
                f = h;
            }
            let pool = if config.k1 + config.k2 > 0 {
                let p = PoolLayer::new(&mut store, "pool", f, h, a, rng);
                f = h;
                Some(p)
            } else {
                None
            };
            let mut g = Vec::new();
            for i in 0..config.k2 {
                g.push(GradsLayer::new(&mut store, &format!("g{i}"), f, h, a, false, rng));
            }
            let head = if config.variant == Variant::Invariant {
                Head::Vec(VecLayer::new(&mut store, "vec", f, config.invariant_out, a, rng))
            } else {
                let mut ph = ProdHead::new(&mut store, "prod", f, &config.head_widths(), rng)?;
                if pool.is_none() {
                    ph.batch_scale = a.batch;
                }
                Head::Prod(ph)
            };
            Arch::Stack {
                fold_batch: fold,
                gb,
                pool,
                g,
                head,
            }
        }
        Variant::GradmetanetPp => {
            let mut f = config.input_features + config.pe_width;
            let mut blocks = Vec::new();
            for i in 0..config.k1 {
                blocks.push(UGradsB::new(&mut store, &format!("u{i}"), f, h, config.heads, rng)?);
                f = h;
            }
            let mut head = ProdHead::new(&mut store, "prod", f, &config.head_widths(), rng)?;
            head.batch_scale = agg(config.batch).batch;
            Arch::Attention { blocks, head }
        }
        Variant::NeuronAsym => {
            let a = agg(config.batch);
            let set_agg = Aggregation {
                batch: 1.0,
                neurons: a.batch,
            };
            let mut f = n * config.input_features;
            let mut layers = Vec::new();
            for i in 0..config.k1.max(1) {
                layers.push(GradsLayer::new(
                    &mut store,
                    &format!("set{i}"),
                    f,
                    h,
                    set_agg,
                    true,
                    rng,
                ));
                f = h;
            }
            let out = Dense::new(&mut store, "out", f, p_out, true, rng);
            Arch::NeuronAsym {
                layers,
                pool_scale: a.batch,
                out,
            }
        }
        Variant::MlpConcat => {
            let mut widths = vec![config.batch * n * config.input_features];
            widths.extend(std::iter::repeat_n(h, config.mlp_hidden_layers));
            widths.push(p_out);
            Arch::MlpConcat {
                mlp: PointwiseMlp::new(&mut store, "mlp", &widths, rng)?,
            }
        }
    };
    Ok(MetaNetModel {
        config: config.clone(),
        dims: dims.to_vec(),
        params: store,
        arch,
    })
}

impl MetaNetModel {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Exact scalar parameter count (sum of block sizes).
    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Length of the model output.
    pub fn output_len(&self) -> usize {
        match self.config.variant {
            Variant::Invariant => self.config.invariant_out,
            _ => param_count(&self.dims),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let n: usize = self.dims.iter().sum();
        let fixed_batch = matches!(self.config.variant, Variant::BatchAsym | Variant::MlpConcat);
        let ok = shape.len() == 3
            && shape[1] == n
            && shape[2] == self.config.input_features
            && (!fixed_batch || shape[0] == self.config.batch)
            && shape[0] > 0;
        if !ok {
            let want_b = if fixed_batch {
                self.config.batch
            } else {
                shape.first().copied().unwrap_or(0)
            };
            return Err(Error::dims(
                "metanetwork input",
                &[want_b, n, self.config.input_features],
                shape,
            ));
        }
        Ok(())
    }

    /// Appends the constant positional code to `x: [b, N, f]`.
    fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let k = self.config.pe_width;
        if k == 0 {
            return Ok(x);
        }
        let b = tape.shape(x)[0];
        let codes = positional_codes(&self.dims, k);
        let mut data = Vec::with_capacity(b * codes.iter().map(Vec::len).sum::<usize>() * k);
        for _ in 0..b {
            for layer in &codes {
                for c in layer {
                    data.extend_from_slice(c);
                }
            }
        }
        let n: usize = self.dims.iter().sum();
        let pe = tape.leaf(Tensor::new(vec![b, n, k], data)?);
        tape.concat(&[x, pe], 2)
    }

    /// Records the forward pass of `x: [b, N, f]`; `p` are the bound parameter leaves.
    pub fn record(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let [b, n, f] = [tape.shape(x)[0], tape.shape(x)[1], tape.shape(x)[2]];
        match &self.arch {
            Arch::Stack {
                fold_batch,
                gb,
                pool,
                g,
                head,
            } => {
                let mut y = if *fold_batch {
                    let t = tape.permute(x, &[1, 0, 2])?;
                    let t = tape.reshape(t, &[1, n, b * f])?;
                    self.encode(tape, t)?
                } else {
                    self.encode(tape, x)?
                };
                for layer in gb {
                    y = layer.forward(tape, p, y)?;
                    y = tape.relu(y)?;
                }
                if let Some(pool) = pool {
                    y = pool.forward(tape, p, y)?;
                }
                for layer in g {
                    y = layer.forward(tape, p, y)?;
                    y = tape.relu(y)?;
                }
                match head {
                    Head::Prod(h) => h.forward(tape, p, y, &self.dims),
                    Head::Vec(v) => v.forward(tape, p, y),
                }
            }
            Arch::Attention { blocks, head } => {
                let mut y = self.encode(tape, x)?;
                for block in blocks {
                    y = block.forward(tape, p, y)?;
                }
                head.forward(tape, p, y, &self.dims)
            }
            Arch::NeuronAsym {
                layers,
                pool_scale,
                out,
            } => {
                let mut y = tape.reshape(x, &[1, b, n * f])?;
                for layer in layers {
                    y = layer.forward(tape, p, y)?;
                    y = tape.relu(y)?;
                }
                let s = tape.sum_axes(y, &[1])?;
                let s = tape.scale(s, *pool_scale)?;
                let o = out.forward(tape, p, s)?;
                tape.reshape(o, &[self.output_len()])
            }
            Arch::MlpConcat { mlp } => {
                let y = tape.reshape(x, &[1, b * n * f])?;
                let o = mlp.forward(tape, p, y)?;
                tape.reshape(o, &[self.output_len()])
            }
        }
    }

    /// Forward pass on a raw tensor `[b, N, f]`.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = self.record(&mut tape, &p, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// Model output on a gradient batch: a flat parameter vector, or the
/// invariant vector for the invariant variant.
pub fn forward_model(model: &MetaNetModel, batch: &GradBatch) -> Result<Tensor> {
    if batch.dims() != model.dims() {
        return Err(Error::dims("metanetwork target dims", model.dims(), batch.dims()));
    }
    model.forward_tensor(&batch.to_tensor())
}

/// Parameter-shaped output of a non-invariant model.
pub fn forward_theta(model: &MetaNetModel, batch: &GradBatch) -> Result<ParamVector> {
    if !model.variant().predicts_parameters() {
        return Err(Error::Contract(
            "the invariant variant has no parameter-shaped output".into(),
        ));
    }
    ParamVector::from_data(model.dims(), forward_model(model, batch)?.into_data())
}

pub fn forward_invariant(model: &MetaNetModel, batch: &GradBatch) -> Result<Tensor> {
    if model.variant() != Variant::Invariant {
        return Err(Error::Contract(format!(
            "invariant forward called on a {} model",
            model.variant().name()
        )));
    }
    forward_model(model, batch)
}
