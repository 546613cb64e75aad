//! Curvature-estimation benchmark: random sine networks, mixture inputs,
//! gradient-set inputs with Fisher-diagonal targets, normalization, and the
//! `.gds` dataset file.

use std::io::Write;
use std::path::Path;

use log::warn;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::fisher_diag;
use crate::error::{Error, Result};
use crate::gradspace::{GradBatch, DEFAULT_DEGENERATE_TOL};
use crate::mlp::{backward_decomposed, param_count, Activation, FlatGradient, MlpParams, ParamVector};
use crate::numerics::Tensor;

pub const SIREN_DIMS: [usize; 4] = [1, 32, 32, 1];
pub const DEFAULT_BATCH: usize = 128;
pub const DEFAULT_TARGET_POINTS: usize = 1024;
pub const STD_FLOOR: f64 = 1e-8;
pub const GDS_MAGIC: [u8; 4] = *b"GDS1";
pub const GDS_VERSION: u32 = 1;
const MAX_RESAMPLES: u64 = 16;

/// Deterministic child seed number `k` of `seed`.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng.next_u64()
}

/// Sine network with every entry drawn from `N(0, 1)`.
pub fn gen_target_net(dims: &[usize], seed: u64) -> Result<MlpParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MlpParams::standard_normal(dims, Activation::Sine, &mut rng)
}

/// The benchmark network `1 → 32 → 32 → 1`.
pub fn gen_siren(seed: u64) -> MlpParams {
    gen_target_net(&SIREN_DIMS, seed).expect("fixed dims are valid")
}

/// `n` draws from `U[0, 1]` with probability `p`, otherwise `U[−1, 0]`.
pub fn sample_xp(p: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!("mixture weight must lie in [0, 1], got {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let positive = rng.random::<f64>() < p;
            let u: f64 = rng.random();
            if positive {
                u
            } else {
                -u
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskExample {
    /// `b` decomposed output gradients, channels `(a, g)`.
    pub input: GradBatch,
    /// Diagonal of the Fisher matrix estimated from the target points.
    pub target: ParamVector,
    pub p: f64,
}

/// Output gradients (unit output tangent) of `model` at each scalar input.
pub fn output_gradients(model: &MlpParams, xs: &[f64]) -> Result<Vec<crate::mlp::DecomposedGradient>> {
    let out = model.dims()[model.num_layers()];
    if model.dims()[0] != 1 || out != 1 {
        return Err(Error::Contract(format!(
            "benchmark networks map scalars to scalars, got dims {:?}",
            model.dims()
        )));
    }
    xs.iter().map(|&x| backward_decomposed(model, &[x], &[1.0])).collect()
}

/// Builds one example. Input and target points come from disjoint streams of `seed`.
pub fn make_example(model: &MlpParams, p: f64, b: usize, m: usize, seed: u64) -> Result<TaskExample> {
    if b == 0 || m == 0 {
        return Err(Error::Contract(
            "gradient and target point counts must be positive".into(),
        ));
    }
    let xs = sample_xp(p, b, derive_seed(seed, 0))?;
    let input = GradBatch::stack(&output_gradients(model, &xs)?)?;
    let xt = sample_xp(p, m, derive_seed(seed, 1))?;
    let flats = output_gradients(model, &xt)?
        .iter()
        .map(|g| g.expand())
        .collect::<Result<Vec<_>>>()?;
    let target = ParamVector::from_data(model.dims(), fisher_diag(&flats)?)?;
    Ok(TaskExample { input, target, p })
}

/// Fisher diagonal computed directly from the input gradients.
pub fn standard_estimate(input: &GradBatch) -> Result<FlatGradient> {
    let flats = (0..input.batch())
        .map(|i| input.sample(i)?.expand())
        .collect::<Result<Vec<_>>>()?;
    ParamVector::from_data(input.dims(), fisher_diag(&flats)?)
}

fn quantize(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

impl TaskExample {
    /// Rounds every stored value to single precision, as the dataset file does.
    pub fn quantize(&mut self) {
        for blk in self.input.blocks_mut() {
            quantize(blk.data_mut());
        }
        quantize(self.target.data_mut());
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub dims: Vec<usize>,
    pub batch: usize,
    pub target_points: usize,
    pub count: usize,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(count: usize, seed: u64) -> Self {
        Self {
            dims: SIREN_DIMS.to_vec(),
            batch: DEFAULT_BATCH,
            target_points: DEFAULT_TARGET_POINTS,
            count,
            seed,
        }
    }
}

/// Example `index` of a dataset: draws a network, `p`, and the example, and
/// redraws all three if the input lands on the degenerate set.
pub fn generate_example(cfg: &GenConfig, index: usize) -> Result<TaskExample> {
    Ok(generate_example_with_net(cfg, index)?.0)
}

/// Like [`generate_example`], also returning the sine network the example was drawn from.
pub fn generate_example_with_net(cfg: &GenConfig, index: usize) -> Result<(TaskExample, MlpParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    for attempt in 0..MAX_RESAMPLES {
        let net = gen_target_net(&cfg.dims, rng.next_u64())?;
        let p: f64 = rng.random();
        let mut ex = make_example(&net, p, cfg.batch, cfg.target_points, rng.next_u64())?;
        ex.quantize();
        if let Some(w) = ex.input.degenerate_witness(DEFAULT_DEGENERATE_TOL) {
            warn!(
                "example {index} attempt {attempt}: hidden neurons {} and {} of layer {} coincide; redrawing",
                w.first, w.second, w.layer
            );
            continue;
        }
        return Ok((ex, net));
    }
    Err(Error::Numeric(format!(
        "example {index} stayed degenerate after {MAX_RESAMPLES} draws"
    )))
}

/// All examples of a dataset, generated in parallel; a pure function of `cfg`.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<TaskExample>> {
    (0..cfg.count)
        .into_par_iter()
        .map(|i| generate_example(cfg, i))
        .collect()
}

/// Mean and floored standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

impl Moments {
    fn accumulate<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> Self {
        let (mut n, mut s) = (0usize, 0.0);
        for v in values.clone() {
            n += 1;
            s += v;
        }
        let mean = if n == 0 { 0.0 } else { s / n as f64 };
        let var = if n == 0 {
            0.0
        } else {
            values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
        };
        Self {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn unapply(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Normalization statistics fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// Per layer, over every sample, batch entry, neuron and channel.
    pub input: Vec<Moments>,
    /// Per layer of parameter-shaped inputs (the per-example average gradient): weights.
    pub weights: Vec<Moments>,
    /// Per layer of parameter-shaped inputs: biases.
    pub biases: Vec<Moments>,
    /// One pair for every target entry.
    pub target: Moments,
}

impl NormStats {
    pub fn fit(train: &[TaskExample]) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::Contract("cannot fit normalization on an empty split".into()))?;
        let dims = first.input.dims().to_vec();
        let input = (0..dims.len())
            .map(|l| Moments::accumulate(train.iter().flat_map(|e| e.input.blocks()[l].data())))
            .collect();
        let avgs = train
            .iter()
            .map(|e| e.input.average_gradient())
            .collect::<Result<Vec<_>>>()?;
        let weights = (1..dims.len())
            .map(|l| Moments::accumulate(avgs.iter().flat_map(|a| a.weight(l))))
            .collect();
        let biases = (1..dims.len())
            .map(|l| Moments::accumulate(avgs.iter().flat_map(|a| a.bias(l))))
            .collect();
        let target = Moments::accumulate(train.iter().flat_map(|e| e.target.data()));
        Ok(Self {
            input,
            weights,
            biases,
            target,
        })
    }

    pub fn normalize_input(&self, x: &GradBatch) -> Result<GradBatch> {
        if self.input.len() != x.dims().len() {
            return Err(Error::dims(
                "input normalization layers",
                &[self.input.len()],
                &[x.dims().len()],
            ));
        }
        let mut out = x.clone();
        for (blk, m) in out.blocks_mut().iter_mut().zip(&self.input) {
            blk.data_mut().iter_mut().for_each(|v| *v = m.apply(*v));
        }
        Ok(out)
    }

    /// Per-layer weight/bias normalization of a parameter-shaped vector.
    pub fn normalize_params(&self, theta: &ParamVector) -> Result<ParamVector> {
        if self.weights.len() != theta.num_layers() {
            return Err(Error::dims(
                "parameter normalization layers",
                &[self.weights.len()],
                &[theta.num_layers()],
            ));
        }
        let mut out = theta.clone();
        for l in 1..=theta.num_layers() {
            let (mw, mb) = (self.weights[l - 1], self.biases[l - 1]);
            out.weight_mut(l).iter_mut().for_each(|v| *v = mw.apply(*v));
            out.bias_mut(l).iter_mut().for_each(|v| *v = mb.apply(*v));
        }
        Ok(out)
    }

    pub fn normalize_target(&self, t: &[f64]) -> Vec<f64> {
        t.iter().map(|&v| self.target.apply(v)).collect()
    }

    pub fn unnormalize_target(&self, t: &[f64]) -> Vec<f64> {
        t.iter().map(|&v| self.target.unapply(v)).collect()
    }
}

/// JSON header of a `.gds` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub layer_dims: Vec<usize>,
    pub batch: usize,
    pub features: usize,
    pub count: usize,
    pub target_points: usize,
    pub dtype: String,
    pub norm: Option<NormStats>,
    pub seed: u64,
    /// Mixture weight of every example, in record order.
    #[serde(default)]
    pub mixture_p: Vec<f64>,
}

impl DatasetHeader {
    /// The generation settings recorded in the header.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            dims: self.layer_dims.clone(),
            batch: self.batch,
            target_points: self.target_points,
            count: self.count,
            seed: self.seed,
        }
    }

    /// Values per record.
    pub fn record_len(&self) -> usize {
        let n: usize = self.layer_dims.iter().sum();
        self.batch * n * self.features + param_count(&self.layer_dims)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub examples: Vec<TaskExample>,
}

impl Dataset {
    pub fn new(cfg: &GenConfig, examples: Vec<TaskExample>, norm: Option<NormStats>) -> Self {
        Self {
            header: DatasetHeader {
                version: GDS_VERSION,
                layer_dims: cfg.dims.clone(),
                batch: cfg.batch,
                features: 2,
                count: examples.len(),
                target_points: cfg.target_points,
                dtype: "f32le".into(),
                norm,
                seed: cfg.seed,
                mixture_p: examples.iter().map(|e| e.p).collect(),
            },
            examples,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let header = serde_json::to_vec(h).map_err(|e| Error::Header(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + header.len() + 4 * h.count * h.record_len());
        out.extend_from_slice(&GDS_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for ex in &self.examples {
            if ex.input.dims() != h.layer_dims.as_slice()
                || ex.input.batch() != h.batch
                || ex.input.features() != h.features
            {
                return Err(Error::dims("dataset record", &h.layer_dims, ex.input.dims()));
            }
            for blk in ex.input.blocks() {
                for &v in blk.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            for &v in ex.target.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != GDS_MAGIC {
            return Err(Error::BadMagic {
                expected: GDS_MAGIC,
                found: bytes[..bytes.len().min(4)].to_vec(),
            });
        }
        if bytes.len() < 8 {
            return Err(Error::Truncated {
                what: "header length",
                needed: 8,
                available: bytes.len(),
            });
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        if bytes.len() < 8 + hlen {
            return Err(Error::Truncated {
                what: "header",
                needed: 8 + hlen,
                available: bytes.len(),
            });
        }
        let header: DatasetHeader =
            serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| Error::Header(e.to_string()))?;
        if header.version != GDS_VERSION || header.dtype != "f32le" {
            return Err(Error::Header(format!(
                "unsupported version {} / dtype {}",
                header.version, header.dtype
            )));
        }
        if header.layer_dims.len() < 2 || header.features < 2 {
            return Err(Error::Header("layer dims or feature count out of range".into()));
        }
        let payload = &bytes[8 + hlen..];
        let record_bytes = 4 * header.record_len();
        if record_bytes == 0 || !payload.len().is_multiple_of(record_bytes) {
            return Err(Error::Truncated {
                what: "payload",
                needed: record_bytes * payload.len().div_ceil(record_bytes.max(1)),
                available: payload.len(),
            });
        }
        let declared = header.count * record_bytes;
        if payload.len() != declared {
            return Err(Error::Integrity {
                declared,
                actual: payload.len(),
            });
        }
        let dims = header.layer_dims.clone();
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        let mut examples = Vec::with_capacity(header.count);
        for k in 0..header.count {
            let blocks = dims
                .iter()
                .map(|&d| {
                    let data: Vec<f64> = values.by_ref().take(header.batch * d * header.features).collect();
                    Tensor::new(vec![header.batch, d, header.features], data)
                })
                .collect::<Result<Vec<_>>>()?;
            let input = GradBatch::new(&dims, header.batch, header.features, blocks)?;
            let target: Vec<f64> = values.by_ref().take(param_count(&dims)).collect();
            examples.push(TaskExample {
                input,
                target: ParamVector::from_data(&dims, target)?,
                p: header.mixture_p.get(k).copied().unwrap_or(f64::NAN),
            });
        }
        Ok(Self { header, examples })
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    write_atomic(path, &dataset.to_bytes()?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}

/// Splits `examples` into consecutive train/val/test ranges.
pub fn split<T>(examples: &[T], sizes: [usize; 3]) -> Result<[&[T]; 3]> {
    let total: usize = sizes.iter().sum();
    if total > examples.len() {
        return Err(Error::Contract(format!(
            "split {sizes:?} needs {total} examples, dataset has {}",
            examples.len()
        )));
    }
    let (a, rest) = examples.split_at(sizes[0]);
    let (b, rest) = rest.split_at(sizes[1]);
    Ok([a, b, &rest[..sizes[2]]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::fisher;
    use crate::mlp::record_forward;
    use crate::numerics::Tape;

    #[test]
    fn siren_shape_and_determinism() {
        let a = gen_siren(7);
        assert_eq!(a, gen_siren(7));
        assert_ne!(a, gen_siren(8));
        assert_eq!(a.num_params(), 1153);
        assert_eq!(a.activation, Activation::Sine);
    }

    #[test]
    fn siren_entries_are_standard_normal() {
        let vals: Vec<f64> = (0..90).flat_map(|s| gen_siren(s).values.into_data()).collect();
        let n = vals.len() as f64;
        assert!(n >= 1e5);
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 / n.sqrt());
        // std of the sample variance of a normal is sqrt(2/n)
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n).sqrt());
    }

    #[test]
    fn mixture_sampling() {
        assert!(sample_xp(1.0, 1000, 0)
            .unwrap()
            .iter()
            .all(|&x| (0.0..=1.0).contains(&x)));
        assert!(sample_xp(0.0, 1000, 0)
            .unwrap()
            .iter()
            .all(|&x| (-1.0..=0.0).contains(&x)));
        let n = 100_000;
        let xs = sample_xp(0.3, n, 5).unwrap();
        let frac = xs.iter().filter(|&&x| x > 0.0).count() as f64 / n as f64;
        assert!((frac - 0.3).abs() <= 3.0 * (0.3f64 * 0.7 / n as f64).sqrt());
        assert_eq!(xs, sample_xp(0.3, n, 5).unwrap());
        assert!(sample_xp(1.5, 1, 0).is_err());
    }

    #[test]
    fn zero_network_example() {
        let net = MlpParams::zeros(&SIREN_DIMS, Activation::Sine).unwrap();
        let ex = make_example(&net, 0.5, 8, 16, 0).unwrap();
        let l_max = SIREN_DIMS.len() - 1;
        for i in 0..8 {
            let g = ex.input.sample(i).unwrap();
            for l in 0..l_max {
                assert!(g.tangents[l].iter().all(|&v| v == 0.0));
            }
            assert_eq!(g.tangents[l_max], vec![1.0]);
        }
        let mut want = ParamVector::zeros(&SIREN_DIMS).unwrap();
        want.bias_mut(l_max)[0] = 1.0;
        assert_eq!(ex.target, want);
    }

    #[test]
    fn example_gradients_match_tape() {
        let net = gen_target_net(&[1, 6, 5, 1], 3).unwrap();
        let ex = make_example(&net, 0.4, 6, 20, 11).unwrap();
        let xs = sample_xp(0.4, 6, derive_seed(11, 0)).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            let mut tape = Tape::new();
            let rec = record_forward(&mut tape, &net, &[x]).unwrap();
            let grads = tape
                .backward(rec.output, Tensor::full(tape.shape(rec.output), 1.0))
                .unwrap();
            let mut flat = Vec::new();
            for &(w, b) in &rec.layers {
                flat.extend_from_slice(grads.wrt(w).data());
                flat.extend_from_slice(grads.wrt(b).data());
            }
            let e = ex.input.sample(i).unwrap().expand().unwrap();
            for (a, b) in e.data().iter().zip(&flat) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn target_is_dense_fisher_diagonal() {
        let net = gen_target_net(&[1, 4, 3, 1], 9).unwrap();
        let ex = make_example(&net, 0.7, 4, 64, 2).unwrap();
        let xt = sample_xp(0.7, 64, derive_seed(2, 1)).unwrap();
        let flats: Vec<_> = output_gradients(&net, &xt)
            .unwrap()
            .iter()
            .map(|g| g.expand().unwrap())
            .collect();
        assert_eq!(ex.target.data(), fisher(&flats).unwrap().diag().as_slice());
    }

    fn tiny_cfg(count: usize) -> GenConfig {
        GenConfig {
            dims: vec![1, 5, 4, 1],
            batch: 6,
            target_points: 32,
            count,
            seed: 21,
        }
    }

    #[test]
    fn dataset_is_reproducible_and_nondegenerate() {
        let cfg = tiny_cfg(6);
        let a = generate_dataset(&cfg).unwrap();
        assert_eq!(a, generate_dataset(&cfg).unwrap());
        for ex in &a {
            assert!(!ex.input.in_degenerate_set(DEFAULT_DEGENERATE_TOL));
        }
        let est = standard_estimate(&a[0].input).unwrap();
        assert_eq!(est, standard_estimate(&a[0].input).unwrap());
    }

    #[test]
    fn normalization_contract() {
        let data = generate_dataset(&tiny_cfg(5)).unwrap();
        let stats = NormStats::fit(&data).unwrap();
        let normed: Vec<GradBatch> = data.iter().map(|e| stats.normalize_input(&e.input).unwrap()).collect();
        for l in 0..4 {
            let vals: Vec<f64> = normed.iter().flat_map(|x| x.blocks()[l].data().to_vec()).collect();
            let m = Moments::accumulate(vals.iter());
            assert!(m.mean.abs() < 1e-6 && (m.std - 1.0).abs() < 1e-6, "layer {l}: {m:?}");
        }
        let t: Vec<f64> = data
            .iter()
            .flat_map(|e| stats.normalize_target(e.target.data()))
            .collect();
        let m = Moments::accumulate(t.iter());
        assert!(m.mean.abs() < 1e-6 && (m.std - 1.0).abs() < 1e-6);
        for e in &data {
            let back = stats.unnormalize_target(&stats.normalize_target(e.target.data()));
            for (a, b) in back.iter().zip(e.target.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
        let avg = data[0].input.average_gradient().unwrap();
        assert_eq!(stats.normalize_params(&avg).unwrap().len(), avg.len());
        assert!(NormStats::fit(&[]).is_err());
    }

    #[test]
    fn constant_channels_are_floored() {
        let mut ex = generate_dataset(&tiny_cfg(1)).unwrap().remove(0);
        for blk in ex.input.blocks_mut() {
            blk.data_mut().fill(3.0);
        }
        let stats = NormStats::fit(std::slice::from_ref(&ex)).unwrap();
        assert!(stats.input.iter().all(|m| m.std == STD_FLOOR));
        let x = stats.normalize_input(&ex.input).unwrap();
        assert!(x.blocks().iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn file_round_trip_and_errors() {
        let cfg = tiny_cfg(3);
        let data = generate_dataset(&cfg).unwrap();
        let stats = NormStats::fit(&data).unwrap();
        let ds = Dataset::new(&cfg, data, Some(stats));
        let bytes = ds.to_bytes().unwrap();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::BadMagic { .. })));

        let rec = 4 * ds.header.record_len();
        let short = &bytes[..bytes.len() - rec];
        match Dataset::from_bytes(short) {
            Err(Error::Integrity { declared, actual }) => {
                assert_eq!(declared, 3 * rec);
                assert_eq!(actual, 2 * rec);
            }
            other => panic!("expected integrity error, got {other:?}"),
        }
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            Dataset::from_bytes(&bytes[..10]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn splits() {
        let v: Vec<usize> = (0..10).collect();
        let [a, b, c] = split(&v, [5, 3, 2]).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (5, 3, 2));
        assert_eq!(c, &[8, 9]);
        assert!(split(&v, [5, 5, 1]).is_err());
    }
}
