//! Property suites behind `gradmeta check`. Each returns one named verdict
//! per property.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::curvature::{fisher, fisher_diag, natural_gradient, obd_saliency, obs_saliency, prop1_pair};
use crate::error::{Error, Result};
use crate::gradspace::{GradBatch, GroupElement, DEFAULT_DEGENERATE_TOL};
use crate::layers::{Aggregation, GradsBLayer, GradsLayer, PoolLayer, ProdHead, UGradsB, VecLayer};
use crate::metanet::{build, forward_model, ModelConfig, Variant};
use crate::mlp::{backward_decomposed, forward, record_forward, Activation, FlatGradient, MlpParams, ParamVector};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::ParamStore;
use crate::perm::Permutation;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Equivariance,
    Decomposition,
    Oracles,
    Separation,
    Degenerate,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Equivariance,
        Suite::Decomposition,
        Suite::Oracles,
        Suite::Separation,
        Suite::Degenerate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Equivariance => "equivariance",
            Suite::Decomposition => "decomposition",
            Suite::Oracles => "oracles",
            Suite::Separation => "separation",
            Suite::Degenerate => "degenerate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown suite `{s}`")))
    }

    pub fn run(self, seed: u64) -> Result<Vec<Verdict>> {
        match self {
            Suite::Equivariance => equivariance(seed),
            Suite::Decomposition => decomposition(seed),
            Suite::Oracles => oracles(seed),
            Suite::Separation => separation(seed),
            Suite::Degenerate => degenerate(seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    fn bound(name: &str, value: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            passed: value <= tol,
            detail: format!("worst {value:.3e} (tolerance {tol:.0e})"),
        }
    }
}

const TRIALS: usize = 50;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn flat_decomposed(d: &crate::mlp::DecomposedGradient) -> Vec<f64> {
    d.acts.iter().chain(&d.tangents).flatten().copied().collect()
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

fn random_dims(rng: &mut ChaCha8Rng, max_width: usize) -> Vec<usize> {
    let depth = rng.random_range(2..=4);
    let mut dims = vec![rng.random_range(1..=3)];
    for _ in 1..depth {
        dims.push(rng.random_range(2..=max_width));
    }
    dims.push(rng.random_range(1..=2));
    dims
}

fn activation(rng: &mut ChaCha8Rng) -> Activation {
    if rng.random() {
        Activation::Relu
    } else {
        Activation::Sine
    }
}

fn run_layer(store: &ParamStore, x: &Tensor, f: impl Fn(&mut Tape, &[Var], Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, &p, xv)?;
    Ok(tape.value(y).clone())
}

/// `Φ(g·x)` against `g·Φ(x)` for a layer mapping batches to batches.
fn layer_equivariance(
    dims: &[usize],
    batch: usize,
    f_in: usize,
    store: &ParamStore,
    rng: &mut ChaCha8Rng,
    pooled: bool,
    f: impl Fn(&mut Tape, &[Var], Var) -> Result<Var>,
) -> Result<f64> {
    let n: usize = dims.iter().sum();
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let x = GradBatch::from_tensor(dims, &gaussian(&[batch, n, f_in], rng))?;
        let g = GroupElement::random(batch, dims, rng);
        let y = GradBatch::from_tensor(dims, &run_layer(store, &x.to_tensor(), &f)?)?;
        let y_moved = GradBatch::from_tensor(dims, &run_layer(store, &x.act(&g)?.to_tensor(), &f)?)?;
        let g_out = if pooled {
            GroupElement {
                batch: Permutation::identity(1),
                hidden: g.hidden.clone(),
            }
        } else {
            g
        };
        worst = worst.max(y_moved.to_tensor().max_abs_diff(&y.act(&g_out)?.to_tensor()));
    }
    Ok(worst)
}

/// Parameter-shaped heads: `Φ(g·x)` against `h·Φ(x)`.
fn head_equivariance(
    dims: &[usize],
    batch: usize,
    f_in: usize,
    store: &ParamStore,
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Tape, &[Var], Var) -> Result<Var>,
) -> Result<f64> {
    let n: usize = dims.iter().sum();
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let x = GradBatch::from_tensor(dims, &gaussian(&[batch, n, f_in], rng))?;
        let g = GroupElement::random(batch, dims, rng);
        let y = ParamVector::from_data(dims, run_layer(store, &x.to_tensor(), &f)?.into_data())?;
        let y_moved = ParamVector::from_data(dims, run_layer(store, &x.act(&g)?.to_tensor(), &f)?.into_data())?;
        worst = worst.max(y_moved.max_abs_diff(&y.act(&g.hidden)?));
    }
    Ok(worst)
}

/// Function invariance, decomposition equivariance, per-layer and model
/// equivariance, invariant readout.
pub fn equivariance(seed: u64) -> Result<Vec<Verdict>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = Vec::new();

    let (mut w_fn, mut w_dec) = (0.0f64, 0.0f64);
    for _ in 0..TRIALS {
        let dims = random_dims(rng, 8);
        let act = activation(rng);
        let theta = MlpParams::standard_normal(&dims, act, rng)?;
        let h = crate::perm::HiddenPerm::random(&dims, rng);
        let moved = theta.act(&h)?;
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.sample(StandardNormal)).collect();
        let seed_out: Vec<f64> = (0..dims[dims.len() - 1]).map(|_| rng.sample(StandardNormal)).collect();
        w_fn = w_fn.max(max_diff(forward(&moved, &x)?.output(), forward(&theta, &x)?.output()));
        let d = backward_decomposed(&theta, &x, &seed_out)?;
        let d_moved = backward_decomposed(&moved, &x, &seed_out)?;
        w_dec = w_dec.max(max_diff(&flat_decomposed(&d_moved), &flat_decomposed(&d.act(&h)?)));
    }
    out.push(Verdict::bound("function invariance f(h.theta) = f(theta)", w_fn, 1e-12));
    out.push(Verdict::bound("decomposition equivariance", w_dec, 1e-12));

    let dims = [2, 5, 4, 2];
    let n: usize = dims.iter().sum();
    let (b, f) = (6, 3);
    let agg = Aggregation::normalized(b, n);
    let mut store = ParamStore::new();
    let gb = GradsBLayer::new(&mut store, "gb", f, 4, agg, true, rng);
    let pool = PoolLayer::new(&mut store, "pool", f, 4, agg, rng);
    let g1 = GradsLayer::new(&mut store, "g", f, 4, agg, true, rng);
    let vec = VecLayer::new(&mut store, "vec", f, 4, agg, rng);
    let prod = ProdHead::new(&mut store, "prod", f, &[4, 4], rng)?;
    let mut uprod = ProdHead::new(&mut store, "uprod", f, &[4, 4], rng)?;
    uprod.batch_scale = 1.0 / b as f64;
    let ugb = UGradsB::new(&mut store, "ugb", f, f, 2, rng)?;
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    let s = &store;
    out.push(Verdict::bound(
        "layer batch-neuron equivariance",
        layer_equivariance(&dims, b, f, s, rng, false, |t, p, x| gb.forward(t, p, x))?,
        1e-8,
    ));
    out.push(Verdict::bound(
        "layer pooling invariance/equivariance",
        layer_equivariance(&dims, b, f, s, rng, true, |t, p, x| pool.forward(t, p, x))?,
        1e-8,
    ));
    out.push(Verdict::bound(
        "layer neuron equivariance",
        layer_equivariance(&dims, 1, f, s, rng, false, |t, p, x| g1.forward(t, p, x))?,
        1e-8,
    ));
    out.push(Verdict::bound(
        "layer attention equivariance",
        layer_equivariance(&dims, b, f, s, rng, false, |t, p, x| ugb.forward(t, p, x))?,
        1e-8,
    ));
    out.push(Verdict::bound(
        "product head equivariance",
        head_equivariance(&dims, 1, f, s, rng, |t, p, x| prod.forward(t, p, x, &dims))?,
        1e-8,
    ));
    out.push(Verdict::bound(
        "batch product head equivariance",
        head_equivariance(&dims, b, f, s, rng, |t, p, x| uprod.forward(t, p, x, &dims))?,
        1e-8,
    ));
    let mut w_vec = 0.0f64;
    for _ in 0..TRIALS {
        let x = GradBatch::from_tensor(&dims, &gaussian(&[1, n, f], rng))?;
        let g = GroupElement::random(1, &dims, rng);
        let y = run_layer(s, &x.to_tensor(), |t, p, x| vec.forward(t, p, x))?;
        let y_moved = run_layer(s, &x.act(&g)?.to_tensor(), |t, p, x| vec.forward(t, p, x))?;
        w_vec = w_vec.max(y.max_abs_diff(&y_moved));
    }
    out.push(Verdict::bound("invariant readout", w_vec, 1e-8));

    let model_dims = [1, 6, 5, 1];
    let mb = 8;
    for variant in [Variant::Gradmetanet, Variant::GradmetanetPp, Variant::Invariant] {
        let cfg = ModelConfig {
            variant,
            hidden: 8,
            heads: 2,
            invariant_out: 8,
            batch: mb,
            ..ModelConfig::default()
        };
        let model = build(&cfg, &model_dims, seed)?;
        let nm: usize = model_dims.iter().sum();
        let mut worst = 0.0f64;
        for _ in 0..TRIALS {
            let x = GradBatch::from_tensor(&model_dims, &gaussian(&[mb, nm, 2], rng))?;
            let g = GroupElement::random(mb, &model_dims, rng);
            let y = forward_model(&model, &x)?;
            let y_moved = forward_model(&model, &x.act(&g)?)?;
            let want = if variant == Variant::Invariant {
                y
            } else {
                Tensor::vector(
                    ParamVector::from_data(&model_dims, y.into_data())?
                        .act(&g.hidden)?
                        .into_data(),
                )
            };
            worst = worst.max(y_moved.max_abs_diff(&want));
        }
        out.push(Verdict::bound(
            &format!("model {} equivariance", variant.name()),
            worst,
            1e-8,
        ));
    }
    Ok(out)
}

/// Rank-1 decomposition against tape gradients and central differences.
pub fn decomposition(seed: u64) -> Result<Vec<Verdict>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut w_tape, mut w_fd) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let mut dims = vec![1];
        for _ in 0..rng.random_range(1..=2) {
            dims.push(rng.random_range(1..=8));
        }
        dims.push(1);
        let act = activation(&mut rng);
        let theta = MlpParams::standard_normal(&dims, act, &mut rng)?;
        let x = [rng.random_range(-1.0..1.0)];
        let flat = backward_decomposed(&theta, &x, &[1.0])?.expand()?;

        let mut tape = Tape::new();
        let rec = record_forward(&mut tape, &theta, &x)?;
        let grads = tape.backward(rec.output, Tensor::full(tape.shape(rec.output), 1.0))?;
        let mut via_tape = Vec::with_capacity(flat.len());
        for &(w, b) in &rec.layers {
            via_tape.extend_from_slice(grads.wrt(w).data());
            via_tape.extend_from_slice(grads.wrt(b).data());
        }
        for (a, t) in flat.data().iter().zip(&via_tape) {
            w_tape = w_tape.max((a - t).abs() / t.abs().max(1.0));
        }

        let h = 1e-6;
        for i in 0..flat.len() {
            let mut plus = theta.clone();
            plus.values.data_mut()[i] += h;
            let mut minus = theta.clone();
            minus.values.data_mut()[i] -= h;
            let fd = (forward(&plus, &x)?.output()[0] - forward(&minus, &x)?.output()[0]) / (2.0 * h);
            let a = flat.data()[i];
            w_fd = w_fd.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
        }
    }
    Ok(vec![
        Verdict::bound("decomposition matches tape gradients", w_tape, 1e-10),
        Verdict::bound("decomposition matches central differences", w_fd, 1e-4),
    ])
}

fn naive_fisher(grads: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = grads[0].len();
    let mut f = vec![vec![0.0; p]; p];
    for g in grads {
        for i in 0..p {
            for j in 0..p {
                f[i][j] += g[i] * g[j];
            }
        }
    }
    for row in &mut f {
        for v in row.iter_mut() {
            *v /= grads.len() as f64;
        }
    }
    f
}

/// Gauss-Jordan inverse with partial pivoting.
fn naive_inverse(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))
            .expect("nonempty range");
        a.swap(c, piv);
        inv.swap(c, piv);
        let d = a[c][c];
        for j in 0..n {
            a[c][j] /= d;
            inv[c][j] /= d;
        }
        for r in 0..n {
            if r != c {
                let k = a[r][c];
                if k != 0.0 {
                    for j in 0..n {
                        a[r][j] -= k * a[c][j];
                        inv[r][j] -= k * inv[c][j];
                    }
                }
            }
        }
    }
    inv
}

fn damped(f: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>> {
    let mut m = f.to_vec();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] += eps;
    }
    m
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    max_diff(a, b) / scale
}

/// Curvature oracles against brute-force dense implementations.
pub fn oracles(seed: u64) -> Result<Vec<Verdict>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = crate::curvature::DEFAULT_EPS;
    let (mut w_f, mut w_diag, mut w_ng, mut w_obd, mut w_obs) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..30 {
        let dims = loop {
            let d = random_dims(&mut rng, 8);
            if crate::mlp::param_count(&d) <= 200 {
                break d;
            }
        };
        let theta = MlpParams::standard_normal(&dims, activation(&mut rng), &mut rng)?;
        let k = rng.random_range(1..=40);
        let grads: Vec<FlatGradient> = (0..k)
            .map(|_| {
                let x: Vec<f64> = (0..dims[0]).map(|_| rng.sample(StandardNormal)).collect();
                let s: Vec<f64> = (0..dims[dims.len() - 1]).map(|_| rng.sample(StandardNormal)).collect();
                backward_decomposed(&theta, &x, &s)?.expand()
            })
            .collect::<Result<_>>()?;
        let raw: Vec<Vec<f64>> = grads.iter().map(|g| g.data().to_vec()).collect();
        let nf = naive_fisher(&raw);
        let f = fisher(&grads)?;
        let p = nf.len();
        for i in 0..p {
            for j in 0..p {
                w_f = w_f.max((f.matrix().at2(i, j) - nf[i][j]).abs());
            }
        }
        let nd: Vec<f64> = (0..p).map(|i| nf[i][i]).collect();
        w_diag = w_diag.max(max_diff(&fisher_diag(&grads)?, &nd));

        let nabla: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let inv = naive_inverse(damped(&nf, eps));
        let want: Vec<f64> = inv
            .iter()
            .map(|row| row.iter().zip(&nabla).map(|(a, b)| a * b).sum())
            .collect();
        let got = natural_gradient(&ParamVector::from_data(&dims, nabla)?, &grads, eps)?;
        w_ng = w_ng.max(rel(got.data(), &want));

        let t = theta.values.data();
        let obd: Vec<f64> = (0..p).map(|i| t[i] * t[i] * nd[i]).collect();
        w_obd = w_obd.max(rel(obd_saliency(&theta, &grads)?.data(), &obd));
        let obs: Vec<f64> = (0..p).map(|i| t[i] * t[i] / inv[i][i]).collect();
        w_obs = w_obs.max(rel(obs_saliency(&theta, &grads, eps)?.data(), &obs));
    }

    // Fisher c·I from scaled basis vectors; the natural gradient is ∇/(c + ε).
    let dims = [3, 4, 2];
    let p = crate::mlp::param_count(&dims);
    let c = 0.7;
    let basis: Vec<FlatGradient> = (0..p)
        .map(|i| {
            let mut v = vec![0.0; p];
            v[i] = (c * p as f64).sqrt();
            ParamVector::from_data(&dims, v)
        })
        .collect::<Result<_>>()?;
    let nabla: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    let got = natural_gradient(&ParamVector::from_data(&dims, nabla.clone())?, &basis, eps)?;
    let want: Vec<f64> = nabla.iter().map(|v| v / (c + eps)).collect();

    Ok(vec![
        Verdict::bound("fisher matches brute force", w_f, 1e-12),
        Verdict::bound("fisher diagonal matches brute force", w_diag, 0.0),
        Verdict::bound("natural gradient matches dense solve", w_ng, 1e-9),
        Verdict::bound("obd matches brute force", w_obd, 1e-12),
        Verdict::bound("obs matches dense inverse", w_obs, 1e-9),
        Verdict::bound("isotropic fisher natural gradient", rel(got.data(), &want), 1e-12),
    ])
}

/// Report of the mean-blind pair.
#[derive(Clone, Debug, Serialize)]
pub struct SeparationReport {
    pub n: usize,
    pub mean_first: Vec<f64>,
    pub mean_second: Vec<f64>,
    pub natural_first: Vec<f64>,
    pub natural_second: Vec<f64>,
    pub natural_ratio_expected: f64,
    pub obd_ratio: Vec<f64>,
}

pub fn separation_report(n: usize, seed: u64) -> Result<SeparationReport> {
    let pair = prop1_pair(n, seed)?;
    let eps = crate::curvature::DEFAULT_EPS;
    let mean_first = GradBatch::stack(&pair.first)?.average_gradient()?;
    let mean_second = GradBatch::stack(&pair.second)?.average_gradient()?;
    let (f1, f2) = (pair.first_flat()?, pair.second_flat()?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = crate::mlp::param_count(&pair.dims);
    let nabla = ParamVector::from_data(&pair.dims, (0..p).map(|_| rng.random_range(0.5..1.5)).collect())?;
    let theta = MlpParams::standard_normal(&pair.dims, Activation::Relu, &mut rng)?;
    let o1 = obd_saliency(&theta, &f1)?;
    let o2 = obd_saliency(&theta, &f2)?;
    let nf = n as f64;
    Ok(SeparationReport {
        n,
        mean_first: mean_first.into_data(),
        mean_second: mean_second.into_data(),
        natural_first: natural_gradient(&nabla, &f1, eps)?.into_data(),
        natural_second: natural_gradient(&nabla, &f2, eps)?.into_data(),
        natural_ratio_expected: (4.0 / nf + eps) / (1.0 / nf + eps),
        obd_ratio: o2.data().iter().zip(o1.data()).map(|(a, b)| a / b).collect(),
    })
}

/// Two gradient sets with equal means but different curvature.
pub fn separation(seed: u64) -> Result<Vec<Verdict>> {
    let r = separation_report(8, seed)?;
    let mean_gap = max_diff(&r.mean_first, &r.mean_second);
    let mean_abs = r
        .mean_first
        .iter()
        .chain(&r.mean_second)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let ratio_err = r
        .natural_first
        .iter()
        .zip(&r.natural_second)
        .map(|(a, b)| (a / b - r.natural_ratio_expected).abs() / r.natural_ratio_expected)
        .fold(0.0f64, f64::max);
    let obd_err = r.obd_ratio.iter().map(|q| (q - 4.0).abs()).fold(0.0f64, f64::max);
    Ok(vec![
        Verdict {
            name: "mean gradients identical".into(),
            passed: mean_gap == 0.0 && mean_abs == 0.0,
            detail: format!("gap {mean_gap:e}, largest entry {mean_abs:e}"),
        },
        Verdict {
            name: "natural gradients differ by the damped factor".into(),
            passed: ratio_err <= 1e-12,
            detail: format!(
                "expected ratio {:.12}, worst relative error {ratio_err:.3e}; first[0] {:.6e}, second[0] {:.6e}",
                r.natural_ratio_expected, r.natural_first[0], r.natural_second[0]
            ),
        },
        Verdict::bound("obd scores differ by a factor of 4", obd_err, 1e-12),
    ])
}

/// Degenerate-set detection on constructed members and random batches.
pub fn degenerate(seed: u64) -> Result<Vec<Verdict>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [2, 6, 5, 1];
    let n: usize = dims.iter().sum();
    let mut flagged = true;
    for _ in 0..TRIALS {
        let mut x = GradBatch::from_tensor(&dims, &gaussian(&[4, n, 2], &mut rng))?;
        let l = rng.random_range(1..dims.len() - 1);
        let a = rng.random_range(0..dims[l]);
        let b = (a + rng.random_range(1..dims[l])) % dims[l];
        let (lo, hi) = (a.min(b), a.max(b));
        let blk = &mut x.blocks_mut()[l];
        let d = dims[l];
        for i in 0..4 {
            for c in 0..2 {
                let v = blk.data()[(i * d + lo) * 2 + c];
                blk.data_mut()[(i * d + hi) * 2 + c] = v;
            }
        }
        flagged &= x
            .degenerate_witness(DEFAULT_DEGENERATE_TOL)
            .is_some_and(|w| w.layer == l && w.first == lo && w.second == hi);
    }
    let mut clean = 0;
    for _ in 0..1000 {
        let x = GradBatch::from_tensor(&dims, &gaussian(&[4, n, 2], &mut rng))?;
        if !x.in_degenerate_set(DEFAULT_DEGENERATE_TOL) {
            clean += 1;
        }
    }
    Ok(vec![
        Verdict {
            name: "constructed members flagged with witness".into(),
            passed: flagged,
            detail: format!("{TRIALS} duplicated-neuron batches"),
        },
        Verdict {
            name: "random batches outside the degenerate set".into(),
            passed: clean == 1000,
            detail: format!("{clean}/1000 clean"),
        },
    ])
}
