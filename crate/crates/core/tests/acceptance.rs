//! Acceptance run: one pass/fail line per criterion.
//!
//! Runs every criterion by default; pass criterion numbers as arguments to
//! run a subset (`cargo test --test acceptance -- 1 4`).

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use gradmeta::curvature::{fisher, fisher_diag, natural_gradient, obd_saliency, obs_saliency, prop1_pair, DEFAULT_EPS};
use gradmeta::gradspace::{GradBatch, DEFAULT_DEGENERATE_TOL};
use gradmeta::layers::{Aggregation, GradsBLayer, GradsLayer, PoolLayer, ProdHead, UGradsB, VecLayer};
use gradmeta::metanet::{build, MetaNetModel, ModelConfig, Variant};
use gradmeta::mlp::{
    backward_decomposed, param_count, record_forward, Activation, FlatGradient, MlpParams, ParamVector,
};
use gradmeta::numerics::{Tape, Tensor, Var};
use gradmeta::params::ParamStore;
use gradmeta::perm::{HiddenPerm, Permutation};
use gradmeta::taskgen::{generate_dataset, split, Dataset, GenConfig, NormStats, SIREN_DIMS};
use gradmeta::trainer::{train, AdamState, Checkpoint, Splits, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const BIN: &str = env!("CARGO_BIN_EXE_gradmeta");

struct Outcome {
    passed: bool,
    summary: String,
}

fn outcome(passed: bool, summary: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        summary: summary.into(),
    }
}

// ---------- independent reference implementations ----------

/// Plain forward pass over the flat parameter layout.
fn ref_forward(dims: &[usize], theta: &[f64], act: Activation, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let mut off = 0;
    let l_max = dims.len() - 1;
    for l in 1..=l_max {
        let (n_out, n_in) = (dims[l], dims[l - 1]);
        let w = &theta[off..off + n_out * n_in];
        let b = &theta[off + n_out * n_in..off + n_out * n_in + n_out];
        off += n_out * n_in + n_out;
        a = (0..n_out)
            .map(|i| {
                let u = b[i] + (0..n_in).map(|j| w[i * n_in + j] * a[j]).sum::<f64>();
                match (l == l_max, act) {
                    (true, _) => u,
                    (false, Activation::Relu) => u.max(0.0),
                    (false, Activation::Sine) => u.sin(),
                }
            })
            .collect();
    }
    a
}

/// `σ_l` as plain vectors, identity on the input and output layers.
fn perm_table(dims: &[usize], h: &HiddenPerm) -> Vec<Vec<usize>> {
    (0..dims.len())
        .map(|l| match h.layer(l) {
            Some(p) => (0..dims[l]).map(|i| p.map(i)).collect(),
            None => (0..dims[l]).collect(),
        })
        .collect()
}

/// `new_W_l[σ_l(i), σ_{l−1}(j)] = W_l[i, j]`, `new_b_l[σ_l(i)] = b_l[i]`.
fn ref_act_theta(dims: &[usize], theta: &[f64], sig: &[Vec<usize>]) -> Vec<f64> {
    let mut out = vec![0.0; theta.len()];
    let mut off = 0;
    for l in 1..dims.len() {
        let (n_out, n_in) = (dims[l], dims[l - 1]);
        for i in 0..n_out {
            for j in 0..n_in {
                out[off + sig[l][i] * n_in + sig[l - 1][j]] = theta[off + i * n_in + j];
            }
        }
        let bo = off + n_out * n_in;
        for i in 0..n_out {
            out[bo + sig[l][i]] = theta[bo + i];
        }
        off = bo + n_out;
    }
    out
}

/// `out[τ(i), σ_l(j), :] = x[i, j, :]` on a concatenated `[b, N, f]` tensor.
fn ref_act_batch(dims: &[usize], x: &Tensor, tau: &[usize], sig: &[Vec<usize>]) -> Tensor {
    let [b, n, f] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let mut global = Vec::with_capacity(n);
    let mut base = 0;
    for (l, &d) in dims.iter().enumerate() {
        for j in 0..d {
            global.push(base + sig[l][j]);
        }
        base += d;
    }
    let mut out = vec![0.0; x.len()];
    for i in 0..b {
        for j in 0..n {
            let s = (i * n + j) * f;
            let t = (tau[i] * n + global[j]) * f;
            out[t..t + f].copy_from_slice(&x.data()[s..s + f]);
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn ref_fisher(grads: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = grads[0].len();
    let mut f = vec![vec![0.0; p]; p];
    for g in grads {
        for i in 0..p {
            for j in 0..p {
                f[i][j] += g[i] * g[j];
            }
        }
    }
    let n = grads.len() as f64;
    f.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v /= n));
    f
}

/// Gauss-Jordan inverse with partial pivoting.
fn ref_inverse(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
        a.swap(c, piv);
        inv.swap(c, piv);
        let d = a[c][c];
        for j in 0..n {
            a[c][j] /= d;
            inv[c][j] /= d;
        }
        for r in 0..n {
            let k = a[r][c];
            if r != c && k != 0.0 {
                for j in 0..n {
                    a[r][j] -= k * a[c][j];
                    inv[r][j] -= k * inv[c][j];
                }
            }
        }
    }
    inv
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

type LayerFn<'a> = &'a dyn Fn(&mut Tape, &[Var], Var) -> gradmeta::Result<Var>;

fn run_on_tape(store: &ParamStore, x: &Tensor, f: LayerFn) -> Tensor {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, &p, xv).unwrap();
    tape.value(y).clone()
}

fn random_group(b: usize, dims: &[usize], rng: &mut ChaCha8Rng) -> (Vec<usize>, HiddenPerm, Vec<Vec<usize>>) {
    let tau = Permutation::random(b, rng);
    let h = HiddenPerm::random(dims, rng);
    let sig = perm_table(dims, &h);
    ((0..b).map(|i| tau.map(i)).collect(), h, sig)
}

// ---------- criteria ----------

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut w_tape, mut w_fd) = (0.0f64, 0.0f64);
    for t in 0..100 {
        let mut dims = vec![1];
        for _ in 0..rng.random_range(1..=2) {
            dims.push(rng.random_range(1..=8));
        }
        dims.push(1);
        let act = if t % 2 == 0 { Activation::Relu } else { Activation::Sine };
        let theta = MlpParams::standard_normal(&dims, act, &mut rng).unwrap();
        let x = [rng.random_range(-1.0..1.0)];
        let flat = backward_decomposed(&theta, &x, &[1.0]).unwrap().expand().unwrap();

        let mut tape = Tape::new();
        let rec = record_forward(&mut tape, &theta, &x).unwrap();
        let g = tape
            .backward(rec.output, Tensor::scalar(1.0).reshape(tape.shape(rec.output)).unwrap())
            .unwrap();
        let auto: Vec<f64> = rec
            .layers
            .iter()
            .flat_map(|&(w, b)| g.wrt(w).into_data().into_iter().chain(g.wrt(b).into_data()))
            .collect();
        for (a, b) in flat.data().iter().zip(&auto) {
            w_tape = w_tape.max((a - b).abs() / b.abs().max(1.0));
        }

        let base = theta.values.data().to_vec();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            let fp = ref_forward(&dims, &p, act, &x)[0];
            p[i] -= 2.0 * h;
            let fm = ref_forward(&dims, &p, act, &x)[0];
            let fd = (fp - fm) / (2.0 * h);
            let a = flat.data()[i];
            w_fd = w_fd.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        w_tape <= 1e-10 && w_fd <= 1e-4 && secs < 30.0,
        format!("tape rel {w_tape:.2e} (<=1e-10), finite-difference rel {w_fd:.2e} (<=1e-4), {secs:.1}s (<30s)"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let rng = &mut rng;
    let mut worst = std::collections::BTreeMap::<&str, f64>::new();
    let mut note = |k: &'static str, v: f64| {
        let e = worst.entry(k).or_insert(0.0);
        *e = e.max(v);
    };

    for t in 0..50 {
        let dims = [3, 7, 6, 2];
        let act = if t % 2 == 0 { Activation::Relu } else { Activation::Sine };
        let theta = MlpParams::standard_normal(&dims, act, rng).unwrap();
        let (_, h, sig) = random_group(1, &dims, rng);
        let moved = ref_act_theta(&dims, theta.values.data(), &sig);
        let x: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let y0 = ref_forward(&dims, theta.values.data(), act, &x);
        note("function", max_abs_diff(&ref_forward(&dims, &moved, act, &x), &y0));

        let seed: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let d0 = backward_decomposed(&theta, &x, &seed).unwrap();
        let moved_params = MlpParams::new(act, ParamVector::from_data(&dims, moved).unwrap());
        let d1 = backward_decomposed(&moved_params, &x, &seed).unwrap();
        for l in 0..dims.len() {
            for j in 0..dims[l] {
                note("decomposition", (d1.acts[l][sig[l][j]] - d0.acts[l][j]).abs());
                note("decomposition", (d1.tangents[l][sig[l][j]] - d0.tangents[l][j]).abs());
            }
        }
        let _ = h;
    }

    let dims = [2, 5, 4, 2];
    let n: usize = dims.iter().sum();
    let (b, f) = (6, 3);
    let agg = Aggregation::normalized(b, n);
    let mut store = ParamStore::new();
    let gb = GradsBLayer::new(&mut store, "gb", f, 4, agg, true, rng);
    let pool = PoolLayer::new(&mut store, "pool", f, 4, agg, rng);
    let gl = GradsLayer::new(&mut store, "g", f, 4, agg, true, rng);
    let vecl = VecLayer::new(&mut store, "vec", f, 5, agg, rng);
    let prod = ProdHead::new(&mut store, "prod", f, &[4, 4], rng).unwrap();
    let mut uprod = ProdHead::new(&mut store, "uprod", f, &[4, 4], rng).unwrap();
    uprod.batch_scale = 1.0 / b as f64;
    let ugb = UGradsB::new(&mut store, "ugb", f, f, 2, rng).unwrap();
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    let id1 = [0usize];
    for _ in 0..50 {
        let (tau, _, sig) = random_group(b, &dims, rng);
        let x = gaussian(&[b, n, f], rng);
        let xm = ref_act_batch(&dims, &x, &tau, &sig);
        let x1 = gaussian(&[1, n, f], rng);
        let x1m = ref_act_batch(&dims, &x1, &id1, &sig);

        let y = run_on_tape(&store, &x, &|t, p, v| gb.forward(t, p, v));
        let ym = run_on_tape(&store, &xm, &|t, p, v| gb.forward(t, p, v));
        note("layer grads_b", ym.max_abs_diff(&ref_act_batch(&dims, &y, &tau, &sig)));

        let y = run_on_tape(&store, &x, &|t, p, v| pool.forward(t, p, v));
        let ym = run_on_tape(&store, &xm, &|t, p, v| pool.forward(t, p, v));
        note("layer pool", ym.max_abs_diff(&ref_act_batch(&dims, &y, &id1, &sig)));

        let y = run_on_tape(&store, &x1, &|t, p, v| gl.forward(t, p, v));
        let ym = run_on_tape(&store, &x1m, &|t, p, v| gl.forward(t, p, v));
        note("layer grads", ym.max_abs_diff(&ref_act_batch(&dims, &y, &id1, &sig)));

        let y = run_on_tape(&store, &x, &|t, p, v| ugb.forward(t, p, v));
        let ym = run_on_tape(&store, &xm, &|t, p, v| ugb.forward(t, p, v));
        note(
            "layer u_grads_b",
            ym.max_abs_diff(&ref_act_batch(&dims, &y, &tau, &sig)),
        );

        let y = run_on_tape(&store, &x1, &|t, p, v| prod.forward(t, p, v, &dims));
        let ym = run_on_tape(&store, &x1m, &|t, p, v| prod.forward(t, p, v, &dims));
        note(
            "layer prod",
            max_abs_diff(ym.data(), &ref_act_theta(&dims, y.data(), &sig)),
        );

        let y = run_on_tape(&store, &x, &|t, p, v| uprod.forward(t, p, v, &dims));
        let ym = run_on_tape(&store, &xm, &|t, p, v| uprod.forward(t, p, v, &dims));
        note(
            "layer u_prod",
            max_abs_diff(ym.data(), &ref_act_theta(&dims, y.data(), &sig)),
        );

        let y = run_on_tape(&store, &x1, &|t, p, v| vecl.forward(t, p, v));
        let ym = run_on_tape(&store, &x1m, &|t, p, v| vecl.forward(t, p, v));
        note("l_vec invariance", ym.max_abs_diff(&y));
    }

    let mdims = [1, 8, 6, 1];
    let mn: usize = mdims.iter().sum();
    let mb = 16;
    for (variant, key) in [
        (Variant::Gradmetanet, "model gradmetanet"),
        (Variant::GradmetanetPp, "model gradmetanet_pp"),
    ] {
        let cfg = ModelConfig {
            variant,
            batch: mb,
            ..ModelConfig::default()
        };
        let model = build(&cfg, &mdims, 7).unwrap();
        for _ in 0..50 {
            let (tau, _, sig) = random_group(mb, &mdims, rng);
            let x = gaussian(&[mb, mn, 2], rng);
            let y = model.forward_tensor(&x).unwrap();
            let ym = model.forward_tensor(&ref_act_batch(&mdims, &x, &tau, &sig)).unwrap();
            note(key, max_abs_diff(ym.data(), &ref_act_theta(&mdims, y.data(), &sig)));
        }
    }

    let secs = start.elapsed().as_secs_f64();
    let mut ok = secs < 120.0;
    let mut parts = Vec::new();
    for (k, v) in &worst {
        let tol = if matches!(*k, "function" | "decomposition") {
            1e-12
        } else {
            1e-8
        };
        ok &= *v <= tol;
        parts.push(format!("{k} {v:.1e}"));
    }
    outcome(ok, format!("{}; {secs:.1}s (<120s)", parts.join(", ")))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let dims = [1, 8, 6, 1];
    let n: usize = dims.iter().sum();
    let b = 16;
    let model = |v: Variant| -> MetaNetModel {
        build(
            &ModelConfig {
                variant: v,
                batch: b,
                ..ModelConfig::default()
            },
            &dims,
            3,
        )
        .unwrap()
    };
    let batch_asym = model(Variant::BatchAsym);
    let neuron_asym = model(Variant::NeuronAsym);
    let x = gaussian(&[b, n, 2], &mut rng);
    let ident: Vec<Vec<usize>> = dims.iter().map(|&d| (0..d).collect()).collect();
    let id_tau: Vec<usize> = (0..b).collect();

    let base = batch_asym.forward_tensor(&x).unwrap();
    let mut best_tau = 0.0f64;
    for _ in 0..20 {
        let (tau, _, _) = random_group(b, &dims, &mut rng);
        let y = batch_asym
            .forward_tensor(&ref_act_batch(&dims, &x, &tau, &ident))
            .unwrap();
        best_tau = best_tau.max(y.max_abs_diff(&base));
    }

    let base = neuron_asym.forward_tensor(&x).unwrap();
    let mut best_h = 0.0f64;
    for _ in 0..20 {
        let (_, _, sig) = random_group(b, &dims, &mut rng);
        let y = neuron_asym
            .forward_tensor(&ref_act_batch(&dims, &x, &id_tau, &sig))
            .unwrap();
        best_h = best_h.max(max_abs_diff(y.data(), &ref_act_theta(&dims, base.data(), &sig)));
    }
    outcome(
        best_tau > 1e-3 && best_h > 1e-3,
        format!("batch_asym largest batch-permutation change {best_tau:.3e}, neuron_asym largest hidden-permutation violation {best_h:.3e} (each >1e-3)"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let eps = DEFAULT_EPS;
    let (mut exact, mut w_ng, mut w_obd, mut w_obs) = (true, 0.0f64, 0.0f64, 0.0f64);
    let mut instances = 0;
    while instances < 30 {
        let dims: Vec<usize> = vec![
            rng.random_range(1..=4),
            rng.random_range(2..=10),
            rng.random_range(2..=8),
            rng.random_range(1..=3),
        ];
        let p = param_count(&dims);
        if p > 200 {
            continue;
        }
        instances += 1;
        let act = if instances % 2 == 0 {
            Activation::Relu
        } else {
            Activation::Sine
        };
        let theta = MlpParams::standard_normal(&dims, act, &mut rng).unwrap();
        let k = rng.random_range(1..=3 * p);
        let grads: Vec<FlatGradient> = (0..k)
            .map(|_| {
                let x: Vec<f64> = (0..dims[0]).map(|_| rng.sample(StandardNormal)).collect();
                let s: Vec<f64> = (0..dims[3]).map(|_| rng.sample(StandardNormal)).collect();
                backward_decomposed(&theta, &x, &s).unwrap().expand().unwrap()
            })
            .collect();
        let raw: Vec<Vec<f64>> = grads.iter().map(|g| g.data().to_vec()).collect();
        let rf = ref_fisher(&raw);
        let f = fisher(&grads).unwrap();
        for i in 0..p {
            for j in 0..p {
                exact &= f.matrix().at2(i, j) == rf[i][j];
            }
        }
        let diag = fisher_diag(&grads).unwrap();
        exact &= (0..p).all(|i| diag[i] == rf[i][i]);

        let mut damped = rf.clone();
        (0..p).for_each(|i| damped[i][i] += eps);
        let inv = ref_inverse(damped);
        let nabla: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let want: Vec<f64> = inv
            .iter()
            .map(|r| r.iter().zip(&nabla).map(|(a, b)| a * b).sum())
            .collect();
        let got = natural_gradient(&ParamVector::from_data(&dims, nabla).unwrap(), &grads, eps).unwrap();
        let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        w_ng = w_ng.max(max_abs_diff(got.data(), &want) / scale);

        let t = theta.values.data();
        let obd_want: Vec<f64> = (0..p).map(|i| t[i] * t[i] * rf[i][i]).collect();
        w_obd = w_obd.max(max_abs_diff(obd_saliency(&theta, &grads).unwrap().data(), &obd_want));
        let obs_want: Vec<f64> = (0..p).map(|i| t[i] * t[i] / inv[i][i]).collect();
        let obs_got = obs_saliency(&theta, &grads, eps).unwrap();
        w_obs = w_obs.max(
            obs_got
                .data()
                .iter()
                .zip(&obs_want)
                .map(|(a, b)| (a - b).abs() / b.abs().max(1e-12))
                .fold(0.0, f64::max),
        );
    }

    // Scaled basis vectors give F = c·I.
    let dims = [2, 3, 2];
    let p = param_count(&dims);
    let c = 0.35;
    let basis: Vec<FlatGradient> = (0..p)
        .map(|i| {
            let mut v = vec![0.0; p];
            v[i] = (c * p as f64).sqrt();
            ParamVector::from_data(&dims, v).unwrap()
        })
        .collect();
    let nabla: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    let got = natural_gradient(&ParamVector::from_data(&dims, nabla.clone()).unwrap(), &basis, eps).unwrap();
    let closed: Vec<f64> = nabla.iter().map(|v| v / (c + eps)).collect();
    let w_closed = max_abs_diff(got.data(), &closed);

    outcome(
        exact && w_ng <= 1e-9 && w_obd <= 1e-12 && w_obs <= 1e-9 && w_closed <= 1e-12,
        format!(
            "fisher exact {exact}, natural gradient rel {w_ng:.2e} (<=1e-9), obd {w_obd:.1e}, obs rel {w_obs:.2e} (<=1e-9), isotropic closed form {w_closed:.1e} over {instances} instances"
        ),
    )
}

fn criterion_5() -> Outcome {
    let n = 8;
    let eps = DEFAULT_EPS;
    let pair = prop1_pair(n, 5).unwrap();
    let (f1, f2) = (pair.first_flat().unwrap(), pair.second_flat().unwrap());
    let p = param_count(&pair.dims);

    let m1 = GradBatch::stack(&pair.first).unwrap().average_gradient().unwrap();
    let m2 = GradBatch::stack(&pair.second).unwrap().average_gradient().unwrap();
    let means_zero = m1.data().iter().chain(m2.data()).all(|&v| v == 0.0);
    let means_equal = m1 == m2;

    let rf1 = ref_fisher(&f1.iter().map(|g| g.data().to_vec()).collect::<Vec<_>>());
    let rf2 = ref_fisher(&f2.iter().map(|g| g.data().to_vec()).collect::<Vec<_>>());
    let iso = (0..p).all(|i| {
        (0..p).all(|j| {
            let (a, b) = if i == j {
                (1.0 / n as f64, 4.0 / n as f64)
            } else {
                (0.0, 0.0)
            };
            (rf1[i][j] - a).abs() <= 1e-14 && (rf2[i][j] - b).abs() <= 1e-14
        })
    });

    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let nabla = ParamVector::from_data(&pair.dims, (0..p).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap();
    let n1 = natural_gradient(&nabla, &f1, eps).unwrap();
    let n2 = natural_gradient(&nabla, &f2, eps).unwrap();
    let factor = (4.0 / n as f64 + eps) / (1.0 / n as f64 + eps);
    let w_ratio = n1
        .data()
        .iter()
        .zip(n2.data())
        .map(|(a, b)| (a / b - factor).abs() / factor)
        .fold(0.0f64, f64::max);

    let theta = MlpParams::standard_normal(&pair.dims, Activation::Relu, &mut rng).unwrap();
    let o1 = obd_saliency(&theta, &f1).unwrap();
    let o2 = obd_saliency(&theta, &f2).unwrap();
    let w_obd = o2
        .data()
        .iter()
        .zip(o1.data())
        .map(|(a, b)| (a / b - 4.0).abs())
        .fold(0.0f64, f64::max);

    outcome(
        means_zero && means_equal && iso && w_ratio <= 1e-12 && w_obd <= 1e-12,
        format!(
            "means zero {means_zero} and equal {means_equal}, fisher (1/n)I vs (4/n)I {iso}, natural-gradient ratio {factor:.6} rel err {w_ratio:.1e}, obd ratio 4 err {w_obd:.1e}"
        ),
    )
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let seeds = [1u64, 2, 3];
    let cfg = GenConfig::new(700, 2024);
    let data = generate_dataset(&cfg).unwrap();
    let [tr, va, te] = split(&data, [500, 100, 100]).unwrap();
    let norm = NormStats::fit(tr).unwrap();
    let splits = Splits {
        train: tr,
        val: va,
        test: te,
    };
    let gm_cfg = ModelConfig::for_variant(Variant::Gradmetanet);
    let gm_params = build(&gm_cfg, &SIREN_DIMS, 0).unwrap().num_params();
    let mc_cfg = ModelConfig::fit_budget(Variant::MlpConcat, &SIREN_DIMS, gm_params).unwrap();

    let (mut gm, mut mc, mut baseline) = (Vec::new(), Vec::new(), Vec::new());
    let mut per_seed_a = true;
    let mut lines = Vec::new();
    for &seed in &seeds {
        let tcfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let (_, r) = train(build(&gm_cfg, &SIREN_DIMS, seed).unwrap(), &splits, &norm, &tcfg).unwrap();
        let (test, init) = (r.test_mse.unwrap(), r.initial_test_mse.unwrap());
        per_seed_a &= test <= 0.5 * init;
        gm.push(test);
        baseline.push(r.baseline_test_mse.unwrap());
        let (_, rm) = train(build(&mc_cfg, &SIREN_DIMS, seed).unwrap(), &splits, &norm, &tcfg).unwrap();
        mc.push(rm.test_mse.unwrap());
        lines.push(format!(
            "seed {seed}: gradmetanet {test:.4} (epoch-0 {init:.4}, best epoch {}), mlp_concat {:.4} (best epoch {}), standard {:.4}",
            r.best_epoch,
            rm.test_mse.unwrap(),
            rm.best_epoch,
            r.baseline_test_mse.unwrap()
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (gm_m, mc_m, std_m) = (mean(&gm), mean(&mc), mean(&baseline));
    let (a, b, c) = (per_seed_a, gm_m <= mc_m, gm_m <= 1.15 * std_m);
    for l in &lines {
        println!("    {l}");
    }
    let secs = start.elapsed().as_secs_f64();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    println!(
        "    parameters: gradmetanet {gm_params}, mlp_concat {} (hidden {} x {} layers); {:.0}s on {cores} core(s)",
        build(&mc_cfg, &SIREN_DIMS, 0).unwrap().num_params(),
        mc_cfg.hidden,
        mc_cfg.mlp_hidden_layers,
        secs
    );
    outcome(
        a && b && c,
        format!(
            "(a) halves epoch-0 MSE on every seed {a}; (b) gradmetanet {gm_m:.4} <= mlp_concat {mc_m:.4} {b}; (c) gradmetanet {gm_m:.4} <= 1.15 x standard {std_m:.4} = {:.4} {c}",
            1.15 * std_m
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let dims = [1, 9, 7, 1];
    let n: usize = dims.iter().sum();
    let mut flagged = 0;
    for t in 0..50 {
        let mut x = gaussian(&[8, n, 2], &mut rng);
        let l = 1 + t % 2;
        let off: usize = dims[..l].iter().sum();
        let a = rng.random_range(0..dims[l]);
        let b = (a + rng.random_range(1..dims[l])) % dims[l];
        for i in 0..8 {
            for c in 0..2 {
                let v = x.data()[(i * n + off + a) * 2 + c];
                x.data_mut()[(i * n + off + b) * 2 + c] = v;
            }
        }
        let batch = GradBatch::from_tensor(&dims, &x).unwrap();
        if let Some(w) = batch.degenerate_witness(DEFAULT_DEGENERATE_TOL) {
            flagged += usize::from(w.layer == l && w.first == a.min(b) && w.second == a.max(b));
        }
    }
    let clean = (0..1000)
        .filter(|_| {
            let x = GradBatch::from_tensor(&dims, &gaussian(&[8, n, 2], &mut rng)).unwrap();
            !x.in_degenerate_set(DEFAULT_DEGENERATE_TOL)
        })
        .count();
    outcome(
        flagged == 50 && clean == 1000,
        format!("{flagged}/50 constructed members flagged with the duplicated pair, {clean}/1000 random batches clean"),
    )
}

fn exit_code(args: &[&str]) -> i32 {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
        .status
        .code()
        .unwrap_or(-1)
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let (gds, gds2, gmc) = (p("d.gds"), p("e.gds"), p("m.gmc"));
    let gen = [
        "gen-data",
        "--out",
        &gds,
        "--count",
        "6",
        "--seed",
        "8",
        "--batch",
        "8",
        "--target-points",
        "32",
        "--dims",
        "1,5,4,1",
    ];
    let mut ok = exit_code(&gen) == 0;
    let mut gen2 = gen;
    gen2[2] = &gds2;
    ok &= exit_code(&gen2) == 0;
    let bytes = std::fs::read(&gds).unwrap();
    let regen = bytes == std::fs::read(&gds2).unwrap();
    let gds_rt = Dataset::from_bytes(&bytes).unwrap().to_bytes().unwrap() == bytes;

    let ds = Dataset::from_bytes(&bytes).unwrap();
    let norm = NormStats::fit(&ds.examples).unwrap();
    let model = build(
        &ModelConfig {
            hidden: 6,
            batch: 8,
            ..ModelConfig::default()
        },
        &[1, 5, 4, 1],
        2,
    )
    .unwrap();
    let n = model.num_params();
    let ckpt = Checkpoint {
        model,
        norm: Some(norm),
        split: Some([4, 1, 1]),
        adam: Some(AdamState {
            t: 2,
            m: vec![0.125; n],
            v: vec![0.5; n],
        }),
    };
    let cbytes = ckpt.to_bytes().unwrap();
    std::fs::write(&gmc, &cbytes).unwrap();
    let gmc_rt = Checkpoint::from_bytes(&cbytes).unwrap().to_bytes().unwrap() == cbytes;

    let report = p("r.json");
    ok &= exit_code(&["eval", "--data", &gds, "--model", &gmc, "--report", &report]) == 0;

    let corrupt = |src: &[u8], name: &str, f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = src.to_vec();
        f(&mut b);
        let path = p(name);
        std::fs::write(&path, b).unwrap();
        path
    };
    let bad_magic = corrupt(&bytes, "magic.gds", &|b| b[0] ^= 0xff);
    let bad_len = corrupt(&bytes, "len.gds", &|b| b.truncate(b.len() - 4 * 10));
    let bad_hlen = corrupt(&bytes, "hlen.gds", &|b| {
        b[4..8].copy_from_slice(&u32::MAX.to_le_bytes())
    });
    let codes_gds = [
        exit_code(&[
            "oracle",
            "fim-diag",
            "--grads",
            &bad_magic,
            "--index",
            "0",
            "--out",
            &p("o.json"),
        ]),
        exit_code(&[
            "oracle",
            "fim-diag",
            "--grads",
            &bad_len,
            "--index",
            "0",
            "--out",
            &p("o.json"),
        ]),
        exit_code(&[
            "oracle",
            "fim-diag",
            "--grads",
            &bad_hlen,
            "--index",
            "0",
            "--out",
            &p("o.json"),
        ]),
    ];
    let gmc_magic = corrupt(&cbytes, "magic.gmc", &|b| b[3] = b'0');
    let gmc_len = corrupt(&cbytes, "len.gmc", &|b| b.truncate(b.len() - 8));
    let codes_gmc = [
        exit_code(&["eval", "--data", &gds, "--model", &gmc_magic, "--report", &report]),
        exit_code(&["eval", "--data", &gds, "--model", &gmc_len, "--report", &report]),
    ];
    let missing = exit_code(&["eval", "--data", &p("none.gds"), "--model", &gmc, "--report", &report]);
    let usage = exit_code(&["gen-data", "--bogus"]);
    let no_partial = !std::path::Path::new(&p("o.json")).exists();
    let codes_ok = codes_gds.iter().chain(&codes_gmc).all(|&c| c == 4) && missing == 3 && usage == 2;
    outcome(
        ok && regen && gds_rt && gmc_rt && codes_ok && no_partial,
        format!(
            "gds round trip {gds_rt}, regeneration identical {regen}, gmc round trip {gmc_rt}, corrupted exit codes gds {codes_gds:?} gmc {codes_gmc:?} (want 4), missing {missing} (3), usage {usage} (2), no partial output {no_partial}"
        ),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (1, "decomposition oracle", criterion_1),
        (2, "symmetry suite", criterion_2),
        (3, "baseline asymmetry witnesses", criterion_3),
        (4, "oracle equivalence", criterion_4),
        (5, "separating pair", criterion_5),
        (7, "degenerate-set behavior", criterion_7),
        (8, "format durability", criterion_8),
        (6, "benchmark learning sanity", criterion_6),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!(
            "criterion {id} [{verdict}] {name}: {} ({})",
            o.summary,
            humanize(t.elapsed())
        );
        if !o.passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}

fn humanize(d: Duration) -> String {
    let s = d.as_secs_f64();
    if s < 120.0 {
        format!("{s:.1}s")
    } else {
        format!("{:.1}min", s / 60.0)
    }
}
