use gradmeta::curvature::{fisher, fisher_diag, natural_gradient};
use gradmeta::gradspace::{GradBatch, GroupElement};
use gradmeta::metanet::{build, forward_invariant, forward_theta, ModelConfig, Variant};
use gradmeta::mlp::{backward_decomposed, forward, Activation, FlatGradient, MlpParams};
use gradmeta::numerics::Tensor;
use gradmeta::perm::{HiddenPerm, Permutation};
use gradmeta::taskgen::{generate_dataset, GenConfig, NormStats};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    (1usize..4, prop::collection::vec(1usize..7, 1..3), 1usize..3).prop_map(|(i, h, o)| {
        let mut d = vec![i];
        d.extend(h);
        d.push(o);
        d
    })
}

fn random_batch(dims: &[usize], b: usize, rng: &mut ChaCha8Rng) -> GradBatch {
    let n: usize = dims.iter().sum();
    let data = (0..b * n * 2).map(|_| rng.sample(StandardNormal)).collect();
    GradBatch::from_tensor(dims, &Tensor::new(vec![b, n, 2], data).unwrap()).unwrap()
}

fn random_grads(dims: &[usize], k: usize, act: Activation, rng: &mut ChaCha8Rng) -> (MlpParams, Vec<FlatGradient>) {
    let theta = MlpParams::standard_normal(dims, act, rng).unwrap();
    let grads = (0..k)
        .map(|_| {
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.sample(StandardNormal)).collect();
            let s: Vec<f64> = (0..dims[dims.len() - 1]).map(|_| rng.sample(StandardNormal)).collect();
            backward_decomposed(&theta, &x, &s).unwrap().expand().unwrap()
        })
        .collect();
    (theta, grads)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permutation_group_laws(n in 1usize..12, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (Permutation::random(n, &mut rng), Permutation::random(n, &mut rng), Permutation::random(n, &mut rng));
        prop_assert_eq!(a.compose(&b).compose(&c), a.compose(&b.compose(&c)));
        prop_assert!(a.compose(&a.inverse()).is_identity());
        prop_assert!(a.inverse().compose(&a).is_identity());
        for i in 0..n {
            prop_assert_eq!(a.compose(&b).map(i), a.map(b.map(i)));
        }
    }

    #[test]
    fn batch_action_is_a_group_action(dims in dims_strategy(), b in 1usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_batch(&dims, b, &mut rng);
        let g1 = GroupElement::random(b, &dims, &mut rng);
        let g2 = GroupElement::random(b, &dims, &mut rng);
        let lhs = x.act(&g2).unwrap().act(&g1).unwrap();
        prop_assert_eq!(&lhs, &x.act(&g1.compose(&g2)).unwrap());
        prop_assert_eq!(&x.act(&g1).unwrap().act(&g1.inverse()).unwrap(), &x);
        prop_assert_eq!(&x.act(&GroupElement::identity(b, &dims)).unwrap(), &x);
    }

    #[test]
    fn expansion_commutes_with_hidden_permutations(dims in dims_strategy(), relu: bool, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act = if relu { Activation::Relu } else { Activation::Sine };
        let theta = MlpParams::standard_normal(&dims, act, &mut rng).unwrap();
        let h = HiddenPerm::random(&dims, &mut rng);
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.sample(StandardNormal)).collect();
        let s: Vec<f64> = (0..dims[dims.len() - 1]).map(|_| rng.sample(StandardNormal)).collect();
        let d = backward_decomposed(&theta, &x, &s).unwrap();
        let lhs = d.act(&h).unwrap().expand().unwrap();
        let rhs = d.expand().unwrap().act(&h).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) == 0.0);
        let moved = theta.act(&h).unwrap();
        let y0 = forward(&theta, &x).unwrap().output().to_vec();
        let y1 = forward(&moved, &x).unwrap().output().to_vec();
        for (a, b) in y0.iter().zip(&y1) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn average_gradient_matches_mean_of_expansions(dims in dims_strategy(), b in 1usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_batch(&dims, b, &mut rng);
        let avg = x.average_gradient().unwrap();
        let mut want = vec![0.0; avg.len()];
        for i in 0..b {
            for (w, v) in want.iter_mut().zip(x.sample(i).unwrap().expand().unwrap().data()) {
                *w += v / b as f64;
            }
        }
        for (a, w) in avg.data().iter().zip(&want) {
            prop_assert!((a - w).abs() <= 1e-12 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn fisher_is_symmetric_psd_with_matching_diagonal(dims in dims_strategy(), k in 1usize..10, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, grads) = random_grads(&dims, k, Activation::Sine, &mut rng);
        let f = fisher(&grads).unwrap();
        let p = f.dim();
        let m = f.matrix();
        for i in 0..p {
            for j in 0..p {
                prop_assert_eq!(m.at2(i, j), m.at2(j, i));
            }
        }
        prop_assert_eq!(f.diag(), fisher_diag(&grads).unwrap());
        let v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let q: f64 = (0..p).map(|i| (0..p).map(|j| v[i] * m.at2(i, j) * v[j]).sum::<f64>()).sum();
        prop_assert!(q >= -1e-10 * (1.0 + m.max_abs()));
    }

    #[test]
    fn natural_gradient_solves_the_damped_system(dims in dims_strategy(), k in 1usize..10, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (theta, grads) = random_grads(&dims, k, Activation::Relu, &mut rng);
        let eps = 1e-2;
        let nabla = grads[0].clone();
        let ng = natural_gradient(&nabla, &grads, eps).unwrap();
        let m = fisher(&grads).unwrap();
        let p = theta.num_params();
        for i in 0..p {
            let r: f64 = (0..p).map(|j| m.matrix().at2(i, j) * ng.data()[j]).sum::<f64>() + eps * ng.data()[i];
            prop_assert!((r - nabla.data()[i]).abs() <= 1e-8 * (1.0 + nabla.data()[i].abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn models_respect_their_symmetry(seed: u64) {
        let dims = [1, 5, 4, 1];
        let b = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_batch(&dims, b, &mut rng);
        let g = GroupElement::random(b, &dims, &mut rng);
        let cfg = |v| ModelConfig { variant: v, hidden: 8, batch: b, ..ModelConfig::default() };
        let gm = build(&cfg(Variant::Gradmetanet), &dims, seed).unwrap();
        let lhs = forward_theta(&gm, &x.act(&g).unwrap()).unwrap();
        let rhs = forward_theta(&gm, &x).unwrap().act(&g.hidden).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-8);
        let inv = build(&cfg(Variant::Invariant), &dims, seed).unwrap();
        let a = forward_invariant(&inv, &x).unwrap();
        let c = forward_invariant(&inv, &x.act(&g).unwrap()).unwrap();
        prop_assert!(a.max_abs_diff(&c) <= 1e-8);
    }
}

#[test]
fn normalization_round_trips_targets() {
    let mut cfg = GenConfig::new(6, 11);
    cfg.dims = vec![1, 4, 3, 1];
    cfg.batch = 8;
    cfg.target_points = 32;
    let data = generate_dataset(&cfg).unwrap();
    let norm = NormStats::fit(&data).unwrap();
    for ex in &data {
        let t = ex.target.data();
        let back = norm.unnormalize_target(&norm.normalize_target(t));
        for (a, b) in t.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
    let z: Vec<Vec<f64>> = data.iter().map(|e| norm.normalize_target(e.target.data())).collect();
    let all: Vec<f64> = z.concat();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
    assert!(mean.abs() < 1e-10, "mean {mean}");
    assert!((var - 1.0).abs() < 1e-8, "var {var}");
}
