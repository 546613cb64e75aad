//! Browser bindings: three small operations that return JSON strings.

use gradmeta::curvature::{fisher_diag, obd_saliency, obs_saliency, DEFAULT_EPS};
use gradmeta::gradspace::{GradBatch, GroupElement};
use gradmeta::metanet::{build, forward_theta, ModelConfig, Variant};
use gradmeta::mlp::{backward_decomposed, forward, Activation, FlatGradient, MlpParams};
use gradmeta::suites::separation_report;
use gradmeta::taskgen::output_gradients;
use gradmeta::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

const MAX_DEMO_PARAMS: usize = 2048;

fn parse_dims(dims: &str) -> Result<Vec<usize>> {
    let d: Vec<usize> = dims
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| gradmeta::Error::Contract(format!("layer sizes `{dims}`: {e}")))?;
    if d.len() < 2 || d.contains(&0) {
        return Err(gradmeta::Error::Contract(
            "need at least two positive layer sizes".into(),
        ));
    }
    Ok(d)
}

fn parse_activation(name: &str) -> Result<Activation> {
    match name {
        "relu" => Ok(Activation::Relu),
        "sine" => Ok(Activation::Sine),
        other => Err(gradmeta::Error::Contract(format!("unknown activation `{other}`"))),
    }
}

/// Means, natural gradients and OBD ratios of the two equal-mean gradient sets.
pub fn separation_json(n: usize, seed: u64) -> Result<String> {
    let r = separation_report(n, seed)?;
    let ratios: Vec<f64> = r
        .natural_first
        .iter()
        .zip(&r.natural_second)
        .map(|(a, b)| a / b)
        .collect();
    Ok(json!({
        "n": r.n,
        "eps": DEFAULT_EPS,
        "mean_first": r.mean_first,
        "mean_second": r.mean_second,
        "natural_first": r.natural_first,
        "natural_second": r.natural_second,
        "natural_ratio": ratios,
        "natural_ratio_expected": r.natural_ratio_expected,
        "obd_ratio": r.obd_ratio,
    })
    .to_string())
}

/// Decomposed gradient of one input plus curvature scores over a batch of inputs in `[-1, 1]`.
pub fn curvature_json(dims: &str, activation: &str, seed: u64, batch: usize) -> Result<String> {
    let dims = parse_dims(dims)?;
    if dims[0] != 1 || dims[dims.len() - 1] != 1 {
        return Err(gradmeta::Error::Contract(
            "the demo network maps one input to one output".into(),
        ));
    }
    if gradmeta::mlp::param_count(&dims) > MAX_DEMO_PARAMS {
        return Err(gradmeta::Error::Contract(format!(
            "keep the network under {MAX_DEMO_PARAMS} parameters"
        )));
    }
    if batch == 0 {
        return Err(gradmeta::Error::Contract("batch must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = MlpParams::standard_normal(&dims, parse_activation(activation)?, &mut rng)?;
    let xs: Vec<f64> = (0..batch).map(|_| rng.random_range(-1.0..1.0)).collect();
    let decomposed = backward_decomposed(&theta, &xs[..1], &[1.0])?;
    let grads: Vec<FlatGradient> = output_gradients(&theta, &xs)?
        .iter()
        .map(|d| d.expand())
        .collect::<Result<_>>()?;
    Ok(json!({
        "dims": dims,
        "x0": xs[0],
        "y0": forward(&theta, &xs[..1])?.output()[0],
        "acts": decomposed.acts,
        "tangents": decomposed.tangents,
        "gradient": decomposed.expand()?.into_data(),
        "fisher_diag": fisher_diag(&grads)?,
        "obd": obd_saliency(&theta, &grads)?.into_data(),
        "obs": obs_saliency(&theta, &grads, DEFAULT_EPS)?.into_data(),
    })
    .to_string())
}

/// Largest violation of `f(g·x) = g·f(x)` over random group elements for
/// the equivariant model and the two asymmetric baselines.
pub fn symmetry_json(seed: u64, trials: usize) -> Result<String> {
    let dims = [1, 6, 5, 1];
    let b = 8;
    let n: usize = dims.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..b * n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = GradBatch::from_tensor(&dims, &gradmeta::numerics::Tensor::new(vec![b, n, 2], data)?)?;
    let mut rows = Vec::new();
    for variant in [Variant::Gradmetanet, Variant::BatchAsym, Variant::NeuronAsym] {
        let cfg = ModelConfig {
            variant,
            hidden: 12,
            batch: b,
            ..ModelConfig::default()
        };
        let model = build(&cfg, &dims, seed)?;
        let base = forward_theta(&model, &x)?;
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let g = GroupElement::random(b, &dims, &mut rng);
            let moved = forward_theta(&model, &x.act(&g)?)?;
            worst = worst.max(moved.max_abs_diff(&base.act(&g.hidden)?));
        }
        rows.push(json!({ "model": variant.name(), "params": model.num_params(), "max_violation": worst }));
    }
    Ok(json!({ "dims": dims, "batch": b, "trials": trials, "models": rows }).to_string())
}

fn to_js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn separation(n: usize, seed: u64) -> std::result::Result<String, JsError> {
    to_js(separation_json(n, seed))
}

#[wasm_bindgen]
pub fn curvature(dims: &str, activation: &str, seed: u64, batch: usize) -> std::result::Result<String, JsError> {
    to_js(curvature_json(dims, activation, seed, batch))
}

#[wasm_bindgen]
pub fn symmetry(seed: u64, trials: usize) -> std::result::Result<String, JsError> {
    to_js(symmetry_json(seed, trials))
}
