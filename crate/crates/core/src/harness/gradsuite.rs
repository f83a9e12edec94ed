//! Finite-difference checks of every differentiable kernel and of the full
//! decoders, on randomized small shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoders::{DecoderConfig, NeuralFieldModel, ALL_STRATEGIES};
use crate::diffcore::layers::MultiHeadAttention;
use crate::diffcore::{finite_diff_check, param_gradient_check, BnStats, Graph, ParamStore, Tensor, Var, DEFAULT_FD_EPSILON};
use crate::error::Result;
use crate::fields::{embed_points, CodeSource};

/// Tolerance for single kernels.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for a decoder forward pass followed by the loss.
pub const DECODER_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub name: String,
    pub cases: usize,
    /// Worst relative error over all cases.
    pub max_error: f64,
    pub tolerance: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

fn random(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Reduces `y` to a scalar with fixed random weights so that every output
/// element gets a distinct upstream gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.value(y).numel();
    let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.weighted_sum(y, w)
}

fn run_cases(
    name: &str,
    cases: usize,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
    mut case: impl FnMut(&mut ChaCha8Rng, u64) -> Result<f64>,
) -> Result<GradCheckResult> {
    let mut worst = 0.0f64;
    for i in 0..cases {
        worst = worst.max(case(rng, i as u64)?);
    }
    Ok(GradCheckResult {
        name: name.to_string(),
        cases,
        max_error: worst,
        tolerance,
    })
}

fn linear_case(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (n, i, o) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..5));
    let bias = rng.random_bool(0.5);
    let mut inputs = vec![random(vec![n, i], rng), random(vec![o, i], rng)];
    if bias {
        inputs.push(random(vec![o], rng));
    }
    finite_diff_check(
        |g, v| {
            let y = g.linear(v[0], v[1], v.get(2).copied())?;
            project(g, y, seed)
        },
        &inputs,
        DEFAULT_FD_EPSILON,
    )
}

fn conv_case(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (b, ci, co) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
    let k = if rng.random_bool(0.5) { 1 } else { 3 };
    let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..2));
    let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
    let inputs = [random(vec![b, ci, h, w], rng), random(vec![co, ci, k, k], rng)];
    finite_diff_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], stride, pad)?;
            project(g, y, seed)
        },
        &inputs,
        DEFAULT_FD_EPSILON,
    )
}

fn batch_norm_case(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let c = rng.random_range(1..4);
    let shape = if rng.random_bool(0.5) {
        vec![rng.random_range(2..7), c]
    } else {
        vec![rng.random_range(1..3), c, rng.random_range(1..4), rng.random_range(2..4)]
    };
    let inputs = [random(shape, rng), random(vec![c], rng), random(vec![c], rng)];
    finite_diff_check(
        |g, v| {
            let y = g.batch_norm(v[0], Some(v[1]), Some(v[2]), BnStats::Batch(None))?;
            project(g, y, seed)
        },
        &inputs,
        DEFAULT_FD_EPSILON,
    )
}

fn layer_norm_case(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let (n, k) = (rng.random_range(1..5), rng.random_range(2..7));
    let inputs = [random(vec![n, k], rng), random(vec![k], rng), random(vec![k], rng)];
    finite_diff_check(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            project(g, y, seed)
        },
        &inputs,
        DEFAULT_FD_EPSILON,
    )
}

fn attention_case(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let heads = rng.random_range(1..3);
    let dim = heads * rng.random_range(1..4);
    let batch = rng.random_range(1..3);
    let (nq, nt) = (rng.random_range(1..4), rng.random_range(1..5));
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", dim, heads, rng)?;
    let inputs = [random(vec![batch * nq, dim], rng), random(vec![batch * nt, dim], rng)];
    param_gradient_check(
        &store,
        &inputs,
        |cx, v| {
            let y = mha.forward(cx, v[0], v[1], batch)?;
            project(cx.g, y, seed)
        },
        DEFAULT_FD_EPSILON,
    )
}

fn cross_entropy_case(rng: &mut ChaCha8Rng, _seed: u64) -> Result<f64> {
    let (n, k) = (rng.random_range(1..6), rng.random_range(2..6));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let inputs = [Tensor::from_fn(vec![n, k], |_| rng.random_range(-3.0..3.0))];
    finite_diff_check(|g, v| g.softmax_cross_entropy(v[0], &labels), &inputs, DEFAULT_FD_EPSILON)
}

/// Decoder forward from a feature map (conditioning included) plus the loss,
/// checked against every decoder parameter, the map and the point embedding.
fn decoder_case(strategy: crate::decoders::Strategy, source: CodeSource, seed: u64) -> Result<f64> {
    let config = DecoderConfig {
        hidden: 8,
        heads: 2,
        embed_levels: 1,
        classes: 3,
        ..DecoderConfig::new(strategy, source)
    };
    let (batch, per_image, channels) = (2, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let model = NeuralFieldModel::new(&config, channels, &mut store, &mut rng)?;
    let coords: Vec<[f64; 2]> = (0..batch * per_image)
        .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
        .collect();
    let labels: Vec<usize> = (0..coords.len()).map(|_| rng.random_range(0..config.classes)).collect();
    let inputs = [
        embed_points::<f64>(&coords, config.embed_levels)?,
        random(vec![batch, channels, 2, 2], &mut rng),
    ];
    param_gradient_check(
        &store,
        &inputs,
        |cx, v| {
            let cond = model.conditioning(cx.g, v[1], &coords, per_image)?;
            let y = model.forward(cx, v[0], cond, batch)?;
            cx.g.softmax_cross_entropy(y, &labels)
        },
        DEFAULT_FD_EPSILON,
    )
}

/// Runs `cases` random shapes per kernel and one check per decoder strategy.
pub fn gradient_suite(cases: usize, seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        run_cases("linear", cases, OP_TOLERANCE, &mut rng, linear_case)?,
        run_cases("conv2d", cases, OP_TOLERANCE, &mut rng, conv_case)?,
        run_cases("batch_norm", cases, OP_TOLERANCE, &mut rng, batch_norm_case)?,
        run_cases("layer_norm", cases, OP_TOLERANCE, &mut rng, layer_norm_case)?,
        run_cases("multi_head_attention", cases, OP_TOLERANCE, &mut rng, attention_case)?,
        run_cases("softmax_cross_entropy", cases, OP_TOLERANCE, &mut rng, cross_entropy_case)?,
    ];
    for (i, &(strategy, source)) in ALL_STRATEGIES.iter().enumerate() {
        let err = decoder_case(strategy, source, seed ^ (i as u64 + 1))?;
        out.push(GradCheckResult {
            name: format!("decoder {}", super::strategy_spec(strategy, source)),
            cases: 1,
            max_error: err,
            tolerance: DECODER_TOLERANCE,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        for r in gradient_suite(3, 5).unwrap() {
            assert!(r.passed(), "{}: {:e}", r.name, r.max_error);
        }
    }
}
