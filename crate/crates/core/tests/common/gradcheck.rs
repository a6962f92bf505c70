//! Central finite-difference oracle for every primitive op on the tape.

use netdisguise::tensor::{BatchNormAttrs, Conv2dAttrs, Op, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub op: &'static str,
    pub seed: u64,
    pub input: usize,
    #[allow(dead_code)]
    pub shape: Vec<usize>,
    pub rel_err: f64,
}

fn tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Values separated by at least 0.05 so no kink lies within one step.
fn spaced(shape: &[usize], rng: &mut ChaCha8Rng, avoid_zero: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.05 + 0.025).collect();
    if avoid_zero {
        vals.iter_mut().for_each(|v| *v += v.signum() * 0.05);
    }
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Magnitudes in [0.5, 1.5] with random sign.
fn order_one(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.5f32..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn projected(out: &Tensor, r: &[f32]) -> f64 {
    out.data().iter().zip(r).map(|(a, b)| *a as f64 * *b as f64).sum()
}

/// Compares the tape's VJP against central differences of `Σ r·f(x)`.
///
/// The error is `‖a − n‖ / max(‖a‖, ‖n‖, 1)`: relative for O(1) gradients,
/// absolute for gradients that happen to be near zero, where f32 rounding
/// of the outputs sets the finite-difference noise floor.
fn check<F>(op: &'static str, seed: u64, inputs: Vec<Tensor>, wrt: &[usize], build: F) -> Vec<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor], grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(t.clone().requires_grad(grad && wrt.contains(&i))))
            .collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (mut tape, vars, out) = eval(&inputs, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // signed O(1) weights: a constant-sign r is nearly annihilated by the
    // batchnorm centring projection, leaving a gradient below the noise floor
    let r = order_one(tape.value(out).shape(), &mut rng).into_data();
    tape.backward_vjp(out, &r).unwrap();

    wrt.iter()
        .map(|&k| {
            let analytic = tape.grad(vars[k]).expect("gradient populated").to_vec();
            let mut numeric = vec![0.0f64; analytic.len()];
            for (e, slot) in numeric.iter_mut().enumerate() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[e] += STEP;
                let mut minus = inputs.clone();
                minus[k].data_mut()[e] -= STEP;
                let (tp, _, op_) = eval(&plus, false);
                let (tm, _, om) = eval(&minus, false);
                *slot = (projected(tp.value(op_), &r) - projected(tm.value(om), &r)) / (2.0 * STEP as f64);
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (*a as f64 - n).powi(2)).sum::<f64>().sqrt();
            let na: f64 = analytic.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
            let nn: f64 = numeric.iter().map(|n| n.powi(2)).sum::<f64>().sqrt();
            GradCheck {
                op,
                seed,
                input: k,
                shape: inputs[k].shape().to_vec(),
                rel_err: diff / na.max(nn).max(1.0),
            }
        })
        .collect()
}

pub fn conv2d(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, d) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
    let k = rng.random_range(1..4);
    let h = rng.random_range(k..k + 4);
    let w = rng.random_range(k..k + 4);
    let attrs = Conv2dAttrs { stride: rng.random_range(1..3), padding: rng.random_range(0..2) };
    let inputs = vec![tensor(&[n, c, h, w], &mut rng), tensor(&[d, c, k, k], &mut rng), tensor(&[d], &mut rng)];
    check("conv2d", seed, inputs, &[0, 1, 2], move |t, v| t.forward_op(&Op::Conv2d(attrs), v).unwrap())
}

pub fn dense(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, i, o) = (rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..6));
    let inputs = vec![tensor(&[n, i], &mut rng), tensor(&[o, i], &mut rng), tensor(&[o], &mut rng)];
    check("dense", seed, inputs, &[0, 1, 2], |t, v| t.forward_op(&Op::Dense, v).unwrap())
}

pub fn batchnorm(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // at least four values per channel so the batch statistics are not degenerate
    let (n, c) = (rng.random_range(2..4), rng.random_range(1..4));
    let shape = if rng.random_bool(0.5) { vec![n, c, rng.random_range(2..4), rng.random_range(1..4)] } else { vec![n + 2, c] };
    let training = seed % 3 != 0;
    let mut rv = tensor(&[c], &mut rng);
    rv.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
    let inputs = vec![tensor(&shape, &mut rng), order_one(&[c], &mut rng), tensor(&[c], &mut rng), tensor(&[c], &mut rng), rv];
    let attrs = if training { BatchNormAttrs::training() } else { BatchNormAttrs::eval() };
    let name = if training { "batchnorm(train)" } else { "batchnorm(eval)" };
    check(name, seed, inputs, &[0, 1, 2], move |t, v| t.forward_op(&Op::BatchNorm(attrs), v).unwrap())
}

pub fn relu(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.random_range(1..4), rng.random_range(1..9)];
    let inputs = vec![spaced(&shape, &mut rng, true)];
    check("relu", seed, inputs, &[0], |t, v| t.forward_op(&Op::Relu, v).unwrap())
}

pub fn maxpool(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(2..6), rng.random_range(2..6)];
    let inputs = vec![spaced(&shape, &mut rng, false)];
    check("maxpool2x2", seed, inputs, &[0], |t, v| t.forward_op(&Op::MaxPool2x2, v).unwrap())
}

pub fn avgpool(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5)];
    let inputs = vec![tensor(&shape, &mut rng)];
    check("avgpool_global", seed, inputs, &[0], |t, v| t.forward_op(&Op::AvgPoolGlobal, v).unwrap())
}

pub fn softmax_ce(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (rng.random_range(1..4), rng.random_range(2..5));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut logits = tensor(&[n, k], &mut rng);
    logits.data_mut().iter_mut().for_each(|v| *v *= 2.0);
    let op = Op::SoftmaxCrossEntropy { labels };
    check("softmax_crossentropy", seed, vec![logits], &[0], move |t, v| t.forward_op(&op, v).unwrap())
}

pub fn mse(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.random_range(1..4), rng.random_range(1..5)];
    let inputs = vec![tensor(&shape, &mut rng), tensor(&shape, &mut rng)];
    check("mse", seed, inputs, &[0, 1], |t, v| t.forward_op(&Op::Mse, v).unwrap())
}

pub fn sigmoid_bce(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.random_range(1..4), rng.random_range(1..5)];
    let mut logits = tensor(&shape, &mut rng);
    logits.data_mut().iter_mut().for_each(|v| *v *= 3.0);
    let n = shape.iter().product();
    let target = Tensor::new(shape.to_vec(), (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()).unwrap();
    check("sigmoid_bce", seed, vec![logits, target], &[0], |t, v| t.forward_op(&Op::SigmoidBce, v).unwrap())
}

/// Every op over the given seeds.
pub fn all_ops(seeds: std::ops::Range<u64>) -> Vec<GradCheck> {
    let ops: [fn(u64) -> Vec<GradCheck>; 9] = [conv2d, dense, batchnorm, relu, maxpool, avgpool, softmax_ce, mse, sigmoid_bce];
    seeds.flat_map(|s| ops.iter().flat_map(move |f| f(s))).collect()
}
