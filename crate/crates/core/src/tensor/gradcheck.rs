//! Central finite-difference checks of the analytic gradients, run in `f64`.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ops::{self, Lrn};
use super::{ParamGroup, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Relative error `|a − n| / max(|a|, |n|, floor)`; the floor keeps
/// gradients that are zero up to rounding from dominating the report.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Upper bound on coordinates probed per variable; larger tensors are
/// subsampled at random.
const MAX_PROBES: usize = 400;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `loss` taken with
/// respect to `values`. Returns the largest relative error seen.
///
/// `values` is restored to its original contents before returning.
pub fn finite_difference_check(
    values: &mut [f64],
    analytic: &[f64],
    epsilon: f64,
    probes: Option<&[usize]>,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    assert_eq!(values.len(), analytic.len(), "gradient length mismatch");
    let all: Vec<usize>;
    let indices = match probes {
        Some(p) => p,
        None => {
            all = (0..values.len()).collect();
            &all
        }
    };
    let mut worst: f64 = 0.0;
    for &i in indices {
        let orig = values[i];
        values[i] = orig + epsilon;
        let up = loss(values);
        values[i] = orig - epsilon;
        let down = loss(values);
        values[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Identity,
    Conv2d,
    MaxPool2d,
    Lrn,
    Relu,
    Linear,
    Dropout,
    SoftmaxCrossEntropy,
}

impl OpKind {
    /// Every differentiable layer of the network.
    pub const DIFFERENTIABLE: [OpKind; 7] = [
        OpKind::Conv2d,
        OpKind::MaxPool2d,
        OpKind::Lrn,
        OpKind::Relu,
        OpKind::Linear,
        OpKind::Dropout,
        OpKind::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Identity => "identity",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::Lrn => "lrn",
            OpKind::Relu => "relu",
            OpKind::Linear => "linear",
            OpKind::Dropout => "dropout",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        std::iter::once(OpKind::Identity)
            .chain(Self::DIFFERENTIABLE)
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::input(format!("unknown op {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub op: OpKind,
    pub shape: Vec<usize>,
    pub max_relative_error: f64,
}

impl GradReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22} {:<18} max_rel_err={:.3e}",
            self.op.name(),
            format!("{:?}", self.shape),
            self.max_relative_error
        )
    }
}

fn randn(dims: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(dims, data).unwrap()
}

fn random_group(name: &str, dims: &[usize], rng: &mut impl Rng) -> ParamGroup<f64> {
    let w = randn(dims, rng);
    let b = randn(&[dims[0]], rng);
    ParamGroup::new(name, w, b).unwrap()
}

fn probe_set(len: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if len > MAX_PROBES {
        idx.shuffle(rng);
        idx.truncate(MAX_PROBES);
    }
    idx
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks one op on one randomly drawn shape. The scalar loss is a random
/// projection `Σ r ⊙ op(x)` so every output element contributes.
pub fn check_op(kind: OpKind, epsilon: f64, rng: &mut impl Rng) -> Result<GradReport> {
    let (shape, err) = match kind {
        OpKind::Identity => {
            let n = rng.gen_range(2..20);
            let x = randn(&[n], rng);
            let r = randn(&[n], rng);
            let mut xs = x.data().to_vec();
            let err = finite_difference_check(&mut xs, r.data(), epsilon, None, |v| dot(v, r.data()));
            (vec![n], err)
        }
        OpKind::Conv2d => check_conv(epsilon, rng)?,
        OpKind::MaxPool2d => {
            let k = rng.gen_range(2..=3);
            let s = rng.gen_range(1..=2);
            let dims = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(k..k + 6), rng.gen_range(k..k + 6)];
            let x = randn(&dims, rng);
            let err = check_unary(&x, epsilon, rng, |t| ops::maxpool2d(t, k, s), |i, o| {
                ops::maxpool2d_backward(i, o, k, s)
            })?;
            (dims.to_vec(), err)
        }
        OpKind::Lrn => {
            // large alpha so the normalization is far from the identity
            let lrn = Lrn {
                size: rng.gen_range(2..=5),
                kappa: 1.0,
                alpha: 0.3,
                beta: 0.75,
            };
            let dims = [rng.gen_range(1..=2), rng.gen_range(2..=7), rng.gen_range(1..=4), rng.gen_range(1..=4)];
            let x = randn(&dims, rng);
            let err = check_unary(&x, epsilon, rng, |t| lrn.forward(t), |i, o| lrn.backward(i, o))?;
            (dims.to_vec(), err)
        }
        OpKind::Relu => {
            let dims = [rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=5)];
            let mut x = randn(&dims, rng);
            // keep clear of the kink
            for v in x.data_mut() {
                if v.abs() < 1e-2 {
                    *v += 0.05;
                }
            }
            let err = check_unary(&x, epsilon, rng, |t| Ok(ops::relu(t)), ops::relu_backward)?;
            (dims.to_vec(), err)
        }
        OpKind::Linear => check_linear(epsilon, rng)?,
        OpKind::Dropout => {
            let dims = [rng.gen_range(1..=4), rng.gen_range(2..=16)];
            let x = randn(&dims, rng);
            let seed = rng.gen::<u64>();
            // a fixed mask makes the op deterministic in x
            let fwd = |t: &Tensor<f64>| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                ops::dropout(t, 0.5, true, &mut r)
            };
            let mask = fwd(&x)?.1;
            let err = check_unary(&x, epsilon, rng, |t| Ok(fwd(t)?.0), |i, o| {
                ops::dropout_backward(i, o, &mask)
            })?;
            (dims.to_vec(), err)
        }
        OpKind::SoftmaxCrossEntropy => {
            let b = rng.gen_range(1..=16);
            let dims = [b, 2];
            let mut logits = randn(&dims, rng);
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
            logits.require_grad();
            ops::softmax_cross_entropy_backward(&mut logits, &labels)?;
            let analytic = logits.grad().unwrap().to_vec();
            let mut xs = logits.data().to_vec();
            let err = finite_difference_check(&mut xs, &analytic, epsilon, None, |v| {
                let t = Tensor::new(&dims, v.to_vec()).unwrap();
                ops::softmax_cross_entropy(&t, &labels).unwrap()
            });
            (dims.to_vec(), err)
        }
    };
    Ok(GradReport {
        op: kind,
        shape,
        max_relative_error: err,
    })
}

/// Gradient check for a parameter-free op with respect to its input.
fn check_unary(
    x: &Tensor<f64>,
    epsilon: f64,
    rng: &mut impl Rng,
    forward: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    backward: impl Fn(&mut Tensor<f64>, &Tensor<f64>) -> Result<()>,
) -> Result<f64> {
    let mut out = forward(x)?;
    let r = randn(out.dims(), rng);
    out.require_grad();
    out.grad_mut().unwrap().copy_from_slice(r.data());
    let mut input = x.clone();
    input.require_grad();
    backward(&mut input, &out)?;
    let analytic = input.grad().unwrap().to_vec();
    let probes = probe_set(x.len(), rng);
    let mut xs = x.data().to_vec();
    Ok(finite_difference_check(&mut xs, &analytic, epsilon, Some(&probes), |v| {
        let t = Tensor::new(x.dims(), v.to_vec()).unwrap();
        dot(forward(&t).unwrap().data(), r.data())
    }))
}

fn check_conv(epsilon: f64, rng: &mut impl Rng) -> Result<(Vec<usize>, f64)> {
    let k = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=1);
    let c = rng.gen_range(1..=4);
    let f = rng.gen_range(1..=8);
    let dims = [rng.gen_range(1..=2), c, rng.gen_range(k..k + 7), rng.gen_range(k..k + 7)];
    let x = randn(&dims, rng);
    let group = random_group("conv", &[f, c, k, k], rng);
    check_with_params(&x, group, epsilon, rng, |t, g| ops::conv2d(t, g, stride, pad), |i, g, o| {
        ops::conv2d_backward(i, g, o, stride, pad)
    })
    .map(|e| (dims.to_vec(), e))
}

fn check_linear(epsilon: f64, rng: &mut impl Rng) -> Result<(Vec<usize>, f64)> {
    let dims = [rng.gen_range(1..=6), rng.gen_range(1..=16)];
    let out = rng.gen_range(1..=8);
    let x = randn(&dims, rng);
    let group = random_group("linear", &[out, dims[1]], rng);
    check_with_params(&x, group, epsilon, rng, ops::linear, |i, g, o| {
        ops::linear_backward(i, g, o)
    })
    .map(|e| (dims.to_vec(), e))
}

/// Checks input, weight and bias gradients of a parameterized op.
fn check_with_params(
    x: &Tensor<f64>,
    group: ParamGroup<f64>,
    epsilon: f64,
    rng: &mut impl Rng,
    forward: impl Fn(&Tensor<f64>, &ParamGroup<f64>) -> Result<Tensor<f64>>,
    backward: impl Fn(&mut Tensor<f64>, &mut ParamGroup<f64>, &Tensor<f64>) -> Result<()>,
) -> Result<f64> {
    let mut out = forward(x, &group)?;
    let r = randn(out.dims(), rng);
    out.require_grad();
    out.grad_mut().unwrap().copy_from_slice(r.data());
    let mut input = x.clone();
    input.require_grad();
    let mut g = group.clone();
    backward(&mut input, &mut g, &out)?;

    let loss = |t: &Tensor<f64>, p: &ParamGroup<f64>| dot(forward(t, p).unwrap().data(), r.data());
    let mut worst: f64 = 0.0;

    let probes = probe_set(x.len(), rng);
    let mut xs = x.data().to_vec();
    worst = worst.max(finite_difference_check(&mut xs, input.grad().unwrap(), epsilon, Some(&probes), |v| {
        loss(&Tensor::new(x.dims(), v.to_vec()).unwrap(), &group)
    }));

    let probes = probe_set(group.weights.len(), rng);
    let mut ws = group.weights.data().to_vec();
    worst = worst.max(finite_difference_check(&mut ws, g.weights.grad().unwrap(), epsilon, Some(&probes), |v| {
        let mut p = group.clone();
        p.weights.data_mut().copy_from_slice(v);
        loss(x, &p)
    }));

    let mut bs = group.bias.data().to_vec();
    worst = worst.max(finite_difference_check(&mut bs, g.bias.grad().unwrap(), epsilon, None, |v| {
        let mut p = group.clone();
        p.bias.data_mut().copy_from_slice(v);
        loss(x, &p)
    }));
    Ok(worst)
}

/// Runs `shapes_per_op` randomized checks for each requested op.
pub fn run_suite(kinds: &[OpKind], shapes_per_op: usize, seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(kinds.len() * shapes_per_op);
    for &kind in kinds {
        for _ in 0..shapes_per_op {
            reports.push(check_op(kind, DEFAULT_EPSILON, &mut rng)?);
        }
    }
    Ok(reports)
}
