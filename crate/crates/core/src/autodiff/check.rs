//! Randomized finite-difference checks for every primitive op.

use std::sync::Arc;

use rand::{Rng, RngCore};

use crate::error::Result;

use super::ops::SparseRows;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Central-difference step for op checks.
pub const OP_CHECK_STEP: f64 = 1e-5;
/// Acceptance threshold on the per-trial relative error.
pub const OP_CHECK_TOL: f64 = 1e-6;

type Inputs = fn(&mut dyn RngCore) -> Vec<Tensor>;
type Apply = for<'t> fn(&[Var<'t>]) -> Result<Var<'t>>;

/// A registered op: how to draw inputs and how to apply it.
pub struct OpCase {
    pub name: &'static str,
    inputs: Inputs,
    apply: Apply,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.trials > 0 && self.max_rel_err < OP_CHECK_TOL
    }
}

fn uniform(rng: &mut dyn RngCore, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink or pole there.
fn away_from_zero(rng: &mut dyn RngCore, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn dims(rng: &mut dyn RngCore, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn pair(rng: &mut dyn RngCore) -> Vec<Tensor> {
    let s = [dims(rng, 1, 4), dims(rng, 1, 5)];
    vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)]
}

fn row_broadcast(rng: &mut dyn RngCore) -> Vec<Tensor> {
    let (r, c) = (dims(rng, 2, 4), dims(rng, 1, 5));
    vec![uniform(rng, &[r, c], -1.0, 1.0), uniform(rng, &[c], -1.0, 1.0)]
}

fn col_broadcast(rng: &mut dyn RngCore) -> Vec<Tensor> {
    let (r, c) = (dims(rng, 2, 4), dims(rng, 2, 5));
    vec![uniform(rng, &[r, c], -1.0, 1.0), uniform(rng, &[r, 1], 0.5, 1.5)]
}

fn single(rng: &mut dyn RngCore) -> Vec<Tensor> {
    let s = [dims(rng, 1, 4), dims(rng, 1, 5)];
    vec![uniform(rng, &s, -1.0, 1.0)]
}

fn single_positive(rng: &mut dyn RngCore) -> Vec<Tensor> {
    let s = [dims(rng, 1, 4), dims(rng, 1, 5)];
    vec![uniform(rng, &s, 0.2, 2.0)]
}

fn single_nonzero(rng: &mut dyn RngCore) -> Vec<Tensor> {
    let s = [dims(rng, 1, 4), dims(rng, 1, 5)];
    vec![away_from_zero(rng, &s)]
}

fn wide_rows(rng: &mut dyn RngCore) -> Vec<Tensor> {
    let s = [dims(rng, 1, 4), dims(rng, 2, 6)];
    vec![uniform(rng, &s, -2.0, 2.0)]
}

/// Rows of at least three entries. A two-entry row normalizes to ±1 up to
/// `eps`, leaving a gradient of order `eps` that central differences at
/// `OP_CHECK_STEP` cannot resolve against roundoff.
fn norm_rows(rng: &mut dyn RngCore) -> Vec<Tensor> {
    let s = [dims(rng, 1, 4), dims(rng, 3, 6)];
    vec![uniform(rng, &s, -2.0, 2.0)]
}

fn matmul_inputs(rng: &mut dyn RngCore) -> Vec<Tensor> {
    let (m, k, n) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
    vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)]
}

fn bmm_inputs(rng: &mut dyn RngCore) -> Vec<Tensor> {
    let (b, m, k, n) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3));
    vec![uniform(rng, &[b, m, k], -1.0, 1.0), uniform(rng, &[b, k, n], -1.0, 1.0)]
}

fn rank3(rng: &mut dyn RngCore) -> Vec<Tensor> {
    let s = [dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3)];
    vec![uniform(rng, &s, -1.0, 1.0)]
}

fn concat_inputs(rng: &mut dyn RngCore) -> Vec<Tensor> {
    let r = dims(rng, 1, 4);
    (0..3).map(|_| {
        let c = dims(rng, 1, 3);
        uniform(rng, &[r, c], -1.0, 1.0)
    })
    .collect()
}

fn conv_inputs(rng: &mut dyn RngCore) -> Vec<Tensor> {
    let (h, w, cin, cout) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 2), dims(rng, 1, 2));
    vec![
        uniform(rng, &[h, w, cin], -1.0, 1.0),
        uniform(rng, &[3, 3, cin, cout], -1.0, 1.0),
        uniform(rng, &[cout], -1.0, 1.0),
    ]
}

fn pool_inputs(rng: &mut dyn RngCore) -> Vec<Tensor> {
    let (h, w, c) = (2 * dims(rng, 1, 2), 2 * dims(rng, 1, 2), dims(rng, 1, 2));
    vec![uniform(rng, &[h, w, c], -1.0, 1.0)]
}

fn sparse_apply<'t>(x: &[Var<'t>]) -> Result<Var<'t>> {
    let n = x[0].shape()[0];
    // Fixed pseudo-random stencil derived from the row count.
    let rows = (0..n + 1)
        .map(|r| vec![(r % n, 0.75), ((r * 7 + 3) % n, -1.25), ((r + 1) % n, 0.9)])
        .collect();
    x[0].sparse_rows(Arc::new(SparseRows::new(n, rows)?))
}

/// Every primitive op with its input generator.
pub fn registered_ops() -> Vec<OpCase> {
    fn case(name: &'static str, inputs: Inputs, apply: Apply) -> OpCase {
        OpCase { name, inputs, apply }
    }
    vec![
        case("add", pair, |x| x[0].add(x[1])),
        case("add_broadcast", row_broadcast, |x| x[0].add(x[1])),
        case("sub", pair, |x| x[0].sub(x[1])),
        case("mul", pair, |x| x[0].mul(x[1])),
        case("mul_broadcast", col_broadcast, |x| x[0].mul(x[1])),
        case("div", col_broadcast, |x| x[0].div(x[1])),
        case("exp", single, |x| Ok(x[0].exp())),
        case("ln", single_positive, |x| Ok(x[0].ln())),
        case("sigmoid", wide_rows, |x| Ok(x[0].sigmoid())),
        case("relu", single_nonzero, |x| Ok(x[0].relu())),
        case("abs", single_nonzero, |x| Ok(x[0].abs())),
        case("square", single, |x| Ok(x[0].square())),
        case("scale", single, |x| Ok(x[0].scale(-1.7))),
        case("add_scalar", single, |x| Ok(x[0].add_scalar(0.3))),
        case("reshape", single, |x| {
            let n = x[0].value().len();
            x[0].reshape(&[n])
        }),
        case("matmul", matmul_inputs, |x| x[0].matmul(x[1])),
        case("bmm", bmm_inputs, |x| x[0].bmm(x[1])),
        case("transpose", rank3, |x| x[0].transpose()),
        case("concat", concat_inputs, |x| Var::concat(x)),
        case("slice", wide_rows, |x| {
            let w = x[0].shape()[1];
            x[0].slice_last(1, w)
        }),
        case("take", single, |x| {
            let n = x[0].value().len();
            x[0].take(&[n - 1, 0, n / 2, 0])
        }),
        case("sparse_rows", single, sparse_apply),
        case("softmax", wide_rows, |x| x[0].softmax()),
        case("layer_norm", norm_rows, |x| x[0].layer_norm(1e-5)),
        case("sum", single, |x| Ok(x[0].sum())),
        case("mean", single, |x| Ok(x[0].mean())),
        case("mse", pair, |x| x[0].mse(x[1])),
        case("conv2d", conv_inputs, |x| x[0].conv2d(x[1], x[2])),
        case("avg_pool2", pool_inputs, |x| x[0].avg_pool2()),
    ]
}

fn weighted_loss(case: &OpCase, inputs: &[Tensor], weights: Option<&Tensor>) -> Result<(f64, Vec<Tensor>, Tensor)> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.apply)(&vars)?;
    let w = match weights {
        Some(w) => w.clone(),
        None => Tensor::from_fn(&out.shape(), |i| 0.3 + ((i * 37 % 11) as f64) * 0.17 - 0.9),
    };
    let loss = out.mul(tape.constant(w.clone()))?.sum();
    let value = loss.item().unwrap_or(f64::NAN);
    let grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();
    Ok((value, g, w))
}

/// Relative error of one randomized trial: the largest componentwise
/// difference divided by the largest analytic magnitude.
pub fn check_op_once(case: &OpCase, rng: &mut dyn RngCore) -> Result<f64> {
    let inputs = (case.inputs)(rng);
    let (_, analytic, w) = weighted_loss(case, &inputs, None)?;
    let mut worst_diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let mut work = inputs.clone();
    for (ti, t) in inputs.iter().enumerate() {
        for k in 0..t.len() {
            let x0 = t.data()[k];
            work[ti].data_mut()[k] = x0 + OP_CHECK_STEP;
            let (plus, _, _) = weighted_loss(case, &work, Some(&w))?;
            work[ti].data_mut()[k] = x0 - OP_CHECK_STEP;
            let (minus, _, _) = weighted_loss(case, &work, Some(&w))?;
            work[ti].data_mut()[k] = x0;
            let numeric = (plus - minus) / (2.0 * OP_CHECK_STEP);
            let a = analytic[ti].data()[k];
            worst_diff = worst_diff.max((a - numeric).abs());
            scale = scale.max(a.abs());
        }
    }
    Ok(worst_diff / scale.max(1e-12))
}

/// Runs `trials` randomized checks of every registered op.
pub fn op_gradient_suite<R: Rng>(rng: &mut R, trials: usize) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    for case in registered_ops() {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            worst = worst.max(check_op_once(&case, rng)?);
        }
        reports.push(OpReport {
            name: case.name,
            trials,
            max_rel_err: worst,
        });
    }
    Ok(reports)
}
