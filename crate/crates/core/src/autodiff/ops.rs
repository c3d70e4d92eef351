//! Differentiable primitive operations.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::tape::Var;
use super::tensor::{numel, Tensor};

/// `c = a·b + beta·c` for row-major `c` (m×n) and strided `a` (m×k), `b` (k×n).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out`, the flat index of the `input` element it reads.
fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        let oi = i + rank - input.len();
        strides[oi] = if input[i] == 1 { 0 } else { s };
        s *= input[i];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Constant sparse matrix applied to the leading axis of a tensor: output row
/// `r` is `Σ w · input[i]` over the `(i, w)` pairs of row `r`.
///
/// Covers row gathers, scatters into a larger grid, bilinear sampling and
/// finite-difference stencils with a single backward rule (`Sᵀ·g`).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    n_in: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(n_in: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for row in &rows {
            if let Some(&(i, _)) = row.iter().find(|(i, _)| *i >= n_in) {
                return Err(Error::domain(format!("sparse row index {i} out of range {n_in}")));
            }
        }
        Ok(Self { n_in, rows })
    }

    /// Selects `indices` (output row `r` = input row `indices[r]`).
    pub fn gather(n_in: usize, indices: &[usize]) -> Result<Self> {
        Self::new(n_in, indices.iter().map(|&i| vec![(i, 1.0)]).collect())
    }

    /// Places input row `r` at output row `positions[r]`; other rows are zero.
    pub fn scatter(n_out: usize, positions: &[usize]) -> Result<Self> {
        let mut rows = vec![Vec::new(); n_out];
        for (r, &p) in positions.iter().enumerate() {
            if p >= n_out {
                return Err(Error::domain(format!("scatter position {p} out of range {n_out}")));
            }
            rows[p].push((r, 1.0));
        }
        Self::new(positions.len(), rows)
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    fn apply(&self, x: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len() * width];
        for (r, row) in self.rows.iter().enumerate() {
            let dst = &mut out[r * width..(r + 1) * width];
            for &(i, w) in row {
                for (d, s) in dst.iter_mut().zip(&x[i * width..(i + 1) * width]) {
                    *d += w * s;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, g: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_in * width];
        for (r, row) in self.rows.iter().enumerate() {
            let src = &g[r * width..(r + 1) * width];
            for &(i, w) in row {
                for (d, s) in out[i * width..(i + 1) * width].iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

fn require_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::shape(op, shape, &vec![0; rank]));
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn binary(
        self,
        op: &'static str,
        other: Var<'t>,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64, f64) -> f64,
        db: fn(f64, f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(op, &sa, &sb))?;
        let value = if sa == sb {
            self.value().zip_map(&other.value(), f)
        } else {
            let (ma, mb) = (broadcast_map(&out_shape, &sa), broadcast_map(&out_shape, &sb));
            let (a, b) = (self.value(), other.value());
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
            Tensor::new(&out_shape, data)?
        };
        Ok(self.tape().record(
            op,
            &[self, other],
            value,
            Box::new(move |g, inputs, _| {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() == b.shape() {
                    let ga = Tensor::from_fn(a.shape(), |i| da(a.data()[i], b.data()[i], g.data()[i]));
                    let gb = Tensor::from_fn(b.shape(), |i| db(a.data()[i], b.data()[i], g.data()[i]));
                    return Ok(vec![ga, gb]);
                }
                let (ma, mb) = (broadcast_map(g.shape(), a.shape()), broadcast_map(g.shape(), b.shape()));
                let mut ga = Tensor::zeros(a.shape());
                let mut gb = Tensor::zeros(b.shape());
                for (k, (&i, &j)) in ma.iter().zip(&mb).enumerate() {
                    let (x, y, gk) = (a.data()[i], b.data()[j], g.data()[k]);
                    ga.data_mut()[i] += da(x, y, gk);
                    gb.data_mut()[j] += db(x, y, gk);
                }
                Ok(vec![ga, gb])
            }),
        ))
    }

    /// Elementwise sum with NumPy-style broadcasting.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("add", other, |a, b| a + b, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("sub", other, |a, b| a - b, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("mul", other, |a, b| a * b, |_, b, g| g * b, |a, _, g| g * a)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("div", other, |a, b| a / b, |_, b, g| g / b, |a, b, g| -g * a / (b * b))
    }

    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let value = self.value().map(f);
        self.tape().record(
            op,
            &[self],
            value,
            Box::new(move |g, inputs, y| {
                let x = inputs[0];
                Ok(vec![Tensor::from_fn(x.shape(), |i| df(x.data()[i], y.data()[i], g.data()[i]))])
            }),
        )
    }

    pub fn exp(self) -> Var<'t> {
        self.unary("exp", f64::exp, |_, y, g| g * y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary("ln", f64::ln, |x, _, g| g / x)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary("sigmoid", sigmoid, |_, y, g| g * y * (1.0 - y))
    }

    pub fn relu(self) -> Var<'t> {
        // NaN passes through so divergence stays visible downstream.
        self.unary(
            "relu",
            |x| if x > 0.0 || x.is_nan() { x } else { 0.0 },
            |x, _, g| if x > 0.0 { g } else if x.is_nan() { x } else { 0.0 },
        )
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(self) -> Var<'t> {
        self.unary("abs", f64::abs, |x, _, g| {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        })
    }

    pub fn square(self) -> Var<'t> {
        self.unary("square", |x| x * x, |x, _, g| 2.0 * x * g)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary("scale", move |x| c * x, move |_, _, g| c * g)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary("add_scalar", move |x| x + c, |_, _, g| g)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().clone().reshaped(shape)?;
        Ok(self.tape().record(
            "reshape",
            &[self],
            value,
            Box::new(|g, inputs, _| Ok(vec![g.clone().reshaped(inputs[0].shape())?])),
        ))
    }

    /// `[m,k]·[k,n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value().data(), (k, 1), other.value().data(), (n, 1), 0.0, &mut out);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.tape().record(
            "matmul",
            &[self, other],
            value,
            Box::new(move |g, inputs, _| {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), (n, 1), b, (1, n), 0.0, &mut ga);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a, (1, k), g.data(), (n, 1), 0.0, &mut gb);
                Ok(vec![Tensor::new(&[m, k], ga)?, Tensor::new(&[k, n], gb)?])
            }),
        ))
    }

    /// Batched `[B,m,k]·[B,k,n]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        {
            let (a, b) = (self.value(), other.value());
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..],
                    (k, 1),
                    &b.data()[i * k * n..],
                    (n, 1),
                    0.0,
                    &mut out[i * m * n..],
                );
            }
        }
        let value = Tensor::new(&[bs, m, n], out)?;
        Ok(self.tape().record(
            "bmm",
            &[self, other],
            value,
            Box::new(move |g, inputs, _| {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let mut ga = vec![0.0; bs * m * k];
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let gi = &g.data()[i * m * n..];
                    gemm(m, n, k, gi, (n, 1), &b[i * k * n..], (1, n), 0.0, &mut ga[i * m * k..]);
                    gemm(k, m, n, &a[i * m * k..], (1, k), gi, (n, 1), 0.0, &mut gb[i * k * n..]);
                }
                Ok(vec![Tensor::new(&[bs, m, k], ga)?, Tensor::new(&[bs, k, n], gb)?])
            }),
        ))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 value.
    pub fn transpose(self) -> Result<Var<'t>> {
        let s = self.shape();
        let (bs, r, c) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(Error::shape("transpose", &s, &[0, 0])),
        };
        let swap = move |x: &[f64]| {
            let mut out = vec![0.0; x.len()];
            for b in 0..bs {
                for i in 0..r {
                    for j in 0..c {
                        out[b * r * c + j * r + i] = x[b * r * c + i * c + j];
                    }
                }
            }
            out
        };
        let mut out_shape = s.clone();
        let rank = s.len();
        out_shape.swap(rank - 1, rank - 2);
        let value = Tensor::new(&out_shape, swap(self.value().data()))?;
        let unswap = move |x: &[f64]| {
            let mut out = vec![0.0; x.len()];
            for b in 0..bs {
                for i in 0..r {
                    for j in 0..c {
                        out[b * r * c + i * c + j] = x[b * r * c + j * r + i];
                    }
                }
            }
            out
        };
        Ok(self.tape().record(
            "transpose",
            &[self],
            value,
            Box::new(move |g, inputs, _| Ok(vec![Tensor::new(inputs[0].shape(), unswap(g.data()))?])),
        ))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::domain("concat of zero values"))?;
        let lead = {
            let s = first.shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", &first.shape(), &s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows = numel(&lead);
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = p.value();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.clone();
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        Ok(first.tape().record(
            "concat",
            parts,
            value,
            Box::new(move |g, inputs, _| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(inputs.len());
                for (inp, &w) in inputs.iter().zip(&widths) {
                    let mut d = vec![0.0; rows * w];
                    for r in 0..rows {
                        d[r * w..(r + 1) * w].copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    grads.push(Tensor::new(inp.shape(), d)?);
                    offset += w;
                }
                Ok(grads)
            }),
        ))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(self, start: usize, end: usize) -> Result<Var<'t>> {
        let s = self.shape();
        let width = *s.last().ok_or_else(|| Error::shape("slice", &s, &[end]))?;
        if start >= end || end > width {
            return Err(Error::shape("slice", &s, &[start, end]));
        }
        let rows = numel(&s) / width;
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        {
            let v = self.value();
            for r in 0..rows {
                out.extend_from_slice(&v.data()[r * width + start..r * width + end]);
            }
        }
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = w;
        let value = Tensor::new(&shape, out)?;
        Ok(self.tape().record(
            "slice",
            &[self],
            value,
            Box::new(move |g, inputs, _| {
                let mut d = Tensor::zeros(inputs[0].shape());
                for r in 0..rows {
                    d.data_mut()[r * width + start..r * width + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                Ok(vec![d])
            }),
        ))
    }

    /// Elements at flat `indices`, as a 1-D value.
    pub fn take(self, indices: &[usize]) -> Result<Var<'t>> {
        let n = self.value().len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::domain(format!("take index {bad} out of range {n}")));
        }
        let value = {
            let v = self.value();
            Tensor::new(&[indices.len()], indices.iter().map(|&i| v.data()[i]).collect())?
        };
        let indices = indices.to_vec();
        Ok(self.tape().record(
            "take",
            &[self],
            value,
            Box::new(move |g, inputs, _| {
                let mut d = Tensor::zeros(inputs[0].shape());
                for (k, &i) in indices.iter().enumerate() {
                    d.data_mut()[i] += g.data()[k];
                }
                Ok(vec![d])
            }),
        ))
    }

    /// Applies a constant [`SparseRows`] matrix to the leading axis.
    pub fn sparse_rows(self, matrix: Arc<SparseRows>) -> Result<Var<'t>> {
        let s = self.shape();
        if s.is_empty() || s[0] != matrix.n_in() {
            return Err(Error::shape("sparse_rows", &s, &[matrix.n_in()]));
        }
        let width = numel(&s[1..]);
        let out = matrix.apply(self.value().data(), width);
        let mut shape = s.clone();
        shape[0] = matrix.n_out();
        let value = Tensor::new(&shape, out)?;
        Ok(self.tape().record(
            "sparse_rows",
            &[self],
            value,
            Box::new(move |g, inputs, _| {
                Ok(vec![Tensor::new(inputs[0].shape(), matrix.apply_transpose(g.data(), width))?])
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let s = self.shape();
        let width = *s.last().ok_or_else(|| Error::shape("softmax", &s, &[1]))?;
        let mut value = self.value().clone();
        for row in value.data_mut().chunks_mut(width) {
            softmax_in_place(row);
        }
        Ok(self.tape().record(
            "softmax",
            &[self],
            value,
            Box::new(move |g, _, y| {
                let mut d = Tensor::zeros(y.shape());
                for ((dr, yr), gr) in d
                    .data_mut()
                    .chunks_mut(width)
                    .zip(y.data().chunks(width))
                    .zip(g.data().chunks(width))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                Ok(vec![d])
            }),
        ))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let s = self.shape();
        let width = *s.last().ok_or_else(|| Error::shape("layer_norm", &s, &[1]))?;
        let x = self.value().clone();
        let rows = x.len() / width;
        let mut y = x.clone();
        let mut inv_std = vec![0.0; rows];
        for (r, row) in y.data_mut().chunks_mut(width).enumerate() {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std[r] = is;
        }
        Ok(self.tape().record(
            "layer_norm",
            &[self],
            y,
            Box::new(move |g, _, y| {
                let mut d = Tensor::zeros(y.shape());
                let n = width as f64;
                for (r, ((dr, yr), gr)) in d
                    .data_mut()
                    .chunks_mut(width)
                    .zip(y.data().chunks(width))
                    .zip(g.data().chunks(width))
                    .enumerate()
                {
                    let gm = gr.iter().sum::<f64>() / n;
                    let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = inv_std[r] * (gv - gm - yv * gym);
                    }
                }
                Ok(vec![d])
            }),
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.tape().record(
            "sum",
            &[self],
            value,
            Box::new(|g, inputs, _| Ok(vec![Tensor::full(inputs[0].shape(), g.data()[0])])),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        let value = Tensor::scalar(self.value().sum() / n);
        self.tape().record(
            "mean",
            &[self],
            value,
            Box::new(move |g, inputs, _| Ok(vec![Tensor::full(inputs[0].shape(), g.data()[0] / n)])),
        )
    }

    /// Mean squared difference.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), target.shape());
        if sa != sb {
            return Err(Error::shape("mse", &sa, &sb));
        }
        let n = numel(&sa).max(1) as f64;
        let value = {
            let (a, b) = (self.value(), target.value());
            Tensor::scalar(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
        };
        Ok(self.tape().record(
            "mse",
            &[self, target],
            value,
            Box::new(move |g, inputs, _| {
                let c = 2.0 * g.data()[0] / n;
                let ga = inputs[0].zip_map(inputs[1], |x, y| c * (x - y));
                let gb = ga.map(|v| -v);
                Ok(vec![ga, gb])
            }),
        ))
    }

    /// 3×3, stride-1, zero-padded "same" convolution of an `[H,W,Cin]` map
    /// with weights `[3,3,Cin,Cout]` and bias `[Cout]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (sx, sw, sb) = (self.shape(), weight.shape(), bias.shape());
        require_rank("conv2d", &sx, 3)?;
        if sw.len() != 4 || sw[0] != 3 || sw[1] != 3 || sw[2] != sx[2] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if sb != [sw[3]] {
            return Err(Error::shape("conv2d bias", &sw, &sb));
        }
        let (h, w, cin, cout) = (sx[0], sx[1], sx[2], sw[3]);
        let cols = im2col(self.value().data(), h, w, cin);
        let kk = 9 * cin;
        let mut out = vec![0.0; h * w * cout];
        {
            let b = bias.value();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(b.data());
            }
        }
        gemm(h * w, kk, cout, &cols, (kk, 1), weight.value().data(), (cout, 1), 1.0, &mut out);
        let value = Tensor::new(&[h, w, cout], out)?;
        Ok(self.tape().record(
            "conv2d",
            &[self, weight, bias],
            value,
            Box::new(move |g, inputs, _| {
                let cols = im2col(inputs[0].data(), h, w, cin);
                let mut gw = vec![0.0; kk * cout];
                gemm(kk, h * w, cout, &cols, (1, kk), g.data(), (cout, 1), 0.0, &mut gw);
                let mut gcols = vec![0.0; h * w * kk];
                gemm(h * w, cout, kk, g.data(), (cout, 1), inputs[1].data(), (1, cout), 0.0, &mut gcols);
                let mut gb = vec![0.0; cout];
                for row in g.data().chunks(cout) {
                    for (a, b) in gb.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                Ok(vec![
                    Tensor::new(&[h, w, cin], col2im(&gcols, h, w, cin))?,
                    Tensor::new(&[3, 3, cin, cout], gw)?,
                    Tensor::new(&[cout], gb)?,
                ])
            }),
        ))
    }

    /// 2×2 average pooling of an `[H,W,C]` map with even `H`, `W`.
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let s = self.shape();
        require_rank("avg_pool2", &s, 3)?;
        if s[0] % 2 != 0 || s[1] % 2 != 0 {
            return Err(Error::shape("avg_pool2", &s, &[s[0] / 2 * 2, s[1] / 2 * 2, s[2]]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; ho * wo * c];
        {
            let x = self.value();
            for y in 0..ho {
                for xo in 0..wo {
                    let dst = &mut out[(y * wo + xo) * c..(y * wo + xo + 1) * c];
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let src = ((2 * y + dy) * w + 2 * xo + dx) * c;
                        for (d, v) in dst.iter_mut().zip(&x.data()[src..src + c]) {
                            *d += 0.25 * v;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[ho, wo, c], out)?;
        Ok(self.tape().record(
            "avg_pool2",
            &[self],
            value,
            Box::new(move |g, inputs, _| {
                let mut d = Tensor::zeros(inputs[0].shape());
                for y in 0..ho {
                    for xo in 0..wo {
                        let src = &g.data()[(y * wo + xo) * c..(y * wo + xo + 1) * c];
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let dst = ((2 * y + dy) * w + 2 * xo + dx) * c;
                            for (dv, gv) in d.data_mut()[dst..dst + c].iter_mut().zip(src) {
                                *dv += 0.25 * gv;
                            }
                        }
                    }
                }
                Ok(vec![d])
            }),
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `[H·W, 9·C]` patches, tap-major (`ky`, `kx`, channel) to match the weight
/// layout `[3,3,Cin,Cout]`.
fn im2col(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let kk = 9 * c;
    let mut cols = vec![0.0; h * w * kk];
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * kk;
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let dst = base + (ky * 3 + kx) * c;
                    cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let kk = 9 * c;
    let mut x = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * kk;
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = base + (ky * 3 + kx) * c;
                    for (d, v) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                        *d += v;
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[4, 3], &[4]), None);
        assert_eq!(broadcast_map(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_map(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn gemm_transposed_strides() {
        // [1 2; 3 4]ᵀ · [1 0; 0 1]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, (1, 2), &b, (2, 1), 0.0, &mut c);
        assert_eq!(c, [1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn sparse_scatter_gather_adjoint() {
        let s = SparseRows::scatter(4, &[2, 0]).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(s.apply(&x, 2), vec![3.0, 4.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0]);
        assert_eq!(s.apply_transpose(&s.apply(&x, 2), 2), x.to_vec());
        assert!(SparseRows::gather(3, &[3]).is_err());
    }
}
