//! Differentiable primitives on [`Var`].
//!
//! Broadcasting is trailing-axis only: in a binary op the smaller operand's
//! shape must be a suffix of the larger one's, and it repeats with period equal
//! to its element count.

use std::sync::Arc;

use super::tape::Var;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let short_n: usize = short.iter().product();
    let is_suffix = long.ends_with(short) || (short_n == 1 && short.iter().all(|&d| d == 1));
    if !is_suffix {
        return Err(Error::shape(op, a, b));
    }
    Ok(long.to_vec())
}

/// Sums `g` (length n) down to a period-`p` accumulator.
fn reduce_period(g: &[f64], p: usize) -> Vec<f64> {
    if g.len() == p {
        return g.to_vec();
    }
    let mut out = vec![0.0; p];
    for chunk in g.chunks_exact(p) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn flat_to_shape(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::new(shape, data).expect("shape computed from operand")
}

impl<'t> Var<'t> {
    fn binary(&self, other: &Var<'t>, op: BinOp) -> Result<Var<'t>> {
        let shape = broadcast_shape(op.name(), self.shape(), other.shape())?;
        let (a, b) = (self.value_arc(), other.value_arc());
        let (na, nb) = (a.numel(), b.numel());
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let f = |x: f64, y: f64| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let out: Vec<f64> = if na == n && nb == n {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect()
        };
        let (ia, ib) = (self.id(), other.id());
        let a_shape = a.shape().to_vec();
        let b_shape = b.shape().to_vec();
        Ok(self.tape().custom_op(
            flat_to_shape(out, &shape),
            &[self, other],
            move |g, sink| {
                let g = g.data();
                let (ad, bd) = (a.data(), b.data());
                if sink.wants(ia) {
                    let full: Vec<f64> = match op {
                        BinOp::Add | BinOp::Sub => g.to_vec(),
                        BinOp::Mul => (0..n).map(|i| g[i] * bd[i % nb]).collect(),
                        BinOp::Div => (0..n).map(|i| g[i] / bd[i % nb]).collect(),
                    };
                    sink.accumulate(ia, flat_to_shape(reduce_period(&full, na), &a_shape));
                }
                if sink.wants(ib) {
                    let full: Vec<f64> = match op {
                        BinOp::Add => g.to_vec(),
                        BinOp::Sub => g.iter().map(|v| -v).collect(),
                        BinOp::Mul => (0..n).map(|i| g[i] * ad[i % na]).collect(),
                        BinOp::Div => (0..n)
                            .map(|i| {
                                let y = bd[i % nb];
                                -g[i] * ad[i % na] / (y * y)
                            })
                            .collect(),
                    };
                    sink.accumulate(ib, flat_to_shape(reduce_period(&full, nb), &b_shape));
                }
            },
        ))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinOp::Div)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value_arc();
        let y = Arc::new(x.map(f));
        let yv = Arc::clone(&y);
        let ix = self.id();
        self.tape()
            .custom_op((*y).clone(), &[self], move |g, sink| {
                let gx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(yv.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                sink.accumulate(ix, flat_to_shape(gx, x.shape()));
            })
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(move |x| s * x, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Var<'t> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// Product of two matrices.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (m, k) = self.value().dims2()?;
        let (k2, n) = other.value().dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let (a, b) = (self.value_arc(), other.value_arc());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
        let (ia, ib) = (self.id(), other.id());
        Ok(self.tape().custom_op(
            flat_to_shape(out, &[m, n]),
            &[self, other],
            move |g, sink| {
                if sink.wants(ia) {
                    // dA = G B^T
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, b.data(), true, &mut ga, 0.0);
                    sink.accumulate(ia, flat_to_shape(ga, &[m, k]));
                }
                if sink.wants(ib) {
                    // dB = A^T G
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), true, g.data(), false, &mut gb, 0.0);
                    sink.accumulate(ib, flat_to_shape(gb, &[k, n]));
                }
            },
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let (r, c) = self.value().dims2()?;
        let out = self.value().transpose2()?;
        let ix = self.id();
        Ok(self.tape().custom_op(out, &[self], move |g, sink| {
            let gt = g.transpose2().expect("rank-2 gradient");
            debug_assert_eq!(gt.shape(), &[r, c]);
            sink.accumulate(ix, gt);
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().clone().reshaped(shape)?;
        let orig = self.shape().to_vec();
        let ix = self.id();
        Ok(self.tape().custom_op(out, &[self], move |g, sink| {
            sink.accumulate(ix, g.clone().reshaped(&orig).expect("same numel"));
        }))
    }

    /// `out[i] = self.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&self, indices: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let n_out: usize = shape.iter().product();
        if n_out != indices.len() {
            return Err(Error::shape("gather", shape, &[indices.len()]));
        }
        let src = self.data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(format!(
                "gather: index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let out: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        let orig = self.shape().to_vec();
        let ix = self.id();
        Ok(self
            .tape()
            .custom_op(flat_to_shape(out, shape), &[self], move |g, sink| {
                let mut gx = vec![0.0; orig.iter().product()];
                for (&i, &v) in indices.iter().zip(g.data()) {
                    gx[i] += v;
                }
                sink.accumulate(ix, flat_to_shape(gx, &orig));
            }))
    }

    /// Reverses the order of rows of a matrix.
    pub fn reverse_rows(&self) -> Result<Var<'t>> {
        let (r, c) = self.value().dims2()?;
        let idx: Vec<usize> = (0..r)
            .rev()
            .flat_map(|i| (0..c).map(move |j| i * c + j))
            .collect();
        self.gather(Arc::new(idx), &[r, c])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            idx.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(Arc::new(idx), &out_shape)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                let d = p.data();
                out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<_> = parts.iter().map(|p| p.id()).collect();
        let tape = first.tape();
        Ok(tape.custom_op(flat_to_shape(out, &shape), parts, move |g, sink| {
            let gd = g.data();
            let mut offset = 0;
            for (&id, &e) in ids.iter().zip(&extents) {
                if sink.wants(id) {
                    let mut gp = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let row = o * total * inner + offset * inner;
                        gp.extend_from_slice(&gd[row..row + e * inner]);
                    }
                    let mut ps = shape.clone();
                    ps[axis] = e;
                    sink.accumulate(id, flat_to_shape(gp, &ps));
                }
                offset += e;
            }
        }))
    }

    /// Explicit trailing-axis broadcast up to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        if !shape.ends_with(self.shape()) {
            return Err(Error::shape("broadcast_to", self.shape(), shape));
        }
        let p = self.value().numel();
        let n: usize = shape.iter().product();
        let idx: Vec<usize> = (0..n).map(|i| i % p).collect();
        self.gather(Arc::new(idx), shape)
    }

    pub fn sum(&self) -> Var<'t> {
        let x = self.value();
        let s = x.sum();
        let shape = x.shape().to_vec();
        let ix = self.id();
        self.tape()
            .custom_op(Tensor::scalar(s), &[self], move |g, sink| {
                sink.accumulate(ix, Tensor::full(&shape, g.data()[0]));
            })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over leading axes, keeping the trailing `keep` shape.
    pub fn sum_to(&self, keep: &[usize]) -> Result<Var<'t>> {
        if !self.shape().ends_with(keep) {
            return Err(Error::shape("sum_to", self.shape(), keep));
        }
        let p: usize = keep.iter().product();
        let out = reduce_period(self.data(), p);
        let orig = self.shape().to_vec();
        let ix = self.id();
        Ok(self
            .tape()
            .custom_op(flat_to_shape(out, keep), &[self], move |g, sink| {
                let n: usize = orig.iter().product();
                let gd = g.data();
                let gx: Vec<f64> = (0..n).map(|i| gd[i % p]).collect();
                sink.accumulate(ix, flat_to_shape(gx, &orig));
            }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let shape = self.shape().to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::invalid("softmax of a rank-0 tensor"))?;
        let y = Arc::new(softmax_rows(self.value()));
        let yv = Arc::clone(&y);
        let ix = self.id();
        Ok(self.tape().custom_op((*y).clone(), &[self], move |g, sink| {
            let mut gx = vec![0.0; yv.numel()];
            for ((gr, yr), out) in g
                .data()
                .chunks_exact(c)
                .zip(yv.data().chunks_exact(c))
                .zip(gx.chunks_exact_mut(c))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            sink.accumulate(ix, flat_to_shape(gx, &shape));
        }))
    }

    /// Normalizes each row over the last axis to zero mean, unit variance.
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t>> {
        let shape = self.shape().to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::invalid("layer_norm of a rank-0 tensor"))?;
        let x = self.value();
        let rows = x.numel() / c;
        let mut y = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, (xr, yr)) in x
            .data()
            .chunks_exact(c)
            .zip(y.chunks_exact_mut(c))
            .enumerate()
        {
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in yr.iter_mut().zip(xr) {
                *o = (v - mean) * is;
            }
        }
        let y = Arc::new(flat_to_shape(y, &shape));
        let yv = Arc::clone(&y);
        let ix = self.id();
        Ok(self.tape().custom_op((*y).clone(), &[self], move |g, sink| {
            let mut gx = vec![0.0; yv.numel()];
            let cf = c as f64;
            for (r, ((gr, yr), out)) in g
                .data()
                .chunks_exact(c)
                .zip(yv.data().chunks_exact(c))
                .zip(gx.chunks_exact_mut(c))
                .enumerate()
            {
                let mg = gr.iter().sum::<f64>() / cf;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cf;
                for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                    *o = inv_std[r] * (gi - mg - yi * mgy);
                }
            }
            sink.accumulate(ix, flat_to_shape(gx, &shape));
        }))
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

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax over the last axis of a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = *x.shape().last().expect("non-empty shape");
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    flat_to_shape(out, x.shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = tape.constant(Tensor::eye(2));
        assert_eq!(m.matmul(&i).unwrap().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[0., 0.]));
        assert_eq!(x.softmax().unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_value_and_slope_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = x.sigmoid();
        assert_eq!(y.data(), &[0.5]);
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 2], 0.7));
        let g = tape.backward(&x.sum()).unwrap();
        assert_eq!(g.get(&x).unwrap(), &Tensor::ones(&[2, 3, 2]));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]));
        let loss = x.mul(&x).unwrap().sum();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn trailing_broadcast_and_its_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.leaf(t(&[3], &[10., 20., 30.]));
        let y = x.add(&b).unwrap();
        assert_eq!(y.data(), &[11., 22., 33., 14., 25., 36.]);
        let g = tape.backward(&y.sum()).unwrap();
        assert_eq!(g.get(&b).unwrap().data(), &[2., 2., 2.]);
    }

    #[test]
    fn leading_broadcast_is_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let err = x.add(&b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "add", .. }));
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn concat_and_slice_invert() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[5., 6.]));
        let c = Var::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1., 2., 5., 3., 4., 6.]);
        assert_eq!(c.slice(1, 2, 1).unwrap().data(), &[5., 6.]);
        assert_eq!(c.slice(1, 0, 2).unwrap().data(), a.data());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[2, 3], &[1000., 0., -3., 0.5, 0.25, 0.125]);
        let y = softmax_rows(&x);
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
