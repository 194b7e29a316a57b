//! Forward and backward numerics on raw tensors. Every reduction runs in
//! ascending index order; parallel loops only ever split independent output
//! rows, so results do not depend on the thread count.

use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Work (m·k·n multiply-adds) above which matmul rows are spread over threads.
const PAR_MATMUL_WORK: usize = 1 << 15;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;
pub(crate) const L2_NORM_EPS: f64 = 1e-12;

/// `c[m×n] = a[m×k] · b[k×n]`, accumulating each output over `p` ascending.
fn gemm<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    };
    if m * k * n >= PAR_MATMUL_WORK && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

fn transpose2<T: Element>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

enum MatMulLayout {
    /// `[.., k] × [k, n]`, leading dims of the left side flattened into m.
    Shared { m: usize, k: usize, n: usize },
    /// `[batch, m, k] × [batch, k, n]`.
    Batched { batch: usize, m: usize, k: usize, n: usize },
}

fn matmul_layout(a: &[usize], b: &[usize]) -> Result<(MatMulLayout, Vec<usize>)> {
    let err = || Error::shape("matmul", a, b);
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    match (a.len(), b.len()) {
        (_, 2) => {
            let k = a[a.len() - 1];
            if k != b[0] {
                return Err(err());
            }
            let m = a[..a.len() - 1].iter().product();
            let mut out = a[..a.len() - 1].to_vec();
            out.push(b[1]);
            Ok((MatMulLayout::Shared { m, k, n: b[1] }, out))
        }
        (3, 3) => {
            if a[0] != b[0] || a[2] != b[1] {
                return Err(err());
            }
            Ok((
                MatMulLayout::Batched {
                    batch: a[0],
                    m: a[1],
                    k: a[2],
                    n: b[2],
                },
                vec![a[0], a[1], b[2]],
            ))
        }
        _ => Err(err()),
    }
}

pub(crate) fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (layout, out_shape) = matmul_layout(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); out_shape.iter().product()];
    match layout {
        MatMulLayout::Shared { m, k, n } => gemm(a.data(), b.data(), &mut out, m, k, n),
        MatMulLayout::Batched { batch, m, k, n } => {
            let one = |(bi, c): (usize, &mut [T])| {
                let av = &a.data()[bi * m * k..(bi + 1) * m * k];
                let bv = &b.data()[bi * k * n..(bi + 1) * k * n];
                // Each batch is small; run its rows serially.
                c.chunks_mut(n).enumerate().for_each(|(i, crow)| {
                    let arow = &av[i * k..(i + 1) * k];
                    for (p, &x) in arow.iter().enumerate() {
                        let brow = &bv[p * n..(p + 1) * n];
                        for (cv, &y) in crow.iter_mut().zip(brow) {
                            *cv = *cv + x * y;
                        }
                    }
                });
            };
            if batch * m * k * n >= PAR_MATMUL_WORK && batch > 1 {
                out.par_chunks_mut(m * n).enumerate().for_each(one);
            } else {
                out.chunks_mut(m * n).enumerate().for_each(one);
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (layout, _) = matmul_layout(a.shape(), b.shape())?;
    match layout {
        MatMulLayout::Shared { m, k, n } => {
            let bt = transpose2(b.data(), k, n);
            let mut da = vec![T::zero(); m * k];
            gemm(dc.data(), &bt, &mut da, m, n, k);
            let at = transpose2(a.data(), m, k);
            let mut db = vec![T::zero(); k * n];
            gemm(&at, dc.data(), &mut db, k, m, n);
            Ok((
                Tensor::new(a.shape().to_vec(), da)?,
                Tensor::new(b.shape().to_vec(), db)?,
            ))
        }
        MatMulLayout::Batched { batch, m, k, n } => {
            let mut da = vec![T::zero(); batch * m * k];
            let mut db = vec![T::zero(); batch * k * n];
            for bi in 0..batch {
                let av = &a.data()[bi * m * k..(bi + 1) * m * k];
                let bv = &b.data()[bi * k * n..(bi + 1) * k * n];
                let dcv = &dc.data()[bi * m * n..(bi + 1) * m * n];
                let bt = transpose2(bv, k, n);
                gemm(dcv, &bt, &mut da[bi * m * k..(bi + 1) * m * k], m, n, k);
                let at = transpose2(av, m, k);
                gemm(&at, dcv, &mut db[bi * k * n..(bi + 1) * k * n], k, m, n);
            }
            Ok((
                Tensor::new(a.shape().to_vec(), da)?,
                Tensor::new(b.shape().to_vec(), db)?,
            ))
        }
    }
}

/// Right operand must match the trailing dims of the left (or equal it).
pub(crate) fn check_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

pub(crate) fn zip_broadcast<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let bn = b.numel();
    a.data()
        .chunks(bn)
        .flat_map(|chunk| chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
        .collect()
}

/// Sums a gradient of the left operand's shape down to the right operand's
/// trailing shape, folding leading rows in ascending order.
pub(crate) fn reduce_to_suffix<T: Element>(g: &[T], suffix_len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); suffix_len];
    for chunk in g.chunks(suffix_len) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    out
}

pub(crate) fn map<T: Element>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn last_dim<T: Element>(x: &Tensor<T>) -> usize {
    *x.shape().last().expect("non-empty shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Element>(v: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
}

pub(crate) fn gelu_grad<T: Element>(v: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (v + a * v * v * v)).tanh();
    half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v)
}

pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Normalises each last-axis row to zero mean and unit variance.
pub(crate) fn layer_norm<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let d = last_dim(x);
    let eps = T::from_f64(LAYER_NORM_EPS);
    let dn = T::from_f64(d as f64);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dn;
        let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / dn;
        let inv = T::one() / (var + eps).sqrt();
        out.extend(row.iter().map(|&v| (v - mean) * inv));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn layer_norm_backward<T: Element>(x: &Tensor<T>, y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let d = last_dim(x);
    let eps = T::from_f64(LAYER_NORM_EPS);
    let dn = T::from_f64(d as f64);
    let mut out = Vec::with_capacity(x.numel());
    for ((xr, yr), gr) in x.data().chunks(d).zip(y.data().chunks(d)).zip(dy.data().chunks(d)) {
        let mean = xr.iter().fold(T::zero(), |s, &v| s + v) / dn;
        let var = xr.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / dn;
        let inv = T::one() / (var + eps).sqrt();
        let mean_g = gr.iter().fold(T::zero(), |s, &v| s + v) / dn;
        let mean_gy = gr.iter().zip(yr).fold(T::zero(), |s, (&g, &y)| s + g * y) / dn;
        out.extend(gr.iter().zip(yr).map(|(&g, &y)| inv * (g - mean_g - y * mean_gy)));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn softmax<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let d = last_dim(x);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum = sum + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn softmax_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let d = last_dim(y);
    let mut out = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks(d).zip(dy.data().chunks(d)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
        out.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::new(y.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn log_softmax<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let d = last_dim(x);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
        let lse = max + sum.ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn log_softmax_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let d = last_dim(y);
    let mut out = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks(d).zip(dy.data().chunks(d)) {
        let gsum = gr.iter().fold(T::zero(), |s, &v| s + v);
        out.extend(yr.iter().zip(gr).map(|(&l, &g)| g - l.exp() * gsum));
    }
    Tensor::new(y.shape().to_vec(), out).expect("same shape")
}

fn row_norm<T: Element>(row: &[T]) -> T {
    row.iter().fold(T::zero(), |s, &v| s + v * v).sqrt()
}

pub(crate) fn l2_normalize<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let d = last_dim(x);
    let eps = T::from_f64(L2_NORM_EPS);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let n = row_norm(row).max(eps);
        out.extend(row.iter().map(|&v| v / n));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn l2_normalize_backward<T: Element>(x: &Tensor<T>, y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let d = last_dim(x);
    let eps = T::from_f64(L2_NORM_EPS);
    let mut out = Vec::with_capacity(x.numel());
    for ((xr, yr), gr) in x.data().chunks(d).zip(y.data().chunks(d)).zip(dy.data().chunks(d)) {
        let n = row_norm(xr);
        if n > eps {
            let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
            out.extend(yr.iter().zip(gr).map(|(&y, &g)| (g - y * dot) / n));
        } else {
            out.extend(gr.iter().map(|&g| g / eps));
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn check_perm(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return Err(Error::shape("permute", shape, perm));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(Error::shape("permute", shape, perm));
        }
        seen[p] = true;
    }
    Ok(perm.iter().map(|&p| shape[p]).collect())
}

pub(crate) fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let out_shape = check_perm(x.shape(), perm)?;
    let in_strides = strides(x.shape());
    // Stride in the input for each output axis.
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let inner = out_shape[rank - 1];
    let inner_stride = walk[rank - 1];
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    let src = x.data();
    loop {
        let base: usize = idx.iter().zip(&walk).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(src[base + j * inner_stride]);
        }
        // Odometer over every axis but the innermost.
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return Tensor::new(out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

pub(crate) fn slice<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() || len == 0 || start + len > shape[axis] {
        return Err(Error::InvalidShape(format!(
            "slice axis {axis} [{start}, {}) out of range for {shape:?}",
            start + len
        )));
    }
    let (outer, inner) = outer_inner(shape, axis);
    let n = shape[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + (start + len) * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::new(out_shape, out)
}

pub(crate) fn slice_backward<T: Element>(
    in_shape: &[usize],
    axis: usize,
    start: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (outer, inner) = outer_inner(in_shape, axis);
    let n = in_shape[axis];
    let len = dy.shape()[axis];
    let mut out = vec![T::zero(); in_shape.iter().product()];
    for o in 0..outer {
        let dst = o * n * inner + start * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&dy.data()[src..src + len * inner]);
    }
    Tensor::new(in_shape.to_vec(), out).expect("input shape")
}

pub(crate) fn concat_shape(shapes: &[&[usize]], axis: usize) -> Result<Vec<usize>> {
    let first = shapes
        .first()
        .ok_or_else(|| Error::InvalidShape("concat of zero tensors".into()))?;
    if axis >= first.len() {
        return Err(Error::InvalidShape(format!("concat axis {axis} for {first:?}")));
    }
    let mut out = first.to_vec();
    out[axis] = 0;
    for s in shapes {
        if s.len() != first.len()
            || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
        {
            return Err(Error::shape("concat", first, s));
        }
        out[axis] += s[axis];
    }
    Ok(out)
}

pub(crate) fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let shapes: Vec<&[usize]> = parts.iter().map(|t| t.shape()).collect();
    let out_shape = concat_shape(&shapes, axis)?;
    let (outer, inner) = outer_inner(&out_shape, axis);
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let w = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn concat_backward<T: Element>(
    part_shapes: &[Vec<usize>],
    axis: usize,
    dy: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let mut offset = 0;
    part_shapes
        .iter()
        .map(|s| {
            let len = s[axis];
            let t = slice(dy, axis, offset, len).expect("in range");
            offset += len;
            t
        })
        .collect()
}

pub(crate) fn index_select<T: Element>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let rows = x.shape()[0];
    if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
        return Err(Error::InvalidShape(format!(
            "index_select indices {idx:?} invalid for {} rows",
            rows
        )));
    }
    let w = x.numel() / rows;
    let mut out = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        out.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, out)
}

pub(crate) fn index_select_backward<T: Element>(in_shape: &[usize], idx: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let w: usize = in_shape[1..].iter().product();
    let mut out = vec![T::zero(); in_shape.iter().product()];
    for (k, &i) in idx.iter().enumerate() {
        for j in 0..w {
            out[i * w + j] = out[i * w + j] + dy.data()[k * w + j];
        }
    }
    Tensor::new(in_shape.to_vec(), out).expect("input shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(c.data(), naive_matmul(a.data(), b.data(), 2, 2, 2).as_slice());
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = t(&[2, 2], &[1.5, -2.0, 0.25, 4.0]);
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &i).unwrap(), a);
        let z = Tensor::<f64>::zeros(&[3, 4]);
        let b = Tensor::from_fn(&[4, 2], |i| i as f64 + 0.5);
        assert_eq!(matmul(&z, &b).unwrap(), Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parallel_rows_are_bitwise_serial() {
        let mut r = crate::tensor::Rng::new(5);
        let a = Tensor::<f32>::from_fn(&[300, 40], |_| r.normal() as f32);
        let b = Tensor::<f32>::from_fn(&[40, 50], |_| r.normal() as f32);
        let c = matmul(&a, &b).unwrap();
        let an: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
        // f32 reference with the same ascending-p accumulation.
        for i in [0usize, 17, 299] {
            for j in 0..50 {
                let mut s = 0f32;
                for p in 0..40 {
                    s += a.data()[i * 40 + p] * b.data()[p * 50 + j];
                }
                assert_eq!(s.to_bits(), c.data()[i * 50 + j].to_bits());
            }
        }
        assert_eq!(an.len(), 12000);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[3], &[0.0, 0.0, 0.0]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&t(&[3], &[1.0, 2.0, 3.0]));
        // exp(i - 3) / Σ exp(j - 3), evaluated by hand.
        let z: f64 = (-2f64).exp() + (-1f64).exp() + 1.0;
        let expect = [(-2f64).exp() / z, (-1f64).exp() / z, 1.0 / z];
        for (a, b) in s.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((s.data()[0] - 0.09003).abs() < 1e-5);
        assert!((s.data()[1] - 0.24473).abs() < 1e-5);
        assert!((s.data()[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let y = layer_norm(&t(&[1, 4], &[3.0, 3.0, 3.0, 3.0]));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k, i, j] == x[i, j, k]
        assert_eq!(p.data()[6 + 3 + 2], x.data()[12 + 2 * 4 + 1]);
        let back = permute(&p, &inverse_perm(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn slice_and_concat_invert() {
        let x = Tensor::<f64>::from_fn(&[2, 5, 3], |i| i as f64);
        let a = slice(&x, 1, 0, 2).unwrap();
        let b = slice(&x, 1, 2, 3).unwrap();
        assert_eq!(concat(&[&a, &b], 1).unwrap(), x);
    }
}
