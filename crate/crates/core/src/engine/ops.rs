//! Primitive kernels shared by the forward and reverse passes.

use rayon::prelude::*;

use super::graph::{ReduceKind, RowRef};
use super::tensor::{Real, Tensor};

/// Work size (multiply-adds) above which row loops fan out over rayon.
const PAR_THRESHOLD: usize = 1 << 15;

/// `x · w`. Each output row is accumulated in a fixed order, so results do not
/// depend on the thread count.
pub fn matmul<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (n, k, m) = (x.rows(), x.cols(), w.cols());
    debug_assert_eq!(k, w.rows());
    let mut out = Tensor::zeros(n, m);
    if m == 0 {
        return out;
    }
    let wd = w.data();
    let row = |(r, o): (usize, &mut [T])| {
        for (j, &xv) in x.row(r).iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let wr = &wd[j * m..(j + 1) * m];
            for (ov, &wv) in o.iter_mut().zip(wr) {
                *ov = *ov + xv * wv;
            }
        }
    };
    if n * k * m >= PAR_THRESHOLD {
        out.data_mut().par_chunks_mut(m).enumerate().for_each(row);
    } else {
        out.data_mut().chunks_mut(m).enumerate().for_each(row);
    }
    out
}

/// `a · bᵀ`.
pub fn matmul_bt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    debug_assert_eq!(k, b.cols());
    let mut out = Tensor::zeros(n, m);
    if m == 0 {
        return out;
    }
    let row = |(r, o): (usize, &mut [T])| {
        let ar = a.row(r);
        for (j, ov) in o.iter_mut().enumerate() {
            *ov = ar.iter().zip(b.row(j)).fold(T::zero(), |s, (&p, &q)| s + p * q);
        }
    };
    if n * k * m >= PAR_THRESHOLD {
        out.data_mut().par_chunks_mut(m).enumerate().for_each(row);
    } else {
        out.data_mut().chunks_mut(m).enumerate().for_each(row);
    }
    out
}

/// `aᵀ · b`, summing over rows in ascending order.
pub fn matmul_at<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(n, b.rows());
    let mut out = Tensor::zeros(k, m);
    if m == 0 {
        return out;
    }
    let row = |(i, o): (usize, &mut [T])| {
        for r in 0..n {
            let av = a.get(r, i);
            if av == T::zero() {
                continue;
            }
            for (ov, &bv) in o.iter_mut().zip(b.row(r)) {
                *ov = *ov + av * bv;
            }
        }
    };
    if n * k * m >= PAR_THRESHOLD {
        out.data_mut().par_chunks_mut(m).enumerate().for_each(row);
    } else {
        out.data_mut().chunks_mut(m).enumerate().for_each(row);
    }
    out
}

pub fn add_bias<T: Real>(x: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let bias = b.row(0);
    for r in 0..out.rows() {
        for (v, &bv) in out.row_mut(r).iter_mut().zip(bias) {
            *v = *v + bv;
        }
    }
    out
}

/// Column sums in ascending row order.
pub fn column_sum<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, x.cols());
    for r in 0..x.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(x.row(r)) {
            *o = *o + v;
        }
    }
    out
}

pub fn concat_rows<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let cols = parts.first().map_or(0, |t| t.cols());
    let rows = parts.iter().map(|t| t.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(rows, cols, data)
}

pub fn concat_cols<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let rows = parts.first().map_or(0, |t| t.rows());
    let cols = parts.iter().map(|t| t.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::from_vec(rows, cols, data)
}

/// Splits `x` into consecutive row blocks of the given sizes.
pub fn split_rows<T: Real>(x: &Tensor<T>, sizes: &[usize]) -> Vec<Tensor<T>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let t = Tensor::from_vec(n, x.cols(), x.data()[start * x.cols()..(start + n) * x.cols()].to_vec());
            start += n;
            t
        })
        .collect()
}

/// Splits `x` into consecutive column blocks of the given widths.
pub fn split_cols<T: Real>(x: &Tensor<T>, widths: &[usize]) -> Vec<Tensor<T>> {
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let mut data = Vec::with_capacity(x.rows() * w);
            for r in 0..x.rows() {
                data.extend_from_slice(&x.row(r)[start..start + w]);
            }
            start += w;
            Tensor::from_vec(x.rows(), w, data)
        })
        .collect()
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, alpha: f64) -> Tensor<T> {
    let a = T::of(alpha);
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { a * v }).collect();
    Tensor::from_vec(x.rows(), x.cols(), data)
}

pub fn leaky_relu_grad<T: Real>(x: &Tensor<T>, dy: &Tensor<T>, alpha: f64) -> Tensor<T> {
    let a = T::of(alpha);
    let data = x.data().iter().zip(dy.data()).map(|(&v, &g)| if v > T::zero() { g } else { a * g }).collect();
    Tensor::from_vec(x.rows(), x.cols(), data)
}

/// Segment reduction. Empty segments yield zero rows; the second value counts
/// empty segments under `max`.
pub fn segment_reduce<T: Real>(kind: ReduceKind, x: &Tensor<T>, lengths: &[usize]) -> (Tensor<T>, usize) {
    let cols = x.cols();
    let mut out = Tensor::zeros(lengths.len(), cols);
    let mut empty_max = 0;
    let mut start = 0;
    for (s, &len) in lengths.iter().enumerate() {
        if len == 0 {
            if kind == ReduceKind::Max {
                empty_max += 1;
            }
            continue;
        }
        let o = out.row_mut(s);
        match kind {
            ReduceKind::Max => {
                o.copy_from_slice(x.row(start));
                for r in start + 1..start + len {
                    for (ov, &v) in o.iter_mut().zip(x.row(r)) {
                        if v > *ov {
                            *ov = v;
                        }
                    }
                }
            }
            ReduceKind::Sum | ReduceKind::Avg => {
                for r in start..start + len {
                    for (ov, &v) in o.iter_mut().zip(x.row(r)) {
                        *ov = *ov + v;
                    }
                }
                if kind == ReduceKind::Avg {
                    let n = T::from_usize(len).unwrap();
                    o.iter_mut().for_each(|v| *v = *v / n);
                }
            }
        }
        start += len;
    }
    (out, empty_max)
}

/// Adjoint of [`segment_reduce`]. Max routes the gradient to the first row
/// attaining the maximum.
pub fn segment_reduce_grad<T: Real>(kind: ReduceKind, x: &Tensor<T>, lengths: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let cols = x.cols();
    let mut dx = Tensor::zeros(x.rows(), cols);
    let mut start = 0;
    for (s, &len) in lengths.iter().enumerate() {
        if len == 0 {
            continue;
        }
        let g = dy.row(s);
        match kind {
            ReduceKind::Max => {
                for c in 0..cols {
                    let mut best = start;
                    for r in start + 1..start + len {
                        if x.get(r, c) > x.get(best, c) {
                            best = r;
                        }
                    }
                    dx.set(best, c, g[c]);
                }
            }
            ReduceKind::Sum | ReduceKind::Avg => {
                let scale = if kind == ReduceKind::Avg { T::one() / T::from_usize(len).unwrap() } else { T::one() };
                for r in start..start + len {
                    for (d, &gv) in dx.row_mut(r).iter_mut().zip(g) {
                        *d = gv * scale;
                    }
                }
            }
        }
        start += len;
    }
    dx
}

/// Per-column batch statistics (mean, biased variance) over the rows of all parts.
pub fn batch_moments<T: Real>(parts: &[&Tensor<T>]) -> (Vec<T>, Vec<T>, usize) {
    let cols = parts.first().map_or(0, |t| t.cols());
    let n: usize = parts.iter().map(|t| t.rows()).sum();
    let mut mean = vec![T::zero(); cols];
    let mut var = vec![T::zero(); cols];
    if n == 0 {
        return (mean, var, 0);
    }
    let nt = T::from_usize(n).unwrap();
    for p in parts {
        for r in 0..p.rows() {
            for (m, &v) in mean.iter_mut().zip(p.row(r)) {
                *m = *m + v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / nt);
    for p in parts {
        for r in 0..p.rows() {
            for ((s, &v), &m) in var.iter_mut().zip(p.row(r)).zip(&mean) {
                let d = v - m;
                *s = *s + d * d;
            }
        }
    }
    var.iter_mut().for_each(|s| *s = *s / nt);
    (mean, var, n)
}

/// `γ · (x − μ) / √(σ² + ε) + β` with per-column statistics.
pub fn normalize<T: Real>(x: &Tensor<T>, mean: &[T], var: &[T], eps: f64, gamma: &Tensor<T>, beta: &Tensor<T>) -> Tensor<T> {
    let e = T::of(eps);
    let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + e).sqrt()).collect();
    let mut out = x.clone();
    let (g, b) = (gamma.row(0), beta.row(0));
    for r in 0..out.rows() {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = g[c] * (*v - mean[c]) * inv[c] + b[c];
        }
    }
    out
}

/// Adjoint of train-mode batch norm over jointly normalized parts. Returns
/// (dx per part, dγ, dβ).
pub fn batch_norm_train_grad<T: Real>(
    xs: &[&Tensor<T>],
    dys: &[Tensor<T>],
    mean: &[T],
    var: &[T],
    eps: f64,
    gamma: &Tensor<T>,
) -> (Vec<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let cols = mean.len();
    let n: usize = xs.iter().map(|t| t.rows()).sum();
    let e = T::of(eps);
    let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + e).sqrt()).collect();
    let mut dgamma = Tensor::zeros(1, cols);
    let mut dbeta = Tensor::zeros(1, cols);
    for (x, dy) in xs.iter().zip(dys) {
        for r in 0..x.rows() {
            for c in 0..cols {
                let xhat = (x.get(r, c) - mean[c]) * inv[c];
                let g = dy.get(r, c);
                dgamma.set(0, c, dgamma.get(0, c) + g * xhat);
                dbeta.set(0, c, dbeta.get(0, c) + g);
            }
        }
    }
    let nt = T::from_usize(n.max(1)).unwrap();
    let dxs = xs
        .iter()
        .zip(dys)
        .map(|(x, dy)| {
            let mut dx = Tensor::zeros(x.rows(), cols);
            for r in 0..x.rows() {
                for c in 0..cols {
                    let xhat = (x.get(r, c) - mean[c]) * inv[c];
                    let v = gamma.get(0, c) * inv[c] / nt
                        * (nt * dy.get(r, c) - dbeta.get(0, c) - xhat * dgamma.get(0, c));
                    dx.set(r, c, v);
                }
            }
            dx
        })
        .collect();
    (dxs, dgamma, dbeta)
}

pub fn gather<T: Real>(sources: &[&Tensor<T>], map: &[RowRef]) -> Tensor<T> {
    let cols = sources.first().map_or(0, |t| t.cols());
    let mut data = Vec::with_capacity(map.len() * cols);
    for r in map {
        data.extend_from_slice(sources[r.input].row(r.row));
    }
    Tensor::from_vec(map.len(), cols, data)
}

pub fn scatter<T: Real>(x: &Tensor<T>, map: &[usize], extent: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(extent, x.cols());
    for (i, &m) in map.iter().enumerate() {
        out.row_mut(m).copy_from_slice(x.row(i));
    }
    out
}

/// Per-column (masked mean squared error, labeled count).
pub fn masked_mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, mask: &Tensor<T>) -> Vec<(T, usize)> {
    (0..pred.cols())
        .map(|c| {
            let mut sum = T::zero();
            let mut n = 0;
            for r in 0..pred.rows() {
                if mask.get(r, c) != T::zero() {
                    let d = pred.get(r, c) - target.get(r, c);
                    sum = sum + d * d;
                    n += 1;
                }
            }
            let mse = if n == 0 { T::zero() } else { sum / T::from_usize(n).unwrap() };
            (mse, n)
        })
        .collect()
}

pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, mask: &Tensor<T>, weights: &[f64], root: bool) -> T {
    masked_mse(pred, target, mask)
        .into_iter()
        .zip(weights)
        .fold(T::zero(), |acc, ((m, _), &w)| acc + T::of(w) * if root { m.sqrt() } else { m })
}

/// d loss / d pred. Columns with zero error under `root` get zero gradient.
pub fn mse_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, mask: &Tensor<T>, weights: &[f64], root: bool) -> Tensor<T> {
    let stats = masked_mse(pred, target, mask);
    let mut d = Tensor::zeros(pred.rows(), pred.cols());
    let two = T::of(2.0);
    for (c, &(m, n)) in stats.iter().enumerate() {
        if n == 0 || (root && m == T::zero()) {
            continue;
        }
        let nt = T::from_usize(n).unwrap();
        let w = T::of(weights[c]);
        // d sqrt(m) = dm / (2 sqrt m)
        let scale = if root { w / (two * m.sqrt()) } else { w };
        for r in 0..pred.rows() {
            if mask.get(r, c) != T::zero() {
                d.set(r, c, scale * two * (pred.get(r, c) - target.get(r, c)) / nt);
            }
        }
    }
    d
}
