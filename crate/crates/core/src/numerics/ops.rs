//! Differentiable primitives. Every op validates shapes eagerly and records a
//! backward closure only when some input requires a gradient.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Probability floor applied before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Contract(format!(
            "{op} expects a rank-2 tensor, got shape {:?}",
            t.shape()
        ))),
    }
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("tensors have rank >= 1")
}

// ---------------------------------------------------------------------------
// gemm

#[derive(Clone, Copy)]
enum Layout {
    /// Stored as given, row-major.
    N,
    /// Use the transpose of the stored row-major matrix.
    T,
}

/// `c = a·b + beta·c` where `a` is logically `m×k` and `b` is logically `k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = match la {
        Layout::N => (k as isize, 1),
        Layout::T => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::N => (n as isize, 1),
        Layout::T => (1, k as isize),
    };
    // SAFETY: slice lengths are checked above against the logical dimensions
    // and the strides address exactly those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of `m×k` and `k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = rank2("matmul", a)?;
    let (k2, n) = rank2("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.values(), Layout::N, b.values(), Layout::N, 0.0, &mut out);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(vec![m, n], out, vec![a.clone(), b.clone()], move |g| {
        let ga = ac.requires_grad().then(|| {
            let mut d = vec![0.0; m * k];
            gemm(m, n, k, g, Layout::N, bc.values(), Layout::T, 0.0, &mut d);
            d
        });
        let gb = bc.requires_grad().then(|| {
            let mut d = vec![0.0; k * n];
            gemm(k, m, n, ac.values(), Layout::T, g, Layout::N, 0.0, &mut d);
            d
        });
        vec![ga, gb]
    }))
}

/// `a·bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = rank2("matmul_nt", a)?;
    let (n, k2) = rank2("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.values(), Layout::N, b.values(), Layout::T, 0.0, &mut out);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(vec![m, n], out, vec![a.clone(), b.clone()], move |g| {
        let ga = ac.requires_grad().then(|| {
            let mut d = vec![0.0; m * k];
            gemm(m, n, k, g, Layout::N, bc.values(), Layout::N, 0.0, &mut d);
            d
        });
        let gb = bc.requires_grad().then(|| {
            let mut d = vec![0.0; n * k];
            gemm(n, m, k, g, Layout::T, ac.values(), Layout::N, 0.0, &mut d);
            d
        });
        vec![ga, gb]
    }))
}

// ---------------------------------------------------------------------------
// elementwise

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let out = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), out, vec![a.clone(), b.clone()], |g| {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let out = a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), out, vec![a.clone(), b.clone()], |g| {
        vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
    }))
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let out = a.values().iter().zip(b.values()).map(|(x, y)| x * y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(a.shape().to_vec(), out, vec![a.clone(), b.clone()], move |g| {
        let ga = g.iter().zip(bc.values()).map(|(g, y)| g * y).collect();
        let gb = g.iter().zip(ac.values()).map(|(g, x)| g * x).collect();
        vec![Some(ga), Some(gb)]
    }))
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let out = a.values().iter().map(|x| x * c).collect();
    Tensor::from_op(a.shape().to_vec(), out, vec![a.clone()], move |g| {
        vec![Some(g.iter().map(|v| v * c).collect())]
    })
}

/// Adds a fixed (non-differentiable) offset of the same shape.
pub fn add_constant(a: &Tensor, offset: &[f64]) -> Result<Tensor> {
    if offset.len() != a.len() {
        return Err(Error::dim("add_constant", a.shape(), &[offset.len()]));
    }
    let out = a.values().iter().zip(offset).map(|(x, o)| x + o).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), out, vec![a.clone()], |g| {
        vec![Some(g.to_vec())]
    }))
}

/// Multiplies by a fixed (non-differentiable) factor of the same shape.
pub fn mul_constant(a: &Tensor, factor: Vec<f64>) -> Result<Tensor> {
    if factor.len() != a.len() {
        return Err(Error::dim("mul_constant", a.shape(), &[factor.len()]));
    }
    let out = a.values().iter().zip(&factor).map(|(x, f)| x * f).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), out, vec![a.clone()], move |g| {
        vec![Some(g.iter().zip(&factor).map(|(g, f)| g * f).collect())]
    }))
}

/// `x[r, :] + bias` for every row of a rank-2 tensor.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, cols) = rank2("add_row_bias", x)?;
    if bias.shape() != [cols] {
        return Err(Error::dim("add_row_bias", x.shape(), bias.shape()));
    }
    let b = bias.values();
    let mut out = x.values().to_vec();
    for row in out.chunks_exact_mut(cols) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    Ok(Tensor::from_op(vec![rows, cols], out, vec![x.clone(), bias.clone()], move |g| {
        let mut gb = vec![0.0; cols];
        for row in g.chunks_exact(cols) {
            for (acc, v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        vec![Some(g.to_vec()), Some(gb)]
    }))
}

/// Elementwise map with a caller-supplied derivative `df(x, f(x))`.
pub fn map(
    a: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let out: Vec<f64> = a.values().iter().map(|&x| f(x)).collect();
    let ac = a.clone();
    let yc: Rc<[f64]> = out.clone().into();
    Tensor::from_op(a.shape().to_vec(), out, vec![a.clone()], move |g| {
        let d = g
            .iter()
            .zip(ac.values())
            .zip(yc.iter())
            .map(|((g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(d)]
    })
}

pub fn clamp_max(a: &Tensor, cap: f64) -> Tensor {
    map(a, move |x| x.min(cap), move |x, _| if x < cap { 1.0 } else { 0.0 })
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != a.len() || shape.contains(&0) {
        return Err(Error::dim("reshape", a.shape(), shape));
    }
    Ok(Tensor::from_op(shape.to_vec(), a.values().to_vec(), vec![a.clone()], |g| {
        vec![Some(g.to_vec())]
    }))
}

// ---------------------------------------------------------------------------
// reductions

pub fn sum(a: &Tensor) -> Tensor {
    let s = a.values().iter().sum();
    let n = a.len();
    Tensor::from_op(vec![1], vec![s], vec![a.clone()], move |g| vec![Some(vec![g[0]; n])])
}

pub fn mean(a: &Tensor) -> Tensor {
    scale(&sum(a), 1.0 / a.len() as f64)
}

/// Row-wise softmax over the last dimension. Masked entries (`false`) are
/// excluded from normalisation and come out exactly zero.
pub fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let n = last_dim(x);
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(Error::dim("softmax_rows", x.shape(), &[m.len()]));
        }
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let mut out = vec![0.0; x.len()];
    for (r, (row, dst)) in x.values().chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
        let base = r * n;
        let max = (0..n)
            .filter(|&j| keep(base + j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let mut z = 0.0;
        for j in 0..n {
            if keep(base + j) {
                let e = (row[j] - max).exp();
                dst[j] = e;
                z += e;
            }
        }
        for v in dst.iter_mut() {
            *v /= z;
        }
    }
    let y: Rc<[f64]> = out.clone().into();
    Ok(Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], move |g| {
        let mut d = vec![0.0; g.len()];
        for ((yr, gr), dr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(d.chunks_exact_mut(n)) {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for j in 0..n {
                dr[j] = yr[j] * (gr[j] - dot);
            }
        }
        vec![Some(d)]
    }))
}

/// Mean over the valid rows of an `L×d` matrix, giving a `d` vector.
pub fn mean_pool(states: &Tensor, valid: &[bool]) -> Result<Tensor> {
    let (l, d) = rank2("mean_pool", states)?;
    if valid.len() != l {
        return Err(Error::dim("mean_pool", states.shape(), &[valid.len()]));
    }
    let pooled = mean_pool_groups(states, valid, 1)?;
    reshape(&pooled, &[d])
}

/// Batched mean pooling: rows of `x` (`(B·L)×d`) are split into `groups`
/// consecutive blocks of `L` rows and each block is averaged over its valid rows.
pub fn mean_pool_groups(x: &Tensor, valid: &[bool], groups: usize) -> Result<Tensor> {
    let (rows, d) = rank2("mean_pool", x)?;
    if valid.len() != rows || groups == 0 || rows % groups != 0 {
        return Err(Error::dim("mean_pool", x.shape(), &[valid.len(), groups]));
    }
    let l = rows / groups;
    let mut counts = vec![0usize; groups];
    let mut out = vec![0.0; groups * d];
    for r in 0..rows {
        if valid[r] {
            let b = r / l;
            counts[b] += 1;
            for (o, v) in out[b * d..(b + 1) * d].iter_mut().zip(&x.values()[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
    }
    if let Some(b) = counts.iter().position(|&c| c == 0) {
        return Err(Error::DegenerateInput(format!("mean_pool group {b} has no valid position")));
    }
    for (b, row) in out.chunks_exact_mut(d).enumerate() {
        let inv = 1.0 / counts[b] as f64;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    let valid = valid.to_vec();
    Ok(Tensor::from_op(vec![groups, d], out, vec![x.clone()], move |g| {
        let mut dx = vec![0.0; rows * d];
        for r in 0..rows {
            if valid[r] {
                let b = r / l;
                let inv = 1.0 / counts[b] as f64;
                for (o, gv) in dx[r * d..(r + 1) * d].iter_mut().zip(&g[b * d..(b + 1) * d]) {
                    *o = gv * inv;
                }
            }
        }
        vec![Some(dx)]
    }))
}

/// `Σ w·(a − b)²` with fixed per-entry weights.
pub fn weighted_sq_diff(a: &Tensor, b: &Tensor, weights: Vec<f64>) -> Result<Tensor> {
    same_shape("weighted_sq_diff", a, b)?;
    if weights.len() != a.len() {
        return Err(Error::dim("weighted_sq_diff", a.shape(), &[weights.len()]));
    }
    let diff: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect();
    let total = diff.iter().zip(&weights).map(|(d, w)| w * d * d).sum();
    Ok(Tensor::from_op(vec![1], vec![total], vec![a.clone(), b.clone()], move |g| {
        let ga: Vec<f64> = diff.iter().zip(&weights).map(|(d, w)| 2.0 * w * d * g[0]).collect();
        let gb = ga.iter().map(|v| -v).collect();
        vec![Some(ga), Some(gb)]
    }))
}

/// Mean squared difference over valid entries.
pub fn mse(a: &Tensor, b: &Tensor, valid: Option<&[bool]>) -> Result<Tensor> {
    same_shape("mse", a, b)?;
    let weights = match valid {
        None => vec![1.0 / a.len() as f64; a.len()],
        Some(m) => {
            if m.len() != a.len() {
                return Err(Error::dim("mse", a.shape(), &[m.len()]));
            }
            let n = m.iter().filter(|&&v| v).count();
            if n == 0 {
                return Err(Error::DegenerateInput("mse with no valid entries".into()));
            }
            let w = 1.0 / n as f64;
            m.iter().map(|&v| if v { w } else { 0.0 }).collect()
        }
    };
    weighted_sq_diff(a, b, weights)
}

/// Per-row mean squared difference of two `B×d` matrices, giving `B` values.
pub fn row_mean_sq_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("row_mean_sq_diff", a, b)?;
    let (rows, d) = rank2("row_mean_sq_diff", a)?;
    let diff: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect();
    let inv = 1.0 / d as f64;
    let out = diff.chunks_exact(d).map(|r| r.iter().map(|v| v * v).sum::<f64>() * inv).collect();
    Ok(Tensor::from_op(vec![rows], out, vec![a.clone(), b.clone()], move |g| {
        let ga: Vec<f64> = diff
            .iter()
            .enumerate()
            .map(|(i, dv)| 2.0 * inv * dv * g[i / d])
            .collect();
        let gb = ga.iter().map(|v| -v).collect();
        vec![Some(ga), Some(gb)]
    }))
}

/// Summed negative log-likelihood of gold classes under row-wise probabilities
/// (`B×C`), each probability floored at [`LOG_FLOOR`].
pub fn nll_sum(probs: &Tensor, gold: &[usize]) -> Result<Tensor> {
    let (rows, c) = rank2("nll", probs)?;
    if gold.len() != rows {
        return Err(Error::dim("nll", probs.shape(), &[gold.len()]));
    }
    if let Some(&bad) = gold.iter().find(|&&y| y >= c) {
        return Err(Error::Label { label: bad, n_classes: c });
    }
    let p = probs.values();
    let total = gold
        .iter()
        .enumerate()
        .map(|(r, &y)| -p[r * c + y].max(LOG_FLOOR).ln())
        .sum();
    let gold = gold.to_vec();
    let pc = probs.clone();
    Ok(Tensor::from_op(vec![1], vec![total], vec![probs.clone()], move |g| {
        let p = pc.values();
        let mut d = vec![0.0; p.len()];
        for (r, &y) in gold.iter().enumerate() {
            let v = p[r * c + y];
            if v > LOG_FLOOR {
                d[r * c + y] = -g[0] / v;
            }
        }
        vec![Some(d)]
    }))
}

/// `−log p[gold]` for one probability vector.
pub fn cross_entropy(probs: &Tensor, gold: usize) -> Result<Tensor> {
    let n = probs.len();
    if gold >= n {
        return Err(Error::Label { label: gold, n_classes: n });
    }
    let s: f64 = probs.values().iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("probabilities sum to {s}, not 1")));
    }
    let row = reshape(probs, &[1, n])?;
    nll_sum(&row, &[gold])
}
