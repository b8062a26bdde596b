//! Fused building blocks for the encoder: embedding lookup, layer norm, GELU,
//! dropout and batched multi-head attention.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::ops::mul_constant;
use crate::numerics::tensor::Tensor;

/// Rows `ids[i]` of a `V×d` table, stacked into `N×d`.
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let [v, d] = *table.shape() else {
        return Err(Error::Contract(format!("gather_rows on shape {:?}", table.shape())));
    };
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return Err(Error::Input(format!("row id {bad} out of range for table of {v} rows")));
    }
    if ids.is_empty() {
        return Err(Error::Input("gather_rows with no ids".into()));
    }
    let src = table.values();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        out.extend_from_slice(&src[i * d..(i + 1) * d]);
    }
    let ids = ids.to_vec();
    Ok(Tensor::from_op(vec![ids.len(), d], out, vec![table.clone()], move |g| {
        let mut dt = vec![0.0; v * d];
        for (r, &i) in ids.iter().enumerate() {
            for (acc, gv) in dt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                *acc += gv;
            }
        }
        vec![Some(dt)]
    }))
}

/// Row-wise layer normalisation with learned gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let [rows, d] = *x.shape() else {
        return Err(Error::Contract(format!("layer_norm on shape {:?}", x.shape())));
    };
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    let mut xhat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.values()[r * d..(r + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for (h, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *h = (v - mu) * is;
        }
    }
    let (gv, bv) = (gain.values(), bias.values());
    let out = xhat
        .iter()
        .enumerate()
        .map(|(i, h)| h * gv[i % d] + bv[i % d])
        .collect();
    let gc = gain.clone();
    Ok(Tensor::from_op(
        vec![rows, d],
        out,
        vec![x.clone(), gain.clone(), bias.clone()],
        move |g| {
            let gv = gc.values();
            let mut dx = vec![0.0; rows * d];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut sum_dh = 0.0;
                let mut sum_dh_h = 0.0;
                for j in 0..d {
                    dgain[j] += gr[j] * hr[j];
                    dbias[j] += gr[j];
                    let dh = gr[j] * gv[j];
                    sum_dh += dh;
                    sum_dh_h += dh * hr[j];
                }
                let inv_d = 1.0 / d as f64;
                for j in 0..d {
                    let dh = gr[j] * gv[j];
                    dx[r * d + j] = inv_std[r] * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                }
            }
            vec![Some(dx), Some(dgain), Some(dbias)]
        },
    ))
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    let out: Vec<f64> = x
        .values()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + libm::erf(v * FRAC_1_SQRT_2)))
        .collect();
    let xc = x.clone();
    Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], move |g| {
        let inv_sqrt_2pi = 1.0 / (2.0 * PI).sqrt();
        let d = g
            .iter()
            .zip(xc.values())
            .map(|(g, &v)| {
                let cdf = 0.5 * (1.0 + libm::erf(v * FRAC_1_SQRT_2));
                let pdf = inv_sqrt_2pi * (-0.5 * v * v).exp();
                g * (cdf + v * pdf)
            })
            .collect();
        vec![Some(d)]
    })
}

/// Inverted dropout: zeroes entries with probability `p` and rescales the rest.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, rng: &mut R) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    if p >= 1.0 {
        return Err(Error::Config(format!("dropout rate {p} must be < 1")));
    }
    let keep = 1.0 / (1.0 - p);
    let factor = (0..x.len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    mul_constant(x, factor)
}

/// Geometry of a padded batch laid out as `(B·L)×d` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchShape {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
}

/// Post-softmax scaled dot-product attention probabilities, `B×H×L×L`.
///
/// Keys at invalid positions are excluded from the softmax; rows and columns
/// at invalid positions are exactly zero.
pub fn attention_probs(q: &Tensor, k: &Tensor, valid: &[bool], bs: BatchShape) -> Result<Tensor> {
    let BatchShape { batch, len, heads } = bs;
    if q.shape() != k.shape() {
        return Err(Error::dim("attention_probs", q.shape(), k.shape()));
    }
    let [rows, d] = *q.shape() else {
        return Err(Error::Contract(format!("attention on shape {:?}", q.shape())));
    };
    if rows != batch * len || valid.len() != rows || heads == 0 || d % heads != 0 {
        return Err(Error::dim("attention_probs", q.shape(), &[batch, len, heads]));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qv, kv) = (q.values(), k.values());
    let mut out = vec![0.0; batch * heads * len * len];
    let mut scores = vec![0.0; len];
    for b in 0..batch {
        let vrow = &valid[b * len..(b + 1) * len];
        if !vrow.iter().any(|&v| v) {
            return Err(Error::DegenerateRow { row: b });
        }
        for h in 0..heads {
            let off = h * dh;
            for i in 0..len {
                if !vrow[i] {
                    continue;
                }
                let qi = &qv[(b * len + i) * d + off..][..dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    if vrow[j] {
                        let kj = &kv[(b * len + j) * d + off..][..dh];
                        let s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                }
                let dst = &mut out[((b * heads + h) * len + i) * len..][..len];
                let mut z = 0.0;
                for j in 0..len {
                    if vrow[j] {
                        let e = (scores[j] - max).exp();
                        dst[j] = e;
                        z += e;
                    }
                }
                dst.iter_mut().for_each(|v| *v /= z);
            }
        }
    }
    let probs: Rc<[f64]> = out.clone().into();
    let (qc, kc) = (q.clone(), k.clone());
    Ok(Tensor::from_op(
        vec![batch, heads, len, len],
        out,
        vec![q.clone(), k.clone()],
        move |g| {
            let (qv, kv) = (qc.values(), kc.values());
            let mut dq = vec![0.0; rows * d];
            let mut dk = vec![0.0; rows * d];
            let mut ds = vec![0.0; len];
            for b in 0..batch {
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..len {
                        let base = ((b * heads + h) * len + i) * len;
                        let p = &probs[base..base + len];
                        let gp = &g[base..base + len];
                        let dot: f64 = p.iter().zip(gp).map(|(a, c)| a * c).sum();
                        for j in 0..len {
                            ds[j] = p[j] * (gp[j] - dot) * scale;
                        }
                        let qi_row = (b * len + i) * d + off;
                        for j in 0..len {
                            if ds[j] == 0.0 {
                                continue;
                            }
                            let kj_row = (b * len + j) * d + off;
                            for t in 0..dh {
                                dq[qi_row + t] += ds[j] * kv[kj_row + t];
                                dk[kj_row + t] += ds[j] * qv[qi_row + t];
                            }
                        }
                    }
                }
            }
            vec![Some(dq), Some(dk)]
        },
    ))
}

/// Applies `B×H×L×L` attention probabilities to values laid out `(B·L)×d`,
/// concatenating heads back into `(B·L)×d`.
pub fn attention_context(probs: &Tensor, v: &Tensor, bs: BatchShape) -> Result<Tensor> {
    let BatchShape { batch, len, heads } = bs;
    let [rows, d] = *v.shape() else {
        return Err(Error::Contract(format!("attention_context on shape {:?}", v.shape())));
    };
    if probs.shape() != [batch, heads, len, len] || rows != batch * len || d % heads != 0 {
        return Err(Error::dim("attention_context", probs.shape(), v.shape()));
    }
    let dh = d / heads;
    let (pv, vv) = (probs.values(), v.values());
    let mut out = vec![0.0; rows * d];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..len {
                let p = &pv[((b * heads + h) * len + i) * len..][..len];
                let dst = (b * len + i) * d + off;
                for (j, &pij) in p.iter().enumerate() {
                    if pij == 0.0 {
                        continue;
                    }
                    let src = (b * len + j) * d + off;
                    for t in 0..dh {
                        out[dst + t] += pij * vv[src + t];
                    }
                }
            }
        }
    }
    let (pc, vc) = (probs.clone(), v.clone());
    Ok(Tensor::from_op(vec![rows, d], out, vec![probs.clone(), v.clone()], move |g| {
        let (pv, vv) = (pc.values(), vc.values());
        let mut dp = vec![0.0; pv.len()];
        let mut dv = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    let base = ((b * heads + h) * len + i) * len;
                    let gi = (b * len + i) * d + off;
                    for j in 0..len {
                        let vj = (b * len + j) * d + off;
                        let mut acc = 0.0;
                        for t in 0..dh {
                            acc += g[gi + t] * vv[vj + t];
                        }
                        dp[base + j] = acc;
                        let pij = pv[base + j];
                        if pij != 0.0 {
                            for t in 0..dh {
                                dv[vj + t] += pij * g[gi + t];
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dp), Some(dv)]
    }))
}
