//! Differentiable primitives. Each op records a backward closure that
//! accumulates into its parents' gradient buffers.

use super::{Scalar, Tensor};
use crate::error::{DloError, Result};

fn require_same_shape<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DloError::Shape(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    require_same_shape(a, b, "add")?;
    let data: Vec<E> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor::from_op(
        a.shape(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|grad, _out, parents| {
            parents[0].accum_grad(grad);
            parents[1].accum_grad(grad);
        }),
    ))
}

pub fn mul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    require_same_shape(a, b, "mul")?;
    let data: Vec<E> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * y)
        .collect();
    Ok(Tensor::from_op(
        a.shape(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|grad, _out, parents| {
            let da: Vec<E> = grad
                .iter()
                .zip(parents[1].data().iter())
                .map(|(&g, &y)| g * y)
                .collect();
            let db: Vec<E> = grad
                .iter()
                .zip(parents[0].data().iter())
                .map(|(&g, &x)| g * x)
                .collect();
            parents[0].accum_grad(&da);
            parents[1].accum_grad(&db);
        }),
    ))
}

/// Elementwise `y = m*x + c` with constant coefficients.
pub fn affine<E: Scalar>(x: &Tensor<E>, m: f64, c: f64) -> Tensor<E> {
    let me = E::from_double(m);
    let ce = E::from_double(c);
    let data: Vec<E> = x.data().iter().map(|&v| me * v + ce).collect();
    Tensor::from_op(
        x.shape(),
        data,
        vec![x.clone()],
        Box::new(move |grad, _out, parents| {
            let dx: Vec<E> = grad.iter().map(|&g| g * me).collect();
            parents[0].accum_grad(&dx);
        }),
    )
}

pub fn scale<E: Scalar>(x: &Tensor<E>, c: f64) -> Tensor<E> {
    affine(x, c, 0.0)
}

pub fn matmul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(DloError::Shape("matmul: expects 2-D operands".into()));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(DloError::Shape(format!(
            "matmul: inner dimensions disagree ({m}x{k} vs {k2}x{n})"
        )));
    }
    let mut out = vec![E::zero(); m * n];
    {
        let ad = a.data();
        let bd = b.data();
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == E::zero() {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + aip * brow[j];
                }
            }
        }
    }
    Ok(Tensor::from_op(
        &[m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |grad, _out, parents| {
            let ad = parents[0].data();
            let bd = parents[1].data();
            // dA = dC * B^T
            let mut da = vec![E::zero(); m * k];
            for i in 0..m {
                for j in 0..n {
                    let g = grad[i * n + j];
                    if g == E::zero() {
                        continue;
                    }
                    for p in 0..k {
                        da[i * k + p] = da[i * k + p] + g * bd[p * n + j];
                    }
                }
            }
            // dB = A^T * dC
            let mut db = vec![E::zero(); k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == E::zero() {
                        continue;
                    }
                    for j in 0..n {
                        db[p * n + j] = db[p * n + j] + av * grad[i * n + j];
                    }
                }
            }
            parents[0].accum_grad(&da);
            parents[1].accum_grad(&db);
        }),
    ))
}

pub fn transpose<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape().len() != 2 {
        return Err(DloError::Shape("transpose: expects 2-D operand".into()));
    }
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = xd[i * n + j];
        }
    }
    drop(xd);
    Ok(Tensor::from_op(
        &[n, m],
        out,
        vec![x.clone()],
        Box::new(move |grad, _out, parents| {
            let mut dx = vec![E::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = grad[j * m + i];
                }
            }
            parents[0].accum_grad(&dx);
        }),
    ))
}

pub fn sigmoid<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let data: Vec<E> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor::from_op(
        x.shape(),
        data,
        vec![x.clone()],
        Box::new(|grad, out, parents| {
            let dx: Vec<E> = grad
                .iter()
                .zip(out.iter())
                .map(|(&g, &y)| g * y * (E::one() - y))
                .collect();
            parents[0].accum_grad(&dx);
        }),
    )
}

pub fn sigmoid_scalar<E: Scalar>(v: E) -> E {
    // Split on sign for numerical stability.
    if v >= E::zero() {
        E::one() / (E::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::one() + e)
    }
}

pub fn silu<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let data: Vec<E> = x.data().iter().map(|&v| v * sigmoid_scalar(v)).collect();
    Tensor::from_op(
        x.shape(),
        data,
        vec![x.clone()],
        Box::new(|grad, _out, parents| {
            let xd = parents[0].data();
            let dx: Vec<E> = grad
                .iter()
                .zip(xd.iter())
                .map(|(&g, &v)| {
                    let s = sigmoid_scalar(v);
                    g * (s + v * s * (E::one() - s))
                })
                .collect();
            drop(xd);
            parents[0].accum_grad(&dx);
        }),
    )
}

/// Per-row RMS normalization with a learned gain: `y = x / rms(x) * w`.
pub fn rms_norm<E: Scalar>(x: &Tensor<E>, w: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
    if x.shape().len() != 2 || w.shape() != [x.shape()[1]] {
        return Err(DloError::Shape(format!(
            "rms_norm: x {:?} vs gain {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let epse = E::from_double(eps);
    let de = E::from_double(d as f64);
    let mut out = vec![E::zero(); n * d];
    let mut rms = vec![E::zero(); n];
    {
        let xd = x.data();
        let wd = w.data();
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let ms = row.iter().fold(E::zero(), |acc, &v| acc + v * v) / de;
            let rm = (ms + epse).sqrt();
            rms[r] = rm;
            for j in 0..d {
                out[r * d + j] = row[j] / rm * wd[j];
            }
        }
    }
    Ok(Tensor::from_op(
        &[n, d],
        out,
        vec![x.clone(), w.clone()],
        Box::new(move |grad, _out, parents| {
            let xd = parents[0].data();
            let wd = parents[1].data();
            let mut dx = vec![E::zero(); n * d];
            let mut dw = vec![E::zero(); d];
            for r in 0..n {
                let rm = rms[r];
                let row = &xd[r * d..(r + 1) * d];
                let grow = &grad[r * d..(r + 1) * d];
                // g_j = dy_j * w_j ; dx = (g - xhat * <g, xhat>/d) / rms
                let mut dot = E::zero();
                for j in 0..d {
                    dot = dot + grow[j] * wd[j] * (row[j] / rm);
                }
                for j in 0..d {
                    let g = grow[j] * wd[j];
                    dx[r * d + j] = (g - (row[j] / rm) * dot / de) / rm;
                    dw[j] = dw[j] + grow[j] * row[j] / rm;
                }
            }
            drop(xd);
            drop(wd);
            parents[0].accum_grad(&dx);
            parents[1].accum_grad(&dw);
        }),
    ))
}

/// Row-wise softmax over a square score matrix with a strict causal mask:
/// entry (i, j) participates only when `j <= i`; masked entries are 0.
pub fn softmax_causal<E: Scalar>(scores: &Tensor<E>) -> Result<Tensor<E>> {
    if scores.shape().len() != 2 || scores.shape()[0] != scores.shape()[1] {
        return Err(DloError::Shape(format!(
            "softmax_causal: expects square matrix, got {:?}",
            scores.shape()
        )));
    }
    let s = scores.shape()[0];
    let mut out = vec![E::zero(); s * s];
    {
        let sd = scores.data();
        for i in 0..s {
            let row = &sd[i * s..i * s + i + 1];
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut denom = E::zero();
            for j in 0..=i {
                let e = (row[j] - max).exp();
                out[i * s + j] = e;
                denom = denom + e;
            }
            for j in 0..=i {
                out[i * s + j] = out[i * s + j] / denom;
            }
        }
    }
    Ok(Tensor::from_op(
        &[s, s],
        out,
        vec![scores.clone()],
        Box::new(move |grad, out, parents| {
            let mut dx = vec![E::zero(); s * s];
            for i in 0..s {
                let mut dot = E::zero();
                for j in 0..=i {
                    dot = dot + grad[i * s + j] * out[i * s + j];
                }
                for j in 0..=i {
                    let y = out[i * s + j];
                    dx[i * s + j] = y * (grad[i * s + j] - dot);
                }
            }
            parents[0].accum_grad(&dx);
        }),
    ))
}

/// Row lookup: `out[s] = table[ids[s]]`. Gradient scatter-adds into the table.
pub fn embedding<E: Scalar>(table: &Tensor<E>, ids: &[usize]) -> Result<Tensor<E>> {
    if table.shape().len() != 2 {
        return Err(DloError::Shape("embedding: table must be 2-D".into()));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    for &id in ids {
        if id >= v {
            return Err(DloError::Input(format!(
                "unknown token id {id} (vocab size {v})"
            )));
        }
    }
    let s = ids.len();
    let mut out = vec![E::zero(); s * d];
    {
        let td = table.data();
        for (r, &id) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
        }
    }
    let ids_owned = ids.to_vec();
    Ok(Tensor::from_op(
        &[s, d],
        out,
        vec![table.clone()],
        Box::new(move |grad, _out, parents| {
            let mut dt = vec![E::zero(); v * d];
            for (r, &id) in ids_owned.iter().enumerate() {
                for j in 0..d {
                    dt[id * d + j] = dt[id * d + j] + grad[r * d + j];
                }
            }
            parents[0].accum_grad(&dt);
        }),
    ))
}

/// Multiply each row of `x` by the matching entry of vector `v`.
pub fn scale_rows<E: Scalar>(x: &Tensor<E>, v: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape().len() != 2 || v.shape() != [x.shape()[0]] {
        return Err(DloError::Shape(format!(
            "scale_rows: x {:?} vs v {:?}",
            x.shape(),
            v.shape()
        )));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![E::zero(); n * d];
    {
        let xd = x.data();
        let vd = v.data();
        for r in 0..n {
            for j in 0..d {
                out[r * d + j] = xd[r * d + j] * vd[r];
            }
        }
    }
    Ok(Tensor::from_op(
        &[n, d],
        out,
        vec![x.clone(), v.clone()],
        Box::new(move |grad, _out, parents| {
            let xd = parents[0].data();
            let vd = parents[1].data();
            let mut dx = vec![E::zero(); n * d];
            let mut dv = vec![E::zero(); n];
            for r in 0..n {
                for j in 0..d {
                    dx[r * d + j] = grad[r * d + j] * vd[r];
                    dv[r] = dv[r] + grad[r * d + j] * xd[r * d + j];
                }
            }
            drop(xd);
            drop(vd);
            parents[0].accum_grad(&dx);
            parents[1].accum_grad(&dv);
        }),
    ))
}

/// Select rows of `x` by index (indices may repeat).
pub fn gather_rows<E: Scalar>(x: &Tensor<E>, idx: &[usize]) -> Result<Tensor<E>> {
    if x.shape().len() != 2 {
        return Err(DloError::Shape("gather_rows: expects 2-D input".into()));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    for &i in idx {
        if i >= n {
            return Err(DloError::Shape(format!("gather_rows: index {i} >= {n}")));
        }
    }
    let k = idx.len();
    let mut out = vec![E::zero(); k * d];
    {
        let xd = x.data();
        for (r, &i) in idx.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&xd[i * d..(i + 1) * d]);
        }
    }
    let idx_owned = idx.to_vec();
    Ok(Tensor::from_op(
        &[k, d],
        out,
        vec![x.clone()],
        Box::new(move |grad, _out, parents| {
            let mut dx = vec![E::zero(); n * d];
            for (r, &i) in idx_owned.iter().enumerate() {
                for j in 0..d {
                    dx[i * d + j] = dx[i * d + j] + grad[r * d + j];
                }
            }
            parents[0].accum_grad(&dx);
        }),
    ))
}

/// Copy of `base` with row `idx[r]` replaced by `rows[r]`. Indices must be
/// distinct.
pub fn scatter_rows<E: Scalar>(
    base: &Tensor<E>,
    rows: &Tensor<E>,
    idx: &[usize],
) -> Result<Tensor<E>> {
    let (n, d) = (base.shape()[0], base.shape()[1]);
    if rows.shape() != [idx.len(), d] {
        return Err(DloError::Shape(format!(
            "scatter_rows: rows {:?} vs {} indices of width {d}",
            rows.shape(),
            idx.len()
        )));
    }
    let mut out = base.data().clone();
    {
        let rd = rows.data();
        for (r, &i) in idx.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&rd[r * d..(r + 1) * d]);
        }
    }
    let idx_owned = idx.to_vec();
    Ok(Tensor::from_op(
        &[n, d],
        out,
        vec![base.clone(), rows.clone()],
        Box::new(move |grad, _out, parents| {
            let mut dbase = grad.to_vec();
            let mut drows = vec![E::zero(); idx_owned.len() * d];
            for (r, &i) in idx_owned.iter().enumerate() {
                for j in 0..d {
                    drows[r * d + j] = grad[i * d + j];
                    dbase[i * d + j] = E::zero();
                }
            }
            parents[0].accum_grad(&dbase);
            parents[1].accum_grad(&drows);
        }),
    ))
}

/// Column slice `x[:, start..start+width]`.
pub fn slice_cols<E: Scalar>(x: &Tensor<E>, start: usize, width: usize) -> Result<Tensor<E>> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if start + width > d {
        return Err(DloError::Shape(format!(
            "slice_cols: range {start}..{} out of width {d}",
            start + width
        )));
    }
    let mut out = vec![E::zero(); n * width];
    {
        let xd = x.data();
        for r in 0..n {
            out[r * width..(r + 1) * width]
                .copy_from_slice(&xd[r * d + start..r * d + start + width]);
        }
    }
    Ok(Tensor::from_op(
        &[n, width],
        out,
        vec![x.clone()],
        Box::new(move |grad, _out, parents| {
            let mut dx = vec![E::zero(); n * d];
            for r in 0..n {
                for j in 0..width {
                    dx[r * d + start + j] = grad[r * width + j];
                }
            }
            parents[0].accum_grad(&dx);
        }),
    ))
}

/// Horizontal concatenation of 2-D tensors with equal row counts.
pub fn concat_cols<E: Scalar>(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(DloError::Shape("concat_cols: empty input".into()));
    }
    let n = parts[0].shape()[0];
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    for p in parts {
        if p.shape().len() != 2 || p.shape()[0] != n {
            return Err(DloError::Shape("concat_cols: row counts differ".into()));
        }
    }
    let d: usize = widths.iter().sum();
    let mut out = vec![E::zero(); n * d];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pd = p.data();
        for r in 0..n {
            out[r * d + off..r * d + off + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
        }
        off += w;
    }
    let widths_owned = widths.clone();
    Ok(Tensor::from_op(
        &[n, d],
        out,
        parts.to_vec(),
        Box::new(move |grad, _out, parents| {
            let mut off = 0;
            for (p, &w) in parents.iter().zip(&widths_owned) {
                let mut dp = vec![E::zero(); n * w];
                for r in 0..n {
                    dp[r * w..(r + 1) * w].copy_from_slice(&grad[r * d + off..r * d + off + w]);
                }
                p.accum_grad(&dp);
                off += w;
            }
        }),
    ))
}

/// View with a different shape over the same element count.
pub fn reshape<E: Scalar>(x: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
    if shape.iter().product::<usize>() != x.len() {
        return Err(DloError::Shape(format!(
            "reshape: {:?} -> {:?} changes element count",
            x.shape(),
            shape
        )));
    }
    Ok(Tensor::from_op(
        shape,
        x.data().clone(),
        vec![x.clone()],
        Box::new(|grad, _out, parents| {
            parents[0].accum_grad(grad);
        }),
    ))
}

pub fn sum<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let total = x.data().iter().fold(E::zero(), |acc, &v| acc + v);
    let n = x.len();
    Tensor::from_op(
        &[1],
        vec![total],
        vec![x.clone()],
        Box::new(move |grad, _out, parents| {
            parents[0].accum_grad(&vec![grad[0]; n]);
        }),
    )
}

pub fn mean<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    scale(&sum(x), 1.0 / x.len() as f64)
}

/// Multi-head scaled dot-product attention with a strict causal mask.
/// `q`, `k`, `v` are `[S, d]`; heads are contiguous column blocks.
pub fn causal_softmax_attention<E: Scalar>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    n_heads: usize,
) -> Result<Tensor<E>> {
    require_same_shape(q, k, "attention")?;
    require_same_shape(q, v, "attention")?;
    let d = q.shape()[1];
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(DloError::Config(format!(
            "head count {n_heads} must divide model width {d}"
        )));
    }
    let dh = d / n_heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = slice_cols(q, h * dh, dh)?;
        let kh = slice_cols(k, h * dh, dh)?;
        let vh = slice_cols(v, h * dh, dh)?;
        let scores = scale(&matmul(&qh, &transpose(&kh)?)?, inv_sqrt);
        let weights = softmax_causal(&scores)?;
        heads.push(matmul(&weights, &vh)?);
    }
    concat_cols(&heads)
}

/// Mean next-token cross-entropy over positions where `mask` is true.
/// Targets at masked-out positions are ignored entirely.
pub fn cross_entropy_masked<E: Scalar>(
    logits: &Tensor<E>,
    targets: &[usize],
    mask: &[bool],
) -> Result<Tensor<E>> {
    let (s, v) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != s || mask.len() != s {
        return Err(DloError::Shape(
            "cross_entropy: targets/mask length mismatch".into(),
        ));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(DloError::Input("cross_entropy: empty loss mask".into()));
    }
    for (r, &t) in targets.iter().enumerate() {
        if mask[r] && t >= v {
            return Err(DloError::Input(format!("target id {t} >= vocab {v}")));
        }
    }
    let mut loss = E::zero();
    let mut probs = vec![E::zero(); s * v];
    {
        let ld = logits.data();
        for r in 0..s {
            if !mask[r] {
                continue;
            }
            let row = &ld[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut denom = E::zero();
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[r * v + j] = e;
                denom = denom + e;
            }
            for j in 0..v {
                probs[r * v + j] = probs[r * v + j] / denom;
            }
            loss = loss - (probs[r * v + targets[r]]).ln();
        }
    }
    let ce = E::from_double(count as f64);
    loss = loss / ce;
    let targets_owned = targets.to_vec();
    let mask_owned = mask.to_vec();
    Ok(Tensor::from_op(
        &[1],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |grad, _out, parents| {
            let g = grad[0] / ce;
            let mut dl = vec![E::zero(); s * v];
            for r in 0..s {
                if !mask_owned[r] {
                    continue;
                }
                for j in 0..v {
                    dl[r * v + j] = g * probs[r * v + j];
                }
                let t = targets_owned[r];
                dl[r * v + t] = dl[r * v + t] - g;
            }
            parents[0].accum_grad(&dl);
        }),
    ))
}

const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy on probabilities (already in (0,1)), with
/// targets in {0,1} and a validity mask. Probabilities are clamped to
/// `[1e-7, 1-1e-7]` before the log.
pub fn bce_mean<E: Scalar>(probs: &Tensor<E>, labels: &[bool], mask: &[bool]) -> Result<Tensor<E>> {
    let n = probs.len();
    if labels.len() != n || mask.len() != n {
        return Err(DloError::Shape("bce: labels/mask length mismatch".into()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(DloError::Input("bce: empty mask".into()));
    }
    let lo = E::from_double(BCE_CLAMP);
    let hi = E::from_double(1.0 - BCE_CLAMP);
    let mut loss = E::zero();
    {
        let pd = probs.data();
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let p = pd[i].max(lo).min(hi);
            loss = loss
                - if labels[i] {
                    p.ln()
                } else {
                    (E::one() - p).ln()
                };
        }
    }
    let ce = E::from_double(count as f64);
    loss = loss / ce;
    let labels_owned = labels.to_vec();
    let mask_owned = mask.to_vec();
    Ok(Tensor::from_op(
        &[1],
        vec![loss],
        vec![probs.clone()],
        Box::new(move |grad, _out, parents| {
            let pd = parents[0].data();
            let g = grad[0] / ce;
            let mut dp = vec![E::zero(); n];
            for i in 0..n {
                if !mask_owned[i] {
                    continue;
                }
                let p = pd[i].max(lo).min(hi);
                dp[i] = if labels_owned[i] {
                    -g / p
                } else {
                    g / (E::one() - p)
                };
            }
            drop(pd);
            parents[0].accum_grad(&dp);
        }),
    ))
}

/// Cosine similarity of two equal-length vectors. A zero-norm input is
/// treated as "no change" and returns 1.0.
pub fn cosine<E: Scalar>(a: &[E], b: &[E]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_double(), y.to_double());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}
