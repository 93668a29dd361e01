//! Forward kernels shared by the graph and by the fitted decoders.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// `[m,k] · [k,n] → [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return shape_err(format!(
            "matmul needs [m,k]·[k,n], got {:?}·{:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new([m, n], out)
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Transpose of a matrix.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return shape_err(format!("transpose needs a matrix, got {:?}", a.shape()));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new([n, m], out)
}

/// Affine map on the last axis: `y = x·Wᵀ + b` with `W: [d_out, d_in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.rank() != 2 || x.last_dim() != w.shape()[1] || x.rank() == 0 {
        return shape_err(format!(
            "linear: input {:?} incompatible with weight {:?}",
            x.shape(),
            w.shape()
        ));
    }
    let (n, k) = (w.shape()[0], w.shape()[1]);
    if let Some(b) = b {
        if b.shape() != [n] {
            return shape_err(format!("linear: bias {:?} for {n} outputs", b.shape()));
        }
    }
    let rows = x.rows();
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let xr = &xd[r * k..(r + 1) * k];
        for j in 0..n {
            let wr = &wd[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (a, b) in xr.iter().zip(wr) {
                acc += a * b;
            }
            out[r * n + j] = acc;
        }
        if let Some(b) = b {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out)
}

/// Per-row statistics kept by [`layernorm_full`] for the backward pass.
pub(crate) struct NormStats {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Standardizes the last axis then applies `gain` and `shift`.
pub fn layernorm(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layernorm_full(x, gain, shift, eps)?.0)
}

pub(crate) fn layernorm_full(
    x: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormStats)> {
    let e = x.last_dim();
    if x.rank() == 0 || gain.shape() != [e] || shift.shape() != [e] {
        return shape_err(format!(
            "layernorm: input {:?} with gain {:?} and shift {:?}",
            x.shape(),
            gain.shape(),
            shift.shape()
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layernorm eps must be > 0, got {eps}")));
    }
    let rows = x.rows();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    let (g, s) = (gain.data(), shift.data());
    for r in 0..rows {
        let row = &x.data()[r * e..(r + 1) * e];
        let mean = row.iter().sum::<f64>() / e as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..e {
            let h = (row[j] - mean) * is;
            xhat[r * e + j] = h;
            y[r * e + j] = h * g[j] + s[j];
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        NormStats {
            xhat: Tensor::new(shape, xhat)?,
            inv_std,
        },
    ))
}

/// Softmax over the last axis, max-subtracted.
pub fn softmax(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut out = x.clone();
    if n == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn check_same(pred: &Tensor, target: &Tensor, what: &str) -> Result<()> {
    if pred.shape() != target.shape() {
        return shape_err(format!(
            "{what}: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same(pred, target, "mse")?;
    let n = pred.len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Mean absolute error over all elements.
pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same(pred, target, "mae")?;
    let n = pred.len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n)
}

pub(crate) fn check_labels(scores: &Tensor, labels: &[usize], what: &str) -> Result<usize> {
    if scores.rank() != 2 || scores.shape()[0] != labels.len() {
        return shape_err(format!(
            "{what}: scores {:?} for {} labels",
            scores.shape(),
            labels.len()
        ));
    }
    let k = scores.shape()[1];
    let classes = k.max(2);
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!(
            "{what}: label {bad} outside class range 0..{classes}"
        )));
    }
    Ok(k)
}

/// Mean softmax cross-entropy of `logits: [B, K]` against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let k = check_labels(logits, labels, "cross_entropy")?;
    if labels.iter().any(|&l| l >= k) {
        return Err(Error::Input(format!(
            "cross_entropy: label outside class range 0..{k}"
        )));
    }
    let p = softmax(logits);
    let b = labels.len().max(1) as f64;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -p.data()[i * k + l].ln())
        .sum::<f64>()
        / b)
}

/// Sign of class `k` for an item labelled `label`; a single score column is
/// read as the binary "label == 1" score.
pub(crate) fn ovr_sign(k: usize, label: usize, columns: usize) -> f64 {
    let positive = if columns == 1 { label == 1 } else { label == k };
    if positive {
        1.0
    } else {
        -1.0
    }
}

/// One-vs-rest hinge loss: `mean_b Σ_k max(0, margin − s_k·score_k)`.
pub fn hinge(scores: &Tensor, labels: &[usize], margin: f64) -> Result<f64> {
    let k = check_labels(scores, labels, "hinge")?;
    let b = labels.len().max(1) as f64;
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        for j in 0..k {
            let s = ovr_sign(j, l, k);
            total += (margin - s * scores.data()[i * k + j]).max(0.0);
        }
    }
    Ok(total / b)
}

/// Index of the largest value in each row; ties go to the lowest index.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let k = scores.last_dim();
    scores
        .data()
        .chunks(k.max(1))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
