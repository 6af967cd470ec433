//! Forward kernels. Each is a pure function of its inputs; the tape wraps
//! them with backward rules.

use super::Tensor;
use crate::error::{Error, Result};

/// Minimum norm accepted by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::dim(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Causal dilated 1-D convolution with left zero-padding of `(K-1)*dilation`.
///
/// `input` is `[C_in x L]`, `weights` is `[C_out x C_in x K]`, `bias` is
/// `[C_out]`. Kernel tap `k` reads `input[:, t - (K-1-k)*dilation]`, so the
/// last tap sits on the current step.
pub fn conv1d_causal(input: &Tensor, weights: &Tensor, bias: &Tensor, dilation: usize) -> Result<Tensor> {
    let (c_in, len, c_out, k) = conv_dims(input, weights, bias, dilation)?;
    let x = input.data();
    let w = weights.data();
    let mut out = vec![0.0; c_out * len];
    for co in 0..c_out {
        let row = &mut out[co * len..(co + 1) * len];
        row.fill(bias.data()[co]);
        for ci in 0..c_in {
            let xrow = &x[ci * len..(ci + 1) * len];
            for tap in 0..k {
                let wv = w[(co * c_in + ci) * k + tap];
                let offset = (k - 1 - tap) * dilation;
                if offset >= len || wv == 0.0 {
                    continue;
                }
                for (o, xv) in row[offset..].iter_mut().zip(&xrow[..len - offset]) {
                    *o += wv * xv;
                }
            }
        }
    }
    Tensor::new(vec![c_out, len], out)
}

pub(crate) fn conv_dims(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    dilation: usize,
) -> Result<(usize, usize, usize, usize)> {
    expect_rank(input, 2, "conv1d input")?;
    expect_rank(weights, 3, "conv1d weights")?;
    expect_rank(bias, 1, "conv1d bias")?;
    if dilation == 0 {
        return Err(Error::param("conv1d dilation must be >= 1"));
    }
    let (c_in, len) = (input.shape()[0], input.shape()[1]);
    let (c_out, w_in, k) = (weights.shape()[0], weights.shape()[1], weights.shape()[2]);
    if len == 0 || k == 0 {
        return Err(Error::param("conv1d needs L >= 1 and K >= 1"));
    }
    if w_in != c_in {
        return Err(Error::dim(format!(
            "conv1d weights expect {w_in} input channels, input has {c_in}"
        )));
    }
    if bias.shape()[0] != c_out {
        return Err(Error::dim(format!(
            "conv1d bias has {} entries for {c_out} output channels",
            bias.shape()[0]
        )));
    }
    Ok((c_in, len, c_out, k))
}

/// Affine map along the trailing dimension: `y = x W^T + b`.
pub fn linear(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, d_in, d_out) = linear_dims(input, weights, bias)?;
    let x = input.data();
    let w = weights.data();
    let b = bias.data();
    let mut out = Vec::with_capacity(rows * d_out);
    for r in 0..rows {
        let xr = &x[r * d_in..(r + 1) * d_in];
        for o in 0..d_out {
            let wr = &w[o * d_in..(o + 1) * d_in];
            out.push(b[o] + xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>());
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank checked") = d_out;
    Tensor::new(shape, out)
}

pub(crate) fn linear_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    expect_rank(weights, 2, "linear weights")?;
    expect_rank(bias, 1, "linear bias")?;
    if input.ndim() == 0 {
        return Err(Error::dim("linear input must have rank >= 1"));
    }
    let (d_out, d_in) = (weights.shape()[0], weights.shape()[1]);
    let (rows, last) = input.rows_and_last();
    if last != d_in {
        return Err(Error::dim(format!(
            "linear expects trailing dimension {d_in}, input shape is {:?}",
            input.shape()
        )));
    }
    if bias.shape()[0] != d_out {
        return Err(Error::dim(format!(
            "linear bias has {} entries for {d_out} outputs",
            bias.shape()[0]
        )));
    }
    Ok((rows, d_in, d_out))
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Bin boundaries `[start, end)` for pooling `len` samples with a window.
pub(crate) fn window_bins(len: usize, window: usize) -> Vec<(usize, usize)> {
    (0..len.div_ceil(window))
        .map(|i| (i * window, ((i + 1) * window).min(len)))
        .collect()
}

/// Bin boundaries splitting `len` samples into exactly `out_len` bins.
pub(crate) fn adaptive_bins(len: usize, out_len: usize) -> Vec<(usize, usize)> {
    (0..out_len)
        .map(|i| ((i * len) / out_len, ((i + 1) * len).div_ceil(out_len)))
        .collect()
}

fn pool_with_bins(input: &Tensor, bins: &[(usize, usize)]) -> Result<Tensor> {
    let (rows, len) = input.rows_and_last();
    let x = input.data();
    let mut out = Vec::with_capacity(rows * bins.len());
    for r in 0..rows {
        let xr = &x[r * len..(r + 1) * len];
        for &(s, e) in bins {
            out.push(xr[s..e].iter().sum::<f64>() / (e - s) as f64);
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank checked") = bins.len();
    Tensor::new(shape, out)
}

/// Non-overlapping mean pooling along the last axis. A final partial window
/// is averaged over the samples it actually holds.
pub fn mean_pool(input: &Tensor, window: usize) -> Result<Tensor> {
    if window == 0 {
        return Err(Error::param("mean_pool window must be >= 1"));
    }
    if input.ndim() == 0 || input.shape().last() == Some(&0) {
        return Err(Error::dim("mean_pool needs a non-empty last axis"));
    }
    pool_with_bins(input, &window_bins(input.rows_and_last().1, window))
}

/// Mean pooling along the last axis to exactly `out_len` bins (bins may
/// overlap by one sample when the length is not a multiple).
pub fn adaptive_mean_pool(input: &Tensor, out_len: usize) -> Result<Tensor> {
    let len = input.rows_and_last().1;
    if out_len == 0 || out_len > len {
        return Err(Error::param(format!(
            "adaptive pool target {out_len} must lie in 1..={len}"
        )));
    }
    pool_with_bins(input, &adaptive_bins(len, out_len))
}

pub(crate) fn concat_dims(shapes: &[&[usize]], axis: usize) -> Result<Vec<usize>> {
    let first = shapes.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
    if axis >= first.len() {
        return Err(Error::dim(format!(
            "concat axis {axis} out of range for rank {}",
            first.len()
        )));
    }
    let mut out = first.to_vec();
    out[axis] = 0;
    for s in shapes {
        let compatible = s.len() == first.len()
            && s.iter()
                .zip(first.iter())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::dim(format!(
                "cannot concat shape {s:?} with {first:?} along axis {axis}"
            )));
        }
        out[axis] += s[axis];
    }
    Ok(out)
}

/// Concatenate along `axis`, preserving order.
pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
    let shapes: Vec<&[usize]> = tensors.iter().map(|t| t.shape()).collect();
    let shape = concat_dims(&shapes, axis)?;
    let outer: usize = shape[..axis].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in tensors {
            let chunk: usize = t.shape()[axis..].iter().product();
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, data)
}

/// Scale each row (along the last axis) to unit L2 norm.
pub fn l2_normalize(input: &Tensor) -> Result<Tensor> {
    let (rows, d) = input.rows_and_last();
    let x = input.data();
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > NORM_EPS) {
            return Err(Error::Degenerate(format!(
                "row {r} has norm {norm:e}, cannot normalize"
            )));
        }
        out.extend(xr.iter().map(|v| v / norm));
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Rearrange `[C x L]` into `[C*P x T]` with `T = floor(L/P)`: feature row
/// `c*P + p` at token `t` holds `input[c, t*P + p]`. The trailing remainder
/// shorter than `P` is dropped.
pub fn patch(input: &Tensor, patch_len: usize) -> Result<Tensor> {
    expect_rank(input, 2, "patch input")?;
    let (c, len) = (input.shape()[0], input.shape()[1]);
    if patch_len == 0 || len < patch_len {
        return Err(Error::param(format!("patch length {patch_len} must lie in 1..={len}")));
    }
    let tokens = len / patch_len;
    let x = input.data();
    let mut out = vec![0.0; c * patch_len * tokens];
    for ch in 0..c {
        for p in 0..patch_len {
            let row = (ch * patch_len + p) * tokens;
            for t in 0..tokens {
                out[row + t] = x[ch * len + t * patch_len + p];
            }
        }
    }
    Tensor::new(vec![c * patch_len, tokens], out)
}

/// `a b^T` for `a: [N x D]`, `b: [M x D]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul lhs")?;
    expect_rank(b, 2, "matmul rhs")?;
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let (m, d2) = (b.shape()[0], b.shape()[1]);
    if d != d2 {
        return Err(Error::dim(format!("matmul inner dimensions differ: {d} vs {d2}")));
    }
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ar = &a.data()[i * d..(i + 1) * d];
        for j in 0..m {
            let br = &b.data()[j * d..(j + 1) * d];
            out.push(ar.iter().zip(br).map(|(x, y)| x * y).sum());
        }
    }
    Tensor::new(vec![n, m], out)
}
