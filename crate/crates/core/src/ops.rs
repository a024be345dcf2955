//! Forward and backward kernels for the closed set of differentiable
//! operations. Every kernel is a pure function over [`Array`]s; the
//! [`Tape`](crate::tape::Tape) and [`Eager`](crate::graph::Eager) evaluators
//! both dispatch here.

use crate::array::Array;
use crate::error::{Error, Result};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// out[m×n] += a[m×k] · b[k×n]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// out[k×n] += aᵀ · g where a is m×k and g is m×n.
fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], g: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

/// out[m×k] += g · bᵀ where g is m×n and b is k×n.
fn gemm_nt_acc(m: usize, k: usize, n: usize, g: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

fn require_same_shape(op: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

// ---------------------------------------------------------------- matmul

pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    let (m, k, n) = matmul_dims(a, b)?;
    let mut out = vec![0.0; m * n];
    gemm_acc(m, k, n, a.data(), b.data(), &mut out);
    Array::checked(vec![m, n], out, "matmul")
}

fn matmul_dims(a: &Array, b: &Array) -> Result<(usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => Ok((m, k, n)),
        (sa, sb) => Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
    }
}

pub fn matmul_backward(a: &Array, b: &Array, gy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    gemm_nt_acc(m, k, n, gy, b.data(), &mut ga);
    gemm_tn_acc(m, k, n, a.data(), gy, &mut gb);
    (ga, gb)
}

// ---------------------------------------------------------------- linear

/// Affine map over the last axis: `x · w + b`.
pub fn linear(x: &Array, w: &Array, b: Option<&Array>) -> Result<Array> {
    let (din, dout) = match w.shape() {
        &[i, o] => (i, o),
        s => return Err(Error::shape("linear", format!("weight must be 2-D, got {s:?}"))),
    };
    if x.ndim() == 0 || x.last_dim() != din {
        return Err(Error::shape(
            "linear",
            format!("input {:?} vs weight {:?}", x.shape(), w.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [dout] {
            return Err(Error::shape("linear", format!("bias {:?}, want [{dout}]", b.shape())));
        }
    }
    let rows = x.rows();
    let mut out = vec![0.0; rows * dout];
    if let Some(b) = b {
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(b.data());
        }
    }
    gemm_acc(rows, din, dout, x.data(), w.data(), &mut out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Array::checked(shape, out, "linear")
}

pub struct LinearGrads {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

pub fn linear_backward(x: &Array, w: &Array, gy: &[f64]) -> LinearGrads {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let rows = x.rows();
    let mut gx = vec![0.0; rows * din];
    let mut gw = vec![0.0; din * dout];
    let mut gb = vec![0.0; dout];
    gemm_nt_acc(rows, din, dout, gy, w.data(), &mut gx);
    gemm_tn_acc(rows, din, dout, x.data(), gy, &mut gw);
    for row in gy.chunks(dout) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    LinearGrads { x: gx, w: gw, b: gb }
}

// ---------------------------------------------------------------- elementwise

pub fn silu(x: &Array) -> Result<Array> {
    let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    Array::checked(x.shape().to_vec(), data, "silu")
}

pub fn silu_backward(x: &Array, gy: &[f64]) -> Vec<f64> {
    x.data()
        .iter()
        .zip(gy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * (s + v * s * (1.0 - s))
        })
        .collect()
}

/// `ln(1 + e^x)`, evaluated without overflow.
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus_scalar`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn softplus(x: &Array) -> Result<Array> {
    let data = x.data().iter().map(|&v| softplus_scalar(v)).collect();
    Array::checked(x.shape().to_vec(), data, "softplus")
}

pub fn softplus_backward(x: &Array, gy: &[f64]) -> Vec<f64> {
    x.data().iter().zip(gy).map(|(&v, &g)| g * sigmoid(v)).collect()
}

pub fn exp(x: &Array) -> Result<Array> {
    let data = x.data().iter().map(|v| v.exp()).collect();
    Array::checked(x.shape().to_vec(), data, "exp")
}

pub fn add(a: &Array, b: &Array) -> Result<Array> {
    require_same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Array::checked(a.shape().to_vec(), data, "add")
}

pub fn mul(a: &Array, b: &Array) -> Result<Array> {
    require_same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Array::checked(a.shape().to_vec(), data, "mul")
}

pub fn div(a: &Array, b: &Array) -> Result<Array> {
    require_same_shape("div", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
    Array::checked(a.shape().to_vec(), data, "div")
}

pub fn scale(a: &Array, s: f64) -> Result<Array> {
    let data = a.data().iter().map(|x| x * s).collect();
    Array::checked(a.shape().to_vec(), data, "scale")
}

pub fn add_scalar(a: &Array, s: f64) -> Result<Array> {
    let data = a.data().iter().map(|x| x + s).collect();
    Array::checked(a.shape().to_vec(), data, "add_scalar")
}

// ---------------------------------------------------------------- layer norm

fn layer_norm_check(x: &Array, gain: &Array, bias: &Array, eps: f64) -> Result<usize> {
    let c = x.last_dim();
    if x.ndim() == 0 || gain.shape() != [c] || bias.shape() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!("input {:?}, gain {:?}, bias {:?}", x.shape(), gain.shape(), bias.shape()),
        ));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("layer_norm eps must be >= 0, got {eps}")));
    }
    Ok(c)
}

/// Per-row mean and reciprocal standard deviation.
fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Normalizes each position over the channel (last) axis, then applies
/// `gain` and `bias`. Variance is the biased estimator.
pub fn layer_norm(x: &Array, gain: &Array, bias: &Array, eps: f64) -> Result<Array> {
    let c = layer_norm_check(x, gain, bias, eps)?;
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        let (mean, inv) = row_stats(row, eps);
        for j in 0..c {
            orow[j] = (row[j] - mean) * inv * gain.data()[j] + bias.data()[j];
        }
    }
    Array::checked(x.shape().to_vec(), out, "layer_norm")
}

pub struct LayerNormGrads {
    pub x: Vec<f64>,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn layer_norm_backward(x: &Array, gain: &Array, eps: f64, gy: &[f64]) -> LayerNormGrads {
    let c = x.last_dim();
    let mut gx = vec![0.0; x.len()];
    let mut ggain = vec![0.0; c];
    let mut gbias = vec![0.0; c];
    let mut xhat = vec![0.0; c];
    let mut gxhat = vec![0.0; c];
    for ((row, grow), gxrow) in x.data().chunks(c).zip(gy.chunks(c)).zip(gx.chunks_mut(c)) {
        let (mean, inv) = row_stats(row, eps);
        for j in 0..c {
            xhat[j] = (row[j] - mean) * inv;
            gxhat[j] = grow[j] * gain.data()[j];
            ggain[j] += grow[j] * xhat[j];
            gbias[j] += grow[j];
        }
        let mean_g = gxhat.iter().sum::<f64>() / c as f64;
        let mean_gx = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        for j in 0..c {
            gxrow[j] = inv * (gxhat[j] - mean_g - xhat[j] * mean_gx);
        }
    }
    LayerNormGrads {
        x: gx,
        gain: ggain,
        bias: gbias,
    }
}

// ---------------------------------------------------------------- depthwise conv

fn dwconv_dims(x: &Array, k: &Array) -> Result<(usize, usize, usize, usize)> {
    let (h, w, c) = match x.shape() {
        &[h, w, c] => (h, w, c),
        s => return Err(Error::shape("depthwise_conv2d", format!("input must be HxWxC, got {s:?}"))),
    };
    let ks = match k.shape() {
        &[kh, kw, kc] if kh == kw && kc == c => kh,
        s => {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("kernel {s:?} incompatible with input {:?}", x.shape()),
            ))
        }
    };
    if ks % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "depthwise kernel size must be odd, got {ks}"
        )));
    }
    Ok((h, w, c, ks))
}

/// Channel-wise 2-D cross-correlation with zero "same" padding.
pub fn depthwise_conv2d(x: &Array, k: &Array) -> Result<Array> {
    let (h, w, c, ks) = dwconv_dims(x, k)?;
    let pad = ks / 2;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; x.len()];
    for i in 0..h {
        for j in 0..w {
            let o = &mut out[(i * w + j) * c..(i * w + j + 1) * c];
            for di in 0..ks {
                let si = i + di;
                if si < pad || si - pad >= h {
                    continue;
                }
                let si = si - pad;
                for dj in 0..ks {
                    let sj = j + dj;
                    if sj < pad || sj - pad >= w {
                        continue;
                    }
                    let sj = sj - pad;
                    let xs = &xd[(si * w + sj) * c..(si * w + sj + 1) * c];
                    let kk = &kd[(di * ks + dj) * c..(di * ks + dj + 1) * c];
                    for ch in 0..c {
                        o[ch] += xs[ch] * kk[ch];
                    }
                }
            }
        }
    }
    Array::checked(x.shape().to_vec(), out, "depthwise_conv2d")
}

pub fn depthwise_conv2d_backward(x: &Array, k: &Array, gy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (h, w, c, ks) = (x.shape()[0], x.shape()[1], x.shape()[2], k.shape()[0]);
    let pad = ks / 2;
    let xd = x.data();
    let kd = k.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for i in 0..h {
        for j in 0..w {
            let g = &gy[(i * w + j) * c..(i * w + j + 1) * c];
            for di in 0..ks {
                let si = i + di;
                if si < pad || si - pad >= h {
                    continue;
                }
                let si = si - pad;
                for dj in 0..ks {
                    let sj = j + dj;
                    if sj < pad || sj - pad >= w {
                        continue;
                    }
                    let sj = sj - pad;
                    let base_x = (si * w + sj) * c;
                    let base_k = (di * ks + dj) * c;
                    for ch in 0..c {
                        gx[base_x + ch] += g[ch] * kd[base_k + ch];
                        gk[base_k + ch] += g[ch] * xd[base_x + ch];
                    }
                }
            }
        }
    }
    (gx, gk)
}

// ---------------------------------------------------------------- softmax

fn require_classes(op: &'static str, x: &Array) -> Result<usize> {
    if x.ndim() == 0 || x.last_dim() == 0 {
        return Err(Error::shape(op, format!("need a nonempty last axis, got {:?}", x.shape())));
    }
    Ok(x.last_dim())
}

/// Softmax along the last axis, with max subtraction.
pub fn softmax(x: &Array) -> Result<Array> {
    let k = require_classes("softmax", x)?;
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.data().chunks(k).zip(out.chunks_mut(k)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Array::checked(x.shape().to_vec(), out, "softmax")
}

pub fn softmax_backward(y: &Array, gy: &[f64]) -> Vec<f64> {
    let k = y.last_dim();
    let mut gx = vec![0.0; y.len()];
    for ((yr, gr), gxr) in y.data().chunks(k).zip(gy.chunks(k)).zip(gx.chunks_mut(k)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..k {
            gxr[j] = yr[j] * (gr[j] - dot);
        }
    }
    gx
}

pub fn log_softmax(x: &Array) -> Result<Array> {
    let k = require_classes("log_softmax", x)?;
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.data().chunks(k).zip(out.chunks_mut(k)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    Array::checked(x.shape().to_vec(), out, "log_softmax")
}

pub fn log_softmax_backward(y: &Array, gy: &[f64]) -> Vec<f64> {
    let k = y.last_dim();
    let mut gx = vec![0.0; y.len()];
    for ((yr, gr), gxr) in y.data().chunks(k).zip(gy.chunks(k)).zip(gx.chunks_mut(k)) {
        let total: f64 = gr.iter().sum();
        for j in 0..k {
            gxr[j] = gr[j] - yr[j].exp() * total;
        }
    }
    gx
}

// ---------------------------------------------------------------- structural

/// `out[i] = x[index[i]]`, reshaped to `shape`.
pub fn gather(x: &Array, shape: &[usize], index: &[usize]) -> Result<Array> {
    let len: usize = shape.iter().product();
    if len != index.len() {
        return Err(Error::shape(
            "gather",
            format!("shape {shape:?} needs {len} indices, got {}", index.len()),
        ));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(len);
    for &i in index {
        match src.get(i) {
            Some(&v) => out.push(v),
            None => {
                return Err(Error::shape(
                    "gather",
                    format!("index {i} out of range for {} values", src.len()),
                ))
            }
        }
    }
    Array::checked(shape.to_vec(), out, "gather")
}

pub fn gather_backward(src_len: usize, index: &[usize], gy: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; src_len];
    for (&i, &g) in index.iter().zip(gy) {
        gx[i] += g;
    }
    gx
}

pub fn concat_last(a: &Array, b: &Array) -> Result<Array> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return Err(Error::shape("concat_last", format!("{sa:?} vs {sb:?}")));
    }
    let (la, lb) = (a.last_dim(), b.last_dim());
    let rows = a.rows().max(b.rows());
    let mut out = Vec::with_capacity(a.len() + b.len());
    for r in 0..rows {
        out.extend_from_slice(&a.data()[r * la..(r + 1) * la]);
        out.extend_from_slice(&b.data()[r * lb..(r + 1) * lb]);
    }
    let mut shape = sa.to_vec();
    *shape.last_mut().unwrap() = la + lb;
    Array::checked(shape, out, "concat_last")
}

pub fn slice_last(x: &Array, start: usize, len: usize) -> Result<Array> {
    let c = x.last_dim();
    if x.ndim() == 0 || start + len > c {
        return Err(Error::shape(
            "slice_last",
            format!("[{start}, {}) of {:?}", start + len, x.shape()),
        ));
    }
    let mut out = Vec::with_capacity(x.rows() * len);
    for row in x.data().chunks(c) {
        out.extend_from_slice(&row[start..start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Array::checked(shape, out, "slice_last")
}

pub fn sum(x: &Array) -> Result<Array> {
    Array::checked(vec![], vec![x.data().iter().sum()], "sum")
}

/// Sums over every axis except the last: `[..., K] -> [K]`.
pub fn sum_leading(x: &Array) -> Result<Array> {
    if x.ndim() == 0 {
        return Err(Error::shape("sum_leading", "scalar input"));
    }
    let k = x.last_dim();
    let mut out = vec![0.0; k];
    for row in x.data().chunks(k) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Array::checked(vec![k], out, "sum_leading")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> Array {
        Array::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = Array::from_fn(&[3, 3], |i| i as f64 * 0.5 - 1.0).unwrap();
        assert_eq!(matmul(&Array::identity(3), &m).unwrap(), m);
        let a = arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = arr(&[2, 1], &[0.0, 1.0]);
        assert_eq!(matmul(&a, &b).unwrap(), arr(&[2, 1], &[2.0, 4.0]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Array::zeros(&[2, 3]);
        let b = Array::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn silu_values() {
        let y = silu(&arr(&[2], &[0.0, 40.0])).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 40.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Array::full(&[2, 5], 3.25).unwrap();
        let y = layer_norm(&x, &Array::full(&[5], 1.0).unwrap(), &Array::zeros(&[5]), DEFAULT_LN_EPS)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rejects_channel_mismatch() {
        let x = Array::zeros(&[2, 5]);
        let g = Array::zeros(&[4]);
        assert!(layer_norm(&x, &g, &g, 1e-5).is_err());
    }

    #[test]
    fn linear_hand_case() {
        let y = linear(
            &arr(&[2], &[3.0, 4.0]),
            &arr(&[2, 1], &[1.0, 1.0]),
            Some(&arr(&[1], &[0.0])),
        )
        .unwrap();
        assert_eq!(y, arr(&[1], &[7.0]));
    }

    #[test]
    fn depthwise_even_kernel_rejected() {
        let x = Array::zeros(&[4, 4, 1]);
        let k = Array::zeros(&[2, 2, 1]);
        assert!(matches!(depthwise_conv2d(&x, &k), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn depthwise_ones_counts_neighbours() {
        let x = Array::full(&[5, 5, 1], 1.0).unwrap();
        let k = Array::full(&[3, 3, 1], 1.0).unwrap();
        let y = depthwise_conv2d(&x, &k).unwrap();
        assert_eq!(y.get(&[2, 2, 0]), 9.0);
        assert_eq!(y.get(&[0, 0, 0]), 4.0);
        assert_eq!(y.get(&[4, 4, 0]), 4.0);
        assert_eq!(y.get(&[0, 2, 0]), 6.0);
    }

    #[test]
    fn softmax_uniform() {
        let y = softmax(&Array::zeros(&[3])).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [1e-3, 0.01, 0.1, 1.0, 5.0] {
            assert!((softplus_scalar(softplus_inverse(y)) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_out_of_range() {
        let x = Array::zeros(&[3]);
        assert!(gather(&x, &[1], &[3]).is_err());
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = Array::from_fn(&[2, 2], |i| i as f64).unwrap();
        let b = Array::from_fn(&[2, 3], |i| 10.0 + i as f64).unwrap();
        let c = concat_last(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(slice_last(&c, 0, 2).unwrap(), a);
        assert_eq!(slice_last(&c, 2, 3).unwrap(), b);
    }
}
