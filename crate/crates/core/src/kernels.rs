//! Forward and backward kernels on plain tensors.
//!
//! The tape in [`crate::autodiff`] records calls into these functions and
//! replays the matching `*_backward` during reverse accumulation. They are
//! also usable directly for inference.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon added to the variance in [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `a[n,k] · b[k,m]` into `out[n,m]` (accumulating).
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a[n,k] · b[m,k]ᵀ` into `out[n,m]` (accumulating).
pub(crate) fn gemm_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// `a[k,n]ᵀ · b[k,m]` into `out[n,m]` (accumulating).
pub(crate) fn gemm_at_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize, m: usize) {
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `(b, h, w, cin, kh, kw, cout)` for a valid conv2d pairing.
type ConvDims = (usize, usize, usize, usize, usize, usize, usize);

fn conv_dims(input: &Tensor, filters: &Tensor) -> Result<ConvDims> {
    let (b, h, w, cin) = input.dims4()?;
    let (kh, kw, fcin, cout) = match filters.shape() {
        [kh, kw, ci, co] => (*kh, *kw, *ci, *co),
        _ => {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: input.shape().to_vec(),
                rhs: filters.shape().to_vec(),
            })
        }
    };
    if fcin != cin || kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: filters.shape().to_vec(),
        });
    }
    Ok((b, h, w, cin, kh, kw, cout))
}

/// Output columns `xx` whose source column `xx + kx − pad` lies inside `0..w`.
fn valid_cols(kx: usize, pad: usize, w: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(w);
    lo..hi.max(lo)
}

/// Patch matrix `[kh·kw·cin, b·h·w]`: row `(ky·kw + kx)·cin + ci` holds the
/// zero-padded input channel `ci` shifted by `(ky − kh/2, kx − kw/2)`.
fn im2col_t(x: &[f64], d: ConvDims) -> Vec<f64> {
    let (b, h, w, cin, kh, kw, _) = d;
    let (ph, pw) = (kh / 2, kw / 2);
    let p = b * h * w;
    let mut cols = vec![0.0; kh * kw * cin * p];
    for ky in 0..kh {
        for kx in 0..kw {
            let xs = valid_cols(kx, pw, w);
            if xs.is_empty() {
                continue;
            }
            for ci in 0..cin {
                let row = &mut cols[((ky * kw + kx) * cin + ci) * p..][..p];
                for bi in 0..b {
                    for y in valid_cols(ky, ph, h) {
                        let iy = y + ky - ph;
                        let out = &mut row[(bi * h + y) * w..][..w];
                        let src = &x[((bi * h + iy) * w + xs.start + kx - pw) * cin + ci..];
                        for (o, v) in out[xs.clone()].iter_mut().zip(src.iter().step_by(cin)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_t`]: scatters patch gradients back onto the input.
fn col2im_t(cols: &[f64], d: ConvDims, gx: &mut [f64]) {
    let (b, h, w, cin, kh, kw, _) = d;
    let (ph, pw) = (kh / 2, kw / 2);
    let p = b * h * w;
    for ky in 0..kh {
        for kx in 0..kw {
            let xs = valid_cols(kx, pw, w);
            if xs.is_empty() {
                continue;
            }
            for ci in 0..cin {
                let row = &cols[((ky * kw + kx) * cin + ci) * p..][..p];
                for bi in 0..b {
                    for y in valid_cols(ky, ph, h) {
                        let iy = y + ky - ph;
                        let src = &row[(bi * h + y) * w..][..w];
                        let dst = &mut gx[((bi * h + iy) * w + xs.start + kx - pw) * cin + ci..];
                        for (g, v) in dst.iter_mut().step_by(cin).zip(&src[xs.clone()]) {
                            *g += *v;
                        }
                    }
                }
            }
        }
    }
}

/// `[rows, cols]` → `[cols, rows]`.
fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Same-padded, stride-1 convolution of a BHWC input with `[kh, kw, cin, cout]`
/// filters. Kernel extents must be odd (1 and 3 in practice).
pub fn conv2d(input: &Tensor, filters: &Tensor) -> Result<Tensor> {
    let d = conv_dims(input, filters)?;
    let (b, h, w, cin, kh, kw, cout) = d;
    let p = b * h * w;
    let k = kh * kw * cin;
    let mut out_t = vec![0.0; cout * p];
    if kh == 1 && kw == 1 {
        let x_t = transpose(input.data(), p, cin);
        gemm_at_acc(filters.data(), &x_t, &mut out_t, k, cout, p);
    } else {
        let cols = im2col_t(input.data(), d);
        gemm_at_acc(filters.data(), &cols, &mut out_t, k, cout, p);
    }
    Ok(Tensor::from_parts(vec![b, h, w, cout], transpose(&out_t, cout, p)))
}

/// Gradients of [`conv2d`] with respect to input and filters. Either may be
/// skipped.
pub fn conv2d_backward(
    input: &Tensor,
    filters: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
    want_filters: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let d = conv_dims(input, filters).expect("conv2d_backward on shapes accepted by forward");
    let (b, h, w, cin, kh, kw, cout) = d;
    let p = b * h * w;
    let k = kh * kw * cin;
    let g_t = transpose(grad_out.data(), p, cout);
    let gf = want_filters.then(|| {
        let cols = if kh == 1 && kw == 1 {
            transpose(input.data(), p, cin)
        } else {
            im2col_t(input.data(), d)
        };
        let mut gf = vec![0.0; k * cout];
        gemm_bt_acc(&cols, &g_t, &mut gf, k, p, cout);
        Tensor::from_parts(filters.shape().to_vec(), gf)
    });
    let gx = want_input.then(|| {
        let mut gcols = vec![0.0; k * p];
        gemm_acc(filters.data(), &g_t, &mut gcols, k, cout, p);
        let gx = if kh == 1 && kw == 1 {
            transpose(&gcols, cin, p)
        } else {
            let mut gx = vec![0.0; input.len()];
            col2im_t(&gcols, d, &mut gx);
            gx
        };
        Tensor::from_parts(input.shape().to_vec(), gx)
    });
    (gx, gf)
}

/// Cached statistics from a [`layer_norm`] forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Normalizes each position over the last (channel) axis, then applies a
/// per-channel gain and bias.
pub fn layer_norm(input: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let c = input.channels();
    if c == 0 || input.rank() == 0 {
        return Err(Error::InvalidShape {
            op: "layer_norm",
            detail: "zero-size channel axis".into(),
        });
    }
    if gain.len() != c || bias.len() != c {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: input.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let rows = input.len() / c;
    let x = input.data();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for j in 0..c {
            let n = (row[j] - mean) * is;
            xhat[r * c + j] = n;
            out[r * c + j] = gain.data()[j] * n + bias.data()[j];
        }
    }
    let shape = input.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), out),
        LayerNormCache {
            normalized: Tensor::from_parts(shape, xhat),
            inv_std,
        },
    ))
}

/// Returns `(d_input, d_gain, d_bias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = gain.len();
    let rows = grad_out.len() / c;
    let g = grad_out.data();
    let xhat = cache.normalized.data();
    let mut gx = vec![0.0; g.len()];
    let mut ggain = vec![0.0; c];
    let mut gbias = vec![0.0; c];
    for r in 0..rows {
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..c {
            let i = r * c + j;
            ggain[j] += g[i] * xhat[i];
            gbias[j] += g[i];
            let d = g[i] * gain.data()[j];
            mean_d += d;
            mean_dx += d * xhat[i];
        }
        mean_d /= c as f64;
        mean_dx /= c as f64;
        let is = cache.inv_std[r];
        for j in 0..c {
            let i = r * c + j;
            let d = g[i] * gain.data()[j];
            gx[i] = is * (d - mean_d - xhat[i] * mean_dx);
        }
    }
    (
        Tensor::from_parts(grad_out.shape().to_vec(), gx),
        Tensor::from_parts(gain.shape().to_vec(), ggain),
        Tensor::from_parts(gain.shape().to_vec(), gbias),
    )
}

/// Projection weights for [`multi_head_self_attention`]. Query, key and value
/// map the input width to the model width; the output projection is square.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'a> {
    pub query: &'a Tensor,
    pub key: &'a Tensor,
    pub value: &'a Tensor,
    pub output: &'a Tensor,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Softmax weights, laid out `[b, head, query, key]`.
    pub attn: Vec<f64>,
    /// Concatenated head outputs before the output projection, `[b, t, dm]`.
    pub heads_out: Vec<f64>,
    pub heads: usize,
}

impl AttentionCache {
    /// Attention matrix of batch item `b`, head `h`, as `t×t` rows.
    pub fn matrix(&self, b: usize, h: usize, t: usize) -> &[f64] {
        let o = (b * self.heads + h) * t * t;
        &self.attn[o..o + t * t]
    }
}

fn attention_dims(input: &Tensor, w: &AttentionWeights, heads: usize) -> Result<(usize, usize, usize, usize)> {
    let (b, t, din) = match input.shape() {
        [b, t, d] => (*b, *t, *d),
        s => {
            return Err(Error::InvalidShape {
                op: "multi_head_self_attention",
                detail: format!("expected B×T×D input, got {s:?}"),
            })
        }
    };
    let dm = w.query.shape().get(1).copied().unwrap_or(0);
    for p in [w.query, w.key, w.value] {
        if p.shape() != [din, dm] {
            return Err(Error::Shape {
                op: "multi_head_self_attention",
                lhs: input.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    if w.output.shape() != [dm, dm] {
        return Err(Error::Shape {
            op: "multi_head_self_attention",
            lhs: vec![dm, dm],
            rhs: w.output.shape().to_vec(),
        });
    }
    if heads == 0 || dm % heads != 0 {
        return Err(Error::InvalidShape {
            op: "multi_head_self_attention",
            detail: format!("model width {dm} not divisible by {heads} heads"),
        });
    }
    Ok((b, t, din, dm))
}

/// Scaled dot-product self-attention over `B×T×Din`, split into `heads`
/// heads of width `Dm/heads`, concatenated and output-projected to `B×T×Dm`.
/// No positional information is added.
pub fn multi_head_self_attention(
    input: &Tensor,
    w: AttentionWeights,
    heads: usize,
) -> Result<(Tensor, AttentionCache)> {
    let (b, t, din, dm) = attention_dims(input, &w, heads)?;
    let dh = dm / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let x = input.data();
    let mut q = vec![0.0; b * t * dm];
    let mut k = vec![0.0; b * t * dm];
    let mut v = vec![0.0; b * t * dm];
    gemm_acc(x, w.query.data(), &mut q, b * t, din, dm);
    gemm_acc(x, w.key.data(), &mut k, b * t, din, dm);
    gemm_acc(x, w.value.data(), &mut v, b * t, din, dm);

    let mut attn = vec![0.0; b * heads * t * t];
    let mut heads_out = vec![0.0; b * t * dm];
    for bi in 0..b {
        for hd in 0..heads {
            let a0 = (bi * heads + hd) * t * t;
            for i in 0..t {
                let qi = &q[(bi * t + i) * dm + hd * dh..(bi * t + i) * dm + (hd + 1) * dh];
                let row = &mut attn[a0 + i * t..a0 + (i + 1) * t];
                let mut max = f64::NEG_INFINITY;
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k[(bi * t + j) * dm + hd * dh..(bi * t + j) * dm + (hd + 1) * dh];
                    *r = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    max = max.max(*r);
                }
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    z += *r;
                }
                for r in row.iter_mut() {
                    *r /= z;
                }
                let out = &mut heads_out[(bi * t + i) * dm + hd * dh..(bi * t + i) * dm + (hd + 1) * dh];
                for (j, &a) in row.iter().enumerate() {
                    let vj = &v[(bi * t + j) * dm + hd * dh..(bi * t + j) * dm + (hd + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += a * vv;
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; b * t * dm];
    gemm_acc(&heads_out, w.output.data(), &mut out, b * t, dm, dm);
    Ok((
        Tensor::from_parts(vec![b, t, dm], out),
        AttentionCache {
            q,
            k,
            v,
            attn,
            heads_out,
            heads,
        },
    ))
}

/// Gradients of [`multi_head_self_attention`]: `(d_input, [d_query, d_key, d_value, d_output])`.
pub fn multi_head_self_attention_backward(
    input: &Tensor,
    w: AttentionWeights,
    cache: &AttentionCache,
    grad_out: &Tensor,
) -> (Tensor, [Tensor; 4]) {
    let (b, t, din, dm) =
        attention_dims(input, &w, cache.heads).expect("backward on shapes accepted by forward");
    let heads = cache.heads;
    let dh = dm / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let g = grad_out.data();
    let x = input.data();

    let mut g_wo = vec![0.0; dm * dm];
    gemm_at_acc(&cache.heads_out, g, &mut g_wo, b * t, dm, dm);
    let mut g_heads = vec![0.0; b * t * dm];
    gemm_bt_acc(g, w.output.data(), &mut g_heads, b * t, dm, dm);

    let mut gq = vec![0.0; b * t * dm];
    let mut gk = vec![0.0; b * t * dm];
    let mut gv = vec![0.0; b * t * dm];
    let mut ga = vec![0.0; t];
    for bi in 0..b {
        for hd in 0..heads {
            let a0 = (bi * heads + hd) * t * t;
            let sl = |i: usize| (bi * t + i) * dm + hd * dh..(bi * t + i) * dm + (hd + 1) * dh;
            for i in 0..t {
                let row = &cache.attn[a0 + i * t..a0 + (i + 1) * t];
                let go = &g_heads[sl(i)];
                let mut dot = 0.0;
                for j in 0..t {
                    let vj = &cache.v[sl(j)];
                    ga[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                    dot += ga[j] * row[j];
                    let gvj = &mut gv[sl(j)];
                    for (o, &gg) in gvj.iter_mut().zip(go) {
                        *o += row[j] * gg;
                    }
                }
                for j in 0..t {
                    let ds = row[j] * (ga[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for (o, kv) in gq[sl(i)].iter_mut().zip(&cache.k[sl(j)]) {
                        *o += ds * kv;
                    }
                    for (o, qv) in gk[sl(j)].iter_mut().zip(&cache.q[sl(i)]) {
                        *o += ds * qv;
                    }
                }
            }
        }
    }
    let mut gx = vec![0.0; b * t * din];
    gemm_bt_acc(&gq, w.query.data(), &mut gx, b * t, dm, din);
    gemm_bt_acc(&gk, w.key.data(), &mut gx, b * t, dm, din);
    gemm_bt_acc(&gv, w.value.data(), &mut gx, b * t, dm, din);
    let mut g_wq = vec![0.0; din * dm];
    let mut g_wk = vec![0.0; din * dm];
    let mut g_wv = vec![0.0; din * dm];
    gemm_at_acc(x, &gq, &mut g_wq, b * t, din, dm);
    gemm_at_acc(x, &gk, &mut g_wk, b * t, din, dm);
    gemm_at_acc(x, &gv, &mut g_wv, b * t, din, dm);
    (
        Tensor::from_parts(input.shape().to_vec(), gx),
        [
            Tensor::from_parts(vec![din, dm], g_wq),
            Tensor::from_parts(vec![din, dm], g_wk),
            Tensor::from_parts(vec![din, dm], g_wv),
            Tensor::from_parts(vec![dm, dm], g_wo),
        ],
    )
}

/// 2×2 sub-pixel rearrangement: `B×H×W×C → B×H/2×W/2×4C`.
///
/// Output channel `s·C + c` holds input channel `c` of sub-pixel `s`, with
/// sub-pixels ordered top-left, top-right, bottom-left, bottom-right.
pub fn squeeze2(input: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "squeeze",
            detail: format!("spatial dims {h}×{w} must be even"),
        });
    }
    let (h2, w2) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for y in 0..h2 {
            for xx in 0..w2 {
                let o0 = ((bi * h2 + y) * w2 + xx) * 4 * c;
                for s in 0..4 {
                    let (dy, dx) = (s / 2, s % 2);
                    let i0 = ((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                    out[o0 + s * c..o0 + (s + 1) * c].copy_from_slice(&x[i0..i0 + c]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, h2, w2, 4 * c], out))
}

/// Exact inverse of [`squeeze2`].
pub fn unsqueeze2(input: &Tensor) -> Result<Tensor> {
    let (b, h2, w2, c4) = input.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::InvalidShape {
            op: "unsqueeze",
            detail: format!("channel count {c4} not divisible by 4"),
        });
    }
    let c = c4 / 4;
    let (h, w) = (h2 * 2, w2 * 2);
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for y in 0..h2 {
            for xx in 0..w2 {
                let i0 = ((bi * h2 + y) * w2 + xx) * c4;
                for s in 0..4 {
                    let (dy, dx) = (s / 2, s % 2);
                    let o0 = ((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                    out[o0..o0 + c].copy_from_slice(&x[i0 + s * c..i0 + (s + 1) * c]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, h, w, c], out))
}

/// `y[p, o] = Σ_i W[o, i] · x[p, i]` for every position `p` (a 1×1 convolution
/// by the square matrix `W`).
pub fn channel_mix(input: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let c = input.channels();
    if weight.shape() != [c, c] {
        return Err(Error::Shape {
            op: "channel_mix",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let rows = input.len() / c;
    let mut out = vec![0.0; input.len()];
    gemm_bt_acc(input.data(), weight.data(), &mut out, rows, c, c);
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

/// 2×2 max pooling with stride 2; also returns the flat argmax indices.
pub fn max_pool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (b, h, w, c) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "max_pool2",
            detail: format!("spatial dims {h}×{w} must be even"),
        });
    }
    let (h2, w2) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0; b * h2 * w2 * c];
    let mut arg = vec![0usize; out.len()];
    for bi in 0..b {
        for y in 0..h2 {
            for xx in 0..w2 {
                for ch in 0..c {
                    let o = ((bi * h2 + y) * w2 + xx) * c + ch;
                    let mut best = f64::NEG_INFINITY;
                    let mut bi_idx = 0;
                    for s in 0..4 {
                        let i = ((bi * h + 2 * y + s / 2) * w + 2 * xx + s % 2) * c + ch;
                        if x[i] > best {
                            best = x[i];
                            bi_idx = i;
                        }
                    }
                    out[o] = best;
                    arg[o] = bi_idx;
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![b, h2, w2, c], out), arg))
}

/// Row-wise softmax of `[n, k]` logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.channels();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::from_parts(logits.shape().to_vec(), out)
}
