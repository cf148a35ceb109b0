//! Primitive layers with explicit forward/backward pairs.
//!
//! Activations are flat `Vec<f64>` in channel-major layout: entry `(c, t)`
//! of a `channels x len` map lives at `x[c * len + t]`. Convolution weights
//! are `[cout, cin, k]` flattened the same way; linear weights `[out, in]`.
//! Backward functions accumulate into caller-provided weight-gradient
//! buffers and return the input gradient.

/// Zero-pad each channel of `x` by `pad` on both sides.
fn pad_channels(x: &[f64], channels: usize, len: usize, pad: usize) -> Vec<f64> {
    let plen = len + 2 * pad;
    let mut out = vec![0.0; channels * plen];
    for c in 0..channels {
        out[c * plen + pad..c * plen + pad + len].copy_from_slice(&x[c * len..(c + 1) * len]);
    }
    out
}

/// 1-D convolution with odd kernel `k`, padding `(k-1)/2`, and the given
/// stride. Output length is `len / stride` (callers keep `len` divisible).
pub fn conv1d_forward(
    x: &[f64],
    cin: usize,
    len: usize,
    w: &[f64],
    b: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
) -> Vec<f64> {
    debug_assert_eq!(x.len(), cin * len);
    debug_assert_eq!(w.len(), cout * cin * k);
    debug_assert_eq!(b.len(), cout);
    debug_assert!(k % 2 == 1 && len % stride == 0);
    let pad = (k - 1) / 2;
    let plen = len + 2 * pad;
    let out_len = len / stride;
    let xp = pad_channels(x, cin, len, pad);
    let mut y = vec![0.0; cout * out_len];
    for co in 0..cout {
        let yrow = &mut y[co * out_len..(co + 1) * out_len];
        yrow.fill(b[co]);
        for ci in 0..cin {
            let xrow = &xp[ci * plen..(ci + 1) * plen];
            for kk in 0..k {
                let wv = w[co * cin * k + ci * k + kk];
                if stride == 1 {
                    let src = &xrow[kk..kk + out_len];
                    for t in 0..out_len {
                        yrow[t] += wv * src[t];
                    }
                } else {
                    for t in 0..out_len {
                        yrow[t] += wv * xrow[t * stride + kk];
                    }
                }
            }
        }
    }
    y
}

/// Backward of [`conv1d_forward`]. Accumulates into `dw`/`db`, returns `dx`.
pub fn conv1d_backward(
    d_out: &[f64],
    x: &[f64],
    cin: usize,
    len: usize,
    w: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let plen = len + 2 * pad;
    let out_len = len / stride;
    debug_assert_eq!(d_out.len(), cout * out_len);
    debug_assert_eq!(dw.len(), cout * cin * k);
    debug_assert_eq!(db.len(), cout);
    let xp = pad_channels(x, cin, len, pad);
    let mut dxp = vec![0.0; cin * plen];
    for co in 0..cout {
        let dyrow = &d_out[co * out_len..(co + 1) * out_len];
        db[co] += dyrow.iter().sum::<f64>();
        for ci in 0..cin {
            let xrow = &xp[ci * plen..(ci + 1) * plen];
            let dxrow = &mut dxp[ci * plen..(ci + 1) * plen];
            for kk in 0..k {
                let widx = co * cin * k + ci * k + kk;
                let wv = w[widx];
                if stride == 1 {
                    let mut acc = 0.0;
                    let src = &xrow[kk..kk + out_len];
                    for t in 0..out_len {
                        acc += dyrow[t] * src[t];
                    }
                    dw[widx] += acc;
                    let dst = &mut dxrow[kk..kk + out_len];
                    for t in 0..out_len {
                        dst[t] += wv * dyrow[t];
                    }
                } else {
                    let mut acc = 0.0;
                    for t in 0..out_len {
                        acc += dyrow[t] * xrow[t * stride + kk];
                        dxrow[t * stride + kk] += wv * dyrow[t];
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    // Unpad.
    let mut dx = vec![0.0; cin * len];
    for ci in 0..cin {
        dx[ci * len..(ci + 1) * len]
            .copy_from_slice(&dxp[ci * plen + pad..ci * plen + pad + len]);
    }
    dx
}

pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], n_out: usize, n_in: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), n_in);
    debug_assert_eq!(w.len(), n_out * n_in);
    let mut y = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = b[o];
        for i in 0..n_in {
            acc += row[i] * x[i];
        }
        y.push(acc);
    }
    y
}

pub fn linear_backward(
    d_out: &[f64],
    x: &[f64],
    w: &[f64],
    n_out: usize,
    n_in: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    debug_assert_eq!(d_out.len(), n_out);
    let mut dx = vec![0.0; n_in];
    for o in 0..n_out {
        let g = d_out[o];
        db[o] += g;
        let wrow = &w[o * n_in..(o + 1) * n_in];
        let dwrow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            dwrow[i] += g * x[i];
            dx[i] += g * wrow[i];
        }
    }
    dx
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// SiLU activation `x * sigmoid(x)`, elementwise.
pub fn silu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Backward of SiLU given the pre-activation input.
pub fn silu_backward(d_out: &[f64], x_pre: &[f64]) -> Vec<f64> {
    d_out
        .iter()
        .zip(x_pre)
        .map(|(&g, &v)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

/// Feature-wise conditioning: `y[c,t] = x[c,t] * (1 + scale[c]) + shift[c]`.
pub fn film_forward(x: &[f64], scale: &[f64], shift: &[f64], channels: usize, len: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), channels * len);
    let mut y = vec![0.0; channels * len];
    for c in 0..channels {
        let (s, b) = (1.0 + scale[c], shift[c]);
        for t in 0..len {
            y[c * len + t] = x[c * len + t] * s + b;
        }
    }
    y
}

/// Backward of [`film_forward`]: returns `dx` and accumulates the per-channel
/// gradients of scale and shift.
pub fn film_backward(
    d_out: &[f64],
    x: &[f64],
    scale: &[f64],
    channels: usize,
    len: usize,
    d_scale: &mut [f64],
    d_shift: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; channels * len];
    for c in 0..channels {
        let s = 1.0 + scale[c];
        let mut gs = 0.0;
        let mut gb = 0.0;
        for t in 0..len {
            let g = d_out[c * len + t];
            gs += g * x[c * len + t];
            gb += g;
            dx[c * len + t] = g * s;
        }
        d_scale[c] += gs;
        d_shift[c] += gb;
    }
    dx
}

/// Nearest-neighbor temporal upsampling by 2.
pub fn upsample2_forward(x: &[f64], channels: usize, len: usize) -> Vec<f64> {
    let mut y = vec![0.0; channels * len * 2];
    for c in 0..channels {
        for t in 0..len {
            let v = x[c * len + t];
            y[c * len * 2 + 2 * t] = v;
            y[c * len * 2 + 2 * t + 1] = v;
        }
    }
    y
}

pub fn upsample2_backward(d_out: &[f64], channels: usize, len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; channels * len];
    for c in 0..channels {
        for t in 0..len {
            dx[c * len + t] =
                d_out[c * len * 2 + 2 * t] + d_out[c * len * 2 + 2 * t + 1];
        }
    }
    dx
}

/// Stack two channel-major maps along the channel axis.
pub fn concat_channels(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

pub fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
