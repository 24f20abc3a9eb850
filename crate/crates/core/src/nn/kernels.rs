//! Forward and backward kernels for the six layer kinds.
//!
//! All kernels take batch-major tensors. Reductions run in a fixed loop order
//! so results are reproducible bit for bit.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (outputs, inputs) = (w.shape()[0], w.shape()[1]);
    if x.rank() != 2 || x.shape()[1] != inputs {
        return Err(Error::Shape(format!(
            "dense expects [B, {inputs}], got {:?}",
            x.shape()
        )));
    }
    let batch = x.shape()[0];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut y = vec![0.0; batch * outputs];
    for n in 0..batch {
        let xr = &xd[n * inputs..(n + 1) * inputs];
        for o in 0..outputs {
            let wr = &wd[o * inputs..(o + 1) * inputs];
            let mut acc = bd[o];
            for i in 0..inputs {
                acc += wr[i] * xr[i];
            }
            y[n * outputs + o] = acc;
        }
    }
    Tensor::new(vec![batch, outputs], y)
}

/// Returns `(dx, dw, db)`.
pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (outputs, inputs) = (w.shape()[0], w.shape()[1]);
    let batch = x.shape()[0];
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; batch * inputs];
    let mut dw = vec![0.0; outputs * inputs];
    let mut db = vec![0.0; outputs];
    for n in 0..batch {
        let xr = &xd[n * inputs..(n + 1) * inputs];
        let dxr = &mut dx[n * inputs..(n + 1) * inputs];
        for o in 0..outputs {
            let g = dyd[n * outputs + o];
            db[o] += g;
            let wr = &wd[o * inputs..(o + 1) * inputs];
            let dwr = &mut dw[o * inputs..(o + 1) * inputs];
            for i in 0..inputs {
                dwr[i] += g * xr[i];
                dxr[i] += g * wr[i];
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("dw shape"),
        Tensor::new(vec![outputs], db).expect("db shape"),
    )
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

fn conv_dims(x: &Tensor, w: &Tensor, g: ConvGeometry) -> Result<[usize; 8]> {
    let [o, c, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    match x.shape() {
        &[n, xc, h, wi] if xc == c && h + 2 * g.padding >= k && wi + 2 * g.padding >= k => {
            let ho = (h + 2 * g.padding - k) / g.stride + 1;
            let wo = (wi + 2 * g.padding - k) / g.stride + 1;
            Ok([n, c, h, wi, o, k, ho, wo])
        }
        s => Err(Error::Shape(format!(
            "conv2d expects [B, {c}, H, W] covering a {k}x{k} kernel, got {s:?}"
        ))),
    }
}

pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    g: ConvGeometry,
) -> Result<Tensor> {
    let [n, c, h, wi, o, k, ho, wo] = conv_dims(x, w, g)?;
    let (xd, wd) = (x.data(), w.data());
    let mut y = vec![0.0; n * o * ho * wo];
    for bn in 0..n {
        for oc in 0..o {
            let bias = b.map_or(0.0, |b| b.data()[oc]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias;
                    for ic in 0..c {
                        for ky in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= wi as isize {
                                    continue;
                                }
                                let xv = xd[((bn * c + ic) * h + iy as usize) * wi + ix as usize];
                                acc += wd[((oc * c + ic) * k + ky) * k + kx] * xv;
                            }
                        }
                    }
                    y[((bn * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, ho, wo], y)
}

/// Returns `(dx, dw, db)`; `db` is `None` for bias-free convolutions.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    dy: &Tensor,
    g: ConvGeometry,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let [n, c, h, wi, o, k, ho, wo] = conv_dims(x, w, g)?;
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; o];
    for bn in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = dyd[((bn * o + oc) * ho + oy) * wo + ox];
                    db[oc] += gv;
                    for ic in 0..c {
                        for ky in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= wi as isize {
                                    continue;
                                }
                                let xi = ((bn * c + ic) * h + iy as usize) * wi + ix as usize;
                                let wj = ((oc * c + ic) * k + ky) * k + kx;
                                dw[wj] += gv * xd[xi];
                                dx[xi] += gv * wd[wj];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        has_bias.then(|| Tensor::new(vec![o], db).expect("db shape")),
    ))
}

/// Channel count and per-channel element layout of a batch-norm input:
/// `[B, C]` or `[B, C, H, W]`. Returns `(batch, channels, spatial)`.
fn bn_dims(x: &Tensor, channels: usize) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[n, c] if c == channels => Ok((n, c, 1)),
        &[n, c, h, w] if c == channels => Ok((n, c, h * w)),
        s => Err(Error::Shape(format!(
            "batchnorm expects [B, {channels}] or [B, {channels}, H, W], got {s:?}"
        ))),
    }
}

/// Per-channel mean and biased variance, accumulated in f64.
pub fn channel_stats(x: &Tensor, channels: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, sp) = bn_dims(x, channels)?;
    let xd = x.data();
    let m = (n * sp) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bn in 0..n {
            for p in 0..sp {
                s += xd[(bn * c + ch) * sp + p] as f64;
            }
        }
        let mu = s / m;
        let mut v = 0.0;
        for bn in 0..n {
            for p in 0..sp {
                let d = xd[(bn * c + ch) * sp + p] as f64 - mu;
                v += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    Ok((mean, var))
}

/// Normalizes `x` with the given per-channel statistics:
/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
/// Returns `(y, x_hat, inv_std)`.
pub fn batch_norm_apply(
    x: &Tensor,
    gamma: &[Scalar],
    beta: &[Scalar],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<Scalar>)> {
    let (n, c, sp) = bn_dims(x, gamma.len())?;
    let xd = x.data();
    let inv_std: Vec<Scalar> = var
        .iter()
        .map(|&v| (1.0 / (v + eps).sqrt()) as Scalar)
        .collect();
    let mut y = vec![0.0; xd.len()];
    let mut x_hat = vec![0.0; xd.len()];
    for bn in 0..n {
        for ch in 0..c {
            let mu = mean[ch] as Scalar;
            for p in 0..sp {
                let i = (bn * c + ch) * sp + p;
                let h = (xd[i] - mu) * inv_std[ch];
                x_hat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        Tensor::new(x.shape().to_vec(), x_hat)?,
        inv_std,
    ))
}

/// Batch-statistics normalization (train mode). Returns `(y, x_hat, inv_std, mean, var)`.
#[allow(clippy::type_complexity)]
pub fn batch_norm_forward(
    x: &Tensor,
    gamma: &[Scalar],
    beta: &[Scalar],
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<Scalar>, Vec<f64>, Vec<f64>)> {
    let (mean, var) = channel_stats(x, gamma.len())?;
    let (y, x_hat, inv_std) = batch_norm_apply(x, gamma, beta, &mean, &var, eps)?;
    Ok((y, x_hat, inv_std, mean, var))
}

/// Backward through batch-statistics normalization. Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(
    x_hat: &Tensor,
    inv_std: &[Scalar],
    gamma: &[Scalar],
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, sp) = bn_dims(x_hat, gamma.len())?;
    let (hd, dyd) = (x_hat.data(), dy.data());
    let m = (n * sp) as f64;
    let mut dx = vec![0.0; hd.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_h) = (0.0f64, 0.0f64);
        for bn in 0..n {
            for p in 0..sp {
                let i = (bn * c + ch) * sp + p;
                sum_dy += dyd[i] as f64;
                sum_dy_h += (dyd[i] * hd[i]) as f64;
            }
        }
        dgamma[ch] = sum_dy_h as Scalar;
        dbeta[ch] = sum_dy as Scalar;
        // dx = gamma * inv_std / m * (m * dy - sum(dy) - x_hat * sum(dy * x_hat))
        let scale = (gamma[ch] as f64 * inv_std[ch] as f64 / m) as Scalar;
        let (s1, s2) = (sum_dy as Scalar, sum_dy_h as Scalar);
        let mf = m as Scalar;
        for bn in 0..n {
            for p in 0..sp {
                let i = (bn * c + ch) * sp + p;
                dx[i] = scale * (mf * dyd[i] - s1 - hd[i] * s2);
            }
        }
    }
    Ok((
        Tensor::new(x_hat.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn pool_dims(x: &[usize], window: usize, stride: usize) -> Result<[usize; 6]> {
    match *x {
        [n, c, h, w] if h >= window && w >= window => Ok([
            n,
            c,
            h,
            w,
            (h - window) / stride + 1,
            (w - window) / stride + 1,
        ]),
        _ => Err(Error::Shape(format!(
            "avgpool expects [B, C, H, W] covering a {window}x{window} window, got {x:?}"
        ))),
    }
}

pub fn avg_pool_forward(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let [n, c, h, w, ho, wo] = pool_dims(x.shape(), window, stride)?;
    let xd = x.data();
    let scale = 1.0 / (window * window) as Scalar;
    let mut y = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..window {
                    for kx in 0..window {
                        acc += xd[(plane * h + oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                y[(plane * ho + oy) * wo + ox] = acc * scale;
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], y)
}

pub fn avg_pool_backward(
    input_shape: &[usize],
    window: usize,
    stride: usize,
    dy: &Tensor,
) -> Result<Tensor> {
    let [n, c, h, w, ho, wo] = pool_dims(input_shape, window, stride)?;
    let dyd = dy.data();
    let scale = 1.0 / (window * window) as Scalar;
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dyd[(plane * ho + oy) * wo + ox] * scale;
                for ky in 0..window {
                    for kx in 0..window {
                        dx[(plane * h + oy * stride + ky) * w + ox * stride + kx] += g;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}
