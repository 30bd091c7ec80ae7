//! Raw numeric kernels behind the autodiff ops. All loops use a fixed
//! iteration order so results are bitwise-deterministic.

/// Output spatial extent of a strided, padded convolution/pool window.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Unfold one image [C,H,W] into a column matrix [C*kh*kw, OH*OW].
fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let ol = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut col[row * ol..(row + 1) * ol];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[oy * ow..(oy + 1) * ow].fill(0.0);
                        continue;
                    }
                    let src_row = &img[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[oy * ow + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back into image layout (adjoint of im2col).
fn col2im_add(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    img: &mut [f64],
) {
    let ol = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &col[row * ol..(row + 1) * ol];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row =
                        &mut img[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[k,n], row-major, ikj order.
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    wdt: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ckk = cin * kh * kw;
    let ol = oh * ow;
    let mut out = vec![0.0; n * cout * ol];
    let mut col = vec![0.0; ckk * ol];
    for ni in 0..n {
        im2col(
            &x[ni * cin * h * wdt..(ni + 1) * cin * h * wdt],
            cin,
            h,
            wdt,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
            &mut col,
        );
        matmul_acc(
            w,
            &col,
            cout,
            ckk,
            ol,
            &mut out[ni * cout * ol..(ni + 1) * cout * ol],
        );
    }
    out
}

/// Gradients of conv2d w.r.t. both kernel and input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    wdt: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (Vec<f64>, Vec<f64>) {
    let ckk = cin * kh * kw;
    let ol = oh * ow;
    let mut dw = vec![0.0; cout * ckk];
    let mut dx = vec![0.0; n * cin * h * wdt];
    let mut col = vec![0.0; ckk * ol];
    let mut dcol = vec![0.0; ckk * ol];
    for ni in 0..n {
        let dout_n = &dout[ni * cout * ol..(ni + 1) * cout * ol];
        im2col(
            &x[ni * cin * h * wdt..(ni + 1) * cin * h * wdt],
            cin,
            h,
            wdt,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
            &mut col,
        );
        // dW[i,p] += sum_j dout[i,j] * col[p,j]
        for i in 0..cout {
            let d_row = &dout_n[i * ol..(i + 1) * ol];
            for p in 0..ckk {
                let c_row = &col[p * ol..(p + 1) * ol];
                let mut s = 0.0;
                for j in 0..ol {
                    s += d_row[j] * c_row[j];
                }
                dw[i * ckk + p] += s;
            }
        }
        // dcol = W^T * dout
        dcol.fill(0.0);
        for i in 0..cout {
            let d_row = &dout_n[i * ol..(i + 1) * ol];
            for p in 0..ckk {
                let wv = w[i * ckk + p];
                if wv == 0.0 {
                    continue;
                }
                let c_row = &mut dcol[p * ol..(p + 1) * ol];
                for j in 0..ol {
                    c_row[j] += wv * d_row[j];
                }
            }
        }
        col2im_add(
            &dcol,
            cin,
            h,
            wdt,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
            &mut dx[ni * cin * h * wdt..(ni + 1) * cin * h * wdt],
        );
    }
    (dw, dx)
}

/// Per-channel mean and biased variance over the N,H,W axes of [N,C,H,W].
pub fn batch_stats(x: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for k in 0..hw {
                s += x[base + k];
            }
        }
        mean[ci] = s / m;
        let mut v = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for k in 0..hw {
                let d = x[base + k] - mean[ci];
                v += d * d;
            }
        }
        var[ci] = v / m;
    }
    (mean, var)
}

/// Normalize, scale and shift: y = gamma * (x - mean) * invstd + beta.
pub fn batchnorm_apply(
    x: &[f64],
    mean: &[f64],
    invstd: &[f64],
    gamma: &[f64],
    beta: &[f64],
    n: usize,
    c: usize,
    hw: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (mu, is, g, b) = (mean[ci], invstd[ci], gamma[ci], beta[ci]);
            for k in 0..hw {
                y[base + k] = g * (x[base + k] - mu) * is + b;
            }
        }
    }
    y
}

/// Backward pass for batchnorm. `batch_mode` selects the train-mode formula
/// (statistics depend on x) versus the eval-mode affine formula.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward(
    x: &[f64],
    dout: &[f64],
    mean: &[f64],
    invstd: &[f64],
    gamma: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    batch_mode: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ci in 0..c {
        let (mu, is) = (mean[ci], invstd[ci]);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for k in 0..hw {
                let xhat = (x[base + k] - mu) * is;
                let dy = dout[base + k];
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        dgamma[ci] = sum_dy_xhat;
        dbeta[ci] = sum_dy;
        let g = gamma[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for k in 0..hw {
                let dy = dout[base + k];
                if batch_mode {
                    let xhat = (x[base + k] - mu) * is;
                    dx[base + k] = g * is / m * (m * dy - sum_dy - xhat * sum_dy_xhat);
                } else {
                    dx[base + k] = g * is * dy;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Max pooling; returns output and the flat input index of each window max
/// (lowest row-major index wins ties).
#[allow(clippy::too_many_arguments)]
pub fn maxpool_forward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (Vec<f64>, Vec<usize>) {
    let ol = oh * ow;
    let mut out = vec![0.0; n * c * ol];
    let mut arg = vec![0usize; n * c * ol];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let obase = (ni * c + ci) * ol;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ki in 0..kh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = best;
                    arg[obase + oy * ow + ox] = best_idx;
                }
            }
        }
    }
    (out, arg)
}

/// Average pooling over the in-bounds part of each window.
#[allow(clippy::too_many_arguments)]
pub fn avgpool_forward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ol = oh * ow;
    let mut out = vec![0.0; n * c * ol];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let obase = (ni * c + ci) * ol;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    let mut cnt = 0usize;
                    for ki in 0..kh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            s += x[base + iy as usize * w + ix as usize];
                            cnt += 1;
                        }
                    }
                    out[obase + oy * ow + ox] = s / cnt as f64;
                }
            }
        }
    }
    out
}

/// Softmax over the last axis of rows of length `l`, with temperature
/// pre-multiplied into the scores and max-subtraction for stability.
pub fn softmax_rows(x: &[f64], rows: usize, l: usize, temp: f64) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * l..(r + 1) * l];
        let mut mx = f64::NEG_INFINITY;
        for &v in row {
            mx = mx.max(temp * v);
        }
        let mut z = 0.0;
        let out = &mut y[r * l..(r + 1) * l];
        for (o, &v) in out.iter_mut().zip(row) {
            let e = (temp * v - mx).exp();
            *o = e;
            z += e;
        }
        for o in out.iter_mut() {
            *o /= z;
        }
    }
    y
}

/// One-hot at the row max; lowest index wins ties.
pub fn onehot_argmax_rows(x: &[f64], rows: usize, l: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * l..(r + 1) * l];
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        y[r * l + best] = 1.0;
    }
    y
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-slot binary cross entropy in the stable form
/// max(z,0) - z*y + ln(1 + exp(-|z|)).
pub fn bce_with_logits_slot(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}
