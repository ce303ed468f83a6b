//! Forward and backward kernels shared by the tape and the pure public API.
//!
//! All spatial kernels assume `C×H×W` row-major storage.

/// Epsilon added to the variance inside channel normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Same-padded, stride-1 2D convolution with an odd square kernel.
pub fn conv2d_forward(
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
    k: usize,
) -> Vec<f64> {
    let pad = k / 2;
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        let plane = &mut out[o * h * w..(o + 1) * h * w];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..c_in {
            let src = &input[i * h * w..(i + 1) * h * w];
            for dy in 0..k {
                for dx in 0..k {
                    let wv = weight[((o * c_in + i) * k + dy) * k + dx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + dy as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let row = &src[sy as usize * w..(sy as usize + 1) * w];
                        let dst = &mut plane[y * w..(y + 1) * w];
                        let x_lo = pad.saturating_sub(dx);
                        let x_hi = (w + pad).saturating_sub(dx).min(w);
                        for x in x_lo..x_hi {
                            dst[x] += wv * row[x + dx - pad];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    weight: &[f64],
    c_out: usize,
    k: usize,
    d_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let pad = k / 2;
    let mut d_in = vec![0.0; input.len()];
    let mut d_w = vec![0.0; weight.len()];
    let mut d_b = vec![0.0; c_out];
    for o in 0..c_out {
        let g = &d_out[o * h * w..(o + 1) * h * w];
        d_b[o] = g.iter().sum();
        for i in 0..c_in {
            let src = &input[i * h * w..(i + 1) * h * w];
            let dsrc = &mut d_in[i * h * w..(i + 1) * h * w];
            for dy in 0..k {
                for dx in 0..k {
                    let widx = ((o * c_in + i) * k + dy) * k + dx;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for y in 0..h {
                        let sy = y as isize + dy as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let x_lo = pad.saturating_sub(dx);
                        let x_hi = (w + pad).saturating_sub(dx).min(w);
                        for x in x_lo..x_hi {
                            let sx = x + dx - pad;
                            let gv = g[y * w + x];
                            acc += gv * src[sy * w + sx];
                            dsrc[sy * w + sx] += gv * wv;
                        }
                    }
                    d_w[widx] += acc;
                }
            }
        }
    }
    (d_in, d_w, d_b)
}

/// Per-channel mean and biased variance over the spatial extent.
pub fn channel_stats(x: &[f64], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / channels;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let plane = &x[c * n..(c + 1) * n];
        let m = plane.iter().sum::<f64>() / n as f64;
        mean[c] = m;
        var[c] = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta`; returns `(y, normalized)`.
pub fn normalize_forward(
    x: &[f64],
    channels: usize,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / channels;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for c in 0..channels {
        for p in 0..n {
            let i = c * n + p;
            xhat[i] = (x[i] - mean[c]) * inv_std[c];
            y[i] = gamma[c] * xhat[i] + beta[c];
        }
    }
    (y, xhat)
}

/// Backward pass of channel normalization. When `batch_stats` is true the
/// mean and variance depend on `x` and their derivatives are included.
/// Returns `(d_x, d_gamma, d_beta)`.
pub fn normalize_backward(
    xhat: &[f64],
    channels: usize,
    inv_std: &[f64],
    gamma: &[f64],
    d_y: &[f64],
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = xhat.len() / channels;
    let nf = n as f64;
    let mut d_x = vec![0.0; xhat.len()];
    let mut d_gamma = vec![0.0; channels];
    let mut d_beta = vec![0.0; channels];
    for c in 0..channels {
        let range = c * n..(c + 1) * n;
        let g = &d_y[range.clone()];
        let xh = &xhat[range.clone()];
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        d_gamma[c] = sum_gx;
        d_beta[c] = sum_g;
        let scale = gamma[c] * inv_std[c];
        let dx = &mut d_x[range];
        if batch_stats {
            for p in 0..n {
                dx[p] = scale / nf * (nf * g[p] - sum_g - xh[p] * sum_gx);
            }
        } else {
            for p in 0..n {
                dx[p] = scale * g[p];
            }
        }
    }
    (d_x, d_gamma, d_beta)
}

/// Half-open index range `[floor(i·in/out), ceil((i+1)·in/out))`.
#[inline]
pub fn adaptive_range(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

pub fn adaptive_avg_pool_forward(
    x: &[f64],
    (c, a, b): (usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for i in 0..out_h {
            let (r0, r1) = adaptive_range(i, a, out_h);
            for j in 0..out_w {
                let (c0, c1) = adaptive_range(j, b, out_w);
                let mut acc = 0.0;
                for r in r0..r1 {
                    for col in c0..c1 {
                        acc += x[(ch * a + r) * b + col];
                    }
                }
                out[(ch * out_h + i) * out_w + j] = acc / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward(
    (c, a, b): (usize, usize, usize),
    out_h: usize,
    out_w: usize,
    d_out: &[f64],
) -> Vec<f64> {
    let mut d_x = vec![0.0; c * a * b];
    for ch in 0..c {
        for i in 0..out_h {
            let (r0, r1) = adaptive_range(i, a, out_h);
            for j in 0..out_w {
                let (c0, c1) = adaptive_range(j, b, out_w);
                let share =
                    d_out[(ch * out_h + i) * out_w + j] / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    for col in c0..c1 {
                        d_x[(ch * a + r) * b + col] += share;
                    }
                }
            }
        }
    }
    d_x
}

/// Masked L1 sum divided by the number of valid pixels; zero when the mask is
/// empty.
pub fn masked_l1_forward(
    student: &[f64],
    teacher: &[f64],
    mask: &[bool],
    channels: usize,
) -> f64 {
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return 0.0;
    }
    let n = mask.len();
    let mut acc = 0.0;
    for c in 0..channels {
        for p in 0..n {
            if mask[p] {
                let i = c * n + p;
                acc += (student[i] - teacher[i]).abs();
            }
        }
    }
    acc / valid as f64
}

/// Gradient with respect to the student; the subgradient at ties is zero.
pub fn masked_l1_backward(
    student: &[f64],
    teacher: &[f64],
    mask: &[bool],
    channels: usize,
    d_out: f64,
) -> Vec<f64> {
    let mut d = vec![0.0; student.len()];
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return d;
    }
    let n = mask.len();
    let scale = d_out / valid as f64;
    for c in 0..channels {
        for p in 0..n {
            if mask[p] {
                let i = c * n + p;
                let diff = student[i] - teacher[i];
                d[i] = if diff > 0.0 {
                    scale
                } else if diff < 0.0 {
                    -scale
                } else {
                    0.0
                };
            }
        }
    }
    d
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
