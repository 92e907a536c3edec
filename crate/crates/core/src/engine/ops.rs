//! Numerical kernels for every op kind, forward and backward.
//!
//! All kernels work on flat f64 slices in (N, C, H, W) layout with explicit
//! shape arguments, so they can be tested directly against finite
//! differences without any graph machinery.

/// Batch-norm epsilon. Small enough at f64 that normalized outputs have
/// per-channel variance within 1e-5 of 1.
pub const BN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    /// floor((H + 2·pad − k)/stride) + 1, and analogously for W.
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.out_ch * self.out_h() * self.out_w()
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }
}

/// First output index whose receptive field starts inside the input:
/// smallest o ≥ 0 with o·stride + koff ≥ pad.
#[inline]
fn lo(pad: usize, koff: usize, stride: usize) -> usize {
    if koff >= pad {
        0
    } else {
        (pad - koff).div_ceil(stride)
    }
}

/// One past the last valid output index: o·stride + koff − pad ≤ extent−1.
#[inline]
fn hi(extent: usize, pad: usize, koff: usize, stride: usize, out_extent: usize) -> usize {
    if extent + pad <= koff {
        return 0;
    }
    ((extent - 1 + pad - koff) / stride + 1).min(out_extent)
}

pub fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    s: &ConvShape,
    out: &mut [f64],
) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let (k, st, pad) = (s.kernel, s.stride, s.pad);
    match bias {
        Some(bias) => {
            for bi in 0..s.batch {
                for o in 0..s.out_ch {
                    let base = (bi * s.out_ch + o) * oh * ow;
                    out[base..base + oh * ow].fill(bias[o]);
                }
            }
        }
        None => out.fill(0.0),
    }
    for bi in 0..s.batch {
        for o in 0..s.out_ch {
            let obase = (bi * s.out_ch + o) * oh * ow;
            for c in 0..s.in_ch {
                let ibase = (bi * s.in_ch + c) * s.in_h * s.in_w;
                let wbase = (o * s.in_ch + c) * k * k;
                for ky in 0..k {
                    let oy0 = lo(pad, ky, st);
                    let oy1 = hi(s.in_h, pad, ky, st, oh);
                    for kx in 0..k {
                        let wv = weight[wbase + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let ox0 = lo(pad, kx, st);
                        let ox1 = hi(s.in_w, pad, kx, st, ow);
                        if ox1 <= ox0 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * st + ky - pad;
                            let orow = obase + oy * ow;
                            let irow = ibase + iy * s.in_w + (ox0 * st + kx - pad);
                            if st == 1 {
                                let n = ox1 - ox0;
                                let orow = &mut out[orow + ox0..orow + ox0 + n];
                                let irow = &input[irow..irow + n];
                                for (ov, iv) in orow.iter_mut().zip(irow) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for (j, ox) in (ox0..ox1).enumerate() {
                                    out[orow + ox] += wv * input[irow + j * st];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    s: &ConvShape,
    d_out: &[f64],
    mut d_input: Option<&mut [f64]>,
    d_weight: &mut [f64],
    d_bias: Option<&mut [f64]>,
) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let (k, st, pad) = (s.kernel, s.stride, s.pad);
    if let Some(db) = d_bias {
        for bi in 0..s.batch {
            for o in 0..s.out_ch {
                let base = (bi * s.out_ch + o) * oh * ow;
                db[o] += d_out[base..base + oh * ow].iter().sum::<f64>();
            }
        }
    }
    for bi in 0..s.batch {
        for o in 0..s.out_ch {
            let obase = (bi * s.out_ch + o) * oh * ow;
            for c in 0..s.in_ch {
                let ibase = (bi * s.in_ch + c) * s.in_h * s.in_w;
                let wbase = (o * s.in_ch + c) * k * k;
                for ky in 0..k {
                    let oy0 = lo(pad, ky, st);
                    let oy1 = hi(s.in_h, pad, ky, st, oh);
                    for kx in 0..k {
                        let ox0 = lo(pad, kx, st);
                        let ox1 = hi(s.in_w, pad, kx, st, ow);
                        if ox1 <= ox0 || oy1 <= oy0 {
                            continue;
                        }
                        let wv = weight[wbase + ky * k + kx];
                        let mut wacc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * st + ky - pad;
                            let orow = obase + oy * ow;
                            let ioff = ibase + iy * s.in_w + (ox0 * st + kx - pad);
                            if let Some(di) = d_input.as_deref_mut() {
                                if st == 1 {
                                    let n = ox1 - ox0;
                                    let dorow = &d_out[orow + ox0..orow + ox0 + n];
                                    let irow = &input[ioff..ioff + n];
                                    let dirow = &mut di[ioff..ioff + n];
                                    for ((g, iv), dv) in dorow.iter().zip(irow).zip(dirow) {
                                        wacc += g * iv;
                                        *dv += wv * g;
                                    }
                                } else {
                                    for (j, ox) in (ox0..ox1).enumerate() {
                                        let g = d_out[orow + ox];
                                        wacc += g * input[ioff + j * st];
                                        di[ioff + j * st] += wv * g;
                                    }
                                }
                            } else if st == 1 {
                                let n = ox1 - ox0;
                                let dorow = &d_out[orow + ox0..orow + ox0 + n];
                                let irow = &input[ioff..ioff + n];
                                for (g, iv) in dorow.iter().zip(irow) {
                                    wacc += g * iv;
                                }
                            } else {
                                for (j, ox) in (ox0..ox1).enumerate() {
                                    wacc += d_out[orow + ox] * input[ioff + j * st];
                                }
                            }
                        }
                        d_weight[wbase + ky * k + kx] += wacc;
                    }
                }
            }
        }
    }
}

/// Training-mode batch norm over (N, H, W) per channel, biased variance.
/// Writes per-channel batch mean and variance for reuse in backward.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward(
    input: &[f64],
    gamma: &[f64],
    beta: &[f64],
    shape: (usize, usize, usize, usize),
    out: &mut [f64],
    mean: &mut [f64],
    var: &mut [f64],
) {
    let (b, c, h, w) = shape;
    let hw = h * w;
    let m = (b * hw) as f64;
    for ch in 0..c {
        let mut sum = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            sum += input[base..base + hw].iter().sum::<f64>();
        }
        let mu = sum / m;
        let mut vsum = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for &x in &input[base..base + hw] {
                let d = x - mu;
                vsum += d * d;
            }
        }
        let v = vsum / m;
        mean[ch] = mu;
        var[ch] = v;
        let inv = 1.0 / (v + BN_EPS).sqrt();
        let (g, be) = (gamma[ch], beta[ch]);
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for i in base..base + hw {
                out[i] = g * (input[i] - mu) * inv + be;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward(
    input: &[f64],
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    shape: (usize, usize, usize, usize),
    d_out: &[f64],
    d_input: &mut [f64],
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) {
    let (b, c, h, w) = shape;
    let hw = h * w;
    let m = (b * hw) as f64;
    for ch in 0..c {
        let mu = mean[ch];
        let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for i in base..base + hw {
                let xhat = (input[i] - mu) * inv;
                sum_dy += d_out[i];
                sum_dy_xhat += d_out[i] * xhat;
            }
        }
        d_beta[ch] += sum_dy;
        d_gamma[ch] += sum_dy_xhat;
        let g = gamma[ch];
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for i in base..base + hw {
                let xhat = (input[i] - mu) * inv;
                d_input[i] += g * inv * (d_out[i] - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
}

pub fn relu_forward(input: &[f64], out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(input) {
        *o = x.max(0.0);
    }
}

/// Subgradient routed by the op's own output: positive outputs pass.
pub fn relu_backward(output: &[f64], d_out: &[f64], d_input: &mut [f64]) {
    for ((di, &o), &g) in d_input.iter_mut().zip(output).zip(d_out) {
        if o > 0.0 {
            *di += g;
        }
    }
}

/// 2×2 max pool, stride 2. Ties go to the first index in scan order.
/// `argmax` receives the flat input index of each selected element.
pub fn maxpool2_forward(
    input: &[f64],
    shape: (usize, usize, usize, usize),
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let (b, c, h, w) = shape;
    let (oh, ow) = (h / 2, w / 2);
    for bc in 0..b * c {
        let ibase = bc * h * w;
        let obase = bc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = ibase + (2 * oy) * w + 2 * ox;
                let mut best = i00;
                let mut bv = input[i00];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = ibase + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > bv {
                        bv = input[idx];
                        best = idx;
                    }
                }
                out[obase + oy * ow + ox] = bv;
                argmax[obase + oy * ow + ox] = best;
            }
        }
    }
}

pub fn maxpool2_backward(d_out: &[f64], argmax: &[usize], d_input: &mut [f64]) {
    for (&g, &idx) in d_out.iter().zip(argmax) {
        d_input[idx] += g;
    }
}

/// Nearest-neighbor ×2 upsampling.
pub fn upsample2_forward(input: &[f64], shape: (usize, usize, usize, usize), out: &mut [f64]) {
    let (b, c, h, w) = shape;
    let (oh, ow) = (2 * h, 2 * w);
    for bc in 0..b * c {
        let ibase = bc * h * w;
        let obase = bc * oh * ow;
        for oy in 0..oh {
            let irow = ibase + (oy / 2) * w;
            let orow = obase + oy * ow;
            for ox in 0..ow {
                out[orow + ox] = input[irow + ox / 2];
            }
        }
    }
}

/// Adjoint of duplication: each input cell accumulates its four children.
pub fn upsample2_backward(d_out: &[f64], shape: (usize, usize, usize, usize), d_input: &mut [f64]) {
    let (b, c, h, w) = shape;
    let ow = 2 * w;
    for bc in 0..b * c {
        let ibase = bc * h * w;
        let obase = bc * 2 * h * ow;
        for iy in 0..h {
            for ix in 0..w {
                let o00 = obase + (2 * iy) * ow + 2 * ix;
                d_input[ibase + iy * w + ix] +=
                    d_out[o00] + d_out[o00 + 1] + d_out[o00 + ow] + d_out[o00 + ow + 1];
            }
        }
    }
}

/// Channel concatenation. `chunks[i]` is C_i·H·W, the per-sample length of
/// input i; all inputs share batch and spatial extents.
pub fn concat_forward(inputs: &[&[f64]], chunks: &[usize], batch: usize, out: &mut [f64]) {
    let total: usize = chunks.iter().sum();
    for bi in 0..batch {
        let mut off = bi * total;
        for (inp, &ch) in inputs.iter().zip(chunks) {
            out[off..off + ch].copy_from_slice(&inp[bi * ch..(bi + 1) * ch]);
            off += ch;
        }
    }
}

/// Gradient of concat is exact slicing.
pub fn concat_backward(d_out: &[f64], chunks: &[usize], batch: usize, d_inputs: &mut [&mut [f64]]) {
    let total: usize = chunks.iter().sum();
    for bi in 0..batch {
        let mut off = bi * total;
        for (di, &ch) in d_inputs.iter_mut().zip(chunks) {
            for (dv, &g) in di[bi * ch..(bi + 1) * ch].iter_mut().zip(&d_out[off..off + ch]) {
                *dv += g;
            }
            off += ch;
        }
    }
}

pub fn add_forward(a: &[f64], b: &[f64], out: &mut [f64]) {
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = x + y;
    }
}

/// Mean over the spatial extent, per (batch, channel).
pub fn global_avg_pool_forward(input: &[f64], shape: (usize, usize, usize, usize), out: &mut [f64]) {
    let (b, c, h, w) = shape;
    let hw = (h * w) as f64;
    for bc in 0..b * c {
        let base = bc * h * w;
        out[bc] = input[base..base + h * w].iter().sum::<f64>() / hw;
    }
}

pub fn global_avg_pool_backward(
    d_out: &[f64],
    shape: (usize, usize, usize, usize),
    d_input: &mut [f64],
) {
    let (b, c, h, w) = shape;
    let hw = (h * w) as f64;
    for bc in 0..b * c {
        let g = d_out[bc] / hw;
        let base = bc * h * w;
        for dv in &mut d_input[base..base + h * w] {
            *dv += g;
        }
    }
}

/// Mean squared error over all elements.
pub fn mse_forward(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

pub fn mse_backward(pred: &[f64], target: &[f64], d_loss: f64, d_pred: &mut [f64]) {
    let n = pred.len() as f64;
    for ((dp, &p), &t) in d_pred.iter_mut().zip(pred).zip(target) {
        *dp += d_loss * 2.0 * (p - t) / n;
    }
}
