//! Dense numeric kernels shared by the graph. Everything here works on flat
//! row-major slices; shape bookkeeping lives in the caller.
//!
//! The stride-1 convolution paths are written as saxpy loops over contiguous
//! rows so the compiler can vectorize them without reassociating sums.

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_extent(extent: usize, k: usize, padding: usize, stride: usize) -> usize {
    (extent + 2 * padding - k) / stride + 1
}

/// Cross-correlation of a (c_in, h, w) input with (c_out, c_in, k, k) kernels.
/// Returns the (c_out, h_out, w_out) output data.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernels: &[f64],
    c_out: usize,
    k: usize,
    padding: usize,
    stride: usize,
) -> Vec<f64> {
    let h_out = conv_out_extent(h, k, padding, stride);
    let w_out = conv_out_extent(w, k, padding, stride);
    let mut out = vec![0.0; c_out * h_out * w_out];
    if stride == 1 {
        for co in 0..c_out {
            let out_c = &mut out[co * h_out * w_out..(co + 1) * h_out * w_out];
            for ci in 0..c_in {
                let in_c = &input[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    let oy_lo = padding.saturating_sub(ky);
                    let oy_hi = (h + padding).saturating_sub(ky).min(h_out);
                    for kx in 0..k {
                        let kv = kernels[((co * c_in + ci) * k + ky) * k + kx];
                        let ox_lo = padding.saturating_sub(kx);
                        let ox_hi = (w + padding).saturating_sub(kx).min(w_out);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let len = ox_hi - ox_lo;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - padding;
                            let ix0 = ox_lo + kx - padding;
                            let src = &in_c[iy * w + ix0..iy * w + ix0 + len];
                            let dst = &mut out_c[oy * w_out + ox_lo..oy * w_out + ox_lo + len];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += kv * *s;
                            }
                        }
                    }
                }
            }
        }
    } else {
        for co in 0..c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += input[ci * h * w + iy as usize * w + ix as usize]
                                    * kernels[((co * c_in + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(co * h_out + oy) * w_out + ox] = acc;
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d_fwd` with respect to the input and the kernels.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernels: &[f64],
    c_out: usize,
    k: usize,
    padding: usize,
    stride: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let h_out = conv_out_extent(h, k, padding, stride);
    let w_out = conv_out_extent(w, k, padding, stride);
    let mut grad_in = vec![0.0; c_in * h * w];
    let mut grad_k = vec![0.0; c_out * c_in * k * k];
    if stride == 1 {
        for co in 0..c_out {
            let go_c = &grad_out[co * h_out * w_out..(co + 1) * h_out * w_out];
            for ci in 0..c_in {
                let in_c = &input[ci * h * w..(ci + 1) * h * w];
                let gi_c = &mut grad_in[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    let oy_lo = padding.saturating_sub(ky);
                    let oy_hi = (h + padding).saturating_sub(ky).min(h_out);
                    for kx in 0..k {
                        let kv = kernels[((co * c_in + ci) * k + ky) * k + kx];
                        let ox_lo = padding.saturating_sub(kx);
                        let ox_hi = (w + padding).saturating_sub(kx).min(w_out);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let len = ox_hi - ox_lo;
                        let mut kacc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - padding;
                            let ix0 = ox_lo + kx - padding;
                            let go_row = &go_c[oy * w_out + ox_lo..oy * w_out + ox_lo + len];
                            let in_row = &in_c[iy * w + ix0..iy * w + ix0 + len];
                            let gi_row = &mut gi_c[iy * w + ix0..iy * w + ix0 + len];
                            let mut racc = 0.0;
                            for ((g, s), d) in go_row.iter().zip(in_row).zip(gi_row.iter_mut()) {
                                racc += g * s;
                                *d += kv * g;
                            }
                            kacc += racc;
                        }
                        grad_k[((co * c_in + ci) * k + ky) * k + kx] += kacc;
                    }
                }
            }
        }
    } else {
        for co in 0..c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let g = grad_out[(co * h_out + oy) * w_out + ox];
                    for ci in 0..c_in {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let ii = ci * h * w + iy as usize * w + ix as usize;
                                let ki = ((co * c_in + ci) * k + ky) * k + kx;
                                grad_in[ii] += g * kernels[ki];
                                grad_k[ki] += g * input[ii];
                            }
                        }
                    }
                }
            }
        }
    }
    (grad_in, grad_k)
}

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major
/// window order. Returns the pooled data and the flat input index of each
/// selected element.
pub fn maxpool2_fwd(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    let mut argmax = vec![0u32; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                let o = (ch * ho + oy) * wo + ox;
                out[o] = best;
                argmax[o] = best_i as u32;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_bwd(grad_out: &[f64], argmax: &[u32], input_len: usize) -> Vec<f64> {
    let mut grad_in = vec![0.0; input_len];
    for (g, &i) in grad_out.iter().zip(argmax) {
        grad_in[i as usize] += g;
    }
    grad_in
}

/// Nearest-neighbour 2x upsampling: every pixel becomes a 2x2 block.
pub fn upsample2_fwd(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * 4 * h * w];
    let wo = 2 * w;
    for ch in 0..c {
        for y in 0..h {
            let src = &input[ch * h * w + y * w..ch * h * w + (y + 1) * w];
            let base = ch * 4 * h * w + 2 * y * wo;
            for (x, &v) in src.iter().enumerate() {
                out[base + 2 * x] = v;
                out[base + 2 * x + 1] = v;
            }
            let (head, tail) = out.split_at_mut(base + wo);
            tail[..wo].copy_from_slice(&head[base..base + wo]);
        }
    }
    out
}

pub fn upsample2_bwd(grad_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut grad_in = vec![0.0; c * h * w];
    let wo = 2 * w;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let base = ch * 4 * h * w + 2 * y * wo + 2 * x;
                grad_in[ch * h * w + y * w + x] =
                    grad_out[base] + grad_out[base + 1] + grad_out[base + wo] + grad_out[base + wo + 1];
            }
        }
    }
    grad_in
}

/// y = W x + b with W row-major (m, n).
pub fn dense_fwd(x: &[f64], weights: &[f64], bias: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let row = &weights[i * n..(i + 1) * n];
        let mut acc = bias[i];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        out.push(acc);
    }
    out
}

pub fn dense_bwd(
    x: &[f64],
    weights: &[f64],
    m: usize,
    n: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut grad_x = vec![0.0; n];
    let mut grad_w = vec![0.0; m * n];
    for i in 0..m {
        let g = grad_out[i];
        let row = &weights[i * n..(i + 1) * n];
        let grow = &mut grad_w[i * n..(i + 1) * n];
        for j in 0..n {
            grad_x[j] += g * row[j];
            grow[j] = g * x[j];
        }
    }
    (grad_x, grad_w, grad_out.to_vec())
}

/// Numerically safe log(sum(exp(z))) with the max subtracted first.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}
