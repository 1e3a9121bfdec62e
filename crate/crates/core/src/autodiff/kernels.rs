//! Raw numeric kernels behind the tape operators.
//!
//! Everything here works on flat `f64` slices plus explicit dimensions so
//! the tape layer stays free of index arithmetic. Loops are ordered so the
//! innermost dimension walks contiguous memory.

/// Zero-pad a [C,H,W] image by `pad` on each spatial border.
fn pad_image(input: &[f64], c: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    if pad == 0 {
        return input.to_vec();
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = &input[ch * h * w + y * w..][..w];
            let dst = &mut out[ch * ph * pw + (y + pad) * pw + pad..][..w];
            dst.copy_from_slice(src);
        }
    }
    out
}

/// Spatial output size of a convolution.
pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Direct 2-D correlation: input [C_in,H,W], kernel [C_out,C_in,K,K].
pub fn conv2d_forward(
    input: &[f64],
    (ci, h, w): (usize, usize, usize),
    kernel: &[f64],
    (co, k): (usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let padded = pad_image(input, ci, h, w, pad);
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut out = vec![0.0; co * oh * ow];
    for oc in 0..co {
        let out_plane = &mut out[oc * oh * ow..][..oh * ow];
        for ic in 0..ci {
            let in_plane = &padded[ic * ph * pw..][..ph * pw];
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = kernel[((oc * ci + ic) * k + ky) * k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let in_row = &in_plane[(oy * stride + ky) * pw + kx..];
                        let out_row = &mut out_plane[oy * ow..][..ow];
                        if stride == 1 {
                            for (o, &x) in out_row.iter_mut().zip(in_row[..ow].iter()) {
                                *o += wgt * x;
                            }
                        } else {
                            for (ox, o) in out_row.iter_mut().enumerate() {
                                *o += wgt * in_row[ox * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of `conv2d_forward` with respect to the input image.
pub fn conv2d_backward_input(
    grad_out: &[f64],
    (ci, h, w): (usize, usize, usize),
    kernel: &[f64],
    (co, k): (usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut gpad = vec![0.0; ci * ph * pw];
    for oc in 0..co {
        let go_plane = &grad_out[oc * oh * ow..][..oh * ow];
        for ic in 0..ci {
            let gp_plane = &mut gpad[ic * ph * pw..][..ph * pw];
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = kernel[((oc * ci + ic) * k + ky) * k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let go_row = &go_plane[oy * ow..][..ow];
                        let gp_row = &mut gp_plane[(oy * stride + ky) * pw + kx..];
                        if stride == 1 {
                            for (g, &go) in gp_row[..ow].iter_mut().zip(go_row.iter()) {
                                *g += wgt * go;
                            }
                        } else {
                            for (ox, &go) in go_row.iter().enumerate() {
                                gp_row[ox * stride] += wgt * go;
                            }
                        }
                    }
                }
            }
        }
    }
    // strip padding
    if pad == 0 {
        return gpad;
    }
    let mut out = vec![0.0; ci * h * w];
    for ch in 0..ci {
        for y in 0..h {
            let src = &gpad[ch * ph * pw + (y + pad) * pw + pad..][..w];
            out[ch * h * w + y * w..][..w].copy_from_slice(src);
        }
    }
    out
}

/// Gradient of `conv2d_forward` with respect to the kernel.
pub fn conv2d_backward_kernel(
    grad_out: &[f64],
    input: &[f64],
    (ci, h, w): (usize, usize, usize),
    (co, k): (usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let padded = pad_image(input, ci, h, w, pad);
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut gk = vec![0.0; co * ci * k * k];
    for oc in 0..co {
        let go_plane = &grad_out[oc * oh * ow..][..oh * ow];
        for ic in 0..ci {
            let in_plane = &padded[ic * ph * pw..][..ph * pw];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let go_row = &go_plane[oy * ow..][..ow];
                        let in_row = &in_plane[(oy * stride + ky) * pw + kx..];
                        if stride == 1 {
                            for (&go, &x) in go_row.iter().zip(in_row[..ow].iter()) {
                                acc += go * x;
                            }
                        } else {
                            for (ox, &go) in go_row.iter().enumerate() {
                                acc += go * in_row[ox * stride];
                            }
                        }
                    }
                    gk[((oc * ci + ic) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    gk
}

/// Non-overlapping box average over factor x factor blocks.
pub fn avg_pool_forward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    f: usize,
) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..f {
                    let row = &input[ch * h * w + (oy * f + dy) * w + ox * f..][..f];
                    for &x in row {
                        acc += x;
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = acc * inv;
            }
        }
    }
    out
}

pub fn avg_pool_backward(
    grad_out: &[f64],
    (c, h, w): (usize, usize, usize),
    f: usize,
) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f64;
    let mut gin = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[ch * oh * ow + oy * ow + ox] * inv;
                for dy in 0..f {
                    let row = &mut gin[ch * h * w + (oy * f + dy) * w + ox * f..][..f];
                    for gx in row {
                        *gx += g;
                    }
                }
            }
        }
    }
    gin
}

pub fn upsample_nearest_forward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    f: usize,
) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let in_row = &input[ch * h * w + (oy / f) * w..][..w];
            let out_row = &mut out[ch * oh * ow + oy * ow..][..ow];
            for (ox, o) in out_row.iter_mut().enumerate() {
                *o = in_row[ox / f];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(
    grad_out: &[f64],
    (c, h, w): (usize, usize, usize),
    f: usize,
) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut gin = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            let go_row = &grad_out[ch * oh * ow + oy * ow..][..ow];
            let gi_row = &mut gin[ch * h * w + (oy / f) * w..][..w];
            for (ox, &g) in go_row.iter().enumerate() {
                gi_row[ox / f] += g;
            }
        }
    }
    gin
}

/// Per-axis source indices and interpolation weight for bilinear
/// upsampling with the half-pixel-centers convention.
fn bilinear_axis(n: usize, f: usize) -> Vec<(usize, usize, f64)> {
    let out_n = n * f;
    (0..out_n)
        .map(|o| {
            let src = (o as f64 + 0.5) / f as f64 - 0.5;
            if src <= 0.0 {
                (0, 0, 0.0)
            } else if src >= (n - 1) as f64 {
                (n - 1, n - 1, 0.0)
            } else {
                let i0 = src.floor() as usize;
                (i0, i0 + 1, src - i0 as f64)
            }
        })
        .collect()
}

pub fn upsample_bilinear_forward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    f: usize,
) -> Vec<f64> {
    let ys = bilinear_axis(h, f);
    let xs = bilinear_axis(w, f);
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &input[ch * h * w..][..h * w];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let out_row = &mut out[ch * oh * ow + oy * ow..][..ow];
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let v00 = plane[y0 * w + x0];
                let v01 = plane[y0 * w + x1];
                let v10 = plane[y1 * w + x0];
                let v11 = plane[y1 * w + x1];
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                out_row[ox] = top + (bot - top) * wy;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(
    grad_out: &[f64],
    (c, h, w): (usize, usize, usize),
    f: usize,
) -> Vec<f64> {
    let ys = bilinear_axis(h, f);
    let xs = bilinear_axis(w, f);
    let (oh, ow) = (h * f, w * f);
    let mut gin = vec![0.0; c * h * w];
    for ch in 0..c {
        let gplane = &mut gin[ch * h * w..][..h * w];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let go_row = &grad_out[ch * oh * ow + oy * ow..][..ow];
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let g = go_row[ox];
                gplane[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                gplane[y0 * w + x1] += g * (1.0 - wy) * wx;
                gplane[y1 * w + x0] += g * wy * (1.0 - wx);
                gplane[y1 * w + x1] += g * wy * wx;
            }
        }
    }
    gin
}

/// Per-channel mean and 1/sqrt(var + eps); returns (normalized, mean, inv_std).
pub fn instance_norm_forward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = h * w;
    let mut out = vec![0.0; c * n];
    let mut means = vec![0.0; c];
    let mut inv_stds = vec![0.0; c];
    for ch in 0..c {
        let plane = &input[ch * n..][..n];
        let mean = plane.iter().sum::<f64>() / n as f64;
        let var = plane.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for (o, &x) in out[ch * n..][..n].iter_mut().zip(plane.iter()) {
            *o = (x - mean) * inv_std;
        }
        means[ch] = mean;
        inv_stds[ch] = inv_std;
    }
    (out, means, inv_stds)
}

pub fn instance_norm_backward(
    grad_out: &[f64],
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    means: &[f64],
    inv_stds: &[f64],
) -> Vec<f64> {
    let n = h * w;
    let inv_n = 1.0 / n as f64;
    let mut gin = vec![0.0; c * n];
    for ch in 0..c {
        let plane = &input[ch * n..][..n];
        let go = &grad_out[ch * n..][..n];
        let (mean, inv_std) = (means[ch], inv_stds[ch]);
        let mut sum_go = 0.0;
        let mut sum_go_xhat = 0.0;
        for (&g, &x) in go.iter().zip(plane.iter()) {
            sum_go += g;
            sum_go_xhat += g * (x - mean) * inv_std;
        }
        let m_go = sum_go * inv_n;
        let m_go_xhat = sum_go_xhat * inv_n;
        for ((gi, &g), &x) in gin[ch * n..][..n].iter_mut().zip(go.iter()).zip(plane.iter()) {
            let xhat = (x - mean) * inv_std;
            *gi = inv_std * (g - m_go - xhat * m_go_xhat);
        }
    }
    gin
}
