//! Classical, non-learned image operators and metrics.
//!
//! These are the fixed filters the restoration objectives lean on
//! (Gaussian smoothing for initialization and consistency targets,
//! bicubic for super-resolution, box downsampling) plus the total
//! variation baseline and PSNR/MSE reporting. Everything is a pure
//! function over [`ImageBuffer`].

use crate::autodiff::Tensor;

/// Planar image: `data[c * h * w + y * w + x]`, values kept in [0, 1]
/// by every public operation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert!(
            channels == 1 || channels == 3,
            "images must have 1 or 3 channels, got {}",
            channels
        );
        assert!(
            data.len() == height * width * channels,
            "image data length {} does not match {}x{}x{}",
            data.len(),
            channels,
            height,
            width
        );
        ImageBuffer { height, width, channels, data }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn constant(height: usize, width: usize, channels: usize, v: f64) -> Self {
        Self::new(height, width, channels, vec![v.clamp(0.0, 1.0); height * width * channels])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Clamp every value into [0, 1] in place.
    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// [C,H,W] tensor with the same data.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone())
    }

    /// Build from a [C,H,W] tensor, clamping into [0, 1].
    pub fn from_tensor_clamped(t: &Tensor) -> Self {
        let s = t.shape();
        assert!(s.len() == 3, "image tensor must be [C,H,W], got {:?}", s);
        let mut img = ImageBuffer::new(
            s[1],
            s[2],
            s[0],
            t.data().iter().map(|&v| v.clamp(0.0, 1.0)).collect(),
        );
        img.clamp01();
        img
    }
}

fn reflect(i: i64, n: i64) -> usize {
    // reflect-101 style without repeating the border sample twice
    let mut i = i;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Normalized 1-D Gaussian taps with radius ceil(3 rho).
pub fn gaussian_kernel(rho: f64) -> Vec<f64> {
    if rho <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * rho).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * rho * rho)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian blur with reflect padding; rho = 0 is the identity.
pub fn gaussian_smooth(img: &ImageBuffer, rho: f64) -> ImageBuffer {
    assert!(rho >= 0.0, "gaussian_smooth needs rho >= 0, got {rho}");
    if rho == 0.0 {
        return img.clone();
    }
    let taps = gaussian_kernel(rho);
    let radius = (taps.len() / 2) as i64;
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut horiz = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ti, t) in taps.iter().enumerate() {
                    let sx = reflect(x as i64 + ti as i64 - radius, w as i64);
                    acc += t * img.get(ch, y, sx);
                }
                horiz[(ch * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = ImageBuffer::zeros(h, w, c);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ti, t) in taps.iter().enumerate() {
                    let sy = reflect(y as i64 + ti as i64 - radius, h as i64);
                    acc += t * horiz[(ch * h + sy) * w + x];
                }
                out.set(ch, y, x, acc.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Catmull-Rom cubic weight (a = -0.5).
fn cubic_weight(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

fn resample_axis(out_n: usize, in_n: usize, factor: f64) -> Vec<([usize; 4], [f64; 4])> {
    (0..out_n)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor - 0.5;
            let base = src.floor() as i64;
            let frac = src - base as f64;
            let mut idx = [0usize; 4];
            let mut wgt = [0f64; 4];
            for k in 0..4 {
                let i = base - 1 + k as i64;
                idx[k] = i.clamp(0, in_n as i64 - 1) as usize;
                wgt[k] = cubic_weight(frac - (k as f64 - 1.0));
            }
            let sum: f64 = wgt.iter().sum();
            for w in &mut wgt {
                *w /= sum;
            }
            (idx, wgt)
        })
        .collect()
}

/// Catmull-Rom bicubic resize by a positive real factor, half-pixel
/// centers, clamped to [0, 1].
pub fn bicubic_resize(img: &ImageBuffer, factor: f64) -> ImageBuffer {
    assert!(factor > 0.0, "bicubic_resize needs factor > 0, got {factor}");
    let oh = ((img.height as f64) * factor).round() as usize;
    let ow = ((img.width as f64) * factor).round() as usize;
    assert!(oh >= 1 && ow >= 1, "bicubic_resize target {}x{} is empty", oh, ow);
    let ys = resample_axis(oh, img.height, factor);
    let xs = resample_axis(ow, img.width, factor);
    let mut out = ImageBuffer::zeros(oh, ow, img.channels);
    for c in 0..img.channels {
        // rows first
        let mut rows = vec![0.0; img.height * ow];
        for y in 0..img.height {
            for (x, (idx, wgt)) in xs.iter().enumerate() {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wgt[k] * img.get(c, y, idx[k]);
                }
                rows[y * ow + x] = acc;
            }
        }
        for (y, (idx, wgt)) in ys.iter().enumerate() {
            for x in 0..ow {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wgt[k] * rows[idx[k] * ow + x];
                }
                out.set(c, y, x, acc.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Non-overlapping box average. Dimensions that do not divide by the
/// factor are first reflect-padded up to the next multiple.
pub fn downsample(img: &ImageBuffer, factor: usize) -> ImageBuffer {
    assert!(factor >= 2, "downsample needs factor >= 2, got {factor}");
    let (h, w, c) = (img.height, img.width, img.channels);
    let ph = h.div_ceil(factor) * factor;
    let pw = w.div_ceil(factor) * factor;
    let padded: ImageBuffer = if ph == h && pw == w {
        img.clone()
    } else {
        let mut p = ImageBuffer::zeros(ph, pw, c);
        for ch in 0..c {
            for y in 0..ph {
                for x in 0..pw {
                    let sy = reflect(y as i64, h as i64);
                    let sx = reflect(x as i64, w as i64);
                    p.set(ch, y, x, img.get(ch, sy, sx));
                }
            }
        }
        p
    };
    let (oh, ow) = (ph / factor, pw / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = ImageBuffer::zeros(oh, ow, c);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += padded.get(ch, oy * factor + dy, ox * factor + dx);
                    }
                }
                out.set(ch, oy, ox, (acc * inv).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Isotropic total variation with forward differences, summed over
/// channels.
pub fn total_variation(img: &ImageBuffer) -> f64 {
    let (h, w) = (img.height, img.width);
    let mut tv = 0.0;
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let v = img.get(c, y, x);
                let dx = if x + 1 < w { img.get(c, y, x + 1) - v } else { 0.0 };
                let dy = if y + 1 < h { img.get(c, y + 1, x) - v } else { 0.0 };
                tv += (dx * dx + dy * dy).sqrt();
            }
        }
    }
    tv
}

/// Mean total variation per sample, comparable across resolutions.
pub fn mean_total_variation(img: &ImageBuffer) -> f64 {
    total_variation(img) / (img.height * img.width * img.channels) as f64
}

/// Primal objective 0.5||u - f||^2 + lambda TV(u) of the denoising model.
pub fn tv_objective(u: &ImageBuffer, f: &ImageBuffer, lambda: f64) -> f64 {
    let fid: f64 = u
        .data()
        .iter()
        .zip(f.data())
        .map(|(a, b)| 0.5 * (a - b) * (a - b))
        .sum();
    fid + lambda * total_variation(u)
}

/// Chambolle dual-projection TV denoising: approximate minimizer of
/// 0.5||u - img||^2 + lambda TV(u), dual step 1/8.
pub fn tv_denoise(img: &ImageBuffer, lambda: f64, iters: usize) -> ImageBuffer {
    assert!(lambda > 0.0, "tv_denoise needs lambda > 0, got {lambda}");
    assert!(iters >= 1, "tv_denoise needs iters >= 1, got {iters}");
    let (h, w) = (img.height, img.width);
    let n = h * w;
    let tau = 1.0 / 8.0;
    let mut out = ImageBuffer::zeros(h, w, img.channels);
    for c in 0..img.channels {
        let f: Vec<f64> = (0..n).map(|i| img.data()[c * n + i]).collect();
        // dual field p = (p1, p2), one pair per pixel
        let mut p1 = vec![0.0; n];
        let mut p2 = vec![0.0; n];
        let mut div = vec![0.0; n];
        let mut u = vec![0.0; n];
        for _ in 0..iters {
            // div p with backward differences (adjoint of forward gradient)
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let d1 = if x == 0 {
                        p1[i]
                    } else if x == w - 1 {
                        -p1[i - 1]
                    } else {
                        p1[i] - p1[i - 1]
                    };
                    let d2 = if y == 0 {
                        p2[i]
                    } else if y == h - 1 {
                        -p2[i - w]
                    } else {
                        p2[i] - p2[i - w]
                    };
                    div[i] = d1 + d2;
                }
            }
            for i in 0..n {
                u[i] = div[i] - f[i] / lambda;
            }
            // gradient of u with forward differences, then the normalized
            // fixed-point update
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let gx = if x + 1 < w { u[i + 1] - u[i] } else { 0.0 };
                    let gy = if y + 1 < h { u[i + w] - u[i] } else { 0.0 };
                    let norm = (gx * gx + gy * gy).sqrt();
                    let denom = 1.0 + tau * norm;
                    p1[i] = (p1[i] + tau * gx) / denom;
                    p2[i] = (p2[i] + tau * gy) / denom;
                }
            }
        }
        // primal solution u = f - lambda div p
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let d1 = if x == 0 {
                    p1[i]
                } else if x == w - 1 {
                    -p1[i - 1]
                } else {
                    p1[i] - p1[i - 1]
                };
                let d2 = if y == 0 {
                    p2[i]
                } else if y == h - 1 {
                    -p2[i - w]
                } else {
                    p2[i] - p2[i - w]
                };
                out.data_mut()[c * n + i] = (f[i] - lambda * (d1 + d2)).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Mean squared error between two same-sized images.
pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    assert!(
        a.same_dims(b),
        "mse: image dims {}x{}x{} vs {}x{}x{}",
        a.channels,
        a.height,
        a.width,
        b.channels,
        b.height,
        b.width
    );
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64
}

/// PSNR cap for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB for values in [0, 1], capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let m = mse(a, b);
    if m <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB)
}
