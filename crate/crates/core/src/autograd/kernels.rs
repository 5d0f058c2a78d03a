//! Raw spatial kernels over channel-major slices.

use ndarray::Array2;

use super::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(in_c: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kernel == 0 || in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return None;
        }
        Some(ConvGeom {
            in_c,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }
}

pub fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Array2<T> {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let n_out = g.out_h * g.out_w;
    let mut cols = vec![T::zero(); g.patch_len() * n_out];
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.patch_len(), n_out), cols).expect("im2col shape")
}

pub fn col2im<T: Float>(cols: &Array2<T>, g: &ConvGeom, dx: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let n_out = g.out_h * g.out_w;
    let cols = cols.as_slice().expect("standard layout");
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < g.in_w as isize {
                            plane[iy as usize * g.in_w + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Half-open bin `[start, end)` of output cell `i` when `len` input cells
/// are pooled into `out` cells.
pub fn adaptive_bin(i: usize, out: usize, len: usize) -> (usize, usize) {
    let start = (i * len) / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end.max(start + 1))
}

/// Precomputed bilinear taps of RoIAlign: for every `(roi, bin)` the list of
/// `(spatial offset, weight)` pairs whose weighted sum is the bin's average.
#[derive(Clone, Debug)]
pub struct RoiAlignPlan {
    pub rois: usize,
    pub pooled: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub taps: Vec<Vec<(u32, f64)>>,
}

/// Builds the sampling plan for boxes in input-image coordinates.
///
/// Boxes are mapped by `spatial_scale` with a half-pixel offset so that the
/// sample points are continuous feature-map coordinates. Each bin averages a
/// `sampling x sampling` grid of bilinear samples; samples more than one
/// cell outside the map contribute zero.
pub fn roi_align_plan(
    rois: &[[f64; 4]],
    feat_h: usize,
    feat_w: usize,
    pooled: usize,
    spatial_scale: f64,
    sampling: usize,
) -> RoiAlignPlan {
    let mut taps = Vec::with_capacity(rois.len() * pooled * pooled);
    let (fh, fw) = (feat_h as f64, feat_w as f64);
    for r in rois {
        let x1 = r[0] * spatial_scale - 0.5;
        let y1 = r[1] * spatial_scale - 0.5;
        let x2 = r[2] * spatial_scale - 0.5;
        let y2 = r[3] * spatial_scale - 0.5;
        let bin_w = (x2 - x1) / pooled as f64;
        let bin_h = (y2 - y1) / pooled as f64;
        let count = (sampling * sampling) as f64;
        for ph in 0..pooled {
            for pw in 0..pooled {
                let mut bin: Vec<(u32, f64)> = Vec::with_capacity(4 * sampling * sampling);
                for iy in 0..sampling {
                    let y = y1 + ph as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sampling as f64;
                    for ix in 0..sampling {
                        let x = x1 + pw as f64 * bin_w + (ix as f64 + 0.5) * bin_w / sampling as f64;
                        if y < -1.0 || y > fh || x < -1.0 || x > fw {
                            continue;
                        }
                        let (ylo, yhi, ly) = bilinear_axis(y.max(0.0), feat_h);
                        let (xlo, xhi, lx) = bilinear_axis(x.max(0.0), feat_w);
                        let (hy, hx) = (1.0 - ly, 1.0 - lx);
                        for (yy, xx, w) in [
                            (ylo, xlo, hy * hx),
                            (ylo, xhi, hy * lx),
                            (yhi, xlo, ly * hx),
                            (yhi, xhi, ly * lx),
                        ] {
                            if w != 0.0 {
                                bin.push(((yy * feat_w + xx) as u32, w / count));
                            }
                        }
                    }
                }
                taps.push(bin);
            }
        }
    }
    RoiAlignPlan {
        rois: rois.len(),
        pooled,
        feat_h,
        feat_w,
        taps,
    }
}

fn bilinear_axis(v: f64, len: usize) -> (usize, usize, f64) {
    let lo = v.floor() as usize;
    if lo >= len - 1 {
        (len - 1, len - 1, 0.0)
    } else {
        (lo, lo + 1, v - lo as f64)
    }
}

impl RoiAlignPlan {
    /// `feat` is `C x H x W`; output is `R x C x P x P`.
    pub fn forward<T: Float>(&self, feat: &[T], channels: usize) -> Vec<T> {
        let plane = self.feat_h * self.feat_w;
        let bins = self.pooled * self.pooled;
        let mut out = vec![T::zero(); self.rois * channels * bins];
        for r in 0..self.rois {
            for c in 0..channels {
                let f = &feat[c * plane..(c + 1) * plane];
                for b in 0..bins {
                    let mut acc = T::zero();
                    for &(off, w) in &self.taps[r * bins + b] {
                        acc += f[off as usize] * T::from(w).unwrap();
                    }
                    out[(r * channels + c) * bins + b] = acc;
                }
            }
        }
        out
    }

    pub fn backward<T: Float>(&self, grad_out: &[T], channels: usize, dfeat: &mut [T]) {
        let plane = self.feat_h * self.feat_w;
        let bins = self.pooled * self.pooled;
        for r in 0..self.rois {
            for c in 0..channels {
                let df = &mut dfeat[c * plane..(c + 1) * plane];
                for b in 0..bins {
                    let g = grad_out[(r * channels + c) * bins + b];
                    if g == T::zero() {
                        continue;
                    }
                    for &(off, w) in &self.taps[r * bins + b] {
                        df[off as usize] += g * T::from(w).unwrap();
                    }
                }
            }
        }
    }
}
