//! Raw loops shared by forward and backward passes.

use alloc::vec;
use alloc::vec::Vec;

use crate::Real;

/// Geometry of a 2D cross-correlation over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `x` (`[C, H, W]`) into `[C*kh*kw, out_h*out_w]`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `x`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-output-index interpolation taps for half-pixel (align-corners=false)
/// bilinear resizing of one axis.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn bilinear_forward<T: Real>(
    x: &[T],
    planes: usize,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(ih, oh);
    let tx = bilinear_taps(iw, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * ih * iw..(p + 1) * ih * iw];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of_f64(wy0), T::of_f64(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::of_f64(wx0), T::of_f64(wx1));
                dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * iw + x0] + wx1 * src[y0 * iw + x1])
                    + wy1 * (wx0 * src[y1 * iw + x0] + wx1 * src[y1 * iw + x1]);
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Real>(
    g: &[T],
    planes: usize,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(ih, oh);
    let tx = bilinear_taps(iw, ow);
    let mut dx = vec![T::zero(); planes * ih * iw];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * ih * iw..(p + 1) * ih * iw];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = src[oy * ow + ox];
                dst[y0 * iw + x0] += T::of_f64(wy0 * wx0) * v;
                dst[y0 * iw + x1] += T::of_f64(wy0 * wx1) * v;
                dst[y1 * iw + x0] += T::of_f64(wy1 * wx0) * v;
                dst[y1 * iw + x1] += T::of_f64(wy1 * wx1) * v;
            }
        }
    }
    dx
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let v = x.as_f64();
    T::of_f64(0.5 * v * (1.0 + libm::erf(v * core::f64::consts::FRAC_1_SQRT_2)))
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let v = x.as_f64();
    let cdf = 0.5 * (1.0 + libm::erf(v * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * v * v) / libm::sqrt(2.0 * core::f64::consts::PI);
    T::of_f64(cdf + v * pdf)
}
