//! Forward-only pooling, used by the feature extractors.

use ndarray::{Array2, Array4};

/// Max pooling; padded positions never win.
pub fn max_pool2d(x: &Array4<f64>, k: usize, stride: usize, pad: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    Array4::from_shape_fn((n, c, ho, wo), |(ni, ci, oy, ox)| {
        let mut m = f64::NEG_INFINITY;
        for ky in 0..k {
            for kx in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                let ix = (ox * stride + kx) as isize - pad as isize;
                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                    m = m.max(x[[ni, ci, iy as usize, ix as usize]]);
                }
            }
        }
        m
    })
}

/// Average pooling with zero padding where padded positions are excluded
/// from the divisor.
pub fn avg_pool2d(x: &Array4<f64>, k: usize, stride: usize, pad: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    Array4::from_shape_fn((n, c, ho, wo), |(ni, ci, oy, ox)| {
        let (mut s, mut cnt) = (0.0, 0usize);
        for ky in 0..k {
            for kx in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                let ix = (ox * stride + kx) as isize - pad as isize;
                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                    s += x[[ni, ci, iy as usize, ix as usize]];
                    cnt += 1;
                }
            }
        }
        s / cnt.max(1) as f64
    })
}

/// Mean over the spatial axes: `(N, C, H, W)` → `(N, C)`.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let area = (h * w) as f64;
    Array2::from_shape_fn((n, c), |(ni, ci)| {
        let mut s = 0.0;
        for y in 0..h {
            for xx in 0..w {
                s += x[[ni, ci, y, xx]];
            }
        }
        s / area
    })
}
