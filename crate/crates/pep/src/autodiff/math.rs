//! Dense numeric kernels shared by the graph ops: im2col/col2im convolution
//! lowering and bilinear resampling tap tables.

use ndarray::{Array2, ArrayView3, ArrayViewMut3};

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    debug_assert!(input + 2 * pad >= kernel);
    (input + 2 * pad - kernel) / stride + 1
}

/// Row-major copy of a matrix unless it already is one. ndarray's `dot`
/// returns a column-major result when both operand leading strides are 1;
/// reshapes downstream require row-major.
pub fn standardize(m: Array2<f64>) -> Array2<f64> {
    if m.is_standard_layout() {
        m
    } else {
        let dim = m.raw_dim();
        Array2::from_shape_vec(dim, m.iter().copied().collect()).expect("same element count")
    }
}

/// Lower a `[C, H, W]` tensor into a `[C*kh*kw, oh*ow]` patch matrix.
/// Out-of-bounds taps (from zero padding) stay zero.
pub fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut out_row = cols.row_mut(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        out_row[oi * ow + oj] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a patch-matrix gradient back onto the
/// `[C, H, W]` input gradient.
pub fn col2im_acc(
    dcols: &Array2<f64>,
    dx: &mut ArrayViewMut3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let (c, h, w) = dx.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    debug_assert_eq!(dcols.dim(), (c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = dcols.row(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dx[[ci, ii as usize, jj as usize]] += src[oi * ow + oj];
                    }
                }
            }
        }
    }
}

/// Two-tap bilinear sampling table along one axis (half-pixel centers,
/// edge-clamped). Entry `i` holds `(lo, hi, w_lo, w_hi)` for output index `i`.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = (i as f64 + 0.5) * scale - 0.5;
            let floor = src.floor();
            let t = src - floor;
            let lo = (floor.max(0.0) as usize).min(input - 1);
            let hi = ((floor as isize + 1).max(0) as usize).min(input - 1);
            (lo, hi, 1.0 - t, t)
        })
        .collect()
}
