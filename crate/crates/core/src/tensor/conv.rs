//! im2col-based 2-d convolution kernels.

use super::Real;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayD, ArrayView3, Axis, IxDyn};

/// Output spatial size of a convolution.
pub fn conv_out_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

/// Unfold one image `[C,H,W]` into a `[C*kh*kw, OH*OW]` patch matrix.
pub(crate) fn im2col(
    x: &ArrayView3<'_, Real>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<Real> {
    let (c, h, w) = x.dim();
    let (oh, ow) = conv_out_hw(h, w, kh, kw, stride, pad);
    let mut cols = Array2::<Real>::zeros((c * kh * kw, oh * ow));
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

/// Fold a `[C*kh*kw, OH*OW]` patch-gradient matrix back into `[C,H,W]`,
/// accumulating overlaps.
pub(crate) fn col2im(
    cols: &Array2<Real>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<Real> {
    let (oh, ow) = conv_out_hw(h, w, kh, kw, stride, pad);
    let mut x = Array3::<Real>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let col_row = cols.row(row);
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
                        x[[ci, ii as usize, jj as usize]] += col_row[oi * ow + oj];
                    }
                }
            }
        }
    }
    x
}

/// Forward convolution over a `[B,C,H,W]` input with `[O,C,kh,kw]` weights.
pub fn conv2d_forward(x: &ArrayD<Real>, w: &ArrayD<Real>, stride: usize, pad: usize) -> ArrayD<Real> {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 4, "conv input must be NCHW");
    assert_eq!(ws.len(), 4, "conv weight must be OIHW");
    assert_eq!(xs[1], ws[1], "channel mismatch: input {:?} weight {:?}", xs, ws);
    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = conv_out_hw(h, wd, kh, kw, stride, pad);
    let w2 = w.view().into_shape_with_order((o, c * kh * kw)).unwrap();
    let mut out = ArrayD::<Real>::zeros(IxDyn(&[b, o, oh, ow]));
    for bi in 0..b {
        let xi = x.index_axis(Axis(0), bi);
        let xi3 = xi.into_dimensionality::<ndarray::Ix3>().unwrap();
        let cols = im2col(&xi3, kh, kw, stride, pad);
        let mut ob = Array2::<Real>::zeros((o, oh * ow));
        general_mat_mul(1.0, &w2, &cols.view(), 0.0, &mut ob);
        let ob = ob.into_shape_with_order((o, oh, ow)).unwrap();
        out.index_axis_mut(Axis(0), bi).assign(&ob);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn conv_matches_direct_summation() {
        let x = Array::linspace(-1.0, 1.0, 2 * 3 * 5 * 4)
            .into_shape_with_order(IxDyn(&[2, 3, 5, 4]))
            .unwrap();
        let w = Array::linspace(-0.5, 0.7, 2 * 3 * 3 * 3)
            .into_shape_with_order(IxDyn(&[2, 3, 3, 3]))
            .unwrap();
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let got = conv2d_forward(&x, &w, stride, pad);
            let (oh, ow) = conv_out_hw(5, 4, 3, 3, stride, pad);
            assert_eq!(got.shape(), &[2, 2, oh, ow]);
            for bi in 0..2 {
                for oi in 0..2 {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..3 {
                                for ki in 0..3 {
                                    for kj in 0..3 {
                                        let ii = (i * stride + ki) as isize - pad as isize;
                                        let jj = (j * stride + kj) as isize - pad as isize;
                                        if ii < 0 || jj < 0 || ii >= 5 || jj >= 4 {
                                            continue;
                                        }
                                        acc += x[[bi, ci, ii as usize, jj as usize]]
                                            * w[[oi, ci, ki, kj]];
                                    }
                                }
                            }
                            assert!((got[[bi, oi, i, j]] - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}
