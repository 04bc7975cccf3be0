//! 2D convolution and transposed convolution via im2col/col2im and GEMM.
//!
//! All spatial ops work on single-sample `[C, H, W]` tensors; batching is the
//! caller's concern (per-sample tapes are evaluated in parallel and reduced in
//! a fixed order, which keeps training bit-reproducible).

use super::{Graph, Scalar, Var};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, Axis, IxDyn};

pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= k, "conv: kernel larger than padded input");
    (input + 2 * pad - k) / stride + 1
}

pub fn deconv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!((input - 1) * stride + k >= 2 * pad, "deconv: bad geometry");
    (input - 1) * stride + k - 2 * pad
}

fn dims3<F: Scalar>(x: &ArrayD<F>) -> (usize, usize, usize) {
    assert_eq!(x.ndim(), 3, "expected [C,H,W] tensor");
    (x.shape()[0], x.shape()[1], x.shape()[2])
}

/// Unfolds `[C, H, W]` into a `[C·K·K, H_out·W_out]` patch matrix.
pub fn im2col<F: Scalar>(x: &ArrayD<F>, k: usize, stride: usize, pad: usize) -> Array2<F> {
    let (c, h, w) = dims3(x);
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    let xs = x.as_slice().expect("im2col: standard layout");
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_base = (ci * h + iy as usize) * w;
                    let out_base = row_base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cs[out_base + ox] = xs[in_base + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds a patch matrix back onto a `[C, H, W]` grid,
/// accumulating overlapping contributions.
pub fn col2im<F: Scalar>(
    cols: &Array2<F>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<F> {
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    assert_eq!(cols.shape(), &[c * k * k, ho * wo], "col2im: shape mismatch");
    let mut x = ArrayD::zeros(IxDyn(&[c, h, w]));
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().expect("col2im: standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_base = (ci * h + iy as usize) * w;
                    let out_base = row_base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        xs[in_base + ix as usize] = xs[in_base + ix as usize] + cs[out_base + ox];
                    }
                }
            }
        }
    }
    x
}

impl<F: Scalar> Graph<F> {
    /// `y = conv2d(x, w) + b` with weight `[O, I, K, K]`, bias `[O]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).to_owned();
        let wv = self.value(w).to_owned();
        let bv = self.value(b).to_owned();
        let (ci, h, win) = dims3(&xv);
        assert_eq!(wv.ndim(), 4, "conv2d: weight must be [O,I,K,K]");
        let (o, i, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(wv.shape()[3], k, "conv2d: kernel must be square");
        assert_eq!(i, ci, "conv2d: input channel mismatch");
        assert_eq!(bv.len(), o, "conv2d: bias length mismatch");
        let ho = conv_out_size(h, k, stride, pad);
        let wo = conv_out_size(win, k, stride, pad);

        let cols = im2col(&xv, k, stride, pad);
        let w2 = wv.view().into_shape_with_order((o, i * k * k)).unwrap();
        let mut y2 = Array2::zeros((o, ho * wo));
        general_mat_mul(F::one(), &w2, &cols, F::zero(), &mut y2);
        for (mut row, &bias) in y2.outer_iter_mut().zip(bv.iter()) {
            row += bias;
        }
        let y = y2.into_shape_with_order(IxDyn(&[o, ho, wo])).unwrap();

        self.push_op(
            y,
            vec![x, w, b],
            Box::new(move |g, need| {
                let g2 = g.view().into_shape_with_order((o, ho * wo)).unwrap();
                let dw = need[1].then(|| {
                    let cols = im2col(&xv, k, stride, pad);
                    let mut dw2 = Array2::zeros((o, i * k * k));
                    general_mat_mul(F::one(), &g2, &cols.t(), F::zero(), &mut dw2);
                    dw2.into_shape_with_order(IxDyn(&[o, i, k, k])).unwrap()
                });
                let dx = need[0].then(|| {
                    let w2 = wv.view().into_shape_with_order((o, i * k * k)).unwrap();
                    let mut dcols = Array2::zeros((i * k * k, ho * wo));
                    general_mat_mul(F::one(), &w2.t(), &g2, F::zero(), &mut dcols);
                    col2im(&dcols, ci, h, win, k, stride, pad)
                });
                let db = need[2].then(|| {
                    let sums: Vec<F> = g.axis_iter(Axis(0)).map(|p| p.sum()).collect();
                    ArrayD::from_shape_vec(IxDyn(&[o]), sums).unwrap()
                });
                vec![dx, dw, db]
            }),
        )
    }

    /// Transposed convolution with weight `[I, O, K, K]`, bias `[O]`;
    /// the spatial adjoint of `conv2d` with the same kernel/stride/padding.
    pub fn conv2d_transpose(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).to_owned();
        let wv = self.value(w).to_owned();
        let bv = self.value(b).to_owned();
        let (ci, h, win) = dims3(&xv);
        assert_eq!(wv.ndim(), 4, "conv2d_transpose: weight must be [I,O,K,K]");
        let (i, o, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(wv.shape()[3], k, "conv2d_transpose: kernel must be square");
        assert_eq!(i, ci, "conv2d_transpose: input channel mismatch");
        assert_eq!(bv.len(), o, "conv2d_transpose: bias length mismatch");
        let ho = deconv_out_size(h, k, stride, pad);
        let wo = deconv_out_size(win, k, stride, pad);
        // Sanity: folding back must reproduce the input grid.
        assert_eq!(conv_out_size(ho, k, stride, pad), h);
        assert_eq!(conv_out_size(wo, k, stride, pad), win);

        let x2 = xv.view().into_shape_with_order((i, h * win)).unwrap();
        let w2 = wv.view().into_shape_with_order((i, o * k * k)).unwrap();
        let mut cols = Array2::zeros((o * k * k, h * win));
        general_mat_mul(F::one(), &w2.t(), &x2, F::zero(), &mut cols);
        let mut y = col2im(&cols, o, ho, wo, k, stride, pad);
        for (mut plane, &bias) in y.axis_iter_mut(Axis(0)).zip(bv.iter()) {
            plane += bias;
        }

        self.push_op(
            y,
            vec![x, w, b],
            Box::new(move |g, need| {
                let dcols = im2col(g, k, stride, pad); // [O·K·K, H·W_in]
                let dx = need[0].then(|| {
                    let w2 = wv.view().into_shape_with_order((i, o * k * k)).unwrap();
                    let mut dx2 = Array2::zeros((i, h * win));
                    general_mat_mul(F::one(), &w2, &dcols, F::zero(), &mut dx2);
                    dx2.into_shape_with_order(IxDyn(&[i, h, win])).unwrap()
                });
                let dw = need[1].then(|| {
                    let x2 = xv.view().into_shape_with_order((i, h * win)).unwrap();
                    let mut dw2 = Array2::zeros((i, o * k * k));
                    general_mat_mul(F::one(), &x2, &dcols.t(), F::zero(), &mut dw2);
                    dw2.into_shape_with_order(IxDyn(&[i, o, k, k])).unwrap()
                });
                let db = need[2].then(|| {
                    let sums: Vec<F> = g.axis_iter(Axis(0)).map(|p| p.sum()).collect();
                    ArrayD::from_shape_vec(IxDyn(&[o]), sums).unwrap()
                });
                vec![dx, dw, db]
            }),
        )
    }
}
