//! Convolution lowering: im2col + GEMM forward, col2im backward.

use super::{Shape, Tensor};
use crate::scalar::Scalar;

/// Boundary handling for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Out-of-frame taps read zero.
    Zero,
    /// Out-of-frame taps read the nearest edge pixel.
    Replicate,
}

pub(crate) fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Gather the receptive fields of one sample into a `[C*K*K, OH*OW]`
/// row-major matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    cols: &mut [T],
) {
    let oh = out_dim(h, k, stride, pad);
    let ow = out_dim(w, k, stride, pad);
    let plane = h * w;
    let out_plane = oh * ow;
    let mut row = 0usize;
    for ch in 0..c {
        let src = &x[ch * plane..(ch + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * out_plane..(row + 1) * out_plane];
                let mut o = 0usize;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    match mode {
                        PadMode::Zero => {
                            if iy < 0 || iy >= h as isize {
                                for _ in 0..ow {
                                    dst[o] = T::zero();
                                    o += 1;
                                }
                                continue;
                            }
                            let base = iy as usize * w;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                dst[o] = if ix < 0 || ix >= w as isize {
                                    T::zero()
                                } else {
                                    src[base + ix as usize]
                                };
                                o += 1;
                            }
                        }
                        PadMode::Replicate => {
                            let cy = iy.clamp(0, h as isize - 1) as usize;
                            let base = cy * w;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let cx = ix.clamp(0, w as isize - 1) as usize;
                                dst[o] = src[base + cx];
                                o += 1;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add a `[C*K*K, OH*OW]` gradient matrix back onto the input.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    dx: &mut [T],
) {
    let oh = out_dim(h, k, stride, pad);
    let ow = out_dim(w, k, stride, pad);
    let plane = h * w;
    let out_plane = oh * ow;
    let mut row = 0usize;
    for ch in 0..c {
        let dst = &mut dx[ch * plane..(ch + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * out_plane..(row + 1) * out_plane];
                let mut o = 0usize;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let cy = match mode {
                        PadMode::Zero => {
                            if iy < 0 || iy >= h as isize {
                                o += ow;
                                continue;
                            }
                            iy as usize
                        }
                        PadMode::Replicate => iy.clamp(0, h as isize - 1) as usize,
                    };
                    let base = cy * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        match mode {
                            PadMode::Zero => {
                                if ix >= 0 && ix < w as isize {
                                    dst[base + ix as usize] += src[o];
                                }
                            }
                            PadMode::Replicate => {
                                let cx = ix.clamp(0, w as isize - 1) as usize;
                                dst[base + cx] += src[o];
                            }
                        }
                        o += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// `y = w * x + b` with weight layout `[Cout, Cin, K, K]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> Tensor<T> {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(ws.c, xs.c, "conv weight/input channel mismatch");
    assert_eq!(ws.h, ws.w, "square kernels only");
    let k = ws.h;
    let (oh, ow) = (out_dim(xs.h, k, stride, pad), out_dim(xs.w, k, stride, pad));
    let (cout, ckk) = (ws.n, ws.c * k * k);
    let out_plane = oh * ow;
    let mut out = Tensor::zeros(Shape::nchw(xs.n, cout, oh, ow));
    let pointwise = k == 1 && stride == 1 && pad == 0;
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ckk * out_plane]
    };
    let in_len = xs.c * xs.h * xs.w;
    let out_len = cout * out_plane;
    for n in 0..xs.n {
        let xn = &x.data()[n * in_len..(n + 1) * in_len];
        let src: &[T] = if pointwise {
            xn
        } else {
            im2col(xn, xs.c, xs.h, xs.w, k, stride, pad, mode, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
        unsafe {
            T::gemm(
                cout,
                ckk,
                out_plane,
                T::one(),
                w.data().as_ptr(),
                ckk as isize,
                1,
                src.as_ptr(),
                out_plane as isize,
                1,
                T::zero(),
                dst.as_mut_ptr(),
                out_plane as isize,
                1,
            );
        }
        if let Some(bias) = b {
            for co in 0..cout {
                let bv = bias.data()[co];
                for v in &mut dst[co * out_plane..(co + 1) * out_plane] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    mode: PadMode,
    want_bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let xs = x.shape();
    let ws = w.shape();
    let gs = grad_out.shape();
    let k = ws.h;
    let (cout, ckk) = (ws.n, ws.c * k * k);
    let out_plane = gs.h * gs.w;
    let pointwise = k == 1 && stride == 1 && pad == 0;

    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(ws);
    let mut db = want_bias.then(|| Tensor::zeros(Shape::nchw(1, cout, 1, 1)));

    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ckk * out_plane]
    };
    let mut dcols = vec![T::zero(); ckk * out_plane];
    let in_len = xs.c * xs.h * xs.w;
    let out_len = cout * out_plane;

    for n in 0..xs.n {
        let xn = &x.data()[n * in_len..(n + 1) * in_len];
        let gn = &grad_out.data()[n * out_len..(n + 1) * out_len];
        let src: &[T] = if pointwise {
            xn
        } else {
            im2col(xn, xs.c, xs.h, xs.w, k, stride, pad, mode, &mut cols);
            &cols
        };
        // dW += g . cols^T
        unsafe {
            T::gemm(
                cout,
                out_plane,
                ckk,
                T::one(),
                gn.as_ptr(),
                out_plane as isize,
                1,
                src.as_ptr(),
                1,
                out_plane as isize,
                T::one(),
                dw.data_mut().as_mut_ptr(),
                ckk as isize,
                1,
            );
        }
        // dcols = W^T . g
        unsafe {
            T::gemm(
                ckk,
                cout,
                out_plane,
                T::one(),
                w.data().as_ptr(),
                1,
                ckk as isize,
                gn.as_ptr(),
                out_plane as isize,
                1,
                T::zero(),
                dcols.as_mut_ptr(),
                out_plane as isize,
                1,
            );
        }
        let dxn = &mut dx.data_mut()[n * in_len..(n + 1) * in_len];
        if pointwise {
            for (d, s) in dxn.iter_mut().zip(dcols.iter()) {
                *d += *s;
            }
        } else {
            col2im(&dcols, xs.c, xs.h, xs.w, k, stride, pad, mode, dxn);
        }
        if let Some(db) = db.as_mut() {
            for co in 0..cout {
                let mut acc = T::zero();
                for &v in &gn[co * out_plane..(co + 1) * out_plane] {
                    acc += v;
                }
                db.data_mut()[co] += acc;
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_preserves_input() {
        // 1x1 kernel, one channel in/out, weight 1.
        let x = Tensor::from_vec(Shape::nchw(1, 1, 2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Tensor::from_vec(Shape::nchw(1, 1, 1, 1), vec![1.0]);
        let y = conv2d_forward(&x, &w, None, 1, 0, PadMode::Zero);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn box_kernel_matches_hand_sum() {
        let x = Tensor::from_vec(
            Shape::nchw(1, 1, 3, 3),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        );
        let w = Tensor::from_vec(Shape::nchw(1, 1, 3, 3), vec![1.0f64; 9]);
        let y = conv2d_forward(&x, &w, None, 1, 1, PadMode::Zero);
        // center of the valid region sums the whole image
        assert_eq!(y.data()[4], 45.0);
        // top-left with zero padding sums the 2x2 corner
        assert_eq!(y.data()[0], 1.0 + 2.0 + 4.0 + 5.0);
        let yr = conv2d_forward(&x, &w, None, 1, 1, PadMode::Replicate);
        // replicate padding repeats row/column 0
        assert_eq!(yr.data()[0], 1.0 + 1.0 + 2.0 + 1.0 + 1.0 + 2.0 + 4.0 + 4.0 + 5.0);
    }

    #[test]
    fn strided_output_dims() {
        let x = Tensor::<f32>::zeros(Shape::nchw(2, 3, 64, 64));
        let w = Tensor::<f32>::zeros(Shape::nchw(8, 3, 3, 3));
        let y = conv2d_forward(&x, &w, None, 2, 1, PadMode::Zero);
        assert_eq!(y.shape(), Shape::nchw(2, 8, 32, 32));
    }
}
