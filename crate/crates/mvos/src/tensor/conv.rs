//! Convolution kernels: im2col + GEMM forward, col2im backward.
//! Cross-correlation semantics (no kernel flip).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Shape, Tensor};

/// Validated geometry of a conv2d call.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Conv2dSpec {
    pub fn resolve(x: Shape, w: Shape, bias: Option<Shape>, stride: usize, pad: usize) -> Result<Conv2dSpec> {
        if w.h != w.w {
            return Err(Error::Config(format!("conv kernel must be square, got {}x{}", w.h, w.w)));
        }
        let k = w.h;
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv kernel size must be odd, got {k}")));
        }
        if stride < 1 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        if w.c != x.c {
            return Err(Error::dim("in_channels", w.c, x.c, "conv2d input vs kernel"));
        }
        if let Some(b) = bias {
            if !(b.n == 1 && b.c == w.n && b.h == 1 && b.w == 1) {
                return Err(Error::dim("bias_channels", w.n, b.c, "conv2d bias"));
            }
        }
        let h_num = x.h + 2 * pad;
        let w_num = x.w + 2 * pad;
        if h_num < k || w_num < k || (h_num - k) % stride != 0 || (w_num - k) % stride != 0 {
            return Err(Error::Config(format!(
                "conv output size not integral: input {}x{}, k={k}, stride={stride}, pad={pad}",
                x.h, x.w
            )));
        }
        Ok(Conv2dSpec {
            n: x.n,
            c_in: x.c,
            h: x.h,
            w: x.w,
            c_out: w.n,
            k,
            stride,
            pad,
            h_out: (h_num - k) / stride + 1,
            w_out: (w_num - k) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.c_out, self.h_out, self.w_out)
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfold one batch image into a (Cin*k*k, Hout*Wout) column matrix.
fn im2col<E: Scalar>(spec: &Conv2dSpec, x: &[E], cols: &mut [E]) {
    let (k, stride, pad) = (spec.k, spec.stride, spec.pad);
    let (h, w) = (spec.h, spec.w);
    let (h_out, w_out) = (spec.h_out, spec.w_out);
    let n_cols = spec.col_cols();
    for c in 0..spec.c_in {
        let x_c = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let out_row = &mut cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..h_out {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut out_row[oy * w_out..(oy + 1) * w_out];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(E::ZERO);
                        continue;
                    }
                    let src_row = &x_c[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            E::ZERO
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter a (Cin*k*k, Hout*Wout) column-gradient back onto the input image.
fn col2im<E: Scalar>(spec: &Conv2dSpec, cols: &[E], dx: &mut [E]) {
    let (k, stride, pad) = (spec.k, spec.stride, spec.pad);
    let (h, w) = (spec.h, spec.w);
    let (h_out, w_out) = (spec.h_out, spec.w_out);
    let n_cols = spec.col_cols();
    for c in 0..spec.c_in {
        let dx_c = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let col_row = &cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..h_out {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &col_row[oy * w_out..(oy + 1) * w_out];
                    let dst_row = &mut dx_c[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<E: Scalar>(
    spec: &Conv2dSpec,
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
) -> Tensor<E> {
    let mut out = Tensor::zeros(spec.out_shape());
    let mut cols = vec![E::ZERO; spec.col_rows() * spec.col_cols()];
    let x_stride = spec.c_in * spec.h * spec.w;
    let y_stride = spec.c_out * spec.h_out * spec.w_out;
    for n in 0..spec.n {
        im2col(spec, &x.data[n * x_stride..(n + 1) * x_stride], &mut cols);
        E::gemm(
            spec.c_out,
            spec.col_rows(),
            spec.col_cols(),
            E::ONE,
            &w.data,
            &cols,
            E::ZERO,
            &mut out.data[n * y_stride..(n + 1) * y_stride],
        );
    }
    if let Some(b) = b {
        let hw = spec.h_out * spec.w_out;
        for n in 0..spec.n {
            for c in 0..spec.c_out {
                let bias = b.data[c];
                let base = (n * spec.c_out + c) * hw;
                for v in &mut out.data[base..base + hw] {
                    *v += bias;
                }
            }
        }
    }
    out
}

/// Gradients for (x, w, b). `dy` is the upstream gradient over the output.
pub fn conv2d_backward<E: Scalar>(
    spec: &Conv2dSpec,
    x: &Tensor<E>,
    w: &Tensor<E>,
    dy: &[E],
    dx: Option<&mut Vec<E>>,
    dw: Option<&mut Vec<E>>,
    db: Option<&mut Vec<E>>,
) {
    let x_stride = spec.c_in * spec.h * spec.w;
    let y_stride = spec.c_out * spec.h_out * spec.w_out;
    let rows = spec.col_rows();
    let n_cols = spec.col_cols();

    if let Some(db) = db {
        let hw = spec.h_out * spec.w_out;
        for n in 0..spec.n {
            for c in 0..spec.c_out {
                let base = (n * spec.c_out + c) * hw;
                let mut s = E::ZERO;
                for &g in &dy[base..base + hw] {
                    s += g;
                }
                db[c] += s;
            }
        }
    }

    let need_dx = dx.is_some();
    let need_dw = dw.is_some();
    if !need_dx && !need_dw {
        return;
    }

    let mut cols = vec![E::ZERO; rows * n_cols];
    let mut dcols = vec![E::ZERO; rows * n_cols];
    let mut dx = dx;
    let mut dw = dw;
    for n in 0..spec.n {
        let dy_n = &dy[n * y_stride..(n + 1) * y_stride];
        if need_dw {
            im2col(spec, &x.data[n * x_stride..(n + 1) * x_stride], &mut cols);
            // dW(c_out, rows) += dy_n(c_out, cols) * cols(rows, cols)^T
            gemm_nt(
                spec.c_out,
                n_cols,
                rows,
                dy_n,
                &cols,
                dw.as_mut().unwrap(),
            );
        }
        if need_dx {
            // dcols(rows, cols) = W(c_out, rows)^T * dy_n(c_out, cols)
            gemm_tn(rows, spec.c_out, n_cols, &w.data, dy_n, &mut dcols);
            col2im(
                spec,
                &dcols,
                &mut dx.as_mut().unwrap()[n * x_stride..(n + 1) * x_stride],
            );
        }
    }
}

/// C(m,n) += A(m,k) * B(n,k)^T
fn gemm_nt<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    // B is (n, k) row-major; its transpose has row stride 1, col stride k.
    E::gemm_strided(m, k, n, E::ONE, a, k as isize, 1, b, 1, k as isize, E::ONE, c, n as isize, 1);
}

/// C(m,n) = A(k,m)^T * B(k,n)
fn gemm_tn<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    // A is (k, m) row-major; its transpose has row stride 1, col stride m.
    E::gemm_strided(m, k, n, E::ONE, a, 1, m as isize, b, n as isize, 1, E::ZERO, c, n as isize, 1);
}

/// Bilinear resample with align-corners-false coordinates and edge clamping.
/// Works for both up- and down-scaling; the tape's upsample op restricts to
/// upscaling per its contract, crop-and-resize uses the general form.
pub fn bilinear_resize<E: Scalar>(src: &Tensor<E>, out_h: usize, out_w: usize) -> Tensor<E> {
    let (n, c, h, w) = (src.shape.n, src.shape.c, src.shape.h, src.shape.w);
    let mut out = Tensor::zeros(Shape::new(n, c, out_h, out_w));
    let xw = axis_weights(w, out_w);
    let yw = axis_weights(h, out_h);
    for ni in 0..n {
        for ci in 0..c {
            let src_plane = &src.data[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let dst_plane = &mut out.data[(ni * c + ci) * out_h * out_w..(ni * c + ci + 1) * out_h * out_w];
            for oy in 0..out_h {
                let (y0, y1, fy) = yw[oy];
                let wy1 = E::from_f64(fy);
                let wy0 = E::ONE - wy1;
                for ox in 0..out_w {
                    let (x0, x1, fx) = xw[ox];
                    let wx1 = E::from_f64(fx);
                    let wx0 = E::ONE - wx1;
                    let v = src_plane[y0 * w + x0] * wy0 * wx0
                        + src_plane[y0 * w + x1] * wy0 * wx1
                        + src_plane[y1 * w + x0] * wy1 * wx0
                        + src_plane[y1 * w + x1] * wy1 * wx1;
                    dst_plane[oy * out_w + ox] = v;
                }
            }
        }
    }
    out
}

/// Scatter upstream gradients through the same bilinear weights.
pub fn bilinear_resize_backward<E: Scalar>(
    src_shape: Shape,
    out_h: usize,
    out_w: usize,
    dy: &[E],
    dx: &mut [E],
) {
    let (n, c, h, w) = (src_shape.n, src_shape.c, src_shape.h, src_shape.w);
    let xw = axis_weights(w, out_w);
    let yw = axis_weights(h, out_h);
    for ni in 0..n {
        for ci in 0..c {
            let dst = &mut dx[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let up = &dy[(ni * c + ci) * out_h * out_w..(ni * c + ci + 1) * out_h * out_w];
            for oy in 0..out_h {
                let (y0, y1, fy) = yw[oy];
                let wy1 = E::from_f64(fy);
                let wy0 = E::ONE - wy1;
                for ox in 0..out_w {
                    let (x0, x1, fx) = xw[ox];
                    let wx1 = E::from_f64(fx);
                    let wx0 = E::ONE - wx1;
                    let g = up[oy * out_w + ox];
                    dst[y0 * w + x0] += g * wy0 * wx0;
                    dst[y0 * w + x1] += g * wy0 * wx1;
                    dst[y1 * w + x0] += g * wy1 * wx0;
                    dst[y1 * w + x1] += g * wy1 * wx1;
                }
            }
        }
    }
}

/// Per output index: (lo index, hi index, hi weight). Source coordinate is
/// (i + 0.5) * in / out - 0.5, clamped to the valid range.
fn axis_weights(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = (i as f64 + 0.5) * scale - 0.5;
            if src <= 0.0 {
                (0, 0, 0.0)
            } else if src >= (in_len - 1) as f64 {
                (in_len - 1, in_len - 1, 0.0)
            } else {
                let lo = src.floor() as usize;
                (lo, lo + 1, src - lo as f64)
            }
        })
        .collect()
}
