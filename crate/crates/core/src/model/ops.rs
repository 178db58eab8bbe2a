//! Per-sample tensor kernels over HWC `f32` buffers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(h: usize, w: usize, c: usize) -> Self {
        Shape { h, w, c }
    }

    pub const fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Valid,
    /// TensorFlow "same": output `⌈in/stride⌉`, extra padding at the end.
    Same,
}

/// Output length and leading pad along one spatial axis.
pub fn out_len(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => {
            assert!(input >= kernel, "kernel {kernel} larger than input {input}");
            ((input - kernel) / stride + 1, 0)
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            (out, total / 2)
        }
    }
}

/// Geometry of a strided sliding window over an HWC input.
#[derive(Debug, Clone, Copy)]
pub struct Window {
    pub input: Shape,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(input: Shape, kernel: usize, stride: usize, padding: Padding) -> Self {
        let (out_h, pad_top) = out_len(input.h, kernel, stride, padding);
        let (out_w, pad_left) = out_len(input.w, kernel, stride, padding);
        Window {
            input,
            kernel,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        }
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    pub fn src(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + k).checked_sub(pad)?;
        (i < limit).then_some(i)
    }

    /// True when patches are the input itself (1×1, stride 1).
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }
}

/// Unfolds the input into a `positions × (k·k·c)` matrix.
pub fn im2col(x: &[f32], win: &Window, out: &mut Vec<f32>) {
    let Shape { h, w, c } = win.input;
    let k = win.kernel;
    let row_len = k * k * c;
    out.clear();
    out.resize(win.positions() * row_len, 0.0);
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let row = &mut out[(oy * win.out_w + ox) * row_len..][..row_len];
            for ky in 0..k {
                let Some(iy) = win.src(oy, ky, win.pad_top, h) else { continue };
                for kx in 0..k {
                    let Some(ix) = win.src(ox, kx, win.pad_left, w) else { continue };
                    let src = &x[(iy * w + ix) * c..][..c];
                    row[(ky * k + kx) * c..][..c].copy_from_slice(src);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into `dx`.
pub fn col2im(cols: &[f32], win: &Window, dx: &mut [f32]) {
    let Shape { h, w, c } = win.input;
    let k = win.kernel;
    let row_len = k * k * c;
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let row = &cols[(oy * win.out_w + ox) * row_len..][..row_len];
            for ky in 0..k {
                let Some(iy) = win.src(oy, ky, win.pad_top, h) else { continue };
                for kx in 0..k {
                    let Some(ix) = win.src(ox, kx, win.pad_left, w) else { continue };
                    let dst = &mut dx[(iy * w + ix) * c..][..c];
                    for (d, s) in dst.iter_mut().zip(&row[(ky * k + kx) * c..][..c]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `C = A·B + beta·C` with optional transposes; all matrices row-major,
/// `A` is `m×k` after transposition, `B` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], trans_a: bool, b: &[f32], trans_b: bool, beta: f32, c: &mut [f32]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths asserted above; strides describe in-bounds row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_matches_tensorflow() {
        assert_eq!(out_len(224, 3, 2, Padding::Same), (112, 0));
        assert_eq!(out_len(7, 3, 1, Padding::Same), (7, 1));
        assert_eq!(out_len(109, 3, 2, Padding::Same), (55, 1));
        assert_eq!(out_len(230, 7, 2, Padding::Valid), (112, 0));
        assert_eq!(out_len(224, 4, 4, Padding::Valid), (56, 0));
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let shape = Shape::new(5, 4, 2);
        let win = Window::new(shape, 3, 2, Padding::Same);
        let x: Vec<f32> = (0..shape.len()).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut cols = Vec::new();
        im2col(&x, &win, &mut cols);
        let y: Vec<f32> = (0..cols.len()).map(|i| (i as f32 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut dx = vec![0.0; shape.len()];
        col2im(&y, &win, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}
