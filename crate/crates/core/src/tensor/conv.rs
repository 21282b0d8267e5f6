//! Convolution kernels (patch extraction + GEMM) and the dense matmul helper.

/// `c = a · b (+ c when accumulate)`, where `a` is `m×k` and `b` is `k×n`,
/// each given with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let a_last = (m - 1) * a_strides.0 + (k - 1) * a_strides.1;
    let b_last = (k - 1) * b_strides.0 + (n - 1) * b_strides.1;
    assert!(a_last < a.len() && b_last < b.len(), "gemm operand too small");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every index touched by the kernel is bounded by the asserts above
    // and the output is a dense row-major m×n block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a convolution along one axis, or `None` when the kernel
/// does not fit the padded input.
pub fn conv2d_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_area(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Source pixel for patch row `(ci, ky, kx)` at output `(oy, ox)`.
    #[inline]
    fn source(&self, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }

    /// Patch matrix `[c_in·kh·kw, h_out·w_out]` for one image.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let area = self.out_area();
        for ci in 0..self.c_in {
            let plane = &image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * area..(row + 1) * area];
                    for oy in 0..self.h_out {
                        for ox in 0..self.w_out {
                            dst[oy * self.w_out + ox] = match self.source(ky, kx, oy, ox) {
                                Some((y, x)) => plane[y * self.w + x],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a patch-gradient matrix back onto one image gradient.
    fn col2im(&self, cols: &[f64], image_grad: &mut [f64]) {
        let area = self.out_area();
        for ci in 0..self.c_in {
            let plane = &mut image_grad[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * area..(row + 1) * area];
                    for oy in 0..self.h_out {
                        for ox in 0..self.w_out {
                            if let Some((y, x)) = self.source(ky, kx, oy, ox) {
                                plane[y * self.w + x] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let area = g.out_area();
    let plen = g.patch_len();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * area;
    let mut out = vec![0.0; g.batch * out_len];
    let mut cols = vec![0.0; plen * area];
    for b in 0..g.batch {
        g.im2col(&input[b * in_len..(b + 1) * in_len], &mut cols);
        gemm(
            g.c_out,
            plen,
            area,
            kernel,
            (plen, 1),
            &cols,
            (area, 1),
            &mut out[b * out_len..(b + 1) * out_len],
            false,
        );
    }
    out
}

/// Returns `(input_grad, kernel_grad)`; either is skipped when not requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let area = g.out_area();
    let plen = g.patch_len();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * area;
    let mut grad_in = want_input.then(|| vec![0.0; g.batch * in_len]);
    let mut grad_k = want_kernel.then(|| vec![0.0; g.c_out * plen]);
    let mut cols = vec![0.0; plen * area];
    for b in 0..g.batch {
        let go = &grad_out[b * out_len..(b + 1) * out_len];
        if let Some(gk) = grad_k.as_mut() {
            g.im2col(&input[b * in_len..(b + 1) * in_len], &mut cols);
            // dK[co, p] += Σ_a dOut[co, a] · cols[p, a]
            gemm(g.c_out, area, plen, go, (area, 1), &cols, (1, area), gk, true);
        }
        if let Some(gi) = grad_in.as_mut() {
            // dCols[p, a] = Σ_co K[co, p] · dOut[co, a]
            gemm(plen, g.c_out, area, kernel, (1, plen), go, (area, 1), &mut cols, false);
            g.col2im(&cols, &mut gi[b * in_len..(b + 1) * in_len]);
        }
    }
    (grad_in, grad_k)
}

/// Direct nested-loop implementations kept as test oracles.
pub mod reference {
    /// Zero-padded cross-correlation over `[B,Cin,H,W]` with kernel `[Cout,Cin,kh,kw]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_naive(
        input: &[f64],
        dims: [usize; 4],
        kernel: &[f64],
        kdims: [usize; 4],
        stride: usize,
        padding: usize,
    ) -> (Vec<f64>, [usize; 4]) {
        let [b, ci, h, w] = dims;
        let [co, kci, kh, kw] = kdims;
        assert_eq!(ci, kci);
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; b * co * ho * wo];
        for n in 0..b {
            for o in 0..co {
                for y in 0..ho {
                    for x in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride + ky) as isize - padding as isize;
                                    let ix = (x * stride + kx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let iv = input[((n * ci + c) * h + iy as usize) * w + ix as usize];
                                    let kv = kernel[((o * ci + c) * kh + ky) * kw + kx];
                                    acc += iv * kv;
                                }
                            }
                        }
                        out[((n * co + o) * ho + y) * wo + x] = acc;
                    }
                }
            }
        }
        (out, [b, co, ho, wo])
    }

    /// Triple-loop `x · wᵀ + bias` for `x: [B,N]`, `w: [M,N]`.
    pub fn linear_naive(x: &[f64], rows: usize, n: usize, w: &[f64], m: usize, bias: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            for j in 0..m {
                let mut acc = bias[j];
                for k in 0..n {
                    acc += x[r * n + k] * w[j * n + k];
                }
                out[r * m + j] = acc;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_arithmetic() {
        assert_eq!(conv2d_output_extent(32, 3, 2, 0), Some(15));
        assert_eq!(conv2d_output_extent(15, 3, 1, 0), Some(13));
        assert_eq!(conv2d_output_extent(5, 3, 1, 1), Some(5));
        assert_eq!(conv2d_output_extent(2, 3, 1, 0), None);
        assert_eq!(conv2d_output_extent(4, 3, 0, 0), None);
    }

    #[test]
    fn gemm_matches_hand_product() {
        // [1 2; 3 4] · [5 6; 7 8]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, (2, 1), &b, (2, 1), &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // transposed a
        gemm(2, 2, 2, &a, (1, 2), &b, (2, 1), &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }
}
