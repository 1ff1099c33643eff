//! Dense compute kernels behind the tape primitives.
//!
//! Each output element is produced by the same fixed sequential inner loop in
//! both variants; the parallel versions only split independent output rows
//! across threads. Results are therefore bitwise identical whichever path
//! runs, and identical across thread counts.

/// Minimum number of output elements before the dispatching wrappers pick the
/// parallel variant. Below this the thread handoff costs more than the work.
pub const PAR_MIN_ELEMS: usize = 4096;

/// Sequential kernels. Always available; the reference implementations.
pub mod seq {
    /// `out[m,n] = a[m,k] . b[k,n]`
    pub fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        for i in 0..m {
            row_nn(&a[i * k..(i + 1) * k], b, &mut out[i * n..(i + 1) * n], k, n);
        }
    }

    /// One output row of `matmul_nn`: `orow[n] = arow[k] . b[k,n]`.
    pub(crate) fn row_nn(arow: &[f64], b: &[f64], orow: &mut [f64], k: usize, n: usize) {
        orow.fill(0.0);
        for (p, &av) in arow.iter().enumerate().take(k) {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }

    /// `out[m,n] = a[m,k] . b[n,k]^T` (row-by-row dot products).
    pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        debug_assert_eq!(out.len(), m * n);
        for i in 0..m {
            row_nt(&a[i * k..(i + 1) * k], b, &mut out[i * n..(i + 1) * n], k, n);
        }
    }

    pub(crate) fn row_nt(arow: &[f64], b: &[f64], orow: &mut [f64], k: usize, n: usize) {
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            orow[j] = acc;
        }
    }

    /// `out[k,n] = a[m,k]^T . b[m,n]`
    pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), m * n);
        debug_assert_eq!(out.len(), k * n);
        for p in 0..k {
            row_tn(a, b, &mut out[p * n..(p + 1) * n], p, m, k, n);
        }
    }

    pub(crate) fn row_tn(
        a: &[f64],
        b: &[f64],
        orow: &mut [f64],
        p: usize,
        m: usize,
        k: usize,
        n: usize,
    ) {
        orow.fill(0.0);
        for i in 0..m {
            let av = a[i * k + p];
            let brow = &b[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }

    /// Unrolls convolution patches into a matrix.
    ///
    /// Input `x` has shape `(batch, ci, h, w)`; output `patches` has
    /// `batch*oh*ow` rows and `kh*kh*ci` columns, with column order
    /// `(ky, kx, c)` so it multiplies directly against a `(kh, kh, ci, co)`
    /// weight tensor flattened row-major.
    #[allow(clippy::too_many_arguments)]
    pub fn im2col(
        x: &[f64],
        patches: &mut [f64],
        batch: usize,
        ci: usize,
        h: usize,
        w: usize,
        kh: usize,
        stride: usize,
    ) {
        let (oh, ow) = out_dims(h, w, kh, stride);
        let cols = kh * kh * ci;
        debug_assert_eq!(patches.len(), batch * oh * ow * cols);
        for row in 0..batch * oh * ow {
            patch_row(
                x,
                &mut patches[row * cols..(row + 1) * cols],
                row,
                ci,
                h,
                w,
                kh,
                stride,
                oh,
                ow,
            );
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn patch_row(
        x: &[f64],
        prow: &mut [f64],
        row: usize,
        ci: usize,
        h: usize,
        w: usize,
        kh: usize,
        stride: usize,
        oh: usize,
        ow: usize,
    ) {
        let b = row / (oh * ow);
        let oy = (row / ow) % oh;
        let ox = row % ow;
        let mut col = 0;
        for ky in 0..kh {
            for kx in 0..kh {
                let iy = oy * stride + ky;
                let ix = ox * stride + kx;
                for c in 0..ci {
                    prow[col] = x[((b * ci + c) * h + iy) * w + ix];
                    col += 1;
                }
            }
        }
    }

    /// Scatter-adds patch gradients back onto the input layout (inverse of
    /// [`im2col`]). Overlapping windows accumulate, so this stays sequential.
    #[allow(clippy::too_many_arguments)]
    pub fn col2im(
        dpatches: &[f64],
        dx: &mut [f64],
        batch: usize,
        ci: usize,
        h: usize,
        w: usize,
        kh: usize,
        stride: usize,
    ) {
        let (oh, ow) = out_dims(h, w, kh, stride);
        let cols = kh * kh * ci;
        debug_assert_eq!(dpatches.len(), batch * oh * ow * cols);
        debug_assert_eq!(dx.len(), batch * ci * h * w);
        for row in 0..batch * oh * ow {
            let b = row / (oh * ow);
            let oy = (row / ow) % oh;
            let ox = row % ow;
            let prow = &dpatches[row * cols..(row + 1) * cols];
            let mut col = 0;
            for ky in 0..kh {
                for kx in 0..kh {
                    let iy = oy * stride + ky;
                    let ix = ox * stride + kx;
                    for c in 0..ci {
                        dx[((b * ci + c) * h + iy) * w + ix] += prow[col];
                        col += 1;
                    }
                }
            }
        }
    }

    /// Output spatial dims of a valid (unpadded) square convolution.
    pub fn out_dims(h: usize, w: usize, kh: usize, stride: usize) -> (usize, usize) {
        ((h - kh) / stride + 1, (w - kh) / stride + 1)
    }
}

/// Rayon-backed kernels: identical arithmetic, rows split across threads.
#[cfg(feature = "parallel")]
pub mod par {
    use rayon::prelude::*;

    pub fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        debug_assert_eq!(out.len(), m * n);
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
            super::seq::row_nn(&a[i * k..(i + 1) * k], b, orow, k, n);
        });
    }

    pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        debug_assert_eq!(out.len(), m * n);
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
            super::seq::row_nt(&a[i * k..(i + 1) * k], b, orow, k, n);
        });
    }

    pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        debug_assert_eq!(out.len(), k * n);
        out.par_chunks_mut(n).enumerate().for_each(|(p, orow)| {
            super::seq::row_tn(a, b, orow, p, m, k, n);
        });
    }

    #[allow(clippy::too_many_arguments)]
    pub fn im2col(
        x: &[f64],
        patches: &mut [f64],
        batch: usize,
        ci: usize,
        h: usize,
        w: usize,
        kh: usize,
        stride: usize,
    ) {
        let (oh, ow) = super::seq::out_dims(h, w, kh, stride);
        let cols = kh * kh * ci;
        debug_assert_eq!(patches.len(), batch * oh * ow * cols);
        patches
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(row, prow)| {
                super::seq::patch_row(x, prow, row, ci, h, w, kh, stride, oh, ow);
            });
    }
}

pub fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if m * n >= PAR_MIN_ELEMS {
        par::matmul_nn(a, b, out, m, k, n);
        return;
    }
    seq::matmul_nn(a, b, out, m, k, n)
}

pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if m * n >= PAR_MIN_ELEMS {
        par::matmul_nt(a, b, out, m, k, n);
        return;
    }
    seq::matmul_nt(a, b, out, m, k, n)
}

pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if k * n >= PAR_MIN_ELEMS {
        par::matmul_tn(a, b, out, m, k, n);
        return;
    }
    seq::matmul_tn(a, b, out, m, k, n)
}

#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    patches: &mut [f64],
    batch: usize,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    stride: usize,
) {
    #[cfg(feature = "parallel")]
    if patches.len() >= PAR_MIN_ELEMS {
        par::im2col(x, patches, batch, ci, h, w, kh, stride);
        return;
    }
    seq::im2col(x, patches, batch, ci, h, w, kh, stride)
}

pub use seq::{col2im, out_dims};
