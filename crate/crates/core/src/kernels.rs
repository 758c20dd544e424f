//! Raw numeric kernels on flat row-major buffers: matrix products and the
//! im2col machinery behind 2-D convolution. The autodiff tape calls these for
//! both forward and backward passes.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Scalar;

/// Rows handed to one worker in the parallel matrix products.
const ROW_BLOCK: usize = 16;

/// Runs `$body` through a copy compiled for AVX2 when the CPU has it. Float
/// operations are never contracted, so both copies give identical bits.
macro_rules! dispatch {
    ($name:ident, $body:ident, ($($arg:ident: $ty:ty),*)) => {
        pub fn $name<T: Scalar>($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide<T: Scalar>($($arg: $ty),*) {
                    $body($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected at runtime.
                    return unsafe { wide($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}

dispatch!(gemm_acc, gemm_acc_body, (a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]));
dispatch!(gemm_dot, gemm_dot_body, (a: &[T], bt: &[T], m: usize, k: usize, n: usize, out: &mut [T]));

/// `out += a(m×k) · b(k×n)`, sequential.
#[inline(always)]
fn gemm_acc_body<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Fixed-order dot product with 32 partial sums.
#[inline(always)]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    const W: usize = 32;
    let mut acc = [T::zero(); W];
    let (xc, yc) = (x.chunks_exact(W), y.chunks_exact(W));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..W {
            acc[l] += a[l] * b[l];
        }
    }
    for (l, (&a, &b)) in xr.iter().zip(yr).enumerate() {
        acc[l] += a * b;
    }
    let mut w = W;
    while w > 1 {
        w /= 2;
        for l in 0..w {
            acc[l] += acc[l + w];
        }
    }
    acc[0]
}

/// `out[i][j] = Σ_p a[i][p]·bt[j][p]` for `a(m×k)`, `bt(n×k)`.
#[inline(always)]
fn gemm_dot_body<T: Scalar>(a: &[T], bt: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(bt.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in out[i * n..(i + 1) * n].iter_mut().enumerate() {
            *o = dot(arow, &bt[j * k..(j + 1) * k]);
        }
    }
}

/// Below this output width the row-update form of [`gemm_acc`] is dominated
/// by loop overhead and the dot form wins.
const NARROW: usize = 16;

fn blocked<T: Scalar>(
    m: usize,
    n: usize,
    f: impl Fn(usize, usize, &mut [T]) + Send + Sync,
) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return out;
    }
    par::for_each_chunk(&mut out, ROW_BLOCK * n, |blk, chunk| {
        let r0 = blk * ROW_BLOCK;
        f(r0, chunk.len() / n, chunk);
    });
    out
}

/// `a(m×k) · b(k×n)`, split over row blocks.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    if n < NARROW {
        let bt = transpose(b, k, n);
        return blocked(m, n, |r0, rows, chunk| {
            gemm_dot(&a[r0 * k..(r0 + rows) * k], &bt, rows, k, n, chunk)
        });
    }
    blocked(m, n, |r0, rows, chunk| {
        gemm_acc(&a[r0 * k..(r0 + rows) * k], b, rows, k, n, chunk)
    })
}

/// Transpose an `m×n` buffer.
pub fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `aᵀ · g` for `a(m×k)`, `g(m×n)`, giving `k×n`.
pub fn matmul_tn<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let at = transpose(a, m, k);
    if n < NARROW {
        let gt = transpose(g, m, n);
        return blocked(k, n, |r0, rows, chunk| {
            gemm_dot(&at[r0 * m..(r0 + rows) * m], &gt, rows, m, n, chunk)
        });
    }
    matmul(&at, g, k, m, n)
}

/// `g · bᵀ` for `g(m×n)`, `b(k×n)`, giving `m×k`.
pub fn matmul_nt<T: Scalar>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let bt = transpose(b, k, n);
    matmul(g, &bt, m, n, k)
}

/// Padding rule for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(in / stride)`, zero padding split top/left-first.
    Same,
    /// No padding.
    Valid,
}

/// Geometry of a 2-D convolution mapping a `c_in×h×w` image to
/// `c_out×out_h×out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn same_pad(extent: usize, k: usize, s: usize) -> (usize, usize) {
    let out = extent.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(extent);
    (out, total / 2)
}

impl ConvGeom {
    /// Geometry for a forward convolution of `input` (`N×C×H×W`) with a
    /// kernel shaped `O×C×Kh×Kw`.
    pub fn conv(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] {
            return Err(Error::shape("conv2d", input, kernel));
        }
        Self::build(
            input[1], input[2], input[3], kernel[0], kernel[2], kernel[3], stride, padding,
        )
        .map_err(|_| Error::shape("conv2d", input, kernel))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn build(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 || kh == 0 || kw == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(
                "degenerate convolution geometry".into(),
            ));
        }
        let (out_h, pad_top, out_w, pad_left) = match padding {
            Padding::Same => {
                let (oh, pt) = same_pad(h, kh, stride);
                let (ow, pl) = same_pad(w, kw, stride);
                (oh, pt, ow, pl)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::InvalidArgument("kernel larger than input".into()));
                }
                ((h - kh) / stride + 1, 0, (w - kw) / stride + 1, 0)
            }
        };
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Geometry of the convolution whose adjoint is a transposed convolution
    /// taking `c_in×h×w` to `c_out×H×W`. The returned geometry maps the large
    /// image (channels `c_out`) back down to `h×w` (channels `c_in`).
    pub fn transposed(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (big_h, big_w) = match padding {
            Padding::Same => (h * stride, w * stride),
            Padding::Valid => ((h - 1) * stride + k, (w - 1) * stride + k),
        };
        let g = Self::build(c_out, big_h, big_w, c_in, k, k, stride, padding)?;
        debug_assert_eq!((g.out_h, g.out_w), (h, w));
        Ok(g)
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_size(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_size(&self) -> usize {
        self.c_out * self.out_h * self.out_w
    }
}

/// Unfold one `c_in×h×w` image into a `(c_in·kh·kw) × (out_h·out_w)` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.col_cols();
    let mut out = vec![T::zero(); g.col_rows() * cols];
    for c in 0..g.c_in {
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = (c * g.kh + a) * g.kw + b;
                let orow = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + a) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xrow = &x[(c * g.h + iy as usize) * g.w..];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + b) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.w as isize {
                            orow[oy * g.out_w + ox] = xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: accumulate a column matrix back into an image.
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = (c * g.kh + a) * g.kw + b;
                let crow = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + a) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + b) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += crow[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched correlation: `x` is `n×(c_in·h·w)`, `kernel` is `c_out×(c_in·kh·kw)`.
pub fn conv2d_forward<T: Scalar>(x: &[T], kernel: &[T], n: usize, g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); n * g.out_size()];
    let (isz, osz) = (g.in_size(), g.out_size());
    par::for_each_chunk(&mut out, osz, |i, o| {
        let col = im2col(&x[i * isz..(i + 1) * isz], g);
        gemm_acc(kernel, &col, g.c_out, g.col_rows(), g.col_cols(), o);
    });
    out
}

/// Gradient of [`conv2d_forward`] w.r.t. its input.
pub fn conv2d_grad_input<T: Scalar>(gout: &[T], kernel: &[T], n: usize, g: &ConvGeom) -> Vec<T> {
    let kt = transpose(kernel, g.c_out, g.col_rows());
    let mut gin = vec![T::zero(); n * g.in_size()];
    let osz = g.out_size();
    par::for_each_chunk(&mut gin, g.in_size(), |i, dst| {
        let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
        gemm_acc(
            &kt,
            &gout[i * osz..(i + 1) * osz],
            g.col_rows(),
            g.c_out,
            g.col_cols(),
            &mut col,
        );
        col2im(&col, g, dst);
    });
    gin
}

/// Gradient of [`conv2d_forward`] w.r.t. the kernel. Per-sample partials are
/// summed in sample order.
pub fn conv2d_grad_kernel<T: Scalar>(gout: &[T], x: &[T], n: usize, g: &ConvGeom) -> Vec<T> {
    let (isz, osz) = (g.in_size(), g.out_size());
    let ksz = g.c_out * g.col_rows();
    let partials = par::map_range(n, |i| {
        let col = im2col(&x[i * isz..(i + 1) * isz], g);
        let colt = transpose(&col, g.col_rows(), g.col_cols());
        let mut p = vec![T::zero(); ksz];
        gemm_acc(
            &gout[i * osz..(i + 1) * osz],
            &colt,
            g.c_out,
            g.col_cols(),
            g.col_rows(),
            &mut p,
        );
        p
    });
    let mut acc = vec![T::zero(); ksz];
    for p in partials {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![58.0, 64.0, 139.0, 154.0]);
        assert_eq!(
            matmul_tn(&a, &[1.0, 0.0, 0.0, 1.0], 2, 3, 2),
            vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]
        );
        assert_eq!(matmul_nt(&a, &a, 2, 3, 2), vec![14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn same_geometry_matches_tf_convention() {
        let g = ConvGeom::build(1, 24, 24, 32, 4, 4, 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (12, 1));
        let g = ConvGeom::build(1, 7, 7, 1, 4, 4, 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (4, 1));
        let g = ConvGeom::build(1, 4, 4, 1, 3, 3, 1, Padding::Valid).unwrap();
        assert_eq!(g.out_h, 2);
        assert!(ConvGeom::build(1, 2, 2, 1, 3, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn transposed_geometry_round_trips_extents() {
        let g = ConvGeom::transposed(8, 7, 7, 4, 4, 2, Padding::Same).unwrap();
        assert_eq!((g.h, g.w, g.out_h, g.out_w), (14, 14, 7, 7));
        let g = ConvGeom::transposed(8, 3, 3, 4, 4, 2, Padding::Valid).unwrap();
        assert_eq!((g.h, g.out_h), (8, 3));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::build(2, 5, 5, 1, 3, 3, 2, Padding::Same).unwrap();
        let x: Vec<f64> = (0..g.in_size()).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; g.in_size()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
