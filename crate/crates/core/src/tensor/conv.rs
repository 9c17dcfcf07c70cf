// Batched im2col convolution. The column buffer is laid out as
// [C*kh*kw, N*oh*ow] so one GEMM covers the whole batch.

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects [N,C,H,W] input and [K,C,kh,kw] kernel, got {input:?} and {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        let [batch, in_channels, height, width] = [input[0], input[1], input[2], input[3]];
        let [out_channels, kc, kernel_h, kernel_w] = [kernel[0], kernel[1], kernel[2], kernel[3]];
        if kc != in_channels {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {in_channels}, kernel expects {kc}"
            )));
        }
        if kernel_h == 0 || kernel_w == 0 || kernel_h > height + 2 * pad || kernel_w > width + 2 * pad
        {
            return Err(Error::shape(format!(
                "conv2d kernel {kernel_h}x{kernel_w} does not fit padded input {}x{}",
                height + 2 * pad,
                width + 2 * pad
            )));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel_h) / stride + 1,
            out_w: (width + 2 * pad - kernel_w) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    pub(crate) fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub(crate) fn spatial_out(&self) -> usize {
        self.out_h * self.out_w
    }

    pub(crate) fn columns(&self) -> usize {
        self.batch * self.spatial_out()
    }
}

/// Output columns `[lo, hi)` whose input column `ox*stride + k - pad` is in bounds.
fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // ox*stride + k >= pad  and  ox*stride + k < in_len + pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_len + pad > k {
        ((in_len + pad - k).div_ceil(stride)).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Marks an output pixel whose tap falls into padding.
const PAD: u32 = u32::MAX;

/// For each kernel tap `(ky, kx)`, the input offset read by every output
/// pixel, or [`PAD`].
fn tap_table(g: &ConvGeometry) -> Vec<Vec<u32>> {
    let mut taps = Vec::with_capacity(g.kernel_h * g.kernel_w);
    for ky in 0..g.kernel_h {
        let (oy_lo, oy_hi) = valid_range(g.out_h, g.height, g.stride, ky, g.pad);
        for kx in 0..g.kernel_w {
            let (ox_lo, ox_hi) = valid_range(g.out_w, g.width, g.stride, kx, g.pad);
            let mut t = vec![PAD; g.spatial_out()];
            for oy in oy_lo..oy_hi {
                let iy = oy * g.stride + ky - g.pad;
                for ox in ox_lo..ox_hi {
                    t[oy * g.out_w + ox] = (iy * g.width + ox * g.stride + kx - g.pad) as u32;
                }
            }
            taps.push(t);
        }
    }
    taps
}

pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let plane = g.height * g.width;
    let taps = tap_table(g);
    // rows (c, ky, kx), columns (n, oy, ox); filled strictly in that order
    let mut out = Vec::with_capacity(g.patch_len() * g.columns());
    for c in 0..g.in_channels {
        for tap in &taps {
            for n in 0..g.batch {
                let src = &x[(n * g.in_channels + c) * plane..][..plane];
                out.extend(tap.iter().map(|&o| src.get(o as usize).copied().unwrap_or(T::ZERO)));
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the input.
pub(crate) fn col2im<T: Scalar>(cols_grad: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.columns();
    let plane = g.height * g.width;
    let so = g.spatial_out();
    let taps: Vec<Vec<(usize, usize)>> = tap_table(g)
        .into_iter()
        .map(|t| {
            t.into_iter()
                .enumerate()
                .filter(|&(_, o)| o != PAD)
                .map(|(j, o)| (j, o as usize))
                .collect()
        })
        .collect();
    let mut dx = vec![T::ZERO; g.batch * g.in_channels * plane];
    for c in 0..g.in_channels {
        for (t, tap) in taps.iter().enumerate() {
            let row = c * taps.len() + t;
            let src_row = &cols_grad[row * cols..(row + 1) * cols];
            for n in 0..g.batch {
                let dst = &mut dx[(n * g.in_channels + c) * plane..][..plane];
                let src = &src_row[n * so..(n + 1) * so];
                for &(j, o) in tap {
                    // SAFETY: tap_table only emits j < so and o < plane.
                    unsafe { *dst.get_unchecked_mut(o) += *src.get_unchecked(j) };
                }
            }
        }
    }
    dx
}

/// `[m, n]` GEMM output without zero-filling first; `beta = 0` never reads `c`.
///
/// # Safety
/// `a` and `b` must describe in-bounds `[m,k]` and `[k,n]` views.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_fresh<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: *const T,
    rsa: isize,
    csa: isize,
    b: *const T,
    rsb: isize,
    csb: isize,
) -> Vec<T> {
    let mut c = Vec::with_capacity(m * n);
    if k == 0 {
        c.resize(m * n, T::ZERO);
        return c;
    }
    T::gemm(m, k, n, T::ONE, a, rsa, csa, b, rsb, csb, T::ZERO, c.as_mut_ptr(), n as isize, 1);
    c.set_len(m * n);
    c
}

/// Returns the `[N,K,oh,ow]` output.
pub(crate) fn conv_forward<T: Scalar>(cols: &[T], kernel: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.out_channels;
    let p = g.patch_len();
    let ncols = g.columns();
    let so = g.spatial_out();
    // SAFETY: kernel is [K,P] and cols is [P, N*S], both row-major.
    let tmp = unsafe {
        gemm_fresh(k, p, ncols, kernel.as_ptr(), p as isize, 1, cols.as_ptr(), ncols as isize, 1)
    };
    let mut out = Vec::with_capacity(g.batch * k * so);
    for n in 0..g.batch {
        for ch in 0..k {
            out.extend_from_slice(&tmp[ch * ncols + n * so..][..so]);
        }
    }
    out
}

/// Gradients of the convolution w.r.t. kernel and (optionally) the input.
pub(crate) fn conv_backward<T: Scalar>(
    grad_out: &[T],
    cols: &[T],
    kernel: &[T],
    g: &ConvGeometry,
    need_input: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let k = g.out_channels;
    let p = g.patch_len();
    let ncols = g.columns();
    let so = g.spatial_out();
    // [N,K,S] -> [K, N*S]
    let mut gt = Vec::with_capacity(k * ncols);
    for ch in 0..k {
        for n in 0..g.batch {
            gt.extend_from_slice(&grad_out[(n * k + ch) * so..][..so]);
        }
    }
    // SAFETY: gt is [K, N*S], cols is [P, N*S] read transposed, kernel is
    // [K,P] read transposed; all row-major and in bounds.
    let dkernel = unsafe {
        gemm_fresh(k, ncols, p, gt.as_ptr(), ncols as isize, 1, cols.as_ptr(), 1, ncols as isize)
    };
    let dx = need_input.then(|| {
        let dcols = unsafe {
            gemm_fresh(p, k, ncols, kernel.as_ptr(), 1, p as isize, gt.as_ptr(), ncols as isize, 1)
        };
        col2im(&dcols, g)
    });
    (dkernel, dx)
}
