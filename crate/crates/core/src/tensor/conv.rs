//! Strided 2-d cross-correlation kernels shared by `conv2d`,
//! `conv_transpose2d`, and their backward passes.
//!
//! One geometry struct describes the "down" direction
//! `x [B,Ci,H,W] -> y [B,Co,OH,OW]`; the transpose op is exactly the adjoint
//! map `[B,Co,OH,OW] -> [B,Ci,H,W]` with the same kernel tensor, so all three
//! routines here reuse the same index arithmetic.
//!
//! These loops dominate the training profile, so each routine lowers to a
//! patch-matrix (im2col) gather per batch element followed by one dense
//! matrix product from [`gemm`](super::gemm); the kernel tensor's
//! `[Co, Ci·kh·kw]` row-major layout is already the left factor.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::TensorError;

/// Geometry of a convolution, always phrased in the downsampling direction.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvSpec {
    fn validate_kernel(kshape: &[usize]) -> Result<(), TensorError> {
        if kshape.len() != 4 || kshape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel must be [Co,Ci,kh,kw] with no zero dim, got {kshape:?}"),
            });
        }
        Ok(())
    }

    /// Geometry for `conv2d(x, k)`: output spatial size is
    /// `(H + 2*pad - kh) / stride + 1` (floor division).
    pub fn for_conv(
        xshape: &[usize],
        kshape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        Self::validate_kernel(kshape)?;
        if xshape.len() != 4 || xshape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input must be [B,Ci,H,W] with no zero dim, got {xshape:?}"),
            });
        }
        if xshape[1] != kshape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {} != kernel Ci {}", xshape[1], kshape[1]),
            });
        }
        if stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: "stride must be at least 1".into(),
            });
        }
        let (h, w) = (xshape[2], xshape[3]);
        let (kh, kw) = (kshape[2], kshape[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} exceeds padded input {h}x{w} (pad {pad})"),
            });
        }
        Ok(Self {
            batch: xshape[0],
            cin: xshape[1],
            cout: kshape[0],
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Geometry for `conv_transpose2d(u, k)`: the produced spatial size is
    /// `(OH - 1) * stride + kh - 2*pad`, making it the exact adjoint of the
    /// conv with this geometry.
    pub fn for_transpose(
        ushape: &[usize],
        kshape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        Self::validate_kernel(kshape)?;
        if ushape.len() != 4 || ushape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("input must be [B,Co,OH,OW] with no zero dim, got {ushape:?}"),
            });
        }
        if ushape[1] != kshape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("input channels {} != kernel Co {}", ushape[1], kshape[0]),
            });
        }
        if stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: "stride must be at least 1".into(),
            });
        }
        let (oh, ow) = (ushape[2], ushape[3]);
        let (kh, kw) = (kshape[2], kshape[3]);
        let h = ((oh - 1) * stride + kh).checked_sub(2 * pad);
        let w = ((ow - 1) * stride + kw).checked_sub(2 * pad);
        match (h, w) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok(Self {
                batch: ushape[0],
                cin: kshape[1],
                cout: kshape[0],
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
            }),
            _ => Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("padding {pad} swallows the whole {oh}x{ow} output"),
            }),
        }
    }

    pub fn conv_out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.oh, self.ow]
    }

    pub fn conv_in_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cin, self.h, self.w]
    }

    /// Output-column interval `[lo, hi)` for which the input column
    /// `ow * stride + kx - pad` stays inside `[0, w)`.
    #[inline]
    fn ow_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad as isize;
        let lo = if off < 0 { ((-off) + s - 1) / s } else { 0 };
        let hi_excl = (self.w as isize - off + s - 1) / s; // smallest ow with iw >= w
        let lo = (lo.max(0) as usize).min(self.ow);
        let hi = hi_excl.clamp(0, self.ow as isize) as usize;
        (lo, hi.max(lo))
    }

    /// Input row for output row `oy` and kernel row `ky`, if inside `[0, h)`.
    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// Gathers one batch element's strided, padded receptive fields into the
/// patch matrix `p` of shape `[Ci·kh·kw, OH·OW]`. The caller zeroes `p`;
/// out-of-bounds (padding) cells stay zero.
fn im2col(x_elem: &[f64], spec: &ConvSpec, p: &mut [f64]) {
    let s = spec.stride;
    let on = spec.oh * spec.ow;
    for ci in 0..spec.cin {
        let xplane = &x_elem[ci * spec.h * spec.w..][..spec.h * spec.w];
        for ky in 0..spec.kh {
            for kx in 0..spec.kw {
                let prow = &mut p[((ci * spec.kh + ky) * spec.kw + kx) * on..][..on];
                let (lo, hi) = spec.ow_range(kx);
                if lo >= hi {
                    continue;
                }
                let x0 = (lo * s + kx) as isize - spec.pad as isize;
                for oy in 0..spec.oh {
                    let Some(iy) = spec.in_row(oy, ky) else { continue };
                    let xs = &xplane[iy * spec.w + x0 as usize..];
                    let dst = &mut prow[oy * spec.ow + lo..oy * spec.ow + hi];
                    if s == 1 {
                        dst.copy_from_slice(&xs[..hi - lo]);
                    } else {
                        for (i, d) in dst.iter_mut().enumerate() {
                            *d = xs[i * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back onto one batch
/// element's input plane.
fn col2im(p: &[f64], spec: &ConvSpec, dx_elem: &mut [f64]) {
    let s = spec.stride;
    let on = spec.oh * spec.ow;
    for ci in 0..spec.cin {
        let dxplane = &mut dx_elem[ci * spec.h * spec.w..][..spec.h * spec.w];
        for ky in 0..spec.kh {
            for kx in 0..spec.kw {
                let prow = &p[((ci * spec.kh + ky) * spec.kw + kx) * on..][..on];
                let (lo, hi) = spec.ow_range(kx);
                if lo >= hi {
                    continue;
                }
                let x0 = (lo * s + kx) as isize - spec.pad as isize;
                for oy in 0..spec.oh {
                    let Some(iy) = spec.in_row(oy, ky) else { continue };
                    let xs = &mut dxplane[iy * spec.w + x0 as usize..];
                    let src = &prow[oy * spec.ow + lo..oy * spec.ow + hi];
                    if s == 1 {
                        for (d, v) in xs[..hi - lo].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (i, v) in src.iter().enumerate() {
                            xs[i * s] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `y[b,co,oy,ox] = sum_{ci,ky,kx} k[co,ci,ky,kx] * x[b,ci,oy*s+ky-p,ox*s+kx-p]`
pub(crate) fn conv_fwd(x: &[f64], k: &[f64], spec: &ConvSpec) -> Vec<f64> {
    let ck = spec.cin * spec.kh * spec.kw;
    let on = spec.oh * spec.ow;
    let elem = spec.cin * spec.h * spec.w;
    let mut y = vec![0.0; spec.batch * spec.cout * on];
    let mut p = vec![0.0; ck * on];
    for b in 0..spec.batch {
        p.fill(0.0);
        im2col(&x[b * elem..(b + 1) * elem], spec, &mut p);
        gemm_nn(&mut y[b * spec.cout * on..][..spec.cout * on], k, &p, spec.cout, ck, on);
    }
    y
}

/// Adjoint of [`conv_fwd`] in its input: maps `dy [B,Co,OH,OW]` back to
/// `[B,Ci,H,W]`. Also serves as the forward pass of `conv_transpose2d`.
pub(crate) fn conv_bwd_input(dy: &[f64], k: &[f64], spec: &ConvSpec) -> Vec<f64> {
    let ck = spec.cin * spec.kh * spec.kw;
    let on = spec.oh * spec.ow;
    let elem = spec.cin * spec.h * spec.w;
    let mut dx = vec![0.0; spec.batch * elem];
    let mut dp = vec![0.0; ck * on];
    for b in 0..spec.batch {
        dp.fill(0.0);
        gemm_tn(&mut dp, k, &dy[b * spec.cout * on..][..spec.cout * on], ck, spec.cout, on);
        col2im(&dp, spec, &mut dx[b * elem..(b + 1) * elem]);
    }
    dx
}

/// Kernel gradient: `dk[co,ci,ky,kx] = sum_{b,oy,ox} x[...] * dy[b,co,oy,ox]`.
pub(crate) fn conv_bwd_kernel(x: &[f64], dy: &[f64], spec: &ConvSpec) -> Vec<f64> {
    let ck = spec.cin * spec.kh * spec.kw;
    let on = spec.oh * spec.ow;
    let elem = spec.cin * spec.h * spec.w;
    let mut dk = vec![0.0; spec.cout * ck];
    let mut p = vec![0.0; ck * on];
    for b in 0..spec.batch {
        p.fill(0.0);
        im2col(&x[b * elem..(b + 1) * elem], spec, &mut p);
        gemm_nt(&mut dk, &dy[b * spec.cout * on..][..spec.cout * on], &p, spec.cout, on, ck);
    }
    dk
}
