//! Convolution kernels lowered to matrix products via im2col / col2im.

use crate::tensor::{gemm, Scalar};

/// Spatial geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(kernel > 0 && stride > 0, "kernel and stride must be positive");
        Self { kernel, stride, pad }
    }

    /// Output extent of a forward convolution, `None` when the kernel does
    /// not fit.
    pub fn conv_out(&self, extent: usize) -> Option<usize> {
        let padded = extent + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution.
    pub fn convt_out(&self, extent: usize) -> Option<usize> {
        ((extent - 1) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }
}

/// Output columns `ox` whose input column `ox * stride + kj - pad` lies in
/// `0..w`.
fn valid_cols(g: ConvGeom, kj: usize, w: usize, wo: usize) -> (usize, usize) {
    let s = g.stride;
    let lo = g.pad.saturating_sub(kj).div_ceil(s).min(wo);
    let hi = if w + g.pad > kj { ((w + g.pad - kj - 1) / s + 1).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfold one `(c, h, w)` image into a `(c*k*k, ho*wo)` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let k = g.kernel;
    let plane = ho * wo;
    debug_assert_eq!(col.len(), c * k * k * plane);
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj, w, wo);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if hi > lo {
                        let start = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                        } else {
                            for (v, &s) in out_row[lo..hi].iter_mut().zip(src_row[start..].iter().step_by(g.stride)) {
                                *v = s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `(c, h, w)` image.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let k = g.kernel;
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj, w, wo);
                if hi == lo {
                    continue;
                }
                let start = lo * g.stride + kj - g.pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * wo + lo..oy * wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst_row[start..start + hi - lo].iter_mut().zip(src_row) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst_row[start..].iter_mut().step_by(g.stride).zip(src_row) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Shapes of a conv call: input `(n, cin, h, w)`, output `(n, cout, ho, wo)`.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Forward convolution. `weight` is `(cout, cin, k, k)`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: ConvDims,
    g: ConvGeom,
) -> Vec<T> {
    let kk = d.cin * g.kernel * g.kernel;
    let plane = d.ho * d.wo;
    let mut col = vec![T::zero(); kk * plane];
    let mut out = vec![T::zero(); d.n * d.cout * plane];
    for b in 0..d.n {
        let xs = &x[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w];
        im2col(xs, d.cin, d.h, d.w, g, d.ho, d.wo, &mut col);
        let ys = &mut out[b * d.cout * plane..(b + 1) * d.cout * plane];
        gemm(d.cout, kk, plane, weight, false, &col, false, ys, false);
        if let Some(bias) = bias {
            for (co, chunk) in ys.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight and bias. Pass
/// `None` for quantities that are not needed.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    d: ConvDims,
    g: ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let kk = d.cin * g.kernel * g.kernel;
    let plane = d.ho * d.wo;
    let mut col = vec![T::zero(); kk * plane];
    for b in 0..d.n {
        let dys = &dy[b * d.cout * plane..(b + 1) * d.cout * plane];
        if let Some(dw) = dw.as_deref_mut() {
            let xs = &x[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w];
            im2col(xs, d.cin, d.h, d.w, g, d.ho, d.wo, &mut col);
            gemm(d.cout, plane, kk, dys, false, &col, true, dw, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(kk, d.cout, plane, weight, true, dys, false, &mut col, false);
            let dxs = &mut dx[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w];
            col2im(&col, d.cin, d.h, d.w, g, d.ho, d.wo, dxs);
        }
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in dys.chunks(plane).enumerate() {
                db[co] += chunk.iter().copied().sum();
            }
        }
    }
}

/// Transposed convolution. `weight` is `(cin, cout, k, k)` and the output
/// grid `(ho, wo)` must satisfy `conv_out(ho) == h`.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: ConvDims,
    g: ConvGeom,
) -> Vec<T> {
    let kk = d.cout * g.kernel * g.kernel;
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    let mut col = vec![T::zero(); kk * plane_in];
    let mut out = vec![T::zero(); d.n * d.cout * plane_out];
    for b in 0..d.n {
        let xs = &x[b * d.cin * plane_in..(b + 1) * d.cin * plane_in];
        gemm(kk, d.cin, plane_in, weight, true, xs, false, &mut col, false);
        let ys = &mut out[b * d.cout * plane_out..(b + 1) * d.cout * plane_out];
        col2im(&col, d.cout, d.ho, d.wo, g, d.h, d.w, ys);
        if let Some(bias) = bias {
            for (co, chunk) in ys.chunks_mut(plane_out).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    d: ConvDims,
    g: ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let kk = d.cout * g.kernel * g.kernel;
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    let mut col = vec![T::zero(); kk * plane_in];
    for b in 0..d.n {
        let dys = &dy[b * d.cout * plane_out..(b + 1) * d.cout * plane_out];
        im2col(dys, d.cout, d.ho, d.wo, g, d.h, d.w, &mut col);
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[b * d.cin * plane_in..(b + 1) * d.cin * plane_in];
            gemm(d.cin, kk, plane_in, weight, false, &col, false, dxs, true);
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xs = &x[b * d.cin * plane_in..(b + 1) * d.cin * plane_in];
            gemm(d.cin, plane_in, kk, xs, false, &col, true, dw, true);
        }
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in dys.chunks(plane_out).enumerate() {
                db[co] += chunk.iter().copied().sum();
            }
        }
    }
}
