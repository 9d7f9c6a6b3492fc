//! Slice-level compute kernels shared by the eager [`Tensor`](super::Tensor)
//! methods and the tape's forward/backward passes.
//!
//! Every reduction runs in a fixed sequential order, so results are
//! bit-reproducible for identical inputs.

use crate::Scalar;

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`, all row-major.
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            axpy(av, &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            axpy(av, brow, &mut c[i * n..(i + 1) * n]);
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with eight interleaved partial sums (fixed order).
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let a8 = &a[c * 8..c * 8 + 8];
        let b8 = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += a8[l] * b8[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Geometry of a 2-D convolution over a `C×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    /// Output extent along one axis, `None` when non-positive.
    pub fn out_extent(&self, input: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    pub fn out_hw(&self) -> Option<(usize, usize)> {
        Some((self.out_extent(self.in_h)?, self.out_extent(self.in_w)?))
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    #[inline]
    fn source(&self, out: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + tap * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds `x: C×H×W` into `cols: (C·k·k) × (H'·W')`.
pub(crate) fn im2col<T: Scalar>(geo: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let (oh, ow) = geo.out_hw().expect("validated geometry");
    let k = geo.kernel;
    let plane = geo.in_h * geo.in_w;
    let npos = oh * ow;
    for ci in 0..geo.in_channels {
        let xc = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..oh {
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    match geo.source(oy, ky, geo.in_h) {
                        None => drow.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            let srow = &xc[iy * geo.in_w..(iy + 1) * geo.in_w];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d = match geo.source(ox, kx, geo.in_w) {
                                    Some(ix) => srow[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `dx` (accumulating).
pub(crate) fn col2im<T: Scalar>(geo: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = geo.out_hw().expect("validated geometry");
    let k = geo.kernel;
    let plane = geo.in_h * geo.in_w;
    let npos = oh * ow;
    for ci in 0..geo.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..oh {
                    let Some(iy) = geo.source(oy, ky, geo.in_h) else {
                        continue;
                    };
                    for ox in 0..ow {
                        if let Some(ix) = geo.source(ox, kx, geo.in_w) {
                            dx[ci * plane + iy * geo.in_w + ix] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Pooling window along one axis: `[start, end)` clipped to the input.
pub(crate) fn pool_windows(input: usize, kernel: usize, stride: usize, ceil_mode: bool) -> Vec<(usize, usize)> {
    let out = if ceil_mode {
        (input.saturating_sub(kernel)).div_ceil(stride) + 1
    } else {
        (input - kernel) / stride + 1
    };
    (0..out)
        .map(|o| {
            let s = o * stride;
            (s, (s + kernel).min(input))
        })
        .collect()
}

/// Linear-interpolation taps for resizing `input → output` with half-pixel
/// centers (`align_corners = false`): source = (dst + 0.5)·in/out − 0.5,
/// clamped to the valid range.
pub(crate) fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}
