//! im2col convolution kernels over NHWC tensors.
//!
//! Weights are stored as `[k * k * cin, cout]` with row index
//! `(ky * k + kx) * cin + ci`, so a convolution is one GEMM between the
//! unfolded input and the weight matrix.

use crate::{Real, Result, TensorError};

/// Square-kernel 2D convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn same3() -> Self {
        Self { kernel: 3, stride: 1, pad: 1 }
    }

    pub const fn pointwise() -> Self {
        Self { kernel: 1, stride: 1, pad: 0 }
    }

    pub const fn down4() -> Self {
        Self { kernel: 4, stride: 2, pad: 1 }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < self.kernel || wp < self.kernel || self.stride == 0 {
            return Err(TensorError::Shape(format!(
                "conv {self:?} does not fit input {h}x{w}"
            )));
        }
        Ok((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }

    fn is_identity_unfold(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Dimensions shared by the forward and backward kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub ho: usize,
    pub wo: usize,
    pub cout: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    pub fn rows(&self) -> usize {
        self.b * self.ho * self.wo
    }

    pub fn cols(&self) -> usize {
        self.geom.kernel * self.geom.kernel * self.cin
    }
}

pub(crate) fn im2col<T: Real>(x: &[T], d: &ConvDims) -> Vec<T> {
    let k = d.geom.kernel;
    let kc = d.cols();
    let mut col = vec![T::zero(); d.rows() * kc];
    let (s, p) = (d.geom.stride as isize, d.geom.pad as isize);
    let mut row = 0;
    for b in 0..d.b {
        let xb = &x[b * d.h * d.w * d.cin..(b + 1) * d.h * d.w * d.cin];
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let dst = &mut col[row * kc..(row + 1) * kc];
                for ky in 0..k {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let src = (iy as usize * d.w + ix as usize) * d.cin;
                        let off = (ky * k + kx) * d.cin;
                        dst[off..off + d.cin].copy_from_slice(&xb[src..src + d.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    col
}

pub(crate) fn col2im<T: Real>(col: &[T], d: &ConvDims) -> Vec<T> {
    let k = d.geom.kernel;
    let kc = d.cols();
    let mut x = vec![T::zero(); d.b * d.h * d.w * d.cin];
    let (s, p) = (d.geom.stride as isize, d.geom.pad as isize);
    let mut row = 0;
    for b in 0..d.b {
        let xb = &mut x[b * d.h * d.w * d.cin..(b + 1) * d.h * d.w * d.cin];
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let src = &col[row * kc..(row + 1) * kc];
                for ky in 0..k {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * d.w + ix as usize) * d.cin;
                        let off = (ky * k + kx) * d.cin;
                        for (a, &v) in xb[dst..dst + d.cin]
                            .iter_mut()
                            .zip(&src[off..off + d.cin])
                        {
                            *a = *a + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

/// Returns `(output, unfolded input)`; the unfolded input is kept for the
/// weight gradient and is `None` for pointwise convolutions.
pub(crate) fn conv_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
) -> (Vec<T>, Option<Vec<T>>) {
    let (m, k, n) = (d.rows(), d.cols(), d.cout);
    let col = if d.geom.is_identity_unfold() {
        None
    } else {
        Some(im2col(x, d))
    };
    let a = col.as_deref().unwrap_or(x);
    let mut out = vec![T::zero(); m * n];
    if let Some(bias) = bias {
        for row in out.chunks_exact_mut(n) {
            row.copy_from_slice(bias);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(
        m, k, n, T::one(), a, k as isize, 1, w, n as isize, 1, beta, &mut out, n as isize, 1,
    );
    (out, col)
}

pub(crate) fn conv_grad_weight<T: Real>(cols: &[T], gout: &[T], d: &ConvDims) -> Vec<T> {
    let (m, k, n) = (d.rows(), d.cols(), d.cout);
    let mut gw = vec![T::zero(); k * n];
    T::gemm(
        k, m, n, T::one(), cols, 1, k as isize, gout, n as isize, 1, T::zero(), &mut gw,
        n as isize, 1,
    );
    gw
}

pub(crate) fn conv_grad_bias<T: Real>(gout: &[T], d: &ConvDims) -> Vec<T> {
    let mut gb = vec![T::zero(); d.cout];
    for row in gout.chunks_exact(d.cout) {
        for (a, &g) in gb.iter_mut().zip(row) {
            *a = *a + g;
        }
    }
    gb
}

pub(crate) fn conv_grad_input<T: Real>(w: &[T], gout: &[T], d: &ConvDims) -> Vec<T> {
    let (m, k, n) = (d.rows(), d.cols(), d.cout);
    let mut gcol = vec![T::zero(); m * k];
    T::gemm(
        m, n, k, T::one(), gout, n as isize, 1, w, 1, n as isize, T::zero(), &mut gcol,
        k as isize, 1,
    );
    if d.geom.is_identity_unfold() {
        gcol
    } else {
        col2im(&gcol, d)
    }
}
