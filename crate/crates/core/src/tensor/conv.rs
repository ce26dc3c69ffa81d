//! 2-D convolution over NHWC tensors.
//!
//! `conv2d` is a cross-correlation (no kernel flip) with kernels laid out
//! `[kh, kw, c_in, c_out]`. `conv2d_transpose` is its adjoint with respect to
//! the input, with kernels laid out `[kh, kw, c_out, c_in]`, so the same
//! three loops below serve the forward passes and every gradient.

use alloc::{vec, vec::Vec};

use super::Tensor;
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Padding {
    /// Output size `ceil(in / stride)`; the odd padding row/column goes to
    /// the bottom/right.
    Same,
    Valid,
}

/// Spatial geometry of one convolution, always described from the
/// perspective of the forward cross-correlation (`in` is the larger map).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn axis(input: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => (k <= input).then(|| ((input - k) / stride + 1, 0)),
    }
}

impl ConvGeometry {
    pub fn conv(
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::InvalidArgument("stride and kernel size must be >= 1".into()));
        }
        let too_large = Error::KernelTooLarge {
            kernel: (kh, kw),
            input: (in_h, in_w),
        };
        let (out_h, pad_top) = axis(in_h, kh, stride, padding).ok_or(too_large.clone())?;
        let (out_w, pad_left) = axis(in_w, kw, stride, padding).ok_or(too_large)?;
        Ok(Self {
            in_h,
            in_w,
            out_h,
            out_w,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
        })
    }

    /// Geometry of the convolution whose input-adjoint maps an `h x w` map up
    /// to the transposed-convolution output (`stride * h` for `Same`).
    pub fn transpose(
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let up = |n: usize, k: usize| match padding {
            Padding::Same => n * stride,
            Padding::Valid => n * stride + k.saturating_sub(stride),
        };
        let geom = Self::conv(up(h, kh), up(w, kw), kh, kw, stride, padding)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (h, w));
        Ok(geom)
    }

    /// Input row/column touched by output position `o` and kernel tap `k`.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        (o * stride + k).checked_sub(pad).filter(|&i| i < limit)
    }
}

fn rank4(t: &Tensor<impl Real>, op: &'static str, other: &[usize]) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::Dimension {
            op,
            left: t.shape().to_vec(),
            right: other.to_vec(),
        }),
    }
}

fn check_bias<T: Real>(bias: &Tensor<T>, channels: usize, op: &'static str) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(Error::Dimension {
            op,
            left: bias.shape().to_vec(),
            right: vec![channels],
        });
    }
    Ok(())
}

/// out[b, oy, ox, f] += sum x[b, iy, ix, c] * w[ky, kx, c, f]
pub(crate) fn correlate<T: Real>(
    x: &[T],
    batch: usize,
    c: usize,
    w: &[T],
    f: usize,
    g: &ConvGeometry,
    out: &mut [T],
) {
    for b in 0..batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o0 = ((b * g.out_h + oy) * g.out_w + ox) * f;
                let orow = &mut out[o0..o0 + f];
                for ky in 0..g.kh {
                    let Some(iy) = ConvGeometry::source(oy, ky, g.stride, g.pad_top, g.in_h)
                    else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) =
                            ConvGeometry::source(ox, kx, g.stride, g.pad_left, g.in_w)
                        else {
                            continue;
                        };
                        let x0 = ((b * g.in_h + iy) * g.in_w + ix) * c;
                        let wblk = &w[(ky * g.kw + kx) * c * f..][..c * f];
                        for (&xv, wrow) in x[x0..x0 + c].iter().zip(wblk.chunks_exact(f)) {
                            for (o, &wv) in orow.iter_mut().zip(wrow) {
                                *o = *o + xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`correlate`] in `x`: dx[b, iy, ix, c] += sum dout * w.
pub(crate) fn correlate_adjoint<T: Real>(
    dout: &[T],
    batch: usize,
    f: usize,
    w: &[T],
    c: usize,
    g: &ConvGeometry,
    dx: &mut [T],
) {
    for b in 0..batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o0 = ((b * g.out_h + oy) * g.out_w + ox) * f;
                let grow = &dout[o0..o0 + f];
                for ky in 0..g.kh {
                    let Some(iy) = ConvGeometry::source(oy, ky, g.stride, g.pad_top, g.in_h)
                    else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) =
                            ConvGeometry::source(ox, kx, g.stride, g.pad_left, g.in_w)
                        else {
                            continue;
                        };
                        let x0 = ((b * g.in_h + iy) * g.in_w + ix) * c;
                        let wblk = &w[(ky * g.kw + kx) * c * f..][..c * f];
                        for (d, wrow) in dx[x0..x0 + c].iter_mut().zip(wblk.chunks_exact(f)) {
                            let s = wrow
                                .iter()
                                .zip(grow)
                                .fold(T::zero(), |acc, (&wv, &gv)| acc + wv * gv);
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`correlate`] in `w`: dw[ky, kx, c, f] += sum x * dout.
pub(crate) fn correlate_kernel_grad<T: Real>(
    x: &[T],
    dout: &[T],
    batch: usize,
    c: usize,
    f: usize,
    g: &ConvGeometry,
    dw: &mut [T],
) {
    for b in 0..batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o0 = ((b * g.out_h + oy) * g.out_w + ox) * f;
                let grow = &dout[o0..o0 + f];
                for ky in 0..g.kh {
                    let Some(iy) = ConvGeometry::source(oy, ky, g.stride, g.pad_top, g.in_h)
                    else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) =
                            ConvGeometry::source(ox, kx, g.stride, g.pad_left, g.in_w)
                        else {
                            continue;
                        };
                        let x0 = ((b * g.in_h + iy) * g.in_w + ix) * c;
                        let wblk = &mut dw[(ky * g.kw + kx) * c * f..][..c * f];
                        for (&xv, wrow) in x[x0..x0 + c].iter().zip(wblk.chunks_exact_mut(f)) {
                            if xv == T::zero() {
                                continue;
                            }
                            for (d, &gv) in wrow.iter_mut().zip(grow) {
                                *d = *d + xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel sum of an NHWC gradient, i.e. the bias gradient.
pub(crate) fn channel_sum<T: Real>(dout: &[T], channels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for row in dout.chunks_exact(channels) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o = *o + b;
        }
    }
}

/// Cross-correlation of `input [B, H, W, C_in]` with `kernel
/// [kh, kw, C_in, C_out]`, plus `bias [C_out]`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let [batch, h, w, c] = rank4(input, "conv2d", kernel.shape())?;
    let [kh, kw, kc, f] = rank4(kernel, "conv2d", input.shape())?;
    if kc != c {
        return Err(Error::Dimension {
            op: "conv2d",
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    check_bias(bias, f, "conv2d bias")?;
    let g = ConvGeometry::conv(h, w, kh, kw, stride, padding)?;
    let mut out = vec![T::zero(); batch * g.out_h * g.out_w * f];
    correlate(input.data(), batch, c, kernel.data(), f, &g, &mut out);
    add_bias(&mut out, bias.data());
    Tensor::from_parts(vec![batch, g.out_h, g.out_w, f], out).finite("conv2d")
}

/// Transposed convolution of `input [B, H, W, C_in]` with `kernel
/// [kh, kw, C_out, C_in]`, plus `bias [C_out]`. With `Same` padding the
/// output is exactly `[B, stride*H, stride*W, C_out]`.
pub fn conv2d_transpose<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let [batch, h, w, cin] = rank4(input, "conv2d_transpose", kernel.shape())?;
    let [kh, kw, cout, kc] = rank4(kernel, "conv2d_transpose", input.shape())?;
    if kc != cin {
        return Err(Error::Dimension {
            op: "conv2d_transpose",
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    check_bias(bias, cout, "conv2d_transpose bias")?;
    let g = ConvGeometry::transpose(h, w, kh, kw, stride, padding)?;
    let mut out = vec![T::zero(); batch * g.in_h * g.in_w * cout];
    correlate_adjoint(input.data(), batch, cin, kernel.data(), cout, &g, &mut out);
    add_bias(&mut out, bias.data());
    Tensor::from_parts(vec![batch, g.in_h, g.in_w, cout], out).finite("conv2d_transpose")
}

/// Gradient of `conv2d` with respect to its input.
pub(crate) fn conv2d_input_grad<T: Real>(
    dout: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let (batch, f) = (dout.shape()[0], dout.shape()[3]);
    let c = kernel.shape()[2];
    let mut dx = vec![T::zero(); batch * g.in_h * g.in_w * c];
    correlate_adjoint(dout.data(), batch, f, kernel.data(), c, g, &mut dx);
    Tensor::from_parts(vec![batch, g.in_h, g.in_w, c], dx)
}

/// Gradient of `conv2d` with respect to its kernel.
pub(crate) fn conv2d_kernel_grad<T: Real>(
    input: &Tensor<T>,
    dout: &Tensor<T>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let (batch, c) = (input.shape()[0], input.shape()[3]);
    let f = dout.shape()[3];
    let mut dw = vec![T::zero(); g.kh * g.kw * c * f];
    correlate_kernel_grad(input.data(), dout.data(), batch, c, f, g, &mut dw);
    Tensor::from_parts(vec![g.kh, g.kw, c, f], dw)
}
