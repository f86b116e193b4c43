//! 2-D convolution (cross-correlation, no kernel flip) and its transpose.
//!
//! Both directions reduce to three plane-level primitives over the relation
//! `big = small * stride + offset`, where `small` is the strided side (the
//! conv output or the transposed-conv input).

use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

/// Stride and zero padding shared by both convolution directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    fn validate(&self) -> Result<()> {
        if self.stride < 1 {
            return Err(config_err!("stride must be >= 1, got {}", self.stride));
        }
        Ok(())
    }
}

/// Range of small-side indices `o` with `0 <= o*stride + offset < big_len`.
#[inline]
fn valid_range(small_len: usize, big_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        (-offset + s - 1) / s
    };
    let hi_excl = if big_len as isize - offset <= 0 {
        0
    } else {
        (big_len as isize - 1 - offset) / s + 1
    };
    let hi = hi_excl.min(small_len as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

#[derive(Clone, Copy)]
struct Planes {
    small_h: usize,
    small_w: usize,
    big_h: usize,
    big_w: usize,
    stride: usize,
}

impl Planes {
    #[inline]
    fn rows(&self, off_y: isize) -> (usize, usize) {
        valid_range(self.small_h, self.big_h, self.stride, off_y)
    }

    #[inline]
    fn cols(&self, off_x: isize) -> (usize, usize) {
        valid_range(self.small_w, self.big_w, self.stride, off_x)
    }
}

/// `small[o] += weight * big[o*s + off]`
#[inline]
fn gather(p: Planes, big: &[f64], small: &mut [f64], weight: f64, off_y: isize, off_x: isize) {
    let (y0, y1) = p.rows(off_y);
    let (x0, x1) = p.cols(off_x);
    let s = p.stride;
    for oy in y0..y1 {
        let by = (oy as isize * s as isize + off_y) as usize;
        let brow = &big[by * p.big_w..(by + 1) * p.big_w];
        let srow = &mut small[oy * p.small_w..(oy + 1) * p.small_w];
        if s == 1 {
            let bx0 = (x0 as isize + off_x) as usize;
            for (dst, &src) in srow[x0..x1].iter_mut().zip(&brow[bx0..bx0 + (x1 - x0)]) {
                *dst += weight * src;
            }
        } else {
            for ox in x0..x1 {
                let bx = (ox as isize * s as isize + off_x) as usize;
                srow[ox] += weight * brow[bx];
            }
        }
    }
}

/// `big[o*s + off] += weight * small[o]`
#[inline]
fn scatter(p: Planes, small: &[f64], big: &mut [f64], weight: f64, off_y: isize, off_x: isize) {
    let (y0, y1) = p.rows(off_y);
    let (x0, x1) = p.cols(off_x);
    let s = p.stride;
    for oy in y0..y1 {
        let by = (oy as isize * s as isize + off_y) as usize;
        let brow = &mut big[by * p.big_w..(by + 1) * p.big_w];
        let srow = &small[oy * p.small_w..(oy + 1) * p.small_w];
        if s == 1 {
            let bx0 = (x0 as isize + off_x) as usize;
            for (dst, &src) in brow[bx0..bx0 + (x1 - x0)].iter_mut().zip(&srow[x0..x1]) {
                *dst += weight * src;
            }
        } else {
            for ox in x0..x1 {
                let bx = (ox as isize * s as isize + off_x) as usize;
                brow[bx] += weight * srow[ox];
            }
        }
    }
}

/// `sum_o small[o] * big[o*s + off]`
#[inline]
fn strided_dot(p: Planes, big: &[f64], small: &[f64], off_y: isize, off_x: isize) -> f64 {
    let (y0, y1) = p.rows(off_y);
    let (x0, x1) = p.cols(off_x);
    let s = p.stride;
    let mut acc = 0.0;
    for oy in y0..y1 {
        let by = (oy as isize * s as isize + off_y) as usize;
        let brow = &big[by * p.big_w..(by + 1) * p.big_w];
        let srow = &small[oy * p.small_w..(oy + 1) * p.small_w];
        for ox in x0..x1 {
            let bx = (ox as isize * s as isize + off_x) as usize;
            acc += srow[ox] * brow[bx];
        }
    }
    acc
}

/// Output extent of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, geom: ConvGeometry) -> Result<usize> {
    geom.validate()?;
    let padded = input + 2 * geom.padding;
    if padded < kernel {
        return Err(shape_err!(
            "padded extent {} smaller than kernel {}",
            padded,
            kernel
        ));
    }
    Ok((padded - kernel) / geom.stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_len(input: usize, kernel: usize, geom: ConvGeometry) -> Result<usize> {
    geom.validate()?;
    let full = (input.max(1) - 1) * geom.stride + kernel;
    if input == 0 || full < 2 * geom.padding + 1 {
        return Err(shape_err!(
            "transposed conv of extent {} with kernel {} and padding {} is empty",
            input,
            kernel,
            geom.padding
        ));
    }
    Ok(full - 2 * geom.padding)
}

fn check_bias(bias: &Tensor, channels: usize) -> Result<()> {
    if bias.dims() != [channels] {
        return Err(shape_err!(
            "bias dims {:?}, expected [{}]",
            bias.dims(),
            channels
        ));
    }
    Ok(())
}

/// `y[n,f] = bias[f] + sum_c x[n,c] (*) kernel[f,c]` with `kernel: [F,C,kh,kw]`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let [f, kc, kh, kw] = kernel.dims4()?;
    if kc != c {
        return Err(shape_err!(
            "conv2d input has {} channels, kernel expects {}",
            c,
            kc
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(config_err!("conv2d kernel must be odd, got {}x{}", kh, kw));
    }
    check_bias(bias, f)?;
    let ho = conv_out_len(h, kh, geom)?;
    let wo = conv_out_len(w, kw, geom)?;
    let planes = Planes {
        small_h: ho,
        small_w: wo,
        big_h: h,
        big_w: w,
        stride: geom.stride,
    };
    let pad = geom.padding as isize;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; n * f * ho * wo];
    for b in 0..n {
        for fo in 0..f {
            let oplane = &mut out[(b * f + fo) * ho * wo..(b * f + fo + 1) * ho * wo];
            oplane.fill(bias.data()[fo]);
            for ci in 0..c {
                let iplane = &xd[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kd[((fo * c + ci) * kh + ky) * kw + kx];
                        gather(
                            planes,
                            iplane,
                            oplane,
                            wv,
                            ky as isize - pad,
                            kx as isize - pad,
                        );
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, f, ho, wo], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    geom: ConvGeometry,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, c, h, w] = x.dims4()?;
    let [f, _, kh, kw] = kernel.dims4()?;
    let [gn, gf, ho, wo] = grad_out.dims4()?;
    if gn != n || gf != f {
        return Err(shape_err!(
            "conv2d grad {:?} inconsistent with input {:?}, kernel {:?}",
            grad_out.dims(),
            x.dims(),
            kernel.dims()
        ));
    }
    let planes = Planes {
        small_h: ho,
        small_w: wo,
        big_h: h,
        big_w: w,
        stride: geom.stride,
    };
    let pad = geom.padding as isize;
    let (xd, kd, gd) = (x.data(), kernel.data(), grad_out.data());
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; f];
    for b in 0..n {
        for fo in 0..f {
            let gplane = &gd[(b * f + fo) * ho * wo..(b * f + fo + 1) * ho * wo];
            gb[fo] += gplane.iter().sum::<f64>();
            for ci in 0..c {
                let range = (b * c + ci) * h * w..(b * c + ci + 1) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (oy, ox) = (ky as isize - pad, kx as isize - pad);
                        let kidx = ((fo * c + ci) * kh + ky) * kw + kx;
                        gk[kidx] += strided_dot(planes, &xd[range.clone()], gplane, oy, ox);
                        scatter(planes, gplane, &mut gx[range.clone()], kd[kidx], oy, ox);
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.dims().to_vec(), gx)?,
        Tensor::new(kernel.dims().to_vec(), gk)?,
        Tensor::new(vec![f], gb)?,
    ))
}

/// Transposed convolution with `kernel: [C,F,kh,kw]` mapping `C -> F` channels.
///
/// For zero bias this is the adjoint of [`conv2d`] under the same geometry.
pub fn conv2d_transpose(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let [kc, f, kh, kw] = kernel.dims4()?;
    if kc != c {
        return Err(shape_err!(
            "conv2d_transpose input has {} channels, kernel expects {}",
            c,
            kc
        ));
    }
    check_bias(bias, f)?;
    let ho = conv_transpose_out_len(h, kh, geom)?;
    let wo = conv_transpose_out_len(w, kw, geom)?;
    let planes = Planes {
        small_h: h,
        small_w: w,
        big_h: ho,
        big_w: wo,
        stride: geom.stride,
    };
    let pad = geom.padding as isize;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; n * f * ho * wo];
    for b in 0..n {
        for fo in 0..f {
            let oplane = &mut out[(b * f + fo) * ho * wo..(b * f + fo + 1) * ho * wo];
            oplane.fill(bias.data()[fo]);
            for ci in 0..c {
                let iplane = &xd[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kd[((ci * f + fo) * kh + ky) * kw + kx];
                        scatter(
                            planes,
                            iplane,
                            oplane,
                            wv,
                            ky as isize - pad,
                            kx as isize - pad,
                        );
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, f, ho, wo], out)
}

/// Gradients of [`conv2d_transpose`] with respect to input, kernel and bias.
pub fn conv2d_transpose_backward(
    x: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    geom: ConvGeometry,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, c, h, w] = x.dims4()?;
    let [_, f, kh, kw] = kernel.dims4()?;
    let [gn, gf, ho, wo] = grad_out.dims4()?;
    if gn != n || gf != f {
        return Err(shape_err!(
            "conv2d_transpose grad {:?} inconsistent with input {:?}, kernel {:?}",
            grad_out.dims(),
            x.dims(),
            kernel.dims()
        ));
    }
    let planes = Planes {
        small_h: h,
        small_w: w,
        big_h: ho,
        big_w: wo,
        stride: geom.stride,
    };
    let pad = geom.padding as isize;
    let (xd, kd, gd) = (x.data(), kernel.data(), grad_out.data());
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; f];
    for b in 0..n {
        for fo in 0..f {
            let gplane = &gd[(b * f + fo) * ho * wo..(b * f + fo + 1) * ho * wo];
            gb[fo] += gplane.iter().sum::<f64>();
            for ci in 0..c {
                let range = (b * c + ci) * h * w..(b * c + ci + 1) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (oy, ox) = (ky as isize - pad, kx as isize - pad);
                        let kidx = ((ci * f + fo) * kh + ky) * kw + kx;
                        gk[kidx] += strided_dot(planes, gplane, &xd[range.clone()], oy, ox);
                        gather(planes, gplane, &mut gx[range.clone()], kd[kidx], oy, ox);
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.dims().to_vec(), gx)?,
        Tensor::new(kernel.dims().to_vec(), gk)?,
        Tensor::new(vec![f], gb)?,
    ))
}
