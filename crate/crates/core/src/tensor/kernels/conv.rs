//! Direct 3D convolution and transposed convolution kernels.
//!
//! Every accumulation runs in a fixed loop order, so results are
//! bit-deterministic.

use crate::tensor::Scalar;

/// Stride, zero padding, dilation and channel groups of a 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
    pub groups: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        ConvGeom {
            stride: [1; 3],
            padding: [0; 3],
            dilation: [1; 3],
            groups: 1,
        }
    }
}

impl ConvGeom {
    pub fn stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: [usize; 3]) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// `floor((input + 2*pad - dilation*(k-1) - 1) / stride) + 1`, or `None` when
/// the dilated kernel does not fit.
pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = input + 2 * pad;
    if padded < span || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Output positions `o` in `0..out_len` whose input index
/// `o * stride + offset` lands inside `0..in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 { ((-offset) + s - 1) / s } else { 0 };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last / s) + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

pub(crate) struct ConvDims {
    pub x: [usize; 5],
    pub w: [usize; 5],
    pub out: [usize; 5],
}

/// Visits every (output row, input row, kernel tap) triple of the convolution
/// with the inner `w` axis resolved to a contiguous range.
#[inline]
fn for_each_tap(
    dims: &ConvDims,
    g: &ConvGeom,
    mut visit: impl FnMut(usize, usize, usize, usize, usize, usize, usize),
) {
    let [n_batch, c_in, d, h, wd] = dims.x;
    let [c_out, c_in_g, kd, kh, kw] = dims.w;
    let [_, _, od, oh, ow] = dims.out;
    let c_out_g = c_out / g.groups;
    for n in 0..n_batch {
        for co in 0..c_out {
            let grp = co / c_out_g;
            let out_base = (n * c_out + co) * od * oh * ow;
            for cil in 0..c_in_g {
                let ci = grp * c_in_g + cil;
                let in_base = (n * c_in + ci) * d * h * wd;
                for kz in 0..kd {
                    let offz = (kz * g.dilation[0]) as isize - g.padding[0] as isize;
                    let (z0, z1) = valid_range(od, d, g.stride[0], offz);
                    for ky in 0..kh {
                        let offy = (ky * g.dilation[1]) as isize - g.padding[1] as isize;
                        let (y0, y1) = valid_range(oh, h, g.stride[1], offy);
                        for kx in 0..kw {
                            let offx = (kx * g.dilation[2]) as isize - g.padding[2] as isize;
                            let (x0, x1) = valid_range(ow, wd, g.stride[2], offx);
                            if x0 >= x1 {
                                continue;
                            }
                            let widx = (((co * c_in_g + cil) * kd + kz) * kh + ky) * kw + kx;
                            for oz in z0..z1 {
                                let iz = (oz as isize * g.stride[0] as isize + offz) as usize;
                                for oy in y0..y1 {
                                    let iy = (oy as isize * g.stride[1] as isize + offy) as usize;
                                    let orow = out_base + (oz * oh + oy) * ow;
                                    let irow = in_base + (iz * h + iy) * wd;
                                    // first input index of the contiguous run
                                    let ix0 = (x0 as isize * g.stride[2] as isize + offx) as usize;
                                    visit(widx, orow, irow, x0, x1, ix0, g.stride[2]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    dims: &ConvDims,
    g: &ConvGeom,
) -> Vec<T> {
    let [n_batch, c_out, od, oh, ow] = dims.out;
    let spatial = od * oh * ow;
    let mut out = vec![T::zero(); n_batch * c_out * spatial];
    if let Some(b) = bias {
        for (i, chunk) in out.chunks_mut(spatial).enumerate() {
            chunk.fill(b[i % c_out]);
        }
    }
    for_each_tap(dims, g, |widx, orow, irow, x0, x1, ix0, sx| {
        let wv = w[widx];
        let o = &mut out[orow + x0..orow + x1];
        if sx == 1 {
            let inp = &x[irow + ix0..irow + ix0 + (x1 - x0)];
            for (ov, &iv) in o.iter_mut().zip(inp) {
                *ov = *ov + wv * iv;
            }
        } else {
            for (j, ov) in o.iter_mut().enumerate() {
                *ov = *ov + wv * x[irow + ix0 + j * sx];
            }
        }
    });
    out
}

/// Gradients w.r.t. input, weight and (optionally) bias.
pub(crate) fn conv3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    dims: &ConvDims,
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    for_each_tap(dims, g, |widx, orow, irow, x0, x1, ix0, sx| {
        let go = &grad_out[orow + x0..orow + x1];
        if let Some(gx) = gx.as_mut() {
            let wv = w[widx];
            for (j, &gv) in go.iter().enumerate() {
                let i = irow + ix0 + j * sx;
                gx[i] = gx[i] + wv * gv;
            }
        }
        if let Some(gw) = gw.as_mut() {
            let mut acc = T::zero();
            for (j, &gv) in go.iter().enumerate() {
                acc = acc + gv * x[irow + ix0 + j * sx];
            }
            gw[widx] = gw[widx] + acc;
        }
    });
    let [n_batch, c_out, od, oh, ow] = dims.out;
    let spatial = od * oh * ow;
    let mut gb = vec![T::zero(); c_out];
    for n in 0..n_batch {
        for (co, b) in gb.iter_mut().enumerate() {
            let base = (n * c_out + co) * spatial;
            *b = *b + grad_out[base..base + spatial].iter().copied().sum::<T>();
        }
    }
    (gx, gw, gb)
}

/// Transposed convolution without padding: output extent `(in - 1) * stride + k`.
/// Weight layout is `C_in x C_out x kd x kh x kw`.
pub(crate) fn conv_transpose3d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    dims: &ConvDims,
    stride: [usize; 3],
) -> Vec<T> {
    let [n_batch, c_in, d, h, wd] = dims.x;
    let [_, c_out, kd, kh, kw] = dims.w;
    let [_, _, od, oh, ow] = dims.out;
    let spatial = od * oh * ow;
    let mut out = vec![T::zero(); n_batch * c_out * spatial];
    if let Some(b) = bias {
        for (i, chunk) in out.chunks_mut(spatial).enumerate() {
            chunk.fill(b[i % c_out]);
        }
    }
    for n in 0..n_batch {
        for co in 0..c_out {
            let out_base = (n * c_out + co) * spatial;
            for ci in 0..c_in {
                let in_base = (n * c_in + ci) * d * h * wd;
                for kz in 0..kd {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = w[(((ci * c_out + co) * kd + kz) * kh + ky) * kw + kx];
                            for iz in 0..d {
                                let oz = iz * stride[0] + kz;
                                for iy in 0..h {
                                    let oy = iy * stride[1] + ky;
                                    let orow = out_base + (oz * oh + oy) * ow + kx;
                                    let irow = in_base + (iz * h + iy) * wd;
                                    for ix in 0..wd {
                                        let o = orow + ix * stride[2];
                                        out[o] = out[o] + wv * x[irow + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    dims: &ConvDims,
    stride: [usize; 3],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let [n_batch, c_in, d, h, wd] = dims.x;
    let [_, c_out, kd, kh, kw] = dims.w;
    let [_, _, od, oh, ow] = dims.out;
    let spatial = od * oh * ow;
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    for n in 0..n_batch {
        for co in 0..c_out {
            let out_base = (n * c_out + co) * spatial;
            for ci in 0..c_in {
                let in_base = (n * c_in + ci) * d * h * wd;
                for kz in 0..kd {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let widx = (((ci * c_out + co) * kd + kz) * kh + ky) * kw + kx;
                            let wv = w[widx];
                            let mut acc = T::zero();
                            for iz in 0..d {
                                let oz = iz * stride[0] + kz;
                                for iy in 0..h {
                                    let oy = iy * stride[1] + ky;
                                    let orow = out_base + (oz * oh + oy) * ow + kx;
                                    let irow = in_base + (iz * h + iy) * wd;
                                    for ix in 0..wd {
                                        let gv = grad_out[orow + ix * stride[2]];
                                        if let Some(gx) = gx.as_mut() {
                                            gx[irow + ix] = gx[irow + ix] + wv * gv;
                                        }
                                        acc = acc + gv * x[irow + ix];
                                    }
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[widx] = gw[widx] + acc;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut gb = vec![T::zero(); c_out];
    for n in 0..n_batch {
        for (co, b) in gb.iter_mut().enumerate() {
            let base = (n * c_out + co) * spatial;
            *b = *b + grad_out[base..base + spatial].iter().copied().sum::<T>();
        }
    }
    (gx, gw, gb)
}
