//! Spatial kernels: dilated conv2d, max pooling, nearest upsampling.
//!
//! Accumulation order is fixed everywhere (channel, then kernel row, then
//! kernel column) so repeated runs are bit-identical and the r=1 path matches
//! a direct standard-convolution loop term for term.

use crate::error::{CoreError, Result};

/// Resolved geometry of one conv2d call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub m: usize,
    pub n: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Dilated kernel footprint along one axis: (r-1)(k-1) + k.
#[inline]
pub(crate) fn footprint(k: usize, r: usize) -> usize {
    (r - 1) * (k - 1) + k
}

/// floor((h + 2p - footprint) / s) + 1, rejecting sizes < 1.
pub(crate) fn out_size(op: &'static str, h: usize, k: usize, s: usize, p: usize, r: usize) -> Result<usize> {
    let fp = footprint(k, r);
    let num = h as i64 + 2 * p as i64 - fp as i64;
    if num < 0 {
        return Err(CoreError::EmptyOutput {
            op,
            input: h,
            footprint: fp,
            stride: s,
            padding: p,
            size: num.div_euclid(s as i64) + 1,
        });
    }
    Ok((num / s as i64) as usize + 1)
}

impl ConvDims {
    pub fn resolve(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Result<ConvDims> {
        if x_shape.len() != 3 || w_shape.len() != 4 {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        if stride == 0 || dil == 0 {
            return Err(CoreError::InvalidArgument(
                "conv2d: stride and dilation must be >= 1".into(),
            ));
        }
        let (cin, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
        let (cout, wcin, m, n) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if cin != wcin {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d channels",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        let ho = out_size("conv2d", h, m, stride, pad, dil)?;
        let wo = out_size("conv2d", w, n, stride, pad, dil)?;
        Ok(ConvDims {
            cin,
            h,
            w,
            cout,
            m,
            n,
            stride,
            pad,
            dil,
            ho,
            wo,
        })
    }
}

/// Copy each channel plane into a zero-padded buffer.
fn pad_input(x: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    if p == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * hp * wp];
    for ci in 0..c {
        for y in 0..h {
            let src = &x[(ci * h + y) * w..(ci * h + y) * w + w];
            let dst = &mut out[(ci * hp + y + p) * wp + p..][..w];
            dst.copy_from_slice(src);
        }
    }
    out
}

pub(crate) fn conv2d_forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let (hp, wp) = (d.h + 2 * d.pad, d.w + 2 * d.pad);
    let xp = pad_input(x, d.cin, d.h, d.w, d.pad);
    let mut out = vec![0.0; d.cout * d.ho * d.wo];
    for co in 0..d.cout {
        let oplane = &mut out[co * d.ho * d.wo..(co + 1) * d.ho * d.wo];
        if let Some(b) = bias {
            oplane.fill(b[co]);
        }
        for ci in 0..d.cin {
            let xplane = &xp[ci * hp * wp..(ci + 1) * hp * wp];
            for ki in 0..d.m {
                for kj in 0..d.n {
                    let wv = wt[((co * d.cin + ci) * d.m + ki) * d.n + kj];
                    for oy in 0..d.ho {
                        let src_row = &xplane[(oy * d.stride + ki * d.dil) * wp + kj * d.dil..];
                        let dst_row = &mut oplane[oy * d.wo..oy * d.wo + d.wo];
                        if d.stride == 1 {
                            for (o, s) in dst_row.iter_mut().zip(&src_row[..d.wo]) {
                                *o += wv * s;
                            }
                        } else {
                            for (ox, o) in dst_row.iter_mut().enumerate() {
                                *o += wv * src_row[ox * d.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients w.r.t. input, weights, and bias.
pub(crate) fn conv2d_backward(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    d: &ConvDims,
    want_bias: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let (hp, wp) = (d.h + 2 * d.pad, d.w + 2 * d.pad);
    let xp = pad_input(x, d.cin, d.h, d.w, d.pad);

    let mut gxp = vec![0.0; d.cin * hp * wp];
    let mut gw = vec![0.0; d.cout * d.cin * d.m * d.n];
    for co in 0..d.cout {
        let gplane = &gout[co * d.ho * d.wo..(co + 1) * d.ho * d.wo];
        for ci in 0..d.cin {
            let xplane = &xp[ci * hp * wp..(ci + 1) * hp * wp];
            let gxplane = &mut gxp[ci * hp * wp..(ci + 1) * hp * wp];
            for ki in 0..d.m {
                for kj in 0..d.n {
                    let wv = wt[((co * d.cin + ci) * d.m + ki) * d.n + kj];
                    let mut acc = 0.0;
                    for oy in 0..d.ho {
                        let base = (oy * d.stride + ki * d.dil) * wp + kj * d.dil;
                        let grow = &gplane[oy * d.wo..oy * d.wo + d.wo];
                        if d.stride == 1 {
                            let src = &xplane[base..base + d.wo];
                            let dst = &mut gxplane[base..base + d.wo];
                            for ((g, s), t) in grow.iter().zip(src).zip(dst) {
                                acc += g * s;
                                *t += wv * g;
                            }
                        } else {
                            for (ox, g) in grow.iter().enumerate() {
                                let i = base + ox * d.stride;
                                acc += g * xplane[i];
                                gxplane[i] += wv * g;
                            }
                        }
                    }
                    gw[((co * d.cin + ci) * d.m + ki) * d.n + kj] += acc;
                }
            }
        }
    }

    // Crop padding back off the input gradient.
    let gx = if d.pad == 0 {
        gxp
    } else {
        let mut gx = vec![0.0; d.cin * d.h * d.w];
        for ci in 0..d.cin {
            for y in 0..d.h {
                let src = &gxp[(ci * hp + y + d.pad) * wp + d.pad..][..d.w];
                let dst = &mut gx[(ci * d.h + y) * d.w..(ci * d.h + y) * d.w + d.w];
                dst.copy_from_slice(src);
            }
        }
        gx
    };

    let gb = want_bias.then(|| {
        (0..d.cout)
            .map(|co| gout[co * d.ho * d.wo..(co + 1) * d.ho * d.wo].iter().sum())
            .collect()
    });
    (gx, gw, gb)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolDims {
    pub fn resolve(x_shape: &[usize], k: usize, stride: usize, pad: usize) -> Result<PoolDims> {
        if x_shape.len() != 3 {
            return Err(CoreError::InvalidShape(format!(
                "maxpool2d wants [C,H,W], got {x_shape:?}"
            )));
        }
        if k == 0 || stride == 0 {
            return Err(CoreError::InvalidArgument(
                "maxpool2d: kernel and stride must be >= 1".into(),
            ));
        }
        if pad >= k {
            return Err(CoreError::InvalidArgument(format!(
                "maxpool2d: padding {pad} must be < kernel {k}"
            )));
        }
        let ho = out_size("maxpool2d", x_shape[1], k, stride, pad, 1)?;
        let wo = out_size("maxpool2d", x_shape[2], k, stride, pad, 1)?;
        Ok(PoolDims {
            c: x_shape[0],
            h: x_shape[1],
            w: x_shape[2],
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }
}

/// Max pooling. Padding is ignored by the max (taps outside the input are
/// skipped); ties resolve to the lowest flat input index. Returns the pooled
/// values and the argmax input index per output element.
pub(crate) fn maxpool2d_forward(x: &[f64], d: &PoolDims) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0; d.c * d.ho * d.wo];
    let mut arg = vec![0usize; d.c * d.ho * d.wo];
    for c in 0..d.c {
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..d.k {
                    let y = (oy * d.stride + ky) as i64 - d.pad as i64;
                    if y < 0 || y >= d.h as i64 {
                        continue;
                    }
                    for kx in 0..d.k {
                        let xcol = (ox * d.stride + kx) as i64 - d.pad as i64;
                        if xcol < 0 || xcol >= d.w as i64 {
                            continue;
                        }
                        let i = (c * d.h + y as usize) * d.w + xcol as usize;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (c * d.ho + oy) * d.wo + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2d_backward(gout: &[f64], arg: &[usize], input_len: usize) -> Vec<f64> {
    let mut gx = vec![0.0; input_len];
    for (g, &i) in gout.iter().zip(arg) {
        gx[i] += g;
    }
    gx
}

pub(crate) fn upsample_forward(x: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        for y in 0..ho {
            let src = &x[(ci * h + y / f) * w..(ci * h + y / f) * w + w];
            let dst = &mut out[(ci * ho + y) * wo..(ci * ho + y) * wo + wo];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = src[xo / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(gout: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut gx = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..ho {
            let src = &gout[(ci * ho + y) * wo..(ci * ho + y) * wo + wo];
            let dst = &mut gx[(ci * h + y / f) * w..(ci * h + y / f) * w + w];
            for (xo, g) in src.iter().enumerate() {
                dst[xo / f] += g;
            }
        }
    }
    gx
}
