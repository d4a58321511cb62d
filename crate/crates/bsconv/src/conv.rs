//! Direct-loop convolution primitives and their adjoints.
//!
//! Everything here follows the cross-correlation convention (no kernel flip)
//! and zero padding. Activations are `[channels, height, width]`, kernel
//! stacks are `[out, in, k, k]`. Per output element the reduction runs in
//! ascending `(channel, ky, kx)` order, so results are bit-reproducible.
//! There are no bias terms; the classifier head in the training harness is
//! the only place a bias exists.
//!
//! Batches are handled by mapping these single-image primitives over the
//! batch axis; see the training module.

use crate::tensor::{Scalar, ShapeError, Tensor};

/// Kernel size, stride, and symmetric zero padding of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Validated geometry. Kernels must be odd (>= 1), strides >= 1.
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Result<Self, ShapeError> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(ShapeError::KernelEven { kernel });
        }
        if stride == 0 {
            return Err(ShapeError::BadStride { stride });
        }
        Ok(ConvGeometry { kernel, stride, pad })
    }

    /// Shape-preserving preset: stride 1, pad `(k - 1) / 2`.
    pub fn same(kernel: usize) -> Result<Self, ShapeError> {
        Self::new(kernel, 1, (kernel.max(1) - 1) / 2)
    }

    /// Output extent `floor((in + 2 pad - k) / stride) + 1`; errors when < 1.
    pub fn out_extent(&self, input: usize) -> Result<usize, ShapeError> {
        let padded = input + 2 * self.pad;
        if padded < self.kernel {
            return Err(ShapeError::DegenerateOutput {
                input,
                kernel: self.kernel,
                stride: self.stride,
                pad: self.pad,
            });
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

fn expect_ndim<S: Scalar>(t: &Tensor<S>, ndim: usize) -> Result<(), ShapeError> {
    if t.ndim() != ndim {
        return Err(ShapeError::RankExpected {
            expected: ndim,
            got: t.ndim(),
        });
    }
    Ok(())
}

/// Copy `[C, Y, X]` into `[C, Y + 2p, X + 2p]` with a zero halo.
fn pad_spatial<S: Scalar>(input: &Tensor<S>, pad: usize) -> Tensor<S> {
    if pad == 0 {
        return input.clone();
    }
    let (c, y, x) = (input.extent(0), input.extent(1), input.extent(2));
    let (yp, xp) = (y + 2 * pad, x + 2 * pad);
    let mut out = Tensor::zeros(&[c, yp, xp]).expect("padded shape is valid");
    let src = input.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for row in 0..y {
            let s = (ch * y + row) * x;
            let d = (ch * yp + row + pad) * xp + pad;
            dst[d..d + x].copy_from_slice(&src[s..s + x]);
        }
    }
    out
}

/// Drop a zero halo of `pad` from `[C, Y + 2p, X + 2p]` back to `[C, Y, X]`.
fn crop_spatial<S: Scalar>(padded: &Tensor<S>, pad: usize) -> Tensor<S> {
    if pad == 0 {
        return padded.clone();
    }
    let (c, yp, xp) = (padded.extent(0), padded.extent(1), padded.extent(2));
    let (y, x) = (yp - 2 * pad, xp - 2 * pad);
    let mut out = Tensor::zeros(&[c, y, x]).expect("cropped shape is valid");
    let src = padded.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for row in 0..y {
            let s = (ch * yp + row + pad) * xp + pad;
            let d = (ch * y + row) * x;
            dst[d..d + x].copy_from_slice(&src[s..s + x]);
        }
    }
    out
}

fn check_kernel_stack<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    geom: ConvGeometry,
) -> Result<(), ShapeError> {
    expect_ndim(input, 3)?;
    expect_ndim(kernels, 4)?;
    if kernels.extent(1) != input.extent(0) {
        return Err(ShapeError::ChannelMismatch {
            expected: input.extent(0),
            got: kernels.extent(1),
        });
    }
    if kernels.extent(2) != geom.kernel || kernels.extent(3) != geom.kernel {
        return Err(ShapeError::ShapeMismatch {
            left: kernels.shape().to_vec(),
            right: vec![kernels.extent(0), kernels.extent(1), geom.kernel, geom.kernel],
        });
    }
    Ok(())
}

/// Standard convolution: `V[n,y,x] = sum_{m,i,j} U_pad[m, y s + i, x s + j] * F[n,m,i,j]`.
///
/// `input` is `[M, Y, X]`, `kernels` is `[N, M, K, K]`, output is `[N, Y', X']`.
pub fn conv2d_standard<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    geom: ConvGeometry,
) -> Result<Tensor<S>, ShapeError> {
    check_kernel_stack(input, kernels, geom)?;
    let (m, k, s) = (input.extent(0), geom.kernel, geom.stride);
    let n = kernels.extent(0);
    let oy = geom.out_extent(input.extent(1))?;
    let ox = geom.out_extent(input.extent(2))?;

    let padded = pad_spatial(input, geom.pad);
    let (yp, xp) = (padded.extent(1), padded.extent(2));
    let up = padded.data();
    let f = kernels.data();

    let mut out = Tensor::zeros(&[n, oy, ox])?;
    let v = out.data_mut();
    for fi in 0..n {
        for y in 0..oy {
            for x in 0..ox {
                let mut acc = S::zero();
                for ch in 0..m {
                    let kbase = ((fi * m + ch) * k) * k;
                    for i in 0..k {
                        let row = (ch * yp + y * s + i) * xp + x * s;
                        let urow = &up[row..row + k];
                        let krow = &f[kbase + i * k..kbase + i * k + k];
                        for j in 0..k {
                            acc += urow[j] * krow[j];
                        }
                    }
                }
                v[(fi * oy + y) * ox + x] = acc;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d_standard`]: given the output cotangent `d_out`, returns
/// `(d_input, d_kernels)`.
pub fn conv2d_standard_backward<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    geom: ConvGeometry,
    d_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>), ShapeError> {
    check_kernel_stack(input, kernels, geom)?;
    expect_ndim(d_out, 3)?;
    let (m, k, s) = (input.extent(0), geom.kernel, geom.stride);
    let n = kernels.extent(0);
    let oy = geom.out_extent(input.extent(1))?;
    let ox = geom.out_extent(input.extent(2))?;
    if d_out.shape() != [n, oy, ox] {
        return Err(ShapeError::ShapeMismatch {
            left: d_out.shape().to_vec(),
            right: vec![n, oy, ox],
        });
    }

    let padded = pad_spatial(input, geom.pad);
    let (yp, xp) = (padded.extent(1), padded.extent(2));
    let up = padded.data();
    let f = kernels.data();
    let dv = d_out.data();

    let mut d_up = Tensor::zeros(&[input.extent(0), yp, xp])?;
    let mut d_f = Tensor::zeros(kernels.shape())?;
    {
        let dud = d_up.data_mut();
        let dfd = d_f.data_mut();
        for fi in 0..n {
            for y in 0..oy {
                for x in 0..ox {
                    let g = dv[(fi * oy + y) * ox + x];
                    for ch in 0..m {
                        let kbase = ((fi * m + ch) * k) * k;
                        for i in 0..k {
                            let row = (ch * yp + y * s + i) * xp + x * s;
                            for j in 0..k {
                                dud[row + j] += g * f[kbase + i * k + j];
                                dfd[kbase + i * k + j] += g * up[row + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((crop_spatial(&d_up, geom.pad), d_f))
}

/// 1x1 pointwise convolution: `V[n,y,x] = sum_m W[n,m] * U[m,y,x]`.
///
/// `weights` is `[N, M]`. Equals [`conv2d_standard`] with K = 1.
pub fn conv2d_pointwise<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
) -> Result<Tensor<S>, ShapeError> {
    expect_ndim(input, 3)?;
    expect_ndim(weights, 2)?;
    let (m, y, x) = (input.extent(0), input.extent(1), input.extent(2));
    if weights.extent(1) != m {
        return Err(ShapeError::ChannelMismatch {
            expected: m,
            got: weights.extent(1),
        });
    }
    let n = weights.extent(0);
    let plane = y * x;
    let u = input.data();
    let w = weights.data();

    let mut out = Tensor::zeros(&[n, y, x])?;
    let v = out.data_mut();
    for fi in 0..n {
        let vplane = &mut v[fi * plane..(fi + 1) * plane];
        for ch in 0..m {
            let coef = w[fi * m + ch];
            let uplane = &u[ch * plane..(ch + 1) * plane];
            for (vo, &ui) in vplane.iter_mut().zip(uplane) {
                *vo += coef * ui;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d_pointwise`]: returns `(d_input, d_weights)`.
pub fn pointwise_backward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    d_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>), ShapeError> {
    expect_ndim(input, 3)?;
    expect_ndim(weights, 2)?;
    expect_ndim(d_out, 3)?;
    let (m, y, x) = (input.extent(0), input.extent(1), input.extent(2));
    let n = weights.extent(0);
    if weights.extent(1) != m {
        return Err(ShapeError::ChannelMismatch {
            expected: m,
            got: weights.extent(1),
        });
    }
    if d_out.shape() != [n, y, x] {
        return Err(ShapeError::ShapeMismatch {
            left: d_out.shape().to_vec(),
            right: vec![n, y, x],
        });
    }
    let plane = y * x;
    let u = input.data();
    let w = weights.data();
    let dv = d_out.data();

    let mut d_in = Tensor::zeros(input.shape())?;
    let mut d_w = Tensor::zeros(weights.shape())?;
    {
        let du = d_in.data_mut();
        let dw = d_w.data_mut();
        for fi in 0..n {
            let dvplane = &dv[fi * plane..(fi + 1) * plane];
            for ch in 0..m {
                let coef = w[fi * m + ch];
                let uplane = &u[ch * plane..(ch + 1) * plane];
                let duplane = &mut du[ch * plane..(ch + 1) * plane];
                let mut acc = S::zero();
                for i in 0..plane {
                    duplane[i] += coef * dvplane[i];
                    acc += dvplane[i] * uplane[i];
                }
                dw[fi * m + ch] += acc;
            }
        }
    }
    Ok((d_in, d_w))
}

/// Depthwise convolution: channel `c` of the input is convolved with kernel
/// `c`, no channel mixing. `kernels` is `[C, K, K]`.
pub fn conv2d_depthwise<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    geom: ConvGeometry,
) -> Result<Tensor<S>, ShapeError> {
    expect_ndim(input, 3)?;
    expect_ndim(kernels, 3)?;
    let (c, k, s) = (input.extent(0), geom.kernel, geom.stride);
    if kernels.extent(0) != c {
        return Err(ShapeError::ChannelMismatch {
            expected: c,
            got: kernels.extent(0),
        });
    }
    if kernels.extent(1) != k || kernels.extent(2) != k {
        return Err(ShapeError::ShapeMismatch {
            left: kernels.shape().to_vec(),
            right: vec![c, k, k],
        });
    }
    let oy = geom.out_extent(input.extent(1))?;
    let ox = geom.out_extent(input.extent(2))?;

    let padded = pad_spatial(input, geom.pad);
    let (yp, xp) = (padded.extent(1), padded.extent(2));
    let up = padded.data();
    let b = kernels.data();

    let mut out = Tensor::zeros(&[c, oy, ox])?;
    let v = out.data_mut();
    for ch in 0..c {
        let kbase = ch * k * k;
        for y in 0..oy {
            for x in 0..ox {
                let mut acc = S::zero();
                for i in 0..k {
                    let row = (ch * yp + y * s + i) * xp + x * s;
                    let urow = &up[row..row + k];
                    let krow = &b[kbase + i * k..kbase + i * k + k];
                    for j in 0..k {
                        acc += urow[j] * krow[j];
                    }
                }
                v[(ch * oy + y) * ox + x] = acc;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d_depthwise`]: returns `(d_input, d_kernels)`.
pub fn depthwise_backward<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    geom: ConvGeometry,
    d_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>), ShapeError> {
    expect_ndim(input, 3)?;
    expect_ndim(kernels, 3)?;
    expect_ndim(d_out, 3)?;
    let (c, k, s) = (input.extent(0), geom.kernel, geom.stride);
    if kernels.extent(0) != c {
        return Err(ShapeError::ChannelMismatch {
            expected: c,
            got: kernels.extent(0),
        });
    }
    let oy = geom.out_extent(input.extent(1))?;
    let ox = geom.out_extent(input.extent(2))?;
    if d_out.shape() != [c, oy, ox] {
        return Err(ShapeError::ShapeMismatch {
            left: d_out.shape().to_vec(),
            right: vec![c, oy, ox],
        });
    }

    let padded = pad_spatial(input, geom.pad);
    let (yp, xp) = (padded.extent(1), padded.extent(2));
    let up = padded.data();
    let b = kernels.data();
    let dv = d_out.data();

    let mut d_up = Tensor::zeros(&[c, yp, xp])?;
    let mut d_b = Tensor::zeros(kernels.shape())?;
    {
        let dud = d_up.data_mut();
        let dbd = d_b.data_mut();
        for ch in 0..c {
            let kbase = ch * k * k;
            for y in 0..oy {
                for x in 0..ox {
                    let g = dv[(ch * oy + y) * ox + x];
                    for i in 0..k {
                        let row = (ch * yp + y * s + i) * xp + x * s;
                        for j in 0..k {
                            dud[row + j] += g * b[kbase + i * k + j];
                            dbd[kbase + i * k + j] += g * up[row + j];
                        }
                    }
                }
            }
        }
    }
    Ok((crop_spatial(&d_up, geom.pad), d_b))
}

/// Depthwise separable block in the MobileNetV1 order: depthwise FIRST, then
/// pointwise. `dw_kernels` is `[M, K, K]`, `pw_weights` is `[N, M]`.
pub fn dsc_block<S: Scalar>(
    input: &Tensor<S>,
    dw_kernels: &Tensor<S>,
    pw_weights: &Tensor<S>,
    geom: ConvGeometry,
) -> Result<Tensor<S>, ShapeError> {
    let mid = conv2d_depthwise(input, dw_kernels, geom)?;
    conv2d_pointwise(&mid, pw_weights)
}

/// Adjoint of [`dsc_block`]: returns `(d_input, d_dw_kernels, d_pw_weights)`.
pub fn dsc_block_backward<S: Scalar>(
    input: &Tensor<S>,
    dw_kernels: &Tensor<S>,
    pw_weights: &Tensor<S>,
    geom: ConvGeometry,
    d_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>), ShapeError> {
    let mid = conv2d_depthwise(input, dw_kernels, geom)?;
    let (d_mid, d_pw) = pointwise_backward(&mid, pw_weights, d_out)?;
    let (d_in, d_dw) = depthwise_backward(input, dw_kernels, geom, &d_mid)?;
    Ok((d_in, d_dw, d_pw))
}
