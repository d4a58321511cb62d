//! Dense row-major tensors and the scalar abstraction shared by every kernel.
//!
//! Tensors are plain `Vec`-backed buffers with up to four axes. The last axis
//! is the fastest (row-major), so an activation map is `[channels, height,
//! width]` and a convolution kernel stack is `[out, in, k, k]`. There are no
//! views, strides or broadcasting: every operation in this crate is a pure
//! function from whole tensors to whole tensors, which keeps reductions in a
//! fixed ascending-index order and makes results bit-reproducible on a given
//! platform.
//!
//! All numeric code is generic over [`Scalar`]. `f32` is the training width;
//! `f64` exists because finite-difference gradient checks are not reliable at
//! 32-bit precision.

use std::error::Error;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Maximum number of axes a [`Tensor`] may have.
pub const MAX_AXES: usize = 4;

/// Scalar width tag, also used as the dtype code in the BSWT weight format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    /// Byte code used in the weight-file format.
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    /// Size of one scalar in bytes.
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Element type for [`Tensor`]. Implemented for `f32` and `f64`.
///
/// The trait is deliberately small; everything the kernels need and nothing
/// more. Test code implements it for instrumented wrapper types, which is why
/// it is public.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn is_finite(self) -> bool;
    /// Append the little-endian byte representation (bit-exact).
    fn write_le(self, out: &mut Vec<u8>);
    /// Read one scalar from exactly `Self::DTYPE.size()` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Errors raised by shape validation across the tensor and convolution ops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ShapeError {
    /// An extent of zero was requested (extents must be >= 1).
    ZeroExtent { axis: usize },
    /// More than [`MAX_AXES`] axes were requested.
    TooManyAxes { ndim: usize },
    /// Data buffer length does not match the product of the extents.
    DataLength { expected: usize, got: usize },
    /// Two tensors that must agree in shape do not.
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    /// A kernel/weight channel extent does not match the input channel extent.
    ChannelMismatch { expected: usize, got: usize },
    /// A tensor has the wrong number of axes for the operation.
    RankExpected { expected: usize, got: usize },
    /// Convolution kernels must have an odd spatial extent.
    KernelEven { kernel: usize },
    /// Stride must be >= 1.
    BadStride { stride: usize },
    /// The convolution geometry produces an output extent < 1.
    DegenerateOutput {
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
}

impl fmt::Display for ShapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeError::ZeroExtent { axis } => {
                write!(f, "axis {axis} has extent 0; extents must be >= 1")
            }
            ShapeError::TooManyAxes { ndim } => {
                write!(f, "{ndim} axes requested; at most {MAX_AXES} supported")
            }
            ShapeError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            ShapeError::ShapeMismatch { left, right } => {
                write!(f, "shape mismatch: {left:?} vs {right:?}")
            }
            ShapeError::ChannelMismatch { expected, got } => {
                write!(f, "channel mismatch: input has {expected} channels, kernel expects {got}")
            }
            ShapeError::RankExpected { expected, got } => {
                write!(f, "expected a {expected}-axis tensor, got {got} axes")
            }
            ShapeError::KernelEven { kernel } => {
                write!(f, "kernel extent {kernel} must be odd and >= 1")
            }
            ShapeError::BadStride { stride } => write!(f, "stride {stride} must be >= 1"),
            ShapeError::DegenerateOutput {
                input,
                kernel,
                stride,
                pad,
            } => write!(
                f,
                "geometry (kernel {kernel}, stride {stride}, pad {pad}) yields an empty output \
                 for input extent {input}"
            ),
        }
    }
}

impl Error for ShapeError {}

fn validate_shape(shape: &[usize]) -> Result<usize, ShapeError> {
    if shape.is_empty() || shape.len() > MAX_AXES {
        return Err(ShapeError::TooManyAxes { ndim: shape.len() });
    }
    let mut len = 1usize;
    for (axis, &extent) in shape.iter().enumerate() {
        if extent == 0 {
            return Err(ShapeError::ZeroExtent { axis });
        }
        len = len
            .checked_mul(extent)
            .ok_or(ShapeError::TooManyAxes { ndim: shape.len() })?;
    }
    Ok(len)
}

/// Dense row-major tensor with 1 to 4 axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Tensor with every element equal to `fill`.
    pub fn new(shape: &[usize], fill: S) -> Result<Self, ShapeError> {
        let len = validate_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    /// All-zero tensor.
    pub fn zeros(shape: &[usize]) -> Result<Self, ShapeError> {
        Self::new(shape, S::zero())
    }

    /// Wrap an existing buffer. `data.len()` must equal the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self, ShapeError> {
        let len = validate_shape(shape)?;
        if data.len() != len {
            return Err(ShapeError::DataLength {
                expected: len,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Extent along `axis`.
    pub fn extent(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> Dtype {
        S::DTYPE
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    /// Flat offset of a multi-index (row-major, last axis fastest).
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < ext, "index {ix} out of range on axis {i}");
            off = off * ext + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: S) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self, ShapeError> {
        let len = validate_shape(shape)?;
        if len != self.data.len() {
            return Err(ShapeError::DataLength {
                expected: len,
                got: self.data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Elementwise map.
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Convert elements through `f64` into another scalar width.
    pub fn convert<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
        }
    }

    /// Largest absolute element, ascending-index scan.
    pub fn max_abs(&self) -> S {
        let mut m = S::zero();
        for &x in &self.data {
            let a = x.abs();
            if a > m {
                m = a;
            }
        }
        m
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// True iff `|a_i - b_i| <= abs_tol + rel_tol * |b_i|` for every element.
///
/// `b` is the reference side of the comparison. Shapes must match.
pub fn allclose<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<bool, ShapeError> {
    if a.shape() != b.shape() {
        return Err(ShapeError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(a.data().iter().zip(b.data()).all(|(&x, &y)| {
        let diff = (x.to_f64() - y.to_f64()).abs();
        diff <= abs_tol + rel_tol * y.to_f64().abs()
    }))
}

/// `max_i |a_i - b_i| / max(floor, max_i |b_i|)` — the error metric reported
/// by the equivalence suites. `b` is the reference.
pub fn max_rel_error<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_error: shape mismatch");
    let scale = b.max_abs().to_f64().max(1e-30);
    let mut worst = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let diff = (x.to_f64() - y.to_f64()).abs();
        if diff / scale > worst {
            worst = diff / scale;
        }
    }
    worst
}
