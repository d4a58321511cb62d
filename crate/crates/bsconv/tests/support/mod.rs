//! Shared oracles for the integration and acceptance suites. Everything here
//! is deliberately independent of the library's own computation paths.

use std::cell::Cell;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use bsconv::conv::ConvGeometry;
use bsconv::tensor::{Dtype, Scalar, Tensor};

/// Central finite differences of `f` at `at`, step `h_scale * max(1, |x_i|)`.
pub fn central_diff(at: &[f64], h_scale: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; at.len()];
    let mut probe = at.to_vec();
    for i in 0..at.len() {
        let h = h_scale * at[i].abs().max(1.0);
        probe[i] = at[i] + h;
        let hi = f(&probe);
        probe[i] = at[i] - h;
        let lo = f(&probe);
        probe[i] = at[i];
        grad[i] = (hi - lo) / (2.0 * h);
    }
    grad
}

/// `||a - b||_inf / max(||a||_inf, ||b||_inf, tiny)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0f64, |acc, &x| acc.max(x.abs()))
        .max(1e-12);
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc.max((x - y).abs()))
        / scale
}

/// Independent triple-loop convolution written directly against the
/// definition: bounds-checked indexing instead of a padded copy, plain
/// nested loops.
pub fn reference_conv(u: &Tensor<f64>, f: &Tensor<f64>, geom: ConvGeometry) -> Tensor<f64> {
    let (m, y, x) = (u.extent(0), u.extent(1), u.extent(2));
    let n = f.extent(0);
    let k = geom.kernel;
    let oy = geom.out_extent(y).unwrap();
    let ox = geom.out_extent(x).unwrap();
    let mut out = Tensor::zeros(&[n, oy, ox]).unwrap();
    for fi in 0..n {
        for yy in 0..oy {
            for xx in 0..ox {
                let mut acc = 0.0;
                for ch in 0..m {
                    for i in 0..k {
                        for j in 0..k {
                            let sy = (yy * geom.stride + i) as isize - geom.pad as isize;
                            let sx = (xx * geom.stride + j) as isize - geom.pad as isize;
                            if sy >= 0 && sx >= 0 && (sy as usize) < y && (sx as usize) < x {
                                acc +=
                                    u.get(&[ch, sy as usize, sx as usize]) * f.get(&[fi, ch, i, j]);
                            }
                        }
                    }
                }
                out.set(&[fi, yy, xx], acc);
            }
        }
    }
    out
}

/// Inner product of two same-shaped tensors in f64 (adjoint-identity tests).
pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

thread_local! {
    static MUL_COUNT: Cell<u64> = const { Cell::new(0) };
}

pub fn reset_mul_count() {
    MUL_COUNT.with(|c| c.set(0));
}

pub fn mul_count() -> u64 {
    MUL_COUNT.with(|c| c.get())
}

/// f64 wrapper whose multiplications bump a thread-local counter: running
/// the real forward paths over `Count` tensors measures exactly how many
/// MACs they perform on the calling thread. Division, comparison and the
/// transcendental helpers do not count.
#[derive(Clone, Copy, PartialEq, PartialOrd)]
pub struct Count(pub f64);

impl fmt::Debug for Count {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Count({})", self.0)
    }
}

impl Add for Count {
    type Output = Count;
    fn add(self, rhs: Count) -> Count {
        Count(self.0 + rhs.0)
    }
}

impl Sub for Count {
    type Output = Count;
    fn sub(self, rhs: Count) -> Count {
        Count(self.0 - rhs.0)
    }
}

impl Mul for Count {
    type Output = Count;
    fn mul(self, rhs: Count) -> Count {
        MUL_COUNT.with(|c| c.set(c.get() + 1));
        Count(self.0 * rhs.0)
    }
}

impl Div for Count {
    type Output = Count;
    fn div(self, rhs: Count) -> Count {
        Count(self.0 / rhs.0)
    }
}

impl Neg for Count {
    type Output = Count;
    fn neg(self) -> Count {
        Count(-self.0)
    }
}

impl AddAssign for Count {
    fn add_assign(&mut self, rhs: Count) {
        self.0 += rhs.0;
    }
}

impl Scalar for Count {
    const DTYPE: Dtype = Dtype::F64;

    fn zero() -> Self {
        Count(0.0)
    }
    fn one() -> Self {
        Count(1.0)
    }
    fn from_f64(x: f64) -> Self {
        Count(x)
    }
    fn to_f64(self) -> f64 {
        self.0
    }
    fn abs(self) -> Self {
        Count(self.0.abs())
    }
    fn sqrt(self) -> Self {
        Count(self.0.sqrt())
    }
    fn exp(self) -> Self {
        Count(self.0.exp())
    }
    fn ln(self) -> Self {
        Count(self.0.ln())
    }
    fn is_finite(self) -> bool {
        self.0.is_finite()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        self.0.write_le(out)
    }
    fn read_le(bytes: &[u8]) -> Self {
        Count(f64::read_le(bytes))
    }
}
