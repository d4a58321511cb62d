//! Randomized equivalence suites.
//!
//! The factored blueprint paths must agree with a standard convolution over
//! the materialized kernel stacks, and the DSC block must agree with a
//! standard convolution over its cross-kernel materialization. Each trial
//! draws a random configuration from seeded bounds, runs both routes, and
//! reports the worst relative error (infinity norm against the naive route).

use crate::blueprint::{
    bsconv_u_forward, bsconv_s_forward, cross_kernel_materialize, materialize_s, materialize_u,
    subspace_dim, BsconvSParams, BsconvUParams,
};
use crate::conv::{conv2d_standard, dsc_block, ConvGeometry};
use crate::rng::SeededRng;
use crate::tensor::{max_rel_error, Scalar, Tensor};

/// Upper bounds for randomized trial configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SizeBounds {
    pub max_in: usize,
    pub max_out: usize,
    pub max_kernel: usize,
    pub max_spatial: usize,
}

impl Default for SizeBounds {
    fn default() -> Self {
        SizeBounds {
            max_in: 64,
            max_out: 64,
            max_kernel: 5,
            max_spatial: 16,
        }
    }
}

impl SizeBounds {
    fn draw(&self, rng: &mut SeededRng, force_single_input: bool) -> (usize, usize, usize, usize, usize) {
        let m = if force_single_input {
            1
        } else {
            rng.uniform_usize(1, self.max_in)
        };
        let n = rng.uniform_usize(1, self.max_out);
        let kernels: Vec<usize> = [1usize, 3, 5]
            .into_iter()
            .filter(|&k| k <= self.max_kernel.max(1))
            .collect();
        let k = kernels[rng.uniform_usize(0, kernels.len() - 1)];
        let y = rng.uniform_usize(1, self.max_spatial);
        let x = rng.uniform_usize(1, self.max_spatial);
        (m, n, k, y, x)
    }
}

fn fill<S: Scalar>(rng: &mut SeededRng, shape: &[usize]) -> Tensor<S> {
    let mut t = Tensor::zeros(shape).unwrap();
    rng.fill_normal(&mut t, 1.0);
    t
}

/// Worst relative error over `trials` of: factored unconstrained forward vs
/// standard convolution on the materialized kernels.
pub fn u_equivalence<S: Scalar>(trials: usize, bounds: SizeBounds, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = SeededRng::stream(seed, t as u64);
        let (m, n, k, y, x) = bounds.draw(&mut rng, false);
        let input: Tensor<S> = fill(&mut rng, &[m, y, x]);
        let params = BsconvUParams::new(fill(&mut rng, &[n, k, k]), fill(&mut rng, &[n, m]))
            .expect("trial shapes are valid");
        let fast = bsconv_u_forward(&input, &params).expect("forward");
        let naive = conv2d_standard(
            &input,
            &materialize_u(&params),
            ConvGeometry::same(k).expect("odd kernel"),
        )
        .expect("naive route");
        worst = worst.max(max_rel_error(&fast, &naive));
    }
    worst
}

/// Worst relative error over `trials` of: factored subspace forward vs
/// standard convolution on the materialized kernels. Cycles the subspace
/// ratio through 1/6, 1/3, and 1, and periodically forces the single-input-
/// channel edge case.
pub fn s_equivalence<S: Scalar>(trials: usize, bounds: SizeBounds, seed: u64) -> f64 {
    let ratios = [1.0 / 6.0, 1.0 / 3.0, 1.0];
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = SeededRng::stream(seed ^ 0x5eed_5000, t as u64);
        let (m, n, k, y, x) = bounds.draw(&mut rng, t % 17 == 0);
        let p = ratios[t % ratios.len()];
        let m_sub = subspace_dim(p, m);
        let input: Tensor<S> = fill(&mut rng, &[m, y, x]);
        let params = BsconvSParams::new(
            fill(&mut rng, &[n, k, k]),
            fill(&mut rng, &[n, m_sub]),
            fill(&mut rng, &[m_sub, m]),
            p,
        )
        .expect("trial shapes are valid");
        let fast = bsconv_s_forward(&input, &params).expect("forward");
        let naive = conv2d_standard(
            &input,
            &materialize_s(&params),
            ConvGeometry::same(k).expect("odd kernel"),
        )
        .expect("naive route");
        worst = worst.max(max_rel_error(&fast, &naive));
    }
    worst
}

/// Worst relative error over `trials` of: DSC block vs standard convolution
/// on the cross-kernel materialization (blueprint indexed by input channel).
pub fn dsc_duality<S: Scalar>(trials: usize, bounds: SizeBounds, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = SeededRng::stream(seed ^ 0xd5c_0000, t as u64);
        let (m, n, k, y, x) = bounds.draw(&mut rng, false);
        let input: Tensor<S> = fill(&mut rng, &[m, y, x]);
        let dw: Tensor<S> = fill(&mut rng, &[m, k, k]);
        let pw: Tensor<S> = fill(&mut rng, &[n, m]);
        let geom = ConvGeometry::same(k).expect("odd kernel");
        let block = dsc_block(&input, &dw, &pw, geom).expect("dsc");
        let kernels = cross_kernel_materialize(&pw, &dw).expect("materialize");
        let naive = conv2d_standard(&input, &kernels, geom).expect("naive route");
        worst = worst.max(max_rel_error(&block, &naive));
    }
    worst
}

/// Search for an instance where the blueprint order (pointwise first) and
/// the DSC order (depthwise first) disagree; returns the first trial index
/// that witnesses the difference.
pub fn order_witness(max_trials: usize, seed: u64) -> Option<usize> {
    for t in 0..max_trials {
        let mut rng = SeededRng::stream(seed ^ 0x08de_4000, t as u64);
        let c = rng.uniform_usize(2, 8);
        let y = rng.uniform_usize(3, 8);
        let x = rng.uniform_usize(3, 8);
        let input: Tensor<f64> = fill(&mut rng, &[c, y, x]);
        let blueprints: Tensor<f64> = fill(&mut rng, &[c, 3, 3]);
        let weights: Tensor<f64> = fill(&mut rng, &[c, c]);
        let params = BsconvUParams::new(blueprints.clone(), weights.clone()).unwrap();
        let reversed = bsconv_u_forward(&input, &params).unwrap();
        let forward = dsc_block(
            &input,
            &blueprints,
            &weights,
            ConvGeometry::same(3).unwrap(),
        )
        .unwrap();
        if max_rel_error(&reversed, &forward) > 1e-3 {
            return Some(t);
        }
    }
    None
}

/// Everything `verify` reports: per-family worst errors in both widths plus
/// the order witness.
#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub trials: usize,
    pub u_f32: f64,
    pub u_f64: f64,
    pub s_f32: f64,
    pub s_f64: f64,
    pub dsc_f32: f64,
    pub dsc_f64: f64,
    pub order_witness_trial: Option<usize>,
}

impl VerifyReport {
    pub fn run(trials: usize, bounds: SizeBounds, seed: u64) -> Self {
        VerifyReport {
            trials,
            u_f32: u_equivalence::<f32>(trials, bounds, seed),
            u_f64: u_equivalence::<f64>(trials, bounds, seed),
            s_f32: s_equivalence::<f32>(trials, bounds, seed),
            s_f64: s_equivalence::<f64>(trials, bounds, seed),
            dsc_f32: dsc_duality::<f32>(trials, bounds, seed),
            dsc_f64: dsc_duality::<f64>(trials, bounds, seed),
            order_witness_trial: order_witness(10, seed),
        }
    }

    /// All families within `tolerance` (in their own width) and the order
    /// witness found.
    pub fn passes(&self, tolerance: f64) -> bool {
        self.u_f32 < tolerance
            && self.s_f32 < tolerance
            && self.dsc_f32 < tolerance
            && self.order_witness_trial.is_some()
    }

    pub fn worst_f32(&self) -> f64 {
        self.u_f32.max(self.s_f32).max(self.dsc_f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: SizeBounds = SizeBounds {
        max_in: 12,
        max_out: 12,
        max_kernel: 5,
        max_spatial: 8,
    };

    #[test]
    fn quick_u_equivalence() {
        assert!(u_equivalence::<f32>(25, SMALL, 1) < 1e-5);
        assert!(u_equivalence::<f64>(25, SMALL, 1) < 1e-10);
    }

    #[test]
    fn quick_s_equivalence() {
        assert!(s_equivalence::<f32>(25, SMALL, 2) < 1e-5);
        assert!(s_equivalence::<f64>(25, SMALL, 2) < 1e-10);
    }

    #[test]
    fn quick_dsc_duality() {
        assert!(dsc_duality::<f32>(25, SMALL, 3) < 1e-5);
        assert!(dsc_duality::<f64>(25, SMALL, 3) < 1e-10);
    }

    #[test]
    fn witness_found_quickly() {
        assert!(order_witness(10, 4).is_some());
    }
}
