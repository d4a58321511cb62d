//! Property tests over the crate's core invariants.

mod support;

use proptest::collection::vec;
use proptest::prelude::*;

use bsconv::analysis::{analyze_kernel_set, pca_filter, PcaOutcome};
use bsconv::blueprint::{bsconv_u_forward, materialize_u, BsconvUParams};
use bsconv::conv::{conv2d_standard, ConvGeometry};
use bsconv::format::{TensorEntry, WeightFile};
use bsconv::rng::random_normal;
use bsconv::tensor::{allclose, max_rel_error, Tensor};

fn small_shape() -> impl Strategy<Value = Vec<usize>> {
    (1usize..=4)
        .prop_flat_map(|ndim| vec(1usize..=5, ndim))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // serialized weights come back bit-for-bit
    #[test]
    fn weight_file_round_trips(shape in small_shape(), seed in 0u64..1000, f64_entry in any::<bool>()) {
        let mut file = WeightFile::new();
        if f64_entry {
            file.push("t", TensorEntry::F64(random_normal(&shape, seed, 1.0).unwrap())).unwrap();
        } else {
            file.push("t", TensorEntry::F32(random_normal(&shape, seed, 1.0).unwrap())).unwrap();
        }
        let bytes = file.to_bytes();
        let back = WeightFile::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    // conv(aU1 + bU2) == a conv(U1) + b conv(U2)
    #[test]
    fn convolution_is_linear(seed in 0u64..500, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let u1: Tensor<f64> = random_normal(&[2, 5, 5], seed * 3 + 1, 1.0).unwrap();
        let u2: Tensor<f64> = random_normal(&[2, 5, 5], seed * 3 + 2, 1.0).unwrap();
        let f: Tensor<f64> = random_normal(&[3, 2, 3, 3], seed * 3 + 3, 1.0).unwrap();
        let geom = ConvGeometry::same(3).unwrap();
        let mixed = Tensor::from_vec(
            u1.shape(),
            u1.data().iter().zip(u2.data()).map(|(&x, &y)| a * x + b * y).collect(),
        ).unwrap();
        let lhs = conv2d_standard(&mixed, &f, geom).unwrap();
        let v1 = conv2d_standard(&u1, &f, geom).unwrap();
        let v2 = conv2d_standard(&u2, &f, geom).unwrap();
        let rhs = Tensor::from_vec(
            lhs.shape(),
            v1.data().iter().zip(v2.data()).map(|(&x, &y)| a * x + b * y).collect(),
        ).unwrap();
        prop_assert!(allclose(&lhs, &rhs, 1e-9, 1e-9).unwrap());
    }

    // the central factored-vs-materialized identity on arbitrary small shapes
    #[test]
    fn factored_equals_materialized(
        m in 1usize..=6,
        n in 1usize..=6,
        ki in 0usize..=2,
        y in 1usize..=6,
        x in 1usize..=6,
        seed in 0u64..500,
    ) {
        let k = [1, 3, 5][ki];
        let u: Tensor<f64> = random_normal(&[m, y, x], seed + 1, 1.0).unwrap();
        let params = BsconvUParams::new(
            random_normal(&[n, k, k], seed + 2, 1.0).unwrap(),
            random_normal(&[n, m], seed + 3, 1.0).unwrap(),
        ).unwrap();
        let fast = bsconv_u_forward(&u, &params).unwrap();
        let naive = conv2d_standard(&u, &materialize_u(&params), ConvGeometry::same(k).unwrap()).unwrap();
        prop_assert!(max_rel_error(&fast, &naive) < 1e-10);
    }

    // explained ratios are invariant to nonzero kernel scaling
    #[test]
    fn pca_ratios_scale_invariant(seed in 0u64..300, scale in prop_oneof![(-50.0f64..-0.01), (0.01f64..50.0)]) {
        let kernel: Tensor<f64> = random_normal(&[8, 3, 3], seed, 1.0).unwrap();
        let scaled = kernel.map(|v| v * scale);
        let a = pca_filter(&kernel, true).unwrap();
        let b = pca_filter(&scaled, true).unwrap();
        let (a, b) = (a.spectrum().unwrap(), b.spectrum().unwrap());
        for (ra, rb) in a.explained_ratios.iter().zip(&b.explained_ratios) {
            prop_assert!((ra - rb).abs() < 1e-8);
        }
    }

    // histogram totals conserve the filter count, degenerate included
    #[test]
    fn histogram_conserves_counts(seed in 0u64..200, n in 1usize..=10, bins in 1usize..=12, degenerate in 0usize..=3) {
        let m = 6usize;
        let mut data = Vec::new();
        let noise: Tensor<f64> = random_normal(&[n, m, 3, 3], seed, 1.0).unwrap();
        data.extend_from_slice(noise.data());
        for _ in 0..degenerate {
            data.extend(std::iter::repeat(1.25).take(m * 9)); // identical slices
        }
        let stack = Tensor::from_vec(&[n + degenerate, m, 3, 3], data).unwrap();
        let groups = vec!["g".to_string(); n + degenerate];
        let hists = analyze_kernel_set(&stack, &groups, bins).unwrap();
        prop_assert_eq!(hists.len(), 1);
        prop_assert_eq!(hists[0].total_filters(), n + degenerate);
        prop_assert_eq!(hists[0].degenerate_count, degenerate);
    }

    // blueprint-built filters always sit in the top histogram bin
    #[test]
    fn blueprint_filters_fully_explained(seed in 0u64..200, m in 2usize..=12, n in 1usize..=6) {
        let params = BsconvUParams::<f64>::init(m, n, 3, seed);
        let f = materialize_u(&params);
        let kk = m * 9;
        for fi in 0..n {
            let filter = Tensor::from_vec(&[m, 3, 3], f.data()[fi * kk..(fi + 1) * kk].to_vec()).unwrap();
            match pca_filter(&filter, false).unwrap() {
                PcaOutcome::Spectrum(res) => prop_assert!(res.explained_ratios[0] >= 0.9999),
                PcaOutcome::Degenerate { .. } => {} // all-zero weight row is legal
            }
        }
    }
}
