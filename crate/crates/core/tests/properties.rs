use esm::decomp;
use esm::linalg;
use esm::merge::{self, MergeConfig, RankRule};
use esm::scaling::{self, apply_variant, Variant};
use esm::tensorstore::{self, DenseTensor, TensorMap};
use esm::verify;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |v| DMatrix::from_vec(r, c, v))
    })
}

fn tensor() -> impl Strategy<Value = DenseTensor> {
    prop::collection::vec(0usize..4, 0..=3).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
            .prop_map(move |data| DenseTensor::new(shape.clone(), data).unwrap())
    })
}

fn tensor_map() -> impl Strategy<Value = TensorMap> {
    prop::collection::btree_map("[a-z]{1,6}(\\.[a-z0-9_]{1,6}){0,3}", tensor(), 0..6)
        .prop_map(|m| m.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn container_round_trip_is_bit_exact(map in tensor_map()) {
        let bytes = tensorstore::encode_tensor_map(&map);
        let back = tensorstore::decode_tensor_map(&bytes).unwrap();
        prop_assert!(back.bit_eq(&map));
        prop_assert_eq!(tensorstore::encode_tensor_map(&back), bytes);
    }

    #[test]
    fn truncated_bytes_never_panic(map in tensor_map(), cut in 0usize..64) {
        let bytes = tensorstore::encode_tensor_map(&map);
        let end = bytes.len().saturating_sub(cut + 1);
        let _ = tensorstore::decode_tensor_map(&bytes[..end]);
    }

    #[test]
    fn svd_reconstructs_with_ordered_nonnegative_values(m in matrix(9, 9)) {
        let f = linalg::thin_svd(&m).unwrap();
        let scale = m.amax().max(1.0);
        prop_assert!((f.reconstruct() - &m).amax() <= 1e-11 * scale);
        prop_assert!(f.s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(f.s.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn whitened_factor_is_orthonormal(m in matrix(8, 8)) {
        let w = linalg::whiten(&m).unwrap();
        let small = if w.nrows() >= w.ncols() { w.tr_mul(&w) } else { &w * w.transpose() };
        let id = DMatrix::identity(small.nrows(), small.ncols());
        prop_assert!((small - id).amax() < 1e-10);
    }

    #[test]
    fn relative_power_is_scale_free(
        norms in prop::collection::vec(0.01f64..100.0, 1..10),
        c in 0.01f64..100.0,
        exponent in 0.0f64..4.0,
    ) {
        let a = scaling::relative_power(&norms, exponent);
        let scaled: Vec<f64> = norms.iter().map(|n| n * c).collect();
        let b = scaling::relative_power(&scaled, exponent);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
        prop_assert!(a.iter().all(|&v| v >= 0.0));
        // Ratios before the exponent average to one.
        let linear = scaling::relative_power(&norms, 1.0);
        let mean = linear.iter().sum::<f64>() / linear.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn variant_split_is_exact(g in 0.0f64..50.0) {
        let split = apply_variant(g, Variant::NoiseMinus).unwrap() * apply_variant(g, Variant::SignalPlus).unwrap();
        prop_assert_eq!(split, apply_variant(g, Variant::Full).unwrap());
        prop_assert!(apply_variant(g, Variant::NoiseMinus).unwrap() <= 1.0);
        prop_assert!(apply_variant(g, Variant::SignalPlus).unwrap() >= 1.0);
        if g > 0.0 {
            let r = apply_variant(g, Variant::Reverse).unwrap();
            prop_assert!((r * g - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn esd_never_loses_to_svd(seed in any::<u64>(), d_out in 2usize..12, d_in in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dw = verify::gaussian(d_out, d_in, &mut rng);
        let x = verify::gaussian(3 * d_in, d_in, &mut rng);
        for (k, esd, svd) in verify::esd_vs_svd_instance(&dw, &x).unwrap() {
            prop_assert!(esd <= svd + 1e-9 * svd.max(1.0), "k={} esd={} svd={}", k, esd, svd);
        }
    }

    #[test]
    fn energy_curves_are_monotone_and_end_at_one(spec in prop::collection::vec(0.0f64..10.0, 1..20)) {
        prop_assume!(spec.iter().any(|&v| v > 0.0));
        let mut sorted = spec.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        for kind in [decomp::SpectrumKind::Svd, decomp::SpectrumKind::Esd] {
            let curve = decomp::energy_retention(&sorted, kind).unwrap();
            prop_assert!(curve.windows(2).all(|w| w[1] >= w[0]));
            prop_assert_eq!(*curve.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn rank_budget_stays_in_range(d_out in 1usize..5000, tasks in 1usize..40, ratio in 0.5f64..2.0) {
        prop_assume!(d_out >= tasks);
        let k = decomp::scaled_rank_budget(d_out, tasks, ratio).unwrap();
        prop_assert!((1..=d_out).contains(&k));
        prop_assert_eq!(decomp::rank_budget(d_out, tasks).unwrap(), d_out / tasks);
    }

    #[test]
    fn alpha_search_finds_a_concave_peak(peak in 0.0f64..2.0, width in 0.1f64..5.0) {
        let a = merge::select_alpha(0.0, 2.0, |a| Ok::<_, ()>(-((a - peak) / width).powi(2))).unwrap();
        prop_assert!((a - peak).abs() <= merge::ALPHA_TOLERANCE, "peak {} found {}", peak, a);
    }

    #[test]
    fn merged_layer_has_unit_spectrum(seed in any::<u64>(), tasks in 2usize..5, k in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d_out, d_in) = (tasks * k + 3, tasks * k + 1);
        let dws: Vec<_> = (0..tasks).map(|_| verify::gaussian(d_out, d_in, &mut rng)).collect();
        let xs: Vec<_> = (0..tasks).map(|_| verify::gaussian(2 * d_in, d_in, &mut rng)).collect();
        let cfg = MergeConfig { rank_rule: RankRule::Fixed(k), ..MergeConfig::default() };
        let m = merge::merge_layer(&dws, &xs, &cfg).unwrap();
        let s = linalg::thin_svd(&m.delta).unwrap().s;
        for (i, &v) in s.iter().enumerate() {
            let want = if i < tasks * k { 1.0 } else { 0.0 };
            prop_assert!((v - want).abs() < 1e-9, "sigma[{}] = {}", i, v);
        }
    }
}
