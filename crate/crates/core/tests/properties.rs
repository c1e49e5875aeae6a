//! Randomized invariants of the metrics, refinement, probability and I/O
//! layers.

use advstereo::agcp::{build_system, cg_solve, energy, refine, AgcpConfig};
use advstereo::generator::{normalize_probability, soft_argmax, topk_pool};
use advstereo::io::{decode_pfm, encode_pfm, FloatMap};
use advstereo::metrics::{auc, bmp, optimal_auc, sparsification, sparsification_from_flags};
use advstereo::stereo::{
    ground_truth_confidence, sgm_aggregate, ConfidenceKind, ConfidenceMap, CostKind, CostVolume,
    DisparityMap, Image, ValidityMask,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn conf_and_bad(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1..=max).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..1.0, n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

/// Image, disparity and confidence of one random scene.
fn scene(max_side: usize) -> impl Strategy<Value = (Image, DisparityMap, ConfidenceMap)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0.0f64..1.0, h * w * 3),
            prop::collection::vec(0.0f64..8.0, h * w),
            prop::collection::vec(0.0f64..1.0, h * w),
        )
            .prop_map(move |(i, d, q)| {
                (
                    Image::new(h, w, 3, i).unwrap(),
                    DisparityMap::new(h, w, d).unwrap(),
                    ConfidenceMap::new(h, w, q, ConfidenceKind::Estimated).unwrap(),
                )
            })
    })
}

fn agcp_config() -> impl Strategy<Value = AgcpConfig> {
    (0.1f64..3.0, 0usize..=2, 0.05f64..0.5).prop_map(|(gamma, radius_m, sigma_color)| AgcpConfig {
        gamma,
        radius_m,
        sigma_color,
        cg_tol: 1e-12,
        ..AgcpConfig::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn curve_errors_are_rates((conf, bad) in conf_and_bad(40), n_points in 2usize..30) {
        let c = sparsification_from_flags(&conf, &bad, 1.0, n_points).unwrap();
        prop_assert_eq!(c.errors.len(), n_points);
        prop_assert_eq!(c.densities[0], 1.0);
        for e in &c.errors {
            prop_assert!((0.0..=1.0).contains(e));
        }
        let rate = bad.iter().filter(|&&b| b).count() as f64 / bad.len() as f64;
        prop_assert!((c.errors[0] - rate).abs() < 1e-15);
    }

    #[test]
    fn curve_ignores_monotone_confidence_transforms((conf, bad) in conf_and_bad(40)) {
        let a = sparsification_from_flags(&conf, &bad, 1.0, 20).unwrap();
        let warped: Vec<f64> = conf.iter().map(|c| (3.0 * c).exp() - 7.0).collect();
        let b = sparsification_from_flags(&warped, &bad, 1.0, 20).unwrap();
        prop_assert_eq!(a.errors, b.errors);
    }

    #[test]
    fn curve_ignores_pixel_order((conf, bad) in conf_and_bad(40), rot in 0usize..40) {
        let k = rot % conf.len();
        let (mut c2, mut b2) = (conf.clone(), bad.clone());
        c2.rotate_left(k);
        b2.rotate_left(k);
        let a = sparsification_from_flags(&conf, &bad, 1.0, 15).unwrap();
        let b = sparsification_from_flags(&c2, &b2, 1.0, 15).unwrap();
        prop_assert_eq!(a.errors, b.errors);
    }

    #[test]
    fn oracle_confidence_is_a_lower_bound(
        gt in prop::collection::vec(0.0f64..8.0, 30),
        noise in prop::collection::vec(-3.0f64..3.0, 30),
        q in prop::collection::vec(0.0f64..1.0, 30),
    ) {
        let gt = DisparityMap::new(5, 6, gt).unwrap();
        let d = DisparityMap::new(5, 6, gt.data.iter().zip(&noise).map(|(g, e)| g + e).collect()).unwrap();
        let valid = ValidityMask::all(5, 6, true);
        let q = ConfidenceMap::new(5, 6, q, ConfidenceKind::Estimated).unwrap();
        let c = sparsification(&q, &d, &gt, &valid, 1.0, 25).unwrap();
        let best = optimal_auc(&d, &gt, &valid, 1.0, 25).unwrap();
        prop_assert!(best <= auc(&c));
        prop_assert!((c.errors[0] - bmp(&d, &gt, &valid, 1.0).unwrap() / 100.0).abs() < 1e-12);
    }

    #[test]
    fn ground_truth_confidence_is_binary_and_strict(
        gt in prop::collection::vec(0.0f64..8.0, 12),
        noise in prop::collection::vec(-2.0f64..2.0, 12),
        rho in 0.1f64..2.0,
    ) {
        let gt = DisparityMap::new(3, 4, gt).unwrap();
        let d = DisparityMap::new(3, 4, gt.data.iter().zip(&noise).map(|(g, e)| g + e).collect()).unwrap();
        let q = ground_truth_confidence(&d, &gt, &ValidityMask::all(3, 4, true), rho).unwrap();
        for i in 0..12 {
            let want = if (d.data[i] - gt.data[i]).abs() < rho { 1.0 } else { 0.0 };
            prop_assert_eq!(q.data[i], want);
        }
    }

    #[test]
    fn system_is_symmetric_and_matches_a_dense_solve((img, d, q) in scene(7), cfg in agcp_config()) {
        let (a, b) = build_system(&d, &q, &img, &cfg).unwrap();
        prop_assert_eq!(a.asymmetry(), 0.0);
        let n = b.len();
        let dense = a.to_dense();
        let m = DMatrix::from_fn(n, n, |i, j| dense[i][j]);
        let direct = m.cholesky().unwrap().solve(&DVector::from_vec(b.clone()));
        let sol = cg_solve(&a, &b, 1e-14, 20 * n + 100).unwrap();
        for i in 0..n {
            prop_assert!((sol.x[i] - direct[i]).abs() < 1e-6, "{} vs {}", sol.x[i], direct[i]);
        }
    }

    #[test]
    fn refinement_lowers_the_energy((img, d, q) in scene(9), cfg in agcp_config()) {
        let r = refine(&d, &q, &img, &cfg).unwrap();
        let before = energy(&d.data, &d, &q, &img, &cfg).unwrap();
        let after = energy(&r.data, &d, &q, &img, &cfg).unwrap();
        prop_assert!(after <= before + 1e-9 * before.abs().max(1.0), "{after} > {before}");
    }

    #[test]
    fn refinement_stays_within_the_gcp_range((img, d, q) in scene(9), cfg in agcp_config()) {
        let gcps: Vec<f64> = d.data.iter().zip(&q.data).filter(|(_, &c)| c > cfg.tau).map(|(&v, _)| v).collect();
        prop_assume!(!gcps.is_empty());
        // pixels without a GCP in their component keep their input value
        let lo = gcps.iter().chain(&d.data).copied().fold(f64::INFINITY, f64::min);
        let hi = gcps.iter().chain(&d.data).copied().fold(f64::NEG_INFINITY, f64::max);
        let r = refine(&d, &q, &img, &cfg).unwrap();
        for &v in &r.data {
            prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
        }
    }

    #[test]
    fn refinement_scales_linearly((img, d, q) in scene(8), cfg in agcp_config(), s in 0.2f64..4.0) {
        let scaled = DisparityMap::new(d.height, d.width, d.data.iter().map(|v| v * s).collect()).unwrap();
        let a = refine(&d, &q, &img, &cfg).unwrap();
        let b = refine(&scaled, &q, &img, &cfg).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x * s - y).abs() < 1e-5 * s.max(1.0), "{} vs {}", x * s, y);
        }
    }

    #[test]
    fn constant_disparity_is_a_fixed_point((img, _, q) in scene(8), cfg in agcp_config(), c in 0.0f64..8.0) {
        let d = DisparityMap::filled(img.height, img.width, c);
        let r = refine(&d, &q, &img, &cfg).unwrap();
        for &v in &r.data {
            prop_assert!((v - c).abs() < 1e-6, "{v} vs {c}");
        }
    }

    #[test]
    fn probabilities_form_a_simplex(
        costs in prop::collection::vec(-5.0f64..5.0, 6 * 7),
        sigma in 0.001f64..10.0,
        k in 1usize..=7,
    ) {
        let r = CostVolume::new(2, 3, 7, costs, CostKind::Refined).unwrap();
        let p = normalize_probability(&r, sigma).unwrap();
        let top = topk_pool(&p, k).unwrap();
        let d = soft_argmax(&p);
        for i in 0..6 {
            let row = &p.data[i * 7..(i + 1) * 7];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let t = &top.data[i * k..(i + 1) * k];
            prop_assert!(t.windows(2).all(|w| w[0] >= w[1]));
            let mut sorted = row.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            prop_assert_eq!(t, &sorted[..k]);
            prop_assert!((0.0..=6.0).contains(&d.data[i]));
        }
    }

    #[test]
    fn sgm_costs_dominate_the_input(
        costs in prop::collection::vec(0.0f64..1.0, 3 * 4 * 5),
        p1 in 0.01f64..0.2,
        extra in 0.0f64..0.5,
        paths in prop::sample::select(vec![1usize, 2, 4]),
    ) {
        let c = CostVolume::new(3, 4, 5, costs, CostKind::Raw).unwrap();
        let out = sgm_aggregate(&c, p1, p1 + extra, paths).unwrap();
        for (a, b) in out.data.iter().zip(&c.data) {
            // each path adds a non-negative smoothness cost
            prop_assert!(*a >= *b - 1e-12);
        }
    }

    #[test]
    fn pfm_round_trip_is_bit_exact(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let mut state = seed;
        let data: Vec<f32> = (0..h * w)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits((state >> 32) as u32 & 0x7f7f_ffff | ((state as u32) & 0x8000_0000))
            })
            .collect();
        let map = FloatMap { height: h, width: w, data };
        let back = decode_pfm(&encode_pfm(&map).unwrap()).unwrap();
        prop_assert_eq!(back.height, h);
        prop_assert_eq!(back.width, w);
        for (a, b) in back.data.iter().zip(&map.data) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
