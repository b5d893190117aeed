use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn labels(b: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> MaskBatch {
    let mut v = Vec::new();
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                v.push(f(bi, y, x));
            }
        }
    }
    MaskBatch::labels(b, h, w, v).unwrap()
}

fn preds(b: usize, h: usize, w: usize, value: f64) -> MaskBatch {
    MaskBatch::predictions(b, h, w, vec![value; b * h * w]).unwrap()
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> FeatureVectorBatch {
    let mut v = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.extend(row.into_iter().map(|a| a / n));
    }
    FeatureVectorBatch::new(rows, dim, v).unwrap()
}

/// Unit fibers in `B×D×h×w` layout.
fn unit_map(rng: &mut ChaCha8Rng, b: usize, d: usize, h: usize, w: usize) -> FeatureMapBatch {
    let hw = h * w;
    let mut v = vec![0.0; b * d * hw];
    for bi in 0..b {
        for s in 0..hw {
            let fiber: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = fiber.iter().map(|a| a * a).sum::<f64>().sqrt();
            for c in 0..d {
                v[(bi * d + c) * hw + s] = fiber[c] / n;
            }
        }
    }
    FeatureMapBatch::new(b, d, h, w, v).unwrap()
}

#[test]
fn weight_map_of_constant_masks_is_one() {
    for fill in [0.0, 1.0] {
        let y = labels(1, 40, 36, |_, _, _| fill);
        let w = weight_map(&y, 31).unwrap();
        assert!(w.values().iter().all(|v| *v == 1.0));
    }
}

#[test]
fn weight_map_half_plane_boundary() {
    // left half foreground: the 3-wide window straddling the edge averages to 2/3 or 1/3,
    // giving 1 + 5/3 on both boundary columns and 1 everywhere else
    let y = labels(1, 8, 8, |_, _, x| if x < 4 { 1.0 } else { 0.0 });
    let w = weight_map(&y, 3).unwrap();
    for r in 0..8 {
        for c in 0..8 {
            let expect = if c == 3 || c == 4 { 8.0 / 3.0 } else { 1.0 };
            assert_abs_diff_eq!(w.values()[r * 8 + c], expect, epsilon = 1e-12);
        }
    }
}

#[test]
fn weight_map_values_stay_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = labels(2, 16, 12, |_, _, _| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
    let w = weight_map(&y, 5).unwrap();
    assert!(w.values().iter().all(|v| (1.0..=6.0).contains(v)));
}

#[test]
fn weight_map_rejects_bad_input() {
    let y = labels(1, 8, 8, |_, _, _| 0.0);
    assert!(matches!(weight_map(&y, 4), Err(MmsError::Parameter(_))));
    assert!(matches!(weight_map(&y, 9), Err(MmsError::Parameter(_))));
    let soft = preds(1, 8, 8, 0.3);
    assert!(matches!(weight_map(&soft, 3), Err(MmsError::Validation(_))));
    assert!(MaskBatch::labels(1, 2, 2, vec![0.0, 1.0, 0.5, 1.0]).is_err());
}

#[test]
fn bce_of_clamped_truth_is_tiny() {
    let y = labels(2, 8, 8, |b, r, c| ((b + r + c) % 2) as f64);
    let p = MaskBatch::predictions(
        2,
        8,
        8,
        y.values().iter().map(|v| if *v == 1.0 { 1.0 - 1e-6 } else { 1e-6 }).collect(),
    )
    .unwrap();
    let w = weight_map(&y, 3).unwrap();
    assert!(weighted_bce(&p, &y, &w).unwrap() <= 1e-5);
}

#[test]
fn bce_at_one_half_is_ln2_for_any_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let y = labels(3, 8, 8, |_, _, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    let w = WeightMap::new(3, 8, 8, (0..192).map(|_| rng.random_range(1.0..6.0)).collect()).unwrap();
    let loss = weighted_bce(&preds(3, 8, 8, 0.5), &y, &w).unwrap();
    assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
}

#[test]
fn bce_rejects_shape_mismatch() {
    let y = labels(1, 8, 8, |_, _, _| 0.0);
    let p = preds(1, 8, 9, 0.5);
    let w = WeightMap::uniform(1, 8, 8);
    assert!(matches!(weighted_bce(&p, &y, &w), Err(MmsError::Validation(_))));
    assert!(MaskBatch::predictions(1, 1, 2, vec![0.5, f64::NAN]).is_err());
}

#[test]
fn iou_fixed_points() {
    let w = WeightMap::uniform(1, 4, 4);
    let zeros = labels(1, 4, 4, |_, _, _| 0.0);
    let ones = labels(1, 4, 4, |_, _, _| 1.0);
    assert_eq!(weighted_iou(&preds(1, 4, 4, 0.0), &zeros, &w).unwrap(), 0.0);
    assert_eq!(weighted_iou(&preds(1, 4, 4, 1.0), &ones, &w).unwrap(), 0.0);
    assert_abs_diff_eq!(
        weighted_iou(&preds(1, 4, 4, 1.0), &zeros, &w).unwrap(),
        1.0 - 1.0 / 17.0,
        epsilon = 1e-12
    );
}

#[test]
fn sup_loss_fixed_points() {
    let y = labels(1, 8, 8, |_, r, _| if r < 3 { 1.0 } else { 0.0 });
    let p = MaskBatch::predictions(
        1,
        8,
        8,
        y.values().iter().map(|v| if *v == 1.0 { 1.0 - 1e-6 } else { 1e-6 }).collect(),
    )
    .unwrap();
    assert!(sup_loss(&p, &y).unwrap() <= 1e-4);

    // all-wrong saturated prediction on a 4x4 background image
    let y = labels(1, 4, 4, |_, _, _| 0.0);
    let loss = sup_loss(&preds(1, 4, 4, 1.0), &y).unwrap();
    assert_abs_diff_eq!(loss, 1.0 - 1.0 / 17.0 - (1e-6f64).ln(), epsilon = 1e-9);
    assert_abs_diff_eq!(loss, 0.941176 + 13.8155, epsilon = 1e-4);
}

#[test]
fn sup_kernel_shrinks_to_fit() {
    assert_eq!(sup_kernel(288, 512), 31);
    assert_eq!(sup_kernel(8, 8), 7);
    assert_eq!(sup_kernel(4, 5), 3);
    assert_eq!(sup_kernel(9, 30), 9);
}

#[test]
fn similarity_of_near_binary_agreement_is_small() {
    let p = MaskBatch::predictions(
        1,
        8,
        8,
        (0..64).map(|i| if i % 3 == 0 { 1.0 - 1e-6 } else { 1e-6 }).collect(),
    )
    .unwrap();
    assert!(similarity_loss(&p, &p).unwrap() <= 1e-3);
}

#[test]
fn total_loss_examples() {
    let ones = LossComponents {
        l_sup: 1.0,
        l_nce_sup: 1.0,
        l_sim: 1.0,
        l_nce: 1.0,
    };
    assert_eq!(total_loss(&ones, &LossWeights::default()).unwrap(), 1.0);
    assert_eq!(total_loss(&ones, &LossWeights::new(0.0, 0.0, 0.0, 0.0).unwrap()).unwrap(), 0.0);
    let c = LossComponents {
        l_sup: 1.0,
        l_nce_sup: 2.0,
        l_sim: 3.0,
        l_nce: 4.0,
    };
    let lw = LossWeights::new(0.2, 0.2, 0.3, 0.3).unwrap();
    assert_abs_diff_eq!(total_loss(&c, &lw).unwrap(), 2.7, epsilon = 1e-12);
}

#[test]
fn total_loss_names_the_bad_component() {
    let c = LossComponents {
        l_sim: f64::NAN,
        ..Default::default()
    };
    match total_loss(&c, &LossWeights::default()) {
        Err(MmsError::NonFiniteLoss { component, .. }) => assert_eq!(component, "l_sim"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(LossWeights::new(-0.1, 0.0, 0.0, 0.0).is_err());
}

#[test]
fn all_negative_fixed_points() {
    let q = FeatureVectorBatch::new(1, 2, vec![1.0, 0.0]).unwrap();
    let k1 = FeatureVectorBatch::new(1, 2, vec![0.0, 1.0]).unwrap();
    for tau in [0.07, 0.5, 3.0] {
        let l = info_nce_all_negative(&q, &k1, Temperature::new(tau).unwrap()).unwrap();
        assert_abs_diff_eq!(l, 2f64.ln(), epsilon = 1e-12);
    }
    let q = FeatureVectorBatch::new(1, 5, vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let mut kv = vec![0.0; 20];
    for i in 0..4 {
        kv[i * 5 + i + 1] = 1.0;
    }
    let k4 = FeatureVectorBatch::new(4, 5, kv).unwrap();
    let l = info_nce_all_negative(&q, &k4, Temperature::default()).unwrap();
    assert_abs_diff_eq!(l, 5f64.ln(), epsilon = 1e-12);
}

#[test]
fn all_negative_rejects_bad_input() {
    let q = FeatureVectorBatch::new(1, 2, vec![1.0, 0.0]).unwrap();
    let empty = FeatureVectorBatch::new(0, 2, vec![]).unwrap();
    assert!(matches!(
        info_nce_all_negative(&q, &empty, Temperature::default()),
        Err(MmsError::Parameter(_))
    ));
    let long = FeatureVectorBatch::new(1, 2, vec![1.1, 0.0]).unwrap();
    assert!(matches!(
        info_nce_all_negative(&q, &long, Temperature::default()),
        Err(MmsError::Validation(_))
    ));
    assert!(Temperature::new(0.0).is_err());
}

#[test]
fn pixel_nce_orthonormal_closed_form() {
    // 4x4 locations with mutually orthonormal fibers (D = 16), identical maps
    let (h, w, d) = (4, 4, 16);
    let mut v = vec![0.0; d * h * w];
    for s in 0..h * w {
        v[s * h * w + s] = 1.0;
    }
    let f = FeatureMapBatch::new(1, d, h, w, v).unwrap();
    let tau = Temperature::new(0.5).unwrap();
    let l = pixel_info_nce(&f, &f, tau, NegativeKeys::Sampled(8), 7).unwrap();
    assert_abs_diff_eq!(l, (1.0 + 8.0 * (-2.0f64).exp()).ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(l, 0.733657, epsilon = 1e-6);
}

#[test]
fn pixel_nce_identical_fibers_is_log_k_plus_one() {
    let (h, w, d) = (3, 4, 6);
    let fiber = [0.5, -0.5, 0.5, -0.5, 0.0, 0.0];
    let mut v = vec![0.0; d * h * w];
    for c in 0..d {
        for s in 0..h * w {
            v[c * h * w + s] = fiber[c];
        }
    }
    let f = FeatureMapBatch::new(1, d, h, w, v).unwrap();
    for k in [1, 5, 11] {
        let l = pixel_info_nce(&f, &f, Temperature::default(), NegativeKeys::Sampled(k), 3).unwrap();
        assert_abs_diff_eq!(l, ((k + 1) as f64).ln(), epsilon = 1e-9);
    }
}

#[test]
fn pixel_nce_rejects_bad_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = unit_map(&mut rng, 1, 4, 2, 2);
    let g = unit_map(&mut rng, 1, 4, 2, 4);
    let tau = Temperature::default();
    assert!(matches!(
        pixel_info_nce(&f, &f, tau, NegativeKeys::Sampled(4), 0),
        Err(MmsError::Parameter(_))
    ));
    assert!(matches!(
        pixel_info_nce(&f, &g, tau, NegativeKeys::All, 0),
        Err(MmsError::Validation(_))
    ));
}

#[test]
fn pixel_nce_sampling_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = unit_map(&mut rng, 2, 8, 4, 4);
    let b = unit_map(&mut rng, 2, 8, 4, 4);
    let tau = Temperature::new(0.2).unwrap();
    let l1 = pixel_info_nce(&a, &b, tau, NegativeKeys::Sampled(5), 42).unwrap();
    let l2 = pixel_info_nce(&a, &b, tau, NegativeKeys::Sampled(5), 42).unwrap();
    let l3 = pixel_info_nce(&a, &b, tau, NegativeKeys::Sampled(5), 43).unwrap();
    assert_eq!(l1, l2);
    assert_ne!(l1, l3);
}

#[test]
fn negative_keys_parse_and_serialize() {
    assert_eq!("all".parse::<NegativeKeys>().unwrap(), NegativeKeys::All);
    assert_eq!("64".parse::<NegativeKeys>().unwrap(), NegativeKeys::Sampled(64));
    assert!("0".parse::<NegativeKeys>().is_err());
    let json = serde_json::to_string(&NegativeKeys::All).unwrap();
    assert_eq!(serde_json::from_str::<NegativeKeys>(&json).unwrap(), NegativeKeys::All);
    let json = serde_json::to_string(&NegativeKeys::Sampled(7)).unwrap();
    assert_eq!(json, "7");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn all_negative_stays_within_bounds(seed in any::<u64>(), rows in 1usize..5, keys in 1usize..7,
                                        dim in 2usize..12, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = unit_rows(&mut rng, rows, dim);
        let k = unit_rows(&mut rng, keys, dim);
        let l = info_nce_all_negative(&q, &k, Temperature::new(tau).unwrap()).unwrap();
        let kf = keys as f64;
        prop_assert!(l >= (1.0 + kf * (-1.0 / tau).exp()).ln() - 1e-12);
        prop_assert!(l <= (1.0 + kf * (1.0 / tau).exp()).ln() + 1e-12);
    }

    #[test]
    fn similarity_is_symmetric(seed in any::<u64>(), b in 1usize..3, h in 3usize..9, w in 3usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * h * w;
        let p1 = MaskBatch::predictions(b, h, w, (0..n).map(|_| rng.random_range(0.01..0.99)).collect()).unwrap();
        let p2 = MaskBatch::predictions(b, h, w, (0..n).map(|_| rng.random_range(0.01..0.99)).collect()).unwrap();
        prop_assert_eq!(similarity_loss(&p1, &p2).unwrap(), similarity_loss(&p2, &p1).unwrap());
    }

    #[test]
    fn region_losses_are_finite_and_bounded(seed in any::<u64>(), b in 1usize..4, h in 2usize..9, w in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * h * w;
        let p = MaskBatch::predictions(b, h, w, (0..n).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap();
        let y = MaskBatch::labels(b, h, w, (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect()).unwrap();
        let l = sup_loss(&p, &y).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
        let iou = weighted_iou(&p, &y, &WeightMap::uniform(b, h, w)).unwrap();
        prop_assert!((0.0..1.0).contains(&iou));
    }

    #[test]
    fn pixel_nce_invariant_under_common_permutation(seed in any::<u64>(), d in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (3, 4);
        let hw = h * w;
        let f = unit_map(&mut rng, 1, d, h, w);
        let mut perm: Vec<usize> = (0..hw).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let mut pv = vec![0.0; d * hw];
        for c in 0..d {
            for s in 0..hw {
                pv[c * hw + perm[s]] = f.values()[c * hw + s];
            }
        }
        let fp = FeatureMapBatch::new(1, d, h, w, pv).unwrap();
        let tau = Temperature::new(0.3).unwrap();
        for k in [NegativeKeys::All, NegativeKeys::Sampled(hw - 1)] {
            let a = pixel_info_nce(&f, &f, tau, k, 1).unwrap();
            let b = pixel_info_nce(&fp, &fp, tau, k, 1).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

#[test]
fn pixel_nce_dense_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (b, d, h, w) = (2, 3, 3, 2);
    let f1 = unit_map(&mut rng, b, d, h, w);
    let f2 = unit_map(&mut rng, b, d, h, w);
    let tau = Temperature::new(0.5).unwrap();
    let g = pixel_info_nce_with_grad(&f1, &f2, tau, NegativeKeys::All, 0).unwrap();
    let eval = |a: &[f64], c: &[f64]| {
        let a = FeatureMapBatch::new(b, d, h, w, a.to_vec()).unwrap();
        let c = FeatureMapBatch::new(b, d, h, w, c.to_vec()).unwrap();
        pixel_info_nce(&a, &c, tau, NegativeKeys::All, 0).unwrap()
    };
    let eps = 1e-5;
    for i in 0..f1.values().len() {
        for (which, grad) in [(0, &g.grad_a), (1, &g.grad_b)] {
            let (mut p, mut m) = (f1.values().to_vec(), f2.values().to_vec());
            let (mut p2, mut m2) = (p.clone(), m.clone());
            if which == 0 {
                p[i] += eps;
                p2[i] -= eps;
            } else {
                m[i] += eps;
                m2[i] -= eps;
            }
            let fd = (eval(&p, &m) - eval(&p2, &m2)) / (2.0 * eps);
            assert_abs_diff_eq!(fd, grad[i], epsilon = 1e-7);
        }
    }
}
