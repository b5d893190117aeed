use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::losses::{
    info_nce_all_negative_with_grad, pixel_info_nce_with_grad, sup_loss_with_grad, NegativeKeys,
    Temperature,
};

fn small(base: usize) -> (SegNetConfig, HeadConfig, HeadConfig) {
    (
        SegNetConfig::with_base_channels(base),
        HeadConfig::classifier(8, 16),
        HeadConfig::projector(8, 8),
    )
}

fn small_params(seed: u64) -> ModelParams {
    let (s, c, p) = small(8);
    init_params(&s, &c, &p, seed).unwrap()
}

fn random_images(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..b * 3 * h * w).map(|_| rng.random::<f32>()).collect();
    Tensor::from_vec(&[b, 3, h, w], data).unwrap()
}

#[test]
fn seg_output_shape_and_range() {
    let params = small_params(0);
    let out = params.predict(Branch::One, &random_images(2, 64, 64, 1)).unwrap();
    assert_eq!((out.batch(), out.height(), out.width()), (2, 64, 64));
    assert!(out.values().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn seg_full_resolution_default_config() {
    let params = init_params(
        &SegNetConfig::default(),
        &HeadConfig::default_classifier(),
        &HeadConfig::default_projector(),
        3,
    )
    .unwrap();
    let out = params.predict(Branch::Two, &random_images(1, 512, 288, 2)).unwrap();
    assert_eq!((out.batch(), out.height(), out.width()), (1, 512, 288));
    let feats = params.projector_forward(Branch::One, &out).unwrap();
    assert_eq!((feats.dim(), feats.height(), feats.width()), (64, 128, 72));
}

#[test]
fn indivisible_input_is_a_shape_error() {
    let params = small_params(0);
    for (h, w) in [(60, 64), (64, 72), (8, 8)] {
        let err = params.predict(Branch::One, &random_images(1, h, w, 0)).unwrap_err();
        assert!(matches!(err, MmsError::Shape(_)), "{h}x{w}: {err}");
    }
    let pred = MaskBatch::predictions(1, 12, 12, vec![0.5; 144]).unwrap();
    assert!(matches!(params.classifier_forward(Branch::One, &pred), Err(MmsError::Shape(_))));
    let pred = MaskBatch::predictions(1, 6, 8, vec![0.5; 48]).unwrap();
    assert!(matches!(params.projector_forward(Branch::One, &pred), Err(MmsError::Shape(_))));
}

#[test]
fn eval_mode_is_deterministic() {
    let params = small_params(5);
    let x = random_images(2, 32, 48, 9);
    let a = params.predict(Branch::One, &x).unwrap();
    let b = params.predict(Branch::One, &x).unwrap();
    assert_eq!(a.values(), b.values());
    let fa = params.projector_forward(Branch::Two, &a).unwrap();
    let fb = params.projector_forward(Branch::Two, &b).unwrap();
    assert_eq!(fa.values(), fb.values());
}

#[test]
fn same_seed_identical_different_seed_differs() {
    assert_eq!(small_params(1), small_params(1));
    assert_ne!(small_params(1).store, small_params(2).store);
}

#[test]
fn branches_share_shapes_not_values() {
    let p = small_params(4);
    let one: Vec<_> = p.store.params().filter(|(n, _)| n.starts_with("f1.")).collect();
    let two: Vec<_> = p.store.params().filter(|(n, _)| n.starts_with("f2.")).collect();
    assert_eq!(one.len(), two.len());
    let mut differs = false;
    for ((n1, t1), (n2, t2)) in one.iter().zip(&two) {
        assert_eq!(n1[3..], n2[3..]);
        assert_eq!(t1.shape(), t2.shape());
        differs |= t1.data() != t2.data();
    }
    assert!(differs);
}

#[test]
fn head_contracts() {
    let params = small_params(7);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vals: Vec<f64> = (0..2 * 64 * 64).map(|_| rng.random::<f64>()).collect();
    let pred = MaskBatch::predictions(2, 64, 64, vals).unwrap();
    let v = params.classifier_forward(Branch::One, &pred).unwrap();
    assert_eq!((v.rows(), v.dim()), (2, 16));
    assert!(v.max_norm_deviation() < 1e-5);
    let cos: f64 = v.row(0).iter().zip(v.row(1)).map(|(a, b)| a * b).sum();
    assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&cos));
    let f = params.projector_forward(Branch::Two, &pred).unwrap();
    assert_eq!((f.batch(), f.dim(), f.height(), f.width()), (2, 8, 16, 16));
    assert!(f.max_norm_deviation() < 1e-5);
}

#[test]
fn default_head_shapes() {
    let params = init_params(
        &SegNetConfig::with_base_channels(8),
        &HeadConfig::default_classifier(),
        &HeadConfig::default_projector(),
        0,
    )
    .unwrap();
    let pred = MaskBatch::predictions(3, 64, 64, vec![0.3; 3 * 64 * 64]).unwrap();
    let v = params.classifier_forward(Branch::Two, &pred).unwrap();
    assert_eq!((v.rows(), v.dim()), (3, 128));
    let f = params.projector_forward(Branch::One, &pred).unwrap();
    assert_eq!((f.dim(), f.height(), f.width()), (64, 16, 16));
}

#[test]
fn outputs_stay_finite_over_many_passes() {
    let params = small_params(11);
    for i in 0..100 {
        let out = params.predict(Branch::One, &random_images(1, 16, 16, i)).unwrap();
        assert!(out.values().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let (s, c, p) = small(8);
    let bad_seg = SegNetConfig {
        encoder_stages: 3,
        ..s.clone()
    };
    assert!(init_params(&bad_seg, &c, &p, 0).is_err());
    let bad_groups = SegNetConfig {
        encoder_base_channels: 6,
        ..s.clone()
    };
    assert!(init_params(&bad_groups, &c, &p, 0).is_err());
    assert!(init_params(&s, &HeadConfig::classifier(8, 16).with_pools(2), &p, 0).is_err());
    assert!(init_params(&s, &c, &HeadConfig::projector(8, 8).with_pools(3), 0).is_err());
}

impl HeadConfig {
    fn with_pools(mut self, n: usize) -> Self {
        self.pool_count = n;
        self
    }
}

#[test]
fn parameter_count_is_stable() {
    let params = init_params(
        &SegNetConfig::default(),
        &HeadConfig::default_classifier(),
        &HeadConfig::default_projector(),
        0,
    )
    .unwrap();
    let report = params.param_report();
    assert_eq!(report[0].1, report[1].1);
    assert_eq!(
        report,
        vec![
            ("f1", 843_217),
            ("f2", 843_217),
            ("c1", 82_816),
            ("c2", 82_816),
            ("p1", 37_568),
            ("p2", 37_568),
        ]
    );
}

#[test]
fn train_mode_updates_running_statistics() {
    let mut params = small_params(2);
    let before = params.store.buffer("f1.encoder.stem.bn.running_mean").unwrap().clone();
    let untouched = params.store.buffer("f2.encoder.stem.bn.running_mean").unwrap().clone();
    params.seg_forward(Branch::One, &random_images(2, 16, 16, 0), Mode::Train).unwrap();
    assert_ne!(params.store.buffer("f1.encoder.stem.bn.running_mean").unwrap(), &before);
    assert_eq!(params.store.buffer("f2.encoder.stem.bn.running_mean").unwrap(), &untouched);
}

#[test]
fn copy_seg_makes_branches_equal() {
    let mut params = small_params(2);
    params.copy_seg(Branch::One, Branch::Two).unwrap();
    let x = random_images(1, 16, 16, 4);
    let a = params.predict(Branch::One, &x).unwrap();
    let b = params.predict(Branch::Two, &x).unwrap();
    assert_eq!(a.values(), b.values());
}

#[test]
fn pretrained_roundtrip_fills_both_encoders() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.bin");
    let donor = small_params(21);
    save_encoder_weights(&donor, Branch::Two, &path).unwrap();

    let (mut s, c, p) = small(8);
    s.pretrained_weights_path = Some(path.clone());
    let loaded = init_params(&s, &c, &p, 99).unwrap();
    let expected = donor.encoder_tensors(Branch::Two);
    for branch in Branch::BOTH {
        assert_eq!(loaded.encoder_tensors(branch), expected);
    }
    // decoders keep their own initialization
    assert_ne!(
        loaded.store.param("f1.decoder.up1.conv.weight").unwrap(),
        donor.store.param("f2.decoder.up1.conv.weight").unwrap()
    );
}

#[test]
fn pretrained_shape_mismatch_names_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.bin");
    let (s16, c, p) = small(16);
    save_encoder_weights(&init_params(&s16, &c, &p, 0).unwrap(), Branch::One, &path).unwrap();
    let (mut s, _, _) = small(8);
    s.pretrained_weights_path = Some(path);
    match init_params(&s, &c, &p, 0) {
        Err(MmsError::Load { reason, .. }) => assert!(reason.contains("encoder."), "{reason}"),
        other => panic!("expected load error, got {other:?}"),
    }
}

#[test]
fn pretrained_missing_parameter_is_named() {
    let params = small_params(0);
    let mut weights = params.encoder_tensors(Branch::One);
    let (dropped, _) = weights.remove(3);
    let mut target = small_params(1);
    match target.install_encoder(&weights) {
        Err(MmsError::Load { reason, .. }) => assert!(reason.contains(&dropped), "{reason}"),
        other => panic!("expected load error, got {other:?}"),
    }
}

fn to_tensor(shape: &[usize], g: &[f64]) -> Tensor {
    Tensor::from_vec(shape, g.iter().map(|&v| v as f32).collect()).unwrap()
}

#[test]
fn every_parameter_receives_gradient() {
    let params = small_params(13);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (b, h, w) = (2, 32, 32);
    let labels: Vec<f64> = (0..b * h * w).map(|_| f64::from(rng.random::<bool>())).collect();
    let y = MaskBatch::labels(b, h, w, labels).unwrap();
    let mut g = Graph::new(true);
    let x = g.input(random_images(b, h, w, 2));
    let mut seeds: Vec<(NodeId, Tensor)> = Vec::new();
    let mut heads = Vec::new();
    for branch in Branch::BOTH {
        let p = params.build_seg(&mut g, branch, x, Mode::Train).unwrap();
        let pm = MaskBatch::from_tensor(g.value(p), MaskKind::Prediction).unwrap();
        let sup = sup_loss_with_grad(&pm, &y).unwrap();
        seeds.push((p, to_tensor(&[b, 1, h, w], &sup.grad)));
        let c = params.build_classifier(&mut g, branch, p).unwrap();
        let f = params.build_projector(&mut g, branch, p).unwrap();
        heads.push((c, f));
    }
    let tau = Temperature::default();
    let (c1, c2) = (heads[0].0, heads[1].0);
    let q = FeatureVectorBatch::from_tensor(g.value(c1)).unwrap();
    let k = FeatureVectorBatch::from_tensor(g.value(c2)).unwrap();
    let nce = info_nce_all_negative_with_grad(&q, &k, tau).unwrap();
    seeds.push((c1, to_tensor(g.value(c1).shape(), &nce.grad_a)));
    seeds.push((c2, to_tensor(g.value(c2).shape(), &nce.grad_b)));
    let (f1, f2) = (heads[0].1, heads[1].1);
    let m1 = FeatureMapBatch::from_tensor(g.value(f1)).unwrap();
    let m2 = FeatureMapBatch::from_tensor(g.value(f2)).unwrap();
    let pix = pixel_info_nce_with_grad(&m1, &m2, tau, NegativeKeys::All, 0).unwrap();
    seeds.push((f1, to_tensor(g.value(f1).shape(), &pix.grad_a)));
    seeds.push((f2, to_tensor(g.value(f2).shape(), &pix.grad_b)));

    let refs: Vec<(NodeId, &Tensor)> = seeds.iter().map(|(n, t)| (*n, t)).collect();
    let grads = g.backward(&refs).unwrap();
    for (name, _) in params.store.params() {
        let grad = grads.get(name).unwrap_or_else(|| panic!("{name} got no gradient"));
        assert!(grad.is_finite(), "{name}");
        assert!(grad.data().iter().any(|&v| v != 0.0), "{name} gradient is all zero");
    }
}
