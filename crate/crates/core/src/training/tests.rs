use std::path::Path;

use tempfile::TempDir;

use super::*;
use crate::data::{disjoint_split, scan_dataset};
use crate::losses::{sup_loss_with_grad, NegativeKeys};
use crate::models::{HeadConfig, SegNetConfig};
use crate::synthdata::{generate_dataset, SynthConfig};

const SIDE: usize = 32;

fn dataset(n: usize) -> TempDir {
    let dir = TempDir::new().unwrap();
    generate_dataset(&SynthConfig::new(n, SIDE, SIDE, 5), dir.path()).unwrap();
    dir
}

fn manifest(root: &Path, fraction: f64) -> SplitManifest {
    let listing = scan_dataset(root).unwrap();
    disjoint_split(&listing.labeled, fraction, 3).unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        seg: SegNetConfig {
            multi_scale_groups: 2,
            ..SegNetConfig::with_base_channels(4)
        },
        classifier: HeadConfig::classifier(8, 16),
        projector: HeadConfig::projector(8, 8),
    }
}

fn tcfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        learning_rate: 1e-3,
        k_neg: NegativeKeys::All,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn acfg() -> AugmentConfig {
    AugmentConfig {
        target_width: SIDE,
        target_height: SIDE,
        ..AugmentConfig::default()
    }
}

fn first_batch(m: &SplitManifest, a: &AugmentConfig) -> StepBatch {
    BatchStream::new(m, a, 4, 9).unwrap().next().unwrap().unwrap()
}

fn params_equal(a: &ModelParams, b: &ModelParams, prefix: &str) -> bool {
    a.store
        .params()
        .filter(|(n, _)| n.starts_with(prefix))
        .all(|(n, t)| b.store.param(n).unwrap() == t)
}

#[test]
fn zero_weights_change_no_parameter() {
    let data = dataset(12);
    let m = manifest(data.path(), 0.34);
    let a = acfg();
    let mut t = tcfg(1);
    t.loss_weights = LossWeights::new(0.0, 0.0, 0.0, 0.0).unwrap();
    let mut params = ModelParams::new(&tiny_model(), 1).unwrap();
    let before = params.clone();
    let mut opt = Adam::new(1e-3);
    let batch = first_batch(&m, &a);
    train_step(&mut params, &mut opt, &batch, &t, 0).unwrap();
    assert!(params_equal(&before, &params, ""));
}

#[test]
fn disabled_heads_are_untouched() {
    let data = dataset(12);
    let m = manifest(data.path(), 0.34);
    let a = acfg();
    let mut t = tcfg(1);
    t.use_classifiers = false;
    t.use_projectors = false;
    let mut params = ModelParams::new(&tiny_model(), 1).unwrap();
    let before = params.clone();
    let mut opt = Adam::new(1e-3);
    let batch = first_batch(&m, &a);
    let loss = train_step(&mut params, &mut opt, &batch, &t, 0).unwrap();
    assert_eq!(loss.components.l_nce_sup, 0.0);
    assert_eq!(loss.components.l_nce, 0.0);
    assert!(loss.components.l_sim > 0.0);
    for root in ["c1.", "c2.", "p1.", "p2."] {
        assert!(params_equal(&before, &params, root), "{root} moved");
    }
    assert!(!params_equal(&before, &params, "f1."));
}

#[test]
fn all_terms_active_by_default() {
    let data = dataset(12);
    let m = manifest(data.path(), 0.34);
    let a = acfg();
    let mut params = ModelParams::new(&tiny_model(), 1).unwrap();
    let before = params.clone();
    let mut opt = Adam::new(1e-3);
    let loss = train_step(&mut params, &mut opt, &first_batch(&m, &a), &tcfg(1), 0).unwrap();
    for (name, v) in loss.components.named() {
        assert!(v.is_finite() && v > 0.0, "{name} = {v}");
    }
    let expected = 0.25
        * (loss.components.l_sup + loss.components.l_nce_sup + loss.components.l_sim + loss.components.l_nce);
    assert!((loss.total - expected).abs() < 1e-12);
    for root in ["f1.", "f2.", "c1.", "c2.", "p1.", "p2."] {
        assert!(!params_equal(&before, &params, root), "{root} did not move");
    }
}

#[test]
fn non_finite_output_names_component() {
    let data = dataset(12);
    let m = manifest(data.path(), 0.34);
    let a = acfg();
    let mut params = ModelParams::new(&tiny_model(), 1).unwrap();
    params.store.param_mut("f2.head.bias").unwrap().data_mut()[0] = f32::NAN;
    let mut opt = Adam::new(1e-3);
    let err = train_step(&mut params, &mut opt, &first_batch(&m, &a), &tcfg(1), 0).unwrap_err();
    match abort(err, 3, 7) {
        MmsError::TrainingAbort { component, epoch, step, value } => {
            assert_eq!(component, "l_sup");
            assert_eq!((epoch, step), (3, 7));
            assert!(value.is_nan());
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn identical_seeds_identical_runs() {
    let data = dataset(12);
    let m = manifest(data.path(), 0.34);
    let a = acfg();
    let r1 = train(&m, &tcfg(2), &a, &tiny_model(), None).unwrap();
    let r2 = train(&m, &tcfg(2), &a, &tiny_model(), None).unwrap();
    assert_eq!(r1.history.len(), 2);
    assert_eq!(r1.history, r2.history);
    assert_eq!(r1.params, r2.params);
    let mut other = tcfg(2);
    other.seed = 12;
    let r3 = train(&m, &other, &a, &tiny_model(), None).unwrap();
    assert_ne!(r1.history, r3.history);
}

#[test]
fn zero_epochs_writes_initial_checkpoint() {
    let data = dataset(12);
    let m = manifest(data.path(), 0.34);
    let out = TempDir::new().unwrap();
    let state = train(&m, &tcfg(0), &acfg(), &tiny_model(), Some(out.path())).unwrap();
    assert!(state.history.is_empty());
    assert_eq!(state.epoch, 0);
    let loaded = load_checkpoint(&out.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded, state);
    assert_eq!(loaded.params, ModelParams::new(&tiny_model(), 11).unwrap());
}

#[test]
fn checkpoint_roundtrip_and_rejections() {
    let data = dataset(12);
    let m = manifest(data.path(), 0.34);
    let out = TempDir::new().unwrap();
    let mut t = tcfg(3);
    t.checkpoint_every = 2;
    let state = train(&m, &t, &acfg(), &tiny_model(), Some(out.path())).unwrap();
    let path = out.path().join(CHECKPOINT_FILE);

    let log = std::fs::read_to_string(out.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<EpochMetrics> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines, state.history);

    let loaded = load_checkpoint_checked(&path, &state.config_hash).unwrap();
    assert_eq!(loaded, state);
    let images = first_batch(&m, &acfg()).x1.images;
    for b in Branch::BOTH {
        let p0 = state.params.predict(b, &images).unwrap();
        let p1 = loaded.params.predict(b, &images).unwrap();
        assert!(p0.values().iter().zip(p1.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    let mut other = tcfg(3);
    other.seed = 1;
    let wrong = config_digest(&tiny_model(), &other, &acfg()).unwrap();
    assert!(matches!(
        load_checkpoint_checked(&path, &wrong),
        Err(MmsError::Incompatible { .. })
    ));

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let bad = out.path().join("bad.mms");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&bad), Err(MmsError::Integrity { .. })));
    std::fs::write(&bad, &bytes[..bytes.len() - 9]).unwrap();
    assert!(matches!(load_checkpoint(&bad), Err(MmsError::Integrity { .. })));
}

#[test]
fn resumed_optimizer_matches_continuous_run() {
    let data = dataset(12);
    let m = manifest(data.path(), 0.34);
    let a = acfg();
    let out = TempDir::new().unwrap();
    let state = train(&m, &tcfg(1), &a, &tiny_model(), Some(out.path())).unwrap();
    let loaded = load_checkpoint(&out.path().join(CHECKPOINT_FILE)).unwrap();
    let batch = first_batch(&m, &a);
    let (mut p0, mut o0) = (state.params, state.optimizer);
    let (mut p1, mut o1) = (loaded.params, loaded.optimizer);
    let l0 = train_step(&mut p0, &mut o0, &batch, &tcfg(1), 4).unwrap();
    let l1 = train_step(&mut p1, &mut o1, &batch, &tcfg(1), 4).unwrap();
    assert_eq!(l0, l1);
    assert_eq!(p0, p1);
}

#[test]
fn supervised_weights_match_manual_loop() {
    let data = dataset(8);
    let listing = scan_dataset(data.path()).unwrap();
    let m = disjoint_split(&listing.labeled, 1.0, 3).unwrap();
    assert!(m.unlabeled.is_empty());
    let a = acfg();
    let mut t = tcfg(2);
    t.loss_weights = LossWeights::supervised_only();
    let state = train(&m, &t, &a, &tiny_model(), None).unwrap();

    let mut params = ModelParams::new(&tiny_model(), t.seed).unwrap();
    let mut opt = Adam::new(t.learning_rate as f32);
    let mut trace = Vec::new();
    for epoch in 0..t.epochs {
        let mut sum = 0.0;
        let mut steps = 0;
        for batch in BatchStream::new(&m, &a, t.batch_size, epoch_seed(t.seed, epoch)).unwrap() {
            let batch = batch.unwrap();
            let mut grads = crate::nn::Gradients::default();
            let mut obs = Vec::new();
            let mut step_loss = 0.0;
            for (branch, lb) in [(Branch::One, &batch.x1), (Branch::Two, &batch.x2)] {
                let mut g = Graph::new(true);
                let x = g.input(lb.images.clone());
                let p = params.build_seg(&mut g, branch, x, Mode::Train).unwrap();
                let pred = MaskBatch::from_tensor(g.value(p), MaskKind::Prediction).unwrap();
                let s = sup_loss_with_grad(&pred, &lb.masks).unwrap();
                step_loss += s.value;
                let seed = Tensor::from_vec(g.value(p).shape(), s.grad.iter().map(|v| *v as f32).collect()).unwrap();
                grads.merge(g.backward(&[(p, &seed)]).unwrap());
                obs.extend(g.take_bn_observations());
            }
            opt.step(&mut params.store, &grads).unwrap();
            params.commit_bn(obs).unwrap();
            sum += step_loss;
            steps += 1;
        }
        trace.push(sum / steps as f64);
    }
    let logged: Vec<f64> = state.history.iter().map(|h| h.l_sup).collect();
    assert_eq!(logged, trace);
    assert!(state.history.iter().all(|h| h.l_sim == 0.0 && h.l_nce == 0.0 && h.l_nce_sup == 0.0));
    assert_eq!(state.params, params);
}

#[test]
fn baseline_logs_only_supervised_term() {
    let data = dataset(8);
    let listing = scan_dataset(data.path()).unwrap();
    let m = disjoint_split(&listing.labeled, 1.0, 3).unwrap();
    let run = |seed| {
        let mut t = tcfg(2);
        t.seed = seed;
        train_supervised_baseline(&m, &t, &acfg(), &tiny_model(), None).unwrap()
    };
    let state = run(11);
    assert_eq!(state.history.len(), 2);
    for h in &state.history {
        assert!(h.l_sup > 0.0);
        assert_eq!((h.l_nce_sup, h.l_sim, h.l_nce), (0.0, 0.0, 0.0));
        assert_eq!(h.total, h.l_sup);
    }
    assert_eq!(state.train_config.loss_weights, LossWeights::supervised_only());
    let images = first_batch(&m, &acfg()).x1.images;
    assert_eq!(
        state.params.predict(Branch::One, &images).unwrap(),
        state.params.predict(Branch::Two, &images).unwrap()
    );
    assert_eq!(run(11).history, state.history);
}

#[test]
fn healthy_run_stays_finite() {
    let data = dataset(12);
    let m = manifest(data.path(), 0.34);
    let state = train(&m, &tcfg(50), &acfg(), &tiny_model(), None).unwrap();
    assert_eq!(state.history.len(), 50);
    for h in &state.history {
        for (name, v) in h.components().named() {
            assert!(v.is_finite(), "epoch {} {name} = {v}", h.epoch);
        }
        assert!(h.total.is_finite());
    }
}
