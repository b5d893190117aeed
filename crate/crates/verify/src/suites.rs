//! The nine acceptance checks. Each returns a [`CriterionOutcome`]; a library error inside a
//! check turns into a failing outcome carrying the message.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mms_core::data::{
    disjoint_split, labeled_count, scan_dataset, Image, LabeledPath, Mask, SplitManifest,
};
use mms_core::data::AugmentConfig;
use mms_core::evaluation::{dsc, evaluate_set, EvalSettings, Segmenter};
use mms_core::losses::{
    self, FeatureMapBatch, FeatureVectorBatch, LossComponents, LossWeights, MaskBatch,
    NegativeKeys, Temperature,
};
use mms_core::models::{HeadConfig, ModelConfig, SegNetConfig};
use mms_core::synthdata::{generate_dataset, generate_unlabeled_variants, SynthConfig};
use mms_core::training::{
    config_digest, load_checkpoint, load_checkpoint_checked, save_checkpoint, train, CheckpointState,
    EpochMetrics, TrainConfig,
};
use mms_core::{MmsError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

use crate::gradcheck::{max_relative_error, numeric_gradient, STEP};
use crate::oracles;
use crate::CriterionOutcome;

pub const ORACLE_TOLERANCE: f64 = 1e-6;
pub const GRADIENT_TOLERANCE: f64 = 1e-3;
pub const EQUALITY_TOLERANCE: f64 = 1e-9;
pub const OVERFIT_DSC: f64 = 0.95;

fn run(
    id: u32,
    name: &'static str,
    budget: Option<Duration>,
    check: impl FnOnce() -> Result<(bool, String)>,
) -> CriterionOutcome {
    let start = Instant::now();
    let (mut passed, mut detail) = match check() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    let elapsed = start.elapsed();
    if let Some(b) = budget {
        if elapsed > b {
            passed = false;
            detail.push_str(&format!("; over the {}s budget", b.as_secs()));
        }
    }
    CriterionOutcome {
        id,
        name,
        passed,
        detail,
        elapsed,
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn binary(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let density = rng.random_range(0.1..0.9);
    (0..n).map(|_| f64::from(u8::from(rng.random_bool(density)))).collect()
}

/// Probabilities in `[lo, hi]`; with `extremes` a few land exactly on 0 or 1.
fn probabilities(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, extremes: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if extremes && rng.random_bool(0.05) {
                f64::from(u8::from(rng.random_bool(0.5)))
            } else {
                rng.random_range(lo..=hi)
            }
        })
        .collect()
}

fn split_images(values: &[f64], b: usize) -> Vec<Vec<f64>> {
    values.chunks(values.len() / b).map(<[f64]>::to_vec).collect()
}

fn rows(values: &[f64], d: usize) -> Vec<Vec<f64>> {
    values.chunks(d).map(<[f64]>::to_vec).collect()
}

/// `[image][location][channel]` view of a `B×D×h×w` buffer.
fn fibers(values: &[f64], b: usize, d: usize, hw: usize) -> Vec<Vec<Vec<f64>>> {
    (0..b)
        .map(|i| {
            (0..hw)
                .map(|s| (0..d).map(|c| values[(i * d + c) * hw + s]).collect())
                .collect()
        })
        .collect()
}

fn random_map(rng: &mut ChaCha8Rng, b: usize, d: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * d * hw];
    for i in 0..b {
        for s in 0..hw {
            for (c, v) in unit_vector(rng, d).into_iter().enumerate() {
                out[(i * d + c) * hw + s] = v;
            }
        }
    }
    out
}

#[derive(Default)]
struct Worst(Vec<(&'static str, f64)>);

impl Worst {
    fn record(&mut self, name: &'static str, err: f64) {
        match self.0.iter_mut().find(|(n, _)| *n == name) {
            Some((_, e)) => *e = e.max(err),
            None => self.0.push((name, err)),
        }
    }

    fn max(&self) -> f64 {
        self.0.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    fn summary(&self) -> String {
        self.0
            .iter()
            .map(|(n, e)| format!("{n} {e:.1e}"))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Every objective against its scalar-loop oracle on 100 random small inputs.
pub fn criterion_1() -> CriterionOutcome {
    run(1, "loss oracle equivalence", Some(Duration::from_secs(60)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0c1);
        let mut worst = Worst::default();
        for _ in 0..100 {
            let b = rng.random_range(1..=4);
            let h = rng.random_range(2..=8);
            let w = rng.random_range(2..=8);
            let n = b * h * w;
            let y = binary(&mut rng, n);
            let p = probabilities(&mut rng, n, 0.0, 1.0, true);
            let p2 = probabilities(&mut rng, n, 0.0, 1.0, true);
            let yb = MaskBatch::labels(b, h, w, y.clone())?;
            let pb = MaskBatch::predictions(b, h, w, p.clone())?;
            let p2b = MaskBatch::predictions(b, h, w, p2.clone())?;
            let (yi, pi, p2i) = (split_images(&y, b), split_images(&p, b), split_images(&p2, b));

            let k = 2 * rng.random_range(0..=(h.min(w) - 1) / 2) + 1;
            let wm = losses::weight_map(&yb, k)?;
            let wo: Vec<Vec<f64>> = yi.iter().map(|img| oracles::weight_map(img, h, w, k)).collect();
            let flat: Vec<f64> = wo.concat();
            let wm_err = wm
                .values()
                .iter()
                .zip(&flat)
                .map(|(a, o)| oracles::relative_error(*a, *o))
                .fold(0.0, f64::max);
            worst.record("weight_map", wm_err);
            worst.record(
                "weighted_bce",
                oracles::relative_error(losses::weighted_bce(&pb, &yb, &wm)?, oracles::weighted_bce(&pi, &yi, &wo)),
            );
            worst.record(
                "weighted_iou",
                oracles::relative_error(losses::weighted_iou(&pb, &yb, &wm)?, oracles::weighted_iou(&pi, &yi, &wo)),
            );
            worst.record(
                "sup_loss",
                oracles::relative_error(losses::sup_loss(&pb, &yb)?, oracles::sup_loss(&pi, &yi, h, w)),
            );
            worst.record(
                "similarity_loss",
                oracles::relative_error(
                    losses::similarity_loss(&pb, &p2b)?,
                    oracles::similarity_loss(&pi, &p2i, h, w),
                ),
            );

            let tau = if rng.random_bool(0.3) { 0.07 } else { rng.random_range(0.05..1.0) };
            let d = rng.random_range(2..=16);
            let nq = rng.random_range(1..=4);
            let nk = rng.random_range(1..=8);
            let q: Vec<f64> = (0..nq).flat_map(|_| unit_vector(&mut rng, d)).collect();
            let kv: Vec<f64> = (0..nk).flat_map(|_| unit_vector(&mut rng, d)).collect();
            let value = losses::info_nce_all_negative(
                &FeatureVectorBatch::new(nq, d, q.clone())?,
                &FeatureVectorBatch::new(nk, d, kv.clone())?,
                Temperature::new(tau)?,
            )?;
            worst.record(
                "info_nce_all_negative",
                oracles::relative_error(value, oracles::info_nce_all_negative(&rows(&q, d), &rows(&kv, d), tau)),
            );

            let (fh, fw) = (rng.random_range(1..=8), rng.random_range(2..=8));
            let hw = fh * fw;
            let f1 = random_map(&mut rng, b, d, hw);
            let f2 = random_map(&mut rng, b, d, hw);
            let value = losses::pixel_info_nce(
                &FeatureMapBatch::new(b, d, fh, fw, f1.clone())?,
                &FeatureMapBatch::new(b, d, fh, fw, f2.clone())?,
                Temperature::new(tau)?,
                NegativeKeys::All,
                rng.random(),
            )?;
            worst.record(
                "pixel_info_nce",
                oracles::relative_error(
                    value,
                    oracles::pixel_info_nce_all(&fibers(&f1, b, d, hw), &fibers(&f2, b, d, hw), tau),
                ),
            );

            let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..5.0));
            let lw: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let value = losses::total_loss(
                &LossComponents {
                    l_sup: c[0],
                    l_nce_sup: c[1],
                    l_sim: c[2],
                    l_nce: c[3],
                },
                &LossWeights::new(lw[0], lw[1], lw[2], lw[3])?,
            )?;
            worst.record("total_loss", oracles::relative_error(value, oracles::total_loss(c, lw)));
        }
        Ok((
            worst.max() <= ORACLE_TOLERANCE,
            format!("max relative error {:.2e} <= {ORACLE_TOLERANCE:e} ({})", worst.max(), worst.summary()),
        ))
    })
}

fn mask_batch(b: usize, h: usize, w: usize, v: &[f64]) -> Result<MaskBatch> {
    MaskBatch::predictions(b, h, w, v.to_vec())
}

/// Analytic gradients against central differences on 20 cases per objective, plus the
/// stop-gradient on the similarity targets.
pub fn criterion_2() -> CriterionOutcome {
    run(2, "gradient checks", Some(Duration::from_secs(120)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0c2);
        let mut worst = Worst::default();
        let mut slot_effect: f64 = 0.0;
        for _ in 0..20 {
            let b = rng.random_range(1..=4);
            let h = rng.random_range(2..=8);
            let w = rng.random_range(2..=8);
            let n = b * h * w;
            let y = binary(&mut rng, n);
            let yb = MaskBatch::labels(b, h, w, y.clone())?;
            let p = probabilities(&mut rng, n, 0.05, 0.95, false);
            let p2 = probabilities(&mut rng, n, 0.05, 0.95, false);
            let pb = mask_batch(b, h, w, &p)?;
            let p2b = mask_batch(b, h, w, &p2)?;
            let k = 2 * rng.random_range(0..=(h.min(w) - 1) / 2) + 1;
            let wm = losses::weight_map(&yb, k)?;

            let g = losses::weighted_bce_with_grad(&pb, &yb, &wm)?.grad;
            let fd = numeric_gradient(|x| losses::weighted_bce(&mask_batch(b, h, w, x).unwrap(), &yb, &wm).unwrap(), &p, STEP);
            worst.record("weighted_bce", max_relative_error(&g, &fd));

            let g = losses::weighted_iou_with_grad(&pb, &yb, &wm)?.grad;
            let fd = numeric_gradient(|x| losses::weighted_iou(&mask_batch(b, h, w, x).unwrap(), &yb, &wm).unwrap(), &p, STEP);
            worst.record("weighted_iou", max_relative_error(&g, &fd));

            let g = losses::sup_loss_with_grad(&pb, &yb)?.grad;
            let fd = numeric_gradient(|x| losses::sup_loss(&mask_batch(b, h, w, x).unwrap(), &yb).unwrap(), &p, STEP);
            worst.record("sup_loss", max_relative_error(&g, &fd));

            // prediction slots only: the other operand is held as a constant target
            let sim = losses::similarity_loss_with_grad(&pb, &p2b)?;
            let p2i = split_images(&p2, b);
            let pi = split_images(&p, b);
            let fd_a = numeric_gradient(|x| 0.5 * oracles::region(&split_images(x, b), &p2i, h, w), &p, STEP);
            let fd_b = numeric_gradient(|x| 0.5 * oracles::region(&split_images(x, b), &pi, h, w), &p2, STEP);
            worst.record("similarity_loss", max_relative_error(&sim.grad_a, &fd_a));
            worst.record("similarity_loss", max_relative_error(&sim.grad_b, &fd_b));
            let full = numeric_gradient(|x| losses::similarity_loss(&mask_batch(b, h, w, x).unwrap(), &p2b).unwrap(), &p, STEP);
            slot_effect = slot_effect.max(full.iter().zip(&fd_a).map(|(f, a)| (f - a).abs()).fold(0.0, f64::max));

            let tau = rng.random_range(0.1..1.0);
            let t = Temperature::new(tau)?;
            let d = rng.random_range(2..=16);
            let nq = rng.random_range(1..=4);
            let nk = rng.random_range(1..=8);
            let q: Vec<f64> = (0..nq).flat_map(|_| unit_vector(&mut rng, d)).collect();
            let kv: Vec<f64> = (0..nk).flat_map(|_| unit_vector(&mut rng, d)).collect();
            let qb = FeatureVectorBatch::new(nq, d, q.clone())?;
            let kb = FeatureVectorBatch::new(nk, d, kv.clone())?;
            let r = losses::info_nce_all_negative_with_grad(&qb, &kb, t)?;
            let fd_q = numeric_gradient(
                |x| losses::info_nce_all_negative(&FeatureVectorBatch::new(nq, d, x.to_vec()).unwrap(), &kb, t).unwrap(),
                &q,
                STEP,
            );
            let fd_k = numeric_gradient(
                |x| losses::info_nce_all_negative(&qb, &FeatureVectorBatch::new(nk, d, x.to_vec()).unwrap(), t).unwrap(),
                &kv,
                STEP,
            );
            worst.record("info_nce_all_negative", max_relative_error(&r.grad_a, &fd_q));
            worst.record("info_nce_all_negative", max_relative_error(&r.grad_b, &fd_k));

            let (fh, fw) = (rng.random_range(1..=6), rng.random_range(2..=6));
            let hw = fh * fw;
            let fb = rng.random_range(1..=2);
            let f1 = random_map(&mut rng, fb, d, hw);
            let f2 = random_map(&mut rng, fb, d, hw);
            let m2 = FeatureMapBatch::new(fb, d, fh, fw, f2.clone())?;
            let m1 = FeatureMapBatch::new(fb, d, fh, fw, f1.clone())?;
            let seed: u64 = rng.random();
            for (name, k_neg) in [
                ("pixel_info_nce", NegativeKeys::All),
                ("pixel_info_nce (sampled)", NegativeKeys::Sampled(rng.random_range(1..hw.max(2)))),
            ] {
                let r = losses::pixel_info_nce_with_grad(&m1, &m2, t, k_neg, seed)?;
                let fd1 = numeric_gradient(
                    |x| losses::pixel_info_nce(&FeatureMapBatch::new(fb, d, fh, fw, x.to_vec()).unwrap(), &m2, t, k_neg, seed).unwrap(),
                    &f1,
                    STEP,
                );
                let fd2 = numeric_gradient(
                    |x| losses::pixel_info_nce(&m1, &FeatureMapBatch::new(fb, d, fh, fw, x.to_vec()).unwrap(), t, k_neg, seed).unwrap(),
                    &f2,
                    STEP,
                );
                worst.record(name, max_relative_error(&r.grad_a, &fd1));
                worst.record(name, max_relative_error(&r.grad_b, &fd2));
            }

            let c: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..5.0)).collect();
            let lw = LossWeights::new(rng.random(), rng.random(), rng.random(), rng.random())?;
            let fd = numeric_gradient(
                |x| {
                    losses::total_loss(
                        &LossComponents {
                            l_sup: x[0],
                            l_nce_sup: x[1],
                            l_sim: x[2],
                            l_nce: x[3],
                        },
                        &lw,
                    )
                    .unwrap()
                },
                &c,
                STEP,
            );
            worst.record("total_loss", max_relative_error(&[lw.lambda1, lw.lambda2, lw.lambda3, lw.lambda4], &fd));
        }
        // the target slots do carry sensitivity; the analytic gradient must exclude it
        let slots_cut = slot_effect > 1e-6;
        Ok((
            worst.max() <= GRADIENT_TOLERANCE && slots_cut,
            format!(
                "max relative error {:.2e} <= {GRADIENT_TOLERANCE:e} ({}); similarity target-slot sensitivity {:.1e} excluded from the analytic gradient",
                worst.max(),
                worst.summary(),
                slot_effect
            ),
        ))
    })
}

/// Bounds of the all-negative objective on random unit vectors and its two exact values.
pub fn criterion_3() -> CriterionOutcome {
    run(3, "all-negative InfoNCE bounds", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0c3);
        let mut violations = 0;
        for _ in 0..1000 {
            let d = rng.random_range(2..=16);
            let nq = rng.random_range(1..=4);
            let nk = rng.random_range(1..=16);
            let tau = rng.random_range(0.05..2.0);
            let q: Vec<f64> = (0..nq).flat_map(|_| unit_vector(&mut rng, d)).collect();
            let kv: Vec<f64> = (0..nk).flat_map(|_| unit_vector(&mut rng, d)).collect();
            let l = losses::info_nce_all_negative(
                &FeatureVectorBatch::new(nq, d, q)?,
                &FeatureVectorBatch::new(nk, d, kv)?,
                Temperature::new(tau)?,
            )?;
            let k = nk as f64;
            let lo = (1.0 + k * (-1.0 / tau).exp()).ln();
            let hi = (1.0 + k * (1.0 / tau).exp()).ln();
            // one ulp of slack for the rounding of the bounds themselves
            if l < lo * (1.0 - f64::EPSILON) || l > hi * (1.0 + f64::EPSILON) {
                violations += 1;
            }
        }
        let t = Temperature::new(0.3)?;
        let log2 = losses::info_nce_all_negative(
            &FeatureVectorBatch::new(1, 2, vec![1.0, 0.0])?,
            &FeatureVectorBatch::new(1, 2, vec![0.0, 1.0])?,
            t,
        )?;
        let mut keys = vec![0.0; 4 * 5];
        for i in 0..4 {
            keys[i * 5 + i + 1] = 1.0;
        }
        let log5 = losses::info_nce_all_negative(
            &FeatureVectorBatch::new(1, 5, vec![1.0, 0.0, 0.0, 0.0, 0.0])?,
            &FeatureVectorBatch::new(4, 5, keys)?,
            t,
        )?;
        let e2 = (log2 - 2f64.ln()).abs();
        let e5 = (log5 - 5f64.ln()).abs();
        Ok((
            violations == 0 && e2 <= EQUALITY_TOLERANCE && e5 <= EQUALITY_TOLERANCE,
            format!("{violations}/1000 bound violations; |L - ln 2| = {e2:.1e}, |L - ln 5| = {e5:.1e}"),
        ))
    })
}

fn fake_listing(n: usize) -> Vec<LabeledPath> {
    (0..n)
        .map(|i| LabeledPath {
            image: PathBuf::from(format!("images/{i:04}.png")),
            mask: PathBuf::from(format!("masks/{i:04}.png")),
        })
        .collect()
}

fn split_is_valid(m: &SplitManifest, n: usize, fraction: f64) -> bool {
    let a: HashSet<&Path> = m.labeled_x1.iter().map(|p| p.image.as_path()).collect();
    let b: HashSet<&Path> = m.labeled_x2.iter().map(|p| p.image.as_path()).collect();
    let u: HashSet<&Path> = m.unlabeled.iter().map(PathBuf::as_path).collect();
    a.is_disjoint(&b)
        && a.is_disjoint(&u)
        && b.is_disjoint(&u)
        && m.labeled_x1.len().abs_diff(m.labeled_x2.len()) <= 1
        && a.len() + b.len() == labeled_count(n, fraction)
        && a.len() + b.len() + u.len() == n
}

/// Disjoint, balanced labeled subsets over random triples and the 472-image instance.
pub fn criterion_4() -> CriterionOutcome {
    run(4, "split protocol", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0c4);
        let (mut ok, mut rejected) = (0, 0);
        let mut bad = Vec::new();
        for _ in 0..200 {
            let n = rng.random_range(2..=600);
            let fraction = rng.random_range(0.001..=1.0);
            let seed: u64 = rng.random();
            let listing = fake_listing(n);
            match disjoint_split(&listing, fraction, seed) {
                Ok(m) if split_is_valid(&m, n, fraction) => ok += 1,
                Err(MmsError::Split(_)) if labeled_count(n, fraction) < 2 => rejected += 1,
                other => bad.push(format!("n={n} fraction={fraction} seed={seed}: {:?}", other.map(|_| ()))),
            }
        }
        let m = disjoint_split(&fake_listing(472), 0.05, 0)?;
        let instance = (m.labeled_x1.len(), m.labeled_x2.len());
        Ok((
            bad.is_empty() && instance == (12, 12),
            format!(
                "{ok} valid splits, {rejected} correctly rejected (<2 labeled), {} invalid; 472 at 5% -> {} + {}{}",
                bad.len(),
                instance.0,
                instance.1,
                bad.first().map(|b| format!("; first: {b}")).unwrap_or_default()
            ),
        ))
    })
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> Result<Mask> {
    Mask::new(w, h, (0..w * h).map(|_| u8::from(rng.random_bool(density))).collect())
}

/// The Dice score against a set-arithmetic oracle, symmetry and its fixed points.
pub fn criterion_8() -> CriterionOutcome {
    run(8, "DSC metric", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0c8);
        let (mut mismatches, mut asymmetric) = (0, 0);
        for _ in 0..500 {
            let (w, h) = (rng.random_range(1..=32), rng.random_range(1..=32));
            let density = [0.0, 0.02, 0.3, 0.7, 1.0][rng.random_range(0..5)];
            let a = random_mask(&mut rng, w, h, density)?;
            let density_b = rng.random_range(0.0..=1.0);
            let b = random_mask(&mut rng, w, h, density_b)?;
            let d = dsc(&a, &b)?;
            if d != oracles::dsc(a.data(), b.data()) {
                mismatches += 1;
            }
            if d != dsc(&b, &a)? {
                asymmetric += 1;
            }
        }
        let full = |on: &dyn Fn(usize) -> bool| Mask::new(20, 20, (0..400).map(|i| u8::from(on(i))).collect());
        let g = full(&|i| i < 100)?;
        let same = dsc(&g, &g)?;
        let disjoint = dsc(&g, &full(&|i| (100..200).contains(&i))?)?;
        let half = dsc(&g, &full(&|i| (50..150).contains(&i))?)?;
        let fixed = same == 1.0 && disjoint == 0.0 && half == 0.5;
        Ok((
            mismatches == 0 && asymmetric == 0 && fixed,
            format!(
                "{mismatches}/500 oracle mismatches, {asymmetric} asymmetric; identical {same}, disjoint {disjoint}, half overlap {half}"
            ),
        ))
    })
}

/// A synthetic labeled set with photometric variants as the unlabeled pool.
pub struct ToyData {
    _dir: TempDir,
    pub labeled: Vec<LabeledPath>,
    pub unlabeled: Vec<PathBuf>,
    pub test: Vec<LabeledPath>,
}

impl ToyData {
    pub fn generate(size: usize, labeled: usize, variants: usize, test: usize, seed: u64) -> Result<Self> {
        let dir = TempDir::new().map_err(|e| MmsError::io(Path::new("tempdir"), e))?;
        let train_dir = dir.path().join("train");
        let cfg = SynthConfig::new(labeled, size, size, seed);
        generate_dataset(&cfg, &train_dir)?;
        let mut unlabeled = Vec::new();
        if variants > 0 {
            let pool = dir.path().join("pool");
            generate_unlabeled_variants(&cfg, variants, &pool)?;
            unlabeled = scan_dataset(&pool)?.unlabeled;
        }
        let mut test_set = Vec::new();
        if test > 0 {
            let test_dir = dir.path().join("test");
            generate_dataset(&SynthConfig::new(test, size, size, seed ^ 0x7e57), &test_dir)?;
            test_set = scan_dataset(&test_dir)?.labeled;
        }
        Ok(Self {
            labeled: scan_dataset(&train_dir)?.labeled,
            unlabeled,
            test: test_set,
            _dir: dir,
        })
    }

    pub fn manifest(&self, fraction: f64, seed: u64) -> Result<SplitManifest> {
        disjoint_split(&self.labeled, fraction, seed)?.with_extra_unlabeled(self.unlabeled.clone())
    }
}

pub fn toy_model(base: usize, head: usize) -> ModelConfig {
    ModelConfig {
        seg: SegNetConfig {
            multi_scale_groups: 2,
            ..SegNetConfig::with_base_channels(base)
        },
        classifier: HeadConfig::classifier(base, head),
        projector: HeadConfig::projector(base, head),
    }
}

/// Configuration of the small-scale training checks.
#[derive(Clone, Debug)]
pub struct ToySetup {
    pub size: usize,
    pub labeled: usize,
    pub variants: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl ToySetup {
    /// 8 labeled and 32 unlabeled 64×64 images, batch 4, 200 epochs.
    pub fn overfit() -> Self {
        Self {
            size: 64,
            labeled: 8,
            variants: 4,
            batch_size: 4,
            epochs: 200,
            learning_rate: 1e-3,
            seed: 5,
            model: toy_model(8, 16),
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            target_width: self.size,
            target_height: self.size,
            ..AugmentConfig::default()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            loss_weights: LossWeights::new(0.25, 0.25, 0.25, 0.25).expect("valid weights"),
            k_neg: NegativeKeys::All,
            seed,
            checkpoint_every: 0,
            ..TrainConfig::default()
        }
    }
}

/// Ensemble DSC of a trained state over `set`.
pub fn mean_dsc(state: &CheckpointState, set: &[LabeledPath]) -> Result<f64> {
    let r = evaluate_set(&state.segmenter(), set, &EvalSettings::default(), None)?;
    if r.has_errors() {
        return Err(MmsError::Validation(format!("{} images failed to evaluate", r.errors().count())));
    }
    Ok(r.mean_dsc)
}

fn finite_trace(history: &[EpochMetrics]) -> bool {
    history
        .iter()
        .all(|m| m.total.is_finite() && m.components().named().iter().all(|(_, c)| c.is_finite()))
}

/// A finished overfit run, reusable by the ablation check.
pub struct OverfitRun {
    pub data: ToyData,
    pub setup: ToySetup,
    pub state: CheckpointState,
    pub dsc: f64,
}

pub fn overfit_run(setup: &ToySetup) -> Result<OverfitRun> {
    let data = ToyData::generate(setup.size, setup.labeled, setup.variants, 0, setup.seed)?;
    let manifest = data.manifest(1.0, setup.seed)?;
    let state = train(&manifest, &setup.train_config(setup.seed), &setup.augment(), &setup.model, None)?;
    let dsc = mean_dsc(&state, &data.labeled)?;
    Ok(OverfitRun {
        data,
        setup: setup.clone(),
        state,
        dsc,
    })
}

/// Training-set ensemble DSC after the overfit run, with a finite loss trace.
pub fn criterion_5(run_result: &Result<OverfitRun>, elapsed: Duration) -> CriterionOutcome {
    let mut outcome = run(5, "overfit sanity", None, || {
        let r = run_result.as_ref().map_err(clone_err)?;
        let finite = finite_trace(&r.state.history);
        let last = r.state.history.last().map(|m| m.total).unwrap_or(f64::NAN);
        Ok((
            r.dsc >= OVERFIT_DSC && finite && r.state.history.len() == r.setup.epochs,
            format!(
                "{} labeled + {} unlabeled {}x{}, {} epochs: training DSC {:.4} (>= {OVERFIT_DSC}), trace finite: {finite}, final total {last:.4}",
                r.data.labeled.len(),
                r.data.unlabeled.len(),
                r.setup.size,
                r.setup.size,
                r.setup.epochs,
                r.dsc
            ),
        ))
    });
    outcome.elapsed = elapsed;
    if elapsed > Duration::from_secs(600) {
        outcome.passed = false;
        outcome.detail.push_str("; over the 600s budget");
    }
    outcome
}

fn clone_err(e: &MmsError) -> MmsError {
    MmsError::Validation(e.to_string())
}

/// Semi-supervised benchmark: one dataset and held-out set, several split/initialization seeds.
#[derive(Clone, Debug)]
pub struct BenchmarkSetup {
    pub toy: ToySetup,
    pub n_images: usize,
    pub test_images: usize,
    pub label_fraction: f64,
    pub seeds: Vec<u64>,
}

impl BenchmarkSetup {
    pub fn acceptance() -> Self {
        Self {
            toy: ToySetup {
                size: 32,
                labeled: 64,
                variants: 0,
                batch_size: 4,
                epochs: 60,
                learning_rate: 1e-3,
                seed: 17,
                model: toy_model(8, 16),
            },
            n_images: 64,
            test_images: 32,
            label_fraction: 0.1,
            seeds: vec![1, 2, 3],
        }
    }
}

/// Mean held-out DSC of the full method against the supervised-only weighting.
pub fn criterion_6(setup: &BenchmarkSetup) -> CriterionOutcome {
    run(6, "semi-supervised benefit", Some(Duration::from_secs(1800)), || {
        let t = &setup.toy;
        let data = ToyData::generate(t.size, setup.n_images, 0, setup.test_images, t.seed)?;
        let acfg = t.augment();
        let (mut mms, mut sup) = (Vec::new(), Vec::new());
        for &seed in &setup.seeds {
            let manifest = data.manifest(setup.label_fraction, seed)?;
            let full = t.train_config(seed);
            let baseline = TrainConfig {
                loss_weights: LossWeights::supervised_only(),
                ..full.clone()
            };
            mms.push(mean_dsc(&train(&manifest, &full, &acfg, &t.model, None)?, &data.test)?);
            sup.push(mean_dsc(&train(&manifest, &baseline, &acfg, &t.model, None)?, &data.test)?);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (m, s) = (mean(&mms), mean(&sup));
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
        Ok((
            m >= s,
            format!(
                "{} images at {}% labels, seeds {:?}: MMS {m:.4} [{}] vs supervised-only {s:.4} [{}]",
                setup.n_images,
                setup.label_fraction * 100.0,
                setup.seeds,
                fmt(&mms),
                fmt(&sup)
            ),
        ))
    })
}

/// The full configuration plus the two ablations on the overfit setup. `full` is the
/// overfit run itself.
pub fn criterion_7(full: &Result<OverfitRun>) -> CriterionOutcome {
    run(7, "ablation logs", None, || {
        let full = full.as_ref().map_err(clone_err)?;
        let manifest = full.data.manifest(1.0, full.setup.seed)?;
        let base = full.setup.train_config(full.setup.seed);
        let variants = [
            ("no-classifiers", TrainConfig {
                use_classifiers: false,
                ..base.clone()
            }),
            ("no-classifiers-no-projectors", TrainConfig {
                use_classifiers: false,
                use_projectors: false,
                ..base.clone()
            }),
        ];
        let mut runs = vec![("full", base.clone(), full.state.history.clone(), full.dsc)];
        for (name, cfg) in variants {
            let state = train(&manifest, &cfg, &full.setup.augment(), &full.setup.model, None)?;
            let d = mean_dsc(&state, &full.data.labeled)?;
            runs.push((name, cfg, state.history, d));
        }
        let mut ok = true;
        let mut parts = Vec::new();
        for (name, cfg, history, d) in &runs {
            let eff = cfg.effective_weights();
            let lambdas = [eff.lambda1, eff.lambda2, eff.lambda3, eff.lambda4];
            let complete = history.len() == cfg.epochs && finite_trace(history);
            let zeros_ok = history.iter().all(|m| {
                m.components()
                    .named()
                    .iter()
                    .zip(lambdas)
                    .all(|((_, c), l)| if l == 0.0 { *c == 0.0 } else { *c != 0.0 })
            });
            ok &= complete && zeros_ok;
            parts.push(format!("{name}: DSC {d:.4}, complete {complete}, disabled terms zero {zeros_ok}"));
        }
        let distinct = runs[0].2 != runs[1].2 && runs[1].2 != runs[2].2 && runs[0].2 != runs[2].2;
        ok &= distinct;
        Ok((ok, format!("{}; logs distinguishable {distinct} (ordering reported only)", parts.join("; "))))
    })
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn probability_bits(seg: &dyn Segmenter, set: &[LabeledPath]) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for item in set {
        let p = seg.probabilities(&Image::load(&item.image)?)?;
        out.extend(bits(&p.net1));
        out.extend(bits(&p.net2));
    }
    Ok(out)
}

fn trace_bits(history: &[EpochMetrics]) -> Vec<u64> {
    history.iter().flat_map(|m| bits(&[m.l_sup, m.l_nce_sup, m.l_sim, m.l_nce, m.total])).collect()
}

/// Seeded runs repeat exactly, checkpoints reproduce predictions bit for bit, and damaged
/// or mismatched checkpoints are refused.
pub fn criterion_9() -> CriterionOutcome {
    run(9, "determinism and persistence", None, || {
        let setup = ToySetup {
            size: 32,
            labeled: 4,
            variants: 2,
            batch_size: 2,
            epochs: 3,
            learning_rate: 1e-3,
            seed: 9,
            model: toy_model(4, 8),
        };
        let data = ToyData::generate(setup.size, setup.labeled, setup.variants, 3, setup.seed)?;
        let manifest = data.manifest(1.0, setup.seed)?;
        let (tcfg, acfg) = (setup.train_config(setup.seed), setup.augment());
        let a = train(&manifest, &tcfg, &acfg, &setup.model, None)?;
        let b = train(&manifest, &tcfg, &acfg, &setup.model, None)?;
        let same_trace = trace_bits(&a.history) == trace_bits(&b.history) && a.params == b.params;

        let dir = TempDir::new().map_err(|e| MmsError::io(Path::new("tempdir"), e))?;
        let path = dir.path().join("run.mms");
        save_checkpoint(&a, &path)?;
        let loaded = load_checkpoint(&path)?;
        let before = probability_bits(&a.segmenter(), &data.test)?;
        let after = probability_bits(&loaded.segmenter(), &data.test)?;
        let roundtrip = before == after && loaded.history == a.history;

        let bytes = std::fs::read(&path).map_err(|e| MmsError::io(&path, e))?;
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        let corrupt = dir.path().join("corrupt.mms");
        std::fs::write(&corrupt, &flipped).map_err(|e| MmsError::io(&corrupt, e))?;
        let truncated = dir.path().join("truncated.mms");
        std::fs::write(&truncated, &bytes[..bytes.len() - 7]).map_err(|e| MmsError::io(&truncated, e))?;
        let flipped_rejected = matches!(load_checkpoint(&corrupt), Err(MmsError::Integrity { .. }));
        let truncated_rejected = load_checkpoint(&truncated).is_err();
        let other = TrainConfig { epochs: 4, ..tcfg.clone() };
        let mismatch_rejected = matches!(
            load_checkpoint_checked(&path, &config_digest(&setup.model, &other, &acfg)?),
            Err(MmsError::Incompatible { .. })
        );
        let rejected = flipped_rejected && truncated_rejected && mismatch_rejected;
        Ok((
            same_trace && roundtrip && rejected,
            format!(
                "identical traces {same_trace}; roundtrip bit-identical over {} values {roundtrip}; rejected flipped {flipped_rejected}, truncated {truncated_rejected}, mismatched config {mismatch_rejected}",
                before.len()
            ),
        ))
    })
}

/// The checks that finish in seconds.
pub fn quick() -> Vec<CriterionOutcome> {
    vec![criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_8(), criterion_9()]
}

/// All nine checks at acceptance scale, in order, handing each outcome to `report` as
/// soon as it is known.
pub fn all(mut report: impl FnMut(&CriterionOutcome)) -> Vec<CriterionOutcome> {
    let mut out = Vec::new();
    let mut push = |o: CriterionOutcome| {
        report(&o);
        out.push(o);
    };
    push(criterion_1());
    push(criterion_2());
    push(criterion_3());
    push(criterion_4());
    let start = Instant::now();
    let overfit = overfit_run(&ToySetup::overfit());
    push(criterion_5(&overfit, start.elapsed()));
    push(criterion_6(&BenchmarkSetup::acceptance()));
    push(criterion_7(&overfit));
    push(criterion_8());
    push(criterion_9());
    out
}
