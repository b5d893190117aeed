//! The joint optimization loop over both segmentation networks and their heads, the
//! single-network supervised baseline, and checkpoint persistence.

mod checkpoint;
mod config;

pub use checkpoint::{
    config_digest, load_checkpoint, load_checkpoint_checked, save_checkpoint, CheckpointState,
    ConfigDigest, EpochMetrics, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{OptimizerKind, TrainConfig};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{AugmentConfig, BatchStream, LabeledBatch, LabeledStream, SplitManifest, StepBatch};
use crate::error::{MmsError, Result};
use crate::losses::{
    info_nce_all_negative_with_grad, pixel_info_nce_with_grad, similarity_loss_with_grad,
    sup_loss_with_grad, total_loss, FeatureMapBatch, FeatureVectorBatch, LossComponents,
    LossWeights, MaskBatch, MaskKind,
};
use crate::models::{Branch, Mode, ModelConfig, ModelParams};
use crate::nn::{Adam, Graph, NodeId, Tensor};
use crate::seeds::derive_seed;

pub const CHECKPOINT_FILE: &str = "checkpoint.mms";
pub const METRICS_FILE: &str = "metrics.jsonl";

const EPOCH_KEY: u64 = 0x4550_4f43;
const NCE_KEY: u64 = 0x4e43_4500;

/// Seed of the data stream for one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(&[seed, EPOCH_KEY, epoch as u64])
}

/// Seed of the negative sampler for one step.
pub fn nce_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    derive_seed(&[seed, NCE_KEY, epoch as u64, step as u64])
}

/// Loss values of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub components: LossComponents,
    pub total: f64,
}

/// Gradient seeds collected while the loss terms are evaluated.
struct Seeds(Vec<(NodeId, Tensor)>);

impl Seeds {
    fn push(&mut self, g: &Graph, node: NodeId, grad: &[f64], scale: f64) -> Result<()> {
        let data = grad.iter().map(|v| (v * scale) as f32).collect();
        self.0.push((node, Tensor::from_vec(g.value(node).shape(), data)?));
        Ok(())
    }

    fn refs(&self) -> Vec<(NodeId, &Tensor)> {
        self.0.iter().map(|(n, t)| (*n, t)).collect()
    }
}

fn non_finite(component: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        return Ok(());
    }
    let value = t.data().iter().copied().find(|v| !v.is_finite()).unwrap_or(f32::NAN);
    Err(MmsError::NonFiniteLoss {
        component: component.to_string(),
        value: value as f64,
    })
}

fn mask_of(g: &Graph, node: NodeId, component: &str) -> Result<MaskBatch> {
    non_finite(component, g.value(node))?;
    MaskBatch::from_tensor(g.value(node), MaskKind::Prediction)
}

fn vectors_of(g: &Graph, node: NodeId, component: &str) -> Result<FeatureVectorBatch> {
    non_finite(component, g.value(node))?;
    FeatureVectorBatch::from_tensor(g.value(node))
}

fn maps_of(g: &Graph, node: NodeId, component: &str) -> Result<FeatureMapBatch> {
    non_finite(component, g.value(node))?;
    FeatureMapBatch::from_tensor(g.value(node))
}

fn check_components(c: &LossComponents) -> Result<()> {
    for (component, value) in c.named() {
        if !value.is_finite() {
            return Err(MmsError::NonFiniteLoss {
                component: component.to_string(),
                value,
            });
        }
    }
    Ok(())
}

/// One joint step over a batch. Terms whose weight is zero are neither evaluated nor logged.
pub fn train_step(
    params: &mut ModelParams,
    optimizer: &mut Adam,
    batch: &StepBatch,
    tcfg: &TrainConfig,
    nce_seed: u64,
) -> Result<StepLoss> {
    let lw = tcfg.effective_weights();
    let mut g = Graph::new(true);
    let mut seeds = Seeds(Vec::new());
    let mut c = LossComponents::default();

    let x1 = g.input(batch.x1.images.clone());
    let x2 = g.input(batch.x2.images.clone());
    let p1 = params.build_seg(&mut g, Branch::One, x1, Mode::Train)?;
    let p2 = params.build_seg(&mut g, Branch::Two, x2, Mode::Train)?;
    let m1 = mask_of(&g, p1, "l_sup")?;
    let m2 = mask_of(&g, p2, "l_sup")?;
    let s1 = sup_loss_with_grad(&m1, &batch.x1.masks)?;
    let s2 = sup_loss_with_grad(&m2, &batch.x2.masks)?;
    c.l_sup = s1.value + s2.value;
    seeds.push(&g, p1, &s1.grad, lw.lambda1)?;
    seeds.push(&g, p2, &s2.grad, lw.lambda1)?;

    if lw.lambda2 > 0.0 {
        let c1 = params.build_classifier(&mut g, Branch::One, p1)?;
        let c2 = params.build_classifier(&mut g, Branch::Two, p2)?;
        let v1 = vectors_of(&g, c1, "l_nce_sup")?;
        let v2 = vectors_of(&g, c2, "l_nce_sup")?;
        let a = info_nce_all_negative_with_grad(&v1, &v2, tcfg.tau)?;
        let b = info_nce_all_negative_with_grad(&v2, &v1, tcfg.tau)?;
        c.l_nce_sup = 0.5 * (a.value + b.value);
        let g1: Vec<f64> = a.grad_a.iter().zip(&b.grad_b).map(|(x, y)| x + y).collect();
        let g2: Vec<f64> = a.grad_b.iter().zip(&b.grad_a).map(|(x, y)| x + y).collect();
        seeds.push(&g, c1, &g1, 0.5 * lw.lambda2)?;
        seeds.push(&g, c2, &g2, 0.5 * lw.lambda2)?;
    }

    if let Some(u) = batch.unlabeled.as_ref().filter(|_| lw.lambda3 > 0.0 || lw.lambda4 > 0.0) {
        let u1 = g.input(u.clone());
        let u2 = match &batch.unlabeled_second {
            Some(second) => g.input(second.clone()),
            None => u1,
        };
        let q1 = params.build_seg(&mut g, Branch::One, u1, Mode::Train)?;
        let q2 = params.build_seg(&mut g, Branch::Two, u2, Mode::Train)?;
        if lw.lambda3 > 0.0 {
            let n1 = mask_of(&g, q1, "l_sim")?;
            let n2 = mask_of(&g, q2, "l_sim")?;
            let sim = similarity_loss_with_grad(&n1, &n2)?;
            c.l_sim = sim.value;
            seeds.push(&g, q1, &sim.grad_a, lw.lambda3)?;
            seeds.push(&g, q2, &sim.grad_b, lw.lambda3)?;
        }
        if lw.lambda4 > 0.0 {
            let f1 = params.build_projector(&mut g, Branch::One, q1)?;
            let f2 = params.build_projector(&mut g, Branch::Two, q2)?;
            let e1 = maps_of(&g, f1, "l_nce")?;
            let e2 = maps_of(&g, f2, "l_nce")?;
            let nce = pixel_info_nce_with_grad(&e1, &e2, tcfg.tau, tcfg.k_neg, nce_seed)?;
            c.l_nce = nce.value;
            seeds.push(&g, f1, &nce.grad_a, lw.lambda4)?;
            seeds.push(&g, f2, &nce.grad_b, lw.lambda4)?;
        }
    }

    check_components(&c)?;
    let total = total_loss(&c, &lw)?;
    let grads = g.backward(&seeds.refs())?;
    optimizer.step(&mut params.store, &grads)?;
    params.commit_bn(g.take_bn_observations())?;
    Ok(StepLoss { components: c, total })
}

/// Supervised step of network 1 alone.
pub fn supervised_step(params: &mut ModelParams, optimizer: &mut Adam, batch: &LabeledBatch) -> Result<StepLoss> {
    let mut g = Graph::new(true);
    let x = g.input(batch.images.clone());
    let p = params.build_seg(&mut g, Branch::One, x, Mode::Train)?;
    let m = mask_of(&g, p, "l_sup")?;
    let s = sup_loss_with_grad(&m, &batch.masks)?;
    let c = LossComponents {
        l_sup: s.value,
        ..LossComponents::default()
    };
    check_components(&c)?;
    let mut seeds = Seeds(Vec::new());
    seeds.push(&g, p, &s.grad, 1.0)?;
    let grads = g.backward(&seeds.refs())?;
    optimizer.step(&mut params.store, &grads)?;
    params.commit_bn(g.take_bn_observations())?;
    Ok(StepLoss { components: c, total: s.value })
}

/// Running per-epoch means.
#[derive(Default)]
struct EpochAccumulator {
    sum: LossComponents,
    total: f64,
    steps: usize,
}

impl EpochAccumulator {
    fn add(&mut self, s: &StepLoss) {
        self.sum.l_sup += s.components.l_sup;
        self.sum.l_nce_sup += s.components.l_nce_sup;
        self.sum.l_sim += s.components.l_sim;
        self.sum.l_nce += s.components.l_nce;
        self.total += s.total;
        self.steps += 1;
    }

    fn finish(self, epoch: usize) -> EpochMetrics {
        let n = self.steps.max(1) as f64;
        EpochMetrics {
            epoch,
            l_sup: self.sum.l_sup / n,
            l_nce_sup: self.sum.l_nce_sup / n,
            l_sim: self.sum.l_sim / n,
            l_nce: self.sum.l_nce / n,
            total: self.total / n,
        }
    }
}

/// Where a run writes its artifacts.
struct RunOutput {
    checkpoint: PathBuf,
    metrics: PathBuf,
}

impl RunOutput {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| MmsError::io(dir, e))?;
        let metrics = dir.join(METRICS_FILE);
        // a fresh run starts a fresh log
        fs::write(&metrics, b"").map_err(|e| MmsError::io(&metrics, e))?;
        Ok(Self {
            checkpoint: dir.join(CHECKPOINT_FILE),
            metrics,
        })
    }

    fn log(&self, m: &EpochMetrics) -> Result<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.metrics)
            .map_err(|e| MmsError::io(&self.metrics, e))?;
        let line = serde_json::to_string(m)?;
        writeln!(f, "{line}").map_err(|e| MmsError::io(&self.metrics, e))
    }
}

fn abort(e: MmsError, epoch: usize, step: usize) -> MmsError {
    match e {
        MmsError::NonFiniteLoss { component, value } => MmsError::TrainingAbort {
            component,
            epoch,
            step,
            value,
        },
        e => e,
    }
}

fn initial_state(
    model: &ModelConfig,
    tcfg: &TrainConfig,
    acfg: &AugmentConfig,
) -> Result<CheckpointState> {
    tcfg.validate()?;
    acfg.validate()?;
    Ok(CheckpointState {
        params: ModelParams::new(model, tcfg.seed)?,
        optimizer: Adam::new(tcfg.learning_rate as f32),
        epoch: 0,
        train_config: tcfg.clone(),
        augment_config: acfg.clone(),
        config_hash: config_digest(model, tcfg, acfg)?,
        history: Vec::new(),
    })
}

/// Drives `epochs` epochs of `run_epoch`, logging and checkpointing as configured.
fn run_loop<F>(mut state: CheckpointState, out_dir: Option<&Path>, finalize: fn(&mut CheckpointState) -> Result<()>, mut run_epoch: F) -> Result<CheckpointState>
where
    F: FnMut(&mut CheckpointState, usize) -> Result<EpochMetrics>,
{
    let out = out_dir.map(RunOutput::new).transpose()?;
    let tcfg = state.train_config.clone();
    let save = |state: &mut CheckpointState| -> Result<()> {
        finalize(state)?;
        if let Some(out) = &out {
            save_checkpoint(state, &out.checkpoint)?;
        }
        Ok(())
    };
    if tcfg.epochs == 0 {
        save(&mut state)?;
        return Ok(state);
    }
    for epoch in state.epoch..tcfg.epochs {
        let metrics = run_epoch(&mut state, epoch)?;
        log::info!(
            "epoch {}: l_sup {:.4} l_nce_sup {:.4} l_sim {:.4} l_nce {:.4} total {:.4}",
            epoch + 1,
            metrics.l_sup,
            metrics.l_nce_sup,
            metrics.l_sim,
            metrics.l_nce,
            metrics.total
        );
        if let Some(out) = &out {
            out.log(&metrics)?;
        }
        state.history.push(metrics);
        state.epoch = epoch + 1;
        let last = state.epoch == tcfg.epochs;
        if last || (tcfg.checkpoint_every > 0 && state.epoch.is_multiple_of(tcfg.checkpoint_every)) {
            save(&mut state)?;
        }
    }
    Ok(state)
}

/// Trains both networks and their heads on `manifest`. With `out_dir` set, per-epoch metrics
/// are appended to `metrics.jsonl` and checkpoints are written to `checkpoint.mms`.
///
/// A non-finite loss aborts with [`MmsError::TrainingAbort`]; the checkpoint on disk is then
/// the last one written before the failure.
pub fn train(
    manifest: &SplitManifest,
    tcfg: &TrainConfig,
    acfg: &AugmentConfig,
    model: &ModelConfig,
    out_dir: Option<&Path>,
) -> Result<CheckpointState> {
    manifest.validate()?;
    let state = initial_state(model, tcfg, acfg)?;
    run_loop(state, out_dir, |_| Ok(()), |state, epoch| {
        let stream = BatchStream::new(manifest, acfg, tcfg.batch_size, epoch_seed(tcfg.seed, epoch))?;
        let mut acc = EpochAccumulator::default();
        for batch in stream {
            let batch = batch?;
            let step = batch.step;
            let loss = train_step(
                &mut state.params,
                &mut state.optimizer,
                &batch,
                tcfg,
                nce_seed(tcfg.seed, epoch, step),
            )
            .map_err(|e| abort(e, epoch + 1, step))?;
            acc.add(&loss);
        }
        Ok(acc.finish(epoch + 1))
    })
}

/// Training configuration recorded for a baseline run: only the supervised term is active.
pub fn baseline_config(tcfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        loss_weights: LossWeights::supervised_only(),
        use_classifiers: false,
        use_projectors: false,
        ..tcfg.clone()
    }
}

/// Fully supervised reference: network 1 trained on every labeled image of the manifest with
/// the supervised loss alone. Network 2 is a copy of network 1 so the checkpoint works with
/// every inference mode.
pub fn train_supervised_baseline(
    manifest: &SplitManifest,
    tcfg: &TrainConfig,
    acfg: &AugmentConfig,
    model: &ModelConfig,
    out_dir: Option<&Path>,
) -> Result<CheckpointState> {
    manifest.validate()?;
    let tcfg = baseline_config(tcfg);
    let labeled: Vec<_> = manifest
        .labeled_x1
        .iter()
        .chain(&manifest.labeled_x2)
        .cloned()
        .collect();
    let mut state = initial_state(model, &tcfg, acfg)?;
    state.params.copy_seg(Branch::One, Branch::Two)?;
    run_loop(
        state,
        out_dir,
        |s| s.params.copy_seg(Branch::One, Branch::Two),
        |state, epoch| {
            let stream = LabeledStream::new(&labeled, acfg, tcfg.batch_size, epoch_seed(tcfg.seed, epoch))?;
            let mut acc = EpochAccumulator::default();
            for (step, batch) in stream.enumerate() {
                let loss = supervised_step(&mut state.params, &mut state.optimizer, &batch?)
                    .map_err(|e| abort(e, epoch + 1, step))?;
                acc.add(&loss);
            }
            Ok(acc.finish(epoch + 1))
        },
    )
}

#[cfg(test)]
mod tests;
