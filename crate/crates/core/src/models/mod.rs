//! Segmentation networks, classifiers and projectors over a shared parameter store.
//!
//! Parameter names are dotted paths under one of six roots: `f1`, `f2` (segmentation
//! networks), `c1`, `c2` (classifiers) and `p1`, `p2` (projectors). Below the root an
//! encoder parameter looks like `encoder.stage2.split1.conv.weight`; this suffix is also the
//! key used in pretrained-weight files.

mod arch;
mod config;
mod weights;

#[cfg(test)]
mod tests;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use config::{HeadConfig, ModelConfig, SegNetConfig, STAGES};
pub use weights::{load_encoder_weights, save_encoder_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use crate::error::{MmsError, Result};
use crate::losses::{FeatureMapBatch, FeatureVectorBatch, MaskBatch, MaskKind};
use crate::nn::{BnObservation, Graph, NodeId, ParamStore, Tensor};

/// Momentum of the running-statistics update: `r ← (1 − m)·r + m·batch`.
pub const BN_MOMENTUM: f32 = 0.1;

/// Which of the two parallel branches a network belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    One,
    Two,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::One, Branch::Two];

    pub fn seg(self) -> &'static str {
        match self {
            Branch::One => "f1",
            Branch::Two => "f2",
        }
    }

    pub fn classifier(self) -> &'static str {
        match self {
            Branch::One => "c1",
            Branch::Two => "c2",
        }
    }

    pub fn projector(self) -> &'static str {
        match self {
            Branch::One => "p1",
            Branch::Two => "p2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated afterwards.
    Train,
    /// Running statistics; deterministic.
    Eval,
}

/// Parameters of all six networks plus the configs that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub seg: SegNetConfig,
    pub classifier: HeadConfig,
    pub projector: HeadConfig,
    pub store: ParamStore,
}

/// Derives an independent RNG for one named parameter.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

pub(crate) enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize },
    /// Normal with std `sqrt(1 / fan_in)`.
    Lecun { fan_in: usize },
    Zeros,
    Ones,
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub fn init_params(
    seg_cfg: &SegNetConfig,
    head_cfg_c: &HeadConfig,
    head_cfg_p: &HeadConfig,
    seed: u64,
) -> Result<ModelParams> {
    seg_cfg.validate()?;
    head_cfg_c.validate("classifier", HeadConfig::CLASSIFIER_POOLS)?;
    head_cfg_p.validate("projector", HeadConfig::PROJECTOR_POOLS)?;

    let mut specs = Vec::new();
    let mut buffers = Vec::new();
    for branch in Branch::BOTH {
        arch::seg_specs(seg_cfg, branch.seg(), &mut specs, &mut buffers);
        arch::classifier_specs(head_cfg_c, branch.classifier(), &mut specs);
        arch::projector_specs(head_cfg_p, branch.projector(), &mut specs);
    }

    let mut store = ParamStore::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Kaiming { fan_in } | Init::Lecun { fan_in } => {
                let gain = if matches!(spec.init, Init::Kaiming { .. }) { 2.0 } else { 1.0 };
                let std = (gain / fan_in as f32).sqrt();
                let dist = Normal::new(0.0f32, std)
                    .map_err(|e| MmsError::Parameter(format!("bad init for {}: {e}", spec.name)))?;
                let mut rng = param_rng(seed, &spec.name);
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        store.insert_param(spec.name, Tensor::from_vec(&spec.shape, data)?);
    }
    for (name, channels, fill) in buffers {
        store.insert_buffer(name, Tensor::full(&[channels], fill));
    }

    let mut params = ModelParams {
        seg: seg_cfg.clone(),
        classifier: *head_cfg_c,
        projector: *head_cfg_p,
        store,
    };
    if let Some(path) = &seg_cfg.pretrained_weights_path {
        let weights = load_encoder_weights(path)?;
        params.install_encoder(&weights)?;
    }
    Ok(params)
}

fn check_divisible(h: usize, w: usize, by: usize, what: &str) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(by) || !w.is_multiple_of(by) {
        return Err(MmsError::Shape(format!(
            "{what} needs height and width divisible by {by}, got {h}x{w}"
        )));
    }
    Ok(())
}

impl ModelParams {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        init_params(&cfg.seg, &cfg.classifier, &cfg.projector, seed)
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            seg: self.seg.clone(),
            classifier: self.classifier,
            projector: self.projector,
        }
    }

    /// Builds a segmentation network on `g`; returns the `B×1×H×W` probability node.
    pub fn build_seg(&self, g: &mut Graph, branch: Branch, images: NodeId, mode: Mode) -> Result<NodeId> {
        let (_, c, h, w) = g.value(images).dims4()?;
        if c != 3 {
            return Err(MmsError::Shape(format!("images must have 3 channels, got {c}")));
        }
        check_divisible(h, w, self.seg.downsampling(), "segmentation network")?;
        arch::seg_graph(g, &self.store, &self.seg, branch.seg(), images, mode)
    }

    /// Builds a classifier on `g` over a `B×1×H×W` prediction; returns unit rows `B×out_dim`.
    pub fn build_classifier(&self, g: &mut Graph, branch: Branch, pred: NodeId) -> Result<NodeId> {
        let (_, c, h, w) = g.value(pred).dims4()?;
        if c != 1 {
            return Err(MmsError::Shape(format!("classifier expects 1 channel, got {c}")));
        }
        check_divisible(h, w, 1 << self.classifier.pool_count, "classifier")?;
        arch::classifier_graph(g, &self.store, &self.classifier, branch.classifier(), pred)
    }

    /// Builds a projector on `g`; returns fiber-normalized `B×D×H/4×W/4` features.
    pub fn build_projector(&self, g: &mut Graph, branch: Branch, pred: NodeId) -> Result<NodeId> {
        let (_, c, h, w) = g.value(pred).dims4()?;
        if c != 1 {
            return Err(MmsError::Shape(format!("projector expects 1 channel, got {c}")));
        }
        check_divisible(h, w, 1 << self.projector.pool_count, "projector")?;
        arch::projector_graph(g, &self.store, &self.projector, branch.projector(), pred)
    }

    /// Inference with running statistics. Read-only, so safe to call concurrently.
    pub fn predict(&self, branch: Branch, images: &Tensor) -> Result<MaskBatch> {
        let mut g = Graph::new(false);
        let x = g.input(images.clone());
        let out = self.build_seg(&mut g, branch, x, Mode::Eval)?;
        MaskBatch::from_tensor(g.value(out), MaskKind::Prediction)
    }

    /// Forward pass in either mode; in train mode the running statistics are updated.
    pub fn seg_forward(&mut self, branch: Branch, images: &Tensor, mode: Mode) -> Result<MaskBatch> {
        if mode == Mode::Eval {
            return self.predict(branch, images);
        }
        let mut g = Graph::new(false);
        let x = g.input(images.clone());
        let out = self.build_seg(&mut g, branch, x, mode)?;
        let pred = MaskBatch::from_tensor(g.value(out), MaskKind::Prediction)?;
        self.commit_bn(g.take_bn_observations())?;
        Ok(pred)
    }

    pub fn classifier_forward(&self, branch: Branch, pred: &MaskBatch) -> Result<FeatureVectorBatch> {
        let mut g = Graph::new(false);
        let x = g.input(pred.to_tensor());
        let out = self.build_classifier(&mut g, branch, x)?;
        FeatureVectorBatch::from_tensor(g.value(out))
    }

    pub fn projector_forward(&self, branch: Branch, pred: &MaskBatch) -> Result<FeatureMapBatch> {
        let mut g = Graph::new(false);
        let x = g.input(pred.to_tensor());
        let out = self.build_projector(&mut g, branch, x)?;
        FeatureMapBatch::from_tensor(g.value(out))
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn commit_bn(&mut self, observations: Vec<BnObservation>) -> Result<()> {
        for obs in observations {
            for (suffix, stat) in [("running_mean", &obs.mean), ("running_var", &obs.var_unbiased)] {
                let buf = self.store.buffer_mut(&format!("{}.{suffix}", obs.prefix))?;
                if buf.numel() != stat.len() {
                    return Err(MmsError::Shape(format!(
                        "running statistic {}.{suffix} has {} channels, observation has {}",
                        obs.prefix,
                        buf.numel(),
                        stat.len()
                    )));
                }
                for (r, s) in buf.data_mut().iter_mut().zip(stat) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
                }
            }
        }
        Ok(())
    }

    /// Copies every parameter and buffer of one branch's segmentation network to the other.
    pub fn copy_seg(&mut self, from: Branch, to: Branch) -> Result<()> {
        let (src, dst) = (format!("{}.", from.seg()), format!("{}.", to.seg()));
        let params: Vec<(String, Tensor)> = self
            .store
            .params()
            .filter(|(n, _)| n.starts_with(&src))
            .map(|(n, t)| (format!("{dst}{}", &n[src.len()..]), t.clone()))
            .collect();
        let buffers: Vec<(String, Tensor)> = self
            .store
            .buffers()
            .filter(|(n, _)| n.starts_with(&src))
            .map(|(n, t)| (format!("{dst}{}", &n[src.len()..]), t.clone()))
            .collect();
        for (n, t) in params {
            *self.store.param_mut(&n)? = t;
        }
        for (n, t) in buffers {
            *self.store.buffer_mut(&n)? = t;
        }
        Ok(())
    }

    /// Encoder parameters of one branch keyed without the branch root.
    pub fn encoder_tensors(&self, branch: Branch) -> Vec<(String, Tensor)> {
        let prefix = format!("{}.", branch.seg());
        self.store
            .params()
            .chain(self.store.buffers())
            .filter_map(|(n, t)| {
                let key = n.strip_prefix(&prefix)?;
                key.starts_with("encoder.").then(|| (key.to_string(), t.clone()))
            })
            .collect()
    }

    /// Writes pretrained encoder tensors into both segmentation networks. Every encoder
    /// tensor must be present with a matching shape and nothing else may be supplied.
    pub fn install_encoder(&mut self, weights: &[(String, Tensor)]) -> Result<()> {
        let expected = self.encoder_tensors(Branch::One);
        let mismatch = |name: &str, reason: String| MmsError::Load {
            what: "pretrained encoder weights".into(),
            reason: format!("parameter `{name}`: {reason}"),
        };
        for (name, t) in weights {
            let Some((_, want)) = expected.iter().find(|(n, _)| n == name) else {
                return Err(mismatch(name, "not an encoder parameter of this configuration".into()));
            };
            if want.shape() != t.shape() {
                return Err(mismatch(
                    name,
                    format!("shape {:?} in file, {:?} expected", t.shape(), want.shape()),
                ));
            }
            if !t.is_finite() {
                return Err(mismatch(name, "contains non-finite values".into()));
            }
        }
        if let Some((name, _)) = expected.iter().find(|(n, _)| !weights.iter().any(|(w, _)| w == n)) {
            return Err(mismatch(name, "missing from file".into()));
        }
        for branch in Branch::BOTH {
            for (name, t) in weights {
                let full = format!("{}.{name}", branch.seg());
                if name.ends_with(".running_mean") || name.ends_with(".running_var") {
                    *self.store.buffer_mut(&full)? = t.clone();
                } else {
                    *self.store.param_mut(&full)? = t.clone();
                }
            }
        }
        Ok(())
    }

    /// Trainable scalar count per network root, in a fixed order.
    pub fn param_report(&self) -> Vec<(&'static str, usize)> {
        ["f1", "f2", "c1", "c2", "p1", "p2"]
            .into_iter()
            .map(|root| (root, self.store.param_count_with_prefix(&format!("{root}."))))
            .collect()
    }
}
