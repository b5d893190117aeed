//! Checkpoint files: the named-tensor container under magic `MMSCKPT\0` with the run's
//! configuration digest in the header. Tensors are stored as `param/<name>`,
//! `buffer/<name>`, `adam_m/<name>` and `adam_v/<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::container::{self, DIGEST_LEN};
use crate::data::AugmentConfig;
use crate::error::{MmsError, Result};
use crate::losses::LossComponents;
use crate::models::{ModelConfig, ModelParams};
use crate::nn::{Adam, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMSCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type ConfigDigest = [u8; DIGEST_LEN];

/// Per-epoch means of the loss components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_sup: f64,
    pub l_nce_sup: f64,
    pub l_sim: f64,
    pub l_nce: f64,
    pub total: f64,
}

impl EpochMetrics {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            l_sup: self.l_sup,
            l_nce_sup: self.l_nce_sup,
            l_sim: self.l_sim,
            l_nce: self.l_nce,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointState {
    pub params: ModelParams,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub train_config: TrainConfig,
    pub augment_config: AugmentConfig,
    pub config_hash: ConfigDigest,
    pub history: Vec<EpochMetrics>,
}

/// Digest of everything that shapes a run.
pub fn config_digest(model: &ModelConfig, train: &TrainConfig, augment: &AugmentConfig) -> Result<ConfigDigest> {
    let canonical = serde_json::to_vec(&serde_json::json!({
        "model": model,
        "train": train,
        "augment": augment,
    }))?;
    Ok(container::sha256(&canonical))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    epoch: usize,
    model: ModelConfig,
    train: TrainConfig,
    augment: AugmentConfig,
    history: Vec<EpochMetrics>,
    adam: AdamMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    learning_rate: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u64,
}

pub fn save_checkpoint(state: &CheckpointState, path: &Path) -> Result<()> {
    let meta = Meta {
        epoch: state.epoch,
        model: state.params.config(),
        train: state.train_config.clone(),
        augment: state.augment_config.clone(),
        history: state.history.clone(),
        adam: AdamMeta {
            learning_rate: state.optimizer.learning_rate,
            beta1: state.optimizer.beta1,
            beta2: state.optimizer.beta2,
            eps: state.optimizer.eps,
            step: state.optimizer.step_count(),
        },
    };
    let store = &state.params.store;
    let mut names: Vec<String> = Vec::new();
    let mut tensors: Vec<&Tensor> = Vec::new();
    for (n, t) in store.params() {
        names.push(format!("param/{n}"));
        tensors.push(t);
    }
    for (n, t) in store.buffers() {
        names.push(format!("buffer/{n}"));
        tensors.push(t);
    }
    for (n, (m, v)) in state.optimizer.moments() {
        names.push(format!("adam_m/{n}"));
        tensors.push(m);
        names.push(format!("adam_v/{n}"));
        tensors.push(v);
    }
    let refs: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(tensors).collect();
    let bytes = container::encode(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        &state.config_hash,
        serde_json::to_value(&meta)?,
        &refs,
    )?;
    container::write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointState> {
    decode(path, None)
}

/// Loads a checkpoint only if it was produced under `expected`.
pub fn load_checkpoint_checked(path: &Path, expected: &ConfigDigest) -> Result<CheckpointState> {
    decode(path, Some(expected))
}

fn decode(path: &Path, expected: Option<&ConfigDigest>) -> Result<CheckpointState> {
    let bytes = fs::read(path).map_err(|e| MmsError::io(path, e))?;
    let c = container::decode(&bytes, CHECKPOINT_MAGIC, path)?;
    if c.version != CHECKPOINT_VERSION {
        return Err(MmsError::Load {
            what: format!("checkpoint {}", path.display()),
            reason: format!("unsupported version {} (expected {CHECKPOINT_VERSION})", c.version),
        });
    }
    if let Some(expected) = expected {
        if &c.digest != expected {
            return Err(MmsError::Incompatible {
                path: path.to_path_buf(),
                expected: hex::encode(expected),
                found: hex::encode(c.digest),
            });
        }
    }
    let meta: Meta = serde_json::from_value(c.meta).map_err(|e| MmsError::Load {
        what: format!("checkpoint {}", path.display()),
        reason: format!("bad header: {e}"),
    })?;

    let mut store = ParamStore::new();
    let mut m: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut v: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in c.tensors {
        let (kind, rest) = name.split_once('/').ok_or_else(|| MmsError::Load {
            what: format!("checkpoint {}", path.display()),
            reason: format!("unrecognized tensor `{name}`"),
        })?;
        match kind {
            "param" => store.insert_param(rest, t),
            "buffer" => store.insert_buffer(rest, t),
            "adam_m" => {
                m.insert(rest.to_string(), t);
            }
            "adam_v" => {
                v.insert(rest.to_string(), t);
            }
            _ => {
                return Err(MmsError::Load {
                    what: format!("checkpoint {}", path.display()),
                    reason: format!("unrecognized tensor `{name}`"),
                })
            }
        }
    }

    // the stored tensors must match the stored model configuration exactly
    let template = ModelParams::new(
        &ModelConfig {
            seg: crate::models::SegNetConfig {
                pretrained_weights_path: None,
                ..meta.model.seg.clone()
            },
            ..meta.model.clone()
        },
        0,
    )?;
    let mismatch = |reason: String| MmsError::Load {
        what: format!("checkpoint {}", path.display()),
        reason,
    };
    for (name, t) in template.store.params() {
        match store.param(name) {
            Ok(s) if s.shape() == t.shape() => {}
            Ok(s) => return Err(mismatch(format!("parameter `{name}` has shape {:?}, expected {:?}", s.shape(), t.shape()))),
            Err(_) => return Err(mismatch(format!("parameter `{name}` is missing"))),
        }
    }
    for (name, t) in template.store.buffers() {
        match store.buffer(name) {
            Ok(s) if s.shape() == t.shape() => {}
            _ => return Err(mismatch(format!("buffer `{name}` is missing or misshapen"))),
        }
    }
    if store.param_count() != template.store.param_count() {
        return Err(mismatch("unexpected extra parameters".into()));
    }

    let mut moments = BTreeMap::new();
    for (name, mt) in m {
        let vt = v
            .remove(&name)
            .ok_or_else(|| mismatch(format!("optimizer moment `{name}` is incomplete")))?;
        moments.insert(name, (mt, vt));
    }
    if let Some(name) = v.keys().next() {
        return Err(mismatch(format!("optimizer moment `{name}` is incomplete")));
    }
    let mut optimizer = Adam::new(meta.adam.learning_rate);
    optimizer.beta1 = meta.adam.beta1;
    optimizer.beta2 = meta.adam.beta2;
    optimizer.eps = meta.adam.eps;
    optimizer.set_state(meta.adam.step, moments);

    Ok(CheckpointState {
        params: ModelParams {
            seg: meta.model.seg,
            classifier: meta.model.classifier,
            projector: meta.model.projector,
            store,
        },
        optimizer,
        epoch: meta.epoch,
        train_config: meta.train,
        augment_config: meta.augment,
        config_hash: c.digest,
        history: meta.history,
    })
}
