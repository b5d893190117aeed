//! Pretrained encoder weight files: a named-tensor container keyed by encoder parameter
//! names without the branch root (e.g. `encoder.stage1.reduce.conv.weight`).

use std::fs;
use std::path::Path;

use super::{Branch, ModelParams};
use crate::container::{self, DIGEST_LEN};
use crate::error::{MmsError, Result};
use crate::nn::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"MMSWGHT\0";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn save_encoder_weights(params: &ModelParams, branch: Branch, path: &Path) -> Result<()> {
    let tensors = params.encoder_tensors(branch);
    let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let meta = serde_json::json!({
        "encoder_base_channels": params.seg.encoder_base_channels,
        "multi_scale_groups": params.seg.multi_scale_groups,
    });
    let bytes = container::encode(WEIGHTS_MAGIC, WEIGHTS_VERSION, &[0u8; DIGEST_LEN], meta, &refs)?;
    container::write_atomic(path, &bytes)
}

pub fn load_encoder_weights(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| MmsError::io(path, e))?;
    let c = container::decode(&bytes, WEIGHTS_MAGIC, path)?;
    if c.version != WEIGHTS_VERSION {
        return Err(MmsError::Load {
            what: format!("pretrained weights {}", path.display()),
            reason: format!("unsupported version {} (expected {WEIGHTS_VERSION})", c.version),
        });
    }
    Ok(c.tensors)
}
