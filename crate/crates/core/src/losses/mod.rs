//! Objectives of the min-max similarity method and the hard-pixel weight map.
//!
//! Every loss is a pure function on double-precision inputs returning its value and, through
//! the `*_with_grad` variants, its analytic gradient. The training loop feeds network outputs
//! in and seeds the network backward pass with the returned gradients.

mod contrastive;
mod region;
mod types;

use serde::{Deserialize, Serialize};

pub use contrastive::{
    info_nce_all_negative, info_nce_all_negative_with_grad, pixel_info_nce,
    pixel_info_nce_with_grad, UNIT_NORM_TOLERANCE,
};
pub use region::{
    similarity_loss, similarity_loss_with_grad, sup_kernel, sup_loss, sup_loss_with_grad,
    weight_map, weighted_bce, weighted_bce_with_grad, weighted_iou, weighted_iou_with_grad,
    PROB_EPS, SUP_WEIGHT_KERNEL,
};
pub use types::{
    FeatureMapBatch, FeatureVectorBatch, LossWeights, MaskBatch, MaskKind, MaskLoss,
    NegativeKeys, PairLoss, Temperature, WeightMap,
};

use crate::error::{MmsError, Result};

/// The four loss terms of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_sup: f64,
    pub l_nce_sup: f64,
    pub l_sim: f64,
    pub l_nce: f64,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("l_sup", self.l_sup),
            ("l_nce_sup", self.l_nce_sup),
            ("l_sim", self.l_sim),
            ("l_nce", self.l_nce),
        ]
    }
}

/// `λ1·l_sup + λ2·l_nce_sup + λ3·l_sim + λ4·l_nce`; a non-finite component is reported by name.
pub fn total_loss(c: &LossComponents, lw: &LossWeights) -> Result<f64> {
    for (component, value) in c.named() {
        if !value.is_finite() {
            return Err(MmsError::NonFiniteLoss {
                component: component.to_string(),
                value,
            });
        }
    }
    lw.validate()?;
    Ok(lw.lambda1 * c.l_sup + lw.lambda2 * c.l_nce_sup + lw.lambda3 * c.l_sim + lw.lambda4 * c.l_nce)
}

#[cfg(test)]
mod tests;
