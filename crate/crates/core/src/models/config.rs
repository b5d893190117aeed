use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{MmsError, Result};

/// Number of encoder (and decoder) stages; each encoder stage halves the resolution.
pub const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetConfig {
    pub encoder_stages: usize,
    pub encoder_base_channels: usize,
    pub multi_scale_groups: usize,
    pub decoder_stages: usize,
    pub pretrained_weights_path: Option<PathBuf>,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            encoder_stages: STAGES,
            encoder_base_channels: 32,
            multi_scale_groups: 4,
            decoder_stages: STAGES,
            pretrained_weights_path: None,
        }
    }
}

impl SegNetConfig {
    pub fn with_base_channels(base: usize) -> Self {
        Self {
            encoder_base_channels: base,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_stages != STAGES || self.decoder_stages != STAGES {
            return Err(MmsError::Config(format!(
                "encoder_stages and decoder_stages must both be {STAGES}, got {} and {}",
                self.encoder_stages, self.decoder_stages
            )));
        }
        if self.multi_scale_groups < 2 {
            return Err(MmsError::Config(format!(
                "multi_scale_groups must be at least 2, got {}",
                self.multi_scale_groups
            )));
        }
        if self.encoder_base_channels == 0
            || !self.encoder_base_channels.is_multiple_of(self.multi_scale_groups)
        {
            return Err(MmsError::Config(format!(
                "encoder_base_channels ({}) must be a positive multiple of multi_scale_groups ({})",
                self.encoder_base_channels, self.multi_scale_groups
            )));
        }
        Ok(())
    }

    /// Output channels of encoder stage `s` (1-based); stage 0 is the full-resolution stem.
    pub fn stage_channels(&self, s: usize) -> usize {
        match s {
            0 | 1 => self.encoder_base_channels,
            s => self.encoder_base_channels << (s - 1),
        }
    }

    pub fn downsampling(&self) -> usize {
        1 << self.encoder_stages
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub conv_channels: usize,
    pub pool_count: usize,
    pub out_dim: usize,
}

impl HeadConfig {
    pub const CLASSIFIER_POOLS: usize = 3;
    pub const PROJECTOR_POOLS: usize = 2;

    pub fn classifier(conv_channels: usize, out_dim: usize) -> Self {
        Self {
            conv_channels,
            pool_count: Self::CLASSIFIER_POOLS,
            out_dim,
        }
    }

    pub fn projector(conv_channels: usize, out_dim: usize) -> Self {
        Self {
            conv_channels,
            pool_count: Self::PROJECTOR_POOLS,
            out_dim,
        }
    }

    pub fn default_classifier() -> Self {
        Self::classifier(64, 128)
    }

    pub fn default_projector() -> Self {
        Self::projector(64, 64)
    }

    pub(crate) fn validate(&self, what: &str, pools: usize) -> Result<()> {
        if self.pool_count != pools {
            return Err(MmsError::Config(format!(
                "{what} pool_count must be {pools}, got {}",
                self.pool_count
            )));
        }
        if self.conv_channels == 0 || self.out_dim == 0 {
            return Err(MmsError::Config(format!(
                "{what} conv_channels and out_dim must be positive"
            )));
        }
        Ok(())
    }
}

/// Shapes of all six networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub seg: SegNetConfig,
    pub classifier: HeadConfig,
    pub projector: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seg: SegNetConfig::default(),
            classifier: HeadConfig::default_classifier(),
            projector: HeadConfig::default_projector(),
        }
    }
}
