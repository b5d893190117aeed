//! Run configuration files: TOML with `[data]`, `[augment]`, `[model]`, `[train]` and
//! `[eval]` sections. Every field except the top-level `seed` has a default; unknown keys
//! are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{MmsError, Result};
use crate::evaluation::EvalSettings;
use crate::models::ModelConfig;
use crate::synthdata::SynthConfig;
use crate::training::TrainConfig;

/// Synthetic dataset layout produced by the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSettings {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    /// Extra unmasked variants written per image into the unlabeled pool.
    pub unlabeled_per_image: usize,
    /// Size of the separate held-out set under `test/`.
    pub test_images: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            n_images: 64,
            height: 64,
            width: 64,
            unlabeled_per_image: 0,
            test_images: 16,
        }
    }
}

impl SynthSettings {
    pub fn synth_config(&self, n_images: usize, seed: u64) -> SynthConfig {
        SynthConfig::new(n_images, self.height, self.width, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub label_fraction: f64,
    pub synth: SynthSettings,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            label_fraction: 0.05,
            synth: SynthSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
}

impl RunConfigFile {
    /// A configuration with every default and the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            data: DataConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            eval: EvalSettings::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| MmsError::Config(e.to_string()))?;
        if raw
            .get("train")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("seed"))
        {
            return Err(MmsError::Config(
                "`seed` belongs at the top level, not in [train]".into(),
            ));
        }
        let mut cfg: Self = toml::from_str(text).map_err(|e| MmsError::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MmsError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            MmsError::Config(m) => MmsError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.label_fraction > 0.0 && self.data.label_fraction <= 1.0) {
            return Err(MmsError::Config(format!(
                "data.label_fraction must be in (0, 1], got {}",
                self.data.label_fraction
            )));
        }
        self.synth_config().validate()?;
        self.augment.validate()?;
        self.model.seg.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn synth_config(&self) -> SynthConfig {
        self.data.synth.synth_config(self.data.synth.n_images, self.seed)
    }

    /// The fully resolved configuration as TOML, `train.seed` omitted.
    pub fn to_toml(&self) -> Result<String> {
        let mut v = toml::Table::try_from(self).map_err(|e| MmsError::Config(e.to_string()))?;
        if let Some(train) = v.get_mut("train").and_then(|t| t.as_table_mut()) {
            train.remove("seed");
        }
        toml::to_string(&v).map_err(|e| MmsError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::InferenceMode;
    use crate::losses::NegativeKeys;

    #[test]
    fn minimal_file_takes_defaults() {
        let cfg = RunConfigFile::parse("seed = 7\n").unwrap();
        assert_eq!(cfg, RunConfigFile::with_seed(7));
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(RunConfigFile::parse("[train]\nepochs = 3\n"), Err(MmsError::Config(_))));
        assert!(matches!(
            RunConfigFile::parse("seed = 1\n[train]\nseed = 2\n"),
            Err(MmsError::Config(_))
        ));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "seed = 1\nsed = 2\n",
            "seed = 1\n[train]\nepoch = 3\n",
            "seed = 1\n[model.seg]\nbase = 8\n",
            "seed = 1\n[augment]\nflip = 0.5\n",
            "seed = 1\n[eval]\nthreshhold = 0.5\n",
            "seed = 1\n[data.synth]\nimages = 3\n",
            "seed = 1\n[extra]\n",
        ] {
            assert!(matches!(RunConfigFile::parse(text), Err(MmsError::Config(_))), "{text}");
        }
    }

    #[test]
    fn sections_parse_and_echo_roundtrips() {
        let text = r#"
seed = 3

[data]
label_fraction = 0.2
[data.synth]
n_images = 8
height = 32
width = 48

[augment]
target_width = 48
target_height = 32
rotation_degrees = 10.0

[model.seg]
encoder_base_channels = 8
multi_scale_groups = 2

[model.classifier]
conv_channels = 8
pool_count = 3
out_dim = 16

[train]
epochs = 5
batch_size = 4
k_neg = "all"
use_projectors = false
loss_weights = { lambda1 = 1.0, lambda2 = 0.5, lambda3 = 0.25, lambda4 = 0.0 }

[eval]
mode = "net2"
"#;
        let cfg = RunConfigFile::parse(text).unwrap();
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.k_neg, NegativeKeys::All);
        assert_eq!(cfg.model.seg.encoder_base_channels, 8);
        assert_eq!(cfg.eval.mode, InferenceMode::Net2);
        assert_eq!(cfg.synth_config().width, 48);
        let echo = cfg.to_toml().unwrap();
        assert_eq!(RunConfigFile::parse(&echo).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(RunConfigFile::parse("seed = 1\n[train]\nbatch_size = 0\n").is_err());
        assert!(RunConfigFile::parse("seed = 1\n[train]\ntau = -1.0\n").is_err());
        assert!(RunConfigFile::parse("seed = 1\n[data]\nlabel_fraction = 0.0\n").is_err());
        assert!(RunConfigFile::parse("seed = 1\n[data.synth]\nheight = 30\n").is_err());
    }
}
