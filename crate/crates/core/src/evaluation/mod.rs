//! Dice score, dual-network inference and test-set evaluation.

mod report;

pub use report::{
    fraction_label, parse_report, read_report, write_report, PerImageRow, ReportLabel,
    ReportTable, TableRow, PER_IMAGE_HEADER, PER_IMAGE_MARKER,
};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::sha256;
use crate::data::{images_to_tensor, resize_image, resize_mask, Image, LabeledPath, Mask};
use crate::error::{MmsError, Result};
use crate::models::{Branch, ModelParams};
use crate::training::CheckpointState;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `2|a ∩ b| / (|a| + |b|)` over 0/1 values; two empty masks score 1.
pub fn dsc_values(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(MmsError::Validation(format!(
            "masks differ in size: {} vs {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        if p > 1 || g > 1 {
            return Err(MmsError::Validation(format!(
                "masks must be binary, found value {}",
                p.max(g)
            )));
        }
        inter += usize::from(p & g == 1);
        np += usize::from(p);
        ng += usize::from(g);
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(MmsError::Validation(format!(
            "masks differ in shape: {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    dsc_values(pred.data(), gt.data())
}

/// Which network output is thresholded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    /// Mean of both probability maps.
    #[default]
    Ensemble,
    Net1,
    Net2,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 3] = [InferenceMode::Ensemble, InferenceMode::Net1, InferenceMode::Net2];

    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::Ensemble => "ensemble",
            InferenceMode::Net1 => "net1",
            InferenceMode::Net2 => "net2",
        }
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InferenceMode {
    type Err = MmsError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| MmsError::Parameter(format!("mode must be ensemble, net1 or net2, got `{s}`")))
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(MmsError::Parameter(format!("threshold must lie in (0, 1), got {threshold}")))
    }
}

/// Foreground probabilities of both networks on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityPair {
    pub width: usize,
    pub height: usize,
    pub net1: Vec<f64>,
    pub net2: Vec<f64>,
}

impl ProbabilityPair {
    /// Thresholds the selected map; a pixel is foreground when its probability is at least
    /// `threshold`.
    pub fn mask(&self, mode: InferenceMode, threshold: f64) -> Result<Mask> {
        check_threshold(threshold)?;
        let n = self.width * self.height;
        if self.net1.len() != n || self.net2.len() != n {
            return Err(MmsError::Shape(format!(
                "probability maps need {n} values, got {} and {}",
                self.net1.len(),
                self.net2.len()
            )));
        }
        let data = (0..n)
            .map(|i| {
                let p = match mode {
                    InferenceMode::Ensemble => 0.5 * (self.net1[i] + self.net2[i]),
                    InferenceMode::Net1 => self.net1[i],
                    InferenceMode::Net2 => self.net2[i],
                };
                u8::from(p >= threshold)
            })
            .collect();
        Mask::new(self.width, self.height, data)
    }
}

/// Anything that produces the two probability maps for an image.
pub trait Segmenter: Sync {
    /// Maps at any resolution; masks are resized to the image afterwards.
    fn probabilities(&self, image: &Image) -> Result<ProbabilityPair>;

    /// Identifies the predictor in report digests.
    fn fingerprint(&self) -> String;
}

/// Both networks of a parameter set, run at a fixed input resolution.
pub struct DualNetwork<'a> {
    pub params: &'a ModelParams,
    pub width: usize,
    pub height: usize,
}

impl Segmenter for DualNetwork<'_> {
    fn probabilities(&self, image: &Image) -> Result<ProbabilityPair> {
        let input = if (image.width(), image.height()) == (self.width, self.height) {
            image.clone()
        } else {
            resize_image(image, self.width, self.height)
        };
        let x = images_to_tensor(std::slice::from_ref(&input))?;
        let p1 = self.params.predict(Branch::One, &x)?;
        let p2 = self.params.predict(Branch::Two, &x)?;
        Ok(ProbabilityPair {
            width: self.width,
            height: self.height,
            net1: p1.values().to_vec(),
            net2: p2.values().to_vec(),
        })
    }

    fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for (name, t) in self.params.store.params().chain(self.params.store.buffers()) {
            bytes.extend_from_slice(name.as_bytes());
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        hex::encode(sha256(&bytes))
    }
}

impl CheckpointState {
    /// The checkpoint's networks at their training resolution.
    pub fn segmenter(&self) -> DualNetwork<'_> {
        DualNetwork {
            params: &self.params,
            width: self.augment_config.target_width,
            height: self.augment_config.target_height,
        }
    }
}

impl Segmenter for CheckpointState {
    fn probabilities(&self, image: &Image) -> Result<ProbabilityPair> {
        self.segmenter().probabilities(image)
    }

    fn fingerprint(&self) -> String {
        self.segmenter().fingerprint()
    }
}

/// Binary mask for `image` at its own resolution.
pub fn predict(seg: &dyn Segmenter, image: &Image, threshold: f64, mode: InferenceMode) -> Result<Mask> {
    check_threshold(threshold)?;
    let probs = seg.probabilities(image)?;
    let mask = probs.mask(mode, threshold)?;
    Ok(fit(mask, image.width(), image.height()))
}

fn fit(mask: Mask, width: usize, height: usize) -> Mask {
    if (mask.width(), mask.height()) == (width, height) {
        mask
    } else {
        resize_mask(&mask, width, height)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub threshold: f64,
    /// Mode summarized by `MetricsReport::mean_dsc`; every mode is scored regardless.
    pub mode: InferenceMode,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            mode: InferenceMode::Ensemble,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        check_threshold(self.threshold)
    }
}

/// DSC of each inference mode on one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeScores {
    pub ensemble: f64,
    pub net1: f64,
    pub net2: f64,
}

impl ModeScores {
    pub fn get(&self, mode: InferenceMode) -> f64 {
        match mode {
            InferenceMode::Ensemble => self.ensemble,
            InferenceMode::Net1 => self.net1,
            InferenceMode::Net2 => self.net2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub path: PathBuf,
    pub scores: Option<ModeScores>,
    pub error: Option<String>,
}

impl ImageResult {
    pub fn dsc(&self, mode: InferenceMode) -> Option<f64> {
        self.scores.map(|s| s.get(mode))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageResult>,
    /// Mean over scored images in `settings.mode`.
    pub mean_dsc: f64,
    /// Means of every mode over the same images.
    pub breakdown: ModeScores,
    pub settings: EvalSettings,
    /// Digest of the settings and the predictor.
    pub digest: String,
}

impl MetricsReport {
    pub fn errors(&self) -> impl Iterator<Item = &ImageResult> {
        self.per_image.iter().filter(|r| r.error.is_some())
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }

    pub fn scored(&self) -> usize {
        self.per_image.iter().filter(|r| r.scores.is_some()).count()
    }
}

fn mean_of(results: &[ImageResult], mode: InferenceMode) -> f64 {
    let scores: Vec<f64> = results.iter().filter_map(|r| r.dsc(mode)).collect();
    if scores.is_empty() {
        return f64::NAN;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn score_image(seg: &dyn Segmenter, item: &LabeledPath, settings: &EvalSettings, dump: Option<&Path>) -> Result<ModeScores> {
    let image = Image::load(&item.image)?;
    let gt = Mask::load(&item.mask)?;
    let probs = seg.probabilities(&image)?;
    let mut s = [0.0; 3];
    for (slot, mode) in InferenceMode::ALL.into_iter().enumerate() {
        let mask = fit(probs.mask(mode, settings.threshold)?, image.width(), image.height());
        s[slot] = dsc(&mask, &gt)?;
        if mode == settings.mode {
            if let Some(dir) = dump {
                let name = item.image.file_name().ok_or_else(|| {
                    MmsError::Parameter(format!("{} has no file name", item.image.display()))
                })?;
                mask.save(&dir.join(name))?;
            }
        }
    }
    Ok(ModeScores {
        ensemble: s[0],
        net1: s[1],
        net2: s[2],
    })
}

/// Scores every test pair in every mode. Images that fail to load or predict are recorded
/// with their error and left out of the means. With `dump_dir` set, the predicted mask of
/// `settings.mode` is written there under the image's file name.
pub fn evaluate_set(
    seg: &dyn Segmenter,
    test: &[LabeledPath],
    settings: &EvalSettings,
    dump_dir: Option<&Path>,
) -> Result<MetricsReport> {
    settings.validate()?;
    if test.is_empty() {
        return Err(MmsError::Parameter("test list is empty".into()));
    }
    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(dir).map_err(|e| MmsError::io(dir, e))?;
    }
    let per_image: Vec<ImageResult> = test
        .par_iter()
        .map(|item| match score_image(seg, item, settings, dump_dir) {
            Ok(scores) => ImageResult {
                path: item.image.clone(),
                scores: Some(scores),
                error: None,
            },
            Err(e) => {
                log::warn!("{}: {e}", item.image.display());
                ImageResult {
                    path: item.image.clone(),
                    scores: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    let breakdown = ModeScores {
        ensemble: mean_of(&per_image, InferenceMode::Ensemble),
        net1: mean_of(&per_image, InferenceMode::Net1),
        net2: mean_of(&per_image, InferenceMode::Net2),
    };
    let digest = hex::encode(sha256(
        serde_json::to_string(&serde_json::json!({
            "settings": settings,
            "predictor": seg.fingerprint(),
        }))?
        .as_bytes(),
    ));
    Ok(MetricsReport {
        mean_dsc: breakdown.get(settings.mode),
        per_image,
        breakdown,
        settings: settings.clone(),
        digest,
    })
}
