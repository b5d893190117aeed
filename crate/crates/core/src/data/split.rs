use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::error::{MmsError, Result};
use crate::seeds::rng_for;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabeledPath {
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetListing {
    pub labeled: Vec<LabeledPath>,
    pub unlabeled: Vec<PathBuf>,
}

fn png_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| MmsError::io(dir, e))? {
        let path = entry.map_err(|e| MmsError::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Lists `root/images/*.png`, pairing each with `root/masks/<same stem>.png` when present.
pub fn scan_dataset(root: &Path) -> Result<DatasetListing> {
    let image_dir = root.join("images");
    if !image_dir.is_dir() {
        return Err(MmsError::Dataset(format!(
            "{} has no images/ directory",
            root.display()
        )));
    }
    let images = png_files(&image_dir)?;
    if images.is_empty() {
        return Err(MmsError::Dataset(format!(
            "no PNG images under {}",
            image_dir.display()
        )));
    }
    let mask_dir = root.join("masks");
    let masks = if mask_dir.is_dir() {
        png_files(&mask_dir)?
    } else {
        BTreeMap::new()
    };
    if let Some((stem, path)) = masks.iter().find(|(s, _)| !images.contains_key(*s)) {
        return Err(MmsError::Validation(format!(
            "mask {} has no image named {stem}",
            path.display()
        )));
    }
    let mut listing = DatasetListing::default();
    for (stem, image) in images {
        match masks.get(&stem) {
            Some(mask) => listing.labeled.push(LabeledPath {
                image,
                mask: mask.clone(),
            }),
            None => listing.unlabeled.push(image),
        }
    }
    Ok(listing)
}

/// The two disjoint labeled subsets, the unlabeled pool and the held-out test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub labeled_x1: Vec<LabeledPath>,
    pub labeled_x2: Vec<LabeledPath>,
    pub unlabeled: Vec<PathBuf>,
    pub test: Vec<LabeledPath>,
    pub label_fraction: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    version: u32,
    manifest: SplitManifest,
}

/// Number of images selected for labeling: `round_half_up(fraction · n)`.
pub fn labeled_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) + 0.5).floor() as usize
}

/// Selects `round(fraction · |labeled|)` images by a seeded shuffle and deals them
/// alternately to the two subsets. Unselected images join the unlabeled pool.
pub fn disjoint_split(labeled: &[LabeledPath], label_fraction: f64, seed: u64) -> Result<SplitManifest> {
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(MmsError::Parameter(format!(
            "label fraction must be in (0, 1], got {label_fraction}"
        )));
    }
    let n_lab = labeled_count(labeled.len(), label_fraction);
    if n_lab < 2 {
        return Err(MmsError::Split(format!(
            "{label_fraction} of {} images selects {n_lab}; each network needs at least one",
            labeled.len()
        )));
    }
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.shuffle(&mut rng_for(&[seed, 0x5350_4c49]));
    let (chosen, rest) = order.split_at(n_lab);
    let mut manifest = SplitManifest {
        labeled_x1: Vec::with_capacity(n_lab.div_ceil(2)),
        labeled_x2: Vec::with_capacity(n_lab / 2),
        unlabeled: Vec::with_capacity(rest.len()),
        test: Vec::new(),
        label_fraction,
        seed,
    };
    for (i, &idx) in chosen.iter().enumerate() {
        let target = if i % 2 == 0 {
            &mut manifest.labeled_x1
        } else {
            &mut manifest.labeled_x2
        };
        target.push(labeled[idx].clone());
    }
    let mut rest: Vec<usize> = rest.to_vec();
    rest.sort_unstable();
    manifest
        .unlabeled
        .extend(rest.into_iter().map(|i| labeled[i].image.clone()));
    manifest.validate()?;
    Ok(manifest)
}

impl SplitManifest {
    /// Adds images that never had masks to the unlabeled pool.
    pub fn with_extra_unlabeled(mut self, extra: impl IntoIterator<Item = PathBuf>) -> Result<Self> {
        self.unlabeled.extend(extra);
        self.validate()?;
        Ok(self)
    }

    pub fn with_test(mut self, test: Vec<LabeledPath>) -> Result<Self> {
        self.test = test;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MmsError::Split(m));
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad(format!("label fraction {} outside (0, 1]", self.label_fraction));
        }
        if self.labeled_x1.is_empty() || self.labeled_x2.is_empty() {
            return bad("both labeled subsets must be non-empty".into());
        }
        if self.labeled_x1.len().abs_diff(self.labeled_x2.len()) > 1 {
            return bad(format!(
                "labeled subsets are unbalanced: {} vs {}",
                self.labeled_x1.len(),
                self.labeled_x2.len()
            ));
        }
        let x1: BTreeSet<&Path> = self.labeled_x1.iter().map(|p| p.image.as_path()).collect();
        let x2: BTreeSet<&Path> = self.labeled_x2.iter().map(|p| p.image.as_path()).collect();
        if x1.len() != self.labeled_x1.len() || x2.len() != self.labeled_x2.len() {
            return bad("a labeled subset lists the same image twice".into());
        }
        if let Some(p) = x1.intersection(&x2).next() {
            return bad(format!("{} is in both labeled subsets", p.display()));
        }
        let labeled: BTreeSet<&Path> = x1.union(&x2).copied().collect();
        if let Some(p) = self.unlabeled.iter().find(|p| labeled.contains(p.as_path())) {
            return bad(format!("labeled image {} also appears as unlabeled", p.display()));
        }
        let training: BTreeSet<&Path> = labeled
            .iter()
            .copied()
            .chain(self.unlabeled.iter().map(PathBuf::as_path))
            .collect();
        if let Some(p) = self.test.iter().find(|p| training.contains(p.image.as_path())) {
            return bad(format!("training image {} also appears in test", p.image.display()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ManifestFile {
            version: MANIFEST_VERSION,
            manifest: self.clone(),
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MmsError::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| MmsError::Load {
            what: format!("manifest {}", path.display()),
            reason: e.to_string(),
        })?;
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(MANIFEST_VERSION) => {}
            other => {
                return Err(MmsError::Load {
                    what: format!("manifest {}", path.display()),
                    reason: format!("unsupported version {other:?} (expected {MANIFEST_VERSION})"),
                })
            }
        }
        let file: ManifestFile = serde_json::from_value(raw).map_err(|e| MmsError::Load {
            what: format!("manifest {}", path.display()),
            reason: e.to_string(),
        })?;
        file.manifest.validate()?;
        Ok(file.manifest)
    }
}
