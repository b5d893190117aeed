use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::augment::{augment_heavy, augment_pair, AugmentConfig};
use super::image::{images_to_tensor, masks_to_batch, Image, Mask};
use super::split::{LabeledPath, SplitManifest};
use crate::error::{MmsError, Result};
use crate::losses::MaskBatch;
use crate::nn::Tensor;
use crate::seeds::{derive_seed, rng_for};

/// Stream identifiers mixed into per-item seeds.
const X1: u64 = 1;
const X2: u64 = 2;
const U: u64 = 3;
const U_SECOND: u64 = 4;

/// Labeled images drawn per network per step: half the nominal batch, rounded up, so the two
/// networks together see `batch_size` labeled images.
pub fn labeled_batch_size(batch_size: usize) -> usize {
    batch_size.div_ceil(2)
}

/// Which manifest entries make up one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepIndices {
    pub x1: Vec<usize>,
    pub x2: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub masks: MaskBatch,
}

#[derive(Clone, Debug)]
pub struct StepBatch {
    pub step: usize,
    pub x1: LabeledBatch,
    pub x2: LabeledBatch,
    /// Heavily augmented unlabeled images for network 1 (and network 2 unless
    /// `unlabeled_second` is set). `None` when the unlabeled pool is empty.
    pub unlabeled: Option<Tensor>,
    pub unlabeled_second: Option<Tensor>,
}

/// Draws `count` items per step from `0..n`, reshuffling at the start of every pass.
fn cycle_plan(n: usize, count: usize, steps: usize, seed: u64, stream: u64) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(steps);
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    let mut cycle = 0u64;
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(count);
        while batch.len() < count {
            if pos == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut rng_for(&[seed, stream, cycle]));
                cycle += 1;
                pos = 0;
            }
            batch.push(order[pos]);
            pos += 1;
        }
        out.push(batch);
    }
    out
}

/// Loads and augments labeled pairs; slot `i` is seeded from `seed_key ++ [i]`.
fn load_labeled(list: &[LabeledPath], idx: &[usize], cfg: &AugmentConfig, seed_key: &[u64]) -> Result<LabeledBatch> {
    let pairs: Vec<(Image, Mask)> = idx
        .par_iter()
        .enumerate()
        .map(|(slot, &i)| {
            let p = &list[i];
            let image = Image::load(&p.image)?;
            let mask = Mask::load(&p.mask)?;
            let mut key = seed_key.to_vec();
            key.push(slot as u64);
            augment_pair(&image, &mask, cfg, derive_seed(&key))
        })
        .collect::<Result<_>>()?;
    let (images, masks): (Vec<Image>, Vec<Mask>) = pairs.into_iter().unzip();
    Ok(LabeledBatch {
        images: images_to_tensor(&images)?,
        masks: masks_to_batch(&masks)?,
    })
}

/// One epoch over a single labeled list in shuffled batches of `batch_size`.
pub struct LabeledStream<'a> {
    list: &'a [LabeledPath],
    cfg: &'a AugmentConfig,
    epoch_seed: u64,
    plan: Vec<Vec<usize>>,
    next: usize,
}

impl<'a> LabeledStream<'a> {
    pub fn new(list: &'a [LabeledPath], cfg: &'a AugmentConfig, batch_size: usize, epoch_seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(MmsError::Parameter("batch_size must be at least 1".into()));
        }
        if list.is_empty() {
            return Err(MmsError::Split("no labeled images to stream".into()));
        }
        cfg.validate()?;
        let mut order: Vec<usize> = (0..list.len()).collect();
        order.shuffle(&mut rng_for(&[epoch_seed, X1]));
        let plan = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
        Ok(Self {
            list,
            cfg,
            epoch_seed,
            plan,
            next: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.plan.len()
    }
}

impl Iterator for LabeledStream<'_> {
    type Item = Result<LabeledBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.plan.get(self.next)?;
        let step = self.next;
        self.next += 1;
        Some(load_labeled(self.list, idx, self.cfg, &[self.epoch_seed, step as u64, X1]))
    }
}

/// One epoch of training batches.
pub struct BatchStream<'a> {
    manifest: &'a SplitManifest,
    cfg: &'a AugmentConfig,
    epoch_seed: u64,
    plan: Vec<StepIndices>,
    next: usize,
}

impl<'a> BatchStream<'a> {
    /// Epoch length is `⌈|U| / batch_size⌉`. Without unlabeled data the stream degrades to
    /// labeled batches only and the epoch covers the larger labeled subset once.
    pub fn new(
        manifest: &'a SplitManifest,
        cfg: &'a AugmentConfig,
        batch_size: usize,
        epoch_seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(MmsError::Parameter("batch_size must be at least 1".into()));
        }
        manifest.validate()?;
        cfg.validate()?;
        let per_net = labeled_batch_size(batch_size);
        let n_u = manifest.unlabeled.len();
        let steps = if n_u == 0 {
            log::warn!("unlabeled pool is empty; streaming labeled batches only");
            manifest.labeled_x1.len().max(manifest.labeled_x2.len()).div_ceil(per_net)
        } else {
            n_u.div_ceil(batch_size)
        };
        let mut u_order: Vec<usize> = (0..n_u).collect();
        u_order.shuffle(&mut rng_for(&[epoch_seed, U]));
        let x1 = cycle_plan(manifest.labeled_x1.len(), per_net, steps, epoch_seed, X1);
        let x2 = cycle_plan(manifest.labeled_x2.len(), per_net, steps, epoch_seed, X2);
        let plan = x1
            .into_iter()
            .zip(x2)
            .enumerate()
            .map(|(s, (x1, x2))| StepIndices {
                x1,
                x2,
                unlabeled: u_order
                    .iter()
                    .skip(s * batch_size)
                    .take(batch_size)
                    .copied()
                    .collect(),
            })
            .collect();
        Ok(Self {
            manifest,
            cfg,
            epoch_seed,
            plan,
            next: 0,
        })
    }

    pub fn plan(&self) -> &[StepIndices] {
        &self.plan
    }

    pub fn steps(&self) -> usize {
        self.plan.len()
    }

    fn labeled(&self, list: &[LabeledPath], idx: &[usize], step: usize, stream: u64) -> Result<LabeledBatch> {
        load_labeled(list, idx, self.cfg, &[self.epoch_seed, step as u64, stream])
    }

    fn unlabeled(&self, idx: &[usize], step: usize, stream: u64) -> Result<Tensor> {
        let images: Vec<Image> = idx
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let image = Image::load(&self.manifest.unlabeled[i])?;
                let seed = derive_seed(&[self.epoch_seed, step as u64, stream, slot as u64]);
                augment_heavy(&image, self.cfg, seed)
            })
            .collect::<Result<_>>()?;
        images_to_tensor(&images)
    }

    fn build(&self, step: usize) -> Result<StepBatch> {
        let ix = &self.plan[step];
        let x1 = self.labeled(&self.manifest.labeled_x1, &ix.x1, step, X1)?;
        let x2 = self.labeled(&self.manifest.labeled_x2, &ix.x2, step, X2)?;
        let (unlabeled, unlabeled_second) = if ix.unlabeled.is_empty() {
            (None, None)
        } else {
            let first = self.unlabeled(&ix.unlabeled, step, U)?;
            let second = if self.cfg.independent_unlabeled_views {
                Some(self.unlabeled(&ix.unlabeled, step, U_SECOND)?)
            } else {
                None
            };
            (Some(first), second)
        };
        Ok(StepBatch {
            step,
            x1,
            x2,
            unlabeled,
            unlabeled_second,
        })
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<StepBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.plan.len() {
            return None;
        }
        let step = self.next;
        self.next += 1;
        Some(self.build(step))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.plan.len() - self.next;
        (left, Some(left))
    }
}
