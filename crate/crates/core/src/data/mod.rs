//! Dataset listing, the disjoint labeled split, augmentation and the epoch batch stream.
//!
//! On disk a dataset is `root/images/*.png` with optional filename-matched
//! `root/masks/*.png`.

mod augment;
mod image;
mod split;
mod stream;


pub use augment::{augment_heavy, augment_pair, gridmask, resize_image, resize_mask, AugmentConfig};
pub use image::{images_to_tensor, masks_to_batch, Image, Mask, MASK_THRESHOLD};
pub use split::{
    disjoint_split, labeled_count, scan_dataset, DatasetListing, LabeledPath, SplitManifest,
    MANIFEST_VERSION,
};
pub use stream::{labeled_batch_size, BatchStream, LabeledBatch, LabeledStream, StepBatch, StepIndices};
