use std::path::Path;

use image::{GrayImage, ImageReader, Luma, Rgb, RgbImage};

use crate::error::{MmsError, Result};
use crate::losses::MaskBatch;
use crate::nn::Tensor;

/// Mask pixels at or above this 8-bit level are foreground.
pub const MASK_THRESHOLD: u8 = 128;

/// RGB image, channel-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// Binary mask, values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(MmsError::Validation(format!(
                "image {width}x{height} needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MmsError::Validation(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), 3 * width * height);
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * w * h];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = f32::from(px[c]) / 255.0;
            }
        }
        Ok(Self::from_raw(w, h, data))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.width * self.height;
        let img = RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            Rgb([0, 1, 2].map(|c| to_u8(self.data[c * n + i])))
        });
        img.save(path).map_err(|source| MmsError::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(MmsError::Validation(format!(
                "mask {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(MmsError::Validation("mask values must be 0 or 1".into()));
        }
        Ok(Self { width, height, data })
    }

    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Loads an 8-bit mask, thresholding at [`MASK_THRESHOLD`].
    pub fn load(path: &Path) -> Result<Self> {
        let img = open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.pixels().map(|p| u8::from(p[0] >= MASK_THRESHOLD)).collect();
        Ok(Self::from_raw(w, h, data))
    }

    /// Writes `{0, 255}` grayscale.
    pub fn save(&self, path: &Path) -> Result<()> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.data[y as usize * self.width + x as usize] * 255])
        });
        img.save(path).map_err(|source| MmsError::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let image_err = |source| MmsError::Image {
        path: path.to_path_buf(),
        source,
    };
    ImageReader::open(path)
        .map_err(|e| MmsError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| MmsError::io(path, e))?
        .decode()
        .map_err(image_err)
}

/// Stacks equally sized images into a `B×3×H×W` tensor.
pub fn images_to_tensor(images: &[Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| MmsError::Validation("cannot batch zero images".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(MmsError::Shape(format!(
                "batch mixes {w}x{h} and {}x{} images",
                img.width, img.height
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

/// Stacks equally sized masks into a label batch.
pub fn masks_to_batch(masks: &[Mask]) -> Result<MaskBatch> {
    let first = masks
        .first()
        .ok_or_else(|| MmsError::Validation("cannot batch zero masks".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        if (m.width, m.height) != (w, h) {
            return Err(MmsError::Shape(format!(
                "batch mixes {w}x{h} and {}x{} masks",
                m.width, m.height
            )));
        }
        data.extend(m.data.iter().map(|&v| f64::from(v)));
    }
    MaskBatch::labels(masks.len(), h, w, data)
}
