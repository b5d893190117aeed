use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{Image, Mask};
use crate::error::{MmsError, Result};
use crate::seeds::rng_for;

/// Augmentation magnitudes and probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Rotation drawn uniformly from `±rotation_degrees`.
    pub rotation_degrees: f64,
    /// Probability of a horizontal flip.
    pub flip_prob: f64,
    /// Translation drawn uniformly from `±affine_translate` of each side.
    pub affine_translate: f64,
    /// Isotropic scale drawn uniformly from this range.
    pub affine_scale: [f64; 2],
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub jitter_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from `1 ± jitter_strength`.
    pub jitter_strength: f64,
    pub gridmask_keep_ratio: f64,
    pub gridmask_unit: [usize; 2],
    pub target_width: usize,
    pub target_height: usize,
    /// Give each network its own augmentation of the unlabeled batch.
    pub independent_unlabeled_views: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_degrees: 30.0,
            flip_prob: 0.5,
            affine_translate: 0.1,
            affine_scale: [0.9, 1.1],
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: [0.1, 2.0],
            jitter_prob: 0.8,
            jitter_strength: 0.4,
            gridmask_keep_ratio: 0.6,
            gridmask_unit: [8, 32],
            target_width: 512,
            target_height: 288,
            independent_unlabeled_views: false,
        }
    }
}

impl AugmentConfig {
    /// No transform beyond resizing to the target size.
    pub fn identity(target_width: usize, target_height: usize) -> Self {
        Self {
            rotation_degrees: 0.0,
            flip_prob: 0.0,
            affine_translate: 0.0,
            affine_scale: [1.0, 1.0],
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            jitter_prob: 0.0,
            gridmask_keep_ratio: 1.0,
            target_width,
            target_height,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MmsError::Config(m));
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("jitter_prob", self.jitter_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if !(self.rotation_degrees >= 0.0 && self.rotation_degrees <= 180.0) {
            return bad(format!("rotation_degrees must be in [0, 180], got {}", self.rotation_degrees));
        }
        if !(0.0..0.5).contains(&self.affine_translate) {
            return bad(format!("affine_translate must be in [0, 0.5), got {}", self.affine_translate));
        }
        let [s0, s1] = self.affine_scale;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return bad(format!("affine_scale must be a positive range, got [{s0}, {s1}]"));
        }
        let [b0, b1] = self.blur_sigma;
        if !(b0 > 0.0 && b0 <= b1 && b1.is_finite()) {
            return bad(format!("blur_sigma must be a positive range, got [{b0}, {b1}]"));
        }
        if !(0.0..1.0).contains(&self.jitter_strength) {
            return bad(format!("jitter_strength must be in [0, 1), got {}", self.jitter_strength));
        }
        if !(self.gridmask_keep_ratio > 0.0 && self.gridmask_keep_ratio <= 1.0) {
            return bad(format!(
                "gridmask_keep_ratio must be in (0, 1], got {}",
                self.gridmask_keep_ratio
            ));
        }
        let [u0, u1] = self.gridmask_unit;
        if u0 < 2 || u0 > u1 {
            return bad(format!("gridmask_unit must be a range starting at 2 or more, got [{u0}, {u1}]"));
        }
        if hole_side(u0, self.gridmask_keep_ratio) >= u0 {
            return bad(format!(
                "gridmask_keep_ratio {} leaves no visible pixels at unit {u0}",
                self.gridmask_keep_ratio
            ));
        }
        if self.target_width == 0 || self.target_height == 0 {
            return bad("target size must be positive".into());
        }
        Ok(())
    }
}

/// Inverse map from output pixel centres to source pixel coordinates.
#[derive(Clone, Copy, Debug)]
struct Warp {
    /// Row-major 2x2 inverse of the linear part, in source pixel units.
    inv: [f64; 4],
    translate: [f64; 2],
    flip: bool,
}

impl Warp {
    fn identity() -> Self {
        Self {
            inv: [1.0, 0.0, 0.0, 1.0],
            translate: [0.0, 0.0],
            flip: false,
        }
    }

    fn sample(cfg: &AugmentConfig, rng: &mut ChaCha8Rng, src_w: usize, src_h: usize) -> Self {
        loop {
            let angle = uniform(rng, -cfg.rotation_degrees, cfg.rotation_degrees).to_radians();
            let flip = rng.random::<f64>() < cfg.flip_prob;
            let tx = uniform(rng, -cfg.affine_translate, cfg.affine_translate) * src_w as f64;
            let ty = uniform(rng, -cfg.affine_translate, cfg.affine_translate) * src_h as f64;
            let scale = uniform(rng, cfg.affine_scale[0], cfg.affine_scale[1]);
            let det = scale * scale;
            if det.abs() < 1e-6 {
                continue;
            }
            let (s, c) = angle.sin_cos();
            // inverse of scale·R(angle) is R(−angle)/scale
            return Self {
                inv: [c / scale, s / scale, -s / scale, c / scale],
                translate: [tx, ty],
                flip,
            };
        }
    }

    /// Source coordinates (pixel-centre convention) of output pixel `(x, y)`.
    fn source(&self, x: usize, y: usize, out: (usize, usize), src: (usize, usize)) -> (f64, f64) {
        let (ow, oh) = (out.0 as f64, out.1 as f64);
        let (sw, sh) = (src.0 as f64, src.1 as f64);
        // centred coordinates in source pixel units after resizing
        let qx = ((x as f64 + 0.5) / ow - 0.5) * sw - self.translate[0];
        let qy = ((y as f64 + 0.5) / oh - 0.5) * sh - self.translate[1];
        let mut px = self.inv[0] * qx + self.inv[1] * qy;
        let py = self.inv[2] * qx + self.inv[3] * qy;
        if self.flip {
            px = -px;
        }
        (px + sw / 2.0 - 0.5, py + sh / 2.0 - 0.5)
    }

    fn apply_image(&self, img: &Image, w: usize, h: usize) -> Image {
        let (sw, sh) = (img.width(), img.height());
        let mut data = vec![0.0f32; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x, y, (w, h), (sw, sh));
                let (x0, fx) = split_coord(sx, sw);
                let (y0, fy) = split_coord(sy, sh);
                let x1 = (x0 + 1).min(sw - 1);
                let y1 = (y0 + 1).min(sh - 1);
                for c in 0..3 {
                    let p = img.plane(c);
                    let top = p[y0 * sw + x0] as f64 * (1.0 - fx) + p[y0 * sw + x1] as f64 * fx;
                    let bot = p[y1 * sw + x0] as f64 * (1.0 - fx) + p[y1 * sw + x1] as f64 * fx;
                    data[c * w * h + y * w + x] = (top * (1.0 - fy) + bot * fy) as f32;
                }
            }
        }
        Image::from_raw(w, h, data)
    }

    fn apply_mask(&self, mask: &Mask, w: usize, h: usize) -> Mask {
        let (sw, sh) = (mask.width(), mask.height());
        let src = mask.data();
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x, y, (w, h), (sw, sh));
                let xi = (sx.round().max(0.0) as usize).min(sw - 1);
                let yi = (sy.round().max(0.0) as usize).min(sh - 1);
                data.push(src[yi * sw + xi]);
            }
        }
        Mask::from_raw(w, h, data)
    }
}

/// Clamps a coordinate into the image (border replication) and splits it into the lower
/// index and the interpolation fraction.
fn split_coord(s: f64, n: usize) -> (usize, f64) {
    let s = s.clamp(0.0, (n - 1) as f64);
    let i = (s.floor() as usize).min(n - 1);
    (i, s - i as f64)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Bilinear resize with the same pixel-centre convention as the augmentation warp.
pub fn resize_image(img: &Image, width: usize, height: usize) -> Image {
    Warp::identity().apply_image(img, width, height)
}

/// Nearest-neighbour resize, consistent with [`resize_image`].
pub fn resize_mask(mask: &Mask, width: usize, height: usize) -> Mask {
    Warp::identity().apply_mask(mask, width, height)
}

fn grayscale(img: &mut Image) {
    let n = img.width() * img.height();
    let d = img.data_mut();
    for i in 0..n {
        let g = 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i];
        d[i] = g;
        d[n + i] = g;
        d[2 * n + i] = g;
    }
}

fn gaussian_blur(img: &mut Image, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / norm) as f32).collect();
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let d = img.data_mut();
    let mut tmp = vec![0.0f32; n];
    for c in 0..3 {
        let plane = &mut d[c * n..(c + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * plane[y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[sy * w + x];
                }
                plane[y * w + x] = acc.clamp(0.0, 1.0);
            }
        }
    }
}

fn color_jitter(img: &mut Image, brightness: f32, contrast: f32, saturation: f32) {
    let n = img.width() * img.height();
    let d = img.data_mut();
    for v in d.iter_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let lum = |d: &[f32], i: usize| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i];
    let mean = (0..n).map(|i| lum(d, i)).sum::<f32>() / n as f32;
    for v in d.iter_mut() {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    for i in 0..n {
        let g = lum(d, i);
        for c in 0..3 {
            let v = &mut d[c * n + i];
            *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
        }
    }
}

fn hole_side(unit: usize, keep_ratio: f64) -> usize {
    (unit as f64 * (1.0 - keep_ratio)).round() as usize
}

/// Zeroes a periodic grid of square holes: period `unit`, side `round(unit·(1 − keep))`,
/// random phase in both axes.
pub fn gridmask(image: &Image, keep_ratio: f64, unit: usize, rng_seed: u64) -> Result<Image> {
    if unit < 2 {
        return Err(MmsError::Parameter(format!("gridmask unit must be at least 2, got {unit}")));
    }
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(MmsError::Parameter(format!(
            "gridmask keep ratio must be in (0, 1], got {keep_ratio}"
        )));
    }
    let hole = hole_side(unit, keep_ratio);
    if hole >= unit {
        return Err(MmsError::Parameter(format!(
            "gridmask hole side {hole} is not smaller than unit {unit}"
        )));
    }
    let mut rng = rng_for(&[rng_seed, 0x4752_4944]);
    Ok(apply_gridmask(image.clone(), unit, hole, &mut rng))
}

fn apply_gridmask(mut img: Image, unit: usize, hole: usize, rng: &mut ChaCha8Rng) -> Image {
    let ox = rng.random_range(0..unit);
    let oy = rng.random_range(0..unit);
    if hole == 0 {
        return img;
    }
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let d = img.data_mut();
    for y in 0..h {
        if (y + oy) % unit >= hole {
            continue;
        }
        for x in 0..w {
            if (x + ox) % unit < hole {
                for c in 0..3 {
                    d[c * n + y * w + x] = 0.0;
                }
            }
        }
    }
    img
}

fn check_image(image: &Image) -> Result<()> {
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(MmsError::Validation(format!("image value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Geometric augmentation applied identically to an image and its mask, followed by random
/// grayscale on the image. The mask is resampled nearest-neighbour.
pub fn augment_pair(image: &Image, mask: &Mask, cfg: &AugmentConfig, rng_seed: u64) -> Result<(Image, Mask)> {
    if (image.width(), image.height()) != (mask.width(), mask.height()) {
        return Err(MmsError::Validation(format!(
            "image {}x{} and mask {}x{} differ in size",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    check_image(image)?;
    let mut rng = rng_for(&[rng_seed, 0x5041_4952]);
    let warp = Warp::sample(cfg, &mut rng, image.width(), image.height());
    let (w, h) = (cfg.target_width, cfg.target_height);
    let mut out = warp.apply_image(image, w, h);
    if rng.random::<f64>() < cfg.grayscale_prob {
        grayscale(&mut out);
    }
    Ok((out, warp.apply_mask(mask, w, h)))
}

/// Geometric, grayscale, blur, colour jitter and GridMask, all drawn from one seeded stream.
pub fn augment_heavy(image: &Image, cfg: &AugmentConfig, rng_seed: u64) -> Result<Image> {
    check_image(image)?;
    let mut rng = rng_for(&[rng_seed, 0x4845_4156]);
    let warp = Warp::sample(cfg, &mut rng, image.width(), image.height());
    let mut out = warp.apply_image(image, cfg.target_width, cfg.target_height);
    if rng.random::<f64>() < cfg.grayscale_prob {
        grayscale(&mut out);
    }
    if rng.random::<f64>() < cfg.blur_prob {
        let sigma = uniform(&mut rng, cfg.blur_sigma[0], cfg.blur_sigma[1]);
        gaussian_blur(&mut out, sigma);
    }
    if rng.random::<f64>() < cfg.jitter_prob {
        let s = cfg.jitter_strength;
        let mut factor = || uniform(&mut rng, 1.0 - s, 1.0 + s) as f32;
        let (b, c, sat) = (factor(), factor(), factor());
        color_jitter(&mut out, b, c, sat);
    }
    let unit = rng.random_range(cfg.gridmask_unit[0]..=cfg.gridmask_unit[1]);
    let hole = hole_side(unit, cfg.gridmask_keep_ratio);
    if hole >= unit {
        return Err(MmsError::Parameter(format!(
            "gridmask hole side {hole} is not smaller than unit {unit}"
        )));
    }
    Ok(apply_gridmask(out, unit, hole, &mut rng))
}
