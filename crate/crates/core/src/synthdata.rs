//! Synthetic surgical-scene generator: elongated shaded instruments over a smooth textured
//! background, with exact masks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Mask};
use crate::error::{MmsError, Result};
use crate::seeds::rng_for;

/// Accepted range of the per-image foreground fraction.
pub const FOREGROUND_RANGE: (f64, f64) = (0.02, 0.40);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub tools_per_image: [usize; 2],
    /// Tool diameter range in pixels.
    pub tool_width: [usize; 2],
    /// Spatial frequency multiplier of the background texture.
    pub background_texture_scale: f64,
    /// Per-pixel probability of a specular speck.
    pub specular_noise_prob: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Defaults scaled to the image size.
    pub fn new(n_images: usize, height: usize, width: usize, seed: u64) -> Self {
        let side = height.min(width);
        Self {
            n_images,
            height,
            width,
            tools_per_image: [1, 3],
            tool_width: [(side / 12).max(4), (side / 6).max(5)],
            background_texture_scale: 1.0,
            specular_noise_prob: 0.002,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MmsError::Config(m));
        if self.n_images == 0 {
            return bad("n_images must be at least 1".into());
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return bad(format!(
                "image size {}x{} must be positive multiples of 16",
                self.height, self.width
            ));
        }
        let [t0, t1] = self.tools_per_image;
        if t0 == 0 || t0 > t1 {
            return bad(format!("tools_per_image must be a range starting at 1 or more, got [{t0}, {t1}]"));
        }
        let [w0, w1] = self.tool_width;
        if w0 < 2 || w0 > w1 || w1 * 2 > self.height.min(self.width) {
            return bad(format!("tool_width [{w0}, {w1}] does not fit the image"));
        }
        if !(self.background_texture_scale > 0.0 && self.background_texture_scale.is_finite()) {
            return bad("background_texture_scale must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.specular_noise_prob) {
            return bad("specular_noise_prob must be in [0, 1]".into());
        }
        Ok(())
    }
}

/// Union of discs whose radius varies linearly from `r0` at `a` to `r1` at `b`: a capsule
/// when the radii match, a tapering wedge otherwise.
#[derive(Clone, Copy, Debug)]
struct Tool {
    a: [f64; 2],
    b: [f64; 2],
    r0: f64,
    r1: f64,
    tone: f64,
}

impl Tool {
    /// Depth inside the tool, 1 on the spine and 0 on the rim; `None` outside.
    fn depth(&self, p: [f64; 2]) -> Option<f64> {
        let d = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let t = (((p[0] - self.a[0]) * d[0] + (p[1] - self.a[1]) * d[1]) / len2).clamp(0.0, 1.0);
        let q = [self.a[0] + t * d[0], self.a[1] + t * d[1]];
        let dist = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        let r = self.r0 + (self.r1 - self.r0) * t;
        (dist <= r).then(|| 1.0 - dist / r)
    }
}

fn sample_tool(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Tool {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let side = w.min(h);
    // enter from a random border point, heading roughly towards the centre
    let edge = rng.random_range(0..4);
    let s: f64 = rng.random();
    let a = match edge {
        0 => [s * w, 0.0],
        1 => [w, s * h],
        2 => [s * w, h],
        _ => [0.0, s * h],
    };
    let target = [
        w * rng.random_range(0.3..0.7),
        h * rng.random_range(0.3..0.7),
    ];
    let heading = (target[1] - a[1]).atan2(target[0] - a[0]) + rng.random_range(-0.4..0.4);
    let length = side * rng.random_range(0.35..0.75);
    let b = [a[0] + length * heading.cos(), a[1] + length * heading.sin()];
    let diameter = rng.random_range(cfg.tool_width[0] as f64..=cfg.tool_width[1] as f64);
    let r0 = diameter / 2.0;
    let r1 = if rng.random_bool(0.5) { r0 } else { r0 * rng.random_range(0.35..0.7) };
    Tool {
        a,
        b,
        r0,
        r1,
        tone: rng.random_range(0.55..0.9),
    }
}

/// Tool layouts tried per image before giving up on the foreground range.
const MAX_LAYOUT_ATTEMPTS: usize = 1000;

fn render(cfg: &SynthConfig, index: usize) -> Result<(Image, Mask)> {
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = rng_for(&[cfg.seed, index as u64, 0x5359_4e54]);

    // background: reddish tissue with low-frequency texture
    let base = [
        rng.random_range(0.55..0.8),
        rng.random_range(0.2..0.35),
        rng.random_range(0.2..0.35),
    ];
    let waves: Vec<([f64; 2], f64, f64)> = (0..4)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(1.0..4.0) * cfg.background_texture_scale
                * std::f64::consts::TAU
                / w.min(h) as f64;
            ([angle.cos() * freq, angle.sin() * freq], rng.random_range(0.0..6.3), rng.random_range(0.03..0.08))
        })
        .collect();

    let (lo, hi) = FOREGROUND_RANGE;
    let mut attempts = 0;
    let (tools, mask) = loop {
        attempts += 1;
        if attempts > MAX_LAYOUT_ATTEMPTS {
            return Err(MmsError::Config(format!(
                "no tool layout for image {index} hits foreground fraction [{lo}, {hi}]; adjust tool_width"
            )));
        }
        let n_tools = rng.random_range(cfg.tools_per_image[0]..=cfg.tools_per_image[1]);
        let tools: Vec<Tool> = (0..n_tools).map(|_| sample_tool(cfg, &mut rng)).collect();
        let mask: Vec<u8> = (0..h * w)
            .map(|i| {
                let p = [(i % w) as f64 + 0.5, (i / w) as f64 + 0.5];
                u8::from(tools.iter().any(|t| t.depth(p).is_some()))
            })
            .collect();
        let frac = mask.iter().map(|&v| v as usize).sum::<usize>() as f64 / (w * h) as f64;
        if (lo..=hi).contains(&frac) {
            break (tools, mask);
        }
    };

    let noise = Normal::new(0.0, 0.015).expect("valid std");
    let n = w * h;
    let mut data = vec![0.0f32; 3 * n];
    for i in 0..n {
        let p = [(i % w) as f64 + 0.5, (i / w) as f64 + 0.5];
        let texture: f64 = waves
            .iter()
            .map(|(k, phase, amp)| amp * (k[0] * p[0] + k[1] * p[1] + phase).sin())
            .sum();
        let mut rgb = [base[0] + texture, base[1] + 0.6 * texture, base[2] + 0.5 * texture];
        // later tools are drawn on top
        if let Some((tool, depth)) = tools.iter().rev().find_map(|t| t.depth(p).map(|d| (t, d))) {
            let shade = tool.tone * (0.6 + 0.4 * (depth * std::f64::consts::FRAC_PI_2).sin());
            rgb = [shade, shade, shade * 1.03];
        }
        if rng.random::<f64>() < cfg.specular_noise_prob {
            rgb = [1.0, 1.0, 1.0];
        }
        for c in 0..3 {
            data[c * n + i] = (rgb[c] + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Ok((Image::from_raw(w, h, data), Mask::from_raw(w, h, mask)))
}

/// What [`generate_dataset`] wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub images: Vec<PathBuf>,
    pub masks: Vec<PathBuf>,
    pub foreground_fractions: Vec<f64>,
}

impl SynthSummary {
    pub fn mean_foreground(&self) -> f64 {
        self.foreground_fractions.iter().sum::<f64>() / self.foreground_fractions.len() as f64
    }
}

fn stem(index: usize) -> String {
    format!("synth_{index:05}")
}

fn make_dirs(out_dir: &Path, masks: bool) -> Result<()> {
    let mut dirs = vec![out_dir.join("images")];
    if masks {
        dirs.push(out_dir.join("masks"));
    }
    for d in dirs {
        fs::create_dir_all(&d).map_err(|e| MmsError::io(&d, e))?;
    }
    Ok(())
}

/// Writes `n_images` pairs as `out_dir/images/synth_NNNNN.png` and
/// `out_dir/masks/synth_NNNNN.png`.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    make_dirs(out_dir, true)?;
    let rows: Vec<(PathBuf, PathBuf, f64)> = (0..cfg.n_images)
        .into_par_iter()
        .map(|i| {
            let (image, mask) = render(cfg, i)?;
            let ip = out_dir.join("images").join(format!("{}.png", stem(i)));
            let mp = out_dir.join("masks").join(format!("{}.png", stem(i)));
            image.save(&ip)?;
            mask.save(&mp)?;
            let frac = mask.foreground() as f64 / (cfg.width * cfg.height) as f64;
            Ok((ip, mp, frac))
        })
        .collect::<Result<_>>()?;
    let mut summary = SynthSummary {
        images: Vec::with_capacity(rows.len()),
        masks: Vec::with_capacity(rows.len()),
        foreground_fractions: Vec::with_capacity(rows.len()),
    };
    for (ip, mp, f) in rows {
        summary.images.push(ip);
        summary.masks.push(mp);
        summary.foreground_fractions.push(f);
    }
    Ok(summary)
}

/// Writes `per_image` photometric variants of every base image, without masks, as
/// `out_dir/images/synth_NNNNN_vK.png`. Returns the number written.
pub fn generate_unlabeled_variants(cfg: &SynthConfig, per_image: usize, out_dir: &Path) -> Result<usize> {
    cfg.validate()?;
    if per_image == 0 {
        return Err(MmsError::Parameter("per_image must be at least 1".into()));
    }
    make_dirs(out_dir, false)?;
    (0..cfg.n_images * per_image)
        .into_par_iter()
        .map(|k| {
            let (i, v) = (k / per_image, k % per_image);
            let (base, _) = render(cfg, i)?;
            let variant = photometric_variant(&base, &mut rng_for(&[cfg.seed, i as u64, v as u64, 0x5641_5249]));
            variant.save(&out_dir.join("images").join(format!("{}_v{v}.png", stem(i))))
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(cfg.n_images * per_image)
}

fn photometric_variant(base: &Image, rng: &mut ChaCha8Rng) -> Image {
    let gain: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.8..1.2));
    let offset: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
    let noise = Normal::new(0.0f32, 0.03).expect("valid std");
    let n = base.width() * base.height();
    let data = base
        .data()
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let c = j / n;
            (v * gain[c] + offset[c] + noise.sample(rng)).clamp(0.0, 1.0)
        })
        .collect();
    Image::from_raw(base.width(), base.height(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scan_dataset;

    fn components(mask: &Mask) -> usize {
        let (w, h) = (mask.width(), mask.height());
        let mut seen = vec![false; w * h];
        let mut count = 0;
        for start in 0..w * h {
            if mask.data()[start] == 0 || seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                let mut push = |j: usize| {
                    if mask.data()[j] == 1 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
            }
        }
        count
    }

    #[test]
    fn writes_valid_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_dataset(&SynthConfig::new(8, 64, 64, 7), dir.path()).unwrap();
        assert_eq!(s.images.len(), 8);
        for (mp, f) in s.masks.iter().zip(&s.foreground_fractions) {
            let raw = ::image::open(mp).unwrap().to_luma8();
            assert!(raw.pixels().all(|p| p[0] == 0 || p[0] == 255));
            assert!((0.02..=0.40).contains(f), "{f}");
        }
        let listing = scan_dataset(dir.path()).unwrap();
        assert_eq!((listing.labeled.len(), listing.unlabeled.len()), (8, 0));
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = SynthConfig::new(3, 32, 48, 2);
        let sa = generate_dataset(&cfg, a.path()).unwrap();
        let sb = generate_dataset(&cfg, b.path()).unwrap();
        for (x, y) in sa.images.iter().chain(&sa.masks).zip(sb.images.iter().chain(&sb.masks)) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
    }

    #[test]
    fn single_tool_is_one_component() {
        let cfg = SynthConfig {
            tools_per_image: [1, 1],
            tool_width: [4, 4],
            ..SynthConfig::new(20, 64, 64, 3)
        };
        for i in 0..cfg.n_images {
            let (_, mask) = render(&cfg, i).unwrap();
            assert_eq!(components(&mask), 1, "image {i}");
        }
    }

    #[test]
    fn foreground_distribution() {
        let cfg = SynthConfig::new(100, 64, 64, 11);
        let fracs: Vec<f64> = (0..100)
            .map(|i| render(&cfg, i).unwrap().1.foreground() as f64 / 4096.0)
            .collect();
        let mean = fracs.iter().sum::<f64>() / 100.0;
        assert!((0.05..=0.30).contains(&mean), "{mean}");
    }

    #[test]
    fn variants_differ_from_bases() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::new(8, 32, 32, 5);
        assert_eq!(generate_unlabeled_variants(&cfg, 4, dir.path()).unwrap(), 32);
        let listing = scan_dataset(dir.path()).unwrap();
        assert_eq!(listing.unlabeled.len(), 32);
        let (base, _) = render(&cfg, 0).unwrap();
        let variant = Image::load(&dir.path().join("images/synth_00000_v0.png")).unwrap();
        let mad: f32 = base.data().iter().zip(variant.data()).map(|(a, b)| (a - b).abs()).sum::<f32>()
            / base.data().len() as f32;
        assert!(mad > 0.0);
        let again = tempfile::tempdir().unwrap();
        generate_unlabeled_variants(&cfg, 4, again.path()).unwrap();
        assert_eq!(
            fs::read(dir.path().join("images/synth_00003_v2.png")).unwrap(),
            fs::read(again.path().join("images/synth_00003_v2.png")).unwrap()
        );
    }

    #[test]
    fn invalid_sizes_are_rejected() {
        assert!(SynthConfig::new(1, 60, 64, 0).validate().is_err());
        assert!(SynthConfig::new(0, 64, 64, 0).validate().is_err());
    }
}
