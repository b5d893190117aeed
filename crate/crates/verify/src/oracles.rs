//! Direct scalar-loop evaluations of every objective and metric, written from the
//! formulas alone. Images are row-major `h×w` slices; batches are slices of images.

use std::collections::HashSet;

pub const CLAMP: f64 = 1e-6;
pub const GAIN: f64 = 5.0;

/// Mean of the `k×k` window around `(y, x)`, reading clamped coordinates.
pub fn window_mean(img: &[f64], h: usize, w: usize, k: usize, y: usize, x: usize) -> f64 {
    let r = (k / 2) as isize;
    let mut sum = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
            let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
            sum += img[yy * w + xx];
        }
    }
    sum / (k * k) as f64
}

pub fn weight_map(img: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = 1.0 + GAIN * (window_mean(img, h, w, k, y, x) - img[y * w + x]).abs();
        }
    }
    out
}

/// Kernel used by the composite objectives: 31, or the largest odd size that fits.
pub fn objective_kernel(h: usize, w: usize) -> usize {
    let mut k = 31.min(h.min(w));
    if k % 2 == 0 {
        k -= 1;
    }
    k
}

pub fn bce_image(p: &[f64], y: &[f64], wt: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..p.len() {
        let pc = p[i].max(CLAMP).min(1.0 - CLAMP);
        num += wt[i] * (-(y[i] * pc.ln()) - (1.0 - y[i]) * (1.0 - pc).ln());
        den += wt[i];
    }
    num / den
}

pub fn iou_image(p: &[f64], y: &[f64], wt: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut union = 0.0;
    for i in 0..p.len() {
        inter += wt[i] * p[i] * y[i];
        union += wt[i] * (p[i] + y[i]);
    }
    1.0 - (inter + 1.0) / (union - inter + 1.0)
}

fn batch_mean(images: &[Vec<f64>], f: impl Fn(usize) -> f64) -> f64 {
    (0..images.len()).map(f).sum::<f64>() / images.len() as f64
}

pub fn weighted_bce(p: &[Vec<f64>], y: &[Vec<f64>], wt: &[Vec<f64>]) -> f64 {
    batch_mean(p, |b| bce_image(&p[b], &y[b], &wt[b]))
}

pub fn weighted_iou(p: &[Vec<f64>], y: &[Vec<f64>], wt: &[Vec<f64>]) -> f64 {
    batch_mean(p, |b| iou_image(&p[b], &y[b], &wt[b]))
}

/// IoU plus BCE of `p` against `t`, weighted by the map of `t`.
pub fn region(p: &[Vec<f64>], t: &[Vec<f64>], h: usize, w: usize) -> f64 {
    let k = objective_kernel(h, w);
    batch_mean(p, |b| {
        let wt = weight_map(&t[b], h, w, k);
        iou_image(&p[b], &t[b], &wt) + bce_image(&p[b], &t[b], &wt)
    })
}

pub fn sup_loss(p: &[Vec<f64>], y: &[Vec<f64>], h: usize, w: usize) -> f64 {
    region(p, y, h, w)
}

pub fn similarity_loss(p1: &[Vec<f64>], p2: &[Vec<f64>], h: usize, w: usize) -> f64 {
    0.5 * (region(p1, p2, h, w) + region(p2, p1, h, w))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Mean over queries of `log(exp(0) + Σ_i exp(q·k_i/τ))`.
pub fn info_nce_all_negative(q: &[Vec<f64>], k: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for qj in q {
        let mut s = 1.0;
        for ki in k {
            s += (dot(qj, ki) / tau).exp();
        }
        total += s.ln();
    }
    total / q.len() as f64
}

/// Fibers given as `[image][location][channel]`. Every other location of the opposite map
/// is a negative; both directions are averaged.
pub fn pixel_info_nce_all(f1: &[Vec<Vec<f64>>], f2: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    let direction = |a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]| {
        let mut total = 0.0;
        let mut count = 0usize;
        for img in 0..a.len() {
            let n = a[img].len();
            for s in 0..n {
                let q = &a[img][s];
                let pos = (dot(q, &b[img][s]) / tau).exp();
                let mut denom = pos;
                for j in 0..n {
                    if j != s {
                        denom += (dot(q, &b[img][j]) / tau).exp();
                    }
                }
                total += -(pos / denom).ln();
                count += 1;
            }
        }
        total / count as f64
    };
    0.5 * (direction(f1, f2) + direction(f2, f1))
}

pub fn total_loss(c: [f64; 4], lw: [f64; 4]) -> f64 {
    lw[0] * c[0] + lw[1] * c[1] + lw[2] * c[2] + lw[3] * c[3]
}

/// Dice score by set arithmetic on foreground indices.
pub fn dsc(pred: &[u8], gt: &[u8]) -> f64 {
    let a: HashSet<usize> = (0..pred.len()).filter(|&i| pred[i] == 1).collect();
    let b: HashSet<usize> = (0..gt.len()).filter(|&i| gt[i] == 1).collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
}

/// Mask of pixels where the mean of the two maps reaches the threshold.
pub fn ensemble_mask(p1: &[f64], p2: &[f64], threshold: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(p1.len());
    for i in 0..p1.len() {
        out.push(if (p1[i] + p2[i]) / 2.0 >= threshold { 1 } else { 0 });
    }
    out
}

pub fn relative_error(value: f64, reference: f64) -> f64 {
    let scale = value.abs().max(reference.abs());
    if scale == 0.0 {
        0.0
    } else {
        (value - reference).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let ones = vec![vec![1.0; 16]];
        let zeros = vec![vec![0.0; 16]];
        let w1 = vec![vec![1.0; 16]];
        assert!((weighted_iou(&ones, &zeros, &w1) - (1.0 - 1.0 / 17.0)).abs() < 1e-15);
        assert_eq!(weighted_iou(&ones, &ones, &w1), 0.0);
        assert_eq!(weighted_iou(&zeros, &zeros, &w1), 0.0);
        let half = vec![vec![0.5; 16]];
        assert!((weighted_bce(&half, &ones, &w1) - 2f64.ln()).abs() < 1e-15);
        assert!((info_nce_all_negative(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]], 0.1) - 2f64.ln()).abs() < 1e-15);
        assert!((total_loss([1.0, 2.0, 3.0, 4.0], [0.2, 0.2, 0.3, 0.3]) - 2.7).abs() < 1e-15);
        assert_eq!(dsc(&[1, 1, 0, 0], &[0, 1, 1, 0]), 0.5);
        assert_eq!(dsc(&[0, 0], &[0, 0]), 1.0);
    }

    #[test]
    fn orthonormal_fibers_closed_form() {
        let d = 9;
        let fibers: Vec<Vec<f64>> = (0..9)
            .map(|s| (0..d).map(|c| f64::from(u8::from(c == s))).collect())
            .collect();
        let v = pixel_info_nce_all(&[fibers.clone()], &[fibers], 0.5);
        assert!((v - (1.0 + 8.0 * (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((v - 0.733657).abs() < 1e-6);
    }

    #[test]
    fn weight_map_of_half_plane() {
        let (h, w) = (8, 8);
        let img: Vec<f64> = (0..h * w).map(|i| f64::from(u8::from(i % w < 4))).collect();
        let m = weight_map(&img, h, w, 3);
        assert_eq!(m[0], 1.0);
        assert!((m[3] - (1.0 + 5.0 / 3.0)).abs() < 1e-12);
        assert!((m[4] - (1.0 + 5.0 / 3.0)).abs() < 1e-12);
    }
}
