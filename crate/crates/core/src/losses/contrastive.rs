//! InfoNCE objectives over classifier vectors (all-negative) and projector maps (pixel-wise).

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::types::{FeatureMapBatch, FeatureVectorBatch, NegativeKeys, PairLoss, Temperature};
use crate::error::{MmsError, Result};

/// Inputs whose rows drift further than this from unit norm are rejected.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-3;

/// Numerically stable `log(Σ exp(x_i))`.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn info_nce_all_negative(
    q: &FeatureVectorBatch,
    k: &FeatureVectorBatch,
    tau: Temperature,
) -> Result<f64> {
    Ok(info_nce_all_negative_with_grad(q, k, tau)?.value)
}

/// Mean over queries of `log(1 + Σ_i exp(q·k_i / τ))`: every key is a negative and the
/// positive term degenerates to `exp(0) = 1`.
///
/// `grad_a` is with respect to `q`, `grad_b` with respect to `k`.
pub fn info_nce_all_negative_with_grad(
    q: &FeatureVectorBatch,
    k: &FeatureVectorBatch,
    tau: Temperature,
) -> Result<PairLoss> {
    if k.rows() == 0 {
        return Err(MmsError::Parameter("all-negative InfoNCE needs at least one key".into()));
    }
    if q.rows() == 0 {
        return Err(MmsError::Parameter("all-negative InfoNCE needs at least one query".into()));
    }
    if q.dim() != k.dim() {
        return Err(MmsError::Validation(format!(
            "query dim {} differs from key dim {}",
            q.dim(),
            k.dim()
        )));
    }
    for (what, dev) in [("query", q.max_norm_deviation()), ("key", k.max_norm_deviation())] {
        if dev > UNIT_NORM_TOLERANCE {
            return Err(MmsError::Validation(format!(
                "{what} rows must be unit-normalized (norm off by {dev:.3e})"
            )));
        }
    }
    let t = tau.get();
    let (nq, nk, d) = (q.rows(), k.rows(), q.dim());
    let mut value = 0.0;
    let mut grad_q = vec![0.0; nq * d];
    let mut grad_k = vec![0.0; nk * d];
    let mut logits = vec![0.0; nk + 1];
    for j in 0..nq {
        let qj = q.row(j);
        logits[0] = 0.0;
        for i in 0..nk {
            logits[i + 1] = dot(qj, k.row(i)) / t;
        }
        let lse = log_sum_exp(&logits);
        value += lse;
        for i in 0..nk {
            let s = (logits[i + 1] - lse).exp() / t / nq as f64;
            let ki = k.row(i);
            for c in 0..d {
                grad_q[j * d + c] += s * ki[c];
                grad_k[i * d + c] += s * qj[c];
            }
        }
    }
    Ok(PairLoss {
        value: value / nq as f64,
        grad_a: grad_q,
        grad_b: grad_k,
    })
}

/// One direction of pixel InfoNCE with every other location as a negative, via dense
/// products. Returns the unscaled summed loss and accumulates scaled gradients.
#[allow(clippy::too_many_arguments)]
fn dense_direction(q: &[f64], k: &[f64], hw: usize, d: usize, t: f64, scale: f64, gq: &mut [f64], gk: &mut [f64]) -> f64 {
    let mut logits = vec![0.0; hw * hw];
    // logits = q · kᵀ / τ
    unsafe {
        matrixmultiply::dgemm(
            hw, d, hw, 1.0 / t,
            q.as_ptr(), d as isize, 1,
            k.as_ptr(), 1, d as isize,
            0.0, logits.as_mut_ptr(), hw as isize, 1,
        );
    }
    let mut value = 0.0;
    for s in 0..hw {
        let row = &mut logits[s * hw..(s + 1) * hw];
        let lse = log_sum_exp(row);
        value += lse - row[s];
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
        row[s] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale / t;
        }
    }
    // gq += P · k, gk += Pᵀ · q
    unsafe {
        matrixmultiply::dgemm(
            hw, hw, d, 1.0,
            logits.as_ptr(), hw as isize, 1,
            k.as_ptr(), d as isize, 1,
            1.0, gq.as_mut_ptr(), d as isize, 1,
        );
        matrixmultiply::dgemm(
            hw, hw, d, 1.0,
            logits.as_ptr(), 1, hw as isize,
            q.as_ptr(), d as isize, 1,
            1.0, gk.as_mut_ptr(), d as isize, 1,
        );
    }
    value
}

pub fn pixel_info_nce(
    f1: &FeatureMapBatch,
    f2: &FeatureMapBatch,
    tau: Temperature,
    k_neg: NegativeKeys,
    rng_seed: u64,
) -> Result<f64> {
    Ok(pixel_info_nce_with_grad(f1, f2, tau, k_neg, rng_seed)?.value)
}

/// Pixel-wise InfoNCE between two projector maps of the same images.
///
/// For each location the query is the fiber of one map, its positive is the fiber of the other
/// map at the same location, and its negatives are fibers of the other map at different
/// locations. Both directions are averaged. Negative sampling draws from a ChaCha8 stream
/// seeded with `rng_seed`, direction 1→2 first, images then locations in order.
pub fn pixel_info_nce_with_grad(
    f1: &FeatureMapBatch,
    f2: &FeatureMapBatch,
    tau: Temperature,
    k_neg: NegativeKeys,
    rng_seed: u64,
) -> Result<PairLoss> {
    if !f1.same_shape(f2) {
        return Err(MmsError::Validation(format!(
            "projector maps disagree in shape: {}x{}x{}x{} vs {}x{}x{}x{}",
            f1.batch(),
            f1.dim(),
            f1.height(),
            f1.width(),
            f2.batch(),
            f2.dim(),
            f2.height(),
            f2.width()
        )));
    }
    let hw = f1.locations();
    let negatives = match k_neg {
        NegativeKeys::All => hw.saturating_sub(1),
        NegativeKeys::Sampled(k) if k >= hw => {
            return Err(MmsError::Parameter(format!(
                "k_neg = {k} needs more than {hw} locations"
            )))
        }
        NegativeKeys::Sampled(0) => {
            return Err(MmsError::Parameter("k_neg must be positive".into()));
        }
        NegativeKeys::Sampled(k) => k,
    };
    if negatives == 0 {
        return Err(MmsError::Parameter(
            "pixel InfoNCE needs at least two locations".into(),
        ));
    }
    for (what, dev) in [("f1", f1.max_norm_deviation()), ("f2", f2.max_norm_deviation())] {
        if dev > UNIT_NORM_TOLERANCE {
            return Err(MmsError::Validation(format!(
                "{what} fibers must be unit-normalized (norm off by {dev:.3e})"
            )));
        }
    }

    let (bsz, d) = (f1.batch(), f1.dim());
    let t = tau.get();
    let scale = 0.5 / (bsz * hw) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut value = 0.0;
    // gradients in locations × dim layout per image, transposed back at the end
    let mut g1 = vec![0.0; bsz * hw * d];
    let mut g2 = vec![0.0; bsz * hw * d];

    let fibers1: Vec<Vec<f64>> = (0..bsz).map(|b| f1.fibers(b)).collect();
    let fibers2: Vec<Vec<f64>> = (0..bsz).map(|b| f2.fibers(b)).collect();

    let mut keys: Vec<usize> = Vec::with_capacity(negatives + 1);
    let mut logits = vec![0.0; negatives + 1];
    for direction in 0..2 {
        for b in 0..bsz {
            let (qf, kf) = if direction == 0 {
                (&fibers1[b], &fibers2[b])
            } else {
                (&fibers2[b], &fibers1[b])
            };
            let (gq, gk) = if direction == 0 {
                (&mut g1, &mut g2)
            } else {
                (&mut g2, &mut g1)
            };
            let off = b * hw * d;
            if negatives == hw - 1 {
                value += dense_direction(qf, kf, hw, d, t, scale, &mut gq[off..off + hw * d], &mut gk[off..off + hw * d]);
                continue;
            }
            for s in 0..hw {
                keys.clear();
                keys.push(s);
                keys.extend(
                    index::sample(&mut rng, hw - 1, negatives)
                        .into_iter()
                        .map(|j| if j >= s { j + 1 } else { j }),
                );
                let q = &qf[s * d..(s + 1) * d];
                for (slot, &j) in keys.iter().enumerate() {
                    logits[slot] = dot(q, &kf[j * d..(j + 1) * d]) / t;
                }
                let lse = log_sum_exp(&logits);
                value += lse - logits[0];
                for (slot, &j) in keys.iter().enumerate() {
                    let mut coeff = (logits[slot] - lse).exp();
                    if slot == 0 {
                        coeff -= 1.0;
                    }
                    let coeff = coeff * scale / t;
                    for c in 0..d {
                        gq[off + s * d + c] += coeff * kf[j * d + c];
                        gk[off + j * d + c] += coeff * q[c];
                    }
                }
            }
        }
    }

    let to_nchw = |g: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; g.len()];
        for b in 0..bsz {
            for s in 0..hw {
                for c in 0..d {
                    out[(b * d + c) * hw + s] = g[(b * hw + s) * d + c];
                }
            }
        }
        out
    };
    Ok(PairLoss {
        value: value * scale,
        grad_a: to_nchw(&g1),
        grad_b: to_nchw(&g2),
    })
}
