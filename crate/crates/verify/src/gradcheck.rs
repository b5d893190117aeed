//! Central finite differences.

pub const STEP: f64 = 1e-4;

/// Below this magnitude a gradient counts as zero.
pub const FLOOR: f64 = 1e-12;

pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().map(f64::abs).fold(0.0, f64::max)
}

/// `max_i |a_i − n_i| / max(max_i |a_i|, max_i |n_i|)`: the largest deviation relative to the
/// gradient's scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let dev = max_abs(analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = max_abs(analytic.iter().copied()).max(max_abs(numeric.iter().copied()));
    if scale < FLOOR {
        dev
    } else {
        dev / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic() {
        let x = [0.3, -1.2, 2.0];
        let g = numeric_gradient(|v| v.iter().map(|t| t * t * t).sum(), &x, STEP);
        let exact: Vec<f64> = x.iter().map(|t| 3.0 * t * t).collect();
        assert!(max_relative_error(&exact, &g) < 1e-7);
        assert_eq!(max_relative_error(&[1.0, 0.0], &[1.0, 1e-4]), 1e-4);
        assert_eq!(max_relative_error(&[0.0], &[0.0]), 0.0);
    }
}
