//! Central finite differences for checking reverse-mode gradients.
//!
//! Only forward evaluations are used here, so the estimate is independent of
//! every backward rule on the tape.

/// Estimates `d f / d x_i` for each `i` in `coords` with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Richardson extrapolation of two central differences at `h` and `h / 2`,
/// accurate to fourth order in `h`.
pub fn richardson_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    let coarse = central_difference(&mut f, x, coords, h);
    let fine = central_difference(&mut f, x, coords, h / 2.0);
    coarse.iter().zip(&fine).map(|(c, f)| (4.0 * f - c) / 3.0).collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors, with a floor on the
/// denominator so that two vanishing gradients compare equal.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let d = central_difference(|x| x[0].powi(3) + x[1], &[2.0, 5.0], &[0, 1], 1e-5);
        assert!((d[0] - 12.0).abs() < 1e-6);
        assert!((d[1] - 1.0).abs() < 1e-8);
        assert!(relative_error(&d, &[12.0, 1.0]) < 1e-7);
        let r = richardson_difference(|x| x[0].powi(5), &[1.5], &[0], 1e-2);
        assert!((r[0] - 5.0 * 1.5f64.powi(4)).abs() < 1e-6);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
