//! Binomial confidence intervals.

/// Normal quantile for a two-sided 95% interval.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval `(low, high)` for `errors` out of `trials`.
pub fn wilson(errors: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = errors as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if errors == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if errors == trials { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// Half the width of the Wilson interval.
pub fn wilson_half_width(errors: u64, trials: u64, z: f64) -> f64 {
    let (lo, hi) = wilson(errors, trials, z);
    (hi - lo) / 2.0
}

/// Running error count for one user.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub errors: u64,
    pub trials: u64,
}

impl Tally {
    pub fn add(&mut self, errors: u64, trials: u64) {
        self.errors += errors;
        self.trials += trials;
    }

    pub fn rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.errors as f64 / self.trials as f64
        }
    }

    pub fn half_width(&self) -> f64 {
        wilson_half_width(self.errors, self.trials, Z95)
    }

    /// Half width relative to the point estimate; infinite with no errors.
    pub fn relative_half_width(&self) -> f64 {
        if self.errors == 0 {
            f64::INFINITY
        } else {
            self.half_width() / self.rate()
        }
    }

    pub fn contains(&self, p: f64) -> bool {
        let (lo, hi) = wilson(self.errors, self.trials, Z95);
        lo <= p && p <= hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_interval() {
        // 10 of 100 at 95%: the textbook Wilson interval is [0.0552, 0.1744].
        let (lo, hi) = wilson(10, 100, Z95);
        assert!((lo - 0.05522).abs() < 1e-4, "{lo}");
        assert!((hi - 0.17437).abs() < 1e-4, "{hi}");
    }

    #[test]
    fn edges() {
        let (lo, hi) = wilson(0, 1000, Z95);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.004);
        let (lo, hi) = wilson(1000, 1000, Z95);
        assert_eq!(hi, 1.0);
        assert!(lo > 0.996);
        assert_eq!(wilson(0, 0, Z95), (0.0, 1.0));
    }

    #[test]
    fn tally() {
        let mut t = Tally::default();
        assert_eq!(t.relative_half_width(), f64::INFINITY);
        t.add(50, 100);
        assert_eq!(t.rate(), 0.5);
        assert!(t.contains(0.5));
        assert!(!t.contains(0.9));
    }
}
