//! Per-use symbol normalization and learned power allocation.

use crate::error::{Error, Result};
use crate::nn::{Bound, ParamId, ParameterSet, Real, Tape, Tensor, Var};

/// Variances below this are floored during normalization.
pub const VAR_FLOOR: f64 = 1e-6;

/// Relative deviation of `sum w^2` from `P * T_M` tolerated before the
/// weights are rescaled.
pub const WEIGHT_TOLERANCE: f64 = 1e-6;

/// How per-use statistics are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, differentiated through.
    Train,
    /// Stored statistics from a calibration pass, treated as constants.
    Frozen,
}

/// Column statistics observed at one channel use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UseStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Mean of the pre-activation that TWBAF centers before `tanh`.
    pub center: Vec<f64>,
}

/// Normalizes raw encoder outputs to zero mean and unit variance per channel
/// use and scales use `t` by a learned weight `w_t`.
///
/// The weights satisfy `sum_t w_t^2 = P * T_M`, so with unit-variance inputs
/// the average power per use is `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerReallocator {
    pub weights: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    pub center: ParamId,
    pub ready: ParamId,
    pub uses: usize,
    pub cols: usize,
    pub power: f64,
}

impl PowerReallocator {
    /// Weights start uniform at `sqrt(P)`.
    pub fn new<F: Real>(ps: &mut ParameterSet<F>, uses: usize, cols: usize, power: f64, trainable: bool) -> Result<Self> {
        let w = Tensor::full(&[uses], F::of(power.sqrt()));
        let weights = if trainable {
            ps.add("power.w", w)?
        } else {
            ps.add_buffer("power.w", w)?
        };
        Ok(Self {
            weights,
            mean: ps.add_buffer("power.mean", Tensor::zeros(&[uses, cols]))?,
            var: ps.add_buffer("power.var", Tensor::full(&[uses, cols], F::one()))?,
            center: ps.add_buffer("power.center", Tensor::zeros(&[uses, cols]))?,
            ready: ps.add_buffer("power.ready", Tensor::zeros(&[1]))?,
            uses,
            cols,
            power,
        })
    }

    pub fn is_calibrated<F: Real>(&self, ps: &ParameterSet<F>) -> bool {
        ps.value(self.ready).item() > F::zero()
    }

    fn stored<'a, F: Real>(&self, ps: &'a ParameterSet<F>, id: ParamId, t: usize) -> Result<&'a [F]> {
        if !self.is_calibrated(ps) {
            return Err(Error::InvalidInput(
                "frozen-mode normalization requested before any statistics were stored".into(),
            ));
        }
        Ok(ps.value(id).row(t))
    }

    /// TWBAF pre-activation: `tanh(x - E[x])` with the batch mean in train
    /// mode and the stored mean otherwise.
    pub fn center<F: Real>(
        &self,
        tape: &mut Tape<F>,
        ps: &ParameterSet<F>,
        t: usize,
        x: Var,
        mode: Mode,
        stats: &mut UseStats,
    ) -> Result<Var> {
        let centered = match mode {
            Mode::Train => {
                stats.center = crate::nn::tape::column_moments(tape.value(x)).0;
                tape.center_cols(x)?
            }
            Mode::Frozen => {
                let shift = self.stored(ps, self.center, t)?.to_vec();
                let ones = vec![F::one(); shift.len()];
                tape.affine_cols(x, &shift, &ones)?
            }
        };
        tape.tanh(centered)
    }

    /// Symbols for use `t` from raw outputs `x` (`batch x cols`).
    pub fn apply<F: Real>(
        &self,
        tape: &mut Tape<F>,
        ps: &ParameterSet<F>,
        bound: &Bound,
        t: usize,
        x: Var,
        mode: Mode,
        stats: &mut UseStats,
    ) -> Result<Var> {
        let z = match mode {
            Mode::Train => {
                let (mean, var) = crate::nn::tape::column_moments(tape.value(x));
                stats.mean = mean;
                stats.var = var;
                tape.standardize_cols(x, VAR_FLOOR)?
            }
            Mode::Frozen => {
                let shift = self.stored(ps, self.mean, t)?.to_vec();
                let mult: Vec<F> = self
                    .stored(ps, self.var, t)?
                    .iter()
                    .map(|v| F::of(1.0 / v.f64().max(VAR_FLOOR).sqrt()))
                    .collect();
                tape.affine_cols(x, &shift, &mult)?
            }
        };
        tape.scale_by_elem(z, bound.var(self.weights), t)
    }

    /// Stores averaged statistics from calibration batches and marks the
    /// reallocator as ready for frozen mode.
    pub fn store<F: Real>(&self, ps: &mut ParameterSet<F>, per_use: &[UseStats]) -> Result<()> {
        if per_use.len() != self.uses {
            return Err(Error::InvalidInput(format!(
                "expected statistics for {} uses, got {}",
                self.uses,
                per_use.len()
            )));
        }
        let flat = |f: &dyn Fn(&UseStats) -> &Vec<f64>, fill: f64| -> Vec<F> {
            per_use
                .iter()
                .flat_map(|s| {
                    let v = f(s);
                    (0..self.cols).map(move |c| F::of(v.get(c).copied().unwrap_or(fill)))
                })
                .collect()
        };
        *ps.value_mut(self.mean) = Tensor::new(vec![self.uses, self.cols], flat(&|s| &s.mean, 0.0))?;
        *ps.value_mut(self.var) = Tensor::new(vec![self.uses, self.cols], flat(&|s| &s.var, 1.0))?;
        *ps.value_mut(self.center) = Tensor::new(vec![self.uses, self.cols], flat(&|s| &s.center, 0.0))?;
        *ps.value_mut(self.ready) = Tensor::scalar(F::one());
        Ok(())
    }

    /// Rescales the weights onto `sum w^2 = P * T_M` when they have drifted
    /// by more than [`WEIGHT_TOLERANCE`]. Returns whether they were touched.
    pub fn project<F: Real>(&self, ps: &mut ParameterSet<F>) -> bool {
        let target = self.power * self.uses as f64;
        let w = ps.value_mut(self.weights);
        let total: f64 = w.data().iter().map(|x| x.f64() * x.f64()).sum();
        if total <= 0.0 || ((total - target) / target).abs() <= WEIGHT_TOLERANCE {
            return false;
        }
        let s = (target / total).sqrt();
        w.data_mut().iter_mut().for_each(|x| *x = F::of(x.f64() * s));
        true
    }

    pub fn weights<F: Real>(&self, ps: &ParameterSet<F>) -> Vec<f64> {
        ps.value(self.weights).to_f64()
    }
}

/// Averages per-use statistics over several calibration batches.
pub fn average_stats(batches: &[Vec<UseStats>]) -> Vec<UseStats> {
    let Some(first) = batches.first() else {
        return Vec::new();
    };
    let n = batches.len() as f64;
    let avg = |pick: &dyn Fn(&UseStats) -> &Vec<f64>, t: usize| -> Vec<f64> {
        let len = pick(&first[t]).len();
        (0..len)
            .map(|c| batches.iter().map(|b| pick(&b[t])[c]).sum::<f64>() / n)
            .collect()
    };
    (0..first.len())
        .map(|t| UseStats {
            mean: avg(&|s| &s.mean, t),
            var: avg(&|s| &s.var, t),
            center: avg(&|s| &s.center, t),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParameterSet<f64>, PowerReallocator) {
        let mut ps = ParameterSet::new();
        let r = PowerReallocator::new(&mut ps, 3, 1, 1.0, true).unwrap();
        (ps, r)
    }

    #[test]
    fn normalizes_and_weights_each_use() {
        let (ps, r) = setup();
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape).unwrap();
        let x = tape.input(Tensor::matrix(4, 1, vec![1.0, 3.0, 5.0, 7.0]).unwrap()).unwrap();
        let mut st = UseStats::default();
        let c = r.apply(&mut tape, &ps, &b, 0, x, Mode::Train, &mut st).unwrap();
        let v = tape.value(c).to_f64();
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let power: f64 = v.iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((power - 1.0).abs() < 1e-12);
        assert_eq!(st.mean, vec![4.0]);
        assert_eq!(st.var, vec![5.0]);
    }

    #[test]
    fn constant_column_stays_finite() {
        let (ps, r) = setup();
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape).unwrap();
        let x = tape.input(Tensor::full(&[5, 1], 2.0)).unwrap();
        let mut st = UseStats::default();
        let c = r.apply(&mut tape, &ps, &b, 1, x, Mode::Train, &mut st).unwrap();
        assert!(tape.value(c).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn frozen_mode_needs_stored_stats() {
        let (mut ps, r) = setup();
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape).unwrap();
        let x = tape.input(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap()).unwrap();
        let mut st = UseStats::default();
        assert!(r.apply(&mut tape, &ps, &b, 0, x, Mode::Frozen, &mut st).is_err());

        let stats = vec![
            UseStats {
                mean: vec![1.0],
                var: vec![4.0],
                center: vec![0.0],
            };
            3
        ];
        r.store(&mut ps, &stats).unwrap();
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape).unwrap();
        let x = tape.input(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap()).unwrap();
        let c = r.apply(&mut tape, &ps, &b, 0, x, Mode::Frozen, &mut st).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0, 0.5]);
    }

    #[test]
    fn projection_restores_budget() {
        let (mut ps, r) = setup();
        assert!(!r.project(&mut ps));
        *ps.value_mut(r.weights) = Tensor::new(vec![3], vec![2.0, 1.0, 0.5]).unwrap();
        assert!(r.project(&mut ps));
        let total: f64 = r.weights(&ps).iter().map(|w| w * w).sum();
        assert!((total - 3.0).abs() < 1e-12);
        let w = r.weights(&ps);
        assert!((w[0] / w[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn averaging() {
        let a = vec![UseStats {
            mean: vec![1.0],
            var: vec![2.0],
            center: vec![0.0],
        }];
        let b = vec![UseStats {
            mean: vec![3.0],
            var: vec![4.0],
            center: vec![1.0],
        }];
        let avg = average_stats(&[a, b]);
        assert_eq!(avg[0].mean, vec![2.0]);
        assert_eq!(avg[0].var, vec![3.0]);
        assert_eq!(avg[0].center, vec![0.5]);
    }
}
