//! Complexity estimates for the two-way coders.
//!
//! Each model's per-user encoding and decoding cost is a short sum of
//! polynomial terms in the dimensions. A term is counted as multiply-accumulates,
//! turned into FLOPS with a factor of 2, and scaled by one constant per model
//! ([`ModelFamily::constant`]). The constants absorb everything the orders leave
//! out (layer counts, activations, normalization) and are fitted once on the
//! reference profile `K=6, M=3, T=18, h_c=h_b=32, h_r=50, L_E=2, L_D=3`, where
//! the resulting totals are about 0.60M, 2.48M and 2.62M FLOPS.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// FLOPS per multiply-accumulate.
pub const MAC_FLOPS: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Twlc,
    Twbaf,
    Twrnn,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 3] = [ModelFamily::Twlc, ModelFamily::Twbaf, ModelFamily::Twrnn];

    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Twlc => "twlc",
            ModelFamily::Twbaf => "twbaf",
            ModelFamily::Twrnn => "twrnn",
        }
    }

    /// Calibration constant multiplying every term of this model.
    pub fn constant(self) -> f64 {
        match self {
            ModelFamily::Twlc => 15.0,
            ModelFamily::Twbaf => 12.0,
            ModelFamily::Twrnn => 7.0,
        }
    }
}

/// Dimensions entering the estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimProfile {
    pub k: usize,
    pub m: usize,
    pub t: usize,
    pub h_c: usize,
    pub h_b: usize,
    pub h_r: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
}

impl DimProfile {
    /// The dimensions used for the reported experiments.
    pub fn reference() -> Self {
        Self {
            k: 6,
            m: 3,
            t: 18,
            h_c: 32,
            h_b: 32,
            h_r: 50,
            enc_layers: 2,
            dec_layers: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.k, self.m, self.t, self.h_c, self.h_b, self.h_r, self.enc_layers, self.dec_layers];
        if dims.contains(&0) {
            return Err(invalid("all dimensions must be positive"));
        }
        if !self.k.is_multiple_of(self.m) || !(self.t * self.m).is_multiple_of(self.k) {
            return Err(invalid(format!(
                "need M | K and integral T*M/K (K={}, M={}, T={})",
                self.k, self.m, self.t
            )));
        }
        Ok(())
    }

    /// Uses per sub-block, `T_M = T M / K`.
    pub fn t_m(&self) -> usize {
        self.t * self.m / self.k
    }

    /// Tokens per attention input, `K / M`.
    pub fn ell(&self) -> usize {
        self.k / self.m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encode,
    Decode,
}

/// One polynomial term, in multiply-accumulates before calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub stage: Stage,
    pub label: &'static str,
    pub macs: f64,
}

/// The terms of one user's encoder and decoder.
pub fn terms(model: ModelFamily, p: &DimProfile) -> Result<Vec<Term>> {
    p.validate()?;
    let f = |x: usize| x as f64;
    let (k, m, t, tm, ell) = (f(p.k), f(p.m), f(p.t), f(p.t_m()), f(p.ell()));
    let classes = 2f64.powi(p.m as i32);
    let term = |stage, label, macs| Term { stage, label, macs };
    use Stage::*;
    Ok(match model {
        ModelFamily::Twlc => {
            let h = f(p.h_c);
            vec![
                term(Encode, "T h_c (M + T_M)", t * h * (m + tm)),
                term(Encode, "h_c^2", h * h),
                term(Decode, "(K/M) h_c (M + T_M)", k / m * h * (m + tm)),
                term(Decode, "h_c^2", h * h),
                term(Decode, "h_c 2^M", h * classes),
            ]
        }
        ModelFamily::Twbaf => {
            let h = f(p.h_b);
            vec![
                term(Encode, "T_M L_E l h_b^2", tm * f(p.enc_layers) * ell * h * h),
                term(Encode, "T_M l h_b (T_M + M)", tm * ell * h * (tm + m)),
                term(Decode, "L_D l h_b^2", f(p.dec_layers) * ell * h * h),
                term(Decode, "l h_b (M + T_M)", ell * h * (m + tm)),
                term(Decode, "2^(M+1) l h_b", 2.0 * classes * ell * h),
            ]
        }
        ModelFamily::Twrnn => {
            let h = f(p.h_r);
            vec![
                term(Encode, "T h_r^2", t * h * h),
                term(Encode, "M h_r", m * h),
                term(Decode, "(K/M) T_M h_r^2", k / m * tm * h * h),
                term(Decode, "(K/M) T_M M h_r", k / m * tm * m * h),
                term(Decode, "(K/M) 2^M h_r", k / m * classes * h),
            ]
        }
    })
}

/// FLOPS of one user's encoder and decoder, and the total over both users.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub encode: f64,
    pub decode: f64,
    pub total: f64,
}

pub fn estimate(model: ModelFamily, p: &DimProfile) -> Result<Estimate> {
    let scale = MAC_FLOPS * model.constant();
    let mut est = Estimate {
        encode: 0.0,
        decode: 0.0,
        total: 0.0,
    };
    for t in terms(model, p)? {
        match t.stage {
            Stage::Encode => est.encode += scale * t.macs,
            Stage::Decode => est.decode += scale * t.macs,
        }
    }
    est.total = 2.0 * (est.encode + est.decode);
    Ok(est)
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub model: ModelFamily,
    pub k: usize,
    pub m: usize,
    pub t: usize,
    pub encode: f64,
    pub decode: f64,
    pub total: f64,
}

/// Three rows (one per model) for every profile.
pub fn report(profiles: &[DimProfile]) -> Result<Vec<FlopsRow>> {
    let mut rows = Vec::with_capacity(3 * profiles.len());
    for p in profiles {
        for model in ModelFamily::ALL {
            let e = estimate(model, p)?;
            rows.push(FlopsRow {
                model,
                k: p.k,
                m: p.m,
                t: p.t,
                encode: e.encode,
                decode: e.decode,
                total: e.total,
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[FlopsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_profile() {
        let p = DimProfile {
            k: 1,
            m: 1,
            t: 1,
            h_c: 1,
            h_b: 1,
            h_r: 1,
            enc_layers: 1,
            dec_layers: 1,
        };
        // encoder 1*1*2 + 1 = 3 MACs, decoder 2 + 1 + 2 = 5 MACs
        let e = estimate(ModelFamily::Twlc, &p).unwrap();
        assert_eq!(e.encode, 90.0);
        assert_eq!(e.decode, 150.0);
        assert_eq!(e.total, 480.0);
    }

    #[test]
    fn reference_raw_counts() {
        let p = DimProfile::reference();
        let raw = |m| terms(m, &p).unwrap().iter().map(|t| t.macs).sum::<f64>();
        assert_eq!(raw(ModelFamily::Twlc), 9984.0);
        assert_eq!(raw(ModelFamily::Twbaf), 51712.0);
        assert_eq!(raw(ModelFamily::Twrnn), 93650.0);
    }

    #[test]
    fn bad_profiles() {
        let mut p = DimProfile::reference();
        p.m = 4;
        assert!(estimate(ModelFamily::Twlc, &p).is_err());
        let mut p = DimProfile::reference();
        p.h_c = 0;
        assert!(estimate(ModelFamily::Twlc, &p).is_err());
    }

    #[test]
    fn report_rows() {
        assert!(report(&[]).unwrap().is_empty());
        let rows = report(&[DimProfile::reference()]).unwrap();
        assert_eq!(rows.len(), 3);
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("model,k,m,t,encode,decode,total\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
