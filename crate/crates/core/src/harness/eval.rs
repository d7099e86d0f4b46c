//! Monte Carlo block error rate estimation.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::channel::ChannelConfig;
use crate::error::{invalid, Error, Result};
use crate::knowledge::{merge_subblocks, split_subblocks};
use crate::rng::{substream, Domain};

use super::coders::SubBlockCoder;
use super::stats::Tally;

/// Stopping rule and seeding of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub min_trials: u64,
    pub max_trials: u64,
    /// Stop once every active user's Wilson half width is at most this
    /// fraction of its estimate.
    pub target_rel_ci: f64,
    /// Messages per work unit.
    pub chunk: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            min_trials: 10_000,
            max_trials: 10_000_000,
            target_rel_ci: 0.1,
            chunk: 4096,
            seed: 0,
            workers: 1,
        }
    }
}

impl EvalConfig {
    /// Exactly `trials` messages, no adaptive stopping.
    pub fn fixed(trials: u64, seed: u64) -> Self {
        Self {
            min_trials: trials,
            max_trials: trials,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_trials == 0 || self.min_trials > self.max_trials {
            return Err(Error::Config(format!(
                "need 0 < min_trials <= max_trials, got {} and {}",
                self.min_trials, self.max_trials
            )));
        }
        if self.chunk == 0 || self.workers == 0 {
            return Err(Error::Config("chunk and workers must be positive".into()));
        }
        if !(self.target_rel_ci > 0.0) {
            return Err(Error::Config("target_rel_ci must be positive".into()));
        }
        Ok(())
    }
}

/// Result at one SNR pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlerPoint {
    pub snr1_db: f64,
    pub snr2_db: f64,
    pub bler: [f64; 2],
    pub errors: [u64; 2],
    pub trials: u64,
    /// Wilson 95% half widths per user.
    pub ci: [f64; 2],
}

impl BlerPoint {
    pub fn sum_bler(&self) -> f64 {
        self.bler[0] + self.bler[1]
    }

    /// Half width for the sum, taken as the sum of the users' half widths.
    pub fn sum_ci(&self) -> f64 {
        self.ci[0] + self.ci[1]
    }
}

/// Draws full `k`-bit messages, runs them as sub-block episodes and counts
/// whole-message errors for messages `first .. first + n`.
fn run_chunk(coder: &dyn SubBlockCoder, k: usize, channel: &ChannelConfig, seed: u64, first: u64, n: usize) -> Result<[u64; 2]> {
    let active = coder.active();
    let per_episode = coder.sub_block_bits() * coder.tokens();
    let episodes_per_message = (k / per_episode) as u64;
    let mut messages: [Vec<Vec<u8>>; 2] = Default::default();
    let mut bits: [Vec<u8>; 2] = Default::default();
    for trial in first..first + n as u64 {
        let mut rng = substream(seed, Domain::EvalBits, trial, 0);
        for i in 0..2 {
            let msg: Vec<u8> = if active[i] {
                (0..k).map(|_| rng.gen_range(0..2u8)).collect()
            } else {
                vec![0; k]
            };
            let blocks = split_subblocks(&msg, coder.sub_block_bits())?;
            bits[i].extend(merge_subblocks(&blocks));
            messages[i].push(msg);
        }
    }
    let decoded = coder.decode(channel, seed, first * episodes_per_message, &bits)?;
    let mut errors = [0u64; 2];
    for i in 0..2 {
        if !active[i] {
            continue;
        }
        let d = decoded[i]
            .as_ref()
            .ok_or_else(|| invalid(format!("coder returned no decision for active user {}", i + 1)))?;
        if d.len() != bits[i].len() {
            return Err(invalid("decoded length differs from the sent bits"));
        }
        for (msg, got) in messages[i].iter().zip(d.chunks(k)) {
            let got = merge_subblocks(&split_subblocks(got, coder.sub_block_bits())?);
            if &got != msg {
                errors[i] += 1;
            }
        }
    }
    Ok(errors)
}

/// Estimates both users' block error rates over messages of `k` bits.
///
/// Work is split into chunks of consecutive messages whose randomness is
/// keyed by message index, so results depend only on the seed and on the
/// number of workers (which sets how often the stopping rule is checked).
pub fn evaluate(coder: &dyn SubBlockCoder, k: usize, channel: &ChannelConfig, cfg: &EvalConfig) -> Result<BlerPoint> {
    cfg.validate()?;
    let per_episode = coder.sub_block_bits() * coder.tokens();
    if k == 0 || !k.is_multiple_of(per_episode) {
        return Err(Error::InvalidInput(format!(
            "message length {k} is not a multiple of the coder's {per_episode} bits per episode"
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let active = coder.active();
    let mut tally = [Tally::default(); 2];
    let mut done = 0u64;
    while done < cfg.max_trials {
        let mut round = Vec::with_capacity(cfg.workers);
        let mut pos = done;
        for _ in 0..cfg.workers {
            if pos >= cfg.max_trials {
                break;
            }
            let n = (cfg.chunk as u64).min(cfg.max_trials - pos);
            round.push((pos, n as usize));
            pos += n;
        }
        let results: Vec<Result<[u64; 2]>> = pool.install(|| {
            round
                .par_iter()
                .map(|&(first, n)| run_chunk(coder, k, channel, cfg.seed, first, n))
                .collect()
        });
        for ((_, n), r) in round.iter().zip(results) {
            let e = r?;
            for i in 0..2 {
                if active[i] {
                    tally[i].add(e[i], *n as u64);
                }
            }
        }
        done = pos;
        let converged = (0..2)
            .filter(|&i| active[i])
            .all(|i| tally[i].relative_half_width() <= cfg.target_rel_ci);
        if done >= cfg.min_trials && converged {
            break;
        }
    }
    Ok(BlerPoint {
        snr1_db: channel.snr1_db,
        snr2_db: channel.snr2_db,
        bler: [tally[0].rate(), tally[1].rate()],
        errors: [tally[0].errors, tally[1].errors],
        trials: done,
        ci: [
            if active[0] { tally[0].half_width() } else { 0.0 },
            if active[1] { tally[1].half_width() } else { 0.0 },
        ],
    })
}

/// Evaluation of one coder over several SNR pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlerReport {
    pub model: String,
    pub k: usize,
    pub m: usize,
    pub t: usize,
    pub seed: u64,
    pub fingerprint: Option<String>,
    pub wall_seconds: f64,
    pub points: Vec<BlerPoint>,
}

/// One CSV row.
#[derive(Serialize)]
struct Row<'a> {
    snr1_db: f64,
    snr2_db: f64,
    bler_1: f64,
    bler_2: f64,
    sum_bler: f64,
    trials: u64,
    ci: f64,
    seed: u64,
    model: &'a str,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "T")]
    t: usize,
}

impl BlerReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.points {
            w.serialize(Row {
                snr1_db: p.snr1_db,
                snr2_db: p.snr2_db,
                bler_1: p.bler[0],
                bler_2: p.bler[1],
                sum_bler: p.sum_bler(),
                trials: p.trials,
                ci: p.sum_ci(),
                seed: self.seed,
                model: &self.model,
                k: self.k,
                m: self.m,
                t: self.t,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Run metadata sidecar (includes wall time, so it differs between runs).
    pub fn write_metadata(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = json!({
            "model": self.model,
            "K": self.k,
            "M": self.m,
            "T": self.t,
            "seed": self.seed,
            "fingerprint": self.fingerprint,
            "wall_seconds": self.wall_seconds,
            "points": self.points,
        });
        std::fs::write(path, serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }
}

/// Evaluates `coder` at every `(snr1, snr2)` pair in `grid`.
pub fn evaluate_grid(
    coder: &dyn SubBlockCoder,
    k: usize,
    grid: &[(f64, f64)],
    power: f64,
    cfg: &EvalConfig,
    fingerprint: Option<String>,
) -> Result<BlerReport> {
    if grid.is_empty() {
        return Err(Error::Config("SNR grid is empty".into()));
    }
    let start = Instant::now();
    let mut points = Vec::with_capacity(grid.len());
    for &(s1, s2) in grid {
        let ch = ChannelConfig::with_power(s1, s2, power, coder.total_uses(k))?;
        points.push(evaluate(coder, k, &ch, cfg)?);
    }
    Ok(BlerReport {
        model: coder.label(),
        k,
        m: coder.sub_block_bits(),
        t: coder.total_uses(k),
        seed: cfg.seed,
        fingerprint,
        wall_seconds: start.elapsed().as_secs_f64(),
        points,
    })
}

/// Evaluates a fixed model as a function of `SNR_2` with `SNR_1` held;
/// nothing is retrained.
pub fn ood_sweep(
    coder: &dyn SubBlockCoder,
    k: usize,
    snr1_db: f64,
    snr2_grid: &[f64],
    power: f64,
    cfg: &EvalConfig,
    fingerprint: Option<String>,
) -> Result<BlerReport> {
    let grid: Vec<(f64, f64)> = snr2_grid.iter().map(|&s2| (snr1_db, s2)).collect();
    evaluate_grid(coder, k, &grid, power, cfg, fingerprint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::coders::{StubCoder, StubKind};

    fn stub(kind: StubKind) -> StubCoder {
        StubCoder { kind, m: 1, tokens: 3, k: 6 }
    }

    fn channel() -> ChannelConfig {
        ChannelConfig::with_power(0.0, 0.0, 1.0, 6).unwrap()
    }

    #[test]
    fn perfect_and_fault() {
        let cfg = EvalConfig::fixed(2000, 1);
        let p = evaluate(&stub(StubKind::Perfect), 6, &channel(), &cfg).unwrap();
        assert_eq!(p.sum_bler(), 0.0);
        for index in 0..6 {
            let p = evaluate(&stub(StubKind::Fault { index }), 6, &channel(), &cfg).unwrap();
            assert_eq!(p.bler, [1.0, 1.0]);
        }
    }

    #[test]
    fn adaptive_stop() {
        let cfg = EvalConfig {
            min_trials: 1000,
            max_trials: 1_000_000,
            target_rel_ci: 0.05,
            chunk: 500,
            ..EvalConfig::default()
        };
        let p = evaluate(&stub(StubKind::Coin), 6, &channel(), &cfg).unwrap();
        assert!(p.trials < 10_000, "{}", p.trials);
        assert!(p.ci[0] <= 0.05 * p.bler[0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(evaluate(&stub(StubKind::Perfect), 5, &channel(), &EvalConfig::fixed(10, 0)).is_err());
        let bad = EvalConfig {
            min_trials: 10,
            max_trials: 5,
            ..EvalConfig::default()
        };
        assert!(evaluate(&stub(StubKind::Perfect), 6, &channel(), &bad).is_err());
    }

    #[test]
    fn worker_count_does_not_change_fixed_runs() {
        let mut cfg = EvalConfig::fixed(3000, 7);
        cfg.chunk = 256;
        let a = evaluate(&stub(StubKind::Random), 6, &channel(), &cfg).unwrap();
        cfg.workers = 3;
        let b = evaluate(&stub(StubKind::Random), 6, &channel(), &cfg).unwrap();
        assert_eq!(a, b);
    }
}
