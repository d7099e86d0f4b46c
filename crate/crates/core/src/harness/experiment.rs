//! Config-driven train and evaluate pipelines.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::models::TwoWaySystem;
use crate::training::{train, TrainConfig, TrainOutcome};

use super::coders::{LearnedCoder, OneWayPair, PolarCoder, SubBlockCoder};
use super::eval::{evaluate_grid, ood_sweep, BlerReport, EvalConfig};

/// How the total channel uses are shared between the two users.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparison {
    /// Both users send at once; sub-blocks of `M = K/2` bits over `T/2`
    /// uses, so `R = K/T`.
    TwoWay,
    /// Each direction gets `T/2` uses for the whole message, so `R = 2K/T`.
    OneWay,
}

/// Rate bookkeeping checked against the model shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateCheck {
    pub mode: Comparison,
    /// Total channel uses of the exchange.
    pub total_uses: usize,
}

/// Evaluation grid and stopping rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// `(snr1_db, snr2_db)` pairs; empty means the training point.
    #[serde(default)]
    pub grid: Vec<(f64, f64)>,
    #[serde(flatten)]
    pub config: EvalConfig,
}

/// Fixed-model sweep over `SNR_2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSection {
    pub snr1_db: f64,
    pub snr2_db: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Train before evaluating; otherwise the checkpoint must exist.
    #[serde(default = "yes")]
    pub train: bool,
    /// Checkpoint file, relative to the output directory. Defaults to
    /// `<name>.ckpt`; a one-way pair stores `<stem>_fwd` and `<stem>_bwd`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Run a one-way model in both directions, one session each.
    #[serde(default)]
    pub one_way_pair: bool,
    #[serde(default)]
    pub rate: Option<RateCheck>,
    pub model: TrainConfig,
    pub eval: EvalSection,
    #[serde(default)]
    pub ood: Option<OodSection>,
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn is_pair(&self) -> bool {
        self.one_way_pair
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid experiment name {:?}", self.name)));
        }
        self.model.validate()?;
        self.eval.config.validate()?;
        if self.one_way_pair && !self.model.kind.is_one_way() {
            return Err(Error::Config("one_way_pair needs a one-way model kind".into()));
        }
        if let Some(r) = &self.rate {
            let m = &self.model;
            let ok = match r.mode {
                Comparison::TwoWay => {
                    !m.kind.is_one_way() && 2 * m.m == m.k && m.t == r.total_uses && 2 * m.uses_per_subblock() == r.total_uses
                }
                Comparison::OneWay => self.one_way_pair && m.m == m.k && 2 * m.t == r.total_uses,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "{:?} rate accounting needs {} (got kind {}, K={}, M={}, T={} against {} total uses)",
                    r.mode,
                    match r.mode {
                        Comparison::TwoWay => "a two-way model with M = K/2 over T/2 uses per sub-block",
                        Comparison::OneWay => "a one-way pair with M = K over T/2 uses",
                    },
                    m.kind,
                    m.k,
                    m.m,
                    m.t,
                    r.total_uses
                )));
            }
        }
        if let Some(o) = &self.ood {
            if o.snr2_db.is_empty() {
                return Err(Error::Config("ood.snr2_db is empty".into()));
            }
        }
        Ok(())
    }

    /// Effective rate in bits per channel use per user.
    pub fn rate(&self) -> f64 {
        let m = &self.model;
        let total = if self.is_pair() { 2 * m.t } else { m.t };
        m.k as f64 / total as f64
    }

    pub fn grid(&self) -> Vec<(f64, f64)> {
        if self.eval.grid.is_empty() {
            vec![(self.model.snr1_db, self.model.snr2_db)]
        } else {
            self.eval.grid.clone()
        }
    }

    /// Training config of the session carrying user 2's message.
    pub fn backward_model(&self) -> TrainConfig {
        let mut c = self.model.clone();
        std::mem::swap(&mut c.snr1_db, &mut c.snr2_db);
        c.seed = c.seed.wrapping_add(1);
        c
    }

    /// Checkpoint paths under `out`: one, or forward and backward for a pair.
    pub fn checkpoint_paths(&self, out: &Path) -> Vec<PathBuf> {
        let base = out.join(self.checkpoint.clone().unwrap_or_else(|| format!("{}.ckpt", self.name).into()));
        if !self.is_pair() {
            return vec![base];
        }
        let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let ext = base.extension().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "ckpt".into());
        ["fwd", "bwd"]
            .iter()
            .map(|d| base.with_file_name(format!("{stem}_{d}.{ext}")))
            .collect()
    }

    fn train_configs(&self) -> Vec<TrainConfig> {
        if self.is_pair() {
            vec![self.model.clone(), self.backward_model()]
        } else {
            vec![self.model.clone()]
        }
    }

    /// Overrides training and evaluation seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.eval.config.seed = seed;
        self
    }
}

/// What [`run_experiment`] produced.
#[derive(Debug)]
pub struct ExperimentOutput {
    pub trained: Vec<TrainOutcome>,
    pub report: BlerReport,
    pub ood: Option<BlerReport>,
    pub files: Vec<PathBuf>,
}

fn load_system(path: &Path, cfg: &TrainConfig) -> Result<TwoWaySystem<f32>> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist and training is disabled",
            path.display()
        )));
    }
    let ck = Checkpoint::load(path)?;
    if ck.fingerprint != cfg.fingerprint() {
        return Err(Error::Checkpoint(format!(
            "{} was trained with a different configuration (fingerprint {} vs {})",
            path.display(),
            ck.fingerprint,
            cfg.fingerprint()
        )));
    }
    TwoWaySystem::from_checkpoint(&ck)
}

/// Trains (optionally), or loads, the experiment's systems. Training writes
/// checkpoints and curves under `out`.
pub fn prepare(cfg: &ExperimentConfig, out: &Path, files: &mut Vec<PathBuf>) -> Result<(Vec<TwoWaySystem<f32>>, Vec<TrainOutcome>)> {
    std::fs::create_dir_all(out)?;
    let paths = cfg.checkpoint_paths(out);
    let mut systems = Vec::new();
    let mut trained = Vec::new();
    for (i, (tc, path)) in cfg.train_configs().into_iter().zip(&paths).enumerate() {
        if cfg.train {
            let outcome = train(&tc)?;
            outcome.checkpoint()?.save(path)?;
            let suffix = if paths.len() > 1 { ["_fwd", "_bwd"][i] } else { "" };
            let curve = out.join(format!("{}{suffix}_curve.csv", cfg.name));
            outcome.write_curve(&curve)?;
            files.extend([path.clone(), curve]);
            systems.push(outcome.best.clone());
            trained.push(outcome);
        } else {
            systems.push(load_system(path, &tc)?);
        }
    }
    Ok((systems, trained))
}

pub fn coder_for(cfg: &ExperimentConfig, mut systems: Vec<TwoWaySystem<f32>>) -> Result<Box<dyn SubBlockCoder>> {
    Ok(if cfg.is_pair() {
        let backward = systems.pop().expect("pair has two systems");
        let forward = systems.pop().expect("pair has two systems");
        Box::new(OneWayPair::new(forward, backward)?)
    } else {
        Box::new(LearnedCoder::new(systems.pop().expect("one system"))?)
    })
}

fn fingerprints(cfg: &ExperimentConfig) -> String {
    cfg.train_configs()
        .iter()
        .map(|c| c.fingerprint())
        .collect::<Vec<_>>()
        .join(",")
}

fn write_report(report: &BlerReport, out: &Path, stem: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let csv = out.join(format!("{stem}.csv"));
    let json = out.join(format!("{stem}.json"));
    report.write_csv(&csv)?;
    report.write_metadata(&json)?;
    files.extend([csv, json]);
    Ok(())
}

/// Evaluates the experiment's coder over its grid, writing
/// `<name>_eval.csv` and its metadata sidecar.
pub fn run_eval(cfg: &ExperimentConfig, coder: &dyn SubBlockCoder, out: &Path, files: &mut Vec<PathBuf>) -> Result<BlerReport> {
    let report = evaluate_grid(coder, cfg.model.k, &cfg.grid(), cfg.model.power(), &cfg.eval.config, Some(fingerprints(cfg)))?;
    write_report(&report, out, &format!("{}_eval", cfg.name), files)?;
    Ok(report)
}

/// Runs the experiment's OOD sweep, if it has one, into `<name>_ood.csv`.
pub fn run_ood(cfg: &ExperimentConfig, coder: &dyn SubBlockCoder, out: &Path, files: &mut Vec<PathBuf>) -> Result<Option<BlerReport>> {
    let Some(o) = &cfg.ood else { return Ok(None) };
    let report = ood_sweep(
        coder,
        cfg.model.k,
        o.snr1_db,
        &o.snr2_db,
        cfg.model.power(),
        &cfg.eval.config,
        Some(fingerprints(cfg)),
    )?;
    write_report(&report, out, &format!("{}_ood", cfg.name), files)?;
    Ok(Some(report))
}

/// Open-loop polar baseline over the experiment's grid, with each user
/// sending a `(T, K)` code over the total channel uses.
pub fn run_polar(cfg: &ExperimentConfig, out: &Path, files: &mut Vec<PathBuf>) -> Result<BlerReport> {
    let t = cfg.rate.as_ref().map(|r| r.total_uses).unwrap_or(cfg.model.t);
    let coder = PolarCoder {
        k: cfg.model.k,
        t,
        construction_seed: cfg.eval.config.seed,
    };
    let report = evaluate_grid(&coder, cfg.model.k, &cfg.grid(), cfg.model.power(), &cfg.eval.config, None)?;
    write_report(&report, out, &format!("{}_polar", cfg.name), files)?;
    Ok(report)
}

/// Trains (if enabled), evaluates, and runs the OOD sweep (if configured).
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut files = Vec::new();
    let (systems, trained) = prepare(cfg, out, &mut files)?;
    let coder = coder_for(cfg, systems)?;
    let report = run_eval(cfg, coder.as_ref(), out, &mut files)?;
    let ood = run_ood(cfg, coder.as_ref(), out, &mut files)?;
    Ok(ExperimentOutput {
        trained,
        report,
        ood,
        files,
    })
}
