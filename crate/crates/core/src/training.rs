//! Joint training of both users' coders.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::channel::{empirical_power, ChannelConfig, User};
use crate::error::{invalid, Error, Result};
use crate::knowledge::{bits_to_index, FeedbackMode};
use crate::models::{EpisodeBatch, Mode, ModelKind, ModelSpec, TwoWaySystem};
use crate::nn::checkpoint::fingerprint;
use crate::nn::{Adam, Checkpoint, LrSchedule, Tape};
use crate::rng::{substream, Domain};

/// Simplex entries may miss a sum of one by this much.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub warmup_steps: u64,
    pub decay_factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            warmup_steps: 0,
            decay_factor: 0.5,
            patience: 10,
            min_lr: 1e-6,
        }
    }
}

impl OptimConfig {
    /// Lower rate with warmup for the attention model.
    pub fn attention() -> Self {
        Self {
            lr: 1e-4,
            warmup_steps: 1000,
            ..Self::default()
        }
    }
}

/// Optional overrides of the per-kind network widths.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: Option<usize>,
    pub head_hidden: Option<usize>,
    pub heads: Option<usize>,
    pub enc_layers: Option<usize>,
    pub dec_layers: Option<usize>,
}

/// Everything one training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: ModelKind,
    /// Message length per user.
    pub k: usize,
    /// Sub-block length.
    pub m: usize,
    /// Channel uses for the whole message.
    pub t: usize,
    pub snr1_db: f64,
    pub snr2_db: f64,
    #[serde(default)]
    pub power_db: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    pub steps: u64,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_val_episodes")]
    pub val_episodes: usize,
    #[serde(default = "default_calib_episodes")]
    pub calib_episodes: usize,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub feedback: FeedbackMode,
    #[serde(default = "default_restarts")]
    pub max_restarts: usize,
}

fn default_batch() -> usize {
    512
}
fn default_eval_every() -> u64 {
    500
}
fn default_val_episodes() -> usize {
    10_000
}
fn default_calib_episodes() -> usize {
    50_000
}
fn default_restarts() -> usize {
    3
}

/// Episodes per tape during calibration and validation.
pub const EVAL_CHUNK: usize = 2048;

impl TrainConfig {
    pub fn new(kind: ModelKind, k: usize, m: usize, t: usize, snr1_db: f64, snr2_db: f64) -> Self {
        Self {
            kind,
            k,
            m,
            t,
            snr1_db,
            snr2_db,
            power_db: 0.0,
            batch: default_batch(),
            steps: 10_000,
            optim: if kind == ModelKind::Twbaf {
                OptimConfig::attention()
            } else {
                OptimConfig::default()
            },
            seed: 0,
            eval_every: default_eval_every(),
            val_episodes: default_val_episodes(),
            calib_episodes: default_calib_episodes(),
            arch: ArchConfig::default(),
            feedback: FeedbackMode::Raw,
            max_restarts: default_restarts(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || !self.k.is_multiple_of(self.m) {
            return Err(Error::Config(format!("sub-block length M={} must divide K={}", self.m, self.k)));
        }
        if self.t == 0 || !(self.t * self.m).is_multiple_of(self.k) {
            return Err(Error::Config(format!(
                "T*M/K must be a positive integer (T={}, M={}, K={})",
                self.t, self.m, self.k
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.eval_every == 0 || self.val_episodes == 0 || self.calib_episodes == 0 {
            return Err(Error::Config("evaluation cadence and sizes must be positive".into()));
        }
        if !self.snr1_db.is_finite() || !self.snr2_db.is_finite() || !self.power_db.is_finite() {
            return Err(Error::Config("SNRs and power must be finite".into()));
        }
        self.model_spec()?.validate()
    }

    /// Channel uses per sub-block, `T_M = T M / K`.
    pub fn uses_per_subblock(&self) -> usize {
        self.t * self.m / self.k
    }

    pub fn power(&self) -> f64 {
        crate::channel::db_to_linear(self.power_db)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let (m, tm) = (self.m, self.uses_per_subblock());
        let mut spec = match self.kind {
            ModelKind::Twlc => ModelSpec::twlc(m, tm),
            ModelKind::Alc => ModelSpec::alc(m, tm),
            ModelKind::Lc => ModelSpec::lc(m, tm),
            ModelKind::Twbaf => ModelSpec::twbaf(m, tm, self.k / m),
        };
        let a = &self.arch;
        spec.hidden = a.hidden.unwrap_or(spec.hidden);
        spec.head_hidden = a.head_hidden.unwrap_or(spec.head_hidden);
        spec.heads = a.heads.unwrap_or(spec.heads);
        spec.enc_layers = a.enc_layers.unwrap_or(spec.enc_layers);
        spec.dec_layers = a.dec_layers.unwrap_or(spec.dec_layers);
        spec.feedback = self.feedback;
        spec.power = self.power();
        spec.validate()?;
        Ok(spec)
    }

    pub fn channel(&self) -> Result<ChannelConfig> {
        ChannelConfig::with_power(self.snr1_db, self.snr2_db, self.power(), self.uses_per_subblock())
    }

    /// Hex digest identifying this configuration.
    pub fn fingerprint(&self) -> String {
        fingerprint(&serde_json::to_string(self).expect("config serializes"))
    }
}

/// Sum over users of `-log d_i[index(b_i)]`; a missing estimate drops its term.
pub fn episode_loss(estimates: [Option<&[f64]>; 2], bits: [&[u8]; 2]) -> Result<f64> {
    let mut total = 0.0;
    for (d, b) in estimates.iter().zip(bits) {
        let Some(d) = d else { continue };
        let sum: f64 = d.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE || d.iter().any(|&p| !(p >= -SIMPLEX_TOLERANCE)) {
            return Err(invalid(format!("estimate is not on the simplex (sum {sum})")));
        }
        let k = bits_to_index(b)?;
        let p = *d
            .get(k)
            .ok_or_else(|| invalid(format!("message index {k} outside a simplex of {}", d.len())))?;
        total -= p.max(f64::MIN_POSITIVE).ln();
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One optimizer step on a fresh batch.
pub fn train_step(sys: &mut TwoWaySystem<f32>, adam: &mut Adam, batch: &EpisodeBatch, step: u64) -> Result<StepMetrics> {
    let mut tape = Tape::new();
    let nonfinite = |e: Error| match e {
        Error::NonFinite { op } => Error::NonFiniteLoss {
            step,
            dump: dump_episode(batch, op),
        },
        other => other,
    };
    let graph = sys.forward(&mut tape, batch, Mode::Train).map_err(nonfinite)?;
    let loss = sys.loss(&mut tape, &graph, batch).map_err(nonfinite)?;
    let loss_value = tape.value(loss).item() as f64;
    tape.backward(loss)?;
    for i in 0..2 {
        sys.params[i].zero_grad();
        sys.params[i].accumulate_grads(&tape, &graph.bound[i]);
    }
    let [p1, p2] = &mut sys.params;
    let grad_norm = Adam::grad_norm(&[&mut *p1, &mut *p2]);
    adam.step(&mut [p1, p2])?;
    sys.project_power();
    Ok(StepMetrics {
        loss: loss_value,
        grad_norm,
    })
}

fn dump_episode(batch: &EpisodeBatch, op: &str) -> String {
    let span = batch.uses * batch.tokens;
    let per = batch.bits_per_token * batch.tokens;
    json!({
        "failed_op": op,
        "bits1": &batch.bits[0][..per],
        "bits2": &batch.bits[1][..per],
        "noise1": &batch.noise[0][..span],
        "noise2": &batch.noise[1][..span],
    })
    .to_string()
}

/// Episode-level validation result in frozen mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub bler: [f64; 2],
    pub loss: f64,
    /// Batch-averaged `sum_t c^2` per user.
    pub power: [f64; 2],
}

impl Validation {
    pub fn sum_bler(&self) -> f64 {
        self.bler[0] + self.bler[1]
    }
}

/// Frozen-mode error rates over `episodes` fixed validation episodes. An
/// episode is wrong for a user when any of its tokens is decoded wrongly.
pub fn validate(sys: &TwoWaySystem<f32>, channel: &ChannelConfig, seed: u64, episodes: usize) -> Result<Validation> {
    let mut errors = [0usize; 2];
    let mut loss = 0.0;
    let mut energy = [0.0; 2];
    let mut done = 0;
    while done < episodes {
        let n = EVAL_CHUNK.min(episodes - done);
        let batch = EpisodeBatch::sample(
            &sys.spec,
            channel,
            seed,
            (Domain::Validation, Domain::ValidationNoise),
            done as u64,
            n,
        );
        let mut tape = Tape::new();
        let graph = sys.forward(&mut tape, &batch, Mode::Frozen)?;
        let l = sys.loss(&mut tape, &graph, &batch)?;
        loss += tape.value(l).item() as f64 * n as f64;
        for i in 0..2 {
            let Some(logits) = graph.logits[i] else { continue };
            let est = crate::nn::tensor::argmax_rows(tape.value(logits));
            let truth = batch.targets(i);
            for e in 0..n {
                let r = e * batch.tokens..(e + 1) * batch.tokens;
                if est[r.clone()] != truth[r] {
                    errors[i] += 1;
                }
            }
        }
        let traces = graph.traces(&tape)?;
        for (i, user) in [User::One, User::Two].into_iter().enumerate() {
            energy[i] += empirical_power(&traces, user)? * n as f64;
        }
        done += n;
    }
    let n = episodes as f64;
    Ok(Validation {
        bler: [errors[0] as f64 / n, errors[1] as f64 / n],
        loss: loss / n,
        power: [energy[0] / n, energy[1] / n],
    })
}

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    pub val_bler_user1: f64,
    pub val_bler_user2: f64,
    pub val_sum_bler: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerAudit {
    pub step: u64,
    pub power: [f64; 2],
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    /// Best system by validation sum BLER (validation loss breaks ties),
    /// with calibrated statistics.
    pub best: TwoWaySystem<f32>,
    pub best_step: u64,
    pub best_validation: Validation,
    pub curve: Vec<CurvePoint>,
    /// Best-so-far validation sum BLER after each evaluation.
    pub best_so_far: Vec<f64>,
    pub power_audit: Vec<PowerAudit>,
    pub restarts: usize,
    pub optimizer_step: u64,
    pub seconds: f64,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        self.best.to_checkpoint(
            &self.config.fingerprint(),
            self.optimizer_step,
            json!({
                "train": self.config,
                "best_step": self.best_step,
                "val_sum_bler": self.best_validation.sum_bler(),
            }),
        )
    }

    pub fn write_curve(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.curve {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn is_nonfinite(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_)
    )
}

/// Trains to the step budget, restarting from a re-seeded initialization
/// when the loss or gradients go non-finite.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(config, |_| {})
}

/// [`train`] with a callback after every evaluation.
pub fn train_with(config: &TrainConfig, mut on_eval: impl FnMut(&CurvePoint)) -> Result<TrainOutcome> {
    config.validate()?;
    let mut failures = Vec::new();
    for attempt in 0..=config.max_restarts {
        let init_seed = if attempt == 0 {
            config.seed
        } else {
            substream(config.seed, Domain::Restart, attempt as u64, 0).gen()
        };
        match run(config, init_seed, attempt, &mut on_eval) {
            Ok(outcome) => return Ok(outcome),
            Err(e) if is_nonfinite(&e) => failures.push(format!("attempt {}: {e}", attempt + 1)),
            Err(e) => return Err(e),
        }
    }
    Err(Error::TrainingFailed(failures.join("\n")))
}

fn run(config: &TrainConfig, init_seed: u64, attempt: usize, on_eval: &mut dyn FnMut(&CurvePoint)) -> Result<TrainOutcome> {
    let start = Instant::now();
    let spec = config.model_spec()?;
    let channel = config.channel()?;
    let mut sys = TwoWaySystem::<f32>::new(spec.clone(), init_seed)?;
    let o = &config.optim;
    let mut adam = Adam::new(o.lr, o.beta1, o.beta2, o.eps, o.clip_norm);
    let mut schedule = LrSchedule::new(o.lr, o.warmup_steps, o.decay_factor, o.patience, o.min_lr);
    // Training data for a restart must differ from the failed attempt.
    let data_seed = config.seed.wrapping_add(attempt as u64);

    let mut curve = Vec::new();
    let mut best_so_far = Vec::new();
    let mut audit = Vec::new();
    let mut best: Option<(TwoWaySystem<f32>, u64, Validation)> = None;
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;

    for step in 0..config.steps {
        let batch = EpisodeBatch::sample(
            &spec,
            &channel,
            data_seed,
            (Domain::TrainBits, Domain::TrainNoise),
            step * config.batch as u64,
            config.batch,
        );
        adam.lr = schedule.lr_at(step);
        let m = train_step(&mut sys, &mut adam, &batch, step)?;
        loss_acc += m.loss;
        loss_n += 1;

        let done = step + 1;
        if done % config.eval_every == 0 || done == config.steps {
            sys.calibrate(&channel, config.seed, config.calib_episodes, EVAL_CHUNK)?;
            let v = validate(&sys, &channel, config.seed, config.val_episodes)?;
            let point = CurvePoint {
                step: done,
                loss: loss_acc / loss_n as f64,
                val_bler_user1: v.bler[0],
                val_bler_user2: v.bler[1],
                val_sum_bler: v.sum_bler(),
                lr: adam.lr,
            };
            loss_acc = 0.0;
            loss_n = 0;
            audit.push(PowerAudit { step: done, power: v.power });
            let better = match &best {
                None => true,
                Some((_, _, b)) => {
                    v.sum_bler() < b.sum_bler() || (v.sum_bler() == b.sum_bler() && v.loss < b.loss)
                }
            };
            if better {
                best = Some((sys.clone(), done, v));
            }
            best_so_far.push(best.as_ref().map(|b| b.2.sum_bler()).unwrap_or(f64::INFINITY));
            schedule.observe(v.sum_bler());
            on_eval(&point);
            curve.push(point);
        }
    }
    let (best, best_step, best_validation) = match best {
        Some(b) => b,
        None => {
            sys.calibrate(&channel, config.seed, config.calib_episodes, EVAL_CHUNK)?;
            let v = validate(&sys, &channel, config.seed, config.val_episodes)?;
            (sys, 0, v)
        }
    };
    Ok(TrainOutcome {
        config: config.clone(),
        best,
        best_step,
        best_validation,
        curve,
        best_so_far,
        power_audit: audit,
        restarts: attempt,
        optimizer_step: adam.step,
        seconds: start.elapsed().as_secs_f64(),
    })
}
