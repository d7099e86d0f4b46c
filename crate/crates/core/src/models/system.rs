//! Both users' coders run jointly over batches of channel episodes.

use std::collections::HashMap;

use rand::Rng;
use serde_json::{json, Value};

use crate::channel::{ChannelConfig, EpisodeTrace, User};
use crate::error::{invalid, shape, Error, Result};
use crate::knowledge::{bits_to_index, FeedbackMode};
use crate::nn::tensor::argmax_rows;
use crate::nn::{Bound, Checkpoint, ParameterSet, Real, Tape, Tensor, Var};
use crate::rng::{substream, Domain};

use super::nets::{BafNet, LcNet, Net};
use super::power::{average_stats, Mode, PowerReallocator, UseStats};
use super::spec::{ModelKind, ModelSpec};

/// Message bits and channel noise for a batch of episodes.
///
/// `bits[i]` holds user `i`'s messages, one row of `M` bits per (episode,
/// token). `noise[i]` is the noise on symbols sent by user `i`, laid out as
/// `[episode][use][token]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch {
    pub episodes: usize,
    pub tokens: usize,
    pub bits_per_token: usize,
    pub uses: usize,
    pub bits: [Vec<u8>; 2],
    pub noise: [Vec<f64>; 2],
}

impl EpisodeBatch {
    /// Draws episodes `first .. first + episodes` from keyed substreams, so
    /// episode `e` is the same whatever batch it falls in.
    pub fn sample(
        spec: &ModelSpec,
        channel: &ChannelConfig,
        seed: u64,
        domains: (Domain, Domain),
        first: u64,
        episodes: usize,
    ) -> Self {
        assert_ne!(domains.0, domains.1, "bits and noise must come from different domains");
        let per_user = spec.message_bits();
        let len = spec.episode_uses();
        let mut bits = [Vec::with_capacity(episodes * per_user), Vec::with_capacity(episodes * per_user)];
        let mut noise = [Vec::with_capacity(episodes * len), Vec::with_capacity(episodes * len)];
        for e in first..first + episodes as u64 {
            let mut rng = substream(seed, domains.0, e, 0);
            bits[0].extend((0..per_user).map(|_| rng.gen_range(0..2u8)));
            if spec.kind.is_one_way() {
                bits[1].extend(std::iter::repeat_n(0, per_user));
            } else {
                bits[1].extend((0..per_user).map(|_| rng.gen_range(0..2u8)));
            }
            for (i, user) in [User::One, User::Two].into_iter().enumerate() {
                noise[i].extend(channel.episode_noise(seed, domains.1, e, user, len));
            }
        }
        Self {
            episodes,
            tokens: spec.tokens,
            bits_per_token: spec.bits,
            uses: spec.uses,
            bits,
            noise,
        }
    }

    pub fn from_parts(spec: &ModelSpec, episodes: usize, bits: [Vec<u8>; 2], noise: [Vec<f64>; 2]) -> Result<Self> {
        for i in 0..2 {
            if bits[i].len() != episodes * spec.message_bits() || noise[i].len() != episodes * spec.episode_uses() {
                return Err(invalid("batch bits or noise do not match the model shape"));
            }
            if bits[i].iter().any(|&b| b > 1) {
                return Err(invalid("bits must be 0 or 1"));
            }
        }
        if episodes == 0 {
            return Err(invalid("empty batch"));
        }
        Ok(Self {
            episodes,
            tokens: spec.tokens,
            bits_per_token: spec.bits,
            uses: spec.uses,
            bits,
            noise,
        })
    }

    /// Message index of every (episode, token) row of user `i`.
    pub fn targets(&self, i: usize) -> Vec<usize> {
        self.bits[i]
            .chunks(self.bits_per_token)
            .map(|c| bits_to_index(c).expect("bits are binary"))
            .collect()
    }

    fn noise_at<F: Real>(&self, i: usize, t: usize) -> Result<Tensor<F>> {
        let (l, span) = (self.tokens, self.uses * self.tokens);
        let data = (0..self.episodes)
            .flat_map(|e| (0..l).map(move |j| e * span + t * l + j))
            .map(|k| F::of(self.noise[i][k]))
            .collect();
        Tensor::matrix(self.episodes, l, data)
    }
}

/// Networks and power control of one user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserCoder {
    /// `None` for a passive user who only echoes what it hears.
    pub encoder: Option<Net>,
    /// Decodes the other user's message.
    pub decoder: Option<Net>,
    pub power: PowerReallocator,
}

/// Nodes of one batched episode on a tape.
pub struct EpisodeGraph {
    pub bound: [Bound; 2],
    /// `sent[i][t]`: symbols of user `i` at use `t`, `episodes x tokens`.
    pub sent: [Vec<Var>; 2],
    /// `received[i][t]`: what user `i` hears at use `t`.
    pub received: [Vec<Var>; 2],
    /// Encoder inputs (knowledge vectors) of user `i` per use.
    pub enc_inputs: [Vec<Var>; 2],
    /// `logits[i]`: the other user's estimate of user `i`'s message.
    pub logits: [Option<Var>; 2],
    pub stats: [Vec<UseStats>; 2],
}

impl EpisodeGraph {
    /// Reads symbol traces for every episode (uses in time order, tokens
    /// interleaved within a use).
    pub fn traces<F: Real>(&self, tape: &Tape<F>) -> Result<Vec<EpisodeTrace>> {
        let uses = self.sent[0].len();
        let first = tape.value(self.sent[0][0]);
        let (episodes, tokens) = (first.rows(), first.cols());
        let collect = |vars: &[Var], e: usize| -> Vec<f64> {
            (0..uses)
                .flat_map(|t| {
                    let v = tape.value(vars[t]);
                    (0..tokens).map(move |j| v.at(e, j).f64())
                })
                .collect()
        };
        Ok((0..episodes)
            .map(|e| {
                EpisodeTrace::from_received(
                    collect(&self.sent[0], e),
                    collect(&self.sent[1], e),
                    collect(&self.received[0], e),
                    collect(&self.received[1], e),
                )
            })
            .collect())
    }
}

/// Decisions of one batch: `estimates[i]` are the other user's decoded
/// message indices for user `i`, one per (episode, token).
#[derive(Clone, Debug, PartialEq)]
pub struct Decisions {
    pub estimates: [Option<Vec<usize>>; 2],
    pub targets: [Vec<usize>; 2],
}

/// A complete two-user coder, generic over the float type.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoWaySystem<F: Real> {
    pub spec: ModelSpec,
    pub users: [UserCoder; 2],
    pub params: [ParameterSet<F>; 2],
}

impl<F: Real> TwoWaySystem<F> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut users = Vec::with_capacity(2);
        let mut params = Vec::with_capacity(2);
        for i in 0..2 {
            let mut rng = substream(seed, Domain::Init, i as u64, 0);
            let mut ps = ParameterSet::new();
            let passive = spec.kind == ModelKind::Lc && i == 1;
            let has_decoder = !spec.kind.is_one_way() || i == 1;
            let mut make = |ps: &mut ParameterSet<F>, name: &str, input: usize, layers: usize, output: usize| -> Result<Net> {
                Ok(match spec.kind {
                    ModelKind::Twbaf => Net::Baf(BafNet::new(ps, name, input, spec.hidden, layers, spec.heads, output, &mut rng)?),
                    _ => Net::Lc(LcNet::new(ps, name, input, spec.hidden, spec.head_hidden, output, &mut rng)?),
                })
            };
            let encoder = if passive {
                None
            } else {
                Some(make(&mut ps, "enc", spec.encoder_input_dim(), spec.enc_layers, 1)?)
            };
            let decoder = if has_decoder {
                Some(make(&mut ps, "dec", spec.decoder_input_dim(), spec.dec_layers, spec.classes())?)
            } else {
                None
            };
            let power = PowerReallocator::new(&mut ps, spec.uses, spec.tokens, spec.power, !passive)?;
            users.push(UserCoder { encoder, decoder, power });
            params.push(ps);
        }
        let [u1, u2]: [UserCoder; 2] = users.try_into().expect("two users");
        let [p1, p2]: [ParameterSet<F>; 2] = params.try_into().expect("two users");
        Ok(Self {
            spec,
            users: [u1, u2],
            params: [p1, p2],
        })
    }

    pub fn cast<G: Real>(&self) -> TwoWaySystem<G> {
        TwoWaySystem {
            spec: self.spec.clone(),
            users: self.users.clone(),
            params: [self.params[0].cast(), self.params[1].cast()],
        }
    }

    /// Number of trainable scalars per user.
    pub fn num_params(&self) -> [usize; 2] {
        [self.params[0].num_trainable(), self.params[1].num_trainable()]
    }

    pub fn set_positional(&mut self, on: bool) {
        for u in &mut self.users {
            for net in [&mut u.encoder, &mut u.decoder].into_iter().flatten() {
                net.set_positional(on);
            }
        }
    }

    pub fn is_calibrated(&self) -> bool {
        (0..2).all(|i| self.users[i].power.is_calibrated(&self.params[i]))
    }

    /// Rescales both users' power weights onto the budget.
    pub fn project_power(&mut self) {
        for i in 0..2 {
            self.users[i].power.project(&mut self.params[i]);
        }
    }

    pub fn power_weights(&self, user: User) -> Vec<f64> {
        let i = user.index();
        self.users[i].power.weights(&self.params[i])
    }

    /// Runs one batch of episodes on `tape`.
    ///
    /// At every use both users transmit simultaneously from knowledge of
    /// earlier uses only, then each receives the other's symbol plus noise.
    pub fn forward(&self, tape: &mut Tape<F>, batch: &EpisodeBatch, mode: Mode) -> Result<EpisodeGraph> {
        let s = &self.spec;
        if batch.tokens != s.tokens || batch.uses != s.uses || batch.bits_per_token != s.bits {
            return Err(shape("episode", "batch was sampled for a different model shape"));
        }
        let (b, l, m, tm) = (batch.episodes, s.tokens, s.bits, s.uses);
        let rows = b * l;
        let bound = [self.params[0].bind(tape)?, self.params[1].bind(tape)?];
        let mut bits = Vec::with_capacity(2);
        for i in 0..2 {
            let data = batch.bits[i].iter().map(|&x| F::of(x as f64)).collect();
            bits.push(tape.input(Tensor::matrix(rows, m, data)?)?);
        }
        let mut zeros: HashMap<usize, Var> = HashMap::new();
        let mut zero = |tape: &mut Tape<F>, width: usize| -> Result<Var> {
            if let Some(&v) = zeros.get(&width) {
                return Ok(v);
            }
            let v = tape.input(Tensor::zeros(&[rows, width]))?;
            zeros.insert(width, v);
            Ok(v)
        };

        let mut sent: [Vec<Var>; 2] = Default::default();
        let mut received: [Vec<Var>; 2] = Default::default();
        let mut enc_inputs: [Vec<Var>; 2] = Default::default();
        let mut hist_c: [Vec<Var>; 2] = Default::default();
        let mut hist_y: [Vec<Var>; 2] = Default::default();
        let mut stats: [Vec<UseStats>; 2] = [vec![UseStats::default(); tm], vec![UseStats::default(); tm]];

        for t in 0..tm {
            let mut symbols = Vec::with_capacity(2);
            for i in 0..2 {
                let user = &self.users[i];
                let ps = &self.params[i];
                let st = &mut stats[i][t];
                let c = match &user.encoder {
                    Some(net) => {
                        let mut parts = vec![bits[i]];
                        let pad = tm - 1 - t;
                        for hist in [&hist_c[i], &hist_y[i]] {
                            parts.extend_from_slice(hist);
                            if pad > 0 {
                                parts.push(zero(tape, pad)?);
                            }
                        }
                        let q = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts)? };
                        enc_inputs[i].push(q);
                        let raw = net.forward(tape, &bound[i], q, l)?;
                        let mut raw = tape.reshape(raw, &[b, l])?;
                        if s.kind == ModelKind::Twbaf {
                            raw = user.power.center(tape, ps, t, raw, mode, st)?;
                        }
                        user.power.apply(tape, ps, &bound[i], t, raw, mode, st)?
                    }
                    None if t == 0 => tape.input(Tensor::zeros(&[b, l]))?,
                    None => user.power.apply(tape, ps, &bound[i], t, received[i][t - 1], mode, st)?,
                };
                symbols.push(c);
            }
            for i in 0..2 {
                let n = tape.input(batch.noise_at(i, t)?)?;
                let y = tape.add(symbols[i], n)?;
                received[1 - i].push(y);
                sent[i].push(symbols[i]);
            }
            if t + 1 < tm {
                for i in 0..2 {
                    let c = tape.reshape(symbols[i], &[rows, 1])?;
                    let y = match s.feedback {
                        FeedbackMode::Raw => received[i][t],
                        FeedbackMode::Residual => tape.sub(received[i][t], symbols[i])?,
                    };
                    let y = tape.reshape(y, &[rows, 1])?;
                    hist_c[i].push(c);
                    hist_y[i].push(y);
                }
            }
        }

        let mut logits = [None, None];
        for j in 0..2 {
            let Some(net) = &self.users[j].decoder else { continue };
            let mut parts = Vec::with_capacity(2 * tm + 1);
            if !s.kind.is_one_way() {
                parts.push(bits[j]);
            }
            for series in [&received[j], &sent[j]] {
                for &v in series.iter() {
                    parts.push(tape.reshape(v, &[rows, 1])?);
                }
            }
            let r = tape.concat_cols(&parts)?;
            logits[1 - j] = Some(net.forward(tape, &bound[j], r, l)?);
        }

        Ok(EpisodeGraph {
            bound,
            sent,
            received,
            enc_inputs,
            logits,
            stats,
        })
    }

    /// Sum over decoded messages of the mean cross-entropy.
    pub fn loss(&self, tape: &mut Tape<F>, graph: &EpisodeGraph, batch: &EpisodeBatch) -> Result<Var> {
        let mut total: Option<Var> = None;
        for i in 0..2 {
            let Some(logits) = graph.logits[i] else { continue };
            let ce = tape.softmax_cross_entropy(logits, &batch.targets(i))?;
            total = Some(match total {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
        }
        total.ok_or_else(|| invalid("model has no decoder"))
    }

    /// Decodes a batch without building gradients.
    pub fn decide(&self, batch: &EpisodeBatch, mode: Mode) -> Result<Decisions> {
        let mut tape = Tape::new();
        let graph = self.forward(&mut tape, batch, mode)?;
        let estimates = graph.logits.map(|l| l.map(|v| argmax_rows(tape.value(v))));
        Ok(Decisions {
            estimates,
            targets: [batch.targets(0), batch.targets(1)],
        })
    }

    /// Estimates per-use statistics from `episodes` fresh episodes in
    /// train mode and stores them for frozen-mode inference.
    pub fn calibrate(&mut self, channel: &ChannelConfig, seed: u64, episodes: usize, chunk: usize) -> Result<()> {
        if episodes == 0 || chunk == 0 {
            return Err(invalid("calibration needs at least one episode"));
        }
        let mut per_batch: [Vec<Vec<UseStats>>; 2] = Default::default();
        let mut done = 0;
        while done < episodes {
            let n = chunk.min(episodes - done);
            let batch = EpisodeBatch::sample(
                &self.spec,
                channel,
                seed,
                (Domain::Calibration, Domain::CalibrationNoise),
                done as u64,
                n,
            );
            let mut tape = Tape::new();
            let graph = self.forward(&mut tape, &batch, Mode::Train)?;
            for i in 0..2 {
                per_batch[i].push(graph.stats[i].clone());
            }
            done += n;
        }
        for i in 0..2 {
            let avg = average_stats(&per_batch[i]);
            self.users[i].power.store(&mut self.params[i], &avg)?;
        }
        Ok(())
    }

    /// Serializes the system; `extra` is merged into the JSON metadata.
    pub fn to_checkpoint(&self, fingerprint: &str, optimizer_step: u64, extra: Value) -> Result<Checkpoint> {
        let mut meta = json!({ "model": self.spec });
        if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
            m.extend(e);
        }
        Ok(Checkpoint {
            metadata: serde_json::to_string(&meta)?,
            fingerprint: fingerprint.to_string(),
            optimizer_step,
            sets: vec![self.params[0].cast(), self.params[1].cast()],
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: Value = serde_json::from_str(&ck.metadata)?;
        let spec: ModelSpec = serde_json::from_value(
            meta.get("model")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("metadata has no model section".into()))?,
        )?;
        let mut sys = Self::new(spec, 0)?;
        if ck.sets.len() != 2 {
            return Err(Error::Checkpoint(format!("expected 2 parameter sets, found {}", ck.sets.len())));
        }
        for (i, set) in ck.sets.iter().enumerate() {
            let want = &sys.params[i];
            let same = want.len() == set.len()
                && want
                    .iter()
                    .zip(set.iter())
                    .all(|(a, b)| a.name == b.name && a.trainable == b.trainable && a.value.shape() == b.value.shape());
            if !same {
                return Err(Error::Checkpoint(format!("parameter layout of user {} does not match the model", i + 1)));
            }
            sys.params[i] = set.cast();
        }
        Ok(sys)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel() -> ChannelConfig {
        ChannelConfig::with_power(10.0, 10.0, 1.0, 9).unwrap()
    }

    #[test]
    fn builds_expected_roles() {
        let twlc = TwoWaySystem::<f32>::new(ModelSpec::twlc(3, 9), 1).unwrap();
        assert!(twlc.users.iter().all(|u| u.encoder.is_some() && u.decoder.is_some()));
        let alc = TwoWaySystem::<f32>::new(ModelSpec::alc(3, 9), 1).unwrap();
        assert!(alc.users[0].decoder.is_none() && alc.users[1].encoder.is_some());
        let lc = TwoWaySystem::<f32>::new(ModelSpec::lc(3, 9), 1).unwrap();
        assert!(lc.users[1].encoder.is_none() && lc.users[1].decoder.is_some());
        assert_eq!(lc.params[1].get("power.w").map(|p| p.trainable), Some(false));
    }

    #[test]
    fn forward_shapes_and_power() {
        let spec = ModelSpec::twlc(2, 4);
        let sys = TwoWaySystem::<f64>::new(spec.clone(), 3).unwrap();
        let ch = ChannelConfig::with_power(5.0, 5.0, 1.0, 4).unwrap();
        let batch = EpisodeBatch::sample(&spec, &ch, 9, (Domain::TrainBits, Domain::TrainNoise), 0, 64);
        let mut tape = Tape::new();
        let g = sys.forward(&mut tape, &batch, Mode::Train).unwrap();
        assert_eq!(g.sent[0].len(), 4);
        assert_eq!(tape.value(g.enc_inputs[0][3]).shape(), &[64, 8]);
        assert_eq!(tape.value(g.logits[0].unwrap()).shape(), &[64, 4]);
        let traces = g.traces(&tape).unwrap();
        let p = crate::channel::empirical_power(&traces, User::One).unwrap();
        assert!((p - 4.0).abs() < 1e-9, "{p}");
        let loss = sys.loss(&mut tape, &g, &batch).unwrap();
        assert!(tape.value(loss).item() > 0.0);
    }

    #[test]
    fn episodes_do_not_depend_on_batch_split() {
        let spec = ModelSpec::twlc(3, 9);
        let whole = EpisodeBatch::sample(&spec, &channel(), 4, (Domain::EvalBits, Domain::EvalNoise), 0, 6);
        let tail = EpisodeBatch::sample(&spec, &channel(), 4, (Domain::EvalBits, Domain::EvalNoise), 3, 3);
        assert_eq!(&whole.bits[0][9..], &tail.bits[0][..]);
        assert_eq!(&whole.noise[1][27..], &tail.noise[1][..]);
    }

    #[test]
    fn frozen_needs_calibration() {
        let spec = ModelSpec::twlc(2, 3);
        let mut sys = TwoWaySystem::<f32>::new(spec.clone(), 1).unwrap();
        let ch = ChannelConfig::with_power(0.0, 0.0, 1.0, 3).unwrap();
        let batch = EpisodeBatch::sample(&spec, &ch, 1, (Domain::EvalBits, Domain::EvalNoise), 0, 8);
        assert!(sys.decide(&batch, Mode::Frozen).is_err());
        sys.calibrate(&ch, 1, 1000, 500).unwrap();
        assert!(sys.is_calibrated());
        let d = sys.decide(&batch, Mode::Frozen).unwrap();
        assert_eq!(d.estimates[0].as_ref().unwrap().len(), 8);
    }

    #[test]
    fn checkpoint_round_trip() {
        let sys = TwoWaySystem::<f32>::new(ModelSpec::twbaf(2, 3, 2), 8).unwrap();
        let ck = sys.to_checkpoint("abc", 5, json!({"note": 1})).unwrap();
        let back = TwoWaySystem::<f32>::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, sys);
        let mut other = ck.clone();
        other.sets.swap(0, 1);
        other.sets[0] = ParameterSet::new();
        assert!(TwoWaySystem::<f32>::from_checkpoint(&other).is_err());
    }
}
