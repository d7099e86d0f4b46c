mod common;

use twoway_core::channel::{empirical_power, ChannelConfig, User};
use twoway_core::models::{EpisodeBatch, Mode, ModelKind, ModelSpec, TwoWaySystem};
use twoway_core::nn::{Adam, Tape};
use twoway_core::rng::Domain;
use twoway_core::training::{train_step, validate};

fn budget(spec: &ModelSpec) -> f64 {
    spec.power * spec.episode_uses() as f64
}

/// Energy a user spends at initialization. The feedback user of a one-way
/// coder has nothing to send at the first use, so that use stays silent.
fn initial_energy(spec: &ModelSpec, user: User) -> f64 {
    if spec.kind.is_one_way() && user == User::Two {
        spec.power * (spec.uses - 1) as f64
    } else {
        budget(spec)
    }
}

fn batch(spec: &ModelSpec, seed: u64, episodes: usize) -> EpisodeBatch {
    let ch = ChannelConfig::with_power(0.0, 20.0, spec.power, spec.uses).unwrap();
    EpisodeBatch::sample(spec, &ch, seed, (Domain::TrainBits, Domain::TrainNoise), 0, episodes)
}

/// Symbols sent by both users, per use, flattened over (episode, token).
fn symbols(sys: &TwoWaySystem<f64>, b: &EpisodeBatch, mode: Mode) -> [Vec<Vec<f64>>; 2] {
    let mut tape = Tape::new();
    let g = sys.forward(&mut tape, b, mode).unwrap();
    [0, 1].map(|i| g.sent[i].iter().map(|&v| tape.value(v).to_f64()).collect())
}

fn all_kinds() -> Vec<ModelSpec> {
    vec![
        ModelSpec::twlc(3, 9),
        ModelSpec::alc(3, 9),
        ModelSpec::lc(3, 9),
        ModelSpec::twbaf(3, 9, 2),
    ]
}

#[test]
fn symbols_depend_only_on_the_past() {
    for spec in all_kinds() {
        let sys = TwoWaySystem::<f64>::new(spec.clone(), 3).unwrap();
        let base = batch(&spec, 5, 16);
        let before = symbols(&sys, &base, Mode::Train);
        for s in [0, 3, spec.uses - 2] {
            for i in 0..2 {
                let mut b = base.clone();
                for e in 0..b.episodes {
                    for j in 0..b.tokens {
                        b.noise[i][(e * b.uses + s) * b.tokens + j] += 0.7;
                    }
                }
                let after = symbols(&sys, &b, Mode::Train);
                for u in 0..2 {
                    for t in 0..=s {
                        assert_eq!(before[u][t], after[u][t], "{:?}: user {u} use {t} saw noise of use {s}", spec.kind);
                    }
                }
                // The receiving user hears the perturbation at the next use
                // whenever it has an encoder or echoes.
                let receiver = 1 - i;
                let reacts = !(spec.kind.is_one_way() && receiver == 0);
                if reacts {
                    assert_ne!(before[receiver][s + 1], after[receiver][s + 1], "{:?}: no feedback from use {s}", spec.kind);
                }
            }
        }
    }
}

#[test]
fn power_at_initialization() {
    for spec in all_kinds() {
        let mut sys = TwoWaySystem::<f64>::new(spec.clone(), 11).unwrap();
        for user in [User::One, User::Two] {
            let w = sys.power_weights(user);
            assert!(w.iter().all(|&x| (x - spec.power.sqrt()).abs() < 1e-12));
        }
        let b = batch(&spec, 2, 512);
        let mut tape = Tape::new();
        let g = sys.forward(&mut tape, &b, Mode::Train).unwrap();
        let traces = g.traces(&tape).unwrap();
        for user in [User::One, User::Two] {
            let p = empirical_power(&traces, user).unwrap();
            let want = initial_energy(&spec, user);
            assert!((p - want).abs() < 1e-6 * want, "{:?} train-mode power {p}", spec.kind);
        }

        let ch = ChannelConfig::with_power(0.0, 20.0, spec.power, spec.uses).unwrap();
        sys.calibrate(&ch, 4, 4096, 1024).unwrap();
        let v = validate(&sys.cast::<f32>(), &ch, 9, 10_000).unwrap();
        for user in [User::One, User::Two] {
            let p = v.power[user.index()];
            assert!((p / initial_energy(&spec, user) - 1.0).abs() < 0.05, "{:?} frozen power {p}", spec.kind);
        }
    }
}

#[test]
fn frozen_mode_needs_calibration() {
    let spec = ModelSpec::twlc(2, 3);
    let sys = TwoWaySystem::<f64>::new(spec.clone(), 0).unwrap();
    let mut tape = Tape::new();
    assert!(sys.forward(&mut tape, &batch(&spec, 0, 4), Mode::Frozen).is_err());
}

#[test]
fn lightweight_coder_is_much_smaller_than_attention() {
    let count = |s: ModelSpec| -> usize { TwoWaySystem::<f32>::new(s, 0).unwrap().num_params().iter().sum() };
    let lc = count(ModelSpec::twlc(3, 9));
    let baf = count(ModelSpec::twbaf(3, 9, 2));
    assert!((lc as f64) < 0.35 * baf as f64, "twlc {lc} vs twbaf {baf}");
}

#[test]
fn every_trainable_parameter_gets_gradient() {
    for spec in all_kinds() {
        let mut sys = TwoWaySystem::<f32>::new(spec.clone(), 21).unwrap();
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8, None);
        let before = sys.clone();
        train_step(&mut sys, &mut adam, &batch(&spec, 1, 64), 0).unwrap();
        for i in 0..2 {
            for (p, q) in sys.params[i].iter().zip(before.params[i].iter()) {
                if !p.trainable {
                    continue;
                }
                // Power weights are renormalized after every step, so a
                // uniform gradient can leave them unchanged.
                if p.name == "power.w" {
                    continue;
                }
                assert!(p.grad.data().iter().any(|&g| g != 0.0), "{:?} user {} {} has no gradient", spec.kind, i + 1, p.name);
                assert_ne!(p.value, q.value, "{:?} user {} {} did not move", spec.kind, i + 1, p.name);
            }
        }
    }
}

#[test]
fn passive_user_echoes_what_it_heard() {
    let spec = ModelSpec::lc(3, 5);
    let sys = TwoWaySystem::<f64>::new(spec.clone(), 8).unwrap();
    assert!(sys.users[1].encoder.is_none());
    assert!(sys.users[0].decoder.is_none());
    assert!(sys.params[1].iter().all(|p| !p.trainable || p.name.starts_with("dec")));

    let b = batch(&spec, 4, 200);
    let mut tape = Tape::new();
    let g = sys.forward(&mut tape, &b, Mode::Train).unwrap();
    let w = sys.power_weights(User::Two);
    let first = tape.value(g.sent[1][0]).to_f64();
    assert!(first.iter().all(|&x| x == 0.0));
    for t in 1..spec.uses {
        let heard = tape.value(g.received[1][t - 1]).to_f64();
        let n = heard.len() as f64;
        let mean = heard.iter().sum::<f64>() / n;
        let var = heard.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let sent = tape.value(g.sent[1][t]).to_f64();
        for (c, y) in sent.iter().zip(&heard) {
            let want = w[t] * (y - mean) / var.sqrt();
            assert!((c - want).abs() < 1e-9, "use {t}: sent {c}, expected {want}");
        }
    }
}

#[test]
fn active_feedback_has_no_message_of_its_own() {
    let spec = ModelSpec::alc(3, 9);
    assert_eq!(spec.decoder_input_dim(), 2 * spec.uses);
    let sys = TwoWaySystem::<f64>::new(spec.clone(), 2).unwrap();
    assert!(sys.users[1].encoder.is_some());
    assert!(sys.users[0].decoder.is_none() && sys.users[1].decoder.is_some());
    let b = batch(&spec, 6, 32);
    assert!(b.bits[1].iter().all(|&x| x == 0));
    assert!(b.bits[0].contains(&1));
    let mut tape = Tape::new();
    let g = sys.forward(&mut tape, &b, Mode::Train).unwrap();
    assert!(g.logits[0].is_some() && g.logits[1].is_none());
    let q = tape.value(g.enc_inputs[1][0]);
    assert!(q.data()[..].chunks(q.cols()).all(|row| row[..spec.bits].iter().all(|&x| x == 0.0)));
}

#[test]
fn two_way_kinds_decode_both_directions() {
    for spec in [ModelSpec::twlc(3, 9), ModelSpec::twbaf(3, 9, 2)] {
        let sys = TwoWaySystem::<f64>::new(spec.clone(), 2).unwrap();
        let mut tape = Tape::new();
        let g = sys.forward(&mut tape, &batch(&spec, 6, 8), Mode::Train).unwrap();
        assert!(g.logits.iter().all(|l| l.is_some()));
        let classes = tape.value(g.logits[0].unwrap()).cols();
        assert_eq!(classes, spec.classes());
        assert_eq!(spec.kind == ModelKind::Twbaf, spec.tokens > 1);
    }
}
