use std::sync::OnceLock;

use twoway_core::models::{EpisodeBatch, Mode, ModelKind, TwoWaySystem};
use twoway_core::nn::{Checkpoint, Tape};
use twoway_core::rng::Domain;
use twoway_core::training::{episode_loss, train, TrainConfig, TrainOutcome};

fn tiny(kind: ModelKind) -> TrainConfig {
    let mut c = TrainConfig::new(kind, 2, 2, 4, 6.0, 12.0);
    c.batch = 64;
    c.steps = 120;
    c.eval_every = 30;
    c.val_episodes = 10_000;
    c.seed = 17;
    c.arch.hidden = Some(8);
    c.arch.head_hidden = Some(8);
    c
}

fn trained() -> &'static TrainOutcome {
    static OUT: OnceLock<TrainOutcome> = OnceLock::new();
    OUT.get_or_init(|| train(&tiny(ModelKind::Twlc)).unwrap())
}

#[test]
fn best_so_far_never_increases() {
    let out = trained();
    assert_eq!(out.best_so_far.len(), out.curve.len());
    assert_eq!(out.curve.len(), 4);
    for w in out.best_so_far.windows(2) {
        assert!(w[1] <= w[0]);
    }
    let min = out.curve.iter().map(|p| p.val_sum_bler).fold(f64::INFINITY, f64::min);
    assert_eq!(*out.best_so_far.last().unwrap(), min);
    assert_eq!(out.best_validation.sum_bler(), min);
    assert!(out.curve.iter().any(|p| p.step == out.best_step));
}

#[test]
fn power_audit_within_budget() {
    let out = trained();
    let budget = out.config.model_spec().unwrap().uses as f64 * out.config.power();
    assert_eq!(out.power_audit.len(), out.curve.len());
    for a in &out.power_audit {
        for p in a.power {
            assert!(p <= 1.01 * budget, "step {}: power {p} over {budget}", a.step);
        }
    }
}

#[test]
fn training_is_reproducible() {
    let again = train(&tiny(ModelKind::Twlc)).unwrap();
    let out = trained();
    assert_eq!(again.curve, out.curve);
    assert_eq!(again.best.params, out.best.params);
    let mut other = tiny(ModelKind::Twlc);
    other.seed += 1;
    assert_ne!(train(&other).unwrap().best.params, out.best.params);
}

#[test]
fn learns_something() {
    let out = trained();
    let first = &out.curve[0];
    let last = out.curve.last().unwrap();
    assert!(last.loss < first.loss);
    // Random guessing over 4 messages per user errs 3/4 of the time.
    assert!(out.best_validation.sum_bler() < 1.0);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let out = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.ckpt");
    out.checkpoint().unwrap().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.to_bytes(), out.checkpoint().unwrap().to_bytes());
    assert_eq!(ck.fingerprint, out.config.fingerprint());
    let sys = TwoWaySystem::<f32>::from_checkpoint(&ck).unwrap();
    for i in 0..2 {
        for (a, b) in sys.params[i].iter().zip(out.best.params[i].iter()) {
            assert_eq!((&a.name, a.trainable, &a.value, &a.m, &a.v), (&b.name, b.trainable, &b.value, &b.m, &b.v));
        }
    }
    assert!(sys.is_calibrated());
    let spec = sys.spec.clone();
    let ch = out.config.channel().unwrap();
    let b = EpisodeBatch::sample(&spec, &ch, 3, (Domain::EvalBits, Domain::EvalNoise), 0, 256);
    assert_eq!(sys.decide(&b, Mode::Frozen).unwrap(), out.best.decide(&b, Mode::Frozen).unwrap());
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let mut bytes = trained().checkpoint().unwrap().to_bytes();
    let n = bytes.len();
    bytes[n / 2] ^= 0xff;
    assert!(Checkpoint::from_bytes(&bytes).is_err() || Checkpoint::from_bytes(&bytes).unwrap() != trained().checkpoint().unwrap());
    assert!(Checkpoint::from_bytes(&bytes[..n - 3]).is_err());
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn batch_loss_is_mean_episode_loss() {
    for kind in [ModelKind::Twlc, ModelKind::Alc] {
        let c = tiny(kind);
        let spec = c.model_spec().unwrap();
        let sys = TwoWaySystem::<f64>::new(spec.clone(), 4).unwrap();
        let n = 50;
        let b = EpisodeBatch::sample(&spec, &c.channel().unwrap(), 8, (Domain::TrainBits, Domain::TrainNoise), 0, n);
        let mut tape = Tape::new();
        let g = sys.forward(&mut tape, &b, Mode::Train).unwrap();
        let loss = sys.loss(&mut tape, &g, &b).unwrap();
        let probs = g.logits.map(|l| l.map(|v| tape.value(v).to_f64()));
        let classes = spec.classes();
        let m = spec.bits;
        let mut total = 0.0;
        for e in 0..n {
            let d: Vec<Option<Vec<f64>>> = probs
                .iter()
                .map(|p| p.as_ref().map(|p| softmax(&p[e * classes..(e + 1) * classes])))
                .collect();
            // `logits[i]` estimates user i's message.
            let est = [d[0].as_deref(), d[1].as_deref()];
            total += episode_loss(est, [&b.bits[0][e * m..(e + 1) * m], &b.bits[1][e * m..(e + 1) * m]]).unwrap();
        }
        let got = tape.value(loss).item();
        assert!((got - total / n as f64).abs() < 1e-9, "{kind:?}: {got} vs {}", total / n as f64);
    }
}
