use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tactile_fscil::nets::tape::{soft_clamp, soft_clamp_grad};
use tactile_fscil::nets::{EmbedderConfig, EmbedderNet, EstimatorConfig, EstimatorNet, Mode, Tape};
use tactile_fscil::training::{
    loss_cat, loss_reg, train_base, train_incremental, BaseConfig, BaseData, IncrementalConfig, Model, SessionData,
    TrainSchedule,
};
use tactile_fscil::strategy::{calibrators, CalibratorArgs};
use tactile_fscil::ucpc::UncertaintyMap;
use tactile_fscil::{ContextBounds, ContextParams, SpecShape, Spectrogram};

const SHAPE: SpecShape = SpecShape { channels: 1, mel_bins: 8, frames: 8 };

fn estimator(seed: u64) -> EstimatorNet {
    let cfg = EstimatorConfig { block_count: 1, base_width: 4, freq_coord: true, time_coord: true };
    EstimatorNet::new(cfg, SHAPE, ContextBounds::default(), seed).unwrap()
}

fn embedder(seed: u64) -> EmbedderNet {
    let cfg = EmbedderConfig { widths: vec![4, 8], blocks_per_stage: 1, embed_dim: 8, freq_coord: true, time_coord: false };
    EmbedderNet::new(cfg, SHAPE, seed).unwrap()
}

fn random_inputs(n: usize, seed: u64) -> Vec<Spectrogram> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Spectrogram::from_fn(SHAPE, |_, _, _| rng.gen_range(-2.0..2.0))).collect()
}

/// Two classes per group, each a distinct frequency stripe plus noise.
fn striped(classes: usize, per_class: usize, seed: u64) -> (Vec<Spectrogram>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for c in 0..classes {
        for _ in 0..per_class {
            xs.push(Spectrogram::from_fn(SHAPE, |_, f, _| {
                (if f == c % 8 { 1.5 } else { 0.0 }) + rng.gen_range(-0.1..0.1)
            }));
            ys.push(c);
        }
    }
    (xs, ys)
}

proptest! {
    #[test]
    fn squashed_contexts_stay_inside_bounds(seed in any::<u64>(), scale in 0.0f64..50.0) {
        let mut est = estimator(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in ["head.weight", "head.bias"] {
            let i = est.state.param_index(name).unwrap();
            for v in est.state.params_mut()[i].data_mut() {
                *v = scale * rng.gen_range(-1.0..1.0);
            }
        }
        let xs = random_inputs(4, seed);
        let refs: Vec<&Spectrogram> = xs.iter().collect();
        let b = ContextBounds::default();
        for c in est.estimate(&refs).unwrap() {
            prop_assert!(c.delta.abs() <= b.delta_max);
            prop_assert!(c.tau >= b.tau_min && c.tau <= b.tau_max);
            prop_assert!(c.bias.abs() <= b.bias_max && c.tilt.abs() <= b.tilt_max);
        }
    }

    #[test]
    fn soft_clamp_is_bounded_and_increasing(x in -100.0f64..100.0, dx in 1e-6f64..1.0, m in 1e-3f64..2.0) {
        prop_assert!(soft_clamp(x, m).abs() <= m);
        prop_assert!(soft_clamp(x + dx, m) >= soft_clamp(x, m));
        prop_assert!(soft_clamp_grad(x, m) >= 0.0 && soft_clamp_grad(x, m) <= 1.0);
        let h = 1e-6;
        let fd = (soft_clamp(x + h, m) - soft_clamp(x - h, m)) / (2.0 * h);
        prop_assert!((fd - soft_clamp_grad(x, m)).abs() <= 1e-5);
    }

    #[test]
    fn magnitude_penalty_is_nonnegative(d in -0.2f64..0.2, t in 0.8f64..1.25, b in -0.4f64..0.4, s in -0.2f64..0.2) {
        let c = ContextParams::new(d, t, b, s);
        let v = loss_reg(&[c]);
        prop_assert!(v >= 0.0);
        prop_assert!((v - (d * d + t.ln().powi(2) + b * b + s * s)).abs() <= 1e-15);
    }

    #[test]
    fn schedule_halves_every_period(lr in 1e-4f64..1.0, e in 0usize..400) {
        let s = TrainSchedule::new(lr, 500);
        prop_assert_eq!(s.lr_at(e), lr * 0.5f64.powi((e / 40) as i32));
    }
}

#[test]
fn zero_head_estimator_sits_at_the_range_midpoint() {
    let est = estimator(4);
    let xs = random_inputs(3, 4);
    let refs: Vec<&Spectrogram> = xs.iter().collect();
    let b = ContextBounds::default();
    for c in est.estimate(&refs).unwrap() {
        assert_eq!(c.to_array(), [0.0, b.tau_min + 0.5 * (b.tau_max - b.tau_min), 0.0, 0.0]);
    }
}

#[test]
fn forward_passes_are_deterministic_and_finite() {
    let est = estimator(2);
    let emb = embedder(2);
    let xs = random_inputs(5, 9);
    let refs: Vec<&Spectrogram> = xs.iter().collect();
    assert_eq!(est.estimate(&refs).unwrap(), est.estimate(&refs).unwrap());
    let (a, b) = (emb.embed(&refs).unwrap(), emb.embed(&refs).unwrap());
    assert_eq!(a, b);
    assert!(a.iter().flatten().all(|v| v.is_finite()));
    assert!(a.iter().all(|z| z.len() == 8));
}

#[test]
fn consistency_vanishes_without_perturbation() {
    let mut est = estimator(3);
    let xs = random_inputs(4, 3);
    let refs: Vec<&Spectrogram> = xs.iter().collect();
    let none = ContextBounds { delta_max: 0.0, tau_min: 1.0, tau_max: 1.0, bias_max: 0.0, tilt_max: 0.0 };
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l = loss_cat(&mut tape, &mut est, &refs, None, &none, 2, &mut rng, Mode::Eval).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);

    let mut tape = Tape::new();
    let l = loss_cat(&mut tape, &mut est, &refs, None, &ContextBounds::default(), 2, &mut rng, Mode::Eval).unwrap();
    assert!(tape.value(l).item() > 0.0);
}

fn tiny_base_config() -> BaseConfig {
    BaseConfig {
        pretrain: TrainSchedule { batch_size: 16, ..TrainSchedule::new(0.1, 12) },
        full_base: TrainSchedule { batch_size: 16, ..TrainSchedule::new(0.01, 2) },
        ..BaseConfig::default()
    }
}

#[test]
fn base_training_lowers_the_loss_and_returns_one_record_per_class() {
    let (xs, ys) = striped(4, 8, 1);
    let data = BaseData { inputs: xs.iter().collect(), labels: ys.clone(), classes: vec![10, 11, 12, 13] };
    let mut model = Model { estimator: Some(estimator(5)), embedder: embedder(5) };
    let (records, log) = train_base(&data, &mut model, &tiny_base_config(), &ContextBounds::default().scaled(0.5), 7).unwrap();
    assert_eq!(records.iter().map(|r| r.class).collect::<Vec<_>>(), vec![10, 11, 12, 13]);
    let pre: Vec<f64> = log.iter().filter(|l| l.stage == "pretrain").map(|l| l.ce).collect();
    assert!(pre.last().unwrap() < &pre[0], "ce {pre:?}");
    assert!(log.iter().all(|l| l.loss.is_finite()));
    for r in &records {
        r.validate().unwrap();
        assert_eq!(r.center, r.prototype);
    }
}

#[test]
fn incremental_sessions_add_classes_and_refuse_repeats() {
    let (xs, ys) = striped(6, 6, 2);
    let base_idx: Vec<usize> = (0..ys.len()).filter(|&i| ys[i] < 4).collect();
    let data = BaseData {
        inputs: base_idx.iter().map(|&i| &xs[i]).collect(),
        labels: base_idx.iter().map(|&i| ys[i]).collect(),
        classes: vec![0, 1, 2, 3],
    };
    let mut model = Model { estimator: Some(estimator(6)), embedder: embedder(6) };
    let bounds = ContextBounds::default().scaled(0.5);
    let (mut records, _) = train_base(&data, &mut model, &tiny_base_config(), &bounds, 8).unwrap();

    let support: Vec<usize> = (0..ys.len()).filter(|&i| ys[i] >= 4).take(12).collect();
    let session = SessionData {
        session: 1,
        inputs: support.iter().map(|&i| &xs[i]).collect(),
        classes: support.iter().map(|&i| ys[i]).collect(),
        canonicals: None,
    };
    let cal = calibrators().build("ucpc", &CalibratorArgs { map: UncertaintyMap::default() }).unwrap();
    let cfg = IncrementalConfig { schedule: TrainSchedule::new(0.1, 5), n_ucpc: 4, ..IncrementalConfig::default() };
    let report = train_incremental(&session, &model, &mut records, cal.as_ref(), &cfg, &bounds, 3).unwrap();
    assert_eq!(records.len(), 6);
    assert_eq!(report.calibration.len(), 2);
    for &(_, u, lambda) in &report.calibration {
        assert!(u >= 0.0);
        assert!(lambda > 0.0 && lambda < 1.0);
    }
    assert_eq!(report.losses.len(), 5);
    assert!(train_incremental(&session, &model, &mut records, cal.as_ref(), &cfg, &bounds, 3).is_err());
}
