use std::collections::BTreeSet;

use proptest::prelude::*;

use tactile_fscil::frontend::dataset::{Dataset, Sample};
use tactile_fscil::harness::{read_results, write_results, RunResults};
use tactile_fscil::harness::{accuracy, build_sessions, evaluate_with, metrics, ProtocolSpec};
use tactile_fscil::{SpecShape, Spectrogram};

fn toy_dataset(classes: usize, per_class: usize) -> Dataset {
    let shape = SpecShape::new(1, 2, 2);
    let samples = (0..classes * per_class)
        .map(|i| Sample {
            label: i / per_class,
            spectrogram: Spectrogram::filled(shape, i as f64),
            context: None,
        })
        .collect();
    Dataset {
        shape,
        class_count: classes,
        samples,
        canonicals: None,
    }
}

fn acc_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..=1.0, 2..12)
}

proptest! {
    #[test]
    fn aggregate_metrics_are_consistent(acc in acc_strategy()) {
        let m = metrics(&acc).unwrap();
        let lo = acc.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m.aa >= lo - 1e-12 && m.aa <= hi + 1e-12);
        prop_assert_eq!(m.pd.unwrap(), acc[0] - acc[acc.len() - 1]);
        // Relative drops summed over transitions, over the session count.
        let drops: f64 = acc.windows(2).map(|w| (w[0] - w[1]) / w[0]).sum();
        prop_assert!((m.adr.unwrap() - 100.0 * drops / acc.len() as f64).abs() <= 1e-9);
    }

    #[test]
    fn ledger_is_disjoint_with_exact_shots(
        ways in 1usize..4, shots in 1usize..4, sessions in 1usize..4, per_class in 6usize..12, seed in any::<u64>(),
    ) {
        let spec = ProtocolSpec { ways, shots, sessions, base_class_count: Some(3), test_fraction: 0.25, seed };
        let ds = toy_dataset(3 + ways * sessions, per_class);
        let ledger = build_sessions(&ds, &spec).unwrap();
        prop_assert!(ledger.check(&ds).is_ok());
        prop_assert_eq!(ledger.sessions.len(), sessions + 1);
        let mut seen = BTreeSet::new();
        for (s, plan) in ledger.sessions.iter().enumerate() {
            prop_assert_eq!(plan.index, s);
            prop_assert_eq!(plan.classes.len(), if s == 0 { 3 } else { ways });
            for &c in &plan.classes {
                prop_assert!(seen.insert(c));
            }
            if s > 0 {
                prop_assert_eq!(plan.support.len(), ways * shots);
            }
            let labels: BTreeSet<usize> = ledger.test_indices(s).iter().map(|&i| ds.samples[i].label).collect();
            prop_assert_eq!(&labels, &seen);
            let test: BTreeSet<usize> = ledger.test_indices(s).into_iter().collect();
            for p in &ledger.sessions[..=s] {
                prop_assert!(p.support.iter().all(|i| !test.contains(i)));
            }
        }
        prop_assert_eq!(build_sessions(&ds, &spec).unwrap(), ledger);
    }

    #[test]
    fn results_csv_round_trips(acc in acc_strategy()) {
        let sessions: Vec<(usize, f64)> = acc.iter().enumerate().map(|(i, &a)| (10 + 5 * i, a)).collect();
        let r = RunResults::from_accuracies(sessions).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        write_results(&path, &r).unwrap();
        prop_assert_eq!(read_results(&path).unwrap(), r);
    }
}

#[test]
fn metrics_depend_on_session_order() {
    let acc = [0.9, 0.8, 0.6, 0.5];
    let shuffled = [0.6, 0.9, 0.5, 0.8];
    let (a, b) = (metrics(&acc).unwrap(), metrics(&shuffled).unwrap());
    assert!((a.aa - b.aa).abs() < 1e-15);
    assert_ne!(a.pd, b.pd);
    assert_ne!(a.adr, b.adr);
}

#[test]
fn single_session_has_no_drop_metrics() {
    let m = metrics(&[0.7]).unwrap();
    assert_eq!((m.aa, m.pd, m.adr), (0.7, None, None));
    assert!(metrics(&[]).is_err());
    assert_eq!(metrics(&[0.0, 0.5]).unwrap().adr, None);
}

#[test]
fn accuracy_counts_matches() {
    assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 0, 4]).unwrap(), 0.75);
    assert!(accuracy(&[1], &[1, 2]).is_err());
    assert!(accuracy(&[], &[]).is_err());
}

#[test]
fn protocol_rejects_impossible_splits() {
    let ds = toy_dataset(10, 8);
    let too_many = ProtocolSpec { ways: 5, sessions: 3, ..ProtocolSpec::default() };
    assert!(build_sessions(&ds, &too_many).is_err());
    let too_few_samples = ProtocolSpec { ways: 2, shots: 7, sessions: 2, ..ProtocolSpec::default() };
    assert!(build_sessions(&ds, &too_few_samples).is_err());
    let default_base = ProtocolSpec { ways: 2, shots: 2, sessions: 3, ..ProtocolSpec::default() };
    let ledger = build_sessions(&ds, &default_base).unwrap();
    assert_eq!(ledger.sessions[0].classes.len(), 4);
}

#[test]
fn evaluation_uses_the_cumulative_test_set() {
    let ds = toy_dataset(6, 10);
    let spec = ProtocolSpec { ways: 2, shots: 2, sessions: 2, base_class_count: Some(2), test_fraction: 0.2, seed: 1 };
    let ledger = build_sessions(&ds, &spec).unwrap();
    for s in 0..3 {
        let mut asked = 0;
        let acc = evaluate_with(&ledger, s, &ds, |samples| {
            asked = samples.len();
            Ok(samples.iter().map(|x| x.label).collect())
        })
        .unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(asked, 2 * (s + 1) * 2);
    }
}
