use std::fs;

use tactile_fscil::config::{Ablation, DataSource, ExperimentConfig};
use tactile_fscil::experiment::{
    format_report, gen_dataset, load_checkpoint, load_dataset, report, report_csv, run_dir, run_experiment, run_once,
};
use tactile_fscil::harness::{build_sessions, evaluate, read_results};
use tactile_fscil::Error;

fn smoke(seeds: Vec<u64>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::smoke();
    cfg.run.seeds = seeds;
    cfg
}

#[test]
fn presets_round_trip_through_toml() {
    for cfg in [ExperimentConfig::default(), ExperimentConfig::desk(), ExperimentConfig::smoke()] {
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }
}

#[test]
fn partial_configs_take_defaults() {
    let cfg = ExperimentConfig::parse("[protocol]\nsessions = 3\n[pseudo]\nscale = 0.25\n").unwrap();
    assert_eq!(cfg.protocol.sessions, 3);
    assert_eq!(cfg.pseudo.scale, 0.25);
    assert_eq!(cfg.mel, ExperimentConfig::default().mel);
    assert_eq!(cfg.pseudo_bounds(), cfg.bounds.scaled(0.25));
}

#[test]
fn bad_configs_name_the_field() {
    let field = |text: &str| match ExperimentConfig::parse(text) {
        Err(Error::Config { field, .. }) => field,
        other => panic!("expected a config error for {text:?}, got {other:?}"),
    };
    assert_eq!(field("[pseudo]\nscale = 0.0\n"), "pseudo.scale");
    assert_eq!(field("[run]\nseeds = []\n"), "run.seeds");
    assert_eq!(field("[ablation]\ncat = false\ncat_loss = true\n"), "ablation.cat_loss");
    assert_eq!(field("[ucpc]\nn_ucpc = 0\n"), "ucpc.n_ucpc");
    assert!(field("[protocol]\nbogus = 1\n").starts_with("protocol"));
    assert!(ExperimentConfig::parse("[bounds]\ntau_min = 1.2\n").is_err());
}

#[test]
fn runs_are_deterministic_and_rerunnable_from_their_artifacts() {
    let cfg = smoke(vec![3]);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    run_experiment(&cfg, &out, false).unwrap();
    let seed_dir = run_dir(&out, 3);
    for f in ["results.csv", "config.toml", "manifest.toml", "ledger.json", "checkpoints/session_00.ckpt"] {
        assert!(seed_dir.join(f).exists(), "missing {f}");
    }
    let sessions = cfg.protocol.sessions;
    assert!(seed_dir.join(format!("checkpoints/session_{sessions:02}.ckpt")).exists());

    // The saved config alone reproduces the results byte for byte.
    let saved = ExperimentConfig::load(&seed_dir.join("config.toml")).unwrap();
    let again = dir.path().join("b");
    run_experiment(&saved, &again, false).unwrap();
    assert_eq!(
        fs::read(seed_dir.join("results.csv")).unwrap(),
        fs::read(run_dir(&again, 3).join("results.csv")).unwrap()
    );
}

#[test]
fn parallel_and_sequential_runs_agree() {
    let cfg = smoke(vec![1, 2]);
    let dir = tempfile::tempdir().unwrap();
    let a = run_experiment(&cfg, &dir.path().join("seq"), false).unwrap();
    let b = run_experiment(&cfg, &dir.path().join("par"), true).unwrap();
    assert_eq!(a, b);
}

#[test]
fn evaluating_a_reloaded_checkpoint_reproduces_the_ledger() {
    let cfg = smoke(vec![5]);
    let ds = load_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_once(&cfg, &ds, 5, Some(dir.path())).unwrap();
    let last = cfg.protocol.sessions;
    let (model, records) = load_checkpoint(&dir.path().join(format!("checkpoints/session_{last:02}.ckpt"))).unwrap();
    let ledger = build_sessions(&ds, &cfg.protocol).unwrap();
    let a = evaluate(&model, &records, &ledger, last, &ds).unwrap();
    let b = evaluate(&model, &records, &ledger, last, &ds).unwrap();
    assert_eq!(a, b);
    assert_eq!(Some(a), outcome.ledger.accuracy[last]);
    let seen: usize = outcome.ledger.sessions.iter().map(|s| s.classes.len()).sum();
    assert_eq!(outcome.records.len(), seen);
}

#[test]
fn ablation_switches_act_independently() {
    let mut cfg = smoke(vec![0]);
    let ds = load_dataset(&cfg).unwrap();
    cfg.ablation = Ablation { cat: true, cat_loss: true, ucpc: false };
    let plain = run_once(&cfg, &ds, 0, None).unwrap();
    assert!(plain.model.estimator.is_some());
    for r in plain.records.iter().filter(|r| r.session > 0) {
        assert_eq!(r.variance, cfg.uncertainty.beta);
        assert_eq!(r.uncertainty, 0.0);
    }
    assert!(plain.sessions.iter().flat_map(|s| &s.calibration).all(|&(_, _, l)| l == 0.0));

    cfg.ablation = Ablation { cat: false, cat_loss: false, ucpc: true };
    let bare = run_once(&cfg, &ds, 0, None).unwrap();
    assert!(bare.model.estimator.is_none());
    assert!(bare.epochs.iter().all(|e| e.cat == 0.0));
    // Without an estimator canonicalization is the identity, so every
    // pseudo-context moves the input and the uncertainty is positive.
    assert!(bare.sessions.iter().flat_map(|s| &s.calibration).all(|&(_, u, l)| u > 0.0 && l > 0.0));
}

#[test]
fn report_averages_seed_directories() {
    let cfg = smoke(vec![0, 1]);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    run_experiment(&cfg, &out, false).unwrap();
    let rows = report(&[out.clone()]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].runs, 2);
    let aas: Vec<f64> = [0, 1]
        .iter()
        .map(|&s| read_results(&run_dir(&out, s).join("results.csv")).unwrap().metrics.aa)
        .collect();
    assert!((rows[0].aa - (aas[0] + aas[1]) / 2.0).abs() < 1e-12);
    assert_eq!(rows[0].delta_aa, 0.0);
    assert!(format_report(&rows).contains("AA"));
    assert!(String::from_utf8(report_csv(&rows).unwrap()).unwrap().lines().count() >= 2);
    assert!(report(&[dir.path().join("missing")]).is_err());
}

#[test]
fn generated_datasets_load_back_as_a_file_source() {
    let cfg = smoke(vec![0]);
    let DataSource::Synthetic(spec) = &cfg.data else { unreachable!() };
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_dataset(spec, dir.path(), false).unwrap();
    assert!(gen_dataset(spec, dir.path(), false).is_err());
    let text = format!(
        "[data]\nkind = \"directory\"\npath = {:?}\n[protocol]\nsessions = 2\n",
        dir.path().display().to_string()
    );
    let file_cfg = ExperimentConfig::parse(&text).unwrap();
    let back = load_dataset(&file_cfg).unwrap();
    assert_eq!(back.samples.len(), ds.samples.len());
    assert_eq!(back.shape, ds.shape);
}
