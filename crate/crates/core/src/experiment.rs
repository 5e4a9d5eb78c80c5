//! Orchestration: dataset materialization, full protocol runs, dataset
//! generation and multi-run reports.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{Error, Result};
use crate::frontend::dataset::{read_dataset, write_dataset};
use crate::frontend::synth::{synth_catalog, synth_observations};
use crate::frontend::{Dataset, Sample, SynthSpec};
use crate::harness::{build_sessions, evaluate, write_results, read_results, RunResults, SessionLedger};
use crate::nets::checkpoint::{quantize_state, write_atomic, Checkpoint};
use crate::nets::{EmbedderNet, EstimatorNet};
use crate::rng::derive_seed;
use crate::spectrogram::Spectrogram;
use crate::strategy::{calibrators, CalibratorArgs};
use crate::training::{
    train_base, train_incremental, BaseConfig, BaseData, EpochLog, IncrementalConfig, Model, SessionData,
    SessionReport,
};
use crate::ucpc::ClassRecord;

/// Generate the synthetic dataset of `spec` in memory, with true contexts
/// and canonical spectrograms.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    let catalog = synth_catalog(spec)?;
    let samples = synth_observations(spec, &catalog)?
        .into_iter()
        .map(|s| Sample {
            label: s.material,
            spectrogram: s.observation,
            context: Some(s.context),
        })
        .collect();
    let ds = Dataset {
        shape: spec.shape(),
        class_count: spec.material_count,
        samples,
        canonicals: Some(catalog.materials),
    };
    ds.validate()?;
    Ok(ds)
}

/// Write the synthetic dataset of `spec` to `out`. Refuses a non-empty
/// directory unless `force`.
pub fn gen_dataset(spec: &SynthSpec, out: &Path, force: bool) -> Result<Dataset> {
    let ds = synth_dataset(spec)?;
    for (i, s) in ds.samples.iter().enumerate() {
        let c = s.context.expect("synthetic samples carry contexts");
        if !spec.context_bounds.contains(&c) {
            return Err(Error::InvalidArgument(format!("sample {i} context {c:?} outside bounds")));
        }
    }
    write_dataset(&ds, out, 1000.0, 0.5, force)?;
    Ok(ds)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic(spec) => synth_dataset(spec),
        DataSource::Directory { path } => read_dataset(path, &cfg.mel),
    }
}

/// Everything one protocol run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub results: RunResults,
    pub ledger: SessionLedger,
    pub records: Vec<ClassRecord>,
    pub model: Model,
    pub epochs: Vec<EpochLog>,
    pub sessions: Vec<SessionReport>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    seed: u64,
    split_seed: u64,
    ablation: String,
    config: &'a ExperimentConfig,
    /// Per-component correlation of estimated and true contexts on the base
    /// support set, when the data carries true contexts.
    context_fit: Option<[f64; 4]>,
    epochs: &'a [EpochLog],
    sessions: &'a [SessionReport],
    accuracy: Vec<f64>,
}

fn checkpoint(model: &Model, records: &[ClassRecord]) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    if let Some(e) = &model.estimator {
        ck.push("estimator", &e.state);
    }
    ck.push("embedder", &model.embedder.state);
    ck.records = serde_json::to_value(records).map_err(|e| Error::InvalidArgument(format!("records: {e}")))?;
    Ok(ck)
}

/// Rebuild a model and its class records from a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Vec<ClassRecord>)> {
    use crate::nets::Architecture;
    let ck = Checkpoint::load(path)?;
    let mut estimator = None;
    let mut embedder = None;
    for s in &ck.sections {
        match &s.architecture {
            Architecture::Estimator { config, input, bounds } => {
                let mut net = EstimatorNet::new(config.clone(), *input, *bounds, 0)?;
                s.restore(&mut net.state)?;
                estimator = Some(net);
            }
            Architecture::Embedder { config, input } => {
                let mut net = EmbedderNet::new(config.clone(), *input, 0)?;
                s.restore(&mut net.state)?;
                embedder = Some(net);
            }
            other => return Err(Error::format(path, format!("unexpected section {other:?}"))),
        }
    }
    let embedder = embedder.ok_or_else(|| Error::format(path, "checkpoint has no embedder"))?;
    let records: Vec<ClassRecord> =
        serde_json::from_value(ck.records).map_err(|e| Error::format(path, format!("records: {e}")))?;
    Ok((Model { estimator, embedder }, records))
}

/// Run the whole protocol once for `seed` on `ds`. Artifacts go to `out`
/// when given.
pub fn run_once(cfg: &ExperimentConfig, ds: &Dataset, seed: u64, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut protocol = cfg.protocol;
    if cfg.run.reseed_splits {
        protocol.seed = derive_seed(protocol.seed, &[seed]);
    }
    let ledger = build_sessions(ds, &protocol)?;
    let shape = ds.shape;
    let ab = cfg.ablation;
    let pseudo = cfg.pseudo_bounds();
    let mut model = Model {
        estimator: if ab.cat {
            Some(EstimatorNet::new(cfg.estimator.clone(), shape, cfg.bounds, derive_seed(seed, &[1]))?)
        } else {
            None
        },
        embedder: EmbedderNet::new(cfg.embedder.clone(), shape, derive_seed(seed, &[2]))?,
    };

    let base_plan = &ledger.sessions[0];
    let pos = |c: usize| base_plan.classes.iter().position(|&k| k == c).expect("base class");
    let base = BaseData {
        inputs: base_plan.support.iter().map(|&i| &ds.samples[i].spectrogram).collect(),
        labels: base_plan.support.iter().map(|&i| pos(ds.samples[i].label)).collect(),
        classes: base_plan.classes.clone(),
    };
    let mut weights = cfg.weights;
    if !ab.cat_loss {
        weights.lambda_cat = 0.0;
    }
    let base_cfg = BaseConfig {
        pretrain: cfg.schedules.pretrain,
        full_base: cfg.schedules.full_base,
        weights,
        p_count: cfg.training.p_count,
        cat_in_pretrain: cfg.training.cat_in_pretrain,
        logit_scale: cfg.training.logit_scale,
        base_variance: cfg.uncertainty.beta,
    };
    let (mut records, epochs) = train_base(&base, &mut model, &base_cfg, &pseudo, derive_seed(seed, &[3]))?;
    for s in model.states_mut() {
        quantize_state(s);
    }
    let context_fit = match &model.estimator {
        Some(est) => context_correlation(est, ds, &base_plan.support)?,
        None => None,
    };
    if let Some(r) = context_fit {
        log::info!("seed {seed}: estimated-vs-true context correlation {r:.3?}");
    }
    if let Some(dir) = out {
        checkpoint(&model, &records)?.save(&dir.join("checkpoints").join("session_00.ckpt"))?;
    }

    let calibrator = calibrators().build(
        if ab.ucpc { "ucpc" } else { "plain" },
        &CalibratorArgs { map: cfg.uncertainty },
    )?;
    let inc_cfg = IncrementalConfig {
        schedule: cfg.schedules.incremental,
        lambda_old: cfg.weights.lambda_old,
        n_ucpc: cfg.ucpc.n_ucpc,
        anchor: cfg.ucpc.anchor,
        logit_scale: cfg.training.logit_scale,
    };
    let mut acc = vec![evaluate(&model, &records, &ledger, 0, ds)?];
    let mut sessions = Vec::new();
    for plan in &ledger.sessions[1..] {
        let inputs: Vec<&Spectrogram> = plan.support.iter().map(|&i| &ds.samples[i].spectrogram).collect();
        let classes: Vec<usize> = plan.support.iter().map(|&i| ds.samples[i].label).collect();
        let canonicals = ds
            .canonicals
            .as_ref()
            .map(|c| classes.iter().map(|&y| &c[y]).collect());
        let data = SessionData {
            session: plan.index,
            inputs,
            classes,
            canonicals,
        };
        let report = train_incremental(
            &data,
            &model,
            &mut records,
            calibrator.as_ref(),
            &inc_cfg,
            &pseudo,
            derive_seed(seed, &[4]),
        )?;
        sessions.push(report);
        acc.push(evaluate(&model, &records, &ledger, plan.index, ds)?);
        if let Some(dir) = out {
            let name = format!("session_{:02}.ckpt", plan.index);
            checkpoint(&model, &records)?.save(&dir.join("checkpoints").join(name))?;
        }
    }
    let seen: Vec<usize> = (0..acc.len()).map(|s| ledger.seen_classes(s).len()).collect();
    let results = RunResults::from_accuracies(seen.into_iter().zip(acc.iter().copied()).collect())?;
    let mut ledger = ledger;
    ledger.accuracy = acc.iter().map(|&a| Some(a)).collect();

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_results(&dir.join("results.csv"), &results)?;
        let mut run_cfg = cfg.clone();
        run_cfg.run.seeds = vec![seed];
        write_atomic(&dir.join("config.toml"), run_cfg.to_toml()?.as_bytes())?;
        let manifest = RunManifest {
            seed,
            split_seed: protocol.seed,
            ablation: ab.label(),
            config: &run_cfg,
            context_fit,
            epochs: &epochs,
            sessions: &sessions,
            accuracy: acc.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::InvalidArgument(format!("manifest: {e}")))?;
        write_atomic(&dir.join("manifest.toml"), text.as_bytes())?;
        let ledger_json =
            serde_json::to_string_pretty(&ledger).map_err(|e| Error::InvalidArgument(format!("ledger: {e}")))?;
        write_atomic(&dir.join("ledger.json"), ledger_json.as_bytes())?;
    }
    Ok(RunOutcome {
        seed,
        results,
        ledger,
        records,
        model,
        epochs,
        sessions,
    })
}

/// Directory of the run for `seed` under `out`.
pub fn run_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Run every configured seed, sequentially or on scoped threads.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, parallel: bool) -> Result<Vec<RunResults>> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let seeds = &cfg.run.seeds;
    let results: Vec<Result<RunResults>> = if parallel && seeds.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| {
                    let ds = &ds;
                    s.spawn(move || run_once(cfg, ds, seed, Some(&run_dir(out, seed))).map(|o| o.results))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Diverged("run thread panicked".into()))))
                .collect()
        })
    } else {
        seeds
            .iter()
            .map(|&seed| run_once(cfg, &ds, seed, Some(&run_dir(out, seed))).map(|o| o.results))
            .collect()
    };
    results.into_iter().collect()
}

/// Locate results files: a directory holding `results.csv`, or the
/// `seed_*` run directories inside it.
pub fn find_results(dir: &Path) -> Result<Vec<PathBuf>> {
    let direct = dir.join("results.csv");
    if direct.exists() {
        return Ok(vec![direct]);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path().join("results.csv")))
        .filter(|p| p.exists())
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(Error::format(dir, "no results.csv found"));
    }
    Ok(found)
}

/// One row of a report: a run directory's results averaged over its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub runs: usize,
    pub accuracy: Vec<f64>,
    pub aa: f64,
    pub aa_std: f64,
    pub pd: Option<f64>,
    pub adr: Option<f64>,
    /// AA minus the first row's AA.
    pub delta_aa: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Per-directory means over seeds of per-session accuracy, AA, PD and ADR.
pub fn report(dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    if dirs.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one run directory".into()));
    }
    let mut rows: Vec<ReportRow> = Vec::new();
    for dir in dirs {
        let files = find_results(dir)?;
        let runs: Vec<RunResults> = files.iter().map(|f| read_results(f)).collect::<Result<_>>()?;
        let n_sess = runs[0].sessions.len();
        if let Some((f, _)) = files.iter().zip(&runs).find(|(_, r)| r.sessions.len() != n_sess) {
            return Err(Error::format(f, format!("expected {n_sess} sessions like its siblings")));
        }
        let accuracy = (0..n_sess)
            .map(|s| mean(&runs.iter().map(|r| r.sessions[s].1).collect::<Vec<_>>()))
            .collect();
        let aas: Vec<f64> = runs.iter().map(|r| r.metrics.aa).collect();
        let opt_mean = |f: fn(&RunResults) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = runs.iter().map(f).collect();
            v.map(|v| mean(&v))
        };
        rows.push(ReportRow {
            name: dir.display().to_string(),
            runs: runs.len(),
            accuracy,
            aa: mean(&aas),
            aa_std: std_dev(&aas),
            pd: opt_mean(|r| r.metrics.pd),
            adr: opt_mean(|r| r.metrics.adr),
            delta_aa: 0.0,
        });
    }
    let first = rows[0].aa;
    for r in &mut rows {
        r.delta_aa = r.aa - first;
    }
    Ok(rows)
}

/// Aligned plain-text table of report rows; accuracies in percent.
pub fn format_report(rows: &[ReportRow]) -> String {
    let n_sess = rows.iter().map(|r| r.accuracy.len()).max().unwrap_or(0);
    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<name_w$} {:>4}", "run", "n");
    for s in 0..n_sess {
        out.push_str(&format!(" {:>6}", format!("S{s}")));
    }
    out.push_str(&format!(" {:>7} {:>6} {:>6} {:>6} {:>7}\n", "AA", "std", "PD", "ADR", "dAA"));
    let opt = |v: Option<f64>, k: f64| v.map_or("-".to_string(), |x| format!("{:.2}", k * x));
    for r in rows {
        out.push_str(&format!("{:<name_w$} {:>4}", r.name, r.runs));
        for a in &r.accuracy {
            out.push_str(&format!(" {:>6.2}", 100.0 * a));
        }
        for _ in r.accuracy.len()..n_sess {
            out.push_str(&format!(" {:>6}", "-"));
        }
        out.push_str(&format!(
            " {:>7.2} {:>6.2} {:>6} {:>6} {:>7.2}\n",
            100.0 * r.aa,
            100.0 * r.aa_std,
            opt(r.pd, 100.0),
            opt(r.adr, 1.0),
            100.0 * r.delta_aa
        ));
    }
    out
}

/// Report rows as CSV.
pub fn report_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let n_sess = rows.iter().map(|r| r.accuracy.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let e = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    let mut header = vec!["run".to_string(), "runs".to_string()];
    header.extend((0..n_sess).map(|s| format!("acc_{s}")));
    header.extend(["aa", "aa_std", "pd", "adr", "delta_aa"].map(String::from));
    w.write_record(&header).map_err(e)?;
    for r in rows {
        let mut rec = vec![r.name.clone(), r.runs.to_string()];
        rec.extend((0..n_sess).map(|s| r.accuracy.get(s).map_or(String::new(), |a| a.to_string())));
        rec.push(r.aa.to_string());
        rec.push(r.aa_std.to_string());
        rec.push(r.pd.map_or(String::new(), |v| v.to_string()));
        rec.push(r.adr.map_or(String::new(), |v| v.to_string()));
        rec.push(r.delta_aa.to_string());
        w.write_record(&rec).map_err(e)?;
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Correlation of estimated against true context components over `idx`;
/// `None` if any sample lacks a true context.
pub fn context_correlation(est: &EstimatorNet, ds: &Dataset, idx: &[usize]) -> Result<Option<[f64; 4]>> {
    let truth: Option<Vec<[f64; 4]>> = idx.iter().map(|&i| ds.samples[i].context.map(|c| c.to_array())).collect();
    let Some(truth) = truth else { return Ok(None) };
    let mut est_c = Vec::with_capacity(idx.len());
    for part in idx.chunks(64) {
        let batch: Vec<&Spectrogram> = part.iter().map(|&i| &ds.samples[i].spectrogram).collect();
        est_c.extend(est.estimate(&batch)?.into_iter().map(|c| c.to_array()));
    }
    for k in 0..4 {
        let b: Vec<f64> = est_c.iter().map(|t| t[k]).collect();
        let m = b.iter().sum::<f64>() / b.len() as f64;
        log::debug!("context component {k}: mean {m:.4} sd {:.4}", std_dev(&b));
    }
    let mut r = [0.0; 4];
    for (k, rk) in r.iter_mut().enumerate() {
        let a: Vec<f64> = truth.iter().map(|t| t[k]).collect();
        let b: Vec<f64> = est_c.iter().map(|t| t[k]).collect();
        *rk = pearson(&a, &b);
    }
    Ok(Some(r))
}
