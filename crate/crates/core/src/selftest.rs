//! Invariant suites behind the `selftest` and `gradcheck` commands. Each
//! check reports instead of panicking so a run lists every failure.

use std::collections::BTreeSet;

use rand::Rng;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::experiment::{load_dataset, run_once};
use crate::frontend::dataset::Record;
use crate::frontend::mel::{log_mel, LOG_FLOOR};
use crate::frontend::{MelConfig, RawRecording};
use crate::harness::{build_sessions, metrics};
use crate::nets::gradcheck::{grad_check, GradCheckReport};
use crate::nets::{batch_tensor, EmbedderConfig, EmbedderNet, EstimatorConfig, EstimatorNet, Mode, NetState, Architecture, Tensor};
use crate::rng::stream;
use crate::spectrogram::{SpecShape, Spectrogram};
use crate::training::{loss_cat_with_anchor, loss_incremental, perturb_batch, IncrementalBatch};
use crate::transform::{apply_amplitude, apply_inverse, apply_transform, grid_sample, make_grid, sample_pseudo_context, ContextBounds, ContextParams};
use crate::ucpc::{shrink, PriorStats};

#[derive(Debug, Clone)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(suite: &'static str, name: &str, passed: bool, detail: String) -> Self {
        Self {
            suite,
            name: name.to_string(),
            passed,
            detail,
        }
    }

    fn from_result(suite: &'static str, name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((ok, d)) => Self::new(suite, name, ok, d),
            Err(e) => Self::new(suite, name, false, format!("error: {e}")),
        }
    }
}

fn random_spec<R: Rng>(shape: SpecShape, rng: &mut R) -> Spectrogram {
    Spectrogram::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn max_abs_diff(a: &Spectrogram, b: &Spectrogram) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Metrics of two published per-session rows (accuracies in percent).
pub fn metric_suite() -> Vec<Check> {
    let rows: [(&str, [f64; 10], f64, f64, Option<f64>); 2] = [
        (
            "proposed-row",
            [96.65, 92.27, 88.21, 86.54, 82.39, 78.74, 76.61, 74.85, 72.51, 70.96],
            81.97,
            25.69,
            Some(3.03),
        ),
        (
            "replay-row",
            [93.25, 89.09, 85.93, 84.04, 80.82, 77.58, 76.09, 73.16, 70.86, 69.95],
            80.08,
            23.30,
            Some(2.82),
        ),
    ];
    rows.iter()
        .map(|(name, row, aa, pd, adr)| {
            let acc: Vec<f64> = row.iter().map(|v| v / 100.0).collect();
            let r = metrics(&acc).map(|m| {
                let got_pd = 100.0 * m.pd.unwrap_or(f64::NAN);
                let got_adr = m.adr.unwrap_or(f64::NAN);
                let mut ok = (100.0 * m.aa - aa).abs() <= 0.02 && (got_pd - pd).abs() <= 0.02;
                if let Some(adr) = adr {
                    ok &= (got_adr - adr).abs() <= 0.02;
                }
                (ok, format!("AA {:.3} PD {:.3} ADR {:.3}", 100.0 * m.aa, got_pd, got_adr))
            });
            Check::from_result("metrics", name, r)
        })
        .collect()
}

/// Identity law, amplitude group law, sampler linearity and exact
/// amplitude-only inversion on `trials` random inputs.
pub fn transform_suite(trials: usize, seed: u64) -> Vec<Check> {
    const TOL: f64 = 1e-10;
    let mut rng = stream(seed, &[0x7F]);
    let bounds = ContextBounds::default();
    let mut worst = [0.0f64; 4];
    let mut err = None;
    for _ in 0..trials {
        let shape = SpecShape::new(rng.gen_range(1..3), rng.gen_range(2..12), rng.gen_range(2..12));
        let m = random_spec(shape, &mut rng);
        let step = || -> Result<[f64; 4]> {
            let mut rng = stream(rng_seed(&m), &[1]);
            let id = apply_transform(&m, &ContextParams::new(0.0, 1.0, 0.0, 0.0))?;
            let (b1, s1, b2, s2) = (
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.15..0.15),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.15..0.15),
            );
            let group = max_abs_diff(
                &apply_amplitude(&apply_amplitude(&m, b2, s2), b1, s1),
                &apply_amplitude(&m, b1 + b2, s1 + s2),
            );
            let c = sample_pseudo_context(&bounds, &mut rng);
            let g = make_grid(&c, shape.mel_bins, shape.frames)?;
            let m2 = random_spec(shape, &mut rng);
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let lhs = grid_sample(&m.lin_comb(a, &m2, b)?, &g)?;
            let rhs = grid_sample(&m, &g)?.lin_comb(a, &grid_sample(&m2, &g)?, b)?;
            let amp = ContextParams::new(0.0, 1.0, b1, s1);
            let back = apply_inverse(&apply_transform(&m, &amp)?, &amp)?;
            Ok([max_abs_diff(&id, &m), group, max_abs_diff(&lhs, &rhs), max_abs_diff(&back, &m)])
        };
        match step() {
            Ok(e) => {
                for k in 0..4 {
                    worst[k] = worst[k].max(e[k]);
                }
            }
            Err(e) => {
                err = Some(e);
                break;
            }
        }
    }
    let names = ["identity-law", "amplitude-group-law", "sampler-linearity", "amplitude-inversion"];
    names
        .iter()
        .zip(worst)
        .map(|(n, w)| match &err {
            Some(e) => Check::new("transform", n, false, format!("error: {e}")),
            None => Check::new("transform", n, w <= TOL, format!("max error {w:.2e} over {trials} inputs")),
        })
        .collect()
}

fn rng_seed(m: &Spectrogram) -> u64 {
    m.values().iter().fold(0u64, |h, v| h.rotate_left(5) ^ v.to_bits())
}

/// Posterior mean and variance of a scalar center with prior `N(mp, vp)`
/// after observing `my` with noise variance `vy`, by trapezoid integration.
pub fn grid_posterior(my: f64, mp: f64, vy: f64, vp: f64) -> (f64, f64) {
    let sd = vy.min(vp).sqrt();
    let (lo, hi) = (my.min(mp) - 12.0 * sd, my.max(mp) + 12.0 * sd);
    let n = 40_000;
    let h = (hi - lo) / n as f64;
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let d = w * (-(x - mp).powi(2) / (2.0 * vp) - (x - my).powi(2) / (2.0 * vy)).exp();
        z += d;
        m1 += d * x;
        m2 += d * x * x;
    }
    let mean = m1 / z;
    (mean, m2 / z - mean * mean)
}

pub fn bayes_suite(trials: usize, seed: u64) -> Vec<Check> {
    let mut rng = stream(seed, &[0xBA7E5]);
    let mut worst = (0.0f64, 0.0f64);
    let mut err = None;
    for _ in 0..trials {
        let (my, mp) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let (vy, vp) = (rng.gen_range(0.01..2.0), rng.gen_range(0.01..2.0));
        let prior = PriorStats {
            mean: vec![mp],
            variance: vp,
        };
        match shrink(&[my], &prior, vy) {
            Ok(s) => {
                let (gm, gv) = grid_posterior(my, mp, vy, vp);
                worst.0 = worst.0.max((s.center[0] - gm).abs());
                worst.1 = worst.1.max((s.variance - gv).abs());
            }
            Err(e) => err = Some(e),
        }
    }
    let mut lambdas = Vec::new();
    let prior = PriorStats {
        mean: vec![0.0],
        variance: 0.5,
    };
    for k in 1..=50 {
        match shrink(&[1.0], &prior, 0.02 * k as f64) {
            Ok(s) => lambdas.push(s.lambda),
            Err(e) => err = Some(e),
        }
    }
    let monotone = lambdas.windows(2).all(|w| w[1] > w[0]);
    if let Some(e) = err {
        return vec![Check::new("bayes", "shrinkage", false, format!("error: {e}"))];
    }
    vec![
        Check::new(
            "bayes",
            "posterior-vs-grid",
            worst.0 <= 1e-6 && worst.1 <= 1e-6,
            format!("max |mean err| {:.2e}, max |var err| {:.2e}", worst.0, worst.1),
        ),
        Check::new(
            "bayes",
            "lambda-monotone",
            monotone,
            format!("lambda {:.3} -> {:.3}", lambdas[0], lambdas[lambdas.len() - 1]),
        ),
    ]
}

pub fn frontend_suite(seed: u64) -> Vec<Check> {
    let cfg = MelConfig::default();
    let frames = [128usize, 129, 143, 144, 500, 1000]
        .iter()
        .map(|&len| {
            let rec = RawRecording::new(vec![vec![0.0; len]], cfg.sample_rate, 0)?;
            let m = log_mel(&rec, &cfg)?;
            Ok(m.frames() == 1 + (len - cfg.window_len) / cfg.hop_len)
        })
        .collect::<Result<Vec<bool>>>();
    let floor = RawRecording::new(vec![vec![0.0; 400]], cfg.sample_rate, 0)
        .and_then(|r| log_mel(&r, &cfg))
        .map(|m| m.values().iter().all(|&v| v == LOG_FLOOR.ln()));
    let mut rng = stream(seed, &[0xF11E]);
    let hop = hop_shift_error(&cfg, &mut rng).map(|e| (e <= 1e-9, format!("max error {e:.2e}")));
    let m = random_spec(SpecShape::new(2, 5, 7), &mut rng);
    let rec = Record::from_spectrogram(&m, 3);
    let round = rec
        .encode()
        .and_then(|b| Record::decode(&b, std::path::Path::new("<memory>")))
        .map(|back| back == rec && back.encode().ok() == rec.encode().ok());
    vec![
        Check::from_result(
            "frontend",
            "frame-count",
            frames.map(|v| (v.iter().all(|&b| b), format!("{} lengths", v.len()))),
        ),
        Check::from_result("frontend", "hop-shift", hop),
        Check::from_result("frontend", "zero-floor", floor.map(|ok| (ok, format!("ln({LOG_FLOOR:e})")))),
        Check::from_result("frontend", "record-roundtrip", round.map(|ok| (ok, "bit-exact".into()))),
    ]
}

/// Delaying a signal by one hop must delay its spectrogram by one frame.
fn hop_shift_error<R: Rng>(cfg: &MelConfig, rng: &mut R) -> Result<f64> {
    let len = cfg.window_len + 12 * cfg.hop_len;
    let x: Vec<f64> = (0..len + cfg.hop_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let a = log_mel(&RawRecording::new(vec![x[cfg.hop_len..].to_vec()], cfg.sample_rate, 0)?, cfg)?;
    let b = log_mel(&RawRecording::new(vec![x[..len].to_vec()], cfg.sample_rate, 0)?, cfg)?;
    let mut worst = 0.0f64;
    for m in 0..a.mel_bins() {
        for t in 0..a.frames() - 1 {
            worst = worst.max((a.get(0, m, t) - b.get(0, m, t + 1)).abs());
        }
    }
    Ok(worst)
}

/// Disjointness, shot counts and test coverage on the configured data, and
/// byte-identical results for two runs of the smoke configuration.
pub fn protocol_suite(cfg: &ExperimentConfig) -> Vec<Check> {
    let mut out = Vec::new();
    let ledger = load_dataset(cfg).and_then(|ds| build_sessions(&ds, &cfg.protocol).map(|l| (ds, l)));
    match ledger {
        Err(e) => out.push(Check::new("protocol", "build", false, format!("error: {e}"))),
        Ok((ds, l)) => {
            out.push(Check::from_result("protocol", "disjoint-and-shots", l.check(&ds).map(|_| (true, format!("{} sessions", l.sessions.len())))));
            let mut covered = true;
            for s in 0..l.sessions.len() {
                let seen: BTreeSet<usize> = l.seen_classes(s).into_iter().collect();
                let labels: BTreeSet<usize> = l.test_indices(s).iter().map(|&i| ds.samples[i].label).collect();
                let supports: BTreeSet<usize> = l.sessions[..=s].iter().flat_map(|p| p.support.iter().copied()).collect();
                covered &= labels == seen && l.test_indices(s).iter().all(|i| !supports.contains(i));
            }
            out.push(Check::new("protocol", "cumulative-coverage", covered, "test labels equal seen classes".into()));
        }
    }
    let smoke = ExperimentConfig::smoke();
    let csv = || -> Result<Vec<u8>> {
        let ds = load_dataset(&smoke)?;
        run_once(&smoke, &ds, 7, None)?.results.to_csv()
    };
    out.push(Check::from_result(
        "protocol",
        "determinism",
        csv().and_then(|a| csv().map(|b| (a == b, format!("{} bytes", a.len())))),
    ));
    out
}

/// Every suite. The protocol suite uses `cfg`'s data and protocol.
pub fn selftest(cfg: &ExperimentConfig, seed: u64) -> Vec<Check> {
    let mut all = metric_suite();
    all.extend(transform_suite(1000, seed));
    all.extend(bayes_suite(100, seed));
    all.extend(frontend_suite(seed));
    all.extend(gradcheck_suite(seed));
    all.extend(protocol_suite(cfg));
    all
}

fn grad_report(name: &str, r: Result<GradCheckReport>) -> Check {
    if let Ok(rep) = &r {
        for p in rep.failures() {
            log::debug!("{name}: {p:?}");
        }
    }
    Check::from_result(
        "gradcheck",
        name,
        r.map(|rep| {
            (
                rep.passed(),
                format!("{} probes, max rel err {:.2e}", rep.probes.len(), rep.max_rel_err()),
            )
        }),
    )
}

fn gc_inputs(shape: SpecShape, n: usize, seed: u64) -> Vec<Spectrogram> {
    let mut rng = stream(seed, &[0x6C]);
    (0..n)
        .map(|_| Spectrogram::from_fn(shape, |_, f, t| ((f * 3 + t) as f64 * 0.37).sin() * 0.6 + rng.gen_range(-0.2..0.2)))
        .collect()
}

fn gc_estimator(shape: SpecShape, seed: u64) -> Result<EstimatorNet> {
    let cfg = EstimatorConfig {
        block_count: 2,
        base_width: 4,
        freq_coord: true,
        time_coord: true,
    };
    let mut net = EstimatorNet::new(cfg, shape, ContextBounds::default(), seed)?;
    // Off zero so sampling positions are not grid-aligned.
    let mut rng = stream(seed, &[0x4EAD]);
    for name in ["head.weight", "head.bias"] {
        let i = net.state.param_index(name).expect("estimator head");
        for v in net.state.params_mut()[i].data_mut() {
            *v = rng.gen_range(-0.4..0.4);
        }
    }
    Ok(net)
}

/// Finite-difference checks of every loss term, including the consistency
/// term through the warp, plus the stop-gradient dual check: with the
/// anchor frozen the analytic gradient must match differences of the
/// frozen-anchor loss and must not match differences of the loss whose
/// anchor moves with the parameters.
pub fn gradcheck_suite(seed: u64) -> Vec<Check> {
    let shape = SpecShape::new(1, 8, 6);
    let xs = gc_inputs(shape, 3, seed);
    let refs: Vec<&Spectrogram> = xs.iter().collect();
    let bounds = ContextBounds::default();
    let mut out = Vec::new();

    let ce = (|| {
        let mut emb = EmbedderNet::new(
            EmbedderConfig {
                widths: vec![4, 6],
                blocks_per_stage: 1,
                embed_dim: 8,
                freq_coord: true,
                time_coord: false,
            },
            shape,
            seed,
        )?;
        let x = batch_tensor(&refs)?;
        let w = Tensor::new(vec![3, 8], (0..24).map(|k| (k as f64 * 0.9).cos()).collect())?;
        grad_check(&mut emb, 30, seed, |n, tape| {
            let v = tape.constant(x.clone());
            let z = n.forward(tape, v, Mode::Train)?;
            let p = tape.constant(w.clone());
            let l = crate::training::cosine_logits(tape, z, p, 4.0)?;
            tape.softmax_ce(l, &[0, 2, 1])
        })
    })();
    out.push(grad_report("cross-entropy", ce));

    let mut rng = stream(seed, &[0xCA7]);
    let perturbed = perturb_batch(&refs, &bounds, 1, &mut rng).map(|(p, _)| p);
    let cat = (|| {
        let mut est = gc_estimator(shape, seed)?;
        let p = perturbed
            .as_ref()
            .map_err(|e| crate::error::Error::InvalidArgument(e.to_string()))?
            .clone();
        let prefs: Vec<&Spectrogram> = p.iter().collect();
        let pt = batch_tensor(&prefs)?;
        let x = batch_tensor(&refs)?;
        // The anchor is a stop-gradient target, so differences must hold it
        // fixed too.
        let anchor_val = {
            let mut tape = crate::nets::Tape::new();
            let v = tape.constant(x.clone());
            let c = est.forward_eval(&mut tape, v)?;
            let canon = tape.canonicalize(v, c)?;
            tape.value(canon).clone()
        };
        grad_check(&mut est, 30, seed, |n, tape| {
            let v = tape.constant(x.clone());
            let c = n.forward(tape, v, Mode::Eval)?;
            let anchor = tape.constant(anchor_val.clone());
            let l = loss_cat_with_anchor(tape, n, pt.clone(), anchor, Mode::Eval)?;
            let reg = tape.context_penalty(c);
            tape.add_scaled(l, reg, 0.1)
        })
    })();
    out.push(grad_report("consistency-and-magnitude", cat));

    out.push(stop_gradient_check(&refs, perturbed, seed));

    let inc = (|| {
        let dim = 5;
        let rows = 4;
        let mut r = stream(seed, &[0x1C]);
        let centers = Tensor::new(vec![rows, dim], (0..rows * dim).map(|_| r.gen_range(-1.0..1.0)).collect())?;
        let raw = Tensor::new(vec![rows], (0..rows).map(|_| r.gen_range(-2.0..0.0)).collect())?;
        let mut table = NetState::with_params(
            Architecture::PrototypeTable { classes: rows, dim },
            vec![("centers".into(), centers), ("raw_variance".into(), raw)],
        );
        let new_z = Tensor::new(vec![4, dim], (0..4 * dim).map(|_| r.gen_range(-1.0..1.0)).collect())?;
        let old = Tensor::new(vec![2, dim], (0..2 * dim).map(|_| r.gen_range(-1.0..1.0)).collect())?;
        let noise: Vec<f64> = (0..rows * dim).map(|_| r.gen_range(-1.5..1.5)).collect();
        grad_check(&mut table, 24, seed, |n, tape| {
            let c = n.leaf(tape, 0);
            let rv = n.leaf(tape, 1);
            let v = tape.softplus(rv);
            let batch = IncrementalBatch {
                new_z: &new_z,
                new_labels: &[0, 1, 1, 0],
                session_rows: &[2, 3],
                old_means: &old,
                old_labels: &[0, 1],
            };
            Ok(loss_incremental(tape, c, v, &batch, 1.0, Some(noise.clone()), 3.0)?.total)
        })
    })();
    out.push(grad_report("incremental", inc));
    out
}

fn stop_gradient_check(refs: &[&Spectrogram], perturbed: Result<Vec<Spectrogram>>, seed: u64) -> Check {
    let r = (|| -> Result<(bool, String)> {
        let shape = refs[0].shape();
        let mut est = gc_estimator(shape, seed)?;
        let p = perturbed?;
        let prefs: Vec<&Spectrogram> = p.iter().collect();
        let pt = batch_tensor(&prefs)?;
        let x = batch_tensor(refs)?;
        let frozen = |n: &mut EstimatorNet, tape: &mut crate::nets::Tape| {
            let v = tape.constant(x.clone());
            let c = n.forward(tape, v, Mode::Eval)?;
            let canon = tape.canonicalize(v, c)?;
            let anchor = tape.detach(canon);
            loss_cat_with_anchor(tape, n, pt.clone(), anchor, Mode::Eval)
        };
        let analytic = {
            let mut f = frozen;
            crate::nets::gradcheck::analytic_grads(&mut est, &mut f)?
        };
        // Numeric differences of the frozen-anchor loss: the anchor value is
        // taken at the unperturbed parameters and held fixed.
        let anchor_val = {
            let mut tape = crate::nets::Tape::new();
            let v = tape.constant(x.clone());
            let c = est.forward_eval(&mut tape, v)?;
            let canon = tape.canonicalize(v, c)?;
            tape.value(canon).clone()
        };
        let eval = |n: &EstimatorNet, moving: bool| -> Result<f64> {
            let mut tape = crate::nets::Tape::new();
            let anchor = if moving {
                let v = tape.constant(x.clone());
                let c = n.forward_eval(&mut tape, v)?;
                let canon = tape.canonicalize(v, c)?;
                tape.detach(canon)
            } else {
                tape.constant(anchor_val.clone())
            };
            let pv = tape.constant(pt.clone());
            let c = n.forward_eval(&mut tape, pv)?;
            let canon = tape.canonicalize(pv, c)?;
            let l = tape.mean_abs_diff(canon, anchor)?;
            Ok(tape.value(l).item())
        };
        let h = crate::nets::gradcheck::FD_STEP;
        let total = est.state.scalar_count();
        let head: Vec<usize> = (total - 4 * (1 + est.state.params()[est.state.param_index("head.weight").expect("head")].shape()[1])..total).collect();
        let (mut max_frozen, mut max_moving_gap) = (0.0f64, 0.0f64);
        for &k in &head {
            let (pi, ei) = est.state.locate(k).expect("flat index");
            let orig = est.state.params()[pi].data()[ei];
            let mut fd = [0.0; 2];
            for (j, moving) in [false, true].into_iter().enumerate() {
                est.state.params_mut()[pi].data_mut()[ei] = orig + h;
                let up = eval(&est, moving)?;
                est.state.params_mut()[pi].data_mut()[ei] = orig - h;
                let down = eval(&est, moving)?;
                est.state.params_mut()[pi].data_mut()[ei] = orig;
                fd[j] = (up - down) / (2.0 * h);
            }
            max_frozen = max_frozen.max(crate::nets::gradcheck::rel_err(analytic[k], fd[0]));
            max_moving_gap = max_moving_gap.max(crate::nets::gradcheck::rel_err(analytic[k], fd[1]));
        }
        let ok = max_frozen <= crate::nets::gradcheck::REL_TOL && max_moving_gap > 10.0 * crate::nets::gradcheck::REL_TOL;
        Ok((
            ok,
            format!("frozen-anchor rel err {max_frozen:.2e}; moving-anchor gap {max_moving_gap:.2e}"),
        ))
    })();
    Check::from_result("gradcheck", "stop-gradient-anchor", r)
}

