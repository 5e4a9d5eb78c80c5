//! Incremental sessions: frozen features, calibrated initialization of the
//! new classes, then optimization of every class's center and variance.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{loss_incremental, prototype_noise, IncrementalBatch, Model, Sgd, TrainSchedule};
use crate::error::{Error, Result};
use crate::nets::tape::{softplus, softplus_inv};
use crate::nets::{Architecture, NetState, Tape, Tensor};
use crate::rng::stream;
use crate::spectrogram::Spectrogram;
use crate::strategy::PrototypeCalibrator;
use crate::transform::ContextBounds;
use crate::ucpc::{class_uncertainty, prior_stats, sample_uncertainty, ClassRecord};

/// What the pseudo-contexts of the uncertainty estimate are applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSource {
    /// The canonicalized observation `N(M_obs)`.
    Canonicalized,
    /// The true canonical spectrogram, when the data provides it.
    TrueCanonical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncrementalConfig {
    pub schedule: TrainSchedule,
    pub lambda_old: f64,
    pub n_ucpc: usize,
    pub anchor: AnchorSource,
    pub logit_scale: f64,
}

impl Default for IncrementalConfig {
    fn default() -> Self {
        Self {
            schedule: TrainSchedule::new(0.1, 200),
            lambda_old: 1.0,
            n_ucpc: 20,
            anchor: AnchorSource::Canonicalized,
            logit_scale: 1.0,
        }
    }
}

/// Support set of one incremental session.
#[derive(Debug, Clone)]
pub struct SessionData<'a> {
    pub session: usize,
    pub inputs: Vec<&'a Spectrogram>,
    /// Class id per support sample.
    pub classes: Vec<usize>,
    /// True canonical spectrogram per support sample, if known.
    pub canonicals: Option<Vec<&'a Spectrogram>>,
}

/// Diagnostics of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: usize,
    /// `(class, U_y, lambda_y)` for each new class.
    pub calibration: Vec<(usize, f64, f64)>,
    pub losses: Vec<f64>,
}

/// Add the session's classes to `records` and optimize all centers (and,
/// when the calibrator asks for it, variances) with the incremental loss.
pub fn train_incremental(
    data: &SessionData<'_>,
    model: &Model,
    records: &mut Vec<ClassRecord>,
    calibrator: &dyn PrototypeCalibrator,
    cfg: &IncrementalConfig,
    bounds: &ContextBounds,
    seed: u64,
) -> Result<SessionReport> {
    if data.inputs.len() != data.classes.len() {
        return Err(Error::Shape("one class per support sample expected".into()));
    }
    let new: BTreeSet<usize> = data.classes.iter().copied().collect();
    if new.is_empty() {
        return Err(Error::Protocol(format!("session {} has no support", data.session)));
    }
    if let Some(r) = records.iter().find(|r| new.contains(&r.class)) {
        return Err(Error::Protocol(format!(
            "class {} of session {} was already introduced in session {}",
            r.class, data.session, r.session
        )));
    }
    let old_count = records.len();
    let est = model.context_estimator();
    let z = model.embed_unit_rms(&data.inputs, 64)?;
    let d = model.embedder.embed_dim();

    let prior = (old_count >= 2).then(|| prior_stats(records)).transpose()?;
    let mut calibration = Vec::new();
    for &class in &new {
        let idx: Vec<usize> = (0..data.classes.len()).filter(|&i| data.classes[i] == class).collect();
        let mut proto = vec![0.0; d];
        for &i in &idx {
            for (p, v) in proto.iter_mut().zip(&z[i]) {
                *p += v / idx.len() as f64;
            }
        }
        let uncertainty = if calibrator.needs_uncertainty() {
            let mut us = Vec::with_capacity(idx.len());
            for &i in &idx {
                let obs = data.inputs[i];
                let base = match (cfg.anchor, &data.canonicals) {
                    (AnchorSource::TrueCanonical, Some(c)) => c[i].clone(),
                    (AnchorSource::TrueCanonical, None) => {
                        return Err(Error::config(
                            "incremental.anchor",
                            "true_canonical needs data with canonical spectrograms",
                        ))
                    }
                    (AnchorSource::Canonicalized, _) => est.canonicalize(obs)?,
                };
                let mut rng = stream(seed, &[0x0C9C, data.session as u64, class as u64, i as u64]);
                us.push(sample_uncertainty(est, &base, obs, cfg.n_ucpc, bounds, &mut rng)?);
            }
            class_uncertainty(&us)?
        } else {
            0.0
        };
        let cal = calibrator.calibrate(&proto, uncertainty, prior.as_ref())?;
        calibration.push((class, uncertainty, cal.lambda));
        records.push(ClassRecord {
            class,
            session: data.session,
            prototype: proto,
            center: cal.center,
            variance: cal.variance,
            uncertainty,
        });
    }

    let losses = optimize_records(records, old_count, &data.classes, &z, calibrator.trains_variance(), cfg, seed, data.session)?;
    for r in records.iter() {
        r.validate()?;
    }
    Ok(SessionReport {
        session: data.session,
        calibration,
        losses,
    })
}

#[allow(clippy::too_many_arguments)]
fn optimize_records(
    records: &mut [ClassRecord],
    old_count: usize,
    support_classes: &[usize],
    z: &[Vec<f64>],
    train_variance: bool,
    cfg: &IncrementalConfig,
    seed: u64,
    session: usize,
) -> Result<Vec<f64>> {
    let k = records.len();
    let d = records[0].center.len();
    let sched = &cfg.schedule;
    if sched.epochs == 0 {
        return Ok(Vec::new());
    }
    let centers: Vec<&[f64]> = records.iter().map(|r| r.center.as_slice()).collect();
    let rho: Vec<f64> = records.iter().map(|r| softplus_inv(r.variance)).collect();
    let mut table = NetState::with_params(
        Architecture::PrototypeTable { classes: k, dim: d },
        vec![
            ("centers".into(), Tensor::stack(&centers, &[d])?),
            ("raw_variance".into(), Tensor::new(vec![k], rho)?),
        ],
    );
    let session_rows: Vec<usize> = (old_count..k).collect();
    let row_of = |class: usize| records.iter().position(|r| r.class == class).expect("known class");
    let new_labels: Vec<usize> = support_classes.iter().map(|&c| row_of(c) - old_count).collect();
    let z_rows: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
    let new_z = Tensor::stack(&z_rows, &[d])?;
    let old_rows: Vec<&[f64]> = records[..old_count].iter().map(|r| r.prototype.as_slice()).collect();
    let old_means = Tensor::stack(&old_rows, &[d])?;
    let old_labels: Vec<usize> = (0..old_count).collect();
    let batch = IncrementalBatch {
        new_z: &new_z,
        new_labels: &new_labels,
        session_rows: &session_rows,
        old_means: &old_means,
        old_labels: &old_labels,
    };

    let mut opt = Sgd::new(&table, sched.momentum);
    let mut losses = Vec::with_capacity(sched.epochs);
    for epoch in 0..sched.epochs {
        let mut rng = stream(seed, &[0x14C, session as u64, epoch as u64]);
        let mut tape = Tape::new();
        let c = table.leaf(&mut tape, 0);
        let raw = table.leaf(&mut tape, 1);
        let var = tape.softplus(raw);
        let noise = prototype_noise(k, d, &mut rng);
        let loss = loss_incremental(&mut tape, c, var, &batch, cfg.lambda_old, Some(noise), cfg.logit_scale)?;
        let value = tape.value(loss.total).item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("session {session} epoch {epoch}: loss {value}")));
        }
        let grads = tape.backward(loss.total)?;
        table.accumulate(&tape, &grads);
        if !train_variance {
            table.zero_grad_of(1);
        }
        opt.step(&mut table, sched.lr_at(epoch))?;
        losses.push(value);
    }
    let p = table.params();
    for (i, r) in records.iter_mut().enumerate() {
        r.center = p[0].row(i).to_vec();
        if train_variance {
            r.variance = softplus(p[1].data()[i]);
        }
    }
    Ok(losses)
}
