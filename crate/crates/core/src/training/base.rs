//! Base session: a linear-head pretraining stage followed by joint training
//! with the cosine-prototype head and the full base objective.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{cosine_logits, loss_base, EpochLog, LossWeights, Model, Sgd, TrainSchedule};
use crate::error::{Error, Result};
use crate::nets::{HeadNet, Mode, Tape};
use crate::rng::stream;
use crate::spectrogram::Spectrogram;
use crate::transform::ContextBounds;
use crate::ucpc::ClassRecord;

/// Base-session training samples.
#[derive(Debug, Clone)]
pub struct BaseData<'a> {
    pub inputs: Vec<&'a Spectrogram>,
    /// Position of each sample's class within `classes`.
    pub labels: Vec<usize>,
    /// Class id per position.
    pub classes: Vec<usize>,
}

impl BaseData<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::Protocol("base split is empty".into()));
        }
        if self.inputs.len() != self.labels.len() {
            return Err(Error::Shape("one label per base input expected".into()));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.classes.len()) {
            return Err(Error::InvalidArgument(format!(
                "base label position {y} outside {} classes",
                self.classes.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub pretrain: TrainSchedule,
    pub full_base: TrainSchedule,
    pub weights: LossWeights,
    /// Pseudo-context draws per sample for the consistency term.
    pub p_count: usize,
    /// Also apply the consistency and magnitude terms while pretraining.
    pub cat_in_pretrain: bool,
    /// Multiplier on cosine logits.
    pub logit_scale: f64,
    /// Variance given to base-class records.
    pub base_variance: f64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            pretrain: TrainSchedule::new(0.1, 100),
            full_base: TrainSchedule::new(0.01, 10),
            weights: LossWeights::default(),
            p_count: 1,
            cat_in_pretrain: false,
            logit_scale: 1.0,
            base_variance: 0.05,
        }
    }
}

fn shuffled_batches(n: usize, batch: usize, seed: u64, path: &[u64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, path));
    let mut out: Vec<Vec<usize>> = idx.chunks(batch).map(<[usize]>::to_vec).collect();
    // Batch statistics need at least two samples.
    if out.len() > 1 && out.last().map_or(false, |b| b.len() < 2) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

#[derive(Clone, Copy)]
enum Head {
    Linear,
    Cosine,
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    stage: &str,
    stage_id: u64,
    data: &BaseData<'_>,
    model: &mut Model,
    head: &mut HeadNet,
    kind: Head,
    sched: &TrainSchedule,
    weights: &LossWeights,
    bounds: &ContextBounds,
    cfg: &BaseConfig,
    seed: u64,
    log: &mut Vec<EpochLog>,
) -> Result<()> {
    let mut opt_head = Sgd::new(&head.state, sched.momentum);
    let mut opt_emb = Sgd::new(&model.embedder.state, sched.momentum);
    let mut opt_est = model.estimator.as_ref().map(|e| Sgd::new(&e.state, sched.momentum));
    for epoch in 0..sched.epochs {
        let lr = sched.lr_at(epoch);
        let mut sums = [0.0; 4];
        let mut seen = 0usize;
        for (b, idx) in shuffled_batches(data.inputs.len(), sched.batch_size, seed, &[stage_id, epoch as u64])
            .into_iter()
            .enumerate()
        {
            let batch: Vec<&Spectrogram> = idx.iter().map(|&i| data.inputs[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut rng = stream(seed, &[stage_id, epoch as u64, b as u64, 0xCA7]);
            let mut tape = Tape::new();
            let h: &HeadNet = head;
            let scale = cfg.logit_scale;
            let loss = loss_base(
                &mut tape,
                model,
                &batch,
                &labels,
                weights,
                bounds,
                cfg.p_count,
                &mut rng,
                Mode::Train,
                |tape, z| match kind {
                    Head::Linear => h.logits(tape, z, 1.0),
                    Head::Cosine => {
                        let w = h.state.leaf(tape, 0);
                        cosine_logits(tape, z, w, scale)
                    }
                },
            )?;
            let grads = tape.backward(loss.total)?;
            head.state.accumulate(&tape, &grads);
            model.embedder.state.accumulate(&tape, &grads);
            if let Some(e) = &mut model.estimator {
                e.state.accumulate(&tape, &grads);
            }
            opt_head.step(&mut head.state, lr)?;
            opt_emb.step(&mut model.embedder.state, lr)?;
            if let (Some(e), Some(o)) = (&mut model.estimator, &mut opt_est) {
                o.step(&mut e.state, lr)?;
            }
            let n = batch.len();
            let val = |v: Option<crate::nets::Var>| v.map_or(0.0, |v| tape.value(v).item());
            sums[0] += n as f64 * tape.value(loss.total).item();
            sums[1] += n as f64 * tape.value(loss.ce).item();
            sums[2] += n as f64 * val(loss.cat);
            sums[3] += n as f64 * val(loss.reg);
            seen += n;
        }
        let k = seen.max(1) as f64;
        log::debug!("{stage} epoch {epoch}: loss {:.4}", sums[0] / k);
        log.push(EpochLog {
            stage: stage.to_string(),
            epoch,
            lr,
            loss: sums[0] / k,
            ce: sums[1] / k,
            cat: sums[2] / k,
            reg: sums[3] / k,
        });
    }
    Ok(())
}

/// Per-class means of unit-length eval embeddings, in `classes` order.
pub fn class_means(model: &Model, data: &BaseData<'_>) -> Result<Vec<Vec<f64>>> {
    let z = model.embed_unit_rms(&data.inputs, 64)?;
    let d = model.embedder.embed_dim();
    let mut sums = vec![vec![0.0; d]; data.classes.len()];
    let mut counts = vec![0usize; data.classes.len()];
    for (zi, &y) in z.iter().zip(&data.labels) {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(zi) {
            *s += v;
        }
    }
    for (k, (s, &c)) in sums.iter_mut().zip(&counts).enumerate() {
        if c == 0 {
            return Err(Error::Protocol(format!(
                "base class {} has no training samples",
                data.classes[k]
            )));
        }
        for v in s.iter_mut() {
            *v /= c as f64;
        }
    }
    Ok(sums)
}

/// Train the feature pipeline on the base session and return one record
/// per base class plus the per-epoch loss log.
pub fn train_base(
    data: &BaseData<'_>,
    model: &mut Model,
    cfg: &BaseConfig,
    bounds: &ContextBounds,
    seed: u64,
) -> Result<(Vec<ClassRecord>, Vec<EpochLog>)> {
    data.validate()?;
    let mut log = Vec::new();
    let d = model.embedder.embed_dim();
    let k = data.classes.len();

    let mut pre_weights = cfg.weights;
    if !cfg.cat_in_pretrain {
        pre_weights.lambda_cat = 0.0;
        pre_weights.lambda_reg = 0.0;
    }
    let mut linear = HeadNet::linear(k, d, seed);
    run_stage(
        "pretrain", 1, data, model, &mut linear, Head::Linear, &cfg.pretrain, &pre_weights, bounds, cfg, seed,
        &mut log,
    )?;

    if cfg.full_base.epochs > 0 {
        let init = class_means(model, data)?;
        let mut cosine = HeadNet::cosine(&init)?;
        run_stage(
            "full_base", 2, data, model, &mut cosine, Head::Cosine, &cfg.full_base, &cfg.weights, bounds, cfg,
            seed, &mut log,
        )?;
    }

    let means = class_means(model, data)?;
    let records = means
        .into_iter()
        .zip(&data.classes)
        .map(|(m, &class)| ClassRecord {
            class,
            session: 0,
            center: m.clone(),
            prototype: m,
            variance: cfg.base_variance,
            uncertainty: 0.0,
        })
        .collect();
    Ok((records, log))
}
