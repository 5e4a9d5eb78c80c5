//! Loss terms, optimizer and the base / incremental training loops.

mod base;
mod incremental;

pub use base::{train_base, BaseConfig, BaseData};
pub use incremental::{train_incremental, AnchorSource, IncrementalConfig, SessionData, SessionReport};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{batch_tensor, EmbedderNet, EstimatorNet, Mode, NetState, Tape, Tensor, Var};
use crate::spectrogram::Spectrogram;
use crate::strategy::{ContextEstimator, IdentityEstimator};
use crate::transform::{apply_transform, sample_pseudo_context, ContextBounds, ContextParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the pseudo-context consistency term.
    pub lambda_cat: f64,
    /// Weight of the context-magnitude penalty.
    pub lambda_reg: f64,
    /// Weight of the old-class term in incremental sessions.
    pub lambda_old: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cat: 0.05,
            lambda_reg: 1e-4,
            lambda_old: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("weights.lambda_cat", self.lambda_cat),
            ("weights.lambda_reg", self.lambda_reg),
            ("weights.lambda_old", self.lambda_old),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// SGD-with-momentum schedule of one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub lr: f64,
    pub epochs: usize,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 100,
            decay_factor: 0.5,
            decay_period: 40,
            batch_size: 64,
            momentum: 0.9,
        }
    }
}

impl TrainSchedule {
    pub fn new(lr: f64, epochs: usize) -> Self {
        Self {
            lr,
            epochs,
            ..Self::default()
        }
    }

    /// `lr * decay_factor^floor(epoch / decay_period)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_period) as i32)
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{field}.lr"), "must be finite and > 0"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config(format!("{field}.decay_factor"), "must be in (0, 1]"));
        }
        if self.decay_period == 0 {
            return Err(Error::config(format!("{field}.decay_period"), "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{field}.batch_size"), "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("{field}.momentum"), "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Default schedules of the three stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedules {
    pub pretrain: TrainSchedule,
    pub full_base: TrainSchedule,
    pub incremental: TrainSchedule,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            pretrain: TrainSchedule::new(0.1, 100),
            full_base: TrainSchedule::new(0.01, 10),
            incremental: TrainSchedule::new(0.1, 200),
        }
    }
}

impl Schedules {
    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate("schedules.pretrain")?;
        self.full_base.validate("schedules.full_base")?;
        self.incremental.validate("schedules.incremental")
    }
}

/// Momentum buffers for one [`NetState`].
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Vec<Tensor>,
    momentum: f64,
}

impl Sgd {
    pub fn new(state: &NetState, momentum: f64) -> Self {
        Self {
            velocity: state.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            momentum,
        }
    }

    /// `v = m v + g; p -= lr v`, then clears the gradients. Parameters that
    /// become non-finite abort with a diagnostic.
    pub fn step(&mut self, state: &mut NetState, lr: f64) -> Result<()> {
        let grads: Vec<Tensor> = state.grads().to_vec();
        for ((p, v), g) in state.params_mut().iter_mut().zip(&mut self.velocity).zip(&grads) {
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        state.zero_grad();
        if !state.all_finite() {
            return Err(Error::Diverged("non-finite parameter after an optimizer step".into()));
        }
        Ok(())
    }
}

/// The trained feature pipeline: optional context estimator and embedder.
#[derive(Debug, Clone)]
pub struct Model {
    /// `None` bypasses canonicalization entirely.
    pub estimator: Option<EstimatorNet>,
    pub embedder: EmbedderNet,
}

impl Model {
    pub fn context_estimator(&self) -> &dyn ContextEstimator {
        match &self.estimator {
            Some(e) => e,
            None => &IdentityEstimator,
        }
    }

    /// Records canonicalization (when enabled) and embedding of `x`.
    /// Returns `(embedding, canonicalized input, context)`.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<(Var, Var, Option<Var>)> {
        let (canon, ctx) = match &mut self.estimator {
            Some(est) => {
                let c = est.forward(tape, x, mode)?;
                (tape.canonicalize(x, c)?, Some(c))
            }
            None => (x, None),
        };
        let z = self.embedder.forward(tape, canon, mode)?;
        Ok((z, canon, ctx))
    }

    /// Eval-mode embeddings rescaled to norm `sqrt(d)`, so each coordinate
    /// has unit RMS and the variance map's units do not depend on `d`.
    /// Computed in chunks.
    pub fn embed_unit_rms(&self, inputs: &[&Spectrogram], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let est = self.context_estimator();
        let mut out = Vec::with_capacity(inputs.len());
        for part in inputs.chunks(chunk.max(1)) {
            let canon = est.canonicalize_batch(part)?;
            let refs: Vec<&Spectrogram> = canon.iter().collect();
            let k = (self.embedder.embed_dim() as f64).sqrt();
            for z in self.embedder.embed(&refs)? {
                out.push(normalize(&z)?.into_iter().map(|v| k * v).collect());
            }
        }
        Ok(out)
    }

    pub fn states_mut(&mut self) -> Vec<&mut NetState> {
        let mut v = vec![&mut self.embedder.state];
        if let Some(e) = &mut self.estimator {
            v.push(&mut e.state);
        }
        v
    }
}

pub fn normalize(z: &[f64]) -> Result<Vec<f64>> {
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::NonFinite(format!("embedding norm {n}")));
    }
    Ok(z.iter().map(|v| v / n).collect())
}

/// `p_count` pseudo-contexts per input, applied to it: `T_c(M)` for each.
pub fn perturb_batch<R: Rng + ?Sized>(
    batch: &[&Spectrogram],
    bounds: &ContextBounds,
    p_count: usize,
    rng: &mut R,
) -> Result<(Vec<Spectrogram>, Vec<ContextParams>)> {
    let mut out = Vec::with_capacity(batch.len() * p_count);
    let mut ctxs = Vec::with_capacity(batch.len() * p_count);
    for m in batch {
        for _ in 0..p_count {
            let c = sample_pseudo_context(bounds, rng);
            out.push(apply_transform(m, &c)?);
            ctxs.push(c);
        }
    }
    Ok((out, ctxs))
}

/// Rows of `t` each repeated `k` times.
pub fn repeat_rows(t: &Tensor, k: usize) -> Tensor {
    let rows: Vec<&[f64]> = (0..t.rows()).flat_map(|r| std::iter::repeat(t.row(r)).take(k)).collect();
    Tensor::stack(&rows, &t.shape()[1..]).expect("same row shape")
}

/// Pseudo-context consistency against a fixed `anchor`: mean per-element l1
/// between `N(perturbed)` and `anchor`, whose rows pair with `perturbed`.
pub fn loss_cat_with_anchor(
    tape: &mut Tape,
    est: &mut EstimatorNet,
    perturbed: Tensor,
    anchor: Var,
    mode: Mode,
) -> Result<Var> {
    let p = tape.constant(perturbed);
    let c = est.forward(tape, p, mode)?;
    let canon = tape.canonicalize(p, c)?;
    tape.mean_abs_diff(canon, anchor)
}

/// Pseudo-context consistency: `p_count` draws per input; the anchor
/// `N(M_obs)` is a stop-gradient target. `canon_obs` is the already
/// recorded canonicalization of `batch` when available.
#[allow(clippy::too_many_arguments)]
pub fn loss_cat<R: Rng + ?Sized>(
    tape: &mut Tape,
    est: &mut EstimatorNet,
    batch: &[&Spectrogram],
    canon_obs: Option<Var>,
    bounds: &ContextBounds,
    p_count: usize,
    rng: &mut R,
    mode: Mode,
) -> Result<Var> {
    if p_count == 0 {
        return Err(Error::InvalidArgument("p_count must be >= 1".into()));
    }
    let anchor_val = match canon_obs {
        Some(v) => tape.value(v).clone(),
        None => {
            let x = tape.constant(batch_tensor(batch)?);
            let c = est.forward(tape, x, mode)?;
            let canon = tape.canonicalize(x, c)?;
            tape.value(canon).clone()
        }
    };
    let anchor = tape.constant(repeat_rows(&anchor_val, p_count));
    let (perturbed, _) = perturb_batch(batch, bounds, p_count, rng)?;
    let refs: Vec<&Spectrogram> = perturbed.iter().collect();
    loss_cat_with_anchor(tape, est, batch_tensor(&refs)?, anchor, mode)
}

/// Batch mean of `delta^2 + ln(tau)^2 + b^2 + s^2`.
pub fn loss_reg(contexts: &[ContextParams]) -> f64 {
    let s: f64 = contexts
        .iter()
        .map(|c| c.delta * c.delta + c.tau.ln().powi(2) + c.bias * c.bias + c.tilt * c.tilt)
        .sum();
    s / contexts.len().max(1) as f64
}

/// Recorded loss terms of one base-training step.
#[derive(Debug, Clone, Copy)]
pub struct BaseLoss {
    pub total: Var,
    pub ce: Var,
    pub cat: Option<Var>,
    pub reg: Option<Var>,
}

/// `CE + lambda_cat L_CaT + lambda_reg L_Reg` on a batch, where `logits`
/// maps the embedding to class scores.
#[allow(clippy::too_many_arguments)]
pub fn loss_base<R, F>(
    tape: &mut Tape,
    model: &mut Model,
    batch: &[&Spectrogram],
    labels: &[usize],
    weights: &LossWeights,
    bounds: &ContextBounds,
    p_count: usize,
    rng: &mut R,
    mode: Mode,
    logits: F,
) -> Result<BaseLoss>
where
    R: Rng + ?Sized,
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let x = tape.constant(batch_tensor(batch)?);
    let (z, canon, ctx) = model.forward(tape, x, mode)?;
    let l = logits(tape, z)?;
    let ce = tape.softmax_ce(l, labels)?;
    let mut total = ce;
    let mut cat = None;
    let mut reg = None;
    if let (Some(ctx), Some(est)) = (ctx, model.estimator.as_mut()) {
        if weights.lambda_cat > 0.0 {
            let c = loss_cat(tape, est, batch, Some(canon), bounds, p_count, rng, mode)?;
            total = tape.add_scaled(total, c, weights.lambda_cat)?;
            cat = Some(c);
        }
        if weights.lambda_reg > 0.0 {
            let r = tape.context_penalty(ctx);
            total = tape.add_scaled(total, r, weights.lambda_reg)?;
            reg = Some(r);
        }
    }
    if !tape.value(total).all_finite() {
        return Err(Error::Diverged(format!(
            "non-finite base loss (ce {})",
            tape.value(ce).item()
        )));
    }
    Ok(BaseLoss { total, ce, cat, reg })
}

/// Class scores of rows `z` against prototype draws, as a recorded op chain:
/// `scale * cos(z_i, mu_k)`.
pub fn cosine_logits(tape: &mut Tape, z: Var, protos: Var, scale: f64) -> Result<Var> {
    let zn = tape.normalize_rows(z)?;
    let pn = tape.normalize_rows(protos)?;
    let l = tape.matmul_t(zn, pn)?;
    Ok(if scale == 1.0 { l } else { tape.scale(l, scale) })
}

/// Inputs of the incremental objective, all as rows of plain tensors.
#[derive(Debug, Clone)]
pub struct IncrementalBatch<'a> {
    /// Support embeddings of the current session's classes.
    pub new_z: &'a Tensor,
    /// Position of each support row's class within `session_rows`.
    pub new_labels: &'a [usize],
    /// Rows of the prototype table that belong to the current session.
    pub session_rows: &'a [usize],
    /// Stored class-mean embeddings of earlier classes.
    pub old_means: &'a Tensor,
    /// Prototype-table row of each stored mean.
    pub old_labels: &'a [usize],
}

/// Recorded incremental loss terms.
#[derive(Debug, Clone, Copy)]
pub struct IncrementalLoss {
    pub total: Var,
    pub new: Var,
    pub old: Option<Var>,
}

/// `L_New + lambda_old L_Old` with prototypes drawn once per step as
/// `center + sqrt(variance) * noise`. `noise` is `None` for the
/// deterministic variant.
pub fn loss_incremental(
    tape: &mut Tape,
    centers: Var,
    variances: Var,
    batch: &IncrementalBatch<'_>,
    lambda_old: f64,
    noise: Option<Vec<f64>>,
    logit_scale: f64,
) -> Result<IncrementalLoss> {
    let protos = match noise {
        Some(n) => tape.gaussian_sample(centers, variances, n)?,
        None => centers,
    };
    let z = tape.constant(batch.new_z.clone());
    let session = tape.select_rows(protos, batch.session_rows)?;
    let l_new = cosine_logits(tape, z, session, logit_scale)?;
    let new = tape.softmax_ce(l_new, batch.new_labels)?;
    let mut total = new;
    let mut old = None;
    if !batch.old_labels.is_empty() {
        let q = tape.constant(batch.old_means.clone());
        let l_old = cosine_logits(tape, q, protos, logit_scale)?;
        let o = tape.softmax_ce(l_old, batch.old_labels)?;
        total = tape.add_scaled(total, o, lambda_old)?;
        old = Some(o);
    }
    Ok(IncrementalLoss { total, new, old })
}

/// Standard normal noise for a `[rows, dim]` prototype draw.
pub fn prototype_noise<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Vec<f64> {
    (0..rows * dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Per-epoch loss log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub cat: f64,
    pub reg: f64,
}
