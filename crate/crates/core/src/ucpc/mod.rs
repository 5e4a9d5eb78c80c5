//! Uncertainty-conditioned prototype calibration: pseudo-context instability
//! as a per-sample uncertainty, Gaussian shrinkage of few-shot prototypes
//! toward a prior from earlier classes, and the cosine prototype classifier.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::tape::softmax;
use crate::spectrogram::Spectrogram;
use crate::strategy::ContextEstimator;
use crate::transform::{apply_transform, sample_pseudo_context, ContextBounds, ContextParams};

/// Lower bound on the prior variance.
pub const PRIOR_VAR_FLOOR: f64 = 1e-6;

/// Affine map `sigma_y^2 = beta + alpha * U_y` from class uncertainty to
/// likelihood variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyMap {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for UncertaintyMap {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.05,
        }
    }
}

impl UncertaintyMap {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("uncertainty.alpha", "must be finite and > 0"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("uncertainty.beta", "must be finite and > 0"));
        }
        Ok(())
    }

    pub fn variance(&self, uncertainty: f64) -> f64 {
        self.beta + self.alpha * uncertainty
    }
}

/// Per-class classifier state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub class: usize,
    pub session: usize,
    /// Raw prototype: mean of the support embeddings.
    pub prototype: Vec<f64>,
    /// Calibrated center.
    pub center: Vec<f64>,
    /// Calibrated isotropic variance.
    pub variance: f64,
    pub uncertainty: f64,
}

impl ClassRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0) || !self.variance.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "class {} variance {} must be finite and > 0",
                self.class, self.variance
            )));
        }
        if self.prototype.len() != self.center.len() {
            return Err(Error::Shape(format!("class {} center/prototype dims differ", self.class)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorStats {
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// Calibrated center, variance and shrinkage weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Shrinkage {
    pub center: Vec<f64>,
    pub variance: f64,
    pub lambda: f64,
}

/// Draw `n` pseudo-contexts from the uniform distribution on `bounds`.
pub fn draw_pseudo_contexts<R: Rng + ?Sized>(bounds: &ContextBounds, n: usize, rng: &mut R) -> Vec<ContextParams> {
    (0..n).map(|_| sample_pseudo_context(bounds, rng)).collect()
}

/// Mean over `contexts` of `|N(T_c(base)) - N(observed)|_1 / (F T C)`.
pub fn sample_uncertainty_with(
    est: &dyn ContextEstimator,
    base: &Spectrogram,
    observed: &Spectrogram,
    contexts: &[ContextParams],
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::InvalidArgument("need at least one pseudo-context".into()));
    }
    base.check_same_shape(observed)?;
    let anchor = est.canonicalize(observed)?;
    let perturbed = contexts
        .iter()
        .map(|c| apply_transform(base, c))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Spectrogram> = perturbed.iter().collect();
    let canon = est.canonicalize_batch(&refs)?;
    let mut total = 0.0;
    for c in &canon {
        total += c.mean_abs_diff(&anchor)?;
    }
    Ok(total / contexts.len() as f64)
}

/// Context uncertainty `u(x)` from `n_ucpc` pseudo-contexts drawn with `rng`.
pub fn sample_uncertainty<R: Rng + ?Sized>(
    est: &dyn ContextEstimator,
    base: &Spectrogram,
    observed: &Spectrogram,
    n_ucpc: usize,
    bounds: &ContextBounds,
    rng: &mut R,
) -> Result<f64> {
    if n_ucpc == 0 {
        return Err(Error::InvalidArgument("n_ucpc must be >= 1".into()));
    }
    let contexts = draw_pseudo_contexts(bounds, n_ucpc, rng);
    sample_uncertainty_with(est, base, observed, &contexts)
}

/// Class uncertainty: the mean of its support uncertainties.
pub fn class_uncertainty(support: &[f64]) -> Result<f64> {
    if support.is_empty() {
        return Err(Error::InvalidArgument("empty support".into()));
    }
    Ok(support.iter().sum::<f64>() / support.len() as f64)
}

/// Prior from the raw prototypes of earlier classes: their mean, and the
/// per-dimension population variance averaged over dimensions.
pub fn prior_stats(old: &[ClassRecord]) -> Result<PriorStats> {
    if old.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "prior needs at least 2 earlier classes, got {}",
            old.len()
        )));
    }
    let d = old[0].prototype.len();
    if old.iter().any(|r| r.prototype.len() != d) {
        return Err(Error::Shape("prototype dimensions differ".into()));
    }
    let n = old.len() as f64;
    let mut mean = vec![0.0; d];
    for r in old {
        for (m, v) in mean.iter_mut().zip(&r.prototype) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = 0.0;
    for r in old {
        for (m, v) in mean.iter().zip(&r.prototype) {
            var += (v - m).powi(2);
        }
    }
    let variance = (var / (n * d as f64)).max(PRIOR_VAR_FLOOR);
    Ok(PriorStats { mean, variance })
}

/// Precision-weighted posterior of a class center under the prior.
pub fn shrink(prototype: &[f64], prior: &PriorStats, var_y: f64) -> Result<Shrinkage> {
    if !(var_y > 0.0) || !(prior.variance > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "variances must be > 0 (class {var_y}, prior {})",
            prior.variance
        )));
    }
    if prototype.len() != prior.mean.len() {
        return Err(Error::Shape("prototype and prior mean differ in length".into()));
    }
    let (pp, py) = (1.0 / prior.variance, 1.0 / var_y);
    let lambda = pp / (pp + py);
    let center = prototype
        .iter()
        .zip(&prior.mean)
        .map(|(m, p)| (1.0 - lambda) * m + lambda * p)
        .collect();
    Ok(Shrinkage {
        center,
        variance: 1.0 / (pp + py),
        lambda,
    })
}

/// Cosine similarity; errors if either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::InvalidArgument("cosine of a zero vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Index of the largest value; exact ties go to the lowest class id.
fn argmax_by_class(probs: &[f64], records: &[ClassRecord]) -> usize {
    let mut best = 0;
    for i in 1..probs.len() {
        let better = probs[i] > probs[best]
            || (probs[i] == probs[best] && records[i].class < records[best].class);
        if better {
            best = i;
        }
    }
    best
}

/// Cosine softmax over `records` scaled by `logit_scale`. With `rng` the
/// centers are replaced by draws `center + sqrt(variance) * eta`.
///
/// Returns the winning class id and the probability per record.
pub fn classify_scaled<R: Rng + ?Sized>(
    z: &[f64],
    records: &[ClassRecord],
    rng: Option<&mut R>,
    logit_scale: f64,
) -> Result<(usize, Vec<f64>)> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no class records".into()));
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("query embedding".into()));
    }
    if z.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidArgument("zero-norm query embedding".into()));
    }
    let logits = match rng {
        Some(rng) => records
            .iter()
            .map(|r| {
                let sd = r.variance.max(0.0).sqrt();
                let draw: Vec<f64> = r
                    .center
                    .iter()
                    .map(|c| {
                        let eta: f64 = StandardNormal.sample(&mut *rng);
                        c + sd * eta
                    })
                    .collect();
                cosine(z, &draw).map(|c| logit_scale * c)
            })
            .collect::<Result<Vec<_>>>()?,
        None => records
            .iter()
            .map(|r| cosine(z, &r.center).map(|c| logit_scale * c))
            .collect::<Result<Vec<_>>>()?,
    };
    let probs = softmax(&logits);
    Ok((records[argmax_by_class(&probs, records)].class, probs))
}

/// [`classify_scaled`] with unit logit scale; `stochastic` selects draws.
pub fn classify<R: Rng + ?Sized>(
    z: &[f64],
    records: &[ClassRecord],
    rng: &mut R,
    stochastic: bool,
) -> Result<(usize, Vec<f64>)> {
    if stochastic {
        classify_scaled(z, records, Some(rng), 1.0)
    } else {
        classify_scaled::<R>(z, records, None, 1.0)
    }
}
