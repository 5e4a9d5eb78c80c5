//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use serde::Serialize;

use super::tape::{Tape, Var};
use super::{EmbedderNet, EstimatorNet, HeadNet, NetState};
use crate::error::{Error, Result};
use crate::rng::stream;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
/// Below this magnitude both gradients are compared on an absolute scale.
pub const ABS_FLOOR: f64 = 1e-6;

/// Anything that owns a [`NetState`].
pub trait HasState {
    fn state(&self) -> &NetState;
    fn state_mut(&mut self) -> &mut NetState;
}

impl HasState for NetState {
    fn state(&self) -> &NetState {
        self
    }
    fn state_mut(&mut self) -> &mut NetState {
        self
    }
}

macro_rules! has_state {
    ($($t:ty),*) => {$(
        impl HasState for $t {
            fn state(&self) -> &NetState {
                &self.state
            }
            fn state_mut(&mut self) -> &mut NetState {
                &mut self.state
            }
        }
    )*};
}
has_state!(EstimatorNet, EmbedderNet, HeadNet);

#[derive(Debug, Clone, Serialize)]
pub struct Probe {
    pub param: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&Probe> {
        self.probes
            .iter()
            .filter(|p| !(p.rel_err <= self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compare the tape gradient of `loss` against central differences at
/// `probe_count` parameter scalars chosen with `seed`.
///
/// `loss` must record a scalar on the given tape and be deterministic.
pub fn grad_check<N, F>(net: &mut N, probe_count: usize, seed: u64, loss: F) -> Result<GradCheckReport>
where
    N: HasState,
    F: FnMut(&mut N, &mut Tape) -> Result<Var>,
{
    let total = net.state().scalar_count();
    let mut rng = stream(seed, &[0x6C4E]);
    let picks = sample(&mut rng, total, probe_count.min(total)).into_vec();
    grad_check_at(net, &picks, loss)
}

/// As [`grad_check`] with explicit flat parameter indices.
pub fn grad_check_at<N, F>(net: &mut N, flat: &[usize], mut loss: F) -> Result<GradCheckReport>
where
    N: HasState,
    F: FnMut(&mut N, &mut Tape) -> Result<Var>,
{
    let analytic = analytic_grads(net, &mut loss)?;
    let mut probes = Vec::with_capacity(flat.len());
    for &k in flat {
        let (pi, off) = net
            .state()
            .locate(k)
            .ok_or_else(|| Error::InvalidArgument(format!("probe {k} out of range")))?;
        let orig = net.state().params()[pi].data()[off];
        let mut eval_at = |net: &mut N, v: f64| -> Result<f64> {
            net.state_mut().params_mut()[pi].data_mut()[off] = v;
            let mut tape = Tape::new();
            let out = loss(net, &mut tape)?;
            Ok(tape.value(out).item())
        };
        let plus = eval_at(net, orig + FD_STEP)?;
        let minus = eval_at(net, orig - FD_STEP)?;
        net.state_mut().params_mut()[pi].data_mut()[off] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[k];
        probes.push(Probe {
            param: net.state().names()[pi].clone(),
            offset: off,
            analytic: a,
            numeric,
            rel_err: rel_err(a, numeric),
        });
    }
    Ok(GradCheckReport {
        probes,
        tolerance: REL_TOL,
    })
}

/// Flat tape gradient of `loss` with respect to every parameter of `net`.
pub fn analytic_grads<N, F>(net: &mut N, loss: &mut F) -> Result<Vec<f64>>
where
    N: HasState,
    F: FnMut(&mut N, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(net, &mut tape)?;
    let grads = tape.backward(out)?;
    let state = net.state_mut();
    state.zero_grad();
    state.accumulate(&tape, &grads);
    let flat = state.flat_grads();
    state.zero_grad();
    Ok(flat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head() -> HeadNet {
        HeadNet::cosine(&[vec![1.0, -2.0, 0.5], vec![0.25, 3.0, -1.0]]).unwrap()
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut net = head();
        let report = grad_check(&mut net, 6, 1, |_, tape| {
            Ok(tape.constant(super::super::Tensor::scalar(3.0)))
        })
        .unwrap();
        assert!(report.passed());
        for p in &report.probes {
            assert_eq!(p.analytic, 0.0);
            assert_eq!(p.numeric, 0.0);
        }
    }

    #[test]
    fn half_squared_norm_gradient_is_theta() {
        let mut net = head();
        let theta = net.state.flat_params();
        let mut loss = |n: &mut HeadNet, tape: &mut Tape| {
            let w = n.state.leaf(tape, 0);
            let s = tape.sum_squares(w);
            Ok(tape.scale(s, 0.5))
        };
        let g = analytic_grads(&mut net, &mut loss).unwrap();
        assert_eq!(g, theta);
        let report = grad_check(&mut net, 6, 2, loss).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
