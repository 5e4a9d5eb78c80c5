//! The context transform family.
//!
//! A context `c = (delta, tau, b, s)` acts on a spectrogram as a geometric warp
//! followed by an additive amplitude envelope:
//!
//! ```text
//! T_c(M)      = A_{b,s}(G_{delta,tau}(M))
//! A_{b,s}(M)  = M + b + s * r_f,           r_f = 2f/(F-1) - 1
//! G(M)        = bilinear(M, grid),         grid(v) = clip((v - shift) / scale, -1, 1)
//! T_c^-1(M')  = G_{-delta, 1/tau}(M' - b - s * r_f)
//! ```
//!
//! `delta` translates along the frequency axis and `tau` scales the time axis
//! about its midpoint. Coordinates are normalized so that bin `0` sits at `-1`
//! and bin `F-1` at `+1`; sampled values outside the clipped range replicate the
//! edge. Every differentiable piece has an adjoint here so the training tape
//! can push gradients through the warp into the context estimator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrogram::Spectrogram;

/// Positions closer than this to an integer bin are snapped onto it, so the
/// identity grid reproduces its input bit-for-bit.
const SNAP_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct ContextParams {
    /// Frequency-axis translation in normalized coordinate units.
    pub delta: f64,
    /// Temporal scale factor, strictly positive.
    pub tau: f64,
    /// Global log-energy bias.
    pub bias: f64,
    /// Spectral tilt slope.
    pub tilt: f64,
}

impl ContextParams {
    pub const IDENTITY: ContextParams = ContextParams {
        delta: 0.0,
        tau: 1.0,
        bias: 0.0,
        tilt: 0.0,
    };

    pub fn new(delta: f64, tau: f64, bias: f64, tilt: f64) -> Self {
        Self {
            delta,
            tau,
            bias,
            tilt,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.delta, self.tau, self.bias, self.tilt]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("context {self:?}")));
        }
        if self.tau <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "context tau must be > 0, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// Axis maps of the forward warp `G_{delta,tau}`.
    pub fn forward_axes(&self) -> (AxisMap, AxisMap) {
        (AxisMap::new(self.delta, 1.0), AxisMap::new(0.0, self.tau))
    }

    /// Axis maps of the inverse warp `G_{-delta,1/tau}`.
    pub fn inverse_axes(&self) -> (AxisMap, AxisMap) {
        (AxisMap::new(-self.delta, 1.0), AxisMap::new(0.0, 1.0 / self.tau))
    }
}

impl From<[f64; 4]> for ContextParams {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<ContextParams> for [f64; 4] {
    fn from(c: ContextParams) -> Self {
        c.to_array()
    }
}

/// Closed per-parameter intervals of admissible contexts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextBounds {
    pub delta_max: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub bias_max: f64,
    pub tilt_max: f64,
}

impl Default for ContextBounds {
    fn default() -> Self {
        Self {
            delta_max: 0.15,
            tau_min: 0.85,
            tau_max: 1.18,
            bias_max: 0.3,
            tilt_max: 0.15,
        }
    }
}

impl ContextBounds {
    /// Every interval collapsed onto the identity context.
    pub fn identity() -> Self {
        Self {
            delta_max: 0.0,
            tau_min: 1.0,
            tau_max: 1.0,
            bias_max: 0.0,
            tilt_max: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.delta_max,
            self.tau_min,
            self.tau_max,
            self.bias_max,
            self.tilt_max,
        ];
        if !all.iter().all(|v| v.is_finite()) {
            return Err(Error::config("bounds", "non-finite bound"));
        }
        if self.delta_max < 0.0 || self.bias_max < 0.0 || self.tilt_max < 0.0 {
            return Err(Error::config("bounds", "half-widths must be >= 0"));
        }
        if !(self.tau_min > 0.0 && self.tau_min <= 1.0 && 1.0 <= self.tau_max) {
            return Err(Error::config(
                "bounds",
                format!(
                    "need 0 < tau_min <= 1 <= tau_max, got [{}, {}]",
                    self.tau_min, self.tau_max
                ),
            ));
        }
        Ok(())
    }

    pub fn contains(&self, c: &ContextParams) -> bool {
        c.delta.abs() <= self.delta_max
            && c.tau >= self.tau_min
            && c.tau <= self.tau_max
            && c.bias.abs() <= self.bias_max
            && c.tilt.abs() <= self.tilt_max
    }

    /// Half-width of each coordinate's interval, in `(delta, tau, b, s)` order.
    pub fn half_widths(&self) -> [f64; 4] {
        [
            self.delta_max,
            0.5 * (self.tau_max - self.tau_min),
            self.bias_max,
            self.tilt_max,
        ]
    }

    /// Every interval shrunk by `k` about the identity; tau in log space,
    /// so composing two contexts drawn from `scaled(0.5)` stays in `self`
    /// for the shift, scale and amplitude terms.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            delta_max: k * self.delta_max,
            tau_min: (k * self.tau_min.ln()).exp(),
            tau_max: (k * self.tau_max.ln()).exp(),
            bias_max: k * self.bias_max,
            tilt_max: k * self.tilt_max,
        }
    }

    pub fn midpoints(&self) -> [f64; 4] {
        [0.0, 0.5 * (self.tau_min + self.tau_max), 0.0, 0.0]
    }
}

/// Affine map `v -> (v - shift) / scale` applied to one normalized axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisMap {
    pub shift: f64,
    pub scale: f64,
}

impl AxisMap {
    pub const IDENTITY: AxisMap = AxisMap {
        shift: 0.0,
        scale: 1.0,
    };

    pub fn new(shift: f64, scale: f64) -> Self {
        Self { shift, scale }
    }

    #[inline]
    pub fn raw(&self, v: f64) -> f64 {
        (v - self.shift) / self.scale
    }

    /// Partial derivatives of the unclipped coordinate w.r.t. `(shift, scale)`.
    #[inline]
    pub fn raw_grad(&self, v: f64) -> (f64, f64) {
        let d_shift = -1.0 / self.scale;
        let d_scale = -(v - self.shift) / (self.scale * self.scale);
        (d_shift, d_scale)
    }
}

/// Normalized coordinates `r_f = 2f/(n-1) - 1` for `n` equally spaced bins.
pub fn freq_coords(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "normalized coordinates need at least 2 bins, got {n}"
        )));
    }
    let denom = (n - 1) as f64;
    Ok((0..n).map(|f| 2.0 * f as f64 / denom - 1.0).collect())
}

/// An axis-aligned sampling grid. Because every map in the family acts on one
/// axis at a time, the per-cell coordinate of output `(f, t)` is
/// `(freq[f], time[t])`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    /// Clipped normalized frequency coordinate per output bin.
    pub freq: Vec<f64>,
    /// Clipped normalized time coordinate per output frame.
    pub time: Vec<f64>,
    /// Whether the frequency coordinate lies inside `[-1, 1]` before clipping.
    pub freq_active: Vec<bool>,
    pub time_active: Vec<bool>,
}

impl SampleGrid {
    pub fn identity(mel_bins: usize, frames: usize) -> Result<Self> {
        Self::from_axes(AxisMap::IDENTITY, AxisMap::IDENTITY, mel_bins, frames)
    }

    pub fn from_axes(freq: AxisMap, time: AxisMap, mel_bins: usize, frames: usize) -> Result<Self> {
        let (freq, freq_active) = axis_coords(freq, mel_bins)?;
        let (time, time_active) = if frames == 1 {
            (vec![0.0], vec![true])
        } else {
            axis_coords(time, frames)?
        };
        Ok(Self {
            freq,
            time,
            freq_active,
            time_active,
        })
    }

    pub fn mel_bins(&self) -> usize {
        self.freq.len()
    }

    pub fn frames(&self) -> usize {
        self.time.len()
    }

    /// `(freq, time)` normalized coordinate of output cell `(f, t)`.
    pub fn coord(&self, f: usize, t: usize) -> (f64, f64) {
        (self.freq[f], self.time[t])
    }
}

fn axis_coords(map: AxisMap, n: usize) -> Result<(Vec<f64>, Vec<bool>)> {
    let base = freq_coords(n)?;
    let mut coords = Vec::with_capacity(n);
    let mut active = Vec::with_capacity(n);
    for v in base {
        let raw = map.raw(v);
        active.push((-1.0..=1.0).contains(&raw));
        coords.push(raw.clamp(-1.0, 1.0));
    }
    Ok((coords, active))
}

/// Sampling grid of the forward warp for context `c` on an `F x T` map.
pub fn make_grid(c: &ContextParams, mel_bins: usize, frames: usize) -> Result<SampleGrid> {
    c.validate()?;
    let (freq, time) = c.forward_axes();
    SampleGrid::from_axes(freq, time, mel_bins, frames)
}

/// Continuous bin position for a normalized coordinate, snapped onto integer
/// bins when within rounding distance.
#[inline]
fn position(coord: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let p = (coord + 1.0) * 0.5 * (n - 1) as f64;
    let r = p.round();
    if (p - r).abs() < SNAP_EPS {
        r
    } else {
        p
    }
}

/// Lower neighbour, upper neighbour (edge-replicated) and fractional weight.
#[inline]
fn neighbours(pos: f64, n: usize) -> (usize, usize, f64) {
    let lo = (pos.floor().max(0.0) as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let w = (pos - lo as f64).clamp(0.0, 1.0);
    (lo, hi, w)
}

struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w: Vec<f64>,
}

impl AxisTaps {
    fn new(coords: &[f64], n: usize) -> Self {
        let mut lo = Vec::with_capacity(coords.len());
        let mut hi = Vec::with_capacity(coords.len());
        let mut w = Vec::with_capacity(coords.len());
        for &c in coords {
            let (a, b, x) = neighbours(position(c, n), n);
            lo.push(a);
            hi.push(b);
            w.push(x);
        }
        Self { lo, hi, w }
    }
}

fn check_grid(m: &Spectrogram, g: &SampleGrid) -> Result<()> {
    if g.mel_bins() != m.mel_bins() || g.frames() != m.frames() {
        return Err(Error::Shape(format!(
            "grid is {}x{}, spectrogram is {}x{}",
            g.mel_bins(),
            g.frames(),
            m.mel_bins(),
            m.frames()
        )));
    }
    Ok(())
}

/// Bilinear sampling of every channel of `m` at the grid coordinates.
pub fn grid_sample(m: &Spectrogram, g: &SampleGrid) -> Result<Spectrogram> {
    check_grid(m, g)?;
    let shape = m.shape();
    let (nf, nt) = (shape.mel_bins, shape.frames);
    let fa = AxisTaps::new(&g.freq, nf);
    let ta = AxisTaps::new(&g.time, nt);
    let src = m.values();
    let mut out = vec![0.0; shape.len()];
    for c in 0..shape.channels {
        let base = c * nf * nt;
        for f in 0..nf {
            let (f0, f1, wf) = (fa.lo[f], fa.hi[f], fa.w[f]);
            let r0 = &src[base + f0 * nt..base + (f0 + 1) * nt];
            let r1 = &src[base + f1 * nt..base + (f1 + 1) * nt];
            let row = &mut out[base + f * nt..base + (f + 1) * nt];
            for t in 0..nt {
                let (t0, t1, wt) = (ta.lo[t], ta.hi[t], ta.w[t]);
                let a = r0[t0] + wt * (r0[t1] - r0[t0]);
                let b = r1[t0] + wt * (r1[t1] - r1[t0]);
                row[t] = if wf == 0.0 { a } else { a + wf * (b - a) };
            }
        }
    }
    Spectrogram::new(shape, out)
}

/// Gradients of `grid_sample` given the upstream gradient of its output.
#[derive(Debug, Clone)]
pub struct GridSampleGrad {
    pub input: Spectrogram,
    /// d loss / d freq coordinate (normalized units), per output bin.
    /// Zero where clipping is active.
    pub freq: Vec<f64>,
    /// d loss / d time coordinate (normalized units), per output frame.
    pub time: Vec<f64>,
}

pub fn grid_sample_adjoint(
    m: &Spectrogram,
    g: &SampleGrid,
    grad_out: &Spectrogram,
) -> Result<GridSampleGrad> {
    check_grid(m, g)?;
    m.check_same_shape(grad_out)?;
    let shape = m.shape();
    let (nf, nt) = (shape.mel_bins, shape.frames);
    let fa = AxisTaps::new(&g.freq, nf);
    let ta = AxisTaps::new(&g.time, nt);
    let src = m.values();
    let go = grad_out.values();
    let mut gin = vec![0.0; shape.len()];
    let mut gpos_f = vec![0.0; nf];
    let mut gpos_t = vec![0.0; nt];
    for c in 0..shape.channels {
        let base = c * nf * nt;
        for f in 0..nf {
            let (f0, f1, wf) = (fa.lo[f], fa.hi[f], fa.w[f]);
            for t in 0..nt {
                let (t0, t1, wt) = (ta.lo[t], ta.hi[t], ta.w[t]);
                let g = go[base + f * nt + t];
                if g == 0.0 {
                    continue;
                }
                let v00 = src[base + f0 * nt + t0];
                let v01 = src[base + f0 * nt + t1];
                let v10 = src[base + f1 * nt + t0];
                let v11 = src[base + f1 * nt + t1];
                gin[base + f0 * nt + t0] += g * (1.0 - wf) * (1.0 - wt);
                gin[base + f0 * nt + t1] += g * (1.0 - wf) * wt;
                gin[base + f1 * nt + t0] += g * wf * (1.0 - wt);
                gin[base + f1 * nt + t1] += g * wf * wt;
                if f1 != f0 {
                    gpos_f[f] += g * ((1.0 - wt) * (v10 - v00) + wt * (v11 - v01));
                }
                if t1 != t0 {
                    gpos_t[t] += g * ((1.0 - wf) * (v01 - v00) + wf * (v11 - v10));
                }
            }
        }
    }
    let sf = 0.5 * (nf - 1) as f64;
    let st = if nt > 1 { 0.5 * (nt - 1) as f64 } else { 0.0 };
    let freq = gpos_f
        .iter()
        .zip(&g.freq_active)
        .map(|(&d, &on)| if on { d * sf } else { 0.0 })
        .collect();
    let time = gpos_t
        .iter()
        .zip(&g.time_active)
        .map(|(&d, &on)| if on { d * st } else { 0.0 })
        .collect();
    Ok(GridSampleGrad {
        input: Spectrogram::new(shape, gin)?,
        freq,
        time,
    })
}

/// Additive envelope `M + b + s * r_f`, broadcast over channels and frames.
pub fn apply_amplitude(m: &Spectrogram, bias: f64, tilt: f64) -> Spectrogram {
    let shape = m.shape();
    let r = freq_coords(shape.mel_bins).expect("spectrogram has >= 2 bins");
    let mut out = m.clone();
    let nt = shape.frames;
    let v = out.values_mut();
    for c in 0..shape.channels {
        for (f, rf) in r.iter().enumerate() {
            let off = bias + tilt * rf;
            let start = (c * shape.mel_bins + f) * nt;
            for x in &mut v[start..start + nt] {
                *x += off;
            }
        }
    }
    out
}

/// `T_c(M) = A_{b,s}(G_{delta,tau}(M))`.
pub fn apply_transform(m: &Spectrogram, c: &ContextParams) -> Result<Spectrogram> {
    let grid = make_grid(c, m.mel_bins(), m.frames())?;
    let warped = grid_sample(m, &grid)?;
    Ok(apply_amplitude(&warped, c.bias, c.tilt))
}

/// `T_c^-1(M) = G_{-delta,1/tau}(M - b - s * r_f)`.
pub fn apply_inverse(m: &Spectrogram, c: &ContextParams) -> Result<Spectrogram> {
    c.validate()?;
    let flat = apply_amplitude(m, -c.bias, -c.tilt);
    let (fa, ta) = c.inverse_axes();
    let grid = SampleGrid::from_axes(fa, ta, m.mel_bins(), m.frames())?;
    grid_sample(&flat, &grid)
}

/// Gradient of `apply_inverse` w.r.t. its input and its context, given the
/// upstream gradient of the canonicalized output.
pub fn apply_inverse_adjoint(
    m: &Spectrogram,
    c: &ContextParams,
    grad_out: &Spectrogram,
) -> Result<(Spectrogram, [f64; 4])> {
    c.validate()?;
    let flat = apply_amplitude(m, -c.bias, -c.tilt);
    let (fa, ta) = c.inverse_axes();
    let grid = SampleGrid::from_axes(fa, ta, m.mel_bins(), m.frames())?;
    let gs = grid_sample_adjoint(&flat, &grid, grad_out)?;

    // d coord / d shift = -1/scale and shift = -delta, so d coord / d delta = 1/scale = 1.
    let vf = freq_coords(m.mel_bins())?;
    let mut d_delta = 0.0;
    for (f, g) in gs.freq.iter().enumerate() {
        let (d_shift, _) = fa.raw_grad(vf[f]);
        d_delta += g * (-d_shift);
    }
    // scale = 1/tau, d scale / d tau = -1/tau^2.
    let mut d_tau = 0.0;
    if m.frames() > 1 {
        let vt = freq_coords(m.frames())?;
        for (t, g) in gs.time.iter().enumerate() {
            let (_, d_scale) = ta.raw_grad(vt[t]);
            d_tau += g * d_scale * (-1.0 / (c.tau * c.tau));
        }
    }

    let r = freq_coords(m.mel_bins())?;
    let gin = gs.input;
    let shape = m.shape();
    let nt = shape.frames;
    let mut d_bias = 0.0;
    let mut d_tilt = 0.0;
    for ch in 0..shape.channels {
        for (f, rf) in r.iter().enumerate() {
            let start = (ch * shape.mel_bins + f) * nt;
            let s: f64 = gin.values()[start..start + nt].iter().sum();
            d_bias -= s;
            d_tilt -= s * rf;
        }
    }
    Ok((gin, [d_delta, d_tau, d_bias, d_tilt]))
}

/// One draw from the bounded uniform pseudo-context distribution.
pub fn sample_pseudo_context<R: Rng + ?Sized>(bounds: &ContextBounds, rng: &mut R) -> ContextParams {
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.gen::<f64>();
    let delta = u(-bounds.delta_max, bounds.delta_max);
    let tau = u(bounds.tau_min, bounds.tau_max);
    let bias = u(-bounds.bias_max, bounds.bias_max);
    let tilt = u(-bounds.tilt_max, bounds.tilt_max);
    ContextParams::new(delta, tau, bias, tilt)
}

/// Number of bins excluded from each frequency edge when measuring round-trip
/// error for a context, `ceil(|delta| (F-1) / 2) + 1`.
pub fn roundtrip_margin_bins(delta: f64, mel_bins: usize) -> usize {
    (delta.abs() * (mel_bins - 1) as f64 / 2.0).ceil() as usize + 1
}

/// Number of frames excluded from each time edge: the inverse time warp reads
/// coordinates `v * tau`, which clip when `tau > 1`.
pub fn roundtrip_margin_frames(tau: f64, frames: usize) -> usize {
    if frames < 2 {
        return 0;
    }
    let half = 0.5 * (frames - 1) as f64;
    let reach = half * (1.0 - 1.0 / tau.max(1.0 / tau));
    reach.ceil() as usize + 1
}

/// Mean absolute difference restricted to the interior window that edge
/// clipping cannot reach for context `c`.
pub fn interior_mean_abs_diff(a: &Spectrogram, b: &Spectrogram, c: &ContextParams) -> Result<f64> {
    a.check_same_shape(b)?;
    let shape = a.shape();
    let mf = roundtrip_margin_bins(c.delta, shape.mel_bins);
    let mt = roundtrip_margin_frames(c.tau, shape.frames);
    if 2 * mf >= shape.mel_bins || 2 * mt >= shape.frames {
        return Err(Error::InvalidArgument(format!(
            "context {c:?} leaves no interior window on {shape:?}"
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ch in 0..shape.channels {
        for f in mf..shape.mel_bins - mf {
            for t in mt..shape.frames - mt {
                sum += (a.get(ch, f, t) - b.get(ch, f, t)).abs();
                n += 1;
            }
        }
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrogram::SpecShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hot(shape: SpecShape, f0: usize, t0: usize) -> Spectrogram {
        Spectrogram::from_fn(shape, |_, f, t| if f == f0 && t == t0 { 1.0 } else { 0.0 })
    }

    #[test]
    fn freq_coords_examples() {
        let r = freq_coords(64).unwrap();
        assert_eq!(r[0], -1.0);
        assert_eq!(r[63], 1.0);
        assert_eq!(freq_coords(3).unwrap(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(freq_coords(5).unwrap()[1], -0.5);
        assert!(freq_coords(1).is_err());
    }

    #[test]
    fn identity_grid_is_identity() {
        let g = make_grid(&ContextParams::IDENTITY, 7, 9).unwrap();
        assert_eq!(g, SampleGrid::identity(7, 9).unwrap());
        let m = Spectrogram::from_fn(SpecShape::new(2, 7, 9), |c, f, t| {
            (c as f64 + 1.3) * (f as f64).sin() + 0.1 * t as f64
        });
        assert_eq!(grid_sample(&m, &g).unwrap(), m);
    }

    #[test]
    fn grid_shift_and_scale_by_hand() {
        // F=5: base coords (-1,-0.5,0,0.5,1) shifted by -0.5 then clipped.
        let g = make_grid(&ContextParams::new(0.5, 1.0, 0.0, 0.0), 5, 4).unwrap();
        assert_eq!(g.freq, vec![-1.0, -1.0, -0.5, 0.0, 0.5]);
        assert_eq!(g.freq_active, vec![false, true, true, true, true]);
        assert_eq!(g.time, freq_coords(4).unwrap());

        let g = make_grid(&ContextParams::new(0.0, 2.0, 0.0, 0.0), 5, 5).unwrap();
        assert_eq!(g.time[0], -0.5);
        assert_eq!(g.time[4], 0.5);
    }

    #[test]
    fn integer_shift_moves_single_hot() {
        let shape = SpecShape::new(1, 9, 6);
        let m = hot(shape, 3, 2);
        // delta of 2 bins: 2 * 2/(F-1).
        let delta = 2.0 * 2.0 / 8.0;
        let out = apply_transform(&m, &ContextParams::new(delta, 1.0, 0.0, 0.0)).unwrap();
        assert_eq!(out, hot(shape, 5, 2));
    }

    #[test]
    fn half_bin_shift_splits_weight() {
        let shape = SpecShape::new(1, 9, 4);
        let m = hot(shape, 4, 1);
        let delta = 0.5 * 2.0 / 8.0;
        let out = apply_transform(&m, &ContextParams::new(delta, 1.0, 0.0, 0.0)).unwrap();
        assert!((out.get(0, 4, 1) - 0.5).abs() < 1e-12);
        assert!((out.get(0, 5, 1) - 0.5).abs() < 1e-12);
        let total: f64 = out.values().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn amplitude_examples() {
        let z = Spectrogram::zeros(SpecShape::new(1, 3, 2));
        assert_eq!(apply_amplitude(&z, 0.0, 0.0), z);
        assert!(apply_amplitude(&z, 1.0, 0.0).values().iter().all(|&v| v == 1.0));
        let t = apply_amplitude(&z, 0.0, 1.0);
        assert_eq!(t.values(), &[-1.0, -1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn pure_bias_transform() {
        let m = Spectrogram::from_fn(SpecShape::new(1, 4, 4), |_, f, t| (f * t) as f64);
        let out = apply_transform(&m, &ContextParams::new(0.0, 1.0, 0.3, 0.0)).unwrap();
        for (a, b) in out.values().iter().zip(m.values()) {
            assert!((a - (b + 0.3)).abs() < 1e-15);
        }
    }

    #[test]
    fn composition_order_matters() {
        let shape = SpecShape::new(1, 9, 3);
        let m = hot(shape, 4, 1);
        let c = ContextParams::new(0.25, 1.0, 0.0, 0.5);
        let warp_then_amp = apply_transform(&m, &c).unwrap();
        let amp = apply_amplitude(&m, c.bias, c.tilt);
        let amp_then_warp = grid_sample(&amp, &make_grid(&c, 9, 3).unwrap()).unwrap();
        assert!(warp_then_amp.mean_abs_diff(&amp_then_warp).unwrap() > 1e-3);
    }

    #[test]
    fn amplitude_only_inverse_is_exact() {
        let m = Spectrogram::from_fn(SpecShape::new(2, 6, 5), |c, f, t| {
            ((c + f * 3 + t) as f64 * 0.37).cos()
        });
        let c = ContextParams::new(0.0, 1.0, -0.21, 0.13);
        let back = apply_inverse(&apply_transform(&m, &c).unwrap(), &c).unwrap();
        for (a, b) in back.values().iter().zip(m.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn grid_shape_mismatch_errors() {
        let m = Spectrogram::zeros(SpecShape::new(1, 4, 4));
        let g = SampleGrid::identity(5, 4).unwrap();
        assert!(grid_sample(&m, &g).is_err());
    }

    #[test]
    fn pseudo_context_degenerate_and_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let id = ContextBounds::identity();
        for _ in 0..10 {
            assert_eq!(sample_pseudo_context(&id, &mut rng), ContextParams::IDENTITY);
        }
        let b = ContextBounds::default();
        for _ in 0..1000 {
            assert!(b.contains(&sample_pseudo_context(&b, &mut rng)));
        }
    }

    #[test]
    fn context_serializes_as_tuple() {
        let c = ContextParams::new(0.1, 1.05, -0.2, 0.03);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(s, "[0.1,1.05,-0.2,0.03]");
        let back: ContextParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
