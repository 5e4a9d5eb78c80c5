//! Desk-scale synthetic tactile materials, generated directly as
//! spectrograms and observed through the context transform.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::spectrogram::{SpecShape, Spectrogram};
use crate::transform::{apply_transform, freq_coords, sample_pseudo_context, ContextBounds, ContextParams};

const MAX_ATTEMPTS: u64 = 1000;
const SENSOR_RESONANCE: f64 = 0.5;
const SENSOR_WIDTH: f64 = 0.07;
/// Cycles of the shared stroke modulation across the window.
const STROKE_CYCLES: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub material_count: usize,
    pub per_class_count: usize,
    pub resonance_count: usize,
    pub noise_std: f64,
    /// Range the per-sample acquisition contexts are drawn from. Half the
    /// estimator's default range, so an observed context composed with a
    /// pseudo-context stays estimable.
    pub context_bounds: ContextBounds,
    pub rng_seed: u64,
    pub mel_bins: usize,
    pub frames: usize,
    pub channels: usize,
    /// Minimum mean absolute difference between any two canonical materials.
    pub min_separation: f64,
    /// Amplitude of the structure every material shares: two fixed sensor
    /// resonances of equal height and a periodic stroke modulation. It gives the
    /// canonical frame a reference, so frequency shift, time scale and tilt
    /// can be read off a single observation. Zero disables it.
    pub sensor_signature: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            material_count: 40,
            per_class_count: 30,
            resonance_count: 3,
            noise_std: 0.05,
            context_bounds: ContextBounds::default().scaled(0.5),
            rng_seed: 0,
            mel_bins: 16,
            frames: 16,
            channels: 1,
            min_separation: 0.08,
            sensor_signature: 0.8,
        }
    }
}

impl SynthSpec {
    pub fn shape(&self) -> SpecShape {
        SpecShape::new(self.channels, self.mel_bins, self.frames)
    }

    pub fn validate(&self) -> Result<()> {
        if self.material_count < 2 {
            return Err(Error::config("data.material_count", "need at least 2 materials"));
        }
        if self.per_class_count == 0 {
            return Err(Error::config("data.per_class_count", "must be >= 1"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::config("data.noise_std", "must be finite and >= 0"));
        }
        if self.mel_bins < 2 || self.frames < 2 || self.channels == 0 {
            return Err(Error::config(
                "data",
                "need mel_bins >= 2, frames >= 2 and channels >= 1",
            ));
        }
        if !self.sensor_signature.is_finite() {
            return Err(Error::config("data.sensor_signature", "must be finite"));
        }
        if !(self.min_separation >= 0.0) {
            return Err(Error::config("data.min_separation", "must be >= 0"));
        }
        self.context_bounds
            .validate()
            .map_err(|e| Error::config("data.context_bounds", e.to_string()))
    }
}

/// Canonical spectrograms of materials `0..count` plus their separation.
#[derive(Debug, Clone)]
pub struct Catalog {
    pub materials: Vec<Spectrogram>,
    /// Every pair of materials is at least this far apart (mean absolute difference).
    pub separation_floor: f64,
}

impl Catalog {
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.materials.iter().enumerate() {
            for b in &self.materials[i + 1..] {
                best = best.min(a.mean_abs_diff(b).expect("same shape"));
            }
        }
        best
    }
}

struct Resonance {
    center: f64,
    width: f64,
    amp: f64,
    rate: f64,
    depth: f64,
    phase: f64,
}

fn draw_material<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Spectrogram {
    let shape = spec.shape();
    let r = freq_coords(shape.mel_bins).expect("mel_bins >= 2");
    let u = freq_coords(shape.frames).expect("frames >= 2");
    let (nf, nt) = (shape.mel_bins as f64, shape.frames as f64);
    let res: Vec<Resonance> = (0..spec.resonance_count)
        .map(|_| Resonance {
            center: rng.gen_range(-0.75..0.75),
            width: rng.gen_range(0.06..0.2),
            amp: rng.gen_range(0.5..1.0),
            rate: rng.gen_range(0.5..3.0),
            depth: rng.gen_range(0.1..0.6),
            phase: rng.gen_range(0.0..2.0 * PI),
        })
        .collect();
    let pink = rng.gen_range(0.1..0.4);
    let texture: Vec<(f64, f64, f64)> = (1..=6)
        .map(|k| {
            (
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.0..2.0 * PI),
                0.15 / k as f64,
            )
        })
        .collect();
    let gains: Vec<f64> = (0..shape.channels).map(|_| rng.gen_range(0.7..1.0)).collect();
    let mut m = Spectrogram::from_fn(shape, |c, f, t| {
        let (fx, tx) = (f as f64 / nf, t as f64 / nt);
        let mut v = -pink * (1.0 + 4.0 * (r[f] + 1.0)).ln();
        for (k, (pf, pt, a)) in texture.iter().enumerate() {
            let k = (k + 1) as f64;
            v += a * (2.0 * PI * k * fx + pf).cos() * (2.0 * PI * k * tx + pt).cos();
        }
        let sig = spec.sensor_signature;
        if sig != 0.0 {
            let ridge = |center: f64| (-(r[f] - center).powi(2) / (2.0 * SENSOR_WIDTH * SENSOR_WIDTH)).exp();
            v += sig * (ridge(-SENSOR_RESONANCE) + ridge(SENSOR_RESONANCE));
            v += 0.4 * sig * (PI * STROKE_CYCLES * u[t]).cos();
        }
        for q in &res {
            let bump = (-(r[f] - q.center).powi(2) / (2.0 * q.width * q.width)).exp();
            v += gains[c] * q.amp * bump * (1.0 + q.depth * (2.0 * PI * q.rate * tx + q.phase).sin());
        }
        v
    });
    normalize_range(&mut m);
    m
}

/// Affinely map values onto `[-1, 1]`; a constant input maps to zeros.
fn normalize_range(m: &mut Spectrogram) {
    let (lo, hi) = m
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    for v in m.values_mut() {
        *v = if span > 0.0 { 2.0 * (*v - lo) / span - 1.0 } else { 0.0 };
    }
}

/// Canonical spectrograms for materials `0..count`. A draw closer than
/// `min_separation` to an earlier material is rejected and redrawn.
pub fn synth_catalog_prefix(spec: &SynthSpec, count: usize) -> Result<Catalog> {
    spec.validate()?;
    let mut materials: Vec<Spectrogram> = Vec::with_capacity(count);
    for id in 0..count {
        let mut accepted = None;
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = stream(spec.rng_seed, &[0x5EED, id as u64, attempt]);
            let m = draw_material(spec, &mut rng);
            let far = materials
                .iter()
                .all(|o| o.mean_abs_diff(&m).expect("same shape") >= spec.min_separation);
            if far {
                accepted = Some(m);
                break;
            }
        }
        materials.push(accepted.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "material {id}: no draw within {MAX_ATTEMPTS} attempts is {} away from the others",
                spec.min_separation
            ))
        })?);
    }
    Ok(Catalog {
        materials,
        separation_floor: spec.min_separation,
    })
}

pub fn synth_catalog(spec: &SynthSpec) -> Result<Catalog> {
    synth_catalog_prefix(spec, spec.material_count)
}

/// Canonical spectrogram `M_y` of one material; deterministic in
/// `(material_id, rng_seed)`.
pub fn synth_canonical(material_id: usize, spec: &SynthSpec) -> Result<Spectrogram> {
    if material_id >= spec.material_count {
        return Err(Error::InvalidArgument(format!(
            "material {material_id} >= material_count {}",
            spec.material_count
        )));
    }
    let mut cat = synth_catalog_prefix(spec, material_id + 1)?;
    Ok(cat.materials.pop().expect("non-empty"))
}

/// `T_c(M) + noise`, with i.i.d. Gaussian noise of scale `noise_std`.
pub fn synth_observe<R: Rng + ?Sized>(
    canonical: &Spectrogram,
    c: &ContextParams,
    noise_std: f64,
    rng: &mut R,
) -> Result<Spectrogram> {
    let mut out = apply_transform(canonical, c)?;
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std)
            .map_err(|e| Error::InvalidArgument(format!("noise_std: {e}")))?;
        for v in out.values_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(out)
}

/// One generated observation with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub material: usize,
    pub context: ContextParams,
    pub observation: Spectrogram,
}

/// `per_class_count` observations per material, material-major.
pub fn synth_observations(spec: &SynthSpec, catalog: &Catalog) -> Result<Vec<SynthSample>> {
    let mut out = Vec::with_capacity(catalog.materials.len() * spec.per_class_count);
    for (m, canon) in catalog.materials.iter().enumerate() {
        for i in 0..spec.per_class_count {
            let mut rng = stream(spec.rng_seed, &[0x0B5, m as u64, i as u64]);
            let c = sample_pseudo_context(&spec.context_bounds, &mut rng);
            out.push(SynthSample {
                material: m,
                context: c,
                observation: synth_observe(canon, &c, spec.noise_std, &mut rng)?,
            });
        }
    }
    Ok(out)
}

/// Per-frame spectral flatness of `exp(M)`: geometric over arithmetic mean
/// across bins, averaged over frames and channels.
pub fn spectral_flatness(m: &Spectrogram) -> f64 {
    let s = m.shape();
    let mut total = 0.0;
    for c in 0..s.channels {
        for t in 0..s.frames {
            let mut log_sum = 0.0;
            let mut lin_sum = 0.0;
            for f in 0..s.mel_bins {
                let v = m.get(c, f, t);
                log_sum += v;
                lin_sum += v.exp();
            }
            let n = s.mel_bins as f64;
            total += (log_sum / n).exp() / (lin_sum / n);
        }
    }
    total / (s.channels * s.frames) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            material_count: 12,
            per_class_count: 3,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn canonical_is_deterministic_and_in_range() {
        let spec = small();
        let a = synth_canonical(5, &spec).unwrap();
        let b = synth_canonical(5, &spec).unwrap();
        assert_eq!(a, b);
        let (lo, hi) = a
            .values()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        assert_eq!((lo, hi), (-1.0, 1.0));
        assert!(synth_canonical(12, &spec).is_err());
    }

    #[test]
    fn catalog_respects_its_separation_floor() {
        let spec = small();
        let cat = synth_catalog(&spec).unwrap();
        assert!(cat.min_pairwise_distance() >= cat.separation_floor);
        assert_eq!(cat.materials[7], synth_canonical(7, &spec).unwrap());
    }

    #[test]
    fn texture_floor_alone_is_flat() {
        let spec = SynthSpec {
            resonance_count: 0,
            ..small()
        };
        for id in 0..4 {
            let m = synth_canonical(id, &spec).unwrap();
            assert!(spectral_flatness(&m) > 0.5, "{}", spectral_flatness(&m));
        }
    }

    #[test]
    fn observe_identity_and_noise_free() {
        let spec = small();
        let m = synth_canonical(0, &spec).unwrap();
        let mut rng = stream(1, &[]);
        assert_eq!(synth_observe(&m, &ContextParams::IDENTITY, 0.0, &mut rng).unwrap(), m);
        let c = ContextParams::new(0.1, 1.1, -0.2, 0.05);
        assert_eq!(
            synth_observe(&m, &c, 0.0, &mut rng).unwrap(),
            apply_transform(&m, &c).unwrap()
        );
    }
}
