//! Interchangeable pipeline components behind common traits, registered by
//! name and chosen at runtime from the experiment's switches.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::nets::EstimatorNet;
use crate::spectrogram::Spectrogram;
use crate::transform::{apply_inverse, ContextParams};
use crate::ucpc::{shrink, PriorStats, UncertaintyMap};

/// Maps an observation to the context that canonicalizes it.
pub trait ContextEstimator: Send + Sync {
    fn name(&self) -> &str;

    fn estimate(&self, batch: &[&Spectrogram]) -> Result<Vec<ContextParams>>;

    /// `T_c^-1(M)` with `c` estimated from `M`.
    fn canonicalize(&self, m: &Spectrogram) -> Result<Spectrogram> {
        let c = self.estimate(&[m])?[0];
        apply_inverse(m, &c)
    }

    fn canonicalize_batch(&self, batch: &[&Spectrogram]) -> Result<Vec<Spectrogram>> {
        let cs = self.estimate(batch)?;
        batch.iter().zip(&cs).map(|(m, c)| apply_inverse(m, c)).collect()
    }
}

/// Always the identity context, so canonicalization is a passthrough.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEstimator;

impl ContextEstimator for IdentityEstimator {
    fn name(&self) -> &str {
        "identity"
    }

    fn estimate(&self, batch: &[&Spectrogram]) -> Result<Vec<ContextParams>> {
        Ok(vec![ContextParams::IDENTITY; batch.len()])
    }

    fn canonicalize(&self, m: &Spectrogram) -> Result<Spectrogram> {
        Ok(m.clone())
    }

    fn canonicalize_batch(&self, batch: &[&Spectrogram]) -> Result<Vec<Spectrogram>> {
        Ok(batch.iter().map(|m| (*m).clone()).collect())
    }
}

/// Returns the known context of inputs it has been told about, matched by
/// exact value equality. Unknown inputs are an error.
#[derive(Debug, Clone, Default)]
pub struct OracleEstimator {
    known: HashMap<Vec<u64>, ContextParams>,
}

fn key(m: &Spectrogram) -> Vec<u64> {
    let s = m.shape();
    [s.channels, s.mel_bins, s.frames]
        .iter()
        .map(|&v| v as u64)
        .chain(m.values().iter().map(|v| v.to_bits()))
        .collect()
}

impl OracleEstimator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, m: &Spectrogram, c: ContextParams) {
        self.known.insert(key(m), c);
    }

    pub fn len(&self) -> usize {
        self.known.len()
    }

    pub fn is_empty(&self) -> bool {
        self.known.is_empty()
    }
}

impl ContextEstimator for OracleEstimator {
    fn name(&self) -> &str {
        "oracle"
    }

    fn estimate(&self, batch: &[&Spectrogram]) -> Result<Vec<ContextParams>> {
        batch
            .iter()
            .map(|m| {
                self.known
                    .get(&key(m))
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument("oracle estimator: unknown input".into()))
            })
            .collect()
    }
}

impl ContextEstimator for EstimatorNet {
    fn name(&self) -> &str {
        "learned"
    }

    fn estimate(&self, batch: &[&Spectrogram]) -> Result<Vec<ContextParams>> {
        EstimatorNet::estimate(self, batch)
    }
}

/// Initial center and variance for a newly introduced class.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub center: Vec<f64>,
    pub variance: f64,
    pub lambda: f64,
}

pub trait PrototypeCalibrator: Send + Sync {
    fn name(&self) -> &str;

    /// `prior` is `None` while fewer than two earlier classes exist.
    fn calibrate(&self, prototype: &[f64], uncertainty: f64, prior: Option<&PriorStats>) -> Result<Calibration>;

    /// Whether the variance is optimized during incremental sessions.
    fn trains_variance(&self) -> bool;

    /// Whether `calibrate` reads the class uncertainty.
    fn needs_uncertainty(&self) -> bool;
}

/// Shrink toward the prior with variance `beta + alpha * U_y`.
#[derive(Debug, Clone, Copy)]
pub struct UcpcCalibrator {
    pub map: UncertaintyMap,
}

impl PrototypeCalibrator for UcpcCalibrator {
    fn name(&self) -> &str {
        "ucpc"
    }

    fn calibrate(&self, prototype: &[f64], uncertainty: f64, prior: Option<&PriorStats>) -> Result<Calibration> {
        match prior {
            Some(p) => {
                let s = shrink(prototype, p, self.map.variance(uncertainty))?;
                Ok(Calibration {
                    center: s.center,
                    variance: s.variance,
                    lambda: s.lambda,
                })
            }
            None => Ok(Calibration {
                center: prototype.to_vec(),
                variance: self.map.beta,
                lambda: 0.0,
            }),
        }
    }

    fn trains_variance(&self) -> bool {
        true
    }

    fn needs_uncertainty(&self) -> bool {
        true
    }
}

/// No shrinkage; every class keeps variance `beta`.
#[derive(Debug, Clone, Copy)]
pub struct PlainCalibrator {
    pub beta: f64,
}

impl PrototypeCalibrator for PlainCalibrator {
    fn name(&self) -> &str {
        "plain"
    }

    fn calibrate(&self, prototype: &[f64], _uncertainty: f64, _prior: Option<&PriorStats>) -> Result<Calibration> {
        Ok(Calibration {
            center: prototype.to_vec(),
            variance: self.beta,
            lambda: 0.0,
        })
    }

    fn trains_variance(&self) -> bool {
        false
    }

    fn needs_uncertainty(&self) -> bool {
        false
    }
}

type Factory<A, T> = Box<dyn Fn(&A) -> Result<Box<T>> + Send + Sync>;

/// Name-to-constructor table for one component trait.
pub struct Registry<A, T: ?Sized> {
    kind: &'static str,
    factories: BTreeMap<String, Factory<A, T>>,
}

impl<A, T: ?Sized> Registry<A, T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, f: impl Fn(&A) -> Result<Box<T>> + Send + Sync + 'static) {
        self.factories.insert(name.to_string(), Box::new(f));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, args: &A) -> Result<Box<T>> {
        let f = self.factories.get(name).ok_or_else(|| {
            Error::config(
                self.kind,
                format!("unknown strategy `{name}`; known: {}", self.names().join(", ")),
            )
        })?;
        f(args)
    }
}

impl<A, T: ?Sized> fmt::Debug for Registry<A, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("names", &self.names())
            .finish()
    }
}

/// Inputs available when building a calibrator.
#[derive(Debug, Clone, Copy)]
pub struct CalibratorArgs {
    pub map: UncertaintyMap,
}

pub fn calibrators() -> Registry<CalibratorArgs, dyn PrototypeCalibrator> {
    let mut r: Registry<CalibratorArgs, dyn PrototypeCalibrator> = Registry::new("calibrator");
    r.register("ucpc", |a: &CalibratorArgs| {
        a.map.validate()?;
        Ok(Box::new(UcpcCalibrator { map: a.map }) as Box<dyn PrototypeCalibrator>)
    });
    r.register("plain", |a: &CalibratorArgs| {
        Ok(Box::new(PlainCalibrator { beta: a.map.beta }) as Box<dyn PrototypeCalibrator>)
    });
    r
}
