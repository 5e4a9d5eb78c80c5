//! Session construction, cumulative evaluation and the AA / PD / ADR metrics.

mod results;

pub use results::{read_results, write_results, ResultRow, RunResults};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{Dataset, Sample};
use crate::rng::stream;
use crate::spectrogram::Spectrogram;
use crate::training::Model;
use crate::ucpc::{classify_scaled, ClassRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSpec {
    /// Classes per incremental session (N).
    pub ways: usize,
    /// Support samples per novel class (K).
    pub shots: usize,
    /// Number of incremental sessions (S).
    pub sessions: usize,
    /// Defaults to every class not used by the incremental sessions.
    pub base_class_count: Option<usize>,
    /// Share of each class held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 5,
            sessions: 9,
            base_class_count: None,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ways == 0 {
            return Err(Error::config("protocol.ways", "must be >= 1"));
        }
        if self.shots == 0 {
            return Err(Error::config("protocol.shots", "must be >= 1"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("protocol.test_fraction", "must be in (0, 1)"));
        }
        Ok(())
    }

    /// Base classes for a dataset of `total` classes.
    pub fn base_classes(&self, total: usize) -> Result<usize> {
        let novel = self.ways * self.sessions;
        let base = match self.base_class_count {
            Some(b) => b,
            None => total.checked_sub(novel).ok_or_else(|| {
                Error::Protocol(format!(
                    "{} sessions of {} ways need {novel} novel classes, dataset has {total}",
                    self.sessions, self.ways
                ))
            })?,
        };
        if base == 0 {
            return Err(Error::Protocol("no classes left for the base session".into()));
        }
        if base + novel > total {
            return Err(Error::Protocol(format!(
                "{base} base + {novel} novel classes exceed the {total} available ({} short)",
                base + novel - total
            )));
        }
        Ok(base)
    }
}

/// Classes and support samples of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub index: usize,
    pub classes: Vec<usize>,
    /// Dataset indices of the support samples.
    pub support: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLedger {
    pub spec: ProtocolSpec,
    pub sessions: Vec<SessionPlan>,
    /// Held-out test indices per class, fixed across sessions.
    pub test: BTreeMap<usize, Vec<usize>>,
    /// Accuracy after each session, once evaluated.
    pub accuracy: Vec<Option<f64>>,
}

impl SessionLedger {
    /// Classes introduced up to and including `session`.
    pub fn seen_classes(&self, session: usize) -> Vec<usize> {
        self.sessions[..=session]
            .iter()
            .flat_map(|s| s.classes.iter().copied())
            .collect()
    }

    /// Test indices of every class seen up to `session`.
    pub fn test_indices(&self, session: usize) -> Vec<usize> {
        self.seen_classes(session)
            .iter()
            .flat_map(|c| self.test[c].iter().copied())
            .collect()
    }

    /// Check class disjointness, support/test disjointness and shot counts.
    pub fn check(&self, ds: &Dataset) -> Result<()> {
        let mut classes = BTreeSet::new();
        for s in &self.sessions {
            for &c in &s.classes {
                if !classes.insert(c) {
                    return Err(Error::Protocol(format!("class {c} appears in two sessions")));
                }
            }
            let class_set: BTreeSet<usize> = s.classes.iter().copied().collect();
            for &i in &s.support {
                if !class_set.contains(&ds.samples[i].label) {
                    return Err(Error::Protocol(format!(
                        "session {} support sample {i} has foreign label {}",
                        s.index, ds.samples[i].label
                    )));
                }
            }
            if s.index > 0 {
                for &c in &s.classes {
                    let k = s.support.iter().filter(|&&i| ds.samples[i].label == c).count();
                    if k != self.spec.shots {
                        return Err(Error::Protocol(format!(
                            "class {c} has {k} support samples, expected {}",
                            self.spec.shots
                        )));
                    }
                }
            }
            let support: BTreeSet<usize> = s.support.iter().copied().collect();
            for &c in &s.classes {
                let test = self
                    .test
                    .get(&c)
                    .ok_or_else(|| Error::Protocol(format!("class {c} has no test split")))?;
                if test.iter().any(|i| support.contains(i)) {
                    return Err(Error::Protocol(format!("class {c}: support and test overlap")));
                }
                if test.iter().any(|&i| ds.samples[i].label != c) {
                    return Err(Error::Protocol(format!("class {c}: test split has foreign labels")));
                }
            }
        }
        Ok(())
    }
}

/// Assign base and novel classes, per-class test splits and supports.
pub fn build_sessions(ds: &Dataset, spec: &ProtocolSpec) -> Result<SessionLedger> {
    spec.validate()?;
    let total = ds.class_count;
    let base = spec.base_classes(total)?;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut stream(spec.seed, &[0xC1A55]));

    let mut test = BTreeMap::new();
    let mut pools = BTreeMap::new();
    let used = base + spec.ways * spec.sessions;
    for (rank, &c) in order[..used].iter().enumerate() {
        let mut idx = ds.indices_of(c);
        let n = idx.len();
        let n_test = ((n as f64 * spec.test_fraction).round() as usize).max(1);
        let need = n_test + if rank < base { 1 } else { spec.shots };
        if n < need {
            return Err(Error::Protocol(format!(
                "class {c} has {n} samples, needs {need} ({n_test} test + support); short by {}",
                need - n
            )));
        }
        idx.shuffle(&mut stream(spec.seed, &[0x5A3, c as u64]));
        let pool = idx.split_off(n_test);
        idx.sort_unstable();
        test.insert(c, idx);
        pools.insert(c, pool);
    }

    let mut sessions = Vec::with_capacity(spec.sessions + 1);
    let mut base_classes: Vec<usize> = order[..base].to_vec();
    base_classes.sort_unstable();
    let support = base_classes.iter().flat_map(|c| pools[c].iter().copied()).collect();
    sessions.push(SessionPlan {
        index: 0,
        classes: base_classes,
        support,
    });
    for s in 0..spec.sessions {
        let start = base + s * spec.ways;
        let mut classes: Vec<usize> = order[start..start + spec.ways].to_vec();
        classes.sort_unstable();
        let support = classes
            .iter()
            .flat_map(|c| pools[c][..spec.shots].iter().copied())
            .collect();
        sessions.push(SessionPlan {
            index: s + 1,
            classes,
            support,
        });
    }
    let ledger = SessionLedger {
        spec: *spec,
        sessions,
        test,
        accuracy: vec![None; spec.sessions + 1],
    };
    ledger.check(ds)?;
    Ok(ledger)
}

/// Fraction of `predicted` equal to `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Accuracy over the cumulative test set after `session`, using `predict`
/// for every sample.
pub fn evaluate_with<F>(ledger: &SessionLedger, session: usize, ds: &Dataset, mut predict: F) -> Result<f64>
where
    F: FnMut(&[&Sample]) -> Result<Vec<usize>>,
{
    let idx = ledger.test_indices(session);
    let samples: Vec<&Sample> = idx.iter().map(|&i| &ds.samples[i]).collect();
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let pred = predict(&samples)?;
    accuracy(&pred, &truth)
}

/// Deterministic-mode accuracy of `model` + `records` after `session`.
pub fn evaluate(model: &Model, records: &[ClassRecord], ledger: &SessionLedger, session: usize, ds: &Dataset) -> Result<f64> {
    let have: BTreeSet<usize> = records.iter().map(|r| r.class).collect();
    if let Some(c) = ledger.seen_classes(session).into_iter().find(|c| !have.contains(c)) {
        return Err(Error::Protocol(format!("no class record for class {c} after session {session}")));
    }
    let seen: BTreeSet<usize> = ledger.seen_classes(session).into_iter().collect();
    let active: Vec<ClassRecord> = records.iter().filter(|r| seen.contains(&r.class)).cloned().collect();
    evaluate_with(ledger, session, ds, |samples| {
        let inputs: Vec<&Spectrogram> = samples.iter().map(|s| &s.spectrogram).collect();
        let z = model.embed_unit_rms(&inputs, 64)?;
        z.iter()
            .map(|zi| classify_scaled::<rand_chacha::ChaCha8Rng>(zi, &active, None, 1.0).map(|(c, _)| c))
            .collect()
    })
}

/// Aggregate metrics over the per-session accuracies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean accuracy over sessions.
    pub aa: f64,
    /// First minus last accuracy; `None` with a single session.
    pub pd: Option<f64>,
    /// Summed relative drop between consecutive sessions, divided by the
    /// session count S+1, in percent; `None` with a single session or any
    /// zero accuracy. Dividing by S+1 rather than the S transitions is what
    /// reproduces published tables.
    pub adr: Option<f64>,
}

pub fn metrics(acc: &[f64]) -> Result<Metrics> {
    if acc.is_empty() {
        return Err(Error::InvalidArgument("no accuracies".into()));
    }
    let aa = acc.iter().sum::<f64>() / acc.len() as f64;
    let s = acc.len() - 1;
    if s == 0 {
        return Ok(Metrics { aa, pd: None, adr: None });
    }
    let pd = Some(acc[0] - acc[s]);
    let adr = if acc.iter().any(|&a| a == 0.0) {
        None
    } else {
        let sum: f64 = acc.windows(2).map(|w| (w[0] - w[1]) / w[0]).sum();
        Some(100.0 * sum / acc.len() as f64)
    };
    Ok(Metrics { aa, pd, adr })
}
