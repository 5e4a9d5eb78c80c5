//! Results CSV: one `session` row per session and a closing `summary` row.
//!
//! Columns: `row,session,classes_seen,accuracy,aa,pd,adr`. Session rows fill
//! the first four, the summary row the last three; undefined values are empty.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{metrics, Metrics};
use crate::error::{Error, Result};
use crate::nets::checkpoint::write_atomic;

pub const HEADER: [&str; 7] = ["row", "session", "classes_seen", "accuracy", "aa", "pd", "adr"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub row: String,
    pub session: Option<usize>,
    pub classes_seen: Option<usize>,
    pub accuracy: Option<f64>,
    pub aa: Option<f64>,
    pub pd: Option<f64>,
    pub adr: Option<f64>,
}

/// Parsed contents of one results file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResults {
    /// `(classes seen, accuracy)` per session.
    pub sessions: Vec<(usize, f64)>,
    pub metrics: Metrics,
}

impl RunResults {
    pub fn from_accuracies(sessions: Vec<(usize, f64)>) -> Result<Self> {
        let acc: Vec<f64> = sessions.iter().map(|s| s.1).collect();
        Ok(Self {
            metrics: metrics(&acc)?,
            sessions,
        })
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.sessions.iter().map(|s| s.1).collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        for (i, (seen, acc)) in self.sessions.iter().enumerate() {
            w.serialize(ResultRow {
                row: "session".into(),
                session: Some(i),
                classes_seen: Some(*seen),
                accuracy: Some(*acc),
                aa: None,
                pd: None,
                adr: None,
            })
            .map_err(csv_err)?;
        }
        w.serialize(ResultRow {
            row: "summary".into(),
            session: None,
            classes_seen: None,
            accuracy: None,
            aa: Some(self.metrics.aa),
            pd: self.metrics.pd,
            adr: self.metrics.adr,
        })
        .map_err(csv_err)?;
        w.into_inner()
            .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
    }
}

pub fn write_results(path: &Path, r: &RunResults) -> Result<()> {
    write_atomic(path, &r.to_csv()?)
}

pub fn read_results(path: &Path) -> Result<RunResults> {
    let bad = |m: String| Error::format(path, m);
    let mut rd = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = rd.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(bad(format!("unexpected columns {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut sessions = Vec::new();
    let mut summary = None;
    for row in rd.deserialize::<ResultRow>() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        match row.row.as_str() {
            "session" => {
                let (Some(i), Some(seen), Some(acc)) = (row.session, row.classes_seen, row.accuracy) else {
                    return Err(bad("session row with missing fields".into()));
                };
                if i != sessions.len() {
                    return Err(bad(format!("session {i} out of order")));
                }
                sessions.push((seen, acc));
            }
            "summary" => {
                let aa = row.aa.ok_or_else(|| bad("summary row without aa".into()))?;
                summary = Some(Metrics {
                    aa,
                    pd: row.pd,
                    adr: row.adr,
                });
            }
            other => return Err(bad(format!("unknown row kind `{other}`"))),
        }
    }
    let metrics = summary.ok_or_else(|| bad("missing summary row".into()))?;
    if sessions.is_empty() {
        return Err(bad("no session rows".into()));
    }
    Ok(RunResults { sessions, metrics })
}
