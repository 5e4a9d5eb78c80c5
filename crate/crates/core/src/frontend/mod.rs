//! Raw recordings, log-Mel extraction, the synthetic material generator and
//! the on-disk dataset format.

pub mod dataset;
pub mod mel;
pub mod synth;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{Dataset, Representation, Sample};
pub use mel::{log_mel, MelConfig, MelFilterbank, Window, LOG_FLOOR};
pub use synth::{synth_canonical, synth_catalog, synth_observe, SynthSpec};

/// A multi-channel time series with its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecording {
    /// One sample vector per channel, all of equal length.
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: f64,
    pub label_fine: u32,
    pub label_coarse: u32,
}

impl RawRecording {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: f64, label_fine: u32) -> Result<Self> {
        let rec = Self {
            channels,
            sample_rate,
            label_fine,
            label_coarse: 0,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::InvalidArgument("recording has no channels".into()));
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sample rate must be > 0, got {}",
                self.sample_rate
            )));
        }
        let n = self.channels[0].len();
        if self.channels.iter().any(|c| c.len() != n) {
            return Err(Error::Shape("recording channels differ in length".into()));
        }
        Ok(())
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of [`slice_signal`]; `too_short` flags a recording shorter than one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Slices {
    pub slices: Vec<RawRecording>,
    pub discarded: usize,
    pub too_short: bool,
}

/// Cut a recording into consecutive non-overlapping slices of
/// `round(slice_len_s * sample_rate)` samples, dropping the remainder.
pub fn slice_signal(rec: &RawRecording, slice_len_s: f64) -> Result<Slices> {
    rec.validate()?;
    let width = (slice_len_s * rec.sample_rate).round();
    if !(width >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "slice of {slice_len_s} s at {} Hz is shorter than one sample",
            rec.sample_rate
        )));
    }
    let width = width as usize;
    let n = rec.len();
    let count = n / width;
    if count == 0 {
        warn!("recording of {n} samples is shorter than one slice of {width}");
    }
    let slices = (0..count)
        .map(|k| RawRecording {
            channels: rec
                .channels
                .iter()
                .map(|c| c[k * width..(k + 1) * width].to_vec())
                .collect(),
            sample_rate: rec.sample_rate,
            label_fine: rec.label_fine,
            label_coarse: rec.label_coarse,
        })
        .collect();
    Ok(Slices {
        slices,
        discarded: n - count * width,
        too_short: count == 0,
    })
}
