//! Multi-channel log-Mel grid shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a spectrogram: channels x mel bins x frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpecShape {
    pub channels: usize,
    pub mel_bins: usize,
    pub frames: usize,
}

impl SpecShape {
    pub fn new(channels: usize, mel_bins: usize, frames: usize) -> Self {
        Self {
            channels,
            mel_bins,
            frames,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.mel_bins * self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Log-energy values indexed `[channel][mel bin][frame]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    shape: SpecShape,
    values: Vec<f64>,
}

impl Spectrogram {
    pub fn new(shape: SpecShape, values: Vec<f64>) -> Result<Self> {
        if shape.mel_bins < 2 || shape.frames < 1 || shape.channels < 1 {
            return Err(Error::Shape(format!(
                "spectrogram needs >=1 channel, >=2 mel bins and >=1 frame, got {shape:?}"
            )));
        }
        if values.len() != shape.len() {
            return Err(Error::Shape(format!(
                "expected {} values for {shape:?}, got {}",
                shape.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite spectrogram value {} at {i}", values[i])));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: SpecShape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: SpecShape, value: f64) -> Self {
        assert!(shape.mel_bins >= 2 && shape.frames >= 1 && shape.channels >= 1);
        Self {
            shape,
            values: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: SpecShape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(shape);
        for c in 0..shape.channels {
            for m in 0..shape.mel_bins {
                for t in 0..shape.frames {
                    let i = out.index(c, m, t);
                    out.values[i] = f(c, m, t);
                }
            }
        }
        out
    }

    pub fn shape(&self) -> SpecShape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn mel_bins(&self) -> usize {
        self.shape.mel_bins
    }

    pub fn frames(&self) -> usize {
        self.shape.frames
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn index(&self, channel: usize, bin: usize, frame: usize) -> usize {
        (channel * self.shape.mel_bins + bin) * self.shape.frames + frame
    }

    #[inline]
    pub fn get(&self, channel: usize, bin: usize, frame: usize) -> f64 {
        self.values[self.index(channel, bin, frame)]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, bin: usize, frame: usize, value: f64) {
        let i = self.index(channel, bin, frame);
        self.values[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Mean absolute difference per element, i.e. the l1 norm divided by F*T*C.
    pub fn mean_abs_diff(&self, other: &Spectrogram) -> Result<f64> {
        self.check_same_shape(other)?;
        let sum: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(sum / self.values.len() as f64)
    }

    pub fn check_same_shape(&self, other: &Spectrogram) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `alpha * self + beta * other`.
    pub fn lin_comb(&self, alpha: f64, other: &Spectrogram, beta: f64) -> Result<Spectrogram> {
        self.check_same_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        Ok(Spectrogram {
            shape: self.shape,
            values,
        })
    }
}
