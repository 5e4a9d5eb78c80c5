//! Short-time magnitude spectrum projected onto a triangular Mel filterbank.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::RawRecording;
use crate::error::{Error, Result};
use crate::spectrogram::{SpecShape, Spectrogram};

/// Added before the logarithm so silent frames stay finite.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Hann,
    Hamming,
    Rectangular,
}

impl Window {
    /// Periodic taper of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let x = 2.0 * PI * i as f64 / n as f64;
                match self {
                    Window::Hann => 0.5 - 0.5 * x.cos(),
                    Window::Hamming => 0.54 - 0.46 * x.cos(),
                    Window::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub fft_size: usize,
    pub window_len: usize,
    pub hop_len: usize,
    pub window: Window,
    pub mel_bins: usize,
    pub sample_rate: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            fft_size: 128,
            window_len: 128,
            hop_len: 16,
            window: Window::Hann,
            mel_bins: 64,
            sample_rate: 1000.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.window_len > self.fft_size {
            return Err(Error::config("mel.window_len", "must be in 1..=fft_size"));
        }
        if self.hop_len == 0 {
            return Err(Error::config("mel.hop_len", "must be >= 1"));
        }
        if self.mel_bins < 2 {
            return Err(Error::config("mel.mel_bins", "must be >= 2"));
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::config("mel.sample_rate", "must be > 0"));
        }
        Ok(())
    }

    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.window_len).then(|| (len - self.window_len) / self.hop_len + 1)
    }

    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Dense `mel_bins x freq_bins` matrix of triangular filters spanning
/// `0..sample_rate/2`, equally spaced on the Mel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub mel_bins: usize,
    pub freq_bins: usize,
    pub weights: Vec<f64>,
    /// Filter centers in Hz.
    pub centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        let nb = cfg.freq_bins();
        let top = hz_to_mel(cfg.sample_rate / 2.0);
        let edges: Vec<f64> = (0..cfg.mel_bins + 2)
            .map(|i| mel_to_hz(top * i as f64 / (cfg.mel_bins + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate / cfg.fft_size as f64;
        let mut weights = vec![0.0; cfg.mel_bins * nb];
        for m in 0..cfg.mel_bins {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * nb..(m + 1) * nb];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                *w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
            }
            // A filter narrower than the bin spacing falls between bins; give it
            // the bin nearest its center so every row keeps positive mass.
            if row.iter().all(|&w| w == 0.0) {
                let k = ((mid / bin_hz).round() as usize).min(nb - 1);
                row[k] = 1.0;
            }
        }
        Ok(Self {
            mel_bins: cfg.mel_bins,
            freq_bins: nb,
            weights,
            centers: edges[1..=cfg.mel_bins].to_vec(),
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.freq_bins..(m + 1) * self.freq_bins]
    }

    pub fn apply(&self, spectrum: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(spectrum).map(|(w, s)| w * s).sum();
        }
    }
}

/// Reusable extractor holding the FFT plan and filterbank.
pub struct MelExtractor {
    cfg: MelConfig,
    bank: MelFilterbank,
    window: Vec<f64>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        let bank = MelFilterbank::new(cfg)?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg: cfg.clone(),
            bank,
            window: cfg.window.coefficients(cfg.window_len),
            fft,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// Magnitude spectrum (`fft_size/2 + 1` bins) of one windowed frame.
    pub fn magnitude(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        for ((b, x), w) in buf.iter_mut().zip(frame).zip(&self.window) {
            b.re = x * w;
        }
        self.fft.process(&mut buf);
        buf[..self.cfg.freq_bins()].iter().map(|c| c.norm()).collect()
    }

    pub fn extract(&self, rec: &RawRecording) -> Result<Spectrogram> {
        rec.validate()?;
        if rec.channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("recording samples".into()));
        }
        let frames = self.cfg.frame_count(rec.len()).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "slice of {} samples is shorter than the {}-sample window",
                rec.len(),
                self.cfg.window_len
            ))
        })?;
        let shape = SpecShape::new(rec.channel_count(), self.cfg.mel_bins, frames);
        let mut out = Spectrogram::zeros(shape);
        let mut bands = vec![0.0; self.cfg.mel_bins];
        for (c, samples) in rec.channels.iter().enumerate() {
            for t in 0..frames {
                let start = t * self.cfg.hop_len;
                let mag = self.magnitude(&samples[start..start + self.cfg.window_len]);
                self.bank.apply(&mag, &mut bands);
                for (m, e) in bands.iter().enumerate() {
                    out.set(c, m, t, (e + LOG_FLOOR).ln());
                }
            }
        }
        Ok(out)
    }
}

/// Log-Mel spectrogram of every channel of `slice`.
pub fn log_mel(slice: &RawRecording, cfg: &MelConfig) -> Result<Spectrogram> {
    MelExtractor::new(cfg)?.extract(slice)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_formula() {
        let cfg = MelConfig::default();
        assert_eq!(cfg.frame_count(500), Some(24));
        assert_eq!(cfg.frame_count(128), Some(1));
        assert_eq!(cfg.frame_count(127), None);
        let rec = RawRecording::new(vec![vec![0.1; 500]], 1000.0, 0).unwrap();
        assert_eq!(log_mel(&rec, &cfg).unwrap().frames(), 24);
    }

    #[test]
    fn zero_signal_hits_the_floor() {
        let rec = RawRecording::new(vec![vec![0.0; 300]; 2], 1000.0, 0).unwrap();
        let m = log_mel(&rec, &MelConfig::default()).unwrap();
        assert!(m.values().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn short_or_non_finite_input_errors() {
        let cfg = MelConfig::default();
        let rec = RawRecording::new(vec![vec![0.0; 100]], 1000.0, 0).unwrap();
        assert!(log_mel(&rec, &cfg).is_err());
        let mut v = vec![0.0; 200];
        v[7] = f64::NAN;
        let rec = RawRecording::new(vec![v], 1000.0, 0).unwrap();
        assert!(matches!(log_mel(&rec, &cfg), Err(Error::NonFinite(_))));
    }

    #[test]
    fn filter_rows_positive_and_contiguous() {
        for sr in [1000.0, 10000.0] {
            let cfg = MelConfig {
                sample_rate: sr,
                ..MelConfig::default()
            };
            let bank = MelFilterbank::new(&cfg).unwrap();
            for m in 0..bank.mel_bins {
                let row = bank.row(m);
                assert!(row.iter().sum::<f64>() > 0.0);
                let nz: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
                assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len(), "row {m} at {sr} Hz");
            }
        }
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 10.0, 440.0, 4999.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }
}
