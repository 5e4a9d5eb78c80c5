//! Dataset directories: a `manifest.toml`, one binary record per sample under
//! `records/`, and optional sidecars with ground-truth contexts and canonical
//! spectrograms.
//!
//! A record is a 16-byte header of little-endian `u32`s (magic, channel
//! count, values per channel, fine label) followed by little-endian `f32`
//! values, channel-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mel::MelExtractor;
use super::{slice_signal, MelConfig, RawRecording};
use crate::error::{Error, Result};
use crate::nets::checkpoint::write_atomic;
use crate::spectrogram::{SpecShape, Spectrogram};
use crate::transform::ContextParams;

pub const RECORD_MAGIC: u32 = u32::from_le_bytes(*b"CATR");
pub const FORMAT_NAME: &str = "tactile-dataset";
pub const FORMAT_VERSION: u32 = 1;

/// What the records hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Raw time series, sliced and converted with the run's Mel settings on load.
    Waveform,
    /// Ready-made spectrograms of `mel_bins x frames` per channel.
    Spectrogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub representation: Representation,
    pub sample_rate: f64,
    pub channel_count: usize,
    pub slice_len_s: f64,
    pub record_count: usize,
    pub class_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mel_bins: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
}

/// One labeled record as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub label: u32,
    /// `channel_count` rows of equal length.
    pub channels: Vec<Vec<f32>>,
}

impl Record {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let len = self.channels.first().map_or(0, Vec::len);
        if self.channels.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("record channels differ in length".into()));
        }
        let mut out = Vec::with_capacity(16 + 4 * len * self.channels.len());
        for h in [RECORD_MAGIC, self.channels.len() as u32, len as u32, self.label] {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for v in self.channels.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        if bytes.len() < 16 {
            return Err(bad("record shorter than its header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        if word(0) != RECORD_MAGIC {
            return Err(bad("bad record magic".into()));
        }
        let (cc, len, label) = (word(1) as usize, word(2) as usize, word(3));
        if bytes.len() != 16 + 4 * cc * len {
            return Err(bad(format!(
                "header declares {cc} x {len} values, body holds {} bytes",
                bytes.len() - 16
            )));
        }
        let vals: Vec<f32> = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let channels = if len == 0 {
            vec![Vec::new(); cc]
        } else {
            vals.chunks(len).map(<[f32]>::to_vec).collect()
        };
        Ok(Self { label, channels })
    }

    pub fn from_spectrogram(m: &Spectrogram, label: u32) -> Self {
        let per = m.mel_bins() * m.frames();
        Self {
            label,
            channels: m
                .values()
                .chunks(per)
                .map(|c| c.iter().map(|&v| v as f32).collect())
                .collect(),
        }
    }

    pub fn to_spectrogram(&self, mel_bins: usize, frames: usize) -> Result<Spectrogram> {
        let shape = SpecShape::new(self.channels.len(), mel_bins, frames);
        let values = self.channels.iter().flatten().map(|&v| v as f64).collect();
        Spectrogram::new(shape, values)
    }

    pub fn to_recording(&self, sample_rate: f64) -> Result<RawRecording> {
        let channels = self
            .channels
            .iter()
            .map(|c| c.iter().map(|&v| v as f64).collect())
            .collect();
        RawRecording::new(channels, sample_rate, self.label)
    }
}

/// One model input with its class and, for synthetic data, its true context.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: usize,
    pub spectrogram: Spectrogram,
    pub context: Option<ContextParams>,
}

/// Spectrogram samples of one shape, ready for the protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: SpecShape,
    pub class_count: usize,
    pub samples: Vec<Sample>,
    /// Canonical spectrogram per class when known (synthetic data).
    pub canonicals: Option<Vec<Spectrogram>>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.spectrogram.shape() != self.shape {
                return Err(Error::Shape(format!(
                    "sample {i} is {:?}, dataset is {:?}",
                    s.spectrogram.shape(),
                    self.shape
                )));
            }
            if s.label >= self.class_count {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} label {} >= class_count {}",
                    s.label, self.class_count
                )));
            }
            if !s.spectrogram.is_finite() {
                return Err(Error::NonFinite(format!("sample {i}")));
            }
        }
        if let Some(c) = &self.canonicals {
            if c.len() != self.class_count {
                return Err(Error::Shape("one canonical spectrogram per class expected".into()));
            }
        }
        Ok(())
    }

    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].label == label)
            .collect()
    }
}

fn record_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("records").join(format!("{i:06}.bin"))
}

fn canonical_path(dir: &Path, class: usize) -> PathBuf {
    dir.join("canonical").join(format!("{class:06}.bin"))
}

/// Refuse to write into a non-empty directory unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::InvalidArgument(format!(
                "{} exists and is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        if non_empty {
            for sub in ["records", "canonical"] {
                let p = dir.join(sub);
                if p.exists() {
                    fs::remove_dir_all(p)?;
                }
            }
        }
    }
    fs::create_dir_all(dir.join("records"))?;
    Ok(())
}

/// Write a spectrogram dataset, with the context and canonical sidecars
/// whenever every sample carries them.
pub fn write_dataset(ds: &Dataset, dir: &Path, sample_rate: f64, slice_len_s: f64, force: bool) -> Result<()> {
    ds.validate()?;
    prepare_dir(dir, force)?;
    for (i, s) in ds.samples.iter().enumerate() {
        let rec = Record::from_spectrogram(&s.spectrogram, s.label as u32);
        write_atomic(&record_path(dir, i), &rec.encode()?)?;
    }
    let contexts: Option<Vec<ContextParams>> = ds.samples.iter().map(|s| s.context).collect();
    if let Some(c) = contexts {
        let json = serde_json::to_string_pretty(&c)
            .map_err(|e| Error::InvalidArgument(format!("contexts: {e}")))?;
        write_atomic(&dir.join("contexts.json"), json.as_bytes())?;
    }
    if let Some(canon) = &ds.canonicals {
        fs::create_dir_all(dir.join("canonical"))?;
        for (k, m) in canon.iter().enumerate() {
            let rec = Record::from_spectrogram(m, k as u32);
            write_atomic(&canonical_path(dir, k), &rec.encode()?)?;
        }
    }
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        representation: Representation::Spectrogram,
        sample_rate,
        channel_count: ds.shape.channels,
        slice_len_s,
        record_count: ds.samples.len(),
        class_count: ds.class_count,
        mel_bins: Some(ds.shape.mel_bins),
        frames: Some(ds.shape.frames),
    };
    write_manifest(dir, &manifest)
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let text = toml::to_string(m).map_err(|e| Error::InvalidArgument(format!("manifest: {e}")))?;
    write_atomic(&dir.join("manifest.toml"), text.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.toml");
    let text = fs::read_to_string(&path)?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format != FORMAT_NAME || m.version != FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported format {} v{}", m.format, m.version),
        ));
    }
    if m.representation == Representation::Spectrogram && (m.mel_bins.is_none() || m.frames.is_none()) {
        return Err(Error::format(&path, "spectrogram datasets need mel_bins and frames"));
    }
    Ok(m)
}

pub fn read_record(dir: &Path, i: usize) -> Result<Record> {
    let p = record_path(dir, i);
    Record::decode(&fs::read(&p)?, &p)
}

/// Load a dataset directory. Waveform records are sliced and converted with
/// `mel`, whose sample rate must match the manifest.
pub fn read_dataset(dir: &Path, mel: &MelConfig) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let mpath = dir.join("manifest.toml");
    let mut samples = Vec::new();
    match m.representation {
        Representation::Spectrogram => {
            let (nf, nt) = (m.mel_bins.expect("checked"), m.frames.expect("checked"));
            let contexts: Option<Vec<ContextParams>> = {
                let p = dir.join("contexts.json");
                if p.exists() {
                    let text = fs::read_to_string(&p)?;
                    let c: Vec<ContextParams> =
                        serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?;
                    if c.len() != m.record_count {
                        return Err(Error::format(&p, "one context per record expected"));
                    }
                    Some(c)
                } else {
                    None
                }
            };
            for i in 0..m.record_count {
                let rec = read_record(dir, i)?;
                if rec.channels.len() != m.channel_count {
                    return Err(Error::format(record_path(dir, i), "channel count differs from manifest"));
                }
                samples.push(Sample {
                    label: rec.label as usize,
                    spectrogram: rec.to_spectrogram(nf, nt)?,
                    context: contexts.as_ref().map(|c| c[i]),
                });
            }
        }
        Representation::Waveform => {
            if (mel.sample_rate - m.sample_rate).abs() > 1e-9 {
                return Err(Error::format(
                    &mpath,
                    format!(
                        "dataset sample rate {} differs from mel.sample_rate {}",
                        m.sample_rate, mel.sample_rate
                    ),
                ));
            }
            let ex = MelExtractor::new(mel)?;
            for i in 0..m.record_count {
                let rec = read_record(dir, i)?.to_recording(m.sample_rate)?;
                for s in slice_signal(&rec, m.slice_len_s)?.slices {
                    samples.push(Sample {
                        label: s.label_fine as usize,
                        spectrogram: ex.extract(&s)?,
                        context: None,
                    });
                }
            }
        }
    }
    let shape = samples
        .first()
        .map(|s| s.spectrogram.shape())
        .ok_or_else(|| Error::format(&mpath, "dataset has no samples"))?;
    let canonicals = if dir.join("canonical").exists() {
        let nf = shape.mel_bins;
        let nt = shape.frames;
        Some(
            (0..m.class_count)
                .map(|k| {
                    let p = canonical_path(dir, k);
                    Record::decode(&fs::read(&p)?, &p)?.to_spectrogram(nf, nt)
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let ds = Dataset {
        shape,
        class_count: m.class_count,
        samples,
        canonicals,
    };
    ds.validate()?;
    Ok(ds)
}

/// Write raw recordings as a waveform dataset.
pub fn write_waveform_dataset(
    recs: &[RawRecording],
    class_count: usize,
    slice_len_s: f64,
    dir: &Path,
    force: bool,
) -> Result<()> {
    let first = recs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no recordings".into()))?;
    prepare_dir(dir, force)?;
    for (i, r) in recs.iter().enumerate() {
        if r.channel_count() != first.channel_count() || r.sample_rate != first.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "recording {i} differs in channels or sample rate"
            )));
        }
        let rec = Record {
            label: r.label_fine,
            channels: r
                .channels
                .iter()
                .map(|c| c.iter().map(|&v| v as f32).collect())
                .collect(),
        };
        write_atomic(&record_path(dir, i), &rec.encode()?)?;
    }
    write_manifest(
        dir,
        &Manifest {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            representation: Representation::Waveform,
            sample_rate: first.sample_rate,
            channel_count: first.channel_count(),
            slice_len_s,
            record_count: recs.len(),
            class_count,
            mel_bins: None,
            frames: None,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip_is_bit_exact() {
        let rec = Record {
            label: 7,
            channels: vec![vec![1.5, -0.0, f32::MIN_POSITIVE], vec![3.25, 1e-30, -7.0]],
        };
        let bytes = rec.encode().unwrap();
        assert_eq!(bytes.len(), 16 + 24);
        let back = Record::decode(&bytes, Path::new("r")).unwrap();
        assert_eq!(back.encode().unwrap(), bytes);
        assert_eq!(back.channels[0][1].to_bits(), (-0.0f32).to_bits());
        assert!(Record::decode(&bytes[..20], Path::new("r")).is_err());
    }
}
