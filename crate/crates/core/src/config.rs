//! Experiment configuration: TOML with one section per component. Every
//! field has a default, so a partial file resolves to a complete config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{MelConfig, SynthSpec};
use crate::harness::ProtocolSpec;
use crate::nets::{EmbedderConfig, EstimatorConfig};
use crate::training::{AnchorSource, LossWeights, Schedules, TrainSchedule};
use crate::transform::ContextBounds;
use crate::ucpc::UncertaintyMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthSpec),
    Directory { path: PathBuf },
}

impl Default for DataSource {
    /// Enough materials for the default protocol: 35 base classes plus nine
    /// 5-way sessions.
    fn default() -> Self {
        DataSource::Synthetic(SynthSpec {
            material_count: 80,
            ..SynthSpec::default()
        })
    }
}

/// Component switches; all on is the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Canonicalize inputs through the learned context estimator.
    pub cat: bool,
    /// Train with the pseudo-context consistency term.
    pub cat_loss: bool,
    /// Calibrate novel prototypes by context uncertainty.
    pub ucpc: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            cat: true,
            cat_loss: true,
            ucpc: true,
        }
    }
}

impl Ablation {
    pub const ALL_OFF: Ablation = Ablation {
        cat: false,
        cat_loss: false,
        ucpc: false,
    };

    pub fn label(&self) -> String {
        let on = |b: bool| if b { "on" } else { "off" };
        format!("cat-{}_catloss-{}_ucpc-{}", on(self.cat), on(self.cat_loss), on(self.ucpc))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingOptions {
    /// Pseudo-context draws per sample for the consistency term.
    pub p_count: usize,
    /// Also apply the consistency and magnitude terms while pretraining.
    pub cat_in_pretrain: bool,
    /// Multiplier on cosine logits during training.
    pub logit_scale: f64,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self {
            p_count: 1,
            cat_in_pretrain: false,
            logit_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UcpcOptions {
    pub n_ucpc: usize,
    pub anchor: AnchorSource,
}

impl Default for UcpcOptions {
    fn default() -> Self {
        Self {
            n_ucpc: 20,
            anchor: AnchorSource::Canonicalized,
        }
    }
}

/// Range of the pseudo-contexts used by the consistency term and the
/// uncertainty estimate, as a fraction of `bounds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoOptions {
    pub scale: f64,
}

impl Default for PseudoOptions {
    fn default() -> Self {
        Self { scale: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// Training seeds; one run per seed.
    pub seeds: Vec<u64>,
    /// Also derive the session split from each run seed.
    pub reseed_splits: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            reseed_splits: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunOptions,
    pub data: DataSource,
    pub mel: MelConfig,
    pub bounds: ContextBounds,
    pub pseudo: PseudoOptions,
    pub estimator: EstimatorConfig,
    pub embedder: EmbedderConfig,
    pub uncertainty: UncertaintyMap,
    pub weights: LossWeights,
    pub schedules: Schedules,
    pub protocol: ProtocolSpec,
    pub ucpc: UcpcOptions,
    pub ablation: Ablation,
    pub training: TrainingOptions,
}

impl ExperimentConfig {
    /// Range pseudo-contexts are drawn from.
    pub fn pseudo_bounds(&self) -> ContextBounds {
        self.bounds.scaled(self.pseudo.scale)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| Error::config(error_location(text, e.span()), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { field, msg } => Error::Config {
                field,
                msg: format!("{msg} (in {})", path.display()),
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds", "need at least one seed"));
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
            self.protocol
                .base_classes(s.material_count)
                .map_err(|e| Error::config("data.material_count", e.to_string()))?;
        }
        self.mel.validate()?;
        self.bounds
            .validate()
            .map_err(|e| Error::config("bounds", e.to_string()))?;
        if !(self.pseudo.scale > 0.0 && self.pseudo.scale <= 1.0) {
            return Err(Error::config("pseudo.scale", "must be in (0, 1]"));
        }
        self.estimator.validate()?;
        self.embedder.validate()?;
        self.uncertainty.validate()?;
        self.weights.validate()?;
        self.schedules.validate()?;
        self.protocol.validate()?;
        if self.ucpc.n_ucpc == 0 {
            return Err(Error::config("ucpc.n_ucpc", "must be >= 1"));
        }
        if self.training.p_count == 0 {
            return Err(Error::config("training.p_count", "must be >= 1"));
        }
        if !(self.training.logit_scale > 0.0 && self.training.logit_scale.is_finite()) {
            return Err(Error::config("training.logit_scale", "must be finite and > 0"));
        }
        if self.ablation.cat_loss && !self.ablation.cat {
            return Err(Error::config(
                "ablation.cat_loss",
                "the consistency term needs the context estimator (ablation.cat = true)",
            ));
        }
        Ok(())
    }
}

/// `[section] key` (or the section alone) enclosing a byte offset.
fn error_location(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    let Some(span) = span else {
        return "config".into();
    };
    let before = &text[..span.start.min(text.len())];
    let section = before
        .lines()
        .rev()
        .find_map(|l| {
            let l = l.trim();
            (l.starts_with('[') && l.ends_with(']')).then(|| l.trim_matches(|c| c == '[' || c == ']').to_string())
        })
        .unwrap_or_default();
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("");
    let key = line.split('=').next().unwrap_or("").trim();
    match (section.is_empty(), key.is_empty() || key.starts_with('[')) {
        (true, true) => "config".into(),
        (true, false) => key.to_string(),
        (false, true) => section,
        (false, false) => format!("{section}.{key}"),
    }
}

impl ExperimentConfig {
    /// The 40-material synthetic benchmark at workstation scale: 20 base
    /// classes, four 5-way 5-shot sessions, five seeds, small networks.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.run.seeds = (0..5).collect();
        cfg.protocol.sessions = 4;
        cfg.data = DataSource::Synthetic(SynthSpec {
            material_count: 40,
            noise_std: 0.15,
            ..SynthSpec::default()
        });
        // At this scale the consistency term is tiny next to the CE; it
        // only shapes the estimator when weighted up and present from the
        // start of training.
        cfg.weights.lambda_cat = 2.0;
        cfg.training.cat_in_pretrain = true;
        cfg.training.logit_scale = 10.0;
        cfg.estimator = EstimatorConfig {
            block_count: 2,
            base_width: 8,
            freq_coord: true,
            time_coord: true,
        };
        cfg.embedder = EmbedderConfig {
            widths: vec![8, 16, 32],
            blocks_per_stage: 1,
            embed_dim: 32,
            freq_coord: true,
            time_coord: false,
        };
        cfg.schedules.pretrain = TrainSchedule::new(0.1, 30);
        cfg.schedules.pretrain.decay_period = 12;
        cfg.schedules.full_base = TrainSchedule::new(0.01, 5);
        cfg.schedules.incremental = TrainSchedule::new(0.1, 50);
        cfg
    }

    /// A seconds-long run for plumbing checks: 15 small materials, two
    /// sessions, tiny networks and a handful of epochs.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.data = DataSource::Synthetic(SynthSpec {
            material_count: 15,
            per_class_count: 10,
            mel_bins: 8,
            frames: 8,
            ..SynthSpec::default()
        });
        cfg.protocol.sessions = 2;
        cfg.estimator = EstimatorConfig {
            block_count: 1,
            base_width: 4,
            freq_coord: true,
            time_coord: true,
        };
        cfg.embedder = EmbedderConfig {
            widths: vec![4, 8],
            blocks_per_stage: 1,
            embed_dim: 8,
            freq_coord: true,
            time_coord: false,
        };
        cfg.schedules.pretrain = TrainSchedule::new(0.1, 2);
        cfg.schedules.full_base = TrainSchedule::new(0.01, 1);
        cfg.schedules.incremental = TrainSchedule::new(0.1, 5);
        cfg
    }
}
