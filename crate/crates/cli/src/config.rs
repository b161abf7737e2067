//! The declarative run file. Every section is optional; flags override it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use textseg::crf::CrfConfig;
use textseg::datasynth::SynthConfig;
use textseg::labelcodec::OverlapPolicy;
use textseg::losses::{ClassWeights, LossKind, LossSpec, DEFAULT_DICE_SMOOTH, DEFAULT_GAMMA};
use textseg::models::{Architecture, FfpConfig, SspConfig, SspVariant};
use textseg::trainer::{AdamConfig, TrainConfig};
use textseg::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub crf: CrfConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    #[serde(flatten)]
    pub config: SynthConfig,
    /// Directories of printed / handwritten crops. Procedural sources are
    /// used when both are absent.
    pub printed_dir: Option<PathBuf>,
    pub handwritten_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Ffp,
    SspLight,
    SspMiniResidual,
    Mfm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    /// Narrow widths for desk-scale runs.
    Toy,
    /// Four 64-channel FFP stages and a four-level SSP.
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub scale: Scale,
    pub classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { kind: ModelKind::Mfm, scale: Scale::Toy, classes: 4 }
    }
}

impl ModelSection {
    pub fn architecture(&self) -> Result<Architecture> {
        let c = self.classes;
        if c != 3 && c != 4 {
            return Err(Error::Usage(format!("--classes must be 3 or 4, got {c}")));
        }
        let ffp = match self.scale {
            Scale::Toy => FfpConfig { n_stages: 2, stage_channels: 8, out_classes: c },
            Scale::Standard => FfpConfig::standard(c),
        };
        let ssp = |variant| match self.scale {
            Scale::Toy => SspConfig { variant, depth: 2, base_channels: 8, ..SspConfig::light(c) },
            Scale::Standard => SspConfig { variant, ..SspConfig::light(c) },
        };
        Ok(match self.kind {
            ModelKind::Ffp => Architecture::Ffp(ffp),
            ModelKind::SspLight => Architecture::Ssp(ssp(SspVariant::Light)),
            ModelKind::SspMiniResidual => Architecture::Ssp(ssp(SspVariant::MiniResidual)),
            ModelKind::Mfm => Architecture::Mfm { ffp, ssp: ssp(SspVariant::Light) },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OverlapArg {
    Pt,
    Ht,
}

impl From<OverlapArg> for OverlapPolicy {
    fn from(o: OverlapArg) -> Self {
        match o {
            OverlapArg::Pt => OverlapPolicy::ToPt,
            OverlapArg::Ht => OverlapPolicy::ToHt,
        }
    }
}

/// Training hyperparameters under their table names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub loss: LossKind,
    /// Class weights; the defaults for the class count when absent.
    pub weights: Option<Vec<f64>>,
    pub gamma: f64,
    pub dice_smooth: f64,
    pub max_steps: Option<usize>,
    /// Class absorbing OV when training three classes.
    pub overlap: OverlapArg,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch: d.batch_size,
            lr: d.lr0,
            lr_patience: d.lr_patience,
            lr_factor: d.lr_factor,
            loss: LossKind::Fusion,
            weights: None,
            gamma: DEFAULT_GAMMA,
            dice_smooth: DEFAULT_DICE_SMOOTH,
            max_steps: None,
            overlap: OverlapArg::Pt,
        }
    }
}

impl TrainSection {
    pub fn loss_spec(&self, classes: usize) -> Result<LossSpec> {
        let weights = match &self.weights {
            Some(w) if w.len() != classes => {
                return Err(Error::Usage(format!("{} class weights given for {classes} classes", w.len())))
            }
            Some(w) => ClassWeights::new(w.clone())?,
            None => ClassWeights::default_for(classes)?,
        };
        let spec = LossSpec { kind: self.loss, gamma: self.gamma, weights, dice_smooth: self.dice_smooth };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self, classes: usize, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr0: self.lr,
            lr_patience: self.lr_patience,
            lr_factor: self.lr_factor,
            adam: AdamConfig::default(),
            loss: self.loss_spec(classes)?,
            seed,
            max_steps: self.max_steps,
            overlap_policy: self.overlap.into(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
