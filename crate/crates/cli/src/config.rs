//! Run configuration. Every section has defaults, so an empty file is a
//! valid synthetic capsule run; unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use capsgan_core::datasets::SyntheticSpec;
use capsgan_core::evaluation::{GamConfig, LabelSpreadConfig};
use capsgan_core::gan::{
    CapsuleDiscriminatorConfig, ConvDiscriminatorConfig, DiscriminatorConfig, GeneratorConfig,
    Schedule,
};
use capsgan_core::{AdamConfig, GanConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub generate: GenerateConfig,
    pub gam: GamSection,
    pub semisup: SemiSupSection,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            data: DataConfig::Synthetic(SyntheticData::default()),
            generate: GenerateConfig::default(),
            gam: GamSection::default(),
            semisup: SemiSupSection::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Synthetic,
    Mnist,
    Cifar10,
}

/// Either a preset plus variant, or explicit network sections. Resolution
/// fills in every section and drops `preset`/`variant`, so the variant is
/// recorded once, in `discriminator.variant`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<DiscriminatorConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 2000,
            batch_size: 64,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SyntheticData),
    Mnist(MnistData),
    Cifar10(CifarData),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub train_seed: u64,
    pub test_seed: u64,
    pub test_samples_per_mode: usize,
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData {
            spec: SyntheticSpec::default(),
            train_seed: 1,
            test_seed: 2,
            test_samples_per_mode: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistData {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Keep only the first `limit` training images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarData {
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub n: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            checkpoint: None,
            n: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GamSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_a: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_b: Option<PathBuf>,
    pub settings: GamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemiSupSection {
    pub checkpoints: Vec<PathBuf>,
    pub n_labeled: Vec<usize>,
    pub n_unlabeled: usize,
    pub spreading: LabelSpreadConfig,
}

impl Default for SemiSupSection {
    fn default() -> Self {
        SemiSupSection {
            checkpoints: Vec::new(),
            n_labeled: vec![100, 1000, 10_000],
            n_unlabeled: 50_000,
            spreading: LabelSpreadConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("capsgan-out"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de =
            toml::Deserializer::parse(text).map_err(|e| CliError::Validation(e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            CliError::Validation(if path == "." {
                msg
            } else {
                format!("{path}: {msg}")
            })
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(&path.display().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    fn preset(&self) -> Preset {
        self.model.preset.unwrap_or(match self.data {
            DataConfig::Synthetic(_) => Preset::Synthetic,
            DataConfig::Mnist(_) => Preset::Mnist,
            DataConfig::Cifar10(_) => Preset::Cifar10,
        })
    }

    /// Materializes every default so the result describes the run fully.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let preset = self.preset();
        let m = &mut self.model;
        let variant = match (&m.discriminator, m.variant) {
            (Some(d), Some(v)) if d.variant() != v => {
                return Err(CliError::Validation(format!(
                    "model.variant = {v} contradicts model.discriminator.variant = {}",
                    d.variant()
                )))
            }
            (Some(d), _) => d.variant(),
            (None, v) => v.unwrap_or(Variant::Capsule),
        };
        m.generator.get_or_insert_with(|| match preset {
            Preset::Synthetic => GeneratorConfig::synthetic(),
            Preset::Mnist => GeneratorConfig::mnist(),
            Preset::Cifar10 => GeneratorConfig::cifar10(),
        });
        m.discriminator
            .get_or_insert_with(|| match (variant, preset) {
                (Variant::Capsule, Preset::Synthetic) => {
                    DiscriminatorConfig::Capsule(CapsuleDiscriminatorConfig::synthetic())
                }
                (Variant::Capsule, Preset::Mnist) => {
                    DiscriminatorConfig::Capsule(CapsuleDiscriminatorConfig::mnist())
                }
                (Variant::Capsule, Preset::Cifar10) => {
                    DiscriminatorConfig::Capsule(CapsuleDiscriminatorConfig::cifar10())
                }
                (Variant::Convolutional, Preset::Synthetic) => {
                    DiscriminatorConfig::Convolutional(ConvDiscriminatorConfig::synthetic())
                }
                (Variant::Convolutional, Preset::Mnist) => {
                    DiscriminatorConfig::Convolutional(ConvDiscriminatorConfig::mnist())
                }
                (Variant::Convolutional, Preset::Cifar10) => {
                    DiscriminatorConfig::Convolutional(ConvDiscriminatorConfig::cifar10())
                }
            });
        m.optimizer.get_or_insert_with(AdamConfig::default);
        m.schedule.get_or_insert_with(Schedule::default);
        m.preset = None;
        m.variant = None;
        self.gan_config()?;
        Ok(self)
    }

    /// The model section as a core config. Call after [`RunConfig::resolve`].
    pub fn gan_config(&self) -> Result<GanConfig, CliError> {
        let m = &self.model;
        let (Some(g), Some(d), Some(o), Some(s)) =
            (&m.generator, &m.discriminator, m.optimizer, m.schedule)
        else {
            return Err(CliError::Validation("model section is not resolved".into()));
        };
        let cfg = GanConfig {
            generator: g.clone(),
            discriminator: d.clone(),
            optimizer: o,
            batch_size: self.training.batch_size,
            schedule: s,
            seed: self.seed,
        };
        cfg.validate()
            .map_err(|e| CliError::Validation(format!("model: {e}")))?;
        o.validate()
            .map_err(|e| CliError::Validation(format!("model.optimizer: {e}")))?;
        Ok(cfg)
    }
}
