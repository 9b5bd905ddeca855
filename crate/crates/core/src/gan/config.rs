use serde::{Deserialize, Serialize};

use crate::capsnet::{MarginLossConfig, PrimaryCapsSpec, RoutingConfig};
use crate::optim::AdamConfig;

use super::GanError;

/// Dense projection of the latent vector followed by stride-2 transposed
/// convolutions (kernel 4, padding 1), each doubling height and width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    /// Channels of the projected feature map.
    pub base_channels: usize,
    /// Channels of each intermediate upsampling layer; the last layer always
    /// produces `output[0]` channels.
    pub hidden_channels: Vec<usize>,
    /// `(C, H, W)`
    pub output: [usize; 3],
    pub leaky_slope: f64,
}

impl GeneratorConfig {
    /// `z = 100 → 128×7×7 → 64×14×14 → 1×28×28`.
    pub fn mnist() -> Self {
        GeneratorConfig {
            latent_dim: 100,
            base_channels: 128,
            hidden_channels: vec![64],
            output: [1, 28, 28],
            leaky_slope: 0.2,
        }
    }

    /// `z = 100 → 128×8×8 → 64×16×16 → 3×32×32`.
    pub fn cifar10() -> Self {
        GeneratorConfig {
            output: [3, 32, 32],
            ..Self::mnist()
        }
    }

    /// Small generator for 8×8 single-channel synthetic data.
    pub fn synthetic() -> Self {
        GeneratorConfig {
            latent_dim: 16,
            base_channels: 32,
            hidden_channels: vec![16],
            output: [1, 8, 8],
            leaky_slope: 0.2,
        }
    }

    pub fn upsamplings(&self) -> usize {
        self.hidden_channels.len() + 1
    }

    /// Spatial size of the projected map.
    pub fn base_size(&self) -> (usize, usize) {
        let f = 1 << self.upsamplings();
        (self.output[1] / f, self.output[2] / f)
    }

    pub fn validate(&self) -> Result<(), GanError> {
        let f = 1usize << self.upsamplings();
        let [c, h, w] = self.output;
        if self.latent_dim == 0
            || self.base_channels == 0
            || c == 0
            || self.hidden_channels.contains(&0)
        {
            return Err(GanError::Config("generator sizes must be positive".into()));
        }
        if h % f != 0 || w % f != 0 || h < f || w < f {
            return Err(GanError::Config(format!(
                "generator output {h}x{w} is not reachable with {} stride-2 upsamplings",
                self.upsamplings()
            )));
        }
        Ok(())
    }
}

/// Convolutional front end → primary capsules → one routed output capsule
/// whose length is the probability that the input is real.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsuleDiscriminatorConfig {
    pub input: [usize; 3],
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_pad: usize,
    pub leaky_slope: f64,
    pub primary: PrimaryCapsSpec,
    pub final_dim: usize,
    pub routing: RoutingConfig,
    pub margin: MarginLossConfig,
    pub param_budget: usize,
}

impl CapsuleDiscriminatorConfig {
    /// conv 32@5×5 → primary capsules 8×8-dim @5×5 stride 2 → one 16-dim capsule.
    pub fn mnist() -> Self {
        CapsuleDiscriminatorConfig {
            input: [1, 28, 28],
            conv_filters: 32,
            conv_kernel: 5,
            conv_stride: 1,
            conv_pad: 0,
            leaky_slope: 0.2,
            primary: PrimaryCapsSpec {
                capsule_dim: 8,
                channels: 8,
                kernel: 5,
                stride: 2,
                pad: 0,
            },
            final_dim: 16,
            routing: RoutingConfig::default(),
            margin: MarginLossConfig::default(),
            param_budget: 2_000_000,
        }
    }

    pub fn cifar10() -> Self {
        CapsuleDiscriminatorConfig {
            input: [3, 32, 32],
            ..Self::mnist()
        }
    }

    pub fn synthetic() -> Self {
        CapsuleDiscriminatorConfig {
            input: [1, 8, 8],
            conv_filters: 16,
            conv_kernel: 3,
            conv_stride: 1,
            conv_pad: 1,
            leaky_slope: 0.2,
            primary: PrimaryCapsSpec {
                capsule_dim: 4,
                channels: 4,
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            final_dim: 8,
            routing: RoutingConfig::default(),
            margin: MarginLossConfig::default(),
            param_budget: 100_000,
        }
    }
}

/// Stride-2 convolutions (kernel 4, padding 1) then a dense sigmoid head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvDiscriminatorConfig {
    pub input: [usize; 3],
    pub channels: Vec<usize>,
    pub leaky_slope: f64,
    pub param_budget: usize,
}

impl ConvDiscriminatorConfig {
    pub fn mnist() -> Self {
        ConvDiscriminatorConfig {
            input: [1, 28, 28],
            channels: vec![64, 128],
            leaky_slope: 0.2,
            param_budget: 2_000_000,
        }
    }

    pub fn cifar10() -> Self {
        ConvDiscriminatorConfig {
            input: [3, 32, 32],
            ..Self::mnist()
        }
    }

    pub fn synthetic() -> Self {
        ConvDiscriminatorConfig {
            input: [1, 8, 8],
            channels: vec![16, 32],
            leaky_slope: 0.2,
            param_budget: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Capsule,
    Convolutional,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Capsule => "capsule",
            Variant::Convolutional => "convolutional",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiscriminatorConfig {
    Capsule(CapsuleDiscriminatorConfig),
    Convolutional(ConvDiscriminatorConfig),
}

impl DiscriminatorConfig {
    pub fn variant(&self) -> Variant {
        match self {
            DiscriminatorConfig::Capsule(_) => Variant::Capsule,
            DiscriminatorConfig::Convolutional(_) => Variant::Convolutional,
        }
    }

    pub fn input(&self) -> [usize; 3] {
        match self {
            DiscriminatorConfig::Capsule(c) => c.input,
            DiscriminatorConfig::Convolutional(c) => c.input,
        }
    }

    pub fn param_budget(&self) -> usize {
        match self {
            DiscriminatorConfig::Capsule(c) => c.param_budget,
            DiscriminatorConfig::Convolutional(c) => c.param_budget,
        }
    }
}

/// Discriminator updates per generator update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub d_steps: usize,
    pub g_steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            d_steps: 1,
            g_steps: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

impl GanConfig {
    pub fn new(generator: GeneratorConfig, discriminator: DiscriminatorConfig, seed: u64) -> Self {
        GanConfig {
            generator,
            discriminator,
            optimizer: AdamConfig::default(),
            batch_size: 64,
            schedule: Schedule::default(),
            seed,
        }
    }

    pub fn synthetic(variant: Variant, seed: u64) -> Self {
        let d = match variant {
            Variant::Capsule => {
                DiscriminatorConfig::Capsule(CapsuleDiscriminatorConfig::synthetic())
            }
            Variant::Convolutional => {
                DiscriminatorConfig::Convolutional(ConvDiscriminatorConfig::synthetic())
            }
        };
        Self::new(GeneratorConfig::synthetic(), d, seed)
    }

    pub fn mnist(variant: Variant, seed: u64) -> Self {
        let d = match variant {
            Variant::Capsule => DiscriminatorConfig::Capsule(CapsuleDiscriminatorConfig::mnist()),
            Variant::Convolutional => {
                DiscriminatorConfig::Convolutional(ConvDiscriminatorConfig::mnist())
            }
        };
        Self::new(GeneratorConfig::mnist(), d, seed)
    }

    pub fn cifar10(variant: Variant, seed: u64) -> Self {
        let d = match variant {
            Variant::Capsule => DiscriminatorConfig::Capsule(CapsuleDiscriminatorConfig::cifar10()),
            Variant::Convolutional => {
                DiscriminatorConfig::Convolutional(ConvDiscriminatorConfig::cifar10())
            }
        };
        Self::new(GeneratorConfig::cifar10(), d, seed)
    }

    pub fn variant(&self) -> Variant {
        self.discriminator.variant()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.generator.output
    }

    pub fn validate(&self) -> Result<(), GanError> {
        self.generator.validate()?;
        if self.discriminator.input() != self.generator.output {
            return Err(GanError::Config(format!(
                "discriminator input {:?} differs from generator output {:?}",
                self.discriminator.input(),
                self.generator.output
            )));
        }
        if self.batch_size == 0 {
            return Err(GanError::Config("batch_size must be positive".into()));
        }
        if self.schedule.d_steps == 0 || self.schedule.g_steps == 0 {
            return Err(GanError::Config("schedule steps must be positive".into()));
        }
        self.optimizer.validate()?;
        if let DiscriminatorConfig::Capsule(c) = &self.discriminator {
            c.margin.validate()?;
            if c.routing.iters == 0 {
                return Err(GanError::Config(
                    "routing iterations must be at least 1".into(),
                ));
            }
        }
        Ok(())
    }
}
