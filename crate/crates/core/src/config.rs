//! Model dimensions and the paper-scale / toy-scale presets.

use serde::{Deserialize, Serialize};

use crate::dsp::SPEC_BINS;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Toy,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "toy" => Ok(Preset::Toy),
            other => Err(Error::Config(format!("unknown preset `{other}` (paper|toy)"))),
        }
    }
}

/// Dimensions of every stage of the separator.
///
/// | field              | paper | toy |
/// |--------------------|-------|-----|
/// | `conv_channels`    | 256   | 64  |
/// | `bottleneck`       | 256   | 64  |
/// | `blocks_per_repeat`| 8     | 4   |
/// | `repeats`          | 4     | 2   |
/// | `embed_dim`        | 20    | 20  |
/// | `num_centers`      | 4     | 4   |
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Learned encoder basis size `F_conv`.
    pub conv_channels: usize,
    /// Squeeze-excitation reduction ratio `r`.
    pub se_reduction: usize,
    /// Width of the entry 1×1 conv and of every residual block.
    pub bottleneck: usize,
    /// Blocks per dilation cycle; block `i` uses dilation `2^i`.
    pub blocks_per_repeat: usize,
    pub repeats: usize,
    pub depthwise_kernel: usize,
    /// Embedding dimension `L`.
    pub embed_dim: usize,
    /// Trainable attractor centers `K`.
    pub num_centers: usize,
    /// k-means refinement iterations `I`.
    pub kmeans_iters: usize,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            conv_channels: 256,
            se_reduction: 16,
            bottleneck: 256,
            blocks_per_repeat: 8,
            repeats: 4,
            depthwise_kernel: 3,
            embed_dim: 20,
            num_centers: 4,
            kmeans_iters: 1,
        }
    }

    pub fn toy() -> Self {
        Self {
            conv_channels: 64,
            bottleneck: 64,
            blocks_per_repeat: 4,
            repeats: 2,
            ..Self::paper()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Toy => Self::toy(),
        }
    }

    /// Fused feature height `F = F_conv + 11`.
    pub fn feature_dim(&self) -> usize {
        self.conv_channels + SPEC_BINS
    }

    /// Squeeze-excitation bottleneck width `floor(F / r)`.
    pub fn se_hidden(&self) -> usize {
        self.feature_dim() / self.se_reduction
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.repeats)
            .flat_map(|_| (0..self.blocks_per_repeat).map(|i| 1usize << i))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("conv_channels", self.conv_channels),
            ("se_reduction", self.se_reduction),
            ("bottleneck", self.bottleneck),
            ("embed_dim", self.embed_dim),
            ("num_centers", self.num_centers),
            ("kmeans_iters", self.kmeans_iters),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.se_hidden() == 0 {
            return Err(Error::Config(format!(
                "se_reduction {} leaves no hidden units for F = {}",
                self.se_reduction,
                self.feature_dim()
            )));
        }
        if self.depthwise_kernel % 2 == 0 {
            return Err(Error::Config("depthwise_kernel must be odd".into()));
        }
        if self.blocks_per_repeat > 16 {
            return Err(Error::Config("blocks_per_repeat above 16 is not supported".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be at least 2 for counting".into()));
        }
        Ok(())
    }
}
