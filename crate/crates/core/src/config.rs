//! Model configuration shared by the encoder and the generator, with the
//! full-resolution preset and the CPU-sized desk preset.

use serde::{Deserialize, Serialize};

use crate::autograd::Activation;
use crate::error::{Error, Result};

/// Number of constant-resolution layers at the start of the generator.
pub const CONST_LAYERS: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output widths of the four residual stages (strides 4, 8, 16, 32).
    pub backbone_widths: [usize; 4],
    pub blocks_per_stage: usize,
    /// Channel count shared by every pyramid level.
    pub pyramid_channels: usize,
    /// Width of the per-slot mapping heads.
    pub head_channels: usize,
    /// Style rows drawn from the coarsest and middle pyramid levels;
    /// the remaining rows come from the finest level.
    pub styles_low: usize,
    pub styles_mid: usize,
    /// Concatenate a resampled copy of the finest level into the base-feature conv.
    pub concat_high: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            backbone_widths: [64, 128, 256, 512],
            blocks_per_stage: 2,
            pyramid_channels: 256,
            head_channels: 128,
            styles_low: 3,
            styles_mid: 4,
            concat_high: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Channel width per resolution, from the base resolution up to the target.
    pub channels: Vec<usize>,
    /// Dilation of each of the constant-resolution layers 1–7.
    pub dilations: [usize; CONST_LAYERS],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            channels: vec![512, 256, 128, 64, 32, 16],
            dilations: [8, 8, 4, 4, 2, 2, 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Spatial size of the base feature and of generator layers 1–7.
    pub base_resolution: usize,
    /// Length of each style row.
    pub style_dim: usize,
    pub activation: Activation,
    pub encoder: EncoderConfig,
    pub generator: GeneratorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 512,
            base_resolution: 16,
            style_dim: 512,
            activation: Activation::LeakyRelu,
            encoder: EncoderConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

/// Minimum spatial size of the base feature.
pub const MIN_BASE_RESOLUTION: usize = 4;

impl ModelConfig {
    /// 512-pixel configuration with 18 style slots.
    pub fn full() -> Self {
        Self::default()
    }

    /// 64-pixel CPU configuration: base 8×8, three doublings, 14 style slots.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            base_resolution: 8,
            style_dim: 64,
            activation: Activation::LeakyRelu,
            encoder: EncoderConfig {
                backbone_widths: [16, 32, 64, 128],
                blocks_per_stage: 1,
                pyramid_channels: 64,
                head_channels: 32,
                styles_low: 3,
                styles_mid: 4,
                concat_high: true,
            },
            generator: GeneratorConfig {
                channels: vec![64, 64, 32, 16],
                dilations: [8, 8, 4, 4, 2, 2, 1],
            },
        }
    }

    /// 32-pixel configuration with a few channels per layer, for fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 32,
            base_resolution: 4,
            style_dim: 8,
            activation: Activation::LeakyRelu,
            encoder: EncoderConfig {
                backbone_widths: [4, 8, 8, 8],
                blocks_per_stage: 1,
                pyramid_channels: 8,
                head_channels: 4,
                styles_low: 3,
                styles_mid: 4,
                concat_high: true,
            },
            generator: GeneratorConfig {
                channels: vec![8, 8, 4, 4],
                dilations: [8, 8, 4, 4, 2, 2, 1],
            },
        }
    }

    /// Base resolution used when none is chosen explicitly: `image_size / 32`.
    pub fn default_base_resolution(image_size: usize) -> usize {
        image_size / 32
    }

    pub fn doublings(&self) -> usize {
        (self.image_size / self.base_resolution).trailing_zeros() as usize
    }

    /// `7 + 2·log2(target / base) + 1`.
    pub fn n_slots(&self) -> usize {
        CONST_LAYERS + 2 * self.doublings() + 1
    }

    pub fn styles_high(&self) -> usize {
        self.n_slots() - self.encoder.styles_low - self.encoder.styles_mid
    }

    pub fn base_channels(&self) -> usize {
        self.generator.channels[0]
    }

    /// Generator width at `resolution`, if the generator runs at it.
    pub fn channels_at(&self, resolution: usize) -> Option<usize> {
        if resolution < self.base_resolution || !resolution.is_power_of_two() {
            return None;
        }
        let level = (resolution / self.base_resolution).trailing_zeros() as usize;
        self.generator.channels.get(level).copied()
    }

    /// Generator resolution fed by skip `k` (0 = coarsest pyramid level).
    pub fn skip_resolution(&self, k: usize) -> usize {
        self.base_resolution << k
    }

    /// Largest δ this configuration supports.
    pub fn max_delta(&self) -> usize {
        3.min(self.doublings() + 1)
    }

    /// Layer indices (1-based) that begin with a 2× upsample.
    pub fn upsample_layers(&self) -> Vec<usize> {
        (0..self.doublings()).map(|j| CONST_LAYERS + 1 + 2 * j).collect()
    }

    pub fn validate(&self) -> Result<()> {
        crate::imaging::check_size(self.image_size)?;
        let r0 = self.base_resolution;
        if r0 < MIN_BASE_RESOLUTION || !r0.is_power_of_two() {
            return Err(Error::Resolution(format!(
                "base resolution {r0} must be a power of two >= {MIN_BASE_RESOLUTION}"
            )));
        }
        if r0 > self.image_size {
            return Err(Error::Resolution(format!(
                "base resolution {r0} exceeds image size {}",
                self.image_size
            )));
        }
        // the coarsest pyramid level sits at stride 32
        if self.image_size / 32 < 1 {
            return Err(Error::Resolution("image too small for a stride-32 pyramid".into()));
        }
        if self.generator.channels.len() != self.doublings() + 1 {
            return Err(Error::Config(format!(
                "generator needs {} channel entries (base plus one per doubling), got {}",
                self.doublings() + 1,
                self.generator.channels.len()
            )));
        }
        if self.generator.channels.contains(&0) || self.style_dim == 0 {
            return Err(Error::Config("channel widths and style_dim must be positive".into()));
        }
        if self.generator.dilations.contains(&0) {
            return Err(Error::Config("dilations must be >= 1".into()));
        }
        let e = &self.encoder;
        if e.styles_low == 0 || e.styles_mid == 0 || e.styles_low + e.styles_mid >= self.n_slots() {
            return Err(Error::Config(format!(
                "style partition {}/{}/rest does not fit {} slots",
                e.styles_low,
                e.styles_mid,
                self.n_slots()
            )));
        }
        if e.backbone_widths.contains(&0) || e.pyramid_channels == 0 || e.head_channels == 0 || e.blocks_per_stage == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_counts() {
        let full = ModelConfig::full();
        full.validate().unwrap();
        assert_eq!(full.n_slots(), 18);
        assert_eq!(full.upsample_layers(), vec![8, 10, 12, 14, 16]);
        assert_eq!(full.styles_high(), 11);
        assert_eq!(full.generator.dilations[0], 8);
        let desk = ModelConfig::desk();
        desk.validate().unwrap();
        assert_eq!(desk.n_slots(), 14);
        assert_eq!(desk.upsample_layers(), vec![8, 10, 12]);
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn default_base_rule_rejects_64px() {
        let mut c = ModelConfig::desk();
        c.base_resolution = ModelConfig::default_base_resolution(64);
        assert!(matches!(c.validate(), Err(Error::Resolution(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let r: std::result::Result<ModelConfig, _> = serde_json::from_str(r#"{"image_size": 64, "bogus": 1}"#);
        assert!(r.is_err());
    }
}
