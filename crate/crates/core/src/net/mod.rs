//! The conditional 3D denoising UNet.
//!
//! The encoder is a stack of 3D residual blocks (step embedding added after
//! the first convolution) with factorized spatial-then-temporal attention at
//! selected levels. In [`ConditionMode::Spade`] the semantic map enters only
//! the decoder, through spatially-adaptive normalization layers; in
//! [`ConditionMode::Concat`] the frame-replicated map is concatenated with
//! the noisy clip at the input and every normalization is plain.

mod blocks;
mod embed;
mod layers;
mod params;
mod unet;

pub use blocks::{AttentionKind, AttentionLayer, FeatureMap, ResidualBlock, SpadeLayer};
pub use embed::{frame_embed, sinusoidal, time_embed};
pub use params::{BoundParams, DenoiserParameters, Init, Inventory, ParamId, ParamSpec};
pub use unet::{Denoiser, DenoiserProbe};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    /// Modulate decoder normalizations with the label map.
    #[default]
    Spade,
    /// Concatenate the label map with the noisy clip at the input.
    Concat,
}

impl std::str::FromStr for ConditionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spade" => Ok(Self::Spade),
            "concat" => Ok(Self::Concat),
            other => Err(Error::Config(format!("unknown condition mode {other:?} (expected spade|concat)"))),
        }
    }
}

impl std::fmt::Display for ConditionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Spade => "spade",
            Self::Concat => "concat",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Image channels `C`.
    pub in_channels: usize,
    /// One-hot label channels.
    pub label_channels: usize,
    /// Extra channels concatenated at the input (the upsampled low-resolution
    /// clip of a super-resolution stage).
    pub extra_input_channels: usize,
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_level: usize,
    /// Resolution levels (0 = full resolution) that run attention.
    pub attention_levels: Vec<usize>,
    pub attention_head_dim: usize,
    pub time_embed_dim: usize,
    pub frame_embed_dim: usize,
    /// Width of the modulation trunk inside each adaptive normalization.
    pub spade_hidden: usize,
    pub groups: usize,
    /// Temporal extent of the residual-block convolutions.
    pub temporal_kernel: usize,
    pub condition_mode: ConditionMode,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            label_channels: NUM_CLASSES,
            extra_input_channels: 0,
            base_width: 64,
            channel_multipliers: vec![1, 2, 4, 8],
            res_blocks_per_level: 2,
            attention_levels: vec![2, 3],
            attention_head_dim: 32,
            time_embed_dim: 64,
            frame_embed_dim: 32,
            spade_hidden: 64,
            groups: 8,
            temporal_kernel: 3,
            condition_mode: ConditionMode::Spade,
        }
    }
}

impl NetConfig {
    /// Two-level network small enough to train on a CPU.
    pub fn toy() -> Self {
        Self {
            base_width: 16,
            channel_multipliers: vec![1, 2],
            res_blocks_per_level: 1,
            attention_levels: vec![1],
            attention_head_dim: 32,
            time_embed_dim: 32,
            frame_embed_dim: 16,
            spade_hidden: 16,
            groups: 8,
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.base_width * self.channel_multipliers[level]
    }

    /// Spatial sizes must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.levels().saturating_sub(1)
    }

    pub fn time_width(&self) -> usize {
        4 * self.base_width
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = vec![];
        if self.in_channels == 0 {
            p.push("in_channels must be positive".to_string());
        }
        if self.label_channels == 0 {
            p.push("label_channels must be positive".to_string());
        }
        if self.levels() < 2 {
            p.push(format!("need at least 2 resolution levels, got {}", self.levels()));
        }
        if self.groups == 0 {
            p.push("groups must be positive".to_string());
        } else {
            if self.base_width == 0 || self.base_width % self.groups != 0 {
                p.push(format!("base_width {} not divisible by groups {}", self.base_width, self.groups));
            }
            for (l, m) in self.channel_multipliers.iter().enumerate() {
                let w = self.base_width * m;
                if *m == 0 || w % self.groups != 0 {
                    p.push(format!("level {l} width {w} not divisible by groups {}", self.groups));
                }
            }
        }
        if self.res_blocks_per_level == 0 {
            p.push("res_blocks_per_level must be positive".to_string());
        }
        for &l in &self.attention_levels {
            if l >= self.levels() {
                p.push(format!("attention level {l} out of range (levels: {})", self.levels()));
            } else {
                let w = self.level_width(l);
                let hd = self.attention_head_dim.max(1);
                if w > hd && w % hd != 0 {
                    p.push(format!("attention width {w} at level {l} not divisible by head dim {hd}"));
                }
            }
        }
        if self.attention_head_dim == 0 {
            p.push("attention_head_dim must be positive".to_string());
        }
        for (name, d) in [("time_embed_dim", self.time_embed_dim), ("frame_embed_dim", self.frame_embed_dim)] {
            if d == 0 || d % 2 != 0 {
                p.push(format!("{name} must be positive and even, got {d}"));
            }
        }
        if self.condition_mode == ConditionMode::Spade && self.spade_hidden == 0 {
            p.push("spade_hidden must be positive".to_string());
        }
        if self.temporal_kernel % 2 == 0 {
            p.push(format!("temporal_kernel must be odd, got {}", self.temporal_kernel));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_toy_are_valid() {
        NetConfig::default().validate().unwrap();
        NetConfig::toy().validate().unwrap();
        assert_eq!(NetConfig::default().attention_levels, vec![2, 3]);
    }

    #[test]
    fn problems_are_exhaustive() {
        let cfg = NetConfig {
            base_width: 12,
            channel_multipliers: vec![1],
            time_embed_dim: 7,
            ..NetConfig::toy()
        };
        let p = cfg.problems();
        assert!(p.iter().any(|m| m.contains("groups")), "{p:?}");
        assert!(p.iter().any(|m| m.contains("levels")), "{p:?}");
        assert!(p.iter().any(|m| m.contains("time_embed_dim")), "{p:?}");
    }
}
