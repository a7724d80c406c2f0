use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::ActivationKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `[conv-bn-act x blocks, maxpool] x stages`, global avgpool, linear.
    VggSmall,
    /// conv-bn-act stem, stages of basic residual blocks, global avgpool, linear.
    ResnetSmall,
}

fn default_classes() -> usize {
    10
}
fn default_in_channels() -> usize {
    1
}
fn default_input_size() -> usize {
    28
}
fn default_multiplier() -> f64 {
    1.0
}
fn default_activation() -> ActivationKind {
    ActivationKind::Relu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Square input side (28 for MNIST-family, 32 for CIFAR).
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_multiplier")]
    pub width_multiplier: f64,
    #[serde(default = "default_activation")]
    pub base_activation: ActivationKind,
    /// Activation slots (0-based, forward order) that hold LENI blocks.
    #[serde(default)]
    pub leni_layers: BTreeSet<usize>,
    /// Insert a 3x3 depthwise conv after every activation slot.
    #[serde(default)]
    pub extended_conv: bool,
}

impl ModelConfig {
    /// Desk-scale VGG for 28x28 grayscale input.
    pub fn vgg_small() -> Self {
        ModelConfig {
            family: Family::VggSmall,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            num_classes: 10,
            in_channels: 1,
            input_size: 28,
            width_multiplier: 1.0,
            base_activation: ActivationKind::Relu,
            leni_layers: BTreeSet::new(),
            extended_conv: false,
        }
    }

    pub fn resnet_small() -> Self {
        ModelConfig {
            family: Family::ResnetSmall,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            ..Self::vgg_small()
        }
    }

    /// VGG-11 layout (64, M, 128, M, 256x2, M, 512x2, M, 512x2, M) for
    /// 32x32 RGB input.
    pub fn vgg11() -> Self {
        ModelConfig {
            family: Family::VggSmall,
            stage_widths: vec![64, 128, 256, 512, 512],
            blocks_per_stage: vec![1, 1, 2, 2, 2],
            in_channels: 3,
            input_size: 32,
            ..Self::vgg_small()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "vgg_small" => Some(Self::vgg_small()),
            "resnet_small" => Some(Self::resnet_small()),
            "vgg11" => Some(Self::vgg11()),
            _ => None,
        }
    }

    pub fn with_activation(mut self, kind: ActivationKind) -> Self {
        self.base_activation = kind;
        self
    }

    pub fn with_leni(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.leni_layers = layers.into_iter().collect();
        self
    }

    /// LENI at every activation slot.
    pub fn with_leni_everywhere(self) -> Self {
        let n = self.activation_slots();
        self.with_leni(0..n)
    }

    pub fn with_width_multiplier(mut self, m: f64) -> Self {
        self.width_multiplier = m;
        self
    }

    /// Width after the multiplier: round half up, at least 1.
    pub fn scaled(&self, width: usize) -> usize {
        ((width as f64 * self.width_multiplier + 0.5).floor() as usize).max(1)
    }

    pub fn activation_slots(&self) -> usize {
        let blocks: usize = self.blocks_per_stage.iter().sum();
        match self.family {
            Family::VggSmall => blocks,
            Family::ResnetSmall => 1 + 2 * blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.blocks_per_stage.len() {
            return bad(format!(
                "stage_widths ({}) and blocks_per_stage ({}) must be nonempty and equal length",
                self.stage_widths.len(),
                self.blocks_per_stage.len()
            ));
        }
        if self.stage_widths.contains(&0) || self.blocks_per_stage.contains(&0) {
            return bad("stage widths and block counts must be positive".into());
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return bad("num_classes and in_channels must be positive".into());
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return bad(format!("width_multiplier must be positive, got {}", self.width_multiplier));
        }
        let stages = self.stage_widths.len() as u32;
        let min_side = match self.family {
            Family::VggSmall => 2usize.pow(stages),
            Family::ResnetSmall => 2usize.pow(stages - 1),
        };
        if self.input_size < min_side {
            return bad(format!(
                "input_size {} too small for {stages} stages (need >= {min_side})",
                self.input_size
            ));
        }
        if let Some(&i) = self.leni_layers.iter().find(|&&i| i >= self.activation_slots()) {
            return bad(format!(
                "leni layer {i} out of range: model has {} activation layers",
                self.activation_slots()
            ));
        }
        if self.extended_conv && !self.leni_layers.is_empty() {
            return bad("extended_conv and leni_layers are separate arms; set only one".into());
        }
        self.base_activation
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}
