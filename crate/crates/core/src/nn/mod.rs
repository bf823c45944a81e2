//! Layers, compact CNN models, losses, and checkpointable model state.

mod layers;
mod loss;
mod model;

pub use layers::{BatchNorm2dLayer, BnLayerStats, BnMode, BnSnapshot, Conv2dLayer, LinearLayer};
pub use loss::{accuracy, bn_matching_loss, one_hot_targets, soft_cross_entropy, BnTarget};
pub use model::{CheckpointMeta, ForwardOutput, ModelCheckpoint, Network};

use alloc::string::String;
// Float supplies round on f64 in no_std builds; with std the inherent
// methods shadow it.
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::tensor::TensorError;

/// Model families. Both end in `(BN count)` batch-norm layers whose running
/// statistics drive synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Three conv+BN+ReLU+avgpool stages, then a linear head. 3 BN layers.
    ConvNetBn3,
    /// 8-layer residual net: stem plus three basic blocks (stride 1, 2, 2)
    /// with 1x1 downsample shortcuts, global average pool, linear head.
    /// 9 BN layers.
    ResNet8Bn,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::ConvNetBn3 => "convnet_bn_3",
            Architecture::ResNet8Bn => "resnet8_bn",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "convnet_bn_3" => Some(Architecture::ConvNetBn3),
            "resnet8_bn" => Some(Architecture::ResNet8Bn),
            _ => None,
        }
    }

    /// Stage base widths before the width multiplier.
    fn base_width(self) -> usize {
        match self {
            Architecture::ConvNetBn3 => 32,
            Architecture::ResNet8Bn => 16,
        }
    }
}

/// Everything needed to rebuild a model's structure (not its weights).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub classes: usize,
    pub width_mult: f64,
}

impl ModelSpec {
    pub fn new(arch: Architecture, in_channels: usize, image_h: usize, image_w: usize, classes: usize) -> Self {
        ModelSpec { arch, in_channels, image_h, image_w, classes, width_mult: 1.0 }
    }

    /// First-stage channel width after the multiplier; later stages double it.
    pub fn width(&self) -> usize {
        ((self.arch.base_width() as f64 * self.width_mult).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let ok = self.in_channels >= 1
            && self.image_h >= 8
            && self.image_w >= 8
            && self.classes >= 2
            && self.width_mult > 0.0
            && self.width_mult.is_finite();
        if !ok {
            return Err(TensorError::InvalidArgument {
                op: "model_spec",
                detail: alloc::format!(
                    "need channels >= 1, spatial dims >= 8, classes >= 2, width_mult > 0; got {self:?}"
                ),
            });
        }
        if self.arch == Architecture::ResNet8Bn && self.image_h != self.image_w {
            return Err(TensorError::InvalidArgument {
                op: "model_spec",
                detail: String::from("resnet8_bn requires square inputs"),
            });
        }
        Ok(())
    }
}
