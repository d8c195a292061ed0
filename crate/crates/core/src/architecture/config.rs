use serde::{Deserialize, Serialize};

use crate::attention::SccaOrder;
use crate::blocks::{ChannelResidual, DualStrategy};
use crate::error::{Error, Result};

/// Architectural hyperparameters of the U-shaped model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input side; a multiple of 16 (embed /4, then two merges /2).
    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Widths of the three stages, each twice the previous one.
    pub embed_dims: Vec<usize>,
    pub blocks_per_stage: usize,
    pub strategy: DualStrategy,
    /// Number of decoder stages (from the top) fused with an encoder skip.
    pub skip_connections: usize,
    pub expansion_ratio: usize,
    /// Use the efficient-attention operand order in the skip cross attention.
    pub scca_use_eq2_order: bool,
    pub channel_residual: ChannelResidual,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 1,
            num_classes: 2,
            embed_dims: vec![32, 64, 128],
            blocks_per_stage: 2,
            strategy: DualStrategy::Sequential,
            skip_connections: 2,
            expansion_ratio: 4,
            scca_use_eq2_order: false,
            channel_residual: ChannelResidual::AttentionInput,
            seed: 0,
        }
    }
}

pub const STAGES: usize = 3;

impl ModelConfig {
    /// Small configuration used by the toy experiments.
    pub fn toy() -> Self {
        Self { embed_dims: vec![16, 32, 64], ..Self::default() }
    }

    pub fn scca_order(&self) -> SccaOrder {
        if self.scca_use_eq2_order {
            SccaOrder::EfficientOrder
        } else {
            SccaOrder::AsPrinted
        }
    }

    /// Collects every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.image_size == 0 || self.image_size % 16 != 0 {
            out.push(format!("image_size must be a positive multiple of 16, got {}", self.image_size));
        }
        if self.in_channels == 0 {
            out.push("in_channels must be positive".into());
        }
        if self.num_classes < 2 {
            out.push(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.embed_dims.len() != STAGES {
            out.push(format!("embed_dims must have {STAGES} entries, got {}", self.embed_dims.len()));
        } else {
            if self.embed_dims[0] == 0 || self.embed_dims[0] % 4 != 0 {
                out.push(format!("embed_dims[0] must be a positive multiple of 4, got {}", self.embed_dims[0]));
            }
            for s in 1..STAGES {
                if self.embed_dims[s] != 2 * self.embed_dims[s - 1] {
                    out.push(format!(
                        "embed_dims must double per stage, got {:?}",
                        self.embed_dims
                    ));
                    break;
                }
            }
        }
        if self.blocks_per_stage == 0 {
            out.push("blocks_per_stage must be positive".into());
        }
        if self.skip_connections > STAGES - 1 {
            out.push(format!("skip_connections must be at most {}, got {}", STAGES - 1, self.skip_connections));
        }
        if self.expansion_ratio == 0 {
            out.push("expansion_ratio must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Token grid side after the patch embedding.
    pub fn base_grid(&self) -> usize {
        self.image_size / 4
    }
}
