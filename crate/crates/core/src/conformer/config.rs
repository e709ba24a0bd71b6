use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Size knobs of the dual-branch network.
///
/// The CNN branch runs at twice the token-grid resolution for its shallow
/// blocks and at exactly the grid resolution from block `L/2` on; the final
/// block keeps stride 1 so its feature map matches the attention map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConformerConfig {
    /// Number of conv blocks, equal to the number of transformer blocks.
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Side of the patch-token grid at `image_size`.
    pub grid: usize,
    /// Output channels of each conv block.
    pub stage_channels: Vec<usize>,
    pub stem_channels: usize,
    pub num_fg_classes: usize,
    pub image_size: usize,
    pub mlp_ratio: usize,
}

impl Default for ConformerConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            embed_dim: 64,
            num_heads: 4,
            grid: 8,
            stage_channels: vec![16, 32, 32, 64],
            stem_channels: 16,
            num_fg_classes: 3,
            image_size: 64,
            mlp_ratio: 4,
        }
    }
}

impl ConformerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_blocks < 2 {
            return fail(format!("need at least 2 blocks, got {}", self.num_blocks));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embedding width {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.stage_channels.len() != self.num_blocks {
            return fail(format!(
                "{} stage channel entries for {} blocks",
                self.stage_channels.len(),
                self.num_blocks
            ));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.stem_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.num_fg_classes == 0 || self.mlp_ratio == 0 || self.grid == 0 {
            return fail("class count, mlp ratio and grid must be positive".into());
        }
        if self.image_size % self.grid != 0 || (self.image_size / self.grid) % 2 != 0 {
            return fail(format!(
                "image size {} must be an even multiple of the grid {}",
                self.image_size, self.grid
            ));
        }
        Ok(())
    }

    /// Pixels per token along one axis.
    pub fn patch_size(&self) -> usize {
        self.image_size / self.grid
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn num_tokens(&self) -> usize {
        self.grid * self.grid
    }

    /// Token grid side for an input of side `image_side`.
    pub fn grid_for(&self, image_side: usize) -> Result<usize> {
        let p = self.patch_size();
        if image_side == 0 || image_side % p != 0 {
            return Err(Error::shape(
                "conformer",
                format!("input side {image_side} is not a multiple of the patch size {p}"),
            ));
        }
        Ok(image_side / p)
    }

    /// 1-based index of the block whose spatial convolution halves the resolution.
    pub fn downsample_block(&self) -> usize {
        self.num_blocks / 2
    }

    pub fn bottleneck_width(&self, block: usize) -> usize {
        (self.stage_channels[block] / 4).max(4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ConformerConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ConformerConfig {
            num_heads: 3,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_single_block() {
        let c = ConformerConfig {
            num_blocks: 1,
            stage_channels: vec![16],
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn grid_scales_with_input() {
        let c = ConformerConfig::default();
        assert_eq!(c.grid_for(32).unwrap(), 4);
        assert_eq!(c.grid_for(96).unwrap(), 12);
        assert!(c.grid_for(30).is_err());
    }
}
