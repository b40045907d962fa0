//! Transformer backbone shared by every variant.

mod backbone;
mod flow;
mod mask;
mod params;
mod rope;

pub use backbone::{forward_extend, forward_full, Bound, Condition, ForwardOutput, KVCache, SeqInput};
pub use flow::{flow_param_count, flow_velocity};
pub use mask::{build_mask, build_mask_for_layout, ChunkDescriptor, ChunkKind, MaskSpec, SeqLayout};
pub use params::{init_params, ParamStore};
pub use rope::{rope_phases, TokenPos};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Dart,
    DartAr,
    DartFm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Conditioning {
    /// Unconditional: plain pre-norm residual blocks.
    None,
    /// Class label injected through per-block adaptive layer norm. One extra
    /// embedding row serves as the learned null class for guidance.
    ClassAdaln { num_classes: usize },
    /// Discrete-token prefix (embeddings + next-token head) conditions the
    /// image chunks through self-attention.
    TokenEmbed { vocab: usize, max_text_len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    /// Token channel dimension C (original channels × patch²).
    pub channels: usize,
    /// Noise levels T.
    pub t_levels: usize,
    /// Tokens per level K.
    pub tokens_per_level: usize,
    /// Token grid (rows, cols); product must equal K.
    pub grid: (usize, usize),
    /// Head-dimension split across the (level, row, column) rotary axes.
    pub rope_axes_dims: [usize; 3],
    pub variant: Variant,
    pub conditioning: Conditioning,
    pub use_qk_norm: bool,
}

pub const ROPE_BASE: f64 = 10_000.0;

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    /// SwiGLU inner width: 8h/3 rounded up to a multiple of 16.
    pub fn ffn_inner(&self) -> usize {
        let raw = 8 * self.hidden / 3;
        raw.div_ceil(16) * 16
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.num_heads == 0 || self.hidden % self.num_heads != 0 {
            return Err(CoreError::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.num_heads
            )));
        }
        let d = self.head_dim();
        let sum: usize = self.rope_axes_dims.iter().sum();
        if sum != d || self.rope_axes_dims.iter().any(|a| a % 2 != 0) {
            return Err(CoreError::Config(format!(
                "rope axes {:?} must be even and sum to head dim {}",
                self.rope_axes_dims, d
            )));
        }
        if self.grid.0 * self.grid.1 != self.tokens_per_level {
            return Err(CoreError::Config(format!(
                "grid {:?} does not give K={}",
                self.grid, self.tokens_per_level
            )));
        }
        if self.t_levels == 0 || self.tokens_per_level == 0 {
            return Err(CoreError::Config("T and K must be >= 1".into()));
        }
        Ok(())
    }

    /// Split a head dimension across the three rotary axes in the 2:3:3
    /// ratio, rounded to even sizes.
    pub fn default_rope_axes(head_dim: usize) -> [usize; 3] {
        assert!(head_dim % 2 == 0 && head_dim >= 6);
        let even = |x: f64| 2 * ((x / 2.0).round() as usize).max(1);
        let mut level = even(head_dim as f64 * 0.25);
        let mut row = even(head_dim as f64 * 0.375);
        while level + row + 2 > head_dim {
            if row > 2 {
                row -= 2;
            } else {
                level -= 2;
            }
        }
        [level, row, head_dim - level - row]
    }

    /// Small single-token configuration for vector data (K = 1, C = dims).
    pub fn point_model(dims: usize, t_levels: usize, hidden: usize, layers: usize) -> Self {
        let num_heads = 4;
        let cfg = Self {
            num_layers: layers,
            hidden,
            num_heads,
            patch_size: 1,
            channels: dims,
            t_levels,
            tokens_per_level: 1,
            grid: (1, 1),
            rope_axes_dims: Self::default_rope_axes(hidden / num_heads),
            variant: Variant::Dart,
            conditioning: Conditioning::None,
            use_qk_norm: true,
        };
        debug_assert!(cfg.validate().is_ok());
        cfg
    }

    /// Configuration for square single-image grids.
    pub fn grid_model(
        image_channels: usize,
        height: usize,
        width: usize,
        patch: usize,
        t_levels: usize,
        hidden: usize,
        layers: usize,
    ) -> Result<Self> {
        if height % patch != 0 || width % patch != 0 {
            return Err(CoreError::Config(format!(
                "grid {}x{} not divisible by patch {}",
                height, width, patch
            )));
        }
        let grid = (height / patch, width / patch);
        let num_heads = 4;
        let cfg = Self {
            num_layers: layers,
            hidden,
            num_heads,
            patch_size: patch,
            channels: image_channels * patch * patch,
            t_levels,
            tokens_per_level: grid.0 * grid.1,
            grid,
            rope_axes_dims: Self::default_rope_axes(hidden / num_heads),
            variant: Variant::Dart,
            conditioning: Conditioning::None,
            use_qk_norm: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rope_axes_keep_ratio() {
        assert_eq!(ModelConfig::default_rope_axes(16), [4, 6, 6]);
        assert_eq!(ModelConfig::default_rope_axes(12), [4, 4, 4]);
        assert_eq!(ModelConfig::default_rope_axes(64), [16, 24, 24]);
        for d in [8, 10, 12, 16, 24, 32, 64] {
            let axes = ModelConfig::default_rope_axes(d);
            assert_eq!(axes.iter().sum::<usize>(), d);
            assert!(axes.iter().all(|a| a % 2 == 0 && *a > 0));
        }
    }

    #[test]
    fn validate_rejects_bad_axes() {
        let mut cfg = ModelConfig::point_model(2, 4, 64, 2);
        cfg.rope_axes_dims = [3, 6, 7];
        assert!(cfg.validate().is_err());
        cfg.rope_axes_dims = [4, 6, 6];
        assert!(cfg.validate().is_ok());
    }
}
