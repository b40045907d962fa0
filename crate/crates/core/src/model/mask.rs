//! Sequence layouts and attention-visibility masks.
//!
//! A sequence is an ordered list of chunks: an optional discrete prefix,
//! then image chunks from the noisiest level down, one resolution group
//! after another. Visibility is chunk-causal for the plain variant and
//! token-causal for the token-autoregressive variant; discrete prefixes are
//! always token-causal within themselves.

use std::rc::Rc;

use super::rope::TokenPos;
use super::{ModelConfig, Variant};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChunkKind {
    Image,
    Text,
}

#[derive(Debug, Clone)]
pub struct ChunkDescriptor {
    /// Position on the rotary level axis. Text tokens ascend from this value
    /// one step per token, so positions do not depend on the final length.
    pub level: f64,
    pub len: usize,
    /// Raster grid the tokens of this chunk live on.
    pub grid: (usize, usize),
    /// Spatial positions are divided by this ratio before encoding.
    pub pos_scale: f64,
    /// Raster index of the chunk's first token within the grid.
    pub tok_offset: usize,
    pub kind: ChunkKind,
    /// Resolution group index (single-resolution models use 0).
    pub res_index: usize,
}

impl ChunkDescriptor {
    pub fn image(level: f64, grid: (usize, usize), pos_scale: f64, res_index: usize) -> Self {
        Self {
            level,
            len: grid.0 * grid.1,
            grid,
            pos_scale,
            tok_offset: 0,
            kind: ChunkKind::Image,
            res_index,
        }
    }

    /// Partial image chunk: the first `len` tokens of the grid.
    pub fn image_partial(
        level: f64,
        grid: (usize, usize),
        pos_scale: f64,
        res_index: usize,
        len: usize,
    ) -> Self {
        Self {
            level,
            len,
            grid,
            pos_scale,
            tok_offset: 0,
            kind: ChunkKind::Image,
            res_index,
        }
    }

    /// One image token at raster index `tok` of the grid.
    pub fn image_single(
        level: f64,
        grid: (usize, usize),
        pos_scale: f64,
        res_index: usize,
        tok: usize,
    ) -> Self {
        Self {
            level,
            len: 1,
            grid,
            pos_scale,
            tok_offset: tok,
            kind: ChunkKind::Image,
            res_index,
        }
    }

    pub fn text(base_level: f64, len: usize) -> Self {
        Self::text_at(base_level, 0, len)
    }

    /// Text tokens `start..start+len` of a prefix anchored at `base_level`.
    pub fn text_at(base_level: f64, start: usize, len: usize) -> Self {
        Self {
            level: base_level,
            len,
            grid: (1, 1),
            pos_scale: 1.0,
            tok_offset: start,
            kind: ChunkKind::Text,
            res_index: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeqLayout {
    pub chunks: Vec<ChunkDescriptor>,
}

impl SeqLayout {
    pub fn new(chunks: Vec<ChunkDescriptor>) -> Self {
        Self { chunks }
    }

    /// Canonical image layout: chunks at levels T..1, noisiest first.
    pub fn for_model(cfg: &ModelConfig) -> Self {
        let chunks = (1..=cfg.t_levels)
            .rev()
            .map(|t| ChunkDescriptor::image(t as f64, cfg.grid, 1.0, 0))
            .collect();
        Self { chunks }
    }

    /// Token-autoregressive training layout: the canonical layout followed by
    /// the first K−1 clean tokens, which serve as the teacher-forced prefix
    /// for the final within-chunk decomposition.
    pub fn for_model_ar(cfg: &ModelConfig) -> Self {
        let mut layout = Self::for_model(cfg);
        if cfg.tokens_per_level > 1 {
            layout.chunks.push(ChunkDescriptor::image_partial(
                0.0,
                cfg.grid,
                1.0,
                0,
                cfg.tokens_per_level - 1,
            ));
        }
        layout
    }

    pub fn total_len(&self) -> usize {
        self.chunks.iter().map(|c| c.len).sum()
    }

    /// Sequence offset of the first token of chunk `ci`.
    pub fn chunk_start(&self, ci: usize) -> usize {
        self.chunks[..ci].iter().map(|c| c.len).sum()
    }

    pub fn chunk_of(&self, pos: usize) -> usize {
        let mut off = 0;
        for (ci, c) in self.chunks.iter().enumerate() {
            off += c.len;
            if pos < off {
                return ci;
            }
        }
        panic!("position {} out of layout", pos);
    }

    /// Start offset of the chunk at image level `t` (resolution 0).
    pub fn start_of_level(&self, t: usize) -> Option<usize> {
        let mut off = 0;
        for c in &self.chunks {
            if c.kind == ChunkKind::Image && c.res_index == 0 && c.level == t as f64 {
                return Some(off);
            }
            off += c.len;
        }
        None
    }

    /// Rotary positions for every token in sequence order.
    pub fn positions(&self) -> Vec<TokenPos> {
        let mut out = Vec::with_capacity(self.total_len());
        for c in &self.chunks {
            match c.kind {
                ChunkKind::Image => {
                    for k in 0..c.len {
                        let raster = c.tok_offset + k;
                        let row = (raster / c.grid.1) as f64 / c.pos_scale;
                        let col = (raster % c.grid.1) as f64 / c.pos_scale;
                        out.push(TokenPos {
                            level: c.level,
                            row,
                            col,
                        });
                    }
                }
                ChunkKind::Text => {
                    for m in 0..c.len {
                        out.push(TokenPos {
                            level: c.level + (c.tok_offset + m) as f64,
                            row: 0.0,
                            col: 0.0,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Materialized boolean attention mask over a layout.
#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub layout: SeqLayout,
    pub variant: Variant,
    pub len: usize,
    pub matrix: Rc<Vec<bool>>,
}

impl MaskSpec {
    pub fn visible(&self, q: usize, k: usize) -> bool {
        self.matrix[q * self.len + k]
    }

    pub fn rows_as_strings(&self) -> Vec<String> {
        (0..self.len)
            .map(|q| {
                (0..self.len)
                    .map(|k| if self.visible(q, k) { '1' } else { '0' })
                    .collect()
            })
            .collect()
    }
}

fn pair_visible(
    layout: &SeqLayout,
    variant: Variant,
    q: usize,
    cq: usize,
    k: usize,
    ck: usize,
) -> bool {
    if ck < cq {
        return true;
    }
    if ck > cq {
        return false;
    }
    match (layout.chunks[cq].kind, variant) {
        (ChunkKind::Text, _) => k <= q,
        (ChunkKind::Image, Variant::DartAr) => k <= q,
        (ChunkKind::Image, _) => true,
    }
}

/// Build the mask for an arbitrary layout.
pub fn build_mask_for_layout(layout: &SeqLayout, variant: Variant) -> MaskSpec {
    let len = layout.total_len();
    let chunk_of: Vec<usize> = (0..len).map(|p| layout.chunk_of(p)).collect();
    let mut matrix = vec![false; len * len];
    for q in 0..len {
        for k in 0..len {
            matrix[q * len + k] = pair_visible(layout, variant, q, chunk_of[q], k, chunk_of[k]);
        }
    }
    MaskSpec {
        layout: layout.clone(),
        variant,
        len,
        matrix: Rc::new(matrix),
    }
}

/// Mask over the canonical T×K layout of a model configuration.
pub fn build_mask(cfg: &ModelConfig) -> MaskSpec {
    build_mask_for_layout(&SeqLayout::for_model(cfg), cfg.variant)
}


#[cfg(test)]
mod mask_properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn visibility_matches_the_stated_rules(t in 1usize..5, k in 1usize..5) {
            let mut cfg = crate::model::ModelConfig::point_model(2, t, 24, 1);
            cfg.tokens_per_level = k;
            cfg.grid = (1, k);

            cfg.variant = Variant::Dart;
            let m = build_mask(&cfg);
            for q in 0..m.len {
                for j in 0..m.len {
                    prop_assert_eq!(m.visible(q, j), j / k <= q / k);
                }
            }

            cfg.variant = Variant::DartAr;
            let m = build_mask(&cfg);
            for q in 0..m.len {
                for j in 0..m.len {
                    prop_assert_eq!(m.visible(q, j), j <= q);
                }
            }
        }
    }
}
