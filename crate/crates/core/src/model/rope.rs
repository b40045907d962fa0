//! Multi-axis rotary phases.
//!
//! The head dimension is partitioned into three blocks that rotate with the
//! level, row, and column positions respectively. The schedule is fixed, so
//! the level axis doubles as the only time conditioning the model gets.

use super::{ModelConfig, ROPE_BASE};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenPos {
    pub level: f64,
    pub row: f64,
    pub col: f64,
}

/// Rotation angles for one token, one per head-dimension pair. Spatial
/// positions must already be divided by the upsample ratio.
pub fn rope_phases(cfg: &ModelConfig, pos: &TokenPos) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.head_dim() / 2);
    for (axis, &p) in [pos.level, pos.row, pos.col].iter().enumerate() {
        let da = cfg.rope_axes_dims[axis];
        for m in 0..da / 2 {
            let theta = ROPE_BASE.powf(-2.0 * m as f64 / da as f64);
            out.push(p * theta);
        }
    }
    out
}

/// Precomputed cos/sin tables for a position list, flattened `[m, d/2]`.
pub fn rope_tables<R: Real>(cfg: &ModelConfig, positions: &[TokenPos]) -> (Vec<R>, Vec<R>) {
    let half = cfg.head_dim() / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for p in positions {
        for a in rope_phases(cfg, p) {
            cos.push(R::from_f64(a.cos()));
            sin.push(R::from_f64(a.sin()));
        }
    }
    (cos, sin)
}
