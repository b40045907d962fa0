//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker only ever evaluates the forward pass at perturbed inputs, so
//! it stays independent of the backward rules it validates. Run in f64: the
//! 1e-3 relative tolerance is not meaningful in f32.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::rng;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;

/// Floor below which both gradients are considered numerically zero.
const ZERO_FLOOR: f64 = 1e-7;

/// Compare reverse-mode gradients of a scalar-valued builder against central
/// finite differences on `num_coords` randomly sampled input coordinates.
/// Returns the worst relative error observed.
pub fn max_rel_err(
    inputs: &[Tensor<f64>],
    num_coords: usize,
    seed: u64,
    build: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
) -> f64 {
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &ids).expect("builder failed");
        assert_eq!(g.value(out).numel(), 1, "gradcheck target must be scalar");
        g.value(out).data[0]
    };

    // Reverse-mode gradients once.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids).expect("builder failed");
    let grads = g.backward(out).expect("backward failed");

    let mut rng = rng::substream(&[seed, 0xF1D]);
    let mut worst = 0.0f64;
    for _ in 0..num_coords {
        let which = rng::uniform_usize(&mut rng, inputs.len());
        let coord = rng::uniform_usize(&mut rng, inputs[which].numel());

        let analytic = grads
            .get(ids[which])
            .map(|gr| gr[coord])
            .unwrap_or(0.0);

        let mut plus = inputs.to_vec();
        plus[which].data[coord] += FD_STEP;
        let mut minus = inputs.to_vec();
        minus[which].data[coord] -= FD_STEP;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);

        let denom = analytic.abs().max(numeric.abs());
        let rel = if denom < ZERO_FLOOR {
            0.0
        } else {
            (analytic - numeric).abs() / denom
        };
        worst = worst.max(rel);
    }
    worst
}
