//! Forward corruption: independent noising of clean tokens and v-prediction
//! training targets.

use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::rng::{self, stream};
use crate::schedule::GammaSchedule;
use crate::tensor::Tensor;

/// Independent noisy views of one clean token grid, one per level.
/// `x_t = √γ_t·x_0 + √(1−γ_t)·ε_t` holds exactly per stored ε_t.
#[derive(Debug, Clone)]
pub struct Trajectory<R: Real> {
    pub x0: Tensor<R>,
    /// `(t, x_t, eps_t)` for t = 1..T, ascending.
    pub levels: Vec<(usize, Tensor<R>, Tensor<R>)>,
}

impl<R: Real> Trajectory<R> {
    pub fn level(&self, t: usize) -> &(usize, Tensor<R>, Tensor<R>) {
        &self.levels[t - 1]
    }

    pub fn x_at(&self, t: usize) -> &Tensor<R> {
        &self.levels[t - 1].1
    }
}

/// Corrupt one level: `√γ·x0 + √(1−γ)·ε` with a supplied noise draw.
pub fn corrupt_level<R: Real>(x0: &Tensor<R>, gamma: f64, eps: &Tensor<R>) -> Tensor<R> {
    let a = R::from_f64(gamma.sqrt());
    let b = R::from_f64((1.0 - gamma).sqrt());
    let data = x0
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    Tensor {
        shape: x0.shape.clone(),
        data,
    }
}

/// Sample the full independent trajectory. Each level draws fresh noise from
/// its own keyed stream, so levels are independent by construction and the
/// result is deterministic given `(x0, schedule, seed)`.
pub fn corrupt<R: Real>(x0: &Tensor<R>, g: &GammaSchedule, seed: u64) -> Trajectory<R> {
    let levels = (1..=g.t_count)
        .map(|t| {
            let mut r = rng::substream(&[seed, stream::CORRUPT, t as u64]);
            let eps = Tensor {
                shape: x0.shape.clone(),
                data: rng::normal_vec(&mut r, x0.numel()),
            };
            let x_t = corrupt_level(x0, g.gamma[t - 1], &eps);
            (t, x_t, eps)
        })
        .collect();
    Trajectory {
        x0: x0.clone(),
        levels,
    }
}

/// v-prediction target at one level: `v = (α·x_t − x_0)/σ` with `α = √γ_t`,
/// `σ = √(1−γ_t)`.
#[derive(Debug, Clone)]
pub struct VTarget<R: Real> {
    pub alpha: R,
    pub sigma: R,
    pub v: Tensor<R>,
}

pub fn v_target<R: Real>(traj: &Trajectory<R>, t: usize, g: &GammaSchedule) -> Result<VTarget<R>> {
    let gamma = g.gamma_at(t);
    if gamma >= 1.0 {
        return Err(CoreError::CleanLevel { t });
    }
    let alpha = R::from_f64(gamma.sqrt());
    let sigma = R::from_f64((1.0 - gamma).sqrt());
    let x_t = traj.x_at(t);
    let data = x_t
        .data
        .iter()
        .zip(&traj.x0.data)
        .map(|(&xt, &x0)| (alpha * xt - x0) / sigma)
        .collect();
    Ok(VTarget {
        alpha,
        sigma,
        v: Tensor {
            shape: x_t.shape.clone(),
            data,
        },
    })
}

/// Reconstruction `x̃ = α·x_t − σ·v`.
pub fn reconstruct_x0<R: Real>(x_t: &Tensor<R>, v: &Tensor<R>, alpha: R, sigma: R) -> Tensor<R> {
    let data = x_t
        .data
        .iter()
        .zip(&v.data)
        .map(|(&xt, &vv)| alpha * xt - sigma * vv)
        .collect();
    Tensor {
        shape: x_t.shape.clone(),
        data,
    }
}
