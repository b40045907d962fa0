//! Experiments: dataset generators, the training loop, evaluation metrics,
//! and schedule verification.

pub mod data;
pub mod eval;
pub mod optim;
pub mod train;
pub mod verify;

pub use data::{DatasetSpec, GrammarData, VectorData};
pub use eval::{eval_swd, histogram_l1, nn_mse, wasserstein1_1d};
pub use optim::{clip_global_norm, ema_update, lr_at, AdamState, OptimConfig};
pub use train::{
    matryoshka_specs, train, MatryoshkaRes, Objective, ScheduleBase, ScheduleSpec, TrainConfig,
    TrainOutcome,
};
pub use verify::{verify_prop1, VerifyReport};

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::model::{Condition, ParamStore};
use crate::sampler::{sample_dart, sample_dart_ar, sample_dart_fm, sample_markov_baseline, SamplerOpts};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMetric {
    Swd,
    Mse,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub metric: EvalMetric,
    pub num_samples: usize,
    pub seed: u64,
    pub value: Option<f64>,
    /// For the Markov baseline: sampling step count used.
    pub baseline_steps: Option<usize>,
}

/// Generate from a trained model and score against held-out data.
/// `num = 0` produces an empty report and succeeds.
pub fn eval_suite(
    cfg: &TrainConfig,
    params: &ParamStore<f32>,
    metric: EvalMetric,
    num: usize,
    seed: u64,
    baseline_steps: Option<usize>,
) -> Result<EvalReport> {
    if num == 0 {
        return Ok(EvalReport {
            metric,
            num_samples: 0,
            seed,
            value: None,
            baseline_steps,
        });
    }
    let samples = generate_for_eval(cfg, params, num, seed, baseline_steps)?;
    let value = match metric {
        // Distribution distance against held-out data from a disjoint key.
        EvalMetric::Swd => {
            let heldout: VectorData<f32> = data::generate_vectors(
                &cfg.dataset,
                num,
                cfg.model.patch_size,
                crate::rng::fold(&[cfg.seed, 0x8E1D]),
            )?;
            eval_swd(&samples, &heldout.items, 128, seed)?
        }
        // Memorization distance against the training set itself.
        EvalMetric::Mse => {
            let train_items: VectorData<f32> = data::generate_vectors(
                &cfg.dataset,
                cfg.dataset.size(),
                cfg.model.patch_size,
                cfg.seed,
            )?;
            nn_mse(&samples, &train_items.items)?
        }
    };
    Ok(EvalReport {
        metric,
        num_samples: num,
        seed,
        value: Some(value),
        baseline_steps,
    })
}

/// Draw `num` token grids from whatever sampler matches the objective.
pub fn generate_for_eval(
    cfg: &TrainConfig,
    params: &ParamStore<f32>,
    num: usize,
    seed: u64,
    baseline_steps: Option<usize>,
) -> Result<Vec<Tensor<f32>>> {
    let gamma = cfg.schedule.gamma()?;
    let opts = SamplerOpts {
        seed,
        num_threads: cfg.threads(),
        ..Default::default()
    };
    match cfg.objective {
        Objective::Dart => sample_dart(params, &cfg.model, &gamma, Condition::None, &opts, num),
        Objective::DartAr => Ok(sample_dart_ar(
            params,
            &cfg.model,
            &gamma,
            Condition::None,
            &opts,
            num,
        )?
        .into_iter()
        .map(|s| s.output)
        .collect()),
        Objective::DartFm => {
            sample_dart_fm(params, &cfg.model, &gamma, Condition::None, &opts, num)
        }
        Objective::MarkovBaseline => {
            let steps = baseline_steps.unwrap_or(cfg.schedule.t);
            sample_markov_baseline(
                params,
                &cfg.model,
                &cfg.schedule.markov()?,
                steps,
                Condition::None,
                &opts,
                num,
            )
        }
        Objective::Kaleido | Objective::Matryoshka => Err(CoreError::Config(
            "eval_suite scores single-grid objectives; use the dedicated samplers".into(),
        )),
    }
}
