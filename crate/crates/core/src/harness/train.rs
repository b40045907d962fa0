//! The training loop: batch assembly, loss dispatch per objective, AdamW
//! with warmup/cosine decay, gradient clipping, EMA tracking, JSON loss
//! logging, and resumable checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::losses::{
    loss_dart, loss_dart_ar, loss_flow, loss_kaleido, loss_markov_baseline, loss_matryoshka,
    BatchLoss, LossOpts, LossReport, ResSpec,
};
use crate::model::{Condition, Conditioning, ModelConfig, ParamStore, Variant};
use crate::noising::{corrupt, Trajectory};
use crate::rng::{self, stream};
use crate::schedule::{cosine_markov, markov_to_gamma, GammaSchedule, MarkovSchedule, Weighting};
use crate::tensor::Tensor;

use super::data::{self, DatasetSpec, GrammarData, VectorData};
use super::optim::{clip_global_norm, ema_update, lr_at, AdamState, OptimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Dart,
    DartAr,
    DartFm,
    MarkovBaseline,
    Kaleido,
    Matryoshka,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub base: ScheduleBase,
    pub t: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleBase {
    Cosine,
}

impl ScheduleSpec {
    pub fn markov(&self) -> Result<MarkovSchedule> {
        match self.base {
            ScheduleBase::Cosine => cosine_markov(self.t),
        }
    }

    pub fn gamma(&self) -> Result<GammaSchedule> {
        markov_to_gamma(&self.markov()?)
    }
}

/// One extra resolution of a multi-resolution run, ascending order. The
/// dataset's native grid is downsampled by `downsample` for this entry.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MatryoshkaRes {
    pub t: usize,
    pub downsample: usize,
}

fn default_warmup() -> usize {
    10_000
}
fn default_grad_clip() -> f64 {
    2.0
}
fn default_ema() -> f64 {
    0.9999
}
fn default_cond_dropout() -> f64 {
    0.1
}
fn default_log_every() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    pub objective: Objective,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default = "default_cond_dropout")]
    pub cond_dropout: f64,
    /// 0 means use the available parallelism.
    #[serde(default)]
    pub num_threads: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// 0 means checkpoint only at the end.
    #[serde(default)]
    pub ckpt_every: usize,
    /// Required for multi-resolution objectives, ascending resolution.
    #[serde(default)]
    pub resolutions: Option<Vec<MatryoshkaRes>>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub resume: bool,
    /// Stop this invocation early (checkpoint and resume later); the
    /// learning-rate horizon stays `total_steps`.
    #[serde(default)]
    pub stop_after: Option<usize>,
}

impl TrainConfig {
    pub fn threads(&self) -> usize {
        if self.num_threads > 0 {
            self.num_threads
        } else {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(CoreError::Config("batch size and steps must be > 0".into()));
        }
        let variant_ok = matches!(
            (self.objective, self.model.variant),
            (Objective::Dart, Variant::Dart)
                | (Objective::DartAr, Variant::DartAr)
                | (Objective::DartFm, Variant::DartFm)
                | (Objective::MarkovBaseline, Variant::Dart)
                | (Objective::Kaleido, Variant::Dart)
                | (Objective::Matryoshka, Variant::Dart)
        );
        if !variant_ok {
            return Err(CoreError::Config(format!(
                "objective {:?} does not match model variant {:?}",
                self.objective, self.model.variant
            )));
        }
        if self.objective == Objective::Matryoshka {
            let res = self
                .resolutions
                .as_ref()
                .ok_or_else(|| CoreError::Config("matryoshka needs resolutions".into()))?;
            if res.is_empty() {
                return Err(CoreError::Config("resolutions empty".into()));
            }
            for w in res.windows(2) {
                if w[1].downsample >= w[0].downsample {
                    return Err(CoreError::Config(
                        "resolutions must ascend (downsample must strictly decrease)".into(),
                    ));
                }
            }
        } else if self.model.t_levels != self.schedule.t {
            return Err(CoreError::Config(format!(
                "model levels {} != schedule levels {}",
                self.model.t_levels, self.schedule.t
            )));
        }
        if self.objective == Objective::Kaleido
            && !matches!(self.model.conditioning, Conditioning::TokenEmbed { .. })
        {
            return Err(CoreError::Config(
                "kaleido needs token-embed conditioning".into(),
            ));
        }
        Ok(())
    }
}

enum TrainData {
    Vectors(VectorData<f32>),
    Grammar(GrammarData<f32>),
}

pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub steps_run: usize,
    pub final_report: Option<LossReport>,
    pub history: Vec<(usize, LossReport)>,
}

/// Multi-resolution schedules for a config, lowest resolution first.
pub fn matryoshka_specs(cfg: &TrainConfig) -> Result<Vec<ResSpec>> {
    let res = cfg
        .resolutions
        .as_ref()
        .ok_or_else(|| CoreError::Config("matryoshka needs resolutions".into()))?;
    let DatasetSpec::TinyGrid { height, width, .. } = &cfg.dataset else {
        return Err(CoreError::Config(
            "matryoshka training expects a grid dataset".into(),
        ));
    };
    let patch = cfg.model.patch_size;
    let base_down = res[0].downsample;
    res.iter()
        .map(|r| {
            if height % (r.downsample * patch) != 0 || width % (r.downsample * patch) != 0 {
                return Err(CoreError::Config(format!(
                    "grid {}x{} not divisible by downsample {} and patch {}",
                    height, width, r.downsample, patch
                )));
            }
            Ok(ResSpec {
                schedule: ScheduleSpec {
                    base: cfg.schedule.base,
                    t: r.t,
                }
                .gamma()?,
                grid: (height / r.downsample / patch, width / r.downsample / patch),
                pos_scale: (base_down / r.downsample) as f64,
            })
        })
        .collect()
}

fn load_data(cfg: &TrainConfig) -> Result<TrainData> {
    let n = cfg.dataset.size();
    match cfg.objective {
        Objective::Kaleido => Ok(TrainData::Grammar(data::generate_grammar(
            &cfg.dataset,
            n,
            cfg.model.patch_size,
            cfg.seed,
        )?)),
        _ => Ok(TrainData::Vectors(data::generate_vectors(
            &cfg.dataset,
            n,
            cfg.model.patch_size,
            cfg.seed,
        )?)),
    }
}

fn non_finite_term(report: &LossReport) -> Option<&'static str> {
    if !report.denoise.is_finite() {
        Some("denoise")
    } else if !report.flow.is_finite() {
        Some("flow")
    } else if !report.cross_entropy.is_finite() {
        Some("cross_entropy")
    } else if !report.total.is_finite() {
        Some("total")
    } else {
        None
    }
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let gamma = cfg.schedule.gamma()?;
    let markov = cfg.schedule.markov()?;
    let res_specs = if cfg.objective == Objective::Matryoshka {
        Some(matryoshka_specs(cfg)?)
    } else {
        None
    };

    let mut params: ParamStore<f32> = crate::model::init_params(&cfg.model, cfg.seed)?;
    let mut ema = params.clone();
    let mut adam = AdamState::new(&params);
    let mut start_step = 0usize;

    if let (Some(dir), true) = (&cfg.out_dir, cfg.resume) {
        if dir.join("state.json").exists() {
            let state: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(dir.join("state.json"))?)?;
            start_step = state["step"].as_u64().unwrap_or(0) as usize;
            params = ParamStore::load(dir, "weights")?;
            ema = ParamStore::load(dir, "ema")?;
            adam = AdamState::load(dir)?;
        }
    }

    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log_file = match &cfg.out_dir {
        Some(dir) => Some(std::fs::OpenOptions::new().create(true).append(true).open(
            dir.join("loss_log.jsonl"),
        )?),
        None => None,
    };

    let threads = cfg.threads();
    let mut history = Vec::new();
    let mut final_report = None;

    let end_step = cfg.stop_after.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    for step in start_step..end_step {
        let batch = assemble_batch(cfg, &data, step)?;
        let opts = LossOpts {
            weighting: cfg.weighting,
            weights_override: None,
            seed: rng::fold(&[cfg.seed, stream::FLOW_TIME, step as u64]),
            num_threads: threads,
            want_grads: true,
            flow_time_samples: 1,
        };
        let conditions = assemble_conditions(cfg, step);
        let out: BatchLoss = match (&batch, cfg.objective) {
            (Batch::Trajectories(b), Objective::Dart) => {
                loss_dart(&params, &cfg.model, &gamma, b, &conditions, &opts)?
            }
            (Batch::Trajectories(b), Objective::DartAr) => {
                loss_dart_ar(&params, &cfg.model, &gamma, b, &conditions, &opts)?
            }
            (Batch::Trajectories(b), Objective::DartFm) => {
                loss_flow(&params, &cfg.model, &gamma, b, &conditions, &opts)?
            }
            (Batch::Clean(b), Objective::MarkovBaseline) => {
                loss_markov_baseline(&params, &cfg.model, &markov, b, &conditions, &opts)?
            }
            (Batch::MultiRes(b), Objective::Matryoshka) => loss_matryoshka(
                &params,
                &cfg.model,
                res_specs.as_ref().unwrap(),
                b,
                &conditions,
                &opts,
            )?,
            (Batch::Paired(b), Objective::Kaleido) => {
                loss_kaleido(&params, &cfg.model, &gamma, b, &opts)?
            }
            _ => return Err(CoreError::Config("batch/objective mismatch".into())),
        };
        if let Some(term) = non_finite_term(&out.report) {
            return Err(CoreError::Config(format!(
                "non-finite loss at step {}: {} term (report {:?})",
                step, term, out.report
            )));
        }

        let mut grads = out.grads.expect("gradients requested");
        clip_global_norm(&mut grads, cfg.grad_clip);
        let lr_t = lr_at(&cfg.optim, step, cfg.warmup_steps, cfg.total_steps);
        adam.apply(&mut params, &grads, &cfg.optim, lr_t);
        ema_update(&mut ema, &params, cfg.ema_decay as f32);

        let last = step + 1 == end_step;
        if step % cfg.log_every.max(1) == 0 || last {
            if let Some(f) = &mut log_file {
                let mut line = serde_json::to_value(&out.report)?;
                line["step"] = serde_json::json!(step);
                writeln!(f, "{}", serde_json::to_string(&line)?)?;
            }
            history.push((step, out.report.clone()));
        }
        if last {
            final_report = Some(out.report.clone());
        }
        if let Some(dir) = &cfg.out_dir {
            let period_hit = cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0;
            if period_hit || last {
                save_checkpoint(dir, cfg, &params, &ema, &adam, step + 1)?;
            }
        }
    }

    Ok(TrainOutcome {
        params,
        ema,
        steps_run: end_step.saturating_sub(start_step),
        final_report,
        history,
    })
}

fn save_checkpoint(
    dir: &Path,
    cfg: &TrainConfig,
    params: &ParamStore<f32>,
    ema: &ParamStore<f32>,
    adam: &AdamState,
    step: usize,
) -> Result<()> {
    params.save(dir, "weights")?;
    ema.save(dir, "ema")?;
    adam.save(dir)?;
    let state = serde_json::json!({ "step": step, "config": cfg });
    std::fs::write(dir.join("state.json"), serde_json::to_string_pretty(&state)?)?;
    Ok(())
}

enum Batch {
    Trajectories(Vec<Trajectory<f32>>),
    Clean(Vec<Tensor<f32>>),
    MultiRes(Vec<Vec<Trajectory<f32>>>),
    Paired(Vec<(Vec<usize>, Trajectory<f32>)>),
}

fn pick_indices(cfg: &TrainConfig, step: usize, n: usize) -> Vec<usize> {
    let mut r = rng::substream(&[cfg.seed, stream::BATCH, step as u64]);
    (0..cfg.batch_size)
        .map(|_| rng::uniform_usize(&mut r, n))
        .collect()
}

fn assemble_conditions(cfg: &TrainConfig, step: usize) -> Vec<Condition> {
    match cfg.model.conditioning {
        Conditioning::ClassAdaln { .. } => {
            let mut r = rng::substream(&[cfg.seed, stream::COND_DROP, step as u64]);
            (0..cfg.batch_size)
                .map(|_| {
                    if rng::uniform_f64(&mut r) < cfg.cond_dropout {
                        Condition::NullClass
                    } else {
                        Condition::Class(0)
                    }
                })
                .collect()
        }
        _ => Vec::new(),
    }
}

fn assemble_batch(cfg: &TrainConfig, data: &TrainData, step: usize) -> Result<Batch> {
    let gamma = cfg.schedule.gamma()?;
    match (data, cfg.objective) {
        (TrainData::Vectors(v), Objective::MarkovBaseline) => {
            let idx = pick_indices(cfg, step, v.items.len());
            Ok(Batch::Clean(
                idx.iter().map(|&i| v.items[i].clone()).collect(),
            ))
        }
        (TrainData::Vectors(v), Objective::Matryoshka) => {
            let specs = matryoshka_specs(cfg)?;
            let res = cfg.resolutions.as_ref().unwrap();
            let geom = v.image_geom.ok_or_else(|| {
                CoreError::Config("matryoshka needs image-backed tokens".into())
            })?;
            let idx = pick_indices(cfg, step, v.items.len());
            let batch = idx
                .iter()
                .enumerate()
                .map(|(slot, &i)| {
                    res.iter()
                        .zip(&specs)
                        .map(|(r, spec)| {
                            let toks = if r.downsample == 1 {
                                v.items[i].clone()
                            } else {
                                data::downsample_tokens(&v.items[i], geom, r.downsample)?
                            };
                            let seed = rng::fold(&[
                                cfg.seed,
                                stream::CORRUPT,
                                step as u64,
                                slot as u64,
                                r.downsample as u64,
                            ]);
                            Ok(corrupt(&toks, &spec.schedule, seed))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Batch::MultiRes(batch))
        }
        (TrainData::Vectors(v), _) => {
            let idx = pick_indices(cfg, step, v.items.len());
            let batch = idx
                .iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let seed =
                        rng::fold(&[cfg.seed, stream::CORRUPT, step as u64, slot as u64]);
                    corrupt(&v.items[i], &gamma, seed)
                })
                .collect();
            Ok(Batch::Trajectories(batch))
        }
        (TrainData::Grammar(g), Objective::Kaleido) => {
            let idx = pick_indices(cfg, step, g.items.len());
            let batch = idx
                .iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let (ids, toks) = &g.items[i];
                    let seed =
                        rng::fold(&[cfg.seed, stream::CORRUPT, step as u64, slot as u64]);
                    (ids.clone(), corrupt(toks, &gamma, seed))
                })
                .collect();
            Ok(Batch::Paired(batch))
        }
        _ => Err(CoreError::Config("dataset/objective mismatch".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(dir: Option<PathBuf>) -> TrainConfig {
        let mut model = ModelConfig::point_model(2, 2, 24, 1);
        model.use_qk_norm = true;
        TrainConfig {
            dataset: DatasetSpec::GaussMixture2d {
                modes: 4,
                size: 256,
                std: 0.15,
            },
            model,
            schedule: ScheduleSpec {
                base: ScheduleBase::Cosine,
                t: 2,
            },
            objective: Objective::Dart,
            optim: OptimConfig::default(),
            warmup_steps: 2,
            total_steps: 10,
            batch_size: 4,
            seed: 5,
            grad_clip: 2.0,
            ema_decay: 0.9999,
            weighting: Weighting::SnrPlusOne,
            cond_dropout: 0.1,
            num_threads: 1,
            log_every: 1,
            ckpt_every: 0,
            resolutions: None,
            out_dir: dir,
            resume: false,
            stop_after: None,
        }
    }

    #[test]
    fn loss_decreases_on_tiny_run() {
        let mut cfg = tiny_cfg(None);
        cfg.total_steps = 300;
        cfg.batch_size = 8;
        cfg.optim.lr = 5e-3;
        let out = train(&cfg).unwrap();
        let avg = |range: std::ops::Range<usize>| -> f64 {
            let vals: Vec<f64> = out
                .history
                .iter()
                .filter(|(s, _)| range.contains(s))
                .map(|(_, r)| r.total)
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let head = avg(0..50);
        let tail = avg(250..300);
        assert!(tail < head, "loss did not decrease: {} -> {}", head, tail);
    }

    #[test]
    fn resume_is_bit_exact() {
        let base = std::env::temp_dir().join(format!("dart-train-{}", std::process::id()));
        let dir_a = base.join("a");
        let dir_b = base.join("b");
        std::fs::create_dir_all(&dir_a).unwrap();
        std::fs::create_dir_all(&dir_b).unwrap();

        // One uninterrupted 10-step run.
        let mut cfg_a = tiny_cfg(Some(dir_a.clone()));
        cfg_a.log_every = 1;
        let out_a = train(&cfg_a).unwrap();

        // The same run, stopped at 5 then resumed to the same horizon.
        let mut cfg_b = tiny_cfg(Some(dir_b.clone()));
        cfg_b.stop_after = Some(5);
        train(&cfg_b).unwrap();
        let mut cfg_b2 = tiny_cfg(Some(dir_b.clone()));
        cfg_b2.resume = true;
        let out_b = train(&cfg_b2).unwrap();

        for i in 0..out_a.params.len() {
            let a = &out_a.params.entry(i).1.data;
            let b = &out_b.params.entry(i).1.data;
            let bits_a: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "param {} diverged", out_a.params.entry(i).0);
        }
        // Same loss trajectory over the overlapping steps.
        let tail_a: Vec<f64> = out_a
            .history
            .iter()
            .filter(|(s, _)| *s >= 5)
            .map(|(_, r)| r.total)
            .collect();
        let tail_b: Vec<f64> = out_b.history.iter().map(|(_, r)| r.total).collect();
        assert_eq!(tail_a, tail_b);
        std::fs::remove_dir_all(&base).ok();
    }

    #[test]
    fn overfit_single_sample_beats_zero_init_by_100x() {
        // One fixed point, enough steps: the loss collapses below 1% of the
        // zero-initialization closed form.
        let mut cfg = tiny_cfg(None);
        cfg.dataset = DatasetSpec::GaussMixture2d {
            modes: 3,
            size: 1,
            std: 0.15,
        };
        cfg.total_steps = 1000;
        cfg.warmup_steps = 20;
        cfg.optim.lr = 1e-2;
        cfg.batch_size = 2;
        let out = train(&cfg).unwrap();
        let first = out.history.first().unwrap().1.total;
        let last = out.final_report.as_ref().unwrap().total;
        assert!(
            last < 0.01 * first,
            "overfit too weak: {} -> {} ({}x)",
            first,
            last,
            first / last
        );
    }

    #[test]
    fn objective_variant_mismatch_is_rejected() {
        let mut cfg = tiny_cfg(None);
        cfg.objective = Objective::DartAr;
        assert!(matches!(train(&cfg), Err(CoreError::Config(_))));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let mut v = serde_json::to_value(tiny_cfg(None)).unwrap();
        v["no_such_key"] = serde_json::json!(1);
        let parsed: std::result::Result<TrainConfig, _> = serde_json::from_value(v);
        assert!(parsed.is_err());
    }
}
