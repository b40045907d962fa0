//! Training objectives.
//!
//! Every denoising term converts the head's v-output back to a clean-data
//! prediction and penalizes the squared error against x_0, averaged over
//! tokens and channels, weighted per level, and averaged over the batch.
//! The prediction for token k of a transition out of level t is always
//! anchored on the noisy input token x_t[k]: x̃_0 = √γ_t·x_t[k] − √(1−γ_t)·v̂.
//! For the token-autoregressive variant the v̂ is read one position before
//! the predicted token, which is what teacher forcing shifts amount to.
//!
//! Batches are stacked into one graph per worker under a block-diagonal
//! attention mask: samples never see each other, the math is identical to
//! per-sample evaluation, and the tape overhead is paid once per batch.

use std::ops::Range;
use std::rc::Rc;

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{
    build_mask_for_layout, flow_velocity, forward_full, Bound, ChunkDescriptor, Condition,
    ModelConfig, ParamStore, SeqInput, SeqLayout, Variant,
};
use crate::noising::Trajectory;
use crate::parallel;
use crate::real::Real;
use crate::rng::{self, stream};
use crate::schedule::{GammaSchedule, MarkovSchedule, Weighting};
use crate::tensor::Tensor;

/// One resolution of a multi-resolution model.
#[derive(Debug, Clone)]
pub struct ResSpec {
    pub schedule: GammaSchedule,
    pub grid: (usize, usize),
    /// Spatial positions are divided by this before rotary encoding.
    pub pos_scale: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub denoise: f64,
    pub flow: f64,
    pub cross_entropy: f64,
    /// Weighted per-level contributions; multi-resolution reports concatenate
    /// the resolutions in order.
    pub per_level: Vec<f64>,
    pub text_tokens: usize,
    pub image_tokens: usize,
    pub lambda: f64,
}

pub struct BatchLoss {
    pub report: LossReport,
    /// Batch-mean gradients per store entry, present when requested.
    pub grads: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct LossOpts {
    pub weighting: Weighting,
    /// Override the per-level weights of the base resolution (tests use this
    /// to probe weight linearity).
    pub weights_override: Option<Vec<f64>>,
    /// Seed for the loss's own draws (flow times, renoising, level picks).
    pub seed: u64,
    /// Worker count; the batch is split into this many stacked graphs.
    pub num_threads: usize,
    pub want_grads: bool,
    /// Uniform flow-time draws per (sample, level).
    pub flow_time_samples: usize,
}

impl Default for LossOpts {
    fn default() -> Self {
        Self {
            weighting: Weighting::Snr,
            weights_override: None,
            seed: 0,
            num_threads: 1,
            want_grads: false,
            flow_time_samples: 1,
        }
    }
}

/// Sums over the samples of one worker's stacked graph.
struct WorkerOut {
    denoise: f64,
    flow: f64,
    ce: f64,
    per_level: Vec<f64>,
    text_tokens: usize,
    image_tokens: usize,
    grads: Option<Vec<Vec<f64>>>,
}

fn cond_at(conditions: &[Condition], i: usize) -> Condition {
    if conditions.is_empty() {
        Condition::None
    } else {
        conditions[i]
    }
}

/// Contiguous stacking ranges: enough pieces for the workers, and no stack
/// wider than ~192 rows so the block-diagonal attention waste stays small.
/// Deterministic for a given worker count.
fn split_ranges(n: usize, workers: usize, rows_per_sample: usize) -> Vec<Range<usize>> {
    let workers = workers.clamp(1, n.max(1));
    let cap = (192 / rows_per_sample.max(1)).max(1);
    let chunk = n.div_ceil(workers).min(cap).max(1);
    (0..n)
        .step_by(chunk)
        .map(|s| s..(s + chunk).min(n))
        .collect()
}

/// Tile a per-sample visibility matrix into a block-diagonal batch mask.
fn block_diag(masks: &[(&[bool], usize)]) -> Rc<Vec<bool>> {
    let total: usize = masks.iter().map(|(_, l)| l).sum();
    let mut out = vec![false; total * total];
    let mut off = 0;
    for (m, l) in masks {
        for q in 0..*l {
            let src = &m[q * l..(q + 1) * l];
            out[(off + q) * total + off..(off + q) * total + off + l].copy_from_slice(src);
        }
        off += l;
    }
    Rc::new(out)
}

fn reduce<R: Real>(
    store: &ParamStore<R>,
    outs: Vec<Result<WorkerOut>>,
    n_samples: usize,
    want_grads: bool,
    lambda_weighted_ce: bool,
) -> Result<BatchLoss> {
    let mut denoise = 0.0;
    let mut flow = 0.0;
    let mut ce = 0.0;
    let mut per_level: Vec<f64> = Vec::new();
    let mut text_tokens = 0usize;
    let mut image_tokens = 0usize;
    let mut grads = if want_grads {
        Some(vec![Vec::new(); store.len()])
    } else {
        None
    };
    for out in outs {
        let out = out?;
        denoise += out.denoise;
        flow += out.flow;
        ce += out.ce;
        if per_level.is_empty() {
            per_level = vec![0.0; out.per_level.len()];
        }
        for (acc, v) in per_level.iter_mut().zip(&out.per_level) {
            *acc += v;
        }
        text_tokens += out.text_tokens;
        image_tokens += out.image_tokens;
        if let (Some(acc), Some(g)) = (&mut grads, out.grads) {
            for (slot, gv) in acc.iter_mut().zip(g) {
                if gv.is_empty() {
                    continue;
                }
                if slot.is_empty() {
                    slot.resize(gv.len(), 0.0);
                }
                for (a, b) in slot.iter_mut().zip(&gv) {
                    *a += b;
                }
            }
        }
    }
    let inv = 1.0 / n_samples as f64;
    denoise *= inv;
    flow *= inv;
    for v in per_level.iter_mut() {
        *v *= inv;
    }
    if let Some(acc) = &mut grads {
        for slot in acc.iter_mut() {
            for v in slot.iter_mut() {
                *v *= inv;
            }
        }
    }
    // Workers report the summed cross-entropy; the reported value is the
    // per-supervised-token mean so that total = denoise + flow + λ·ce holds
    // with λ the exact token-count ratio.
    let lambda = if lambda_weighted_ce && image_tokens > 0 {
        text_tokens as f64 / image_tokens as f64
    } else {
        0.0
    };
    let ce_mean = if text_tokens > 0 { ce / text_tokens as f64 } else { 0.0 };
    let ce = ce_mean;
    let total = denoise + flow + lambda * ce;
    Ok(BatchLoss {
        report: LossReport {
            total,
            denoise,
            flow,
            cross_entropy: ce,
            per_level,
            text_tokens,
            image_tokens,
            lambda,
        },
        grads,
    })
}

fn effective_weights(schedule: &GammaSchedule, opts: &LossOpts) -> Result<Vec<f64>> {
    if let Some(w) = &opts.weights_override {
        if w.len() != schedule.t_count {
            return Err(CoreError::Config(format!(
                "{} override weights for {} levels",
                w.len(),
                schedule.t_count
            )));
        }
        return Ok(w.clone());
    }
    Ok(opts.weighting.weights(schedule))
}

fn check_traj<R: Real>(
    traj: &Trajectory<R>,
    schedule: &GammaSchedule,
    k: usize,
    c: usize,
) -> Result<()> {
    if traj.levels.len() != schedule.t_count {
        return Err(CoreError::Config(format!(
            "trajectory has {} levels, schedule {}",
            traj.levels.len(),
            schedule.t_count
        )));
    }
    if traj.x0.shape != vec![k, c] {
        return Err(CoreError::Shape(format!(
            "x0 shape {:?}, expected [{}, {}]",
            traj.x0.shape, k, c
        )));
    }
    Ok(())
}

/// Append the ω_t·MSE(x̃_0, x_0) term for one transition to `terms`.
///
/// `read_rows` are the sequence positions the v-prediction is read from and
/// `anchor` is the noisy chunk x_t the reconstruction is anchored on.
#[allow(clippy::too_many_arguments)]
fn denoise_term<R: Real>(
    g: &mut Graph<R>,
    v_all: NodeId,
    read_rows: Vec<usize>,
    anchor: &Tensor<R>,
    x0: &Tensor<R>,
    gamma: f64,
    weight: f64,
    terms: &mut Vec<(f64, NodeId)>,
) -> Result<()> {
    let alpha = gamma.sqrt();
    let sigma = (1.0 - gamma).sqrt();
    let v_rows = g.gather_rows(v_all, Rc::new(read_rows))?;
    let bias = Tensor {
        shape: anchor.shape.clone(),
        data: anchor
            .data
            .iter()
            .map(|&x| R::from_f64(alpha) * x)
            .collect(),
    };
    let x0_hat = g.affine_const(v_rows, R::from_f64(-sigma), Rc::new(bias))?;
    let term = g.mse_to_const(x0_hat, Rc::new(x0.clone()))?;
    terms.push((weight, term));
    Ok(())
}

fn weighted_total<R: Real>(g: &mut Graph<R>, terms: &[(f64, NodeId)]) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for &(w, t) in terms {
        let scaled = g.scale(t, R::from_f64(w));
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    acc.ok_or_else(|| CoreError::InvalidArgument("no loss terms".into()))
}

fn worker_grads<R: Real>(
    g: &Graph<R>,
    bound: &Bound,
    store: &ParamStore<R>,
    total: NodeId,
    want_grads: bool,
) -> Result<Option<Vec<Vec<f64>>>> {
    if !want_grads {
        return Ok(None);
    }
    let grads = g.backward(total)?;
    let mut out = vec![Vec::new(); store.len()];
    bound.accumulate_grads(store, &grads, &mut out);
    Ok(Some(out))
}

/// Tokens of all chunks in layout order (levels T..1).
fn stack_chunks<R: Real>(traj: &Trajectory<R>, t_count: usize, into: &mut Vec<R>) {
    for t in (1..=t_count).rev() {
        into.extend_from_slice(&traj.x_at(t).data);
    }
}

fn cond_rows_for_batch(
    cfg: &ModelConfig,
    conditions: &[Condition],
    range: &Range<usize>,
    rows_per_sample: usize,
) -> Result<Option<Rc<Vec<usize>>>> {
    if !matches!(cfg.conditioning, crate::model::Conditioning::ClassAdaln { .. }) {
        return Ok(None);
    }
    let mut rows = Vec::with_capacity(range.len() * rows_per_sample);
    for i in range.clone() {
        let row = cond_at(conditions, i)
            .embed_row(cfg)?
            .ok_or_else(|| CoreError::Config("missing class condition".into()))?;
        rows.extend(std::iter::repeat_n(row, rows_per_sample));
    }
    Ok(Some(Rc::new(rows)))
}

/// Trajectory-wide denoising loss: every level predicts x_0 from the chunk
/// sequence it can see, weighted by ω_t.
pub fn loss_dart<R: Real>(
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    schedule: &GammaSchedule,
    batch: &[Trajectory<R>],
    conditions: &[Condition],
    opts: &LossOpts,
) -> Result<BatchLoss> {
    denoise_family(store, cfg, schedule, batch, conditions, opts, Family::Dart)
}

/// Teacher-forced token-autoregressive loss. The input extends the chunk
/// sequence with the first K−1 clean tokens; the prediction for token k of
/// the transition out of level t is read one position before that token's
/// input slot.
pub fn loss_dart_ar<R: Real>(
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    schedule: &GammaSchedule,
    batch: &[Trajectory<R>],
    conditions: &[Condition],
    opts: &LossOpts,
) -> Result<BatchLoss> {
    denoise_family(store, cfg, schedule, batch, conditions, opts, Family::Ar)
}

/// Denoising loss plus the flow-matching refinement term. The interpolant is
/// built from the detached prediction, so the flow term reaches the backbone
/// only through the context features.
pub fn loss_flow<R: Real>(
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    schedule: &GammaSchedule,
    batch: &[Trajectory<R>],
    conditions: &[Condition],
    opts: &LossOpts,
) -> Result<BatchLoss> {
    if cfg.variant != Variant::DartFm {
        return Err(CoreError::Config("flow loss needs the fm variant".into()));
    }
    denoise_family(store, cfg, schedule, batch, conditions, opts, Family::Flow)
}

#[derive(Clone, Copy, PartialEq)]
enum Family {
    Dart,
    Ar,
    Flow,
}

fn denoise_family<R: Real>(
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    schedule: &GammaSchedule,
    batch: &[Trajectory<R>],
    conditions: &[Condition],
    opts: &LossOpts,
    family: Family,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    if cfg.t_levels != schedule.t_count {
        return Err(CoreError::Config(format!(
            "model has {} levels, schedule {}",
            cfg.t_levels, schedule.t_count
        )));
    }
    let weights = effective_weights(schedule, opts)?;
    let k = cfg.tokens_per_level;
    let c = cfg.channels;
    let t_count = schedule.t_count;

    let (sample_layout, variant) = match family {
        Family::Ar => (SeqLayout::for_model_ar(cfg), Variant::DartAr),
        _ => (SeqLayout::for_model(cfg), Variant::Dart),
    };
    let l_per = sample_layout.total_len();
    let sample_mask: Vec<bool> = build_mask_for_layout(&sample_layout, variant)
        .matrix
        .to_vec();
    let n_tau = opts.flow_time_samples.max(1);

    let ranges = split_ranges(batch.len(), opts.num_threads, l_per);
    let outs = parallel::map_indexed(&ranges, opts.num_threads, |_, range| {
        let b = range.len();
        let mut tokens: Vec<R> = Vec::with_capacity(b * l_per * c);
        for i in range.clone() {
            let traj = &batch[i];
            check_traj(traj, schedule, k, c)?;
            stack_chunks(traj, t_count, &mut tokens);
            if family == Family::Ar && k > 1 {
                tokens.extend_from_slice(&traj.x0.data[..(k - 1) * c]);
            }
        }
        let mut chunks = Vec::with_capacity(b * sample_layout.chunks.len());
        for _ in 0..b {
            chunks.extend(sample_layout.chunks.iter().cloned());
        }
        let layout = SeqLayout::new(chunks);
        let mask = block_diag(&vec![(sample_mask.as_slice(), l_per); b]);
        let cond_rows = cond_rows_for_batch(cfg, conditions, range, l_per)?;

        let mut g = Graph::new();
        let mut bound = Bound::new(store, opts.want_grads);
        let input = SeqInput {
            layout,
            image_tokens: Tensor::new(vec![b * l_per, c], tokens)?,
            text_ids: vec![],
        };
        let out = forward_full(&mut g, &mut bound, store, cfg, mask, &input, cond_rows)?;

        let mut terms: Vec<(f64, NodeId)> = Vec::with_capacity(b * t_count);
        let mut flow_terms: Vec<(f64, NodeId)> = Vec::new();
        for (s, i) in range.clone().enumerate() {
            let traj = &batch[i];
            let base = s * l_per;
            for t in (1..=t_count).rev() {
                let read_start = match family {
                    Family::Ar => {
                        // One before the first slot of level t−1 (level 0
                        // sits in the clean tail).
                        let start_next = if t > 1 {
                            (t_count - (t - 1)) * k
                        } else {
                            t_count * k
                        };
                        base + start_next - 1
                    }
                    _ => base + (t_count - t) * k,
                };
                denoise_term(
                    &mut g,
                    out.v,
                    (read_start..read_start + k).collect(),
                    traj.x_at(t),
                    &traj.x0,
                    schedule.gamma[t - 1],
                    weights[t - 1],
                    &mut terms,
                )?;
                if family == Family::Flow {
                    flow_level_terms(
                        &mut g,
                        &mut bound,
                        store,
                        cfg,
                        schedule,
                        traj,
                        out.v,
                        out.context,
                        base + (t_count - t) * k,
                        t,
                        i,
                        opts,
                        n_tau,
                        &mut flow_terms,
                    )?;
                }
            }
        }
        let denoise_total = weighted_total(&mut g, &terms)?;
        let total = if flow_terms.is_empty() {
            denoise_total
        } else {
            let flow_total = weighted_total(&mut g, &flow_terms)?;
            g.add(denoise_total, flow_total)?
        };
        let grads = worker_grads(&g, &bound, store, total, opts.want_grads)?;

        let mut per_level = vec![0.0; t_count];
        for (ti, &(w, term)) in terms.iter().enumerate() {
            let t = t_count - (ti % t_count);
            per_level[t - 1] += w * g.value(term).data[0].to_f64();
        }
        let flow_sum: f64 = flow_terms
            .iter()
            .map(|&(w, term)| w * g.value(term).data[0].to_f64())
            .sum();
        let denoise_sum: f64 = terms
            .iter()
            .map(|&(w, term)| w * g.value(term).data[0].to_f64())
            .sum();
        Ok(WorkerOut {
            denoise: denoise_sum,
            flow: flow_sum,
            ce: 0.0,
            per_level,
            text_tokens: 0,
            image_tokens: b * k,
            grads,
        })
    });
    reduce(store, outs, batch.len(), opts.want_grads, false)
}

/// Flow-matching terms for one (sample, level): a Gaussian step around the
/// detached prediction, a straight-line interpolant, and the velocity
/// regression. Only the context rows stay attached to the backbone.
#[allow(clippy::too_many_arguments)]
fn flow_level_terms<R: Real>(
    g: &mut Graph<R>,
    bound: &mut Bound,
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    schedule: &GammaSchedule,
    traj: &Trajectory<R>,
    v_all: NodeId,
    context_all: NodeId,
    read_start: usize,
    t: usize,
    sample_idx: usize,
    opts: &LossOpts,
    n_tau: usize,
    flow_terms: &mut Vec<(f64, NodeId)>,
) -> Result<()> {
    let k = cfg.tokens_per_level;
    let c = cfg.channels;
    let rows: Vec<usize> = (read_start..read_start + k).collect();
    let alpha = schedule.alpha_coef(t);
    let sigma = schedule.sigma_coef(t);
    // Detached clean prediction value.
    let x0_hat: Vec<R> = {
        let v_rows = g.gather_rows(v_all, Rc::new(rows.clone()))?;
        let vv = g.value(v_rows);
        traj.x_at(t)
            .data
            .iter()
            .zip(&vv.data)
            .map(|(&x, &v)| R::from_f64(alpha) * x - R::from_f64(sigma) * v)
            .collect()
    };
    let gamma_prev = schedule.gamma_at(t - 1);
    let mut noise_rng = rng::substream(&[
        opts.seed,
        stream::RENOISE,
        sample_idx as u64,
        t as u64,
    ]);
    let eps: Vec<R> = rng::normal_vec(&mut noise_rng, k * c);
    let a = R::from_f64(gamma_prev.sqrt());
    let bcoef = R::from_f64((1.0 - gamma_prev).sqrt());
    let x_tilde: Vec<R> = x0_hat
        .iter()
        .zip(&eps)
        .map(|(&m, &e)| a * m + bcoef * e)
        .collect();
    let x_prev = if t == 1 {
        &traj.x0
    } else {
        traj.x_at(t - 1)
    };
    let context_rows = g.gather_rows(context_all, Rc::new(rows))?;
    let mut tau_rng = rng::substream(&[
        opts.seed,
        stream::FLOW_TIME,
        sample_idx as u64,
        t as u64,
    ]);
    for _ in 0..n_tau {
        let tau = rng::uniform_f64(&mut tau_rng);
        let state: Vec<R> = x_tilde
            .iter()
            .zip(&x_prev.data)
            .map(|(&xt, &xp)| R::from_f64(1.0 - tau) * xt + R::from_f64(tau) * xp)
            .collect();
        let target: Vec<R> = x_prev
            .data
            .iter()
            .zip(&x_tilde)
            .map(|(&xp, &xt)| xp - xt)
            .collect();
        let state_node = g.input(Tensor::new(vec![k, c], state)?);
        let vel = flow_velocity(g, bound, store, cfg, state_node, context_rows, tau)?;
        let term = g.mse_to_const(vel, Rc::new(Tensor::new(vec![k, c], target)?))?;
        flow_terms.push((1.0 / n_tau as f64, term));
    }
    Ok(())
}

/// Multi-resolution joint loss: the concatenated sequence carries every
/// resolution's chunks; the total is the sum of per-resolution denoising
/// losses. Clean tokens never enter the input.
pub fn loss_matryoshka<R: Real>(
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    specs: &[ResSpec],
    batch: &[Vec<Trajectory<R>>],
    conditions: &[Condition],
    opts: &LossOpts,
) -> Result<BatchLoss> {
    if batch.is_empty() || specs.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch or specs".into()));
    }
    for w in specs.windows(2) {
        if w[1].pos_scale < w[0].pos_scale {
            return Err(CoreError::Config(
                "resolutions must be ordered ascending".into(),
            ));
        }
    }
    let mut weights = Vec::with_capacity(specs.len());
    for (ri, spec) in specs.iter().enumerate() {
        if ri == 0 {
            weights.push(effective_weights(&spec.schedule, opts)?);
        } else {
            weights.push(opts.weighting.weights(&spec.schedule));
        }
    }
    let c = cfg.channels;
    let sample_chunks: Vec<ChunkDescriptor> = specs
        .iter()
        .enumerate()
        .flat_map(|(ri, spec)| {
            (1..=spec.schedule.t_count)
                .rev()
                .map(move |t| ChunkDescriptor::image(t as f64, spec.grid, spec.pos_scale, ri))
        })
        .collect();
    let sample_layout = SeqLayout::new(sample_chunks);
    let l_per = sample_layout.total_len();
    let sample_mask: Vec<bool> = build_mask_for_layout(&sample_layout, Variant::Dart)
        .matrix
        .to_vec();
    let levels_total: usize = specs.iter().map(|s| s.schedule.t_count).sum();

    let ranges = split_ranges(batch.len(), opts.num_threads, l_per);
    let outs = parallel::map_indexed(&ranges, opts.num_threads, |_, range| {
        let b = range.len();
        let mut tokens: Vec<R> = Vec::with_capacity(b * l_per * c);
        for i in range.clone() {
            let trajs = &batch[i];
            if trajs.len() != specs.len() {
                return Err(CoreError::Config(format!(
                    "sample has {} resolutions, spec {}",
                    trajs.len(),
                    specs.len()
                )));
            }
            for (spec, traj) in specs.iter().zip(trajs) {
                let kr = spec.grid.0 * spec.grid.1;
                check_traj(traj, &spec.schedule, kr, c)?;
                stack_chunks(traj, spec.schedule.t_count, &mut tokens);
            }
        }
        let mut chunks = Vec::with_capacity(b * sample_layout.chunks.len());
        for _ in 0..b {
            chunks.extend(sample_layout.chunks.iter().cloned());
        }
        let layout = SeqLayout::new(chunks);
        let mask = block_diag(&vec![(sample_mask.as_slice(), l_per); b]);
        let cond_rows = cond_rows_for_batch(cfg, conditions, range, l_per)?;

        let mut g = Graph::new();
        let mut bound = Bound::new(store, opts.want_grads);
        let input = SeqInput {
            layout,
            image_tokens: Tensor::new(vec![b * l_per, c], tokens)?,
            text_ids: vec![],
        };
        let out = forward_full(&mut g, &mut bound, store, cfg, mask, &input, cond_rows)?;

        let mut terms = Vec::new();
        let mut image_tokens = 0;
        for (s, i) in range.clone().enumerate() {
            let trajs = &batch[i];
            let mut offset = s * l_per;
            for (ri, (spec, traj)) in specs.iter().zip(trajs).enumerate() {
                let kr = spec.grid.0 * spec.grid.1;
                if s == 0 {
                    image_tokens += kr;
                }
                let t_count = spec.schedule.t_count;
                for t in (1..=t_count).rev() {
                    let start = offset + (t_count - t) * kr;
                    denoise_term(
                        &mut g,
                        out.v,
                        (start..start + kr).collect(),
                        traj.x_at(t),
                        &traj.x0,
                        spec.schedule.gamma[t - 1],
                        weights[ri][t - 1],
                        &mut terms,
                    )?;
                }
                offset += t_count * kr;
            }
        }
        let total = weighted_total(&mut g, &terms)?;
        let grads = worker_grads(&g, &bound, store, total, opts.want_grads)?;

        let mut per_level = vec![0.0; levels_total];
        let mut term_iter = terms.iter();
        for _ in 0..b {
            let mut lv = 0usize;
            for spec in specs {
                let t_count = spec.schedule.t_count;
                for t in (1..=t_count).rev() {
                    let &(w, term) = term_iter.next().unwrap();
                    per_level[lv + t - 1] += w * g.value(term).data[0].to_f64();
                }
                lv += t_count;
            }
        }
        let denoise_sum: f64 = terms
            .iter()
            .map(|&(w, term)| w * g.value(term).data[0].to_f64())
            .sum();
        Ok(WorkerOut {
            denoise: denoise_sum,
            flow: 0.0,
            ce: 0.0,
            per_level,
            text_tokens: 0,
            image_tokens: image_tokens * b,
            grads,
        })
    });
    reduce(store, outs, batch.len(), opts.want_grads, false)
}

/// Joint discrete/continuous loss: next-token cross-entropy on the text
/// prefix plus the denoising loss on the image chunks, with the discrete
/// term reweighted by the token-count ratio λ.
pub fn loss_kaleido<R: Real>(
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    schedule: &GammaSchedule,
    batch: &[(Vec<usize>, Trajectory<R>)],
    opts: &LossOpts,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    let weights = effective_weights(schedule, opts)?;
    let k = cfg.tokens_per_level;
    let c = cfg.channels;
    let t_count = schedule.t_count;
    let text_base = (t_count + 1) as f64;

    let max_len = batch
        .iter()
        .map(|(ids, _)| ids.len() + t_count * k)
        .max()
        .unwrap_or(1);
    let ranges = split_ranges(batch.len(), opts.num_threads, max_len);
    let outs = parallel::map_indexed(&ranges, opts.num_threads, |_, range| {
        // Per-sample layouts differ in text length; stack with varied blocks.
        let mut chunks = Vec::new();
        let mut tokens: Vec<R> = Vec::new();
        let mut text_ids = Vec::new();
        let mut masks = Vec::new();
        let mut sample_offsets = Vec::new();
        let mut offset = 0usize;
        for i in range.clone() {
            let (ids, traj) = &batch[i];
            check_traj(traj, schedule, k, c)?;
            let mut sample_chunks = Vec::new();
            if !ids.is_empty() {
                sample_chunks.push(ChunkDescriptor::text(text_base, ids.len()));
                text_ids.extend_from_slice(ids);
            }
            for t in (1..=t_count).rev() {
                sample_chunks.push(ChunkDescriptor::image(t as f64, cfg.grid, 1.0, 0));
            }
            stack_chunks(traj, t_count, &mut tokens);
            let sl = SeqLayout::new(sample_chunks.clone());
            let l = sl.total_len();
            masks.push((
                build_mask_for_layout(&sl, Variant::Dart).matrix.to_vec(),
                l,
            ));
            sample_offsets.push((offset, ids.len()));
            offset += l;
            chunks.extend(sample_chunks);
        }
        let layout = SeqLayout::new(chunks);
        let mask_refs: Vec<(&[bool], usize)> =
            masks.iter().map(|(m, l)| (m.as_slice(), *l)).collect();
        let mask = block_diag(&mask_refs);
        let n_img_rows = tokens.len() / c;

        let mut g = Graph::new();
        let mut bound = Bound::new(store, opts.want_grads);
        let input = SeqInput {
            layout,
            image_tokens: Tensor::new(vec![n_img_rows, c], tokens)?,
            text_ids,
        };
        let out = forward_full(&mut g, &mut bound, store, cfg, mask, &input, None)?;

        let mut terms = Vec::new();
        for (s, i) in range.clone().enumerate() {
            let (ids, traj) = &batch[i];
            let (base, n_text) = sample_offsets[s];
            let img_base = base + n_text;
            for t in (1..=t_count).rev() {
                let start = img_base + (t_count - t) * k;
                denoise_term(
                    &mut g,
                    out.v,
                    (start..start + k).collect(),
                    traj.x_at(t),
                    &traj.x0,
                    schedule.gamma[t - 1],
                    weights[t - 1],
                    &mut terms,
                )?;
            }
            let _ = ids;
        }
        let denoise_total = weighted_total(&mut g, &terms)?;

        // Next-token prediction: text-logit row p predicts id p+1 within its
        // own sample. Text logits rows follow sample order already.
        let mut logit_rows = Vec::new();
        let mut targets = Vec::new();
        let mut text_row_base = 0usize;
        for i in range.clone() {
            let ids = &batch[i].0;
            if ids.len() >= 2 {
                logit_rows.extend(text_row_base..text_row_base + ids.len() - 1);
                targets.extend_from_slice(&ids[1..]);
            }
            text_row_base += ids.len();
        }
        let supervised = targets.len();
        let (ce_node, total) = if supervised > 0 {
            let logits = out.text_logits.ok_or_else(|| {
                CoreError::Config("kaleido model must expose text logits".into())
            })?;
            let picked = g.gather_rows(logits, Rc::new(logit_rows))?;
            let logp = g.log_softmax(picked)?;
            let ce = g.nll_rows(logp, Rc::new(targets))?;
            // λ·CE with λ = counts ratio collapses to (Σ per-token ce)/K;
            // the mean node times supervised/K is exactly that sum.
            let scaled = g.scale(ce, R::from_f64(supervised as f64 / k as f64));
            let total = g.add(denoise_total, scaled)?;
            (Some(ce), total)
        } else {
            (None, denoise_total)
        };
        let grads = worker_grads(&g, &bound, store, total, opts.want_grads)?;

        let mut per_level = vec![0.0; t_count];
        for (ti, &(w, term)) in terms.iter().enumerate() {
            let t = t_count - (ti % t_count);
            per_level[t - 1] += w * g.value(term).data[0].to_f64();
        }
        let denoise_sum: f64 = terms
            .iter()
            .map(|&(w, term)| w * g.value(term).data[0].to_f64())
            .sum();
        Ok(WorkerOut {
            denoise: denoise_sum,
            flow: 0.0,
            // Summed CE over this worker's supervised tokens.
            ce: ce_node
                .map(|n| g.value(n).data[0].to_f64() * supervised as f64)
                .unwrap_or(0.0),
            per_level,
            text_tokens: supervised,
            image_tokens: range.len() * k,
            grads,
        })
    });
    reduce(store, outs, batch.len(), opts.want_grads, true)
}

/// Markovian single-level baseline: one uniformly drawn level per sample,
/// the model sees one chunk only.
pub fn loss_markov_baseline<R: Real>(
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    markov: &MarkovSchedule,
    batch: &[Tensor<R>],
    conditions: &[Condition],
    opts: &LossOpts,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    let weights = if let Some(w) = &opts.weights_override {
        w.clone()
    } else {
        opts.weighting.markov_weights(markov)
    };
    let k = cfg.tokens_per_level;
    let c = cfg.channels;
    let t_count = markov.t_count;

    let ranges = split_ranges(batch.len(), opts.num_threads, k);
    let outs = parallel::map_indexed(&ranges, opts.num_threads, |_, range| {
        let b = range.len();
        let mut chunks = Vec::with_capacity(b);
        let mut tokens: Vec<R> = Vec::with_capacity(b * k * c);
        let mut drawn = Vec::with_capacity(b);
        for i in range.clone() {
            let x0 = &batch[i];
            if x0.shape != vec![k, c] {
                return Err(CoreError::Shape(format!(
                    "x0 shape {:?}, expected [{}, {}]",
                    x0.shape, k, c
                )));
            }
            let mut r = rng::substream(&[opts.seed, stream::BATCH, i as u64]);
            let t = 1 + rng::uniform_usize(&mut r, t_count);
            let alpha_bar = markov.alpha_bar[t - 1];
            let eps: Vec<R> = rng::normal_vec(&mut r, k * c);
            let x_t: Vec<R> = x0
                .data
                .iter()
                .zip(&eps)
                .map(|(&x, &e)| {
                    R::from_f64(alpha_bar.sqrt()) * x + R::from_f64((1.0 - alpha_bar).sqrt()) * e
                })
                .collect();
            chunks.push(ChunkDescriptor::image(t as f64, cfg.grid, 1.0, 0));
            tokens.extend_from_slice(&x_t);
            drawn.push((t, x_t));
        }
        // One chunk per sample; the block-diagonal mask is full attention
        // within each chunk.
        let full_chunk = vec![true; k * k];
        let mask = block_diag(&vec![(full_chunk.as_slice(), k); b]);
        let cond_rows = cond_rows_for_batch(cfg, conditions, range, k)?;
        let layout = SeqLayout::new(chunks);

        let mut g = Graph::new();
        let mut bound = Bound::new(store, opts.want_grads);
        let input = SeqInput {
            layout,
            image_tokens: Tensor::new(vec![b * k, c], tokens)?,
            text_ids: vec![],
        };
        let out = forward_full(&mut g, &mut bound, store, cfg, mask, &input, cond_rows)?;

        let mut terms = Vec::with_capacity(b);
        let mut per_level = vec![0.0; t_count];
        for (s, i) in range.clone().enumerate() {
            let (t, x_t) = &drawn[s];
            let anchor = Tensor::new(vec![k, c], x_t.clone())?;
            denoise_term(
                &mut g,
                out.v,
                (s * k..s * k + k).collect(),
                &anchor,
                &batch[i],
                markov.alpha_bar[*t - 1],
                weights[*t - 1],
                &mut terms,
            )?;
        }
        let total = weighted_total(&mut g, &terms)?;
        let grads = worker_grads(&g, &bound, store, total, opts.want_grads)?;
        for (s, &(w, term)) in terms.iter().enumerate() {
            let (t, _) = &drawn[s];
            per_level[*t - 1] += w * g.value(term).data[0].to_f64();
        }
        let denoise_sum: f64 = terms
            .iter()
            .map(|&(w, term)| w * g.value(term).data[0].to_f64())
            .sum();
        Ok(WorkerOut {
            denoise: denoise_sum,
            flow: 0.0,
            ce: 0.0,
            per_level,
            text_tokens: 0,
            image_tokens: b * k,
            grads,
        })
    });
    reduce(store, outs, batch.len(), opts.want_grads, false)
}


#[cfg(test)]
mod decomposition_tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::noising::corrupt;
    use crate::rng;
    use crate::schedule::{cosine_markov, markov_to_gamma};

    #[test]
    fn matryoshka_two_res_total_is_the_sum_of_per_resolution_losses() {
        // 2x2 and 4x4 grids jointly; the reported total must equal the sum
        // of the per-resolution weighted terms computed from the same
        // forward pass.
        let mut cfg = ModelConfig::grid_model(1, 4, 4, 1, 2, 24, 1).unwrap();
        cfg.channels = 1;
        let mut store: ParamStore<f64> = init_params(&cfg, 19).unwrap();
        let mut r = rng::substream(&[960]);
        for v in &mut store.get_mut("head.w").data {
            *v = rng::normal_f64(&mut r) * 0.3;
        }
        let specs = vec![
            ResSpec {
                schedule: markov_to_gamma(&cosine_markov(2).unwrap()).unwrap(),
                grid: (2, 2),
                pos_scale: 1.0,
            },
            ResSpec {
                schedule: markov_to_gamma(&cosine_markov(1).unwrap()).unwrap(),
                grid: (4, 4),
                pos_scale: 2.0,
            },
        ];
        let batch: Vec<Vec<crate::noising::Trajectory<f64>>> = (0..2)
            .map(|i| {
                let low = Tensor::new(vec![4, 1], rng::normal_vec(&mut r, 4)).unwrap();
                let high = Tensor::new(vec![16, 1], rng::normal_vec(&mut r, 16)).unwrap();
                vec![
                    corrupt(&low, &specs[0].schedule, 970 + i),
                    corrupt(&high, &specs[1].schedule, 980 + i),
                ]
            })
            .collect();
        let opts = LossOpts {
            weighting: Weighting::SnrPlusOne,
            ..Default::default()
        };
        let got = loss_matryoshka(&store, &cfg, &specs, &batch, &[], &opts).unwrap();
        // per_level holds [res0 levels..., res1 levels...]; their sum is the
        // decomposition into the two per-resolution losses.
        let res0: f64 = got.report.per_level[..2].iter().sum();
        let res1: f64 = got.report.per_level[2..].iter().sum();
        assert!((got.report.total - (res0 + res1)).abs() < 1e-6);
        assert!(res0 > 0.0 && res1 > 0.0);
    }
}
