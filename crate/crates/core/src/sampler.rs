//! Generation: level-by-level mean prediction and renoising, token-level
//! autoregressive decoding, flow-matching refinement, classifier-free
//! guidance, and cache-backed incremental decoding.
//!
//! Every noise draw is keyed by (seed, purpose, sample, level, token), so a
//! generation is bit-reproducible and the cached and full-recompute decoders
//! consume identical randomness.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::model::{
    build_mask_for_layout, flow_velocity, forward_extend, forward_full, Bound, ChunkDescriptor,
    Condition, KVCache, ModelConfig, ParamStore, SeqInput, SeqLayout, Variant,
};
use crate::parallel;
use crate::real::Real;
use crate::rng::{self, stream};
use crate::schedule::GammaSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceSchedule {
    #[default]
    Constant,
    Linear,
}

/// Guidance scale and its per-level schedule. The linear schedule ramps from
/// 1 at the noisiest level to the configured scale at the final level.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub scale: f64,
    pub schedule: GuidanceSchedule,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            scale: 1.0,
            schedule: GuidanceSchedule::Constant,
        }
    }
}

impl GuidanceSpec {
    pub fn constant(scale: f64) -> Self {
        Self {
            scale,
            schedule: GuidanceSchedule::Constant,
        }
    }

    /// w_t for level t of a T-level schedule.
    pub fn weight_at(&self, t: usize, t_count: usize) -> f64 {
        let w = match self.schedule {
            GuidanceSchedule::Constant => self.scale,
            GuidanceSchedule::Linear => {
                if t_count <= 1 {
                    self.scale
                } else {
                    let frac = (t_count - t) as f64 / (t_count - 1) as f64;
                    1.0 + (self.scale - 1.0) * frac
                }
            }
        };
        debug_assert!(w >= 0.0);
        w
    }
}

/// Guided prediction `uncond + w·(cond − uncond)`. The w = 1 and w = 0 ends
/// return the respective inputs bitwise.
pub fn apply_cfg<R: Real>(cond: &Tensor<R>, uncond: &Tensor<R>, w: f64) -> Tensor<R> {
    assert_eq!(cond.shape, uncond.shape);
    if w == 1.0 {
        return cond.clone();
    }
    if w == 0.0 {
        return uncond.clone();
    }
    let wr = R::from_f64(w);
    let data = cond
        .data
        .iter()
        .zip(&uncond.data)
        .map(|(&c, &u)| u + wr * (c - u))
        .collect();
    Tensor {
        shape: cond.shape.clone(),
        data,
    }
}

#[derive(Debug, Clone)]
pub struct SamplerOpts {
    pub guidance: GuidanceSpec,
    pub seed: u64,
    pub fm_steps: usize,
    /// Softmax temperature for discrete decoding; 0 means argmax.
    pub temperature: f64,
    pub max_text_len: usize,
    /// Incremental decoding with a key/value cache; disabling recomputes the
    /// full sequence at every step and serves as the equivalence oracle.
    pub use_cache: bool,
    pub num_threads: usize,
}

impl Default for SamplerOpts {
    fn default() -> Self {
        Self {
            guidance: GuidanceSpec::default(),
            seed: 0,
            fm_steps: 100,
            temperature: 1.0,
            max_text_len: 64,
            use_cache: true,
            num_threads: 1,
        }
    }
}

/// One decoding stream: either a key/value cache or a growing sequence that
/// is recomputed in full at every extension.
enum Decoder<'m, R: Real> {
    Cached {
        cache: KVCache<R>,
        store: &'m ParamStore<R>,
        cfg: &'m ModelConfig,
    },
    Full {
        chunks: Vec<ChunkDescriptor>,
        tokens: Vec<R>,
        text_ids: Vec<usize>,
        store: &'m ParamStore<R>,
        cfg: &'m ModelConfig,
    },
}

struct StepOut<R: Real> {
    /// v-prediction rows for the new positions.
    v: Tensor<R>,
    /// Context rows for the new positions.
    context: Tensor<R>,
    /// Logits at new text positions.
    text_logits: Option<Tensor<R>>,
}

impl<'m, R: Real> Decoder<'m, R> {
    fn new(store: &'m ParamStore<R>, cfg: &'m ModelConfig, capacity: usize, cached: bool) -> Self {
        if cached {
            Decoder::Cached {
                cache: KVCache::new(cfg, capacity),
                store,
                cfg,
            }
        } else {
            Decoder::Full {
                chunks: Vec::new(),
                tokens: Vec::new(),
                text_ids: Vec::new(),
                store,
                cfg,
            }
        }
    }

    fn extend(
        &mut self,
        chunk: ChunkDescriptor,
        image_tokens: Option<&Tensor<R>>,
        text_ids: &[usize],
        condition: Condition,
    ) -> Result<StepOut<R>> {
        match self {
            Decoder::Cached { cache, store, cfg } => {
                let layout = SeqLayout::new(vec![chunk]);
                let input = SeqInput {
                    layout,
                    image_tokens: image_tokens
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(&[0, cfg.channels])),
                    text_ids: text_ids.to_vec(),
                };
                let mut g = Graph::new();
                let mut bound = Bound::new(*store, false);
                let out = forward_extend(&mut g, &mut bound, store, cfg, cache, &input, condition)?;
                Ok(StepOut {
                    v: g.value(out.v).clone(),
                    context: g.value(out.context).clone(),
                    text_logits: out.text_logits.map(|id| g.value(id).clone()),
                })
            }
            Decoder::Full {
                chunks,
                tokens,
                text_ids: all_text,
                store,
                cfg,
            } => {
                let new_len = chunk.len;
                let new_text = chunk.kind == crate::model::ChunkKind::Text;
                chunks.push(chunk);
                if let Some(t) = image_tokens {
                    tokens.extend_from_slice(&t.data);
                }
                all_text.extend_from_slice(text_ids);
                let layout = SeqLayout::new(chunks.clone());
                let mask = build_mask_for_layout(&layout, cfg.variant);
                let n_img = tokens.len() / cfg.channels;
                let input = SeqInput {
                    layout: layout.clone(),
                    image_tokens: Tensor::new(vec![n_img, cfg.channels], tokens.clone())?,
                    text_ids: all_text.clone(),
                };
                let mut g = Graph::new();
                let mut bound = Bound::new(*store, false);
                let cond_rows = condition.rows(cfg, layout.total_len())?;
                let out = forward_full(
                    &mut g, &mut bound, store, cfg, mask.matrix, &input, cond_rows,
                )?;
                let total = layout.total_len();
                let v_all = g.value(out.v);
                let c_all = g.value(out.context);
                let take_rows = |t: &Tensor<R>, from: usize, n: usize| -> Tensor<R> {
                    let w = t.shape[1];
                    Tensor {
                        shape: vec![n, w],
                        data: t.data[from * w..(from + n) * w].to_vec(),
                    }
                };
                let text_logits = if new_text {
                    out.text_logits.map(|id| {
                        let lt = g.value(id);
                        let n_text_total = lt.shape[0];
                        take_rows(lt, n_text_total - new_len, new_len)
                    })
                } else {
                    None
                };
                Ok(StepOut {
                    v: take_rows(v_all, total - new_len, new_len),
                    context: take_rows(c_all, total - new_len, new_len),
                    text_logits,
                })
            }
        }
    }
}

fn reconstruct<R: Real>(v: &Tensor<R>, anchor: &Tensor<R>, gamma: f64) -> Tensor<R> {
    let alpha = R::from_f64(gamma.sqrt());
    let sigma = R::from_f64((1.0 - gamma).sqrt());
    let data = anchor
        .data
        .iter()
        .zip(&v.data)
        .map(|(&x, &vv)| alpha * x - sigma * vv)
        .collect();
    Tensor {
        shape: anchor.shape.clone(),
        data,
    }
}

fn init_noise<R: Real>(cfg: &ModelConfig, seed: u64, sample: u64, res: u64) -> Tensor<R> {
    let k = cfg.tokens_per_level;
    let mut data = Vec::with_capacity(k * cfg.channels);
    for tok in 0..k {
        let mut r = rng::substream(&[seed, stream::INIT_NOISE, sample, res, tok as u64]);
        data.extend(rng::normal_vec::<R>(&mut r, cfg.channels));
    }
    Tensor {
        shape: vec![k, cfg.channels],
        data,
    }
}

fn renoise_token<R: Real>(
    x0_hat: &[R],
    gamma_prev: f64,
    keys: &[u64],
) -> Vec<R> {
    if gamma_prev >= 1.0 {
        return x0_hat.to_vec();
    }
    let a = R::from_f64(gamma_prev.sqrt());
    let b = R::from_f64((1.0 - gamma_prev).sqrt());
    let mut r = rng::substream(keys);
    x0_hat
        .iter()
        .map(|&m| a * m + b * rng::normal::<R>(&mut r))
        .collect()
}

/// Double decoder: conditional plus null-class pathway when guidance needs
/// both.
struct Guided<'m, R: Real> {
    cond_dec: Decoder<'m, R>,
    uncond_dec: Option<Decoder<'m, R>>,
    condition: Condition,
    guidance: GuidanceSpec,
}

impl<'m, R: Real> Guided<'m, R> {
    fn new(
        store: &'m ParamStore<R>,
        cfg: &'m ModelConfig,
        capacity: usize,
        condition: Condition,
        guidance: GuidanceSpec,
        use_cache: bool,
    ) -> Self {
        let needs_uncond = matches!(condition, Condition::Class(_))
            && !(guidance.schedule == GuidanceSchedule::Constant && guidance.scale == 1.0);
        Self {
            cond_dec: Decoder::new(store, cfg, capacity, use_cache),
            uncond_dec: needs_uncond.then(|| Decoder::new(store, cfg, capacity, use_cache)),
            condition,
            guidance,
        }
    }

    /// Extend both pathways; returns (guided x̂_0, conditional context).
    fn extend_level(
        &mut self,
        chunk: ChunkDescriptor,
        tokens: &Tensor<R>,
        gamma_t: f64,
        t: usize,
        t_count: usize,
    ) -> Result<(Tensor<R>, Tensor<R>)> {
        let out_c = self
            .cond_dec
            .extend(chunk.clone(), Some(tokens), &[], self.condition)?;
        let x0_c = reconstruct(&out_c.v, tokens, gamma_t);
        let x0 = if let Some(dec) = &mut self.uncond_dec {
            let out_u = dec.extend(chunk, Some(tokens), &[], Condition::NullClass)?;
            let x0_u = reconstruct(&out_u.v, tokens, gamma_t);
            apply_cfg(&x0_c, &x0_u, self.guidance.weight_at(t, t_count))
        } else {
            x0_c
        };
        Ok((x0, out_c.context))
    }
}

/// Level-by-level generation: predict the clean mean from everything seen,
/// renoise it to the next level, and emit the final mean untouched.
pub fn sample_dart<R: Real>(
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    schedule: &GammaSchedule,
    condition: Condition,
    opts: &SamplerOpts,
    num: usize,
) -> Result<Vec<Tensor<R>>> {
    sample_levels(store, cfg, schedule, condition, opts, num, None)
}

/// Flow-refined generation: every Gaussian step is pushed along the learned
/// velocity field with `fm_steps` Euler steps.
pub fn sample_dart_fm<R: Real>(
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    schedule: &GammaSchedule,
    condition: Condition,
    opts: &SamplerOpts,
    num: usize,
) -> Result<Vec<Tensor<R>>> {
    if cfg.variant != Variant::DartFm {
        return Err(CoreError::Config("fm sampling needs the fm variant".into()));
    }
    sample_levels(store, cfg, schedule, condition, opts, num, Some(opts.fm_steps))
}

fn sample_levels<R: Real>(
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    schedule: &GammaSchedule,
    condition: Condition,
    opts: &SamplerOpts,
    num: usize,
    flow_steps: Option<usize>,
) -> Result<Vec<Tensor<R>>> {
    if cfg.t_levels != schedule.t_count {
        return Err(CoreError::Config("schedule/model level mismatch".into()));
    }
    let k = cfg.tokens_per_level;
    let ids: Vec<usize> = (0..num).collect();
    let outs = parallel::map_indexed(&ids, opts.num_threads, |_, &n| {
        let t_count = schedule.t_count;
        let mut guided = Guided::new(
            store,
            cfg,
            t_count * k,
            condition,
            opts.guidance,
            opts.use_cache,
        );
        let mut x_t = init_noise::<R>(cfg, opts.seed, n as u64, 0);
        let mut x0_final: Option<Tensor<R>> = None;
        for t in (1..=t_count).rev() {
            let chunk = ChunkDescriptor::image(t as f64, cfg.grid, 1.0, 0);
            let (x0_hat, context) =
                guided.extend_level(chunk, &x_t, schedule.gamma[t - 1], t, t_count)?;
            let gamma_prev = schedule.gamma_at(t - 1);
            let mut next = Vec::with_capacity(k * cfg.channels);
            for tok in 0..k {
                let row = &x0_hat.data[tok * cfg.channels..(tok + 1) * cfg.channels];
                next.extend(renoise_token(
                    row,
                    gamma_prev,
                    &[opts.seed, stream::RENOISE, n as u64, 0, t as u64, tok as u64],
                ));
            }
            let mut stepped = Tensor::new(vec![k, cfg.channels], next)?;
            if let Some(fm_steps) = flow_steps {
                if fm_steps > 0 {
                    stepped = euler_refine(store, cfg, &stepped, &context, fm_steps)?;
                }
            }
            if t == 1 {
                x0_final = Some(stepped);
            } else {
                x_t = stepped;
            }
        }
        Ok(x0_final.expect("at least one level"))
    });
    outs.into_iter().collect()
}

fn euler_refine<R: Real>(
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    start: &Tensor<R>,
    context: &Tensor<R>,
    fm_steps: usize,
) -> Result<Tensor<R>> {
    let dt = 1.0 / fm_steps as f64;
    let mut state = start.clone();
    for j in 0..fm_steps {
        let tau = j as f64 * dt;
        let mut g = Graph::new();
        let mut bound = Bound::new(store, false);
        let s = g.input(state.clone());
        let c = g.input(context.clone());
        let vel = flow_velocity(&mut g, &mut bound, store, cfg, s, c, tau)?;
        let v = g.value(vel);
        for (sv, &vv) in state.data.iter_mut().zip(&v.data) {
            *sv += R::from_f64(dt) * vv;
        }
    }
    Ok(state)
}

pub struct ArSample<R: Real> {
    pub output: Tensor<R>,
    /// Incremental decode calls past the initial chunk.
    pub decode_calls: usize,
}

/// Token-level autoregressive generation: within each level, predict one
/// clean token, renoise it, append it, continue. Exactly K·T decode calls.
pub fn sample_dart_ar<R: Real>(
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    schedule: &GammaSchedule,
    condition: Condition,
    opts: &SamplerOpts,
    num: usize,
) -> Result<Vec<ArSample<R>>> {
    if cfg.variant != Variant::DartAr {
        return Err(CoreError::Config("ar sampling needs the ar variant".into()));
    }
    if cfg.t_levels != schedule.t_count {
        return Err(CoreError::Config("schedule/model level mismatch".into()));
    }
    let k = cfg.tokens_per_level;
    let c = cfg.channels;
    let t_count = schedule.t_count;
    let ids: Vec<usize> = (0..num).collect();
    let outs = parallel::map_indexed(&ids, opts.num_threads, |_, &n| {
        let capacity = t_count * k + k;
        let mut guided = Guided::new(
            store,
            cfg,
            capacity,
            condition,
            opts.guidance,
            opts.use_cache,
        );
        let x_init = init_noise::<R>(cfg, opts.seed, n as u64, 0);
        // Prefill the noisiest chunk; the last output row predicts (T, 1).
        let chunk_t = ChunkDescriptor::image(t_count as f64, cfg.grid, 1.0, 0);
        let mut last = guided.prefill(chunk_t, &x_init)?;

        let mut decode_calls = 0usize;
        let mut x_level = x_init; // chunk at the current level t
        let mut emitted = vec![R::ZERO; k * c]; // clean chunk being built
        for t in (1..=t_count).rev() {
            let w_t = guided.guidance.weight_at(t, t_count);
            let gamma_t = schedule.gamma[t - 1];
            let gamma_prev = schedule.gamma_at(t - 1);
            let mut next_level = vec![R::ZERO; k * c];
            for tok in 0..k {
                // Guided clean prediction anchored on x_t[tok].
                let anchor = Tensor::new(
                    vec![1, c],
                    x_level.data[tok * c..(tok + 1) * c].to_vec(),
                )?;
                let x0_hat = guided.guided_x0(&last, &anchor, gamma_t, w_t);
                if t == 1 {
                    emitted[tok * c..(tok + 1) * c].copy_from_slice(&x0_hat.data);
                }
                // Renoise toward level t−1 and append as the next input.
                let renoised = renoise_token(
                    &x0_hat.data,
                    gamma_prev,
                    &[opts.seed, stream::RENOISE, n as u64, 0, t as u64, tok as u64],
                );
                next_level[tok * c..(tok + 1) * c].copy_from_slice(&renoised);
                let level_pos = (t - 1) as f64;
                let desc = ChunkDescriptor::image_single(level_pos, cfg.grid, 1.0, 0, tok);
                let tok_tensor = Tensor::new(vec![1, c], renoised)?;
                last = guided.append_token(desc, &tok_tensor)?;
                decode_calls += 1;
            }
            x_level = Tensor::new(vec![k, c], next_level)?;
        }
        Ok(ArSample {
            output: Tensor::new(vec![k, c], emitted)?,
            decode_calls,
        })
    });
    outs.into_iter().collect()
}

impl<'m, R: Real> Guided<'m, R> {
    fn prefill(&mut self, chunk: ChunkDescriptor, tokens: &Tensor<R>) -> Result<LastOut<R>> {
        let out_c = self
            .cond_dec
            .extend(chunk.clone(), Some(tokens), &[], self.condition)?;
        let last_c = last_row(&out_c.v);
        let last_u = if let Some(dec) = &mut self.uncond_dec {
            let out_u = dec.extend(chunk, Some(tokens), &[], Condition::NullClass)?;
            Some(last_row(&out_u.v))
        } else {
            None
        };
        Ok(LastOut {
            v_cond: last_c,
            v_uncond: last_u,
        })
    }

    fn append_token(&mut self, chunk: ChunkDescriptor, token: &Tensor<R>) -> Result<LastOut<R>> {
        self.prefill(chunk, token)
    }

    fn guided_x0(
        &self,
        last: &LastOut<R>,
        anchor: &Tensor<R>,
        gamma_t: f64,
        w_t: f64,
    ) -> Tensor<R> {
        let x0_c = reconstruct(&last.v_cond, anchor, gamma_t);
        match &last.v_uncond {
            Some(vu) => {
                let x0_u = reconstruct(vu, anchor, gamma_t);
                apply_cfg(&x0_c, &x0_u, w_t)
            }
            None => x0_c,
        }
    }
}

struct LastOut<R: Real> {
    v_cond: Tensor<R>,
    v_uncond: Option<Tensor<R>>,
}

fn last_row<R: Real>(t: &Tensor<R>) -> Tensor<R> {
    let (m, w) = (t.shape[0], t.shape[1]);
    Tensor {
        shape: vec![1, w],
        data: t.data[(m - 1) * w..].to_vec(),
    }
}

/// Per-resolution output of a multi-resolution generation.
pub struct MatryoshkaSample<R: Real> {
    pub outputs: Vec<Tensor<R>>,
}

/// Generate the base resolution to completion, keep its chunks visible, then
/// run each higher resolution conditioned on the full history.
pub fn sample_matryoshka<R: Real>(
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    specs: &[crate::losses::ResSpec],
    condition: Condition,
    opts: &SamplerOpts,
    num: usize,
) -> Result<Vec<MatryoshkaSample<R>>> {
    if specs.is_empty() {
        return Err(CoreError::InvalidArgument("no resolutions".into()));
    }
    let capacity: usize = specs
        .iter()
        .map(|s| s.schedule.t_count * s.grid.0 * s.grid.1)
        .sum();
    let ids: Vec<usize> = (0..num).collect();
    let outs = parallel::map_indexed(&ids, opts.num_threads, |_, &n| {
        let mut guided = Guided::new(
            store,
            cfg,
            capacity,
            condition,
            opts.guidance,
            opts.use_cache,
        );
        let mut outputs = Vec::with_capacity(specs.len());
        for (ri, spec) in specs.iter().enumerate() {
            let k = spec.grid.0 * spec.grid.1;
            let t_count = spec.schedule.t_count;
            let mut x_t = {
                let mut data = Vec::with_capacity(k * cfg.channels);
                for tok in 0..k {
                    let mut r = rng::substream(&[
                        opts.seed,
                        stream::INIT_NOISE,
                        n as u64,
                        ri as u64,
                        tok as u64,
                    ]);
                    data.extend(rng::normal_vec::<R>(&mut r, cfg.channels));
                }
                Tensor::new(vec![k, cfg.channels], data)?
            };
            let mut emitted: Option<Tensor<R>> = None;
            for t in (1..=t_count).rev() {
                let chunk = ChunkDescriptor::image(t as f64, spec.grid, spec.pos_scale, ri);
                let (x0_hat, _) =
                    guided.extend_level(chunk, &x_t, spec.schedule.gamma[t - 1], t, t_count)?;
                let gamma_prev = spec.schedule.gamma_at(t - 1);
                let mut next = Vec::with_capacity(k * cfg.channels);
                for tok in 0..k {
                    let row = &x0_hat.data[tok * cfg.channels..(tok + 1) * cfg.channels];
                    next.extend(renoise_token(
                        row,
                        gamma_prev,
                        &[
                            opts.seed,
                            stream::RENOISE,
                            n as u64,
                            ri as u64,
                            t as u64,
                            tok as u64,
                        ],
                    ));
                }
                let stepped = Tensor::new(vec![k, cfg.channels], next)?;
                if t == 1 {
                    emitted = Some(stepped);
                } else {
                    x_t = stepped;
                }
            }
            outputs.push(emitted.expect("levels"));
        }
        Ok(MatryoshkaSample { outputs })
    });
    outs.into_iter().collect()
}

pub struct KaleidoSample<R: Real> {
    /// Sampled ids including the start token; ends with the end token unless
    /// truncated.
    pub tokens: Vec<usize>,
    pub truncated: bool,
    pub image: Tensor<R>,
}

pub const BOS: usize = 0;
pub const EOS: usize = 1;

/// Sample a discrete prefix (temperature softmax, argmax at zero), then run
/// the image level loop conditioned on it.
pub fn sample_kaleido<R: Real>(
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    schedule: &GammaSchedule,
    prompt: Option<&[usize]>,
    opts: &SamplerOpts,
    num: usize,
) -> Result<Vec<KaleidoSample<R>>> {
    let crate::model::Conditioning::TokenEmbed { vocab, .. } = cfg.conditioning else {
        return Err(CoreError::Config(
            "kaleido sampling needs token-embed conditioning".into(),
        ));
    };
    if opts.temperature < 0.0 {
        return Err(CoreError::InvalidArgument("negative temperature".into()));
    }
    let k = cfg.tokens_per_level;
    let t_count = schedule.t_count;
    let text_base = (t_count + 1) as f64;
    let ids: Vec<usize> = (0..num).collect();
    let outs = parallel::map_indexed(&ids, opts.num_threads, |_, &n| {
        let capacity = opts.max_text_len + 1 + t_count * k;
        let mut dec = Decoder::new(store, cfg, capacity, opts.use_cache);
        let mut tokens = vec![BOS];
        if let Some(p) = prompt {
            tokens.extend_from_slice(p);
        }
        // Feed the prefix; its last logits row seeds the continuation.
        let first = dec.extend(
            ChunkDescriptor::text_at(text_base, 0, tokens.len()),
            None,
            &tokens,
            Condition::None,
        )?;
        let mut logits = first
            .text_logits
            .ok_or_else(|| CoreError::Config("no text logits".into()))?;
        let mut truncated = false;
        loop {
            if *tokens.last().unwrap() == EOS && tokens.len() > 1 {
                break;
            }
            if tokens.len() >= opts.max_text_len {
                truncated = *tokens.last().unwrap() != EOS;
                break;
            }
            let row = last_row(&logits);
            let next = sample_token(
                &row.data,
                vocab,
                opts.temperature,
                &[opts.seed, stream::TOKEN_SAMPLE, n as u64, tokens.len() as u64],
            );
            let pos = tokens.len();
            tokens.push(next);
            // Every sampled token joins the prefix the image loop sees,
            // the end token included.
            let out = dec.extend(
                ChunkDescriptor::text_at(text_base, pos, 1),
                None,
                &[next],
                Condition::None,
            )?;
            if next == EOS {
                break;
            }
            logits = out
                .text_logits
                .ok_or_else(|| CoreError::Config("no text logits".into()))?;
        }

        // Image loop conditioned on the sampled prefix through attention.
        let mut x_t = init_noise::<R>(cfg, opts.seed, n as u64, 0);
        let mut emitted: Option<Tensor<R>> = None;
        for t in (1..=t_count).rev() {
            let chunk = ChunkDescriptor::image(t as f64, cfg.grid, 1.0, 0);
            let out = dec.extend(chunk, Some(&x_t), &[], Condition::None)?;
            let x0_hat = reconstruct(&out.v, &x_t, schedule.gamma[t - 1]);
            let gamma_prev = schedule.gamma_at(t - 1);
            let mut next = Vec::with_capacity(k * cfg.channels);
            for tok in 0..k {
                let row = &x0_hat.data[tok * cfg.channels..(tok + 1) * cfg.channels];
                next.extend(renoise_token(
                    row,
                    gamma_prev,
                    &[opts.seed, stream::RENOISE, n as u64, 0, t as u64, tok as u64],
                ));
            }
            let stepped = Tensor::new(vec![k, cfg.channels], next)?;
            if t == 1 {
                emitted = Some(stepped);
            } else {
                x_t = stepped;
            }
        }
        Ok(KaleidoSample {
            tokens,
            truncated,
            image: emitted.expect("levels"),
        })
    });
    outs.into_iter().collect()
}

/// Ancestral sampling for the single-level Markov baseline. The model is
/// trained on integer levels 1..T; when `steps` differs from T, a fresh
/// cosine schedule with `steps` levels drives the posterior updates and each
/// step places its chunk at the fractional level position T·t/steps.
pub fn sample_markov_baseline<R: Real>(
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    markov: &crate::schedule::MarkovSchedule,
    steps: usize,
    condition: Condition,
    opts: &SamplerOpts,
    num: usize,
) -> Result<Vec<Tensor<R>>> {
    if steps == 0 {
        return Err(CoreError::InvalidArgument("steps must be >= 1".into()));
    }
    let (schedule, positions) = if steps == markov.t_count {
        (
            markov.clone(),
            (1..=steps).map(|t| t as f64).collect::<Vec<_>>(),
        )
    } else {
        crate::schedule::cosine_markov_rescaled(steps, markov.t_count)?
    };
    let k = cfg.tokens_per_level;
    let ids: Vec<usize> = (0..num).collect();
    let outs = parallel::map_indexed(&ids, opts.num_threads, |_, &n| {
        let guided_w = |t: usize| opts.guidance.weight_at(t, steps);
        let mut x_t = init_noise::<R>(cfg, opts.seed, n as u64, 0);
        for t in (1..=steps).rev() {
            // Single-chunk forward at this (possibly fractional) level.
            let chunk = ChunkDescriptor::image(positions[t - 1], cfg.grid, 1.0, 0);
            let alpha_bar = schedule.alpha_bar_at(t);
            let run_path = |cond: Condition| -> Result<Tensor<R>> {
                let layout = SeqLayout::new(vec![chunk.clone()]);
                let mask = build_mask_for_layout(&layout, Variant::Dart);
                let cond_rows = cond.rows(cfg, layout.total_len())?;
                let mut g = Graph::new();
                let mut bound = Bound::new(store, false);
                let input = SeqInput {
                    layout,
                    image_tokens: x_t.clone(),
                    text_ids: vec![],
                };
                let out =
                    forward_full(&mut g, &mut bound, store, cfg, mask.matrix, &input, cond_rows)?;
                Ok(reconstruct(&g.value(out.v).clone(), &x_t, alpha_bar))
            };
            let x0_c = run_path(condition)?;
            let x0_hat = if matches!(condition, Condition::Class(_)) {
                let w = guided_w(t);
                if w == 1.0 {
                    x0_c
                } else {
                    let x0_u = run_path(Condition::NullClass)?;
                    apply_cfg(&x0_c, &x0_u, w)
                }
            } else {
                x0_c
            };
            // Posterior step toward level t−1.
            let ab_prev = schedule.alpha_bar_at(t - 1);
            let beta = 1.0 - alpha_bar / ab_prev;
            let denom = 1.0 - alpha_bar;
            let c0 = ab_prev.sqrt() * beta / denom;
            let c1 = (1.0 - beta).sqrt() * (1.0 - ab_prev) / denom;
            let var = (1.0 - ab_prev) / denom * beta;
            let mut next = Vec::with_capacity(k * cfg.channels);
            for tok in 0..k {
                let mut r = rng::substream(&[
                    opts.seed,
                    stream::RENOISE,
                    n as u64,
                    0,
                    t as u64,
                    tok as u64,
                ]);
                for c in 0..cfg.channels {
                    let i = tok * cfg.channels + c;
                    let mean = R::from_f64(c0) * x0_hat.data[i] + R::from_f64(c1) * x_t.data[i];
                    let v = if var > 0.0 {
                        mean + R::from_f64(var.sqrt()) * rng::normal::<R>(&mut r)
                    } else {
                        mean
                    };
                    next.push(v);
                }
            }
            x_t = Tensor::new(vec![k, cfg.channels], next)?;
        }
        Ok(x_t)
    });
    outs.into_iter().collect()
}

fn sample_token<R: Real>(logits: &[R], vocab: usize, temperature: f64, keys: &[u64]) -> usize {
    debug_assert_eq!(logits.len(), vocab);
    if temperature == 0.0 {
        let mut best = 0;
        for i in 1..vocab {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let maxv = logits
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let expd: Vec<f64> = logits
        .iter()
        .map(|v| ((v.to_f64() - maxv) / temperature).exp())
        .collect();
    let total: f64 = expd.iter().sum();
    let mut r = rng::substream(keys);
    let mut u = rng::uniform_f64(&mut r) * total;
    for (i, e) in expd.iter().enumerate() {
        u -= e;
        if u <= 0.0 {
            return i;
        }
    }
    vocab - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Conditioning};
    use crate::schedule::{cosine_markov, markov_to_gamma};

    fn toy_model(
        t: usize,
        k: usize,
        variant: Variant,
        seed: u64,
    ) -> (ModelConfig, GammaSchedule, ParamStore<f64>) {
        let mut cfg = ModelConfig::point_model(2, t, 24, 2);
        cfg.tokens_per_level = k;
        cfg.grid = (1, k);
        cfg.variant = variant;
        let schedule = markov_to_gamma(&cosine_markov(t).unwrap()).unwrap();
        let mut store: ParamStore<f64> = init_params(&cfg, seed).unwrap();
        // Give the head and, when present, the flow modulation some signal.
        let mut r = rng::substream(&[seed, 0xAB]);
        for v in &mut store.get_mut("head.w").data {
            *v = rng::normal_f64(&mut r) * 0.3;
        }
        if variant == Variant::DartFm {
            for name in ["flow.out.w", "flow.blocks.0.mod.w"] {
                for v in &mut store.get_mut(name).data {
                    *v = rng::normal_f64(&mut r) * 0.2;
                }
            }
        }
        (cfg, schedule, store)
    }

    #[test]
    fn cfg_identities() {
        let mut r = rng::substream(&[5]);
        let cond = Tensor::new(vec![2, 3], rng::normal_vec::<f32>(&mut r, 6)).unwrap();
        let uncond = Tensor::new(vec![2, 3], rng::normal_vec::<f32>(&mut r, 6)).unwrap();
        // w = 1 returns the conditional prediction bitwise.
        let g1 = apply_cfg(&cond, &uncond, 1.0);
        assert!(g1
            .data
            .iter()
            .zip(&cond.data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        // w = 0 returns the unconditional prediction.
        let g0 = apply_cfg(&cond, &uncond, 0.0);
        assert_eq!(g0.data, uncond.data);
        // cond == uncond is unchanged for any scale.
        let same = apply_cfg(&cond, &cond, 3.7);
        for (a, b) in same.data.iter().zip(&cond.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_guidance_ramps_from_one() {
        let spec = GuidanceSpec {
            scale: 4.0,
            schedule: GuidanceSchedule::Linear,
        };
        assert_eq!(spec.weight_at(8, 8), 1.0);
        assert_eq!(spec.weight_at(1, 8), 4.0);
        let mid = spec.weight_at(4, 8);
        assert!(mid > 1.0 && mid < 4.0);
        let c = GuidanceSpec::constant(2.0);
        assert_eq!(c.weight_at(8, 8), 2.0);
        assert_eq!(c.weight_at(1, 8), 2.0);
    }

    #[test]
    fn seed_determinism_is_bitwise() {
        let (cfg, schedule, store) = toy_model(3, 2, Variant::Dart, 1);
        let opts = SamplerOpts {
            seed: 9,
            ..Default::default()
        };
        let a = sample_dart(&store, &cfg, &schedule, Condition::None, &opts, 2).unwrap();
        let b = sample_dart(&store, &cfg, &schedule, Condition::None, &opts, 2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x
                .data
                .iter()
                .zip(&y.data)
                .all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let opts2 = SamplerOpts {
            seed: 10,
            ..Default::default()
        };
        let c = sample_dart(&store, &cfg, &schedule, Condition::None, &opts2, 1).unwrap();
        assert_ne!(a[0].data, c[0].data);
    }

    #[test]
    fn zero_flow_head_equals_plain_sampling() {
        let (mut cfg, schedule, mut store) = toy_model(3, 2, Variant::DartFm, 2);
        // Zero the flow output again: velocity identically zero.
        for name in ["flow.out.w", "flow.out.b"] {
            for v in &mut store.get_mut(name).data {
                *v = 0.0;
            }
        }
        let opts = SamplerOpts {
            seed: 4,
            fm_steps: 7,
            ..Default::default()
        };
        let fm = sample_dart_fm(&store, &cfg, &schedule, Condition::None, &opts, 2).unwrap();
        cfg.variant = Variant::Dart;
        let plain = sample_dart(&store, &cfg, &schedule, Condition::None, &opts, 2).unwrap();
        for (x, y) in fm.iter().zip(&plain) {
            assert!(x
                .data
                .iter()
                .zip(&y.data)
                .all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn fm_steps_zero_falls_back_to_plain_renoising() {
        let (cfg, schedule, store) = toy_model(2, 2, Variant::DartFm, 3);
        let opts = SamplerOpts {
            seed: 4,
            fm_steps: 0,
            ..Default::default()
        };
        let fm = sample_dart_fm(&store, &cfg, &schedule, Condition::None, &opts, 1).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.variant = Variant::Dart;
        let plain = sample_dart(&store, &cfg2, &schedule, Condition::None, &opts, 1).unwrap();
        assert_eq!(fm[0].data, plain[0].data);
    }

    #[test]
    fn k1_ar_matches_dart_with_shared_seeds() {
        let (cfg_ar, schedule, store) = toy_model(4, 1, Variant::DartAr, 5);
        let mut cfg_d = cfg_ar.clone();
        cfg_d.variant = Variant::Dart;
        let opts = SamplerOpts {
            seed: 11,
            ..Default::default()
        };
        let ar = sample_dart_ar(&store, &cfg_ar, &schedule, Condition::None, &opts, 2).unwrap();
        let d = sample_dart(&store, &cfg_d, &schedule, Condition::None, &opts, 2).unwrap();
        for (a, b) in ar.iter().zip(&d) {
            let diff = a.output.max_abs_diff(b);
            assert!(diff < 1e-9, "K=1 ar vs dart: {}", diff);
        }
    }

    #[test]
    fn ar_uses_exactly_k_times_t_decode_calls() {
        let (cfg, schedule, store) = toy_model(3, 2, Variant::DartAr, 6);
        let opts = SamplerOpts {
            seed: 2,
            ..Default::default()
        };
        let out = sample_dart_ar(&store, &cfg, &schedule, Condition::None, &opts, 1).unwrap();
        assert_eq!(out[0].decode_calls, 3 * 2);
    }

    #[test]
    fn cache_equals_full_recompute_dart() {
        let (cfg, schedule, store) = toy_model(3, 2, Variant::Dart, 7);
        let cached = SamplerOpts {
            seed: 13,
            use_cache: true,
            ..Default::default()
        };
        let full = SamplerOpts {
            use_cache: false,
            ..cached.clone()
        };
        let a = sample_dart(&store, &cfg, &schedule, Condition::None, &cached, 2).unwrap();
        let b = sample_dart(&store, &cfg, &schedule, Condition::None, &full, 2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.max_abs_diff(y) < 1e-9, "diff {}", x.max_abs_diff(y));
        }
    }

    #[test]
    fn cache_equals_full_recompute_ar_and_fm() {
        let (cfg, schedule, store) = toy_model(2, 3, Variant::DartAr, 8);
        let cached = SamplerOpts {
            seed: 14,
            use_cache: true,
            ..Default::default()
        };
        let full = SamplerOpts {
            use_cache: false,
            ..cached.clone()
        };
        let a = sample_dart_ar(&store, &cfg, &schedule, Condition::None, &cached, 1).unwrap();
        let b = sample_dart_ar(&store, &cfg, &schedule, Condition::None, &full, 1).unwrap();
        assert!(a[0].output.max_abs_diff(&b[0].output) < 1e-9);

        let (cfg, schedule, store) = toy_model(2, 2, Variant::DartFm, 9);
        let cached = SamplerOpts {
            seed: 15,
            fm_steps: 3,
            use_cache: true,
            ..Default::default()
        };
        let full = SamplerOpts {
            use_cache: false,
            ..cached.clone()
        };
        let a = sample_dart_fm(&store, &cfg, &schedule, Condition::None, &cached, 1).unwrap();
        let b = sample_dart_fm(&store, &cfg, &schedule, Condition::None, &full, 1).unwrap();
        assert!(a[0].max_abs_diff(&b[0]) < 1e-9);
    }

    #[test]
    fn matryoshka_runs_levels_and_matches_full_recompute() {
        let (cfg, schedule, store) = toy_model(2, 2, Variant::Dart, 10);
        let high = markov_to_gamma(&cosine_markov(1).unwrap()).unwrap();
        let specs = vec![
            crate::losses::ResSpec {
                schedule: schedule.clone(),
                grid: (1, 2),
                pos_scale: 1.0,
            },
            crate::losses::ResSpec {
                schedule: high,
                grid: (2, 2),
                pos_scale: 2.0,
            },
        ];
        let cached = SamplerOpts {
            seed: 16,
            use_cache: true,
            ..Default::default()
        };
        let full = SamplerOpts {
            use_cache: false,
            ..cached.clone()
        };
        let a = sample_matryoshka(&store, &cfg, &specs, Condition::None, &cached, 1).unwrap();
        let b = sample_matryoshka(&store, &cfg, &specs, Condition::None, &full, 1).unwrap();
        assert_eq!(a[0].outputs.len(), 2);
        assert_eq!(a[0].outputs[0].shape, vec![2, 2]);
        assert_eq!(a[0].outputs[1].shape, vec![4, 2]);
        for (x, y) in a[0].outputs.iter().zip(&b[0].outputs) {
            assert!(x.max_abs_diff(y) < 1e-9);
        }
        // Single resolution reduces to plain sampling.
        let single = vec![crate::losses::ResSpec {
            schedule: schedule.clone(),
            grid: (1, 2),
            pos_scale: 1.0,
        }];
        let m = sample_matryoshka(&store, &cfg, &single, Condition::None, &cached, 1).unwrap();
        let d = sample_dart(&store, &cfg, &schedule, Condition::None, &cached, 1).unwrap();
        assert!(m[0].outputs[0].max_abs_diff(&d[0]) < 1e-12);
    }

    #[test]
    fn guided_sampling_with_unit_scale_matches_single_path() {
        let mut cfg = ModelConfig::point_model(2, 2, 24, 1);
        cfg.conditioning = Conditioning::ClassAdaln { num_classes: 3 };
        let schedule = markov_to_gamma(&cosine_markov(2).unwrap()).unwrap();
        let mut store: ParamStore<f64> = init_params(&cfg, 11).unwrap();
        let mut r = rng::substream(&[12, 0xAB]);
        for name in ["head.w", "layers.0.adaln.w"] {
            for v in &mut store.get_mut(name).data {
                *v = rng::normal_f64(&mut r) * 0.2;
            }
        }
        let unit = SamplerOpts {
            seed: 3,
            guidance: GuidanceSpec::constant(1.0),
            ..Default::default()
        };
        let scaled = SamplerOpts {
            guidance: GuidanceSpec::constant(2.5),
            ..unit.clone()
        };
        let a = sample_dart(&store, &cfg, &schedule, Condition::Class(1), &unit, 1).unwrap();
        let b = sample_dart(&store, &cfg, &schedule, Condition::Class(1), &scaled, 1).unwrap();
        // Guidance does something.
        assert!(a[0].max_abs_diff(&b[0]) > 1e-9);
        // Cache equivalence holds under guidance too.
        let full = SamplerOpts {
            use_cache: false,
            ..scaled.clone()
        };
        let c = sample_dart(&store, &cfg, &schedule, Condition::Class(1), &full, 1).unwrap();
        assert!(b[0].max_abs_diff(&c[0]) < 1e-9);
    }

    #[test]
    fn kaleido_greedy_and_truncation() {
        let mut cfg = ModelConfig::point_model(1, 2, 24, 1);
        cfg.tokens_per_level = 2;
        cfg.grid = (1, 2);
        cfg.conditioning = Conditioning::TokenEmbed {
            vocab: 6,
            max_text_len: 5,
        };
        let schedule = markov_to_gamma(&cosine_markov(2).unwrap()).unwrap();
        let mut store: ParamStore<f64> = init_params(&cfg, 13).unwrap();
        let mut r = rng::substream(&[14, 0xAB]);
        for v in &mut store.get_mut("text.head.w").data {
            *v = rng::normal_f64(&mut r) * 0.5;
        }
        let opts = SamplerOpts {
            seed: 5,
            temperature: 0.0,
            max_text_len: 5,
            ..Default::default()
        };
        let out = sample_kaleido(&store, &cfg, &schedule, None, &opts, 1).unwrap();
        assert_eq!(out[0].tokens[0], BOS);
        assert!(out[0].tokens.len() <= 5 + 1);
        assert_eq!(out[0].image.shape, vec![2, 1]);
        // Greedy decoding is deterministic.
        let again = sample_kaleido(&store, &cfg, &schedule, None, &opts, 1).unwrap();
        assert_eq!(out[0].tokens, again[0].tokens);
        // Cache equivalence.
        let full = SamplerOpts {
            use_cache: false,
            ..opts.clone()
        };
        let f = sample_kaleido(&store, &cfg, &schedule, None, &full, 1).unwrap();
        assert_eq!(out[0].tokens, f[0].tokens);
        assert!(out[0].image.max_abs_diff(&f[0].image) < 1e-9);
    }

    #[test]
    fn single_level_model_is_one_shot() {
        let (cfg, schedule, store) = toy_model(1, 2, Variant::Dart, 15);
        let opts = SamplerOpts {
            seed: 21,
            ..Default::default()
        };
        let out = sample_dart(&store, &cfg, &schedule, Condition::None, &opts, 1).unwrap();
        assert_eq!(out[0].shape, vec![2, 2]);
        // γ_0 = 1: the emitted grid is the predicted mean of the only level.
        let x_t = init_noise::<f64>(&cfg, 21, 0, 0);
        let mut dec = Decoder::new(&store, &cfg, 2, true);
        let step = dec
            .extend(
                ChunkDescriptor::image(1.0, cfg.grid, 1.0, 0),
                Some(&x_t),
                &[],
                Condition::None,
            )
            .unwrap();
        let expect = reconstruct(&step.v, &x_t, schedule.gamma[0]);
        assert!(out[0].max_abs_diff(&expect) < 1e-12);
    }
}
