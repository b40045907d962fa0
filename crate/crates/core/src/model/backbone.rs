//! Transformer forward passes: full-sequence with an attention mask for
//! training, and cache-extending incremental decoding for generation. Both
//! paths run the same block code; the only difference is where keys and
//! values come from.
//!
//! The full-sequence path takes a raw visibility matrix, so a whole batch
//! can be stacked into one graph under a block-diagonal mask. Conditioning
//! is resolved to one class-embedding row per position for the same reason.

use std::rc::Rc;

use crate::error::{CoreError, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::real::Real;
use crate::tensor::Tensor;

use super::mask::{build_mask_for_layout, ChunkKind, SeqLayout};
use super::params::ParamStore;
use super::rope::rope_tables;
use super::{Conditioning, ModelConfig};

/// Conditioning input for one generation or sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Condition {
    None,
    /// Class id; the row one past the last class is the learned null class.
    Class(usize),
    /// The null-class pathway used for guidance.
    NullClass,
}

impl Condition {
    /// Class-embedding row for this condition, validated against the config.
    pub fn embed_row(&self, cfg: &ModelConfig) -> Result<Option<usize>> {
        match (&cfg.conditioning, self) {
            (Conditioning::ClassAdaln { num_classes }, Condition::Class(id)) => {
                if *id >= *num_classes {
                    return Err(CoreError::Config(format!(
                        "class id {} out of range {}",
                        id, num_classes
                    )));
                }
                Ok(Some(*id))
            }
            (Conditioning::ClassAdaln { num_classes }, Condition::NullClass) => {
                Ok(Some(*num_classes))
            }
            (Conditioning::ClassAdaln { .. }, Condition::None) => Err(CoreError::Config(
                "class-conditioned model needs a class or the null class".into(),
            )),
            (_, Condition::Class(_)) | (_, Condition::NullClass) => Err(CoreError::Config(
                "class condition on a model without class embedding".into(),
            )),
            _ => Ok(None),
        }
    }

    /// The same condition repeated over `m` positions.
    pub fn rows(&self, cfg: &ModelConfig, m: usize) -> Result<Option<Rc<Vec<usize>>>> {
        Ok(self.embed_row(cfg)?.map(|row| Rc::new(vec![row; m])))
    }
}

/// Tokens for the chunks of a layout, in layout order.
#[derive(Debug, Clone)]
pub struct SeqInput<R: Real> {
    pub layout: SeqLayout,
    /// Continuous tokens of every image chunk, concatenated `[n_img, C]`.
    pub image_tokens: Tensor<R>,
    /// Discrete ids of every text chunk, concatenated.
    pub text_ids: Vec<usize>,
}

pub struct ForwardOutput {
    /// Per-position v-prediction `[L, C]`.
    pub v: NodeId,
    /// Pre-head hidden state `[L, hidden]`.
    pub context: NodeId,
    /// Next-token logits at text positions `[n_text, vocab]`, when the model
    /// has a discrete head.
    pub text_logits: Option<NodeId>,
}

/// Lazy binding of store parameters into a graph. Binding the same name
/// twice returns the same node, so weight reuse accumulates gradients.
pub struct Bound {
    nodes: Vec<Option<NodeId>>,
    trainable: bool,
}

impl Bound {
    pub fn new<R: Real>(store: &ParamStore<R>, trainable: bool) -> Self {
        Self {
            nodes: vec![None; store.len()],
            trainable,
        }
    }

    /// Bind a store entry to an existing node. Verification suites use this
    /// to route selected parameters through externally created leaves.
    pub fn bind_existing(&mut self, store_idx: usize, node: NodeId) {
        self.nodes[store_idx] = Some(node);
    }

    pub fn node<R: Real>(
        &mut self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        name: &str,
    ) -> NodeId {
        let idx = store.index_of(name);
        if let Some(id) = self.nodes[idx] {
            return id;
        }
        let t = store.get(name).clone();
        let id = if self.trainable {
            g.param(t)
        } else {
            g.input(t)
        };
        self.nodes[idx] = Some(id);
        id
    }

    /// Add this graph's parameter gradients into `out`, indexed like the
    /// store entries. Missing gradients (unused parameters) contribute zero.
    pub fn accumulate_grads<R: Real>(
        &self,
        store: &ParamStore<R>,
        grads: &Gradients<R>,
        out: &mut [Vec<f64>],
    ) {
        for (idx, node) in self.nodes.iter().enumerate() {
            let Some(id) = node else { continue };
            let Some(gr) = grads.get(*id) else { continue };
            let slot = &mut out[idx];
            if slot.is_empty() {
                slot.resize(store.entry(idx).1.numel(), 0.0);
            }
            for (o, &v) in slot.iter_mut().zip(gr) {
                *o += v.to_f64();
            }
        }
    }
}

/// Per-layer key/value history for incremental decoding. Capacity is
/// preallocated to the full sequence length; appends are monotone and cached
/// prefixes are never recomputed.
pub struct KVCache<R: Real> {
    pub capacity: usize,
    pub len: usize,
    hidden: usize,
    layers: Vec<LayerKV<R>>,
}

struct LayerKV<R: Real> {
    k: Vec<R>,
    v: Vec<R>,
}

impl<R: Real> KVCache<R> {
    pub fn new(cfg: &ModelConfig, capacity: usize) -> Self {
        let layers = (0..cfg.num_layers)
            .map(|_| LayerKV {
                k: vec![R::ZERO; capacity * cfg.hidden],
                v: vec![R::ZERO; capacity * cfg.hidden],
            })
            .collect();
        Self {
            capacity,
            len: 0,
            hidden: cfg.hidden,
            layers,
        }
    }

    fn append(&mut self, layer: usize, k_rows: &[R], v_rows: &[R]) {
        let h = self.hidden;
        let off = self.len * h;
        self.layers[layer].k[off..off + k_rows.len()].copy_from_slice(k_rows);
        self.layers[layer].v[off..off + v_rows.len()].copy_from_slice(v_rows);
    }

    fn prev_k(&self, layer: usize) -> &[R] {
        &self.layers[layer].k[..self.len * self.hidden]
    }

    fn prev_v(&self, layer: usize) -> &[R] {
        &self.layers[layer].v[..self.len * self.hidden]
    }
}

enum AttnMode<'c, R: Real> {
    Full {
        mask: Rc<Vec<bool>>,
    },
    Cached {
        cache: &'c mut KVCache<R>,
        ext_mask: Rc<Vec<bool>>,
    },
}

struct Ctx<'a, R: Real> {
    g: &'a mut Graph<R>,
    bound: &'a mut Bound,
    store: &'a ParamStore<R>,
    cfg: &'a ModelConfig,
}

impl<'a, R: Real> Ctx<'a, R> {
    fn p(&mut self, name: &str) -> NodeId {
        self.bound.node(self.g, self.store, name)
    }
}

/// Full-sequence forward under an explicit visibility matrix (`m×m`, row
/// per query). `cond_rows` carries one class-embedding row per position.
pub fn forward_full<R: Real>(
    g: &mut Graph<R>,
    bound: &mut Bound,
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    mask: Rc<Vec<bool>>,
    input: &SeqInput<R>,
    cond_rows: Option<Rc<Vec<usize>>>,
) -> Result<ForwardOutput> {
    let m = input.layout.total_len();
    if mask.len() != m * m {
        return Err(CoreError::Shape(format!(
            "mask has {} entries, layout wants {}",
            mask.len(),
            m * m
        )));
    }
    let mut ctx = Ctx {
        g,
        bound,
        store,
        cfg,
    };
    run(&mut ctx, input, cond_rows, AttnMode::Full { mask })
}

/// Extend a cache with the chunks of `input.layout` and return outputs for
/// the new positions. Cached positions are fully visible to new ones; the
/// extension itself uses its own layout mask.
pub fn forward_extend<R: Real>(
    g: &mut Graph<R>,
    bound: &mut Bound,
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    cache: &mut KVCache<R>,
    input: &SeqInput<R>,
    condition: Condition,
) -> Result<ForwardOutput> {
    let m = input.layout.total_len();
    if cache.len + m > cache.capacity {
        return Err(CoreError::Cache(format!(
            "capacity {} exceeded: {} + {}",
            cache.capacity, cache.len, m
        )));
    }
    let ext_mask = build_mask_for_layout(&input.layout, cfg.variant).matrix;
    let cond_rows = condition.rows(cfg, m)?;
    let mut ctx = Ctx {
        g,
        bound,
        store,
        cfg,
    };
    run(&mut ctx, input, cond_rows, AttnMode::Cached { cache, ext_mask })
}

fn embed_sequence<R: Real>(ctx: &mut Ctx<'_, R>, input: &SeqInput<R>) -> Result<NodeId> {
    let cfg = ctx.cfg;
    // Contiguous runs of same-kind chunks embed in one shot.
    let mut parts = Vec::new();
    let mut img_off = 0usize;
    let mut text_off = 0usize;
    let mut i = 0;
    let chunks = &input.layout.chunks;
    while i < chunks.len() {
        let kind = chunks[i].kind;
        let mut len = 0;
        while i < chunks.len() && chunks[i].kind == kind {
            len += chunks[i].len;
            i += 1;
        }
        match kind {
            ChunkKind::Image => {
                let (n_img, ch) = input.image_tokens.dims2()?;
                if ch != cfg.channels || img_off + len > n_img {
                    return Err(CoreError::Shape(format!(
                        "image tokens {}x{} do not cover layout",
                        n_img, ch
                    )));
                }
                let rows: Vec<R> =
                    input.image_tokens.data[img_off * ch..(img_off + len) * ch].to_vec();
                let toks = ctx.g.input(Tensor::new(vec![len, ch], rows)?);
                let w = ctx.p("embed.w");
                let b = ctx.p("embed.b");
                let e = ctx.g.matmul(toks, w)?;
                parts.push(ctx.g.add_row(e, b)?);
                img_off += len;
            }
            ChunkKind::Text => {
                if !matches!(cfg.conditioning, Conditioning::TokenEmbed { .. }) {
                    return Err(CoreError::Config(
                        "text chunk without token-embed conditioning".into(),
                    ));
                }
                if text_off + len > input.text_ids.len() {
                    return Err(CoreError::Shape("text ids do not cover layout".into()));
                }
                let ids = input.text_ids[text_off..text_off + len].to_vec();
                let table = ctx.p("text.embed");
                parts.push(ctx.g.gather_rows(table, Rc::new(ids))?);
                text_off += len;
            }
        }
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        ctx.g.concat_rows(&parts)
    }
}

fn run<R: Real>(
    ctx: &mut Ctx<'_, R>,
    input: &SeqInput<R>,
    cond_rows: Option<Rc<Vec<usize>>>,
    mut mode: AttnMode<'_, R>,
) -> Result<ForwardOutput> {
    let cfg = ctx.cfg;
    cfg.validate()?;
    let positions = input.layout.positions();
    let m = positions.len();

    let mut x = embed_sequence(ctx, input)?;

    // Per-position conditioning matrix for adaptive layer norm.
    let cond_e = match (&cfg.conditioning, &cond_rows) {
        (Conditioning::ClassAdaln { num_classes }, Some(rows)) => {
            if rows.len() != m {
                return Err(CoreError::Shape(format!(
                    "{} condition rows for {} positions",
                    rows.len(),
                    m
                )));
            }
            if rows.iter().any(|&r| r > *num_classes) {
                return Err(CoreError::Config("condition row out of range".into()));
            }
            let table = ctx.p("cond.class_embed");
            Some(ctx.g.gather_rows(table, rows.clone())?)
        }
        (Conditioning::ClassAdaln { .. }, None) => {
            return Err(CoreError::Config(
                "class-conditioned model needs condition rows".into(),
            ));
        }
        (_, Some(_)) => {
            return Err(CoreError::Config(
                "condition rows on a model without class embedding".into(),
            ));
        }
        _ => None,
    };

    let (cos, sin) = rope_tables::<R>(cfg, &positions);
    let (cos, sin) = (Rc::new(cos), Rc::new(sin));
    let d = cfg.head_dim();
    let inv_sqrt_d = R::from_f64(1.0 / (d as f64).sqrt());

    for layer in 0..cfg.num_layers {
        let prefix = format!("layers.{layer}");

        // Modulation matrices: (shift, scale, gate) × (attention, ffn),
        // one row per position.
        let mods = if let Some(e) = cond_e {
            let w = ctx.p(&format!("{prefix}.adaln.w"));
            let b = ctx.p(&format!("{prefix}.adaln.b"));
            let mv = ctx.g.matmul(e, w)?;
            let mv = ctx.g.add_row(mv, b)?;
            let h = cfg.hidden;
            let mut six = Vec::with_capacity(6);
            for j in 0..6 {
                six.push(ctx.g.slice_cols(mv, j * h, h)?);
            }
            Some(six)
        } else {
            None
        };

        // Attention sublayer.
        let gain = ctx.p(&format!("{prefix}.attn.norm.gain"));
        let mut hn = ctx.g.rmsnorm(x, gain)?;
        if let Some(mods) = &mods {
            let scaled = ctx.g.mul(hn, mods[1])?;
            hn = ctx.g.add(hn, scaled)?;
            hn = ctx.g.add(hn, mods[0])?;
        }

        let wq = ctx.p(&format!("{prefix}.attn.wq"));
        let wk = ctx.p(&format!("{prefix}.attn.wk"));
        let wv = ctx.p(&format!("{prefix}.attn.wv"));
        let q = ctx.g.matmul(hn, wq)?;
        let k = ctx.g.matmul(hn, wk)?;
        let v = ctx.g.matmul(hn, wv)?;

        let (qg, kg) = if cfg.use_qk_norm {
            (
                Some(ctx.p(&format!("{prefix}.attn.q_gain"))),
                Some(ctx.p(&format!("{prefix}.attn.k_gain"))),
            )
        } else {
            (None, None)
        };

        let mut k_rot_heads = Vec::with_capacity(cfg.num_heads);
        let mut head_outs = Vec::with_capacity(cfg.num_heads);
        // Cached K/V for this layer, materialized once as graph inputs.
        let prev = match &mode {
            AttnMode::Cached { cache, .. } if cache.len > 0 => {
                let pk = ctx.g.input(Tensor::new(
                    vec![cache.len, cfg.hidden],
                    cache.prev_k(layer).to_vec(),
                )?);
                let pv = ctx.g.input(Tensor::new(
                    vec![cache.len, cfg.hidden],
                    cache.prev_v(layer).to_vec(),
                )?);
                Some((pk, pv, cache.len))
            }
            _ => None,
        };

        let attn_mask: Rc<Vec<bool>> = match &mode {
            AttnMode::Full { mask } => mask.clone(),
            AttnMode::Cached { ext_mask, .. } => {
                let prev_len = prev.map(|(_, _, l)| l).unwrap_or(0);
                let total = prev_len + m;
                let mut full = vec![true; m * total];
                for q_i in 0..m {
                    for k_i in 0..m {
                        full[q_i * total + prev_len + k_i] = ext_mask[q_i * m + k_i];
                    }
                }
                Rc::new(full)
            }
        };

        for head in 0..cfg.num_heads {
            let mut qh = ctx.g.slice_cols(q, head * d, d)?;
            let mut kh = ctx.g.slice_cols(k, head * d, d)?;
            let vh = ctx.g.slice_cols(v, head * d, d)?;
            if let (Some(qg), Some(kg)) = (qg, kg) {
                qh = ctx.g.rmsnorm(qh, qg)?;
                kh = ctx.g.rmsnorm(kh, kg)?;
            }
            qh = ctx.g.rope(qh, cos.clone(), sin.clone())?;
            kh = ctx.g.rope(kh, cos.clone(), sin.clone())?;
            k_rot_heads.push(kh);

            let (keys, vals) = if let Some((pk, pv, _)) = prev {
                let pkh = ctx.g.slice_cols(pk, head * d, d)?;
                let pvh = ctx.g.slice_cols(pv, head * d, d)?;
                (
                    ctx.g.concat_rows(&[pkh, kh])?,
                    ctx.g.concat_rows(&[pvh, vh])?,
                )
            } else {
                (kh, vh)
            };

            let scores = ctx.g.matmul_nt(qh, keys)?;
            let scaled = ctx.g.scale(scores, inv_sqrt_d);
            let probs = ctx.g.masked_softmax(scaled, attn_mask.clone())?;
            head_outs.push(ctx.g.matmul(probs, vals)?);
        }

        if let AttnMode::Cached { cache, .. } = &mut mode {
            // Rotated keys and raw values for the new rows enter the cache.
            let k_all = ctx.g.concat_cols(&k_rot_heads)?;
            let k_vals = ctx.g.value(k_all).data.clone();
            let v_vals = ctx.g.value(v).data.clone();
            cache.append(layer, &k_vals, &v_vals);
        }

        let merged = ctx.g.concat_cols(&head_outs)?;
        let wo = ctx.p(&format!("{prefix}.attn.wo"));
        let mut attn_out = ctx.g.matmul(merged, wo)?;
        if let Some(mods) = &mods {
            attn_out = ctx.g.mul(attn_out, mods[2])?;
        }
        x = ctx.g.add(x, attn_out)?;

        // Feed-forward sublayer.
        let gain = ctx.p(&format!("{prefix}.ffn.norm.gain"));
        let mut hn = ctx.g.rmsnorm(x, gain)?;
        if let Some(mods) = &mods {
            let scaled = ctx.g.mul(hn, mods[4])?;
            hn = ctx.g.add(hn, scaled)?;
            hn = ctx.g.add(hn, mods[3])?;
        }
        let wg = ctx.p(&format!("{prefix}.ffn.w_gate"));
        let wu = ctx.p(&format!("{prefix}.ffn.w_up"));
        let wd = ctx.p(&format!("{prefix}.ffn.w_down"));
        let gated = ctx.g.matmul(hn, wg)?;
        let gated = ctx.g.silu(gated);
        let up = ctx.g.matmul(hn, wu)?;
        let prod = ctx.g.mul(gated, up)?;
        let mut ffn_out = ctx.g.matmul(prod, wd)?;
        if let Some(mods) = &mods {
            ffn_out = ctx.g.mul(ffn_out, mods[5])?;
        }
        x = ctx.g.add(x, ffn_out)?;
    }

    let gain = ctx.p("final.norm.gain");
    let context = ctx.g.rmsnorm(x, gain)?;
    let hw = ctx.p("head.w");
    let hb = ctx.p("head.b");
    let v_out = ctx.g.matmul(context, hw)?;
    let v_out = ctx.g.add_row(v_out, hb)?;

    // Discrete next-token logits at text positions.
    let text_logits = if matches!(cfg.conditioning, Conditioning::TokenEmbed { .. }) {
        let mut rows = Vec::new();
        let mut off = 0;
        for c in &input.layout.chunks {
            if c.kind == ChunkKind::Text {
                rows.extend(off..off + c.len);
            }
            off += c.len;
        }
        if rows.is_empty() {
            None
        } else {
            let picked = ctx.g.gather_rows(context, Rc::new(rows))?;
            let w = ctx.p("text.head.w");
            let b = ctx.p("text.head.b");
            let logits = ctx.g.matmul(picked, w)?;
            Some(ctx.g.add_row(logits, b)?)
        }
    } else {
        None
    };

    // When extending, account for the new rows exactly once.
    if let AttnMode::Cached { cache, .. } = &mut mode {
        cache.len += m;
    }

    Ok(ForwardOutput {
        v: v_out,
        context,
        text_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::model::mask::build_mask;
    use crate::model::params::init_params;
    use crate::model::Variant;
    use crate::rng;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::point_model(3, 3, 24, 2);
        cfg.tokens_per_level = 2;
        cfg.grid = (1, 2);
        cfg
    }

    fn rand_tokens(cfg: &ModelConfig, layout: &SeqLayout, key: u64) -> Tensor<f64> {
        let n = layout.total_len();
        let mut r = rng::substream(&[key]);
        Tensor::new(
            vec![n, cfg.channels],
            rng::normal_vec(&mut r, n * cfg.channels),
        )
        .unwrap()
    }

    fn full_output(cfg: &ModelConfig, store: &ParamStore<f64>, tokens: &Tensor<f64>) -> Tensor<f64> {
        let layout = SeqLayout::for_model(cfg);
        let mask = build_mask(cfg);
        let mut g = Graph::new();
        let mut bound = Bound::new(store, false);
        let input = SeqInput {
            layout,
            image_tokens: tokens.clone(),
            text_ids: vec![],
        };
        let out = forward_full(&mut g, &mut bound, store, cfg, mask.matrix, &input, None).unwrap();
        g.value(out.v).clone()
    }

    #[test]
    fn zero_init_head_gives_zero_v() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> = init_params(&cfg, 3).unwrap();
        let layout = SeqLayout::for_model(&cfg);
        let toks = rand_tokens(&cfg, &layout, 5);
        let v = full_output(&cfg, &store, &toks);
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mask_enforces_causality() {
        // Perturbing a later chunk leaves earlier outputs unchanged.
        let cfg = tiny_cfg();
        let mut store: ParamStore<f64> = init_params(&cfg, 11).unwrap();
        // Non-trivial head so outputs depend on inputs.
        let mut r = rng::substream(&[77]);
        for v in &mut store.get_mut("head.w").data {
            *v = rng::normal_f64(&mut r) * 0.3;
        }
        let layout = SeqLayout::for_model(&cfg);
        let toks = rand_tokens(&cfg, &layout, 6);
        let base = full_output(&cfg, &store, &toks);

        let k = cfg.tokens_per_level;
        let mut perturbed = toks.clone();
        // Chunk index 2 (level 1) starts at position 2*k.
        for v in &mut perturbed.data[2 * k * cfg.channels..] {
            *v += 1.5;
        }
        let out = full_output(&cfg, &store, &perturbed);
        for p in 0..2 * k {
            for c in 0..cfg.channels {
                let i = p * cfg.channels + c;
                assert!(
                    (base.data[i] - out.data[i]).abs() < 1e-6,
                    "position {} changed",
                    p
                );
            }
        }
        // Later outputs do change.
        let tail: f64 = (2 * k * cfg.channels..base.data.len())
            .map(|i| (base.data[i] - out.data[i]).abs())
            .sum();
        assert!(tail > 1e-6);
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        let mut cfg = tiny_cfg();
        cfg.num_layers = 1;
        cfg.t_levels = 2;
        let store: ParamStore<f64> = init_params(&cfg, 21).unwrap();
        // Check a spread of parameters, including the zero-initialized head.
        let names = ["embed.w", "layers.0.attn.wq", "layers.0.ffn.w_gate", "head.w"];
        let layout = SeqLayout::for_model(&cfg);
        let toks = rand_tokens(&cfg, &layout, 30);
        let mask = build_mask(&cfg);

        let inputs: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).clone()).collect();
        let rel = gradcheck::max_rel_err(&inputs, 32, 31, |g, ins| {
            let mut store2 = store.clone();
            for (n, t) in names.iter().zip(ins) {
                // Splice the checked parameters into the store as graph nodes.
                *store2.get_mut(n) = g.value(*t).clone();
            }
            let mut bound = Bound::new(&store2, false);
            for (n, t) in names.iter().zip(ins) {
                bound.bind_existing(store2.index_of(n), *t);
            }
            let input = SeqInput {
                layout: layout.clone(),
                image_tokens: toks.clone(),
                text_ids: vec![],
            };
            let out = forward_full(g, &mut bound, &store2, &cfg, mask.matrix.clone(), &input, None)?;
            let target = Rc::new(Tensor::full(g.shape(out.v), 0.35));
            g.mse_to_const(out.v, target)
        });
        assert!(rel < 1e-3, "rel err {}", rel);
    }

    #[test]
    fn kv_cache_matches_full_recompute() {
        let mut cfg = tiny_cfg();
        cfg.variant = Variant::Dart;
        let mut store: ParamStore<f64> = init_params(&cfg, 41).unwrap();
        let mut r = rng::substream(&[99]);
        for v in &mut store.get_mut("head.w").data {
            *v = rng::normal_f64(&mut r) * 0.3;
        }
        let layout = SeqLayout::for_model(&cfg);
        let toks = rand_tokens(&cfg, &layout, 50);
        let full_v = full_output(&cfg, &store, &toks);

        // Incremental: one chunk at a time.
        let mut cache = KVCache::new(&cfg, layout.total_len());
        let mut got = Vec::new();
        let k = cfg.tokens_per_level;
        for (ci, chunk) in layout.chunks.iter().enumerate() {
            let rows =
                toks.data[ci * k * cfg.channels..(ci + 1) * k * cfg.channels].to_vec();
            let mut g = Graph::new();
            let mut bound = Bound::new(&store, false);
            let input = SeqInput {
                layout: SeqLayout::new(vec![chunk.clone()]),
                image_tokens: Tensor::new(vec![k, cfg.channels], rows).unwrap(),
                text_ids: vec![],
            };
            let out = forward_extend(
                &mut g, &mut bound, &store, &cfg, &mut cache, &input, Condition::None,
            )
            .unwrap();
            got.extend_from_slice(&g.value(out.v).data);
        }
        assert_eq!(cache.len, layout.total_len());
        let maxdiff = full_v
            .data
            .iter()
            .zip(&got)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(maxdiff < 1e-9, "cache vs full: {}", maxdiff);
    }

    #[test]
    fn cache_overflow_errors() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> = init_params(&cfg, 61).unwrap();
        let mut cache = KVCache::new(&cfg, 1);
        let layout = SeqLayout::for_model(&cfg);
        let toks = rand_tokens(&cfg, &layout, 62);
        let mut g = Graph::new();
        let mut bound = Bound::new(&store, false);
        let input = SeqInput {
            layout,
            image_tokens: toks,
            text_ids: vec![],
        };
        let err = forward_extend(
            &mut g, &mut bound, &store, &cfg, &mut cache, &input, Condition::None,
        );
        assert!(matches!(err, Err(CoreError::Cache(_))));
    }

    #[test]
    fn per_position_conditions_differ_per_row() {
        // Two positions with different class rows produce different outputs
        // for identical tokens.
        let mut cfg = tiny_cfg();
        cfg.t_levels = 1;
        cfg.conditioning = Conditioning::ClassAdaln { num_classes: 2 };
        let mut store: ParamStore<f64> = init_params(&cfg, 71).unwrap();
        let mut r = rng::substream(&[72]);
        for name in ["head.w", "layers.0.adaln.w", "layers.1.adaln.w"] {
            for v in &mut store.get_mut(name).data {
                *v = rng::normal_f64(&mut r) * 0.3;
            }
        }
        let layout = SeqLayout::for_model(&cfg);
        let mask = Rc::new(vec![true, false, false, true]); // block diagonal
        let toks = Tensor::new(vec![2, cfg.channels], vec![0.3; 2 * cfg.channels]).unwrap();
        let run_with = |rows: Vec<usize>| -> Tensor<f64> {
            let mut g = Graph::new();
            let mut bound = Bound::new(&store, false);
            let input = SeqInput {
                layout: layout.clone(),
                image_tokens: toks.clone(),
                text_ids: vec![],
            };
            let out = forward_full(
                &mut g, &mut bound, &store, &cfg,
                mask.clone(), &input, Some(Rc::new(rows)),
            )
            .unwrap();
            g.value(out.v).clone()
        };
        let same = run_with(vec![0, 0]);
        let mixed = run_with(vec![0, 1]);
        // First row has the same class in both runs.
        for c in 0..cfg.channels {
            assert!((same.data[c] - mixed.data[c]).abs() < 1e-12);
        }
        // Second row differs.
        let diff: f64 = (0..cfg.channels)
            .map(|c| (same.data[cfg.channels + c] - mixed.data[cfg.channels + c]).abs())
            .sum();
        assert!(diff > 1e-9);
    }
}
