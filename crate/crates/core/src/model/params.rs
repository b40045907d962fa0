//! Flat named-tensor parameter store and the checkpoint format: a JSON
//! manifest `{name, shape, dtype, offset, length}` next to one raw
//! little-endian blob of concatenated tensors.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::rng::{self, stream};
use crate::tensor::Tensor;

use super::{Conditioning, ModelConfig, Variant};

#[derive(Debug, Clone)]
pub struct ParamStore<R: Real> {
    entries: Vec<(String, Tensor<R>)>,
    index: HashMap<String, usize>,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<R>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {}",
            name
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> &Tensor<R> {
        let idx = self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name));
        &self.entries[*idx].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<R> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name));
        &mut self.entries[idx].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.index[name]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: usize) -> (&str, &Tensor<R>) {
        (&self.entries[i].0, &self.entries[i].1)
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut Tensor<R> {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total scalar parameter count across the manifest.
    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the blob.
    offset: usize,
    /// Byte length.
    length: usize,
}

impl ParamStore<f32> {
    /// Write `<stem>.json` (manifest) and `<stem>.bin` (blob).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = Vec::with_capacity(self.entries.len());
        let mut blob: Vec<u8> = Vec::new();
        for (name, t) in &self.entries {
            let offset = blob.len();
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                dtype: "f32".to_string(),
                offset,
                length: blob.len() - offset,
            });
        }
        let mut mf = std::fs::File::create(dir.join(format!("{stem}.json")))?;
        mf.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        let mut bf = std::fs::File::create(dir.join(format!("{stem}.bin")))?;
        bf.write_all(&blob)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let manifest: Vec<ManifestEntry> =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let mut blob = Vec::new();
        std::fs::File::open(dir.join(format!("{stem}.bin")))?.read_to_end(&mut blob)?;
        let mut store = ParamStore::new();
        for e in manifest {
            if e.dtype != "f32" {
                return Err(CoreError::Checkpoint(format!(
                    "unsupported dtype {} for {}",
                    e.dtype, e.name
                )));
            }
            let count: usize = e.shape.iter().product();
            if e.length != count * 4 || e.offset + e.length > blob.len() {
                return Err(CoreError::Checkpoint(format!(
                    "manifest entry {} does not fit blob",
                    e.name
                )));
            }
            let data = blob[e.offset..e.offset + e.length]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            store.insert(&e.name, Tensor::new(e.shape, data)?);
        }
        Ok(store)
    }
}

fn fan_in_init<R: Real>(rng_key: &[u64], shape: &[usize]) -> Tensor<R> {
    let fan_in = shape[0].max(1);
    let std = 1.0 / (fan_in as f64).sqrt();
    let mut r = rng::substream(rng_key);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| R::from_f64(rng::normal_f64(&mut r) * std))
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Initialize the backbone parameters. Output head and adaptive-norm
/// modulation layers start at zero so the model is the identity map at
/// initialization; everything else uses fan-in-scaled Gaussians.
pub fn init_params<R: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<R>> {
    cfg.validate()?;
    let h = cfg.hidden;
    let f = cfg.ffn_inner();
    let d = cfg.head_dim();
    let mut s = ParamStore::new();
    let mut key = 0u64;
    let mut next_key = |tag: u64| {
        key += 1;
        vec![seed, stream::PARAM_INIT, tag, key]
    };

    s.insert("embed.w", fan_in_init(&next_key(1), &[cfg.channels, h]));
    s.insert("embed.b", Tensor::zeros(&[h]));

    match &cfg.conditioning {
        Conditioning::None => {}
        Conditioning::ClassAdaln { num_classes } => {
            s.insert(
                "cond.class_embed",
                fan_in_init(&next_key(2), &[num_classes + 1, h]),
            );
        }
        Conditioning::TokenEmbed { vocab, .. } => {
            s.insert("text.embed", fan_in_init(&next_key(3), &[*vocab, h]));
            // Zero-init head: uniform next-token distribution at start.
            s.insert("text.head.w", Tensor::zeros(&[h, *vocab]));
            s.insert("text.head.b", Tensor::zeros(&[*vocab]));
        }
    }

    let adaln = matches!(cfg.conditioning, Conditioning::ClassAdaln { .. });
    for i in 0..cfg.num_layers {
        let p = |n: &str| format!("layers.{i}.{n}");
        s.insert(&p("attn.norm.gain"), Tensor::full(&[h], R::ONE));
        s.insert(&p("attn.wq"), fan_in_init(&next_key(10), &[h, h]));
        s.insert(&p("attn.wk"), fan_in_init(&next_key(11), &[h, h]));
        s.insert(&p("attn.wv"), fan_in_init(&next_key(12), &[h, h]));
        s.insert(&p("attn.wo"), fan_in_init(&next_key(13), &[h, h]));
        if cfg.use_qk_norm {
            s.insert(&p("attn.q_gain"), Tensor::full(&[d], R::ONE));
            s.insert(&p("attn.k_gain"), Tensor::full(&[d], R::ONE));
        }
        s.insert(&p("ffn.norm.gain"), Tensor::full(&[h], R::ONE));
        s.insert(&p("ffn.w_gate"), fan_in_init(&next_key(14), &[h, f]));
        s.insert(&p("ffn.w_up"), fan_in_init(&next_key(15), &[h, f]));
        s.insert(&p("ffn.w_down"), fan_in_init(&next_key(16), &[f, h]));
        if adaln {
            s.insert(&p("adaln.w"), Tensor::zeros(&[h, 6 * h]));
            s.insert(&p("adaln.b"), Tensor::zeros(&[6 * h]));
        }
    }

    s.insert("final.norm.gain", Tensor::full(&[h], R::ONE));
    s.insert("head.w", Tensor::zeros(&[h, cfg.channels]));
    s.insert("head.b", Tensor::zeros(&[cfg.channels]));

    if cfg.variant == Variant::DartFm {
        super::flow::init_flow_params(cfg, seed, &mut s);
    }
    Ok(s)
}
