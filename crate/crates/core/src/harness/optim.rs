//! AdamW with warmup + cosine decay, global-norm gradient clipping, and an
//! exponential moving average of the weights.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::ParamStore;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Linear warmup to `lr`, then cosine decay to zero over the remaining steps.
pub fn lr_at(cfg: &OptimConfig, step: usize, warmup: usize, total: usize) -> f64 {
    if total == 0 {
        return cfg.lr;
    }
    if step < warmup {
        return cfg.lr * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return cfg.lr;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Scale gradients so the global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let mut ss = 0.0;
    for g in grads.iter() {
        for &v in g {
            ss += v * v;
        }
    }
    let norm = ss.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: usize,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let m = (0..store.len())
            .map(|i| vec![0.0; store.entry(i).1.numel()])
            .collect();
        let v = (0..store.len())
            .map(|i| vec![0.0; store.entry(i).1.numel()])
            .collect();
        Self { m, v, step: 0 }
    }

    /// One decoupled-weight-decay Adam step at learning rate `lr_t`.
    /// Empty gradient slots (parameters untouched this step) are skipped.
    pub fn apply(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &[Vec<f64>],
        cfg: &OptimConfig,
        lr_t: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..store.len() {
            if grads[i].is_empty() {
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut store.entry_mut(i).data;
            for j in 0..p.len() {
                let g = grads[i][j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let update = mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p[j] as f64;
                p[j] = (p[j] as f64 - lr_t * update) as f32;
            }
        }
    }

    /// Raw little-endian f64 blob next to a tiny JSON descriptor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut blob: Vec<u8> = Vec::new();
        for part in [&self.m, &self.v] {
            for vec in part {
                for v in vec {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let meta = serde_json::json!({
            "step": self.step,
            "lens": self.m.iter().map(|v| v.len()).collect::<Vec<_>>(),
            "dtype": "f64",
        });
        std::fs::write(dir.join("optim.json"), serde_json::to_string(&meta)?)?;
        let mut f = std::fs::File::create(dir.join("optim.bin"))?;
        f.write_all(&blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("optim.json"))?)?;
        let step = meta["step"]
            .as_u64()
            .ok_or_else(|| CoreError::Checkpoint("optim.json missing step".into()))?
            as usize;
        let lens: Vec<usize> = meta["lens"]
            .as_array()
            .ok_or_else(|| CoreError::Checkpoint("optim.json missing lens".into()))?
            .iter()
            .map(|v| v.as_u64().unwrap_or(0) as usize)
            .collect();
        let mut blob = Vec::new();
        std::fs::File::open(dir.join("optim.bin"))?.read_to_end(&mut blob)?;
        let total: usize = lens.iter().sum();
        if blob.len() != total * 2 * 8 {
            return Err(CoreError::Checkpoint("optim blob size mismatch".into()));
        }
        let mut vals = blob
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
        let mut read_part = |lens: &[usize]| -> Vec<Vec<f64>> {
            lens.iter()
                .map(|&n| (0..n).map(|_| vals.next().unwrap()).collect())
                .collect()
        };
        let m = read_part(&lens);
        let v = read_part(&lens);
        Ok(Self { m, v, step })
    }
}

/// ema ← decay·ema + (1−decay)·raw, in f32 exactly as written.
pub fn ema_update(ema: &mut ParamStore<f32>, raw: &ParamStore<f32>, decay: f32) {
    for i in 0..ema.len() {
        let r = raw.entry(i).1.data.clone();
        let e = &mut ema.entry_mut(i).data;
        for (ev, rv) in e.iter_mut().zip(r) {
            *ev = decay * *ev + (1.0 - decay) * rv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::rng;

    fn tiny_store() -> ParamStore<f32> {
        init_params(&ModelConfig::point_model(2, 2, 24, 1), 3).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut store = tiny_store();
        let before: Vec<Vec<f32>> = (0..store.len())
            .map(|i| store.entry(i).1.data.clone())
            .collect();
        let mut state = AdamState::new(&store);
        let grads: Vec<Vec<f64>> = (0..store.len())
            .map(|i| vec![0.5; store.entry(i).1.numel()])
            .collect();
        let cfg = OptimConfig::default();
        for _ in 0..3 {
            state.apply(&mut store, &grads, &cfg, 0.0);
        }
        for i in 0..store.len() {
            assert_eq!(store.entry(i).1.data, before[i]);
        }
    }

    #[test]
    fn clip_bounds_global_norm() {
        let mut rng = rng::substream(&[77]);
        let mut grads: Vec<Vec<f64>> = (0..4)
            .map(|_| rng::normal_vec(&mut rng, 50))
            .collect();
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= 3.0;
            }
        }
        let pre = clip_global_norm(&mut grads, 2.0);
        assert!(pre > 2.0);
        let post: f64 = grads
            .iter()
            .flat_map(|g| g.iter().map(|v| v * v))
            .sum::<f64>()
            .sqrt();
        assert!(post <= 2.0 + 1e-6, "post-clip norm {}", post);
        // Below the threshold nothing changes.
        let mut small = vec![vec![0.1, 0.2]];
        let pre = clip_global_norm(&mut small, 2.0);
        assert!(pre < 2.0);
        assert_eq!(small[0], vec![0.1, 0.2]);
    }

    #[test]
    fn ema_matches_exact_expression_two_steps() {
        let raw0 = tiny_store();
        let mut raw = raw0.clone();
        let mut ema = raw0.clone();
        let decay = 0.9999f32;
        // Step 1: move raw, update ema.
        for i in 0..raw.len() {
            for v in &mut raw.entry_mut(i).data {
                *v += 0.25;
            }
        }
        ema_update(&mut ema, &raw, decay);
        for i in 0..ema.len() {
            for (j, &e) in ema.entry(i).1.data.iter().enumerate() {
                let expect = decay * raw0.entry(i).1.data[j] + (1.0 - decay) * raw.entry(i).1.data[j];
                assert_eq!(e.to_bits(), expect.to_bits());
            }
        }
        // Step 2.
        let ema1 = ema.clone();
        for i in 0..raw.len() {
            for v in &mut raw.entry_mut(i).data {
                *v *= 1.5;
            }
        }
        ema_update(&mut ema, &raw, decay);
        for i in 0..ema.len() {
            for (j, &e) in ema.entry(i).1.data.iter().enumerate() {
                let expect = decay * ema1.entry(i).1.data[j] + (1.0 - decay) * raw.entry(i).1.data[j];
                assert_eq!(e.to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = OptimConfig::default();
        assert!((lr_at(&cfg, 0, 10, 100) - cfg.lr * 0.1).abs() < 1e-12);
        assert!((lr_at(&cfg, 9, 10, 100) - cfg.lr).abs() < 1e-12);
        assert!(lr_at(&cfg, 50, 10, 100) < cfg.lr);
        assert!(lr_at(&cfg, 99, 10, 100) < lr_at(&cfg, 50, 10, 100));
    }

    #[test]
    fn adam_state_round_trips() {
        let store = tiny_store();
        let mut state = AdamState::new(&store);
        state.step = 7;
        state.m[0][0] = 0.123456789;
        state.v[1][2] = 9.87e-5;
        let dir = std::env::temp_dir().join(format!("dart-optim-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        state.save(&dir).unwrap();
        let loaded = AdamState::load(&dir).unwrap();
        assert_eq!(loaded.step, 7);
        assert_eq!(loaded.m[0][0].to_bits(), state.m[0][0].to_bits());
        assert_eq!(loaded.v[1][2].to_bits(), state.v[1][2].to_bits());
        std::fs::remove_dir_all(&dir).ok();
    }
}
