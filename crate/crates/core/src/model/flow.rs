//! Velocity head for flow-matching refinement: three feed-forward blocks
//! modulated by adaptive layer norm from the backbone context and the flow
//! time. The inner width matches the backbone hidden size.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::real::Real;
use crate::rng::{self, stream};
use crate::tensor::Tensor;

use super::backbone::Bound;
use super::params::ParamStore;
use super::ModelConfig;

pub const FLOW_BLOCKS: usize = 3;

pub(super) fn init_flow_params<R: Real>(cfg: &ModelConfig, seed: u64, s: &mut ParamStore<R>) {
    let h = cfg.hidden;
    let mut key = 0u64;
    let mut fan_in = |tag: u64, shape: &[usize]| {
        key += 1;
        let std = 1.0 / (shape[0] as f64).sqrt();
        let mut r = rng::substream(&[seed, stream::PARAM_INIT, 0xF10u64, tag, key]);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| R::from_f64(rng::normal_f64(&mut r) * std))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    };

    s.insert("flow.in.w", fan_in(1, &[cfg.channels, h]));
    s.insert("flow.in.b", Tensor::zeros(&[h]));
    s.insert("flow.cond.w", fan_in(2, &[h, h]));
    s.insert("flow.cond.b", Tensor::zeros(&[h]));
    s.insert("flow.tau.w", fan_in(3, &[1, h]));
    s.insert("flow.tau.b", Tensor::zeros(&[h]));
    for j in 0..FLOW_BLOCKS {
        let p = |n: &str| format!("flow.blocks.{j}.{n}");
        s.insert(&p("norm.gain"), Tensor::full(&[h], R::ONE));
        s.insert(&p("mod.w"), Tensor::zeros(&[h, 3 * h]));
        s.insert(&p("mod.b"), Tensor::zeros(&[3 * h]));
        s.insert(&p("w_gate"), fan_in(4, &[h, h]));
        s.insert(&p("w_up"), fan_in(5, &[h, h]));
        s.insert(&p("w_down"), fan_in(6, &[h, h]));
    }
    s.insert("flow.out.norm.gain", Tensor::full(&[h], R::ONE));
    s.insert("flow.out.w", Tensor::zeros(&[h, cfg.channels]));
    s.insert("flow.out.b", Tensor::zeros(&[cfg.channels]));
}

pub fn flow_param_count<R: Real>(store: &ParamStore<R>) -> usize {
    store.num_params_with_prefix("flow.")
}

/// Velocity of the probability flow at interpolant `state`, conditioned on
/// the per-token backbone context and the flow time τ ∈ [0, 1].
pub fn flow_velocity<R: Real>(
    g: &mut Graph<R>,
    bound: &mut Bound,
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    state: NodeId,
    context: NodeId,
    tau: f64,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CoreError::InvalidArgument(format!(
            "flow time {} outside [0,1]",
            tau
        )));
    }
    let (k, ch) = g.value(state).dims2()?;
    if ch != cfg.channels {
        return Err(CoreError::Shape(format!(
            "state channels {} vs config {}",
            ch, cfg.channels
        )));
    }
    let (kc, hc) = g.value(context).dims2()?;
    if kc != k || hc != cfg.hidden {
        return Err(CoreError::Shape(format!(
            "context {}x{} vs state {} tokens",
            kc, hc, k
        )));
    }

    let mut p = |g: &mut Graph<R>, name: &str| bound.node(g, store, name);

    // Modulation base: silu(c·W + b + τ-embedding), one vector per token.
    let cw = p(g, "flow.cond.w");
    let cb = p(g, "flow.cond.b");
    let tw = p(g, "flow.tau.w");
    let tb = p(g, "flow.tau.b");
    let cond = g.matmul(context, cw)?;
    let cond = g.add_row(cond, cb)?;
    let tau_in = g.input(Tensor::new(vec![1, 1], vec![R::from_f64(tau)])?);
    let tau_row = {
        let t = g.matmul(tau_in, tw)?;
        g.add_row(t, tb)?
    };
    // Broadcast the 1×h tau embedding over tokens.
    let tau_flat = g.gather_rows(tau_row, std::rc::Rc::new(vec![0]))?;
    let cond = {
        let t = g.add_row(cond, tau_flat)?;
        g.silu(t)
    };

    let inw = p(g, "flow.in.w");
    let inb = p(g, "flow.in.b");
    let mut h = g.matmul(state, inw)?;
    h = g.add_row(h, inb)?;

    let hidden = cfg.hidden;
    for j in 0..FLOW_BLOCKS {
        let name = |n: &str| format!("flow.blocks.{j}.{n}");
        let mw = p(g, &name("mod.w"));
        let mb = p(g, &name("mod.b"));
        let mods = g.matmul(cond, mw)?;
        let mods = g.add_row(mods, mb)?;
        let shift = g.slice_cols(mods, 0, hidden)?;
        let scale = g.slice_cols(mods, hidden, hidden)?;
        let gate = g.slice_cols(mods, 2 * hidden, hidden)?;

        let gain = p(g, &name("norm.gain"));
        let mut hn = g.rmsnorm(h, gain)?;
        let scaled = g.mul(hn, scale)?;
        hn = g.add(hn, scaled)?;
        hn = g.add(hn, shift)?;

        let wg = p(g, &name("w_gate"));
        let wu = p(g, &name("w_up"));
        let wd = p(g, &name("w_down"));
        let a = g.matmul(hn, wg)?;
        let a = g.silu(a);
        let b = g.matmul(hn, wu)?;
        let prod = g.mul(a, b)?;
        let f = g.matmul(prod, wd)?;
        let gated = g.mul(f, gate)?;
        h = g.add(h, gated)?;
    }

    let gain = p(g, "flow.out.norm.gain");
    let hn = g.rmsnorm(h, gain)?;
    let ow = p(g, "flow.out.w");
    let ob = p(g, "flow.out.b");
    let v = g.matmul(hn, ow)?;
    g.add_row(v, ob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::model::params::init_params;
    use crate::model::Variant;
    use crate::rng;

    fn fm_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::point_model(2, 2, 24, 2);
        cfg.variant = Variant::DartFm;
        cfg.tokens_per_level = 4;
        cfg.grid = (2, 2);
        cfg
    }

    #[test]
    fn zero_init_velocity_is_zero() {
        let cfg = fm_cfg();
        let store: ParamStore<f64> = init_params(&cfg, 5).unwrap();
        let mut g = Graph::new();
        let mut bound = Bound::new(&store, false);
        let mut r = rng::substream(&[1]);
        let state = g.input(Tensor::new(vec![4, 2], rng::normal_vec(&mut r, 8)).unwrap());
        let ctx = g.input(Tensor::new(vec![4, 24], rng::normal_vec(&mut r, 96)).unwrap());
        let v = flow_velocity(&mut g, &mut bound, &store, &cfg, state, ctx, 0.3).unwrap();
        assert_eq!(g.value(v).shape, vec![4, 2]);
        assert!(g.value(v).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tau_domain_is_enforced() {
        let cfg = fm_cfg();
        let store: ParamStore<f64> = init_params(&cfg, 5).unwrap();
        let mut g = Graph::new();
        let mut bound = Bound::new(&store, false);
        let state = g.input(Tensor::zeros(&[4, 2]));
        let ctx = g.input(Tensor::zeros(&[4, 24]));
        assert!(flow_velocity(&mut g, &mut bound, &store, &cfg, state, ctx, 1.2).is_err());
        assert!(flow_velocity(&mut g, &mut bound, &store, &cfg, state, ctx, -0.1).is_err());
    }

    #[test]
    fn flow_gradients_match_finite_differences() {
        let cfg = fm_cfg();
        let mut store: ParamStore<f64> = init_params(&cfg, 6).unwrap();
        // Perturb the zero-initialized layers so every path carries signal.
        let mut r = rng::substream(&[2]);
        for name in ["flow.out.w", "flow.blocks.0.mod.w", "flow.blocks.1.mod.w"] {
            for v in &mut store.get_mut(name).data {
                *v = rng::normal_f64(&mut r) * 0.2;
            }
        }
        let names = ["flow.in.w", "flow.blocks.0.w_gate", "flow.cond.w", "flow.out.w"];
        let inputs: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).clone()).collect();
        let mut rr = rng::substream(&[3]);
        let state_t = Tensor::new(vec![4, 2], rng::normal_vec(&mut rr, 8)).unwrap();
        let ctx_t = Tensor::new(vec![4, 24], rng::normal_vec(&mut rr, 96)).unwrap();
        let rel = gradcheck::max_rel_err(&inputs, 32, 4, |g, ins| {
            let mut store2 = store.clone();
            for (n, t) in names.iter().zip(ins) {
                *store2.get_mut(n) = g.value(*t).clone();
            }
            let mut bound = Bound::new(&store2, false);
            for (n, t) in names.iter().zip(ins) {
                bound.bind_existing(store2.index_of(n), *t);
            }
            let state = g.input(state_t.clone());
            let ctx = g.input(ctx_t.clone());
            let v = flow_velocity(g, &mut bound, &store2, &cfg, state, ctx, 0.6)?;
            Ok(g.mean_all(v))
        });
        assert!(rel < 1e-3, "rel err {}", rel);
    }
}

#[cfg(test)]
mod ratio_tests {
    use super::*;
    use crate::model::params::init_params;
    use crate::model::Variant;

    #[test]
    fn flow_head_is_a_small_fraction_of_a_deep_backbone() {
        // Three fixed-width blocks against a realistically deep stack.
        let mut cfg = ModelConfig::point_model(4, 8, 32, 32);
        cfg.variant = Variant::DartFm;
        let store: ParamStore<f64> = init_params(&cfg, 1).unwrap();
        let flow = flow_param_count(&store);
        let backbone = store.num_params() - flow;
        let ratio = flow as f64 / backbone as f64;
        assert!(
            (0.003..=0.05).contains(&ratio),
            "flow/backbone ratio {} outside [0.3%, 5%]",
            ratio
        );
    }
}
