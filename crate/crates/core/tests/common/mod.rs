#![allow(dead_code)]

use std::collections::BTreeMap;

use deskmoe_core::model::{Bound, ModelConfig, ParamStore};
use deskmoe_core::{Tape, Tensor, Var};

/// Small enough for finite-difference checks over every parameter.
pub fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        n_kv_heads: 1,
        head_dim: 4,
        hidden_dim: 8,
        vocab_size: 11,
        expert_intermediate_size: 4,
        n_shared_experts: 1,
        n_specialized_experts: 4,
        top_k: 2,
        rope_base: 10_000.0,
        max_context: 16,
        moe_every_layer: true,
        dense_intermediate_size: 0,
        rms_eps: 1e-6,
    }
}

/// Splits a store into names and tensors for `check_gradients`.
pub fn unzip(store: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    store.iter().map(|(n, t)| (n.clone(), t.clone())).unzip()
}

pub fn bind_vars(tape: &mut Tape, names: &[String], vars: &[Var]) -> Bound {
    let leaves: BTreeMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
    Bound::resolve(tape, leaves).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
