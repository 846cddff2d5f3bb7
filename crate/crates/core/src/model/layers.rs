use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::packing::AttentionSpec;
use crate::tensor::{Tape, Tensor, Var};

/// `x / sqrt(mean(x²) + eps) * weight` over the last axis.
pub fn rmsnorm(x: &Tensor, weight: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(weight.clone());
    let y = tape.rmsnorm(xv, wv, eps)?;
    Ok(tape.value(y).clone())
}

/// Rotary embedding of `x[seq, heads, head_dim]` at `positions`.
pub fn rope_apply(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    let &[seq, heads, head_dim] = x.shape() else {
        return Err(Error::Input(format!("rope input must be [seq, heads, head_dim], got {:?}", x.shape())));
    };
    if head_dim % 2 != 0 {
        return Err(Error::Config(format!("rotary embedding needs an even head dim, got {head_dim}")));
    }
    if base.is_nan() || base <= 0.0 {
        return Err(Error::Config(format!("rope base must be positive, got {base}")));
    }
    let mut tape = Tape::new();
    let flat = tape.constant(x.reshaped(vec![seq, heads * head_dim])?);
    let y = tape.rope(flat, positions, base, heads, head_dim)?;
    Ok(tape.value(y).reshaped(vec![seq, heads, head_dim])?)
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Grouped-query attention over `x[seq, hidden]` with rotary positions and
/// the block-causal mask from `spec`.
pub fn gqa_attention(
    tape: &mut Tape,
    x: Var,
    w: &AttentionWeights,
    cfg: &ModelConfig,
    rope_base: f64,
    spec: &AttentionSpec,
) -> Result<Var> {
    let q = tape.matmul(x, w.wq)?;
    let k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;
    let q = tape.rope(q, &spec.positions, rope_base, cfg.n_heads, cfg.head_dim)?;
    let k = tape.rope(k, &spec.positions, rope_base, cfg.n_kv_heads, cfg.head_dim)?;
    let o = tape.attention(q, k, v, &spec.segments, cfg.n_heads, cfg.n_kv_heads, cfg.head_dim)?;
    Ok(tape.matmul(o, w.wo)?)
}

#[derive(Debug, Clone, Copy)]
pub struct SwigluWeights {
    pub gate: Var,
    pub up: Var,
    pub down: Var,
}

/// `(silu(x·gate) ⊙ (x·up)) · down`.
pub fn swiglu(tape: &mut Tape, x: Var, w: &SwigluWeights) -> Result<Var> {
    let g = tape.matmul(x, w.gate)?;
    let g = tape.silu(g)?;
    let u = tape.matmul(x, w.up)?;
    let h = tape.mul(g, u)?;
    Ok(tape.matmul(h, w.down)?)
}
