use super::config::ModelConfig;
use super::layers::{gqa_attention, swiglu, AttentionWeights, SwigluWeights};
use super::params::{attn_name, expert_name, Bound, ParamStore};
use crate::error::{Error, Result};
use crate::moe::{aux_loss_on_tape, moe_forward, route_on_tape, z_loss_on_tape, MoeTerms, MoeWeights};
use crate::packing::AttentionSpec;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `[seq, vocab]`.
    pub logits: Var,
    /// Router terms of every MoE layer, in layer order.
    pub moe: MoeTerms,
}

fn swiglu_weights(p: &Bound, layer: usize, tag: &str) -> Result<SwigluWeights> {
    Ok(SwigluWeights {
        gate: p.get(&expert_name(layer, "mlp_gate", tag))?,
        up: p.get(&expert_name(layer, "mlp_up", tag))?,
        down: p.get(&expert_name(layer, "mlp_down", tag))?,
    })
}

fn mlp_block(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, layer: usize, x: Var, spec: &AttentionSpec, terms: &mut MoeTerms) -> Result<Var> {
    if !cfg.is_moe_layer(layer) {
        return swiglu(tape, x, &swiglu_weights(p, layer, "dense")?);
    }
    let weights = MoeWeights {
        shared: (0..cfg.n_shared_experts)
            .map(|j| swiglu_weights(p, layer, &format!("shared{j}")))
            .collect::<Result<_>>()?,
        specialized: (0..cfg.n_specialized_experts)
            .map(|e| swiglu_weights(p, layer, &format!("expert{e}")))
            .collect::<Result<_>>()?,
    };
    let router = p.get(&format!("layer.{layer}.router.weight"))?;
    // Pad rows are excluded from routing so they never enter the balance
    // statistics; they receive a zero MLP update.
    let real = spec.real_indices();
    let seq = spec.len();
    let packed = real.len() < seq;
    if real.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let xs = if packed { tape.gather_rows(x, &real)? } else { x };
    let routed = route_on_tape(tape, xs, router, cfg.top_k)?;
    let y = moe_forward(tape, xs, &weights, &routed)?;
    terms.aux.push(aux_loss_on_tape(tape, &routed)?);
    terms.z.push(z_loss_on_tape(tape, &routed)?);
    terms.outcomes.push(routed.outcome);
    Ok(if packed { tape.scatter_rows(y, &real, seq)? } else { y })
}

/// Embedding, `n_layers` pre-norm blocks (attention then MLP or MoE, each
/// with a residual), final norm, and LM head.
pub fn decoder_forward(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, tokens: &[usize], spec: &AttentionSpec) -> Result<DecoderOutput> {
    if tokens.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Input(format!("token {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    if spec.len() != tokens.len() || spec.positions.len() != tokens.len() {
        return Err(crate::tensor::TensorError::Dimension {
            op: "decoder_forward",
            detail: format!("mask covers {} tokens, sequence has {}", spec.len(), tokens.len()),
        }
        .into());
    }
    let emb = p.get("embeddings.weight")?;
    let mut x = tape.embedding(emb, tokens)?;
    let mut terms = MoeTerms::default();
    for l in 0..cfg.n_layers {
        let n1 = p.get(&format!("layer.{l}.norms.attn"))?;
        let h = tape.rmsnorm(x, n1, cfg.rms_eps)?;
        let aw = AttentionWeights {
            wq: p.get(&attn_name(l, "wq"))?,
            wk: p.get(&attn_name(l, "wk"))?,
            wv: p.get(&attn_name(l, "wv"))?,
            wo: p.get(&attn_name(l, "wo"))?,
        };
        let a = gqa_attention(tape, h, &aw, cfg, cfg.rope_base, spec)?;
        x = tape.add(x, a)?;
        let n2 = p.get(&format!("layer.{l}.norms.mlp"))?;
        let h = tape.rmsnorm(x, n2, cfg.rms_eps)?;
        let m = mlp_block(tape, p, cfg, l, h, spec, &mut terms)?;
        x = tape.add(x, m)?;
    }
    let nf = p.get("norms.final")?;
    let x = tape.rmsnorm(x, nf, cfg.rms_eps)?;
    let head = p.get("lm_head.weight")?;
    let logits = tape.matmul(x, head)?;
    Ok(DecoderOutput { logits, moe: terms })
}

/// Forward pass returning logits only, without keeping a tape around.
pub fn forward_logits(store: &ParamStore, cfg: &ModelConfig, tokens: &[usize], spec: &AttentionSpec) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape)?;
    let out = decoder_forward(&mut tape, &p, cfg, tokens, spec)?;
    Ok(tape.value(out.logits).clone())
}
