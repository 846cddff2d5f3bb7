use deskmoe_core::model::{decoder_forward, Bound, ModelConfig};
use deskmoe_core::packing::AttentionSpec;
use deskmoe_core::{Tape, Var};

use crate::{AlignError, Result};

fn check(beta: f64, series: &[&[f64]]) -> Result<()> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(AlignError::Config(format!("beta must be positive, got {beta}")));
    }
    let n = series[0].len();
    if series.iter().any(|s| s.len() != n) {
        return Err(AlignError::Input("log-probability batches differ in length".into()));
    }
    if n == 0 {
        return Err(AlignError::Input("empty batch".into()));
    }
    if series.iter().flat_map(|s| s.iter()).any(|x| !x.is_finite()) {
        return Err(AlignError::Numeric("non-finite log-probability".into()));
    }
    Ok(())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Batch mean of `-ln sigmoid(beta * ((c - rc) - (r - rr)))` over sequence
/// log-probabilities.
pub fn dpo_loss(chosen: &[f64], rejected: &[f64], ref_chosen: &[f64], ref_rejected: &[f64], beta: f64) -> Result<f64> {
    check(beta, &[chosen, rejected, ref_chosen, ref_rejected])?;
    let total: f64 = (0..chosen.len())
        .map(|i| softplus(-beta * ((chosen[i] - ref_chosen[i]) - (rejected[i] - ref_rejected[i]))))
        .sum();
    Ok(total / chosen.len() as f64)
}

/// Tape version; policy terms are scalar vars, reference terms constants.
pub fn dpo_loss_on_tape(
    tape: &mut Tape,
    chosen: &[Var],
    rejected: &[Var],
    ref_chosen: &[f64],
    ref_rejected: &[f64],
    beta: f64,
) -> Result<Var> {
    if chosen.len() != rejected.len() {
        return Err(AlignError::Input("chosen and rejected batches differ in length".into()));
    }
    let pc: Vec<f64> = chosen.iter().map(|&v| tape.value(v).item()).collect();
    let pr: Vec<f64> = rejected.iter().map(|&v| tape.value(v).item()).collect();
    check(beta, &[&pc, &pr, ref_chosen, ref_rejected])?;
    let mut total: Option<Var> = None;
    for i in 0..chosen.len() {
        let diff = tape.sub(chosen[i], rejected[i])?;
        let shifted = tape.add_scalar(diff, -(ref_chosen[i] - ref_rejected[i]))?;
        let neg = tape.scale(shifted, -beta)?;
        let term = tape.softplus(neg)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(tape.scale(total, 1.0 / chosen.len() as f64)?)
}

/// Sum of log-probabilities of `response` given `prompt` under the model.
pub fn sequence_logprob(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    prompt: &[usize],
    response: &[usize],
) -> Result<Var> {
    if prompt.is_empty() || response.is_empty() {
        return Err(AlignError::Input("prompt and response must be non-empty".into()));
    }
    let tokens: Vec<usize> = prompt.iter().chain(response).copied().collect();
    let n = tokens.len();
    let out = decoder_forward(tape, bound, cfg, &tokens, &AttentionSpec::causal(n))?;
    let mut targets = vec![0; n];
    let mut weights = vec![0.0; n];
    for t in prompt.len() - 1..n - 1 {
        targets[t] = tokens[t + 1];
        weights[t] = 1.0;
    }
    let nll = tape.cross_entropy_sum(out.logits, &targets, &weights)?;
    Ok(tape.scale(nll, -1.0)?)
}

