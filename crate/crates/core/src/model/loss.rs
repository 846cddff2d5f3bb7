use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Unnormalized LM loss: the weighted NLL sum and the weighted token count.
#[derive(Debug, Clone, Copy)]
pub struct LmLoss {
    pub sum: Var,
    pub count: f64,
}

/// Sum of per-token negative log-likelihood over tokens with nonzero weight.
/// Normalization is left to the caller so micro-batches can share a global
/// denominator.
pub fn lm_cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize], weights: &[f64]) -> Result<LmLoss> {
    let count: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::Input("token weights must be finite and non-negative".into()));
    }
    if count == 0.0 {
        return Err(Error::EmptyLoss);
    }
    let sum = tape.cross_entropy_sum(logits, targets, weights)?;
    Ok(LmLoss { sum, count })
}
