use serde::{Deserialize, Serialize};

use crate::{CurationError, Result};

/// Verification verdicts of the rollouts sampled for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRollouts {
    pub prompt_id: String,
    pub verdicts: Vec<bool>,
}

impl PromptRollouts {
    pub fn pass_rate(&self) -> Option<f64> {
        (!self.verdicts.is_empty())
            .then(|| self.verdicts.iter().filter(|&&v| v).count() as f64 / self.verdicts.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PassRateOutcome {
    pub retained: Vec<String>,
    pub dropped: Vec<(String, f64)>,
    /// Prompts with no rollouts; they are neither retained nor dropped.
    pub skipped: Vec<String>,
}

/// Keeps prompts whose pass rate lies in `[lo, hi]`, inclusive at both ends.
pub fn pass_rate_filter(results: &[PromptRollouts], lo: f64, hi: f64) -> Result<PassRateOutcome> {
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(CurationError::Config(format!("pass-rate interval [{lo}, {hi}] is not inside [0, 1]")));
    }
    let mut out = PassRateOutcome::default();
    for r in results {
        match r.pass_rate() {
            None => out.skipped.push(r.prompt_id.clone()),
            Some(rate) if (lo..=hi).contains(&rate) => out.retained.push(r.prompt_id.clone()),
            Some(rate) => out.dropped.push((r.prompt_id.clone(), rate)),
        }
    }
    Ok(out)
}
