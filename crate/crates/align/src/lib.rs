//! Alignment: `<think>`-tagged chat templates, boxed-answer verification,
//! Best-of-N preference pairs, the DPO objective and weight averaging.

mod dpo;
mod pairs;
mod soup;
mod template;
mod verify;

pub use dpo::{dpo_loss, dpo_loss_on_tape, sequence_logprob};
pub use pairs::{
    build_preference_pairs, read_preferences, write_preferences, CandidateGenerator, DiscardReason, PairKind,
    PairOutcome, PreferencePair, RewardScorer, SeededScorer, TemplateGenerator,
};
pub use soup::{soup_average, soup_checkpoints};
pub use template::{parse_think, render_exchange, render_template, wrap_think, ChatMode, ThinkParse, LONGCOT_SYSTEM};
pub use verify::{extract_last_boxed, normalize_answer, verify_boxed_answer, Verdict, VerdictReason};

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Core(#[from] deskmoe_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<deskmoe_core::TensorError> for AlignError {
    fn from(e: deskmoe_core::TensorError) -> Self {
        Self::Core(e.into())
    }
}

pub type Result<T, E = AlignError> = std::result::Result<T, E>;
