//! Reproducible toy experiments wiring the model, optimizer, packing,
//! tokenizer, curation and alignment crates together.

pub mod cli;
pub mod config;
pub mod data;
pub mod dpo;
pub mod metrics;
pub mod report;
pub mod study;
pub mod trainer;

pub use config::{DataRecipe, ExperimentConfig, LossTokens, SourceWeight, StageConfig};
pub use data::{gen_synthetic_corpus, Item, Task};
pub use metrics::{MetricsRecord, StepMetrics, SCHEMA_VERSION};
pub use trainer::{run_experiment, RunSummary, TrainSample, Trainer};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("report error: {0}")]
    Report(String),
    #[error("stage {stage} step {step}: {source}")]
    Stage {
        stage: String,
        step: usize,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Core(#[from] deskmoe_core::Error),
    #[error(transparent)]
    Tokenizer(#[from] deskmoe_tokenizer::TokenizerError),
    #[error(transparent)]
    Curation(#[from] deskmoe_curation::CurationError),
    #[error(transparent)]
    Align(#[from] deskmoe_align::AlignError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl From<deskmoe_core::TensorError> for HarnessError {
    fn from(e: deskmoe_core::TensorError) -> Self {
        Self::Core(e.into())
    }
}

impl HarnessError {
    /// Short machine-readable category for error records.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Report(_) => "report",
            Self::Stage { source, .. } => source.code(),
            Self::Core(_) => "core",
            Self::Tokenizer(_) => "tokenizer",
            Self::Curation(_) => "curation",
            Self::Align(_) => "align",
            Self::Io(_) => "io",
            Self::Json(_) => "json",
            Self::Toml(_) => "toml",
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
