//! Data curation: exact dedup and decontamination, PCA and DBSCAN over
//! question embeddings, cluster-proportional selection weighted by Q/A
//! dissimilarity, quality-weighted resampling and the pass-rate filter.

mod cluster;
mod dedup;
mod embed;
mod filter;
mod pca;
mod sample;
mod select;

pub use cluster::{dbscan_cluster, Label};
pub use dedup::{canonicalize, dedup_and_decontaminate, DedupOutcome, Removal, RemovalReason};
pub use embed::{cosine, Embedder, HashedNgramEmbedder};
pub use filter::{pass_rate_filter, PassRateOutcome, PromptRollouts};
pub use pca::{pca_reduce, Pca};
pub use sample::{read_removals, read_samples, write_removals, write_samples, Sample};
pub use select::{allocate_largest_remainder, select_multilingual, selective_resample, SelectConfig, Selection};

#[derive(Debug, thiserror::Error)]
pub enum CurationError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("selection error: {0}")]
    Selection(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CurationError> = std::result::Result<T, E>;
