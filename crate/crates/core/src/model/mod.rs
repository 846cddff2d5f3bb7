//! Decoder-only transformer with grouped-query rotary attention and MoE
//! feed-forward blocks, plus trainability plans and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod freeze;
pub mod layers;
pub mod loss;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::ModelConfig;
pub use decoder::{decoder_forward, forward_logits, DecoderOutput};
pub use freeze::{apply_freeze_plan, FreezeOutcome, FreezePlan, FreezeRule, LayerRange, LoraSpec};
pub use layers::{gqa_attention, rmsnorm, rope_apply, swiglu, AttentionWeights, SwigluWeights};
pub use loss::{lm_cross_entropy, LmLoss};
pub use params::{param_site, Bound, ParamSite, ParamStore, Submodule};
