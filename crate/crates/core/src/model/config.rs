use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_true() -> bool {
    true
}

fn default_eps() -> f64 {
    1e-6
}

/// Architectural hyperparameters of the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub expert_intermediate_size: usize,
    pub n_shared_experts: usize,
    pub n_specialized_experts: usize,
    pub top_k: usize,
    pub rope_base: f64,
    pub max_context: usize,
    /// When false, even layers use a dense SwiGLU block and odd layers MoE.
    #[serde(default = "default_true")]
    pub moe_every_layer: bool,
    /// Intermediate size of dense SwiGLU blocks; 0 means
    /// `expert_intermediate_size * (n_shared + top_k)`.
    #[serde(default)]
    pub dense_intermediate_size: usize,
    #[serde(default = "default_eps")]
    pub rms_eps: f64,
}

impl ModelConfig {
    /// CPU-minutes scale model: 2 layers, 8 specialized experts + 1 shared,
    /// top-2 routing, 128-token context.
    pub fn toy() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            hidden_dim: 64,
            vocab_size: 512,
            expert_intermediate_size: 32,
            n_shared_experts: 1,
            n_specialized_experts: 8,
            top_k: 2,
            rope_base: 10_000.0,
            max_context: 128,
            moe_every_layer: true,
            dense_intermediate_size: 0,
            rms_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.hidden_dim == 0 || self.vocab_size == 0 || self.head_dim == 0 {
            return bad("layers, hidden, vocab and head dims must be positive".into());
        }
        if self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return bad(format!(
                "{} attention heads are not divisible by {} key/value heads",
                self.n_heads, self.n_kv_heads
            ));
        }
        if !self.head_dim.is_multiple_of(2) {
            return bad(format!("rotary embedding needs an even head dim, got {}", self.head_dim));
        }
        if self.top_k == 0 || self.top_k > self.n_specialized_experts {
            return bad(format!(
                "top_k {} must lie in 1..={}",
                self.top_k, self.n_specialized_experts
            ));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return bad(format!("rope base must be positive, got {}", self.rope_base));
        }
        if self.expert_intermediate_size == 0 || self.max_context == 0 {
            return bad("expert intermediate size and context must be positive".into());
        }
        Ok(())
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.moe_every_layer || layer % 2 == 1
    }

    pub fn dense_intermediate(&self) -> usize {
        if self.dense_intermediate_size > 0 {
            self.dense_intermediate_size
        } else {
            self.expert_intermediate_size * (self.n_shared_experts + self.top_k)
        }
    }

    /// Query heads served by each key/value head.
    pub fn query_group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn attention_param_count(&self) -> usize {
        let d = self.hidden_dim;
        let q = self.n_heads * self.head_dim;
        let kv = self.n_kv_heads * self.head_dim;
        2 * d * q + 2 * d * kv
    }

    /// Parameters in one up (or gate, or down) projection of the layer's MLP
    /// part, summed over its experts.
    pub fn mlp_projection_param_count(&self, layer: usize) -> usize {
        let d = self.hidden_dim;
        if self.is_moe_layer(layer) {
            (self.n_shared_experts + self.n_specialized_experts) * d * self.expert_intermediate_size
        } else {
            d * self.dense_intermediate()
        }
    }

    pub fn router_param_count(&self, layer: usize) -> usize {
        if self.is_moe_layer(layer) {
            self.hidden_dim * self.n_specialized_experts
        } else {
            0
        }
    }

    pub fn layer_param_count(&self, layer: usize) -> usize {
        2 * self.hidden_dim
            + self.attention_param_count()
            + 3 * self.mlp_projection_param_count(layer)
            + self.router_param_count(layer)
    }

    /// Closed-form total parameter count.
    pub fn total_param_count(&self) -> usize {
        let d = self.hidden_dim;
        let globals = 2 * self.vocab_size * d + d;
        globals + (0..self.n_layers).map(|l| self.layer_param_count(l)).sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid() {
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn gqa_grouping_from_table_values() {
        let cfg = ModelConfig {
            n_heads: 24,
            n_kv_heads: 6,
            ..ModelConfig::toy()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.query_group_size(), 4);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = ModelConfig::toy();
        for cfg in [
            ModelConfig { n_kv_heads: 3, ..base.clone() },
            ModelConfig { top_k: 9, ..base.clone() },
            ModelConfig { rope_base: 0.0, ..base.clone() },
            ModelConfig { head_dim: 15, ..base.clone() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
