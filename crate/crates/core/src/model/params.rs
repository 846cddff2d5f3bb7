use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Named groups a freeze plan can select.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Submodule {
    Attention,
    MlpUp,
    MlpDown,
    MlpGate,
    Norms,
    Embeddings,
    LmHead,
    Router,
    /// Every projection of every shared or specialized expert.
    Experts,
}

impl Submodule {
    pub fn as_str(self) -> &'static str {
        match self {
            Submodule::Attention => "attention",
            Submodule::MlpUp => "mlp_up",
            Submodule::MlpDown => "mlp_down",
            Submodule::MlpGate => "mlp_gate",
            Submodule::Norms => "norms",
            Submodule::Embeddings => "embeddings",
            Submodule::LmHead => "lm_head",
            Submodule::Router => "router",
            Submodule::Experts => "experts",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "attention" => Submodule::Attention,
            "mlp_up" => Submodule::MlpUp,
            "mlp_down" => Submodule::MlpDown,
            "mlp_gate" => Submodule::MlpGate,
            "norms" => Submodule::Norms,
            "embeddings" => Submodule::Embeddings,
            "lm_head" => Submodule::LmHead,
            "router" => Submodule::Router,
            _ => return None,
        })
    }
}

/// Where a parameter lives, recovered from its name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSite {
    /// `None` for model-level tensors (embeddings, final norm, LM head).
    pub layer: Option<usize>,
    pub submodule: Submodule,
    /// True for projections belonging to a shared or specialized expert.
    pub is_expert: bool,
    /// Base parameter name when this is a LoRA adapter factor.
    pub lora_of: Option<String>,
}

/// Parses `layer.<i>.<submodule>.<tensor>` or `<submodule>.<tensor>`.
pub fn param_site(name: &str) -> Option<ParamSite> {
    if let Some(base) = name
        .strip_suffix(".lora_in")
        .or_else(|| name.strip_suffix(".lora_out"))
    {
        let mut site = param_site(base)?;
        site.lora_of = Some(base.to_string());
        return Some(site);
    }
    let parts: Vec<&str> = name.split('.').collect();
    let (layer, sub, tensor) = match parts.as_slice() {
        ["layer", i, sub, tensor] => (Some(i.parse().ok()?), *sub, *tensor),
        [sub, tensor] => (None, *sub, *tensor),
        _ => return None,
    };
    let submodule = Submodule::parse(sub)?;
    let is_expert = matches!(submodule, Submodule::MlpUp | Submodule::MlpDown | Submodule::MlpGate)
        && (tensor.starts_with("expert") || tensor.starts_with("shared"));
    Some(ParamSite {
        layer,
        submodule,
        is_expert,
        lora_of: None,
    })
}

pub fn attn_name(layer: usize, t: &str) -> String {
    format!("layer.{layer}.attention.{t}")
}

pub fn expert_name(layer: usize, proj: &str, expert: &str) -> String {
    format!("layer.{layer}.{proj}.{expert}")
}

/// Ordered map of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Random initialization for `cfg`: matrices ~ N(0, 1/fan_in), norm
    /// weights one, embeddings N(0, 1).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.hidden_dim;
        let matrix = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Tensor::new(vec![rows, cols], data)
                .expect("positive extents")
                .with_requires_grad(true)
        };
        let ones = |n: usize| Tensor::full(vec![n], 1.0).with_requires_grad(true);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        store.insert("embeddings.weight", matrix(&mut rng, cfg.vocab_size, d, 1.0));
        let (q, kv) = (cfg.n_heads * cfg.head_dim, cfg.n_kv_heads * cfg.head_dim);
        for l in 0..cfg.n_layers {
            store.insert(&format!("layer.{l}.norms.attn"), ones(d));
            store.insert(&format!("layer.{l}.norms.mlp"), ones(d));
            store.insert(&attn_name(l, "wq"), matrix(&mut rng, d, q, fan(d)));
            store.insert(&attn_name(l, "wk"), matrix(&mut rng, d, kv, fan(d)));
            store.insert(&attn_name(l, "wv"), matrix(&mut rng, d, kv, fan(d)));
            store.insert(&attn_name(l, "wo"), matrix(&mut rng, q, d, fan(q)));
            let experts: Vec<(String, usize)> = if cfg.is_moe_layer(l) {
                store.insert(
                    &format!("layer.{l}.router.weight"),
                    matrix(&mut rng, d, cfg.n_specialized_experts, fan(d)),
                );
                (0..cfg.n_shared_experts)
                    .map(|j| (format!("shared{j}"), cfg.expert_intermediate_size))
                    .chain((0..cfg.n_specialized_experts).map(|e| (format!("expert{e}"), cfg.expert_intermediate_size)))
                    .collect()
            } else {
                vec![("dense".to_string(), cfg.dense_intermediate())]
            };
            for (tag, inter) in experts {
                store.insert(&expert_name(l, "mlp_gate", &tag), matrix(&mut rng, d, inter, fan(d)));
                store.insert(&expert_name(l, "mlp_up", &tag), matrix(&mut rng, d, inter, fan(d)));
                store.insert(&expert_name(l, "mlp_down", &tag), matrix(&mut rng, inter, d, fan(inter)));
            }
        }
        store.insert("norms.final", ones(d));
        store.insert("lm_head.weight", matrix(&mut rng, d, cfg.vocab_size, fan(d)));
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.params.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    /// Registers every parameter on `tape` and resolves LoRA-wrapped
    /// weights to `base + (lora_in · lora_out) / rank`.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let leaves = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        Bound::resolve(tape, leaves)
    }
}

/// Parameters registered on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    leaves: BTreeMap<String, Var>,
    resolved: BTreeMap<String, Var>,
}

impl Bound {
    /// Builds the name lookup from already-registered leaves, folding each
    /// `{name}.lora_in`/`{name}.lora_out` pair into `name`.
    pub fn resolve(tape: &mut Tape, leaves: BTreeMap<String, Var>) -> Result<Bound> {
        let mut resolved = leaves.clone();
        for (name, &base) in &leaves {
            let (Some(&a), Some(&b)) = (
                leaves.get(&format!("{name}.lora_in")),
                leaves.get(&format!("{name}.lora_out")),
            ) else {
                continue;
            };
            let rank = tape.shape(a)[1] as f64;
            let delta = tape.matmul(a, b)?;
            let delta = tape.scale(delta, 1.0 / rank)?;
            let eff = tape.add(base, delta)?;
            resolved.insert(name.clone(), eff);
        }
        Ok(Bound { leaves, resolved })
    }

    /// Effective weight for `name` (LoRA adapters folded in).
    pub fn get(&self, name: &str) -> Result<Var> {
        self.resolved
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn leaf(&self, name: &str) -> Option<Var> {
        self.leaves.get(name).copied()
    }

    /// Adds `scale ×` the tape gradient of every trainable leaf into the
    /// store's gradient buffers.
    pub fn collect_grads(&self, tape: &Tape, store: &mut ParamStore, scale: f64) {
        for (name, &v) in &self.leaves {
            if let (Some(g), Some(t)) = (tape.grad(v), store.get_mut(name)) {
                if t.requires_grad() {
                    t.accumulate_grad(g, scale);
                }
            }
        }
    }
}
