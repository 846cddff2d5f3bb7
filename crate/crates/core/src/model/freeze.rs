use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{param_site, ParamSite, ParamStore, Submodule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer selector of a freeze rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRange {
    /// Every layer plus the model-level tensors (embeddings, final norm, head).
    All,
    First(usize),
    Last(usize),
    /// Half-open `[start, end)`.
    Range(usize, usize),
}

impl LayerRange {
    fn bounds(self, n_layers: usize) -> (usize, usize) {
        match self {
            LayerRange::All => (0, n_layers),
            LayerRange::First(n) => (0, n),
            LayerRange::Last(n) => (n_layers.saturating_sub(n), n_layers),
            LayerRange::Range(a, b) => (a, b),
        }
    }

    fn validate(self, n_layers: usize) -> Result<()> {
        let ok = match self {
            LayerRange::All => true,
            LayerRange::First(n) | LayerRange::Last(n) => (1..=n_layers).contains(&n),
            LayerRange::Range(a, b) => a < b && b <= n_layers,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Plan(format!("layer selector {self:?} does not fit a {n_layers}-layer model")))
        }
    }

    fn covers(self, layer: Option<usize>, n_layers: usize) -> bool {
        match (self, layer) {
            (LayerRange::All, _) => true,
            (_, None) => false,
            (r, Some(l)) => {
                let (a, b) = r.bounds(n_layers);
                (a..b).contains(&l)
            }
        }
    }
}

/// Unfreezes `submodules` in `layers`. An empty submodule list means every
/// submodule of those layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeRule {
    pub layers: LayerRange,
    #[serde(default)]
    pub submodules: Vec<Submodule>,
}

impl FreezeRule {
    pub fn full(layers: LayerRange) -> Self {
        Self {
            layers,
            submodules: Vec::new(),
        }
    }

    pub fn only(layers: LayerRange, submodules: &[Submodule]) -> Self {
        Self {
            layers,
            submodules: submodules.to_vec(),
        }
    }

    fn matches(&self, site: &ParamSite, n_layers: usize) -> bool {
        self.layers.covers(site.layer, n_layers) && submodule_matches(&self.submodules, site)
    }
}

fn submodule_matches(set: &[Submodule], site: &ParamSite) -> bool {
    set.is_empty()
        || set
            .iter()
            .any(|&s| s == site.submodule || (s == Submodule::Experts && site.is_expert))
}

/// Low-rank adapters on the weight matrices of `targets` within `layers`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    #[serde(default)]
    pub targets: Vec<Submodule>,
    #[serde(default = "all_layers")]
    pub layers: LayerRange,
}

fn all_layers() -> LayerRange {
    LayerRange::All
}

/// Trainability rules. Without rules and without LoRA every parameter
/// trains; otherwise a parameter trains iff some rule matches it, and LoRA
/// adapters always train.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    #[serde(default)]
    pub rules: Vec<FreezeRule>,
    #[serde(default)]
    pub lora: Option<LoraSpec>,
}

impl FreezePlan {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn with_rules(rules: Vec<FreezeRule>) -> Self {
        Self { rules, lora: None }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for r in &self.rules {
            r.layers.validate(cfg.n_layers)?;
        }
        if let Some(l) = &self.lora {
            if l.rank == 0 {
                return Err(Error::Plan("LoRA rank must be at least 1".into()));
            }
            l.layers.validate(cfg.n_layers)?;
        }
        Ok(())
    }

    /// Verdict for a base (non-adapter) parameter.
    pub fn is_trainable(&self, name: &str, cfg: &ModelConfig) -> Result<bool> {
        let site = param_site(name).ok_or_else(|| Error::Plan(format!("unrecognized parameter name {name}")))?;
        if site.lora_of.is_some() {
            return Ok(true);
        }
        if self.rules.is_empty() && self.lora.is_none() {
            return Ok(true);
        }
        if self.is_lora_target(&site, name, cfg) {
            return Ok(false);
        }
        Ok(self.rules.iter().any(|r| r.matches(&site, cfg.n_layers)))
    }

    fn is_lora_target(&self, site: &ParamSite, name: &str, cfg: &ModelConfig) -> bool {
        let Some(l) = &self.lora else { return false };
        site.layer.is_some()
            && site.submodule != Submodule::Norms
            && !name.ends_with(".lora_in")
            && !name.ends_with(".lora_out")
            && l.layers.covers(site.layer, cfg.n_layers)
            && submodule_matches(&l.targets, site)
    }
}

#[derive(Debug, Clone)]
pub struct FreezeOutcome {
    /// Input parameters with trainability flags set, plus any adapters.
    pub params: ParamStore,
    pub trainable: BTreeSet<String>,
    pub trainable_count: usize,
}

/// Marks trainability on a copy of `store` and adds LoRA adapters: for a
/// targeted `W[in, out]`, `W.lora_in[in, r]` ~ N(0, 1/in) and
/// `W.lora_out[r, out]` = 0, combined as `W + lora_in·lora_out / r`.
pub fn apply_freeze_plan(store: &ParamStore, cfg: &ModelConfig, plan: &FreezePlan, seed: u64) -> Result<FreezeOutcome> {
    plan.validate(cfg)?;
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in store.iter() {
        if name.ends_with(".lora_in") || name.ends_with(".lora_out") {
            continue;
        }
        let site = param_site(name).ok_or_else(|| Error::Plan(format!("unrecognized parameter name {name}")))?;
        let mut base = t.clone();
        base.zero_grad();
        base.set_requires_grad(plan.is_trainable(name, cfg)?);
        if plan.is_lora_target(&site, name, cfg) {
            let rank = plan.lora.as_ref().map(|l| l.rank).unwrap_or(1);
            let &[rows, cols] = t.shape() else {
                return Err(Error::Plan(format!("LoRA target {name} is not a matrix")));
            };
            let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("positive std");
            let a = Tensor::new(vec![rows, rank], (0..rows * rank).map(|_| normal.sample(&mut rng)).collect())?;
            params.insert(&format!("{name}.lora_in"), a.with_requires_grad(true));
            params.insert(&format!("{name}.lora_out"), Tensor::zeros(vec![rank, cols]).with_requires_grad(true));
        }
        params.insert(name, base);
    }
    let trainable: BTreeSet<String> = params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.clone())
        .collect();
    let trainable_count = params.trainable_count();
    Ok(FreezeOutcome {
        params,
        trainable,
        trainable_count,
    })
}
