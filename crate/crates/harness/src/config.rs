use std::path::{Path, PathBuf};

use deskmoe_core::model::{FreezePlan, ModelConfig};
use deskmoe_core::optim::{AdamWConfig, CoeffDecay, LossAveraging, ScheduleKind, Stage, StagePlan};
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTokens {
    /// Every next-token prediction inside a sample.
    #[default]
    All,
    /// Only predictions of response tokens.
    Response,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceWeight {
    pub task: Task,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRecipe {
    pub sources: Vec<SourceWeight>,
    /// Fraction of think-block items kept when the pool is built.
    #[serde(default = "one")]
    pub longcot_keep: f64,
    /// Items generated per source before mixing.
    #[serde(default = "default_pool")]
    pub pool_size: usize,
}

fn one() -> f64 {
    1.0
}

fn default_pool() -> usize {
    2048
}

impl DataRecipe {
    pub fn single(task: Task) -> Self {
        Self {
            sources: vec![SourceWeight { task, weight: 1.0 }],
            longcot_keep: 1.0,
            pool_size: default_pool(),
        }
    }
}

/// One stage: its schedule plus what it trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    #[serde(flatten)]
    pub schedule: Stage,
    /// Longest sample, and the pack capacity when packing.
    pub context: usize,
    #[serde(default)]
    pub pack: bool,
    #[serde(default)]
    pub loss_on: LossTokens,
    pub data: DataRecipe,
    /// Trainability for this stage; `None` trains everything.
    #[serde(default)]
    pub freeze: Option<FreezePlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    #[serde(default = "default_prompts")]
    pub prompts: usize,
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub margin: f64,
    #[serde(default = "default_dpo_steps")]
    pub steps: usize,
    #[serde(default = "default_dpo_batch")]
    pub batch: usize,
    #[serde(default = "default_dpo_lr")]
    pub lr: f64,
    /// Upper bound of the seeded generator's per-prompt accuracy.
    #[serde(default = "default_accuracy")]
    pub max_accuracy: f64,
}

fn default_prompts() -> usize {
    200
}
fn default_candidates() -> usize {
    8
}
fn default_beta() -> f64 {
    0.1
}
fn default_dpo_steps() -> usize {
    500
}
fn default_dpo_batch() -> usize {
    4
}
fn default_dpo_lr() -> f64 {
    1e-3
}
fn default_accuracy() -> f64 {
    0.6
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            prompts: default_prompts(),
            candidates: default_candidates(),
            beta: default_beta(),
            margin: 0.0,
            steps: default_dpo_steps(),
            batch: default_dpo_batch(),
            lr: default_dpo_lr(),
            max_accuracy: default_accuracy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub coeff_decay: CoeffDecay,
    #[serde(default)]
    pub averaging: LossAveraging,
    /// Reset AdamW moments at each stage start instead of carrying them.
    #[serde(default)]
    pub reset_moments: bool,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub alignment: Option<AlignmentConfig>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

pub fn stage(name: &str, steps: usize, warmup: usize, lr_max: f64, rope_base: f64, batch: usize) -> Stage {
    Stage {
        name: name.into(),
        total_steps: steps,
        warmup_steps: warmup,
        lr_max,
        lr_min: lr_max * 0.1,
        schedule_kind: ScheduleKind::Cosine,
        alpha_max: 0.01,
        beta_max: 0.001,
        rope_base,
        global_batch: batch,
        micro_batch: batch,
        grad_accum_steps: 1,
    }
}

impl ExperimentConfig {
    /// Toy recipe: pretrain, anneal with re-warmup, long-context with the
    /// larger rotary base, two SFT stages with packing, then DPO.
    pub fn toy() -> Self {
        let mix = |pairs: &[(Task, f64)]| DataRecipe {
            sources: pairs.iter().map(|&(task, weight)| SourceWeight { task, weight }).collect(),
            longcot_keep: 1.0,
            pool_size: 512,
        };
        let st = |schedule: Stage, context: usize, pack: bool, loss_on: LossTokens, data: DataRecipe| StageConfig {
            schedule,
            context,
            pack,
            loss_on,
            data,
            freeze: None,
        };
        let pretrain_mix = mix(&[(Task::Copy, 2.0), (Task::Reversal, 1.0), (Task::Multilingual, 1.0)]);
        Self {
            seed: 0,
            out_dir: default_out(),
            model: ModelConfig::toy(),
            optimizer: AdamWConfig::default(),
            coeff_decay: CoeffDecay::Spanning,
            averaging: LossAveraging::GlobalTokens,
            reset_moments: false,
            stages: vec![
                st(stage("pretrain", 60, 10, 3e-3, 1e4, 8), 128, false, LossTokens::All, pretrain_mix.clone()),
                st(stage("anneal", 20, 5, 2e-3, 1e4, 8), 128, false, LossTokens::All, pretrain_mix),
                st(
                    stage("long_context", 10, 2, 1e-3, 1e6, 2),
                    512,
                    false,
                    LossTokens::All,
                    mix(&[
                        (Task::LineRetrieval, 1.0),
                        (Task::Copy, 1.0),
                        (Task::Reversal, 1.0),
                        (Task::Multilingual, 1.0),
                    ]),
                ),
                st(
                    stage("sft1", 20, 4, 1e-3, 1e6, 8),
                    128,
                    true,
                    LossTokens::Response,
                    mix(&[(Task::ModArith, 1.0), (Task::Multilingual, 1.0), (Task::Copy, 1.0)]),
                ),
                st(
                    stage("sft2", 20, 4, 5e-4, 1e6, 8),
                    128,
                    true,
                    LossTokens::Response,
                    DataRecipe {
                        longcot_keep: 0.5,
                        ..mix(&[(Task::ModArith, 2.0), (Task::Reversal, 1.0), (Task::Multilingual, 1.0)])
                    },
                ),
            ],
            alignment: Some(AlignmentConfig {
                prompts: 40,
                steps: 20,
                ..AlignmentConfig::default()
            }),
        }
    }

    pub fn plan(&self) -> StagePlan {
        StagePlan {
            stages: self.stages.iter().map(|s| s.schedule.clone()).collect(),
            coeff_decay: self.coeff_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.plan().validate()?;
        for s in &self.stages {
            let bad = |m: String| Err(HarnessError::Config(format!("stage {}: {m}", s.schedule.name)));
            if s.context < 2 {
                return bad("context must be at least 2".into());
            }
            if s.data.sources.is_empty() || s.data.sources.iter().any(|w| w.weight.is_nan() || w.weight < 0.0) {
                return bad("data sources need non-negative weights".into());
            }
            if s.data.sources.iter().map(|w| w.weight).sum::<f64>() <= 0.0 {
                return bad("data source weights sum to zero".into());
            }
            if !(0.0..=1.0).contains(&s.data.longcot_keep) || s.data.pool_size == 0 {
                return bad("longcot_keep must be in [0, 1] and pool_size positive".into());
            }
            if s.schedule.global_batch != s.schedule.micro_batch * s.schedule.grad_accum_steps {
                return bad("global_batch must equal micro_batch * grad_accum_steps".into());
            }
            if let Some(f) = &s.freeze {
                f.validate(&self.model)?;
            }
        }
        if let Some(a) = &self.alignment {
            if a.candidates < 2 || a.prompts == 0 || a.batch == 0 || a.beta.is_nan() || a.beta <= 0.0 {
                return Err(HarnessError::Config(
                    "alignment needs candidates >= 2, prompts > 0, batch > 0 and beta > 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }
}
