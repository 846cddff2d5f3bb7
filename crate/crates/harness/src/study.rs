use deskmoe_core::model::{FreezePlan, FreezeRule, LayerRange, LoraSpec, ParamStore, Submodule};
use deskmoe_core::packing::{ddp_group_pad, pack_samples, PackPolicy, Sample};
use serde::{Deserialize, Serialize};

use crate::config::{DataRecipe, ExperimentConfig, LossTokens, StageConfig};
use crate::data::Task;
use crate::trainer::{held_out, Trainer};
use crate::Result;

/// Token efficiency of the batching strategies on one workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PackingTable {
    pub capacity: usize,
    pub ranks: usize,
    pub fixed: f64,
    pub dynamic: f64,
    pub ddp: f64,
    pub packing: f64,
}

/// Ratios for `lengths` at `capacity`. DDP deals samples round-robin to
/// `ranks` and pads each step to the group's longest sample. `ranks` is
/// capped at the number of samples so no rank is left empty.
pub fn packing_table(lengths: &[usize], capacity: usize, ranks: usize) -> Result<PackingTable> {
    let samples: Vec<Sample> = lengths.iter().enumerate().map(|(i, &l)| Sample::new(i, vec![1; l])).collect();
    let (_, eff) = pack_samples(&samples, capacity, PackPolicy::FirstFitDecreasing)?;
    let ranks = ranks.clamp(1, lengths.len().max(1));
    let mut per_rank = vec![Vec::new(); ranks];
    for (i, &l) in lengths.iter().enumerate() {
        per_rank[i % ranks].push(l);
    }
    let ddp = ddp_group_pad(&per_rank, capacity)?;
    Ok(PackingTable {
        capacity,
        ranks,
        fixed: eff.fixed_ratio,
        dynamic: eff.dynamic_ratio,
        ddp: ddp.ratio,
        packing: eff.packing_ratio,
    })
}

/// Packing table over a stage's sample mixture.
pub fn stage_packing_table(sc: &StageConfig, seed: u64, n: usize, ranks: usize) -> Result<PackingTable> {
    let lengths: Vec<usize> = held_out(sc, seed, n)?.iter().map(|s| s.len()).collect();
    packing_table(&lengths, sc.context, ranks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeRow {
    pub setting: String,
    pub description: String,
    pub final_loss: f64,
    pub trainable_params: usize,
    /// Every frozen base tensor is bit-identical after training.
    pub frozen_unchanged: bool,
}

/// Toy analogues of the freeze and LoRA settings for an `n_layers` model.
pub fn default_freeze_plans(n_layers: usize) -> Vec<(String, String, FreezePlan)> {
    let half = (n_layers / 2).max(1);
    let rules = |r: Vec<FreezeRule>| FreezePlan::with_rules(r);
    let mlp = [Submodule::MlpGate, Submodule::MlpUp, Submodule::MlpDown];
    vec![
        ("Full".into(), "all parameters".into(), FreezePlan::full()),
        (
            "Freeze-1".into(),
            "last 1 layer full-parameter".into(),
            rules(vec![FreezeRule::full(LayerRange::Last(1))]),
        ),
        (
            "Freeze-2".into(),
            format!("last {half} layers full-parameter"),
            rules(vec![FreezeRule::full(LayerRange::Last(half))]),
        ),
        (
            "Freeze-3".into(),
            format!("first {half} layers full-parameter"),
            rules(vec![FreezeRule::full(LayerRange::First(half))]),
        ),
        (
            "Freeze-4".into(),
            format!("up_proj, down_proj of last {half} layers"),
            rules(vec![FreezeRule::only(LayerRange::Last(half), &[Submodule::MlpUp, Submodule::MlpDown])]),
        ),
        (
            "Freeze-6".into(),
            format!("gate_proj, up_proj, down_proj of last {half} layers"),
            rules(vec![FreezeRule::only(LayerRange::Last(half), &mlp)]),
        ),
        (
            "Freeze-7".into(),
            format!("self_attention of last {half} layers"),
            rules(vec![FreezeRule::only(LayerRange::Last(half), &[Submodule::Attention])]),
        ),
        (
            "LoRA-1".into(),
            "rank 4, all layers".into(),
            FreezePlan {
                rules: Vec::new(),
                lora: Some(LoraSpec {
                    rank: 4,
                    targets: Vec::new(),
                    layers: LayerRange::All,
                }),
            },
        ),
        (
            "LoRA-2".into(),
            "rank 8, MLP in all layers".into(),
            FreezePlan {
                rules: Vec::new(),
                lora: Some(LoraSpec {
                    rank: 8,
                    targets: mlp.to_vec(),
                    layers: LayerRange::All,
                }),
            },
        ),
    ]
}

/// Fine-tunes copies of `base` under each plan with the same data and
/// schedule and reports held-out loss on the fine-tuning mixture.
pub fn freeze_study(
    base: &Trainer,
    plans: &[(String, String, FreezePlan)],
    finetune: &StageConfig,
    seed: u64,
) -> Result<Vec<FreezeRow>> {
    let eval = held_out(finetune, seed, 32)?;
    let mut rows = Vec::with_capacity(plans.len());
    for (setting, description, plan) in plans {
        let mut t = base.clone();
        t.opt = deskmoe_core::optim::OptimizerState::new(t.opt.config);
        let cfg = ExperimentConfig {
            seed,
            model: t.model.clone(),
            stages: vec![StageConfig {
                freeze: Some(plan.clone()),
                ..finetune.clone()
            }],
            alignment: None,
            ..ExperimentConfig::toy()
        };
        t.run_stage(&cfg, 0, &mut |_| Ok(()))?;
        let before = deskmoe_core::model::apply_freeze_plan(&base.params, &base.model, plan, 0)?;
        let frozen_unchanged = frozen_identical(&before.params, &t.params);
        rows.push(FreezeRow {
            setting: setting.clone(),
            description: description.clone(),
            final_loss: t.eval_loss(&eval, finetune.schedule.rope_base, 8)?,
            trainable_params: before.trainable_count,
            frozen_unchanged,
        });
    }
    Ok(rows)
}

fn frozen_identical(before: &ParamStore, after: &ParamStore) -> bool {
    before
        .iter()
        .filter(|(_, t)| !t.requires_grad())
        .all(|(n, t)| after.get(n).is_some_and(|a| a.data() == t.data()))
}

/// Fine-tuning stage used by the freeze study: response-only loss on one
/// task.
pub fn freeze_finetune_stage(task: Task, steps: usize, lr: f64, rope_base: f64) -> StageConfig {
    StageConfig {
        schedule: crate::config::stage("finetune", steps, steps / 10, lr, rope_base, 8),
        context: 128,
        pack: false,
        loss_on: LossTokens::Response,
        data: DataRecipe::single(task),
        freeze: None,
    }
}

/// Pretrains a base model on an equal mixture of `tasks`, the starting point
/// shared by every row of the freeze study.
pub fn pretrain_base(
    model: deskmoe_core::model::ModelConfig,
    tasks: &[Task],
    seed: u64,
    steps: usize,
    lr: f64,
) -> Result<Trainer> {
    let mut t = Trainer::new(model.clone(), seed, Default::default())?;
    let sc = StageConfig {
        schedule: crate::config::stage("base", steps, steps / 10, lr, 1e4, 8),
        context: 128,
        pack: false,
        loss_on: LossTokens::All,
        data: DataRecipe {
            sources: tasks
                .iter()
                .map(|&task| crate::config::SourceWeight { task, weight: 1.0 })
                .collect(),
            longcot_keep: 1.0,
            pool_size: 1024,
        },
        freeze: None,
    };
    let cfg = ExperimentConfig {
        seed,
        model,
        stages: vec![sc],
        alignment: None,
        ..ExperimentConfig::toy()
    };
    t.run_stage(&cfg, 0, &mut |_| Ok(()))?;
    Ok(t)
}

/// Sizes for [`run_freeze_study`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeStudyConfig {
    pub n_layers: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub seed: u64,
}

impl Default for FreezeStudyConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            pretrain_steps: 300,
            finetune_steps: 300,
            pretrain_lr: 3e-3,
            finetune_lr: 3e-3,
            seed: 0,
        }
    }
}

/// Pretrains on copy and reversal, then fine-tunes on the multilingual
/// lexicon under every default plan.
pub fn run_freeze_study(c: &FreezeStudyConfig) -> Result<Vec<FreezeRow>> {
    let model = deskmoe_core::model::ModelConfig {
        n_layers: c.n_layers,
        ..deskmoe_core::model::ModelConfig::toy()
    };
    let base = pretrain_base(model, &[Task::Copy, Task::Reversal], c.seed, c.pretrain_steps, c.pretrain_lr)?;
    let ft = freeze_finetune_stage(Task::Multilingual, c.finetune_steps, c.finetune_lr, 1e4);
    freeze_study(&base, &default_freeze_plans(c.n_layers), &ft, c.seed)
}

/// Orderings checked on a freeze study table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FreezeShape {
    /// Full fine-tuning has the lowest loss of all rows.
    pub full_lowest: bool,
    /// Attention-only has the highest loss among the layer freeze plans.
    pub attention_highest: bool,
    /// Last-half layers beat first-half layers.
    pub last_beats_first: bool,
}

pub fn freeze_shape(rows: &[FreezeRow]) -> FreezeShape {
    let loss = |s: &str| rows.iter().find(|r| r.setting == s).map(|r| r.final_loss);
    let freeze: Vec<f64> = rows
        .iter()
        .filter(|r| r.setting.starts_with("Freeze-"))
        .map(|r| r.final_loss)
        .collect();
    let full = loss("Full");
    FreezeShape {
        full_lowest: full.is_some_and(|f| rows.iter().all(|r| r.setting == "Full" || r.final_loss > f)),
        attention_highest: loss("Freeze-7").is_some_and(|a| freeze.iter().all(|&l| l <= a)),
        last_beats_first: matches!((loss("Freeze-2"), loss("Freeze-3")), (Some(l), Some(f)) if l < f),
    }
}
