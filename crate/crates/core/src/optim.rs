//! AdamW with global-norm clipping, staged learning-rate schedules, router
//! loss coefficient decay, and gradient accumulation over micro-batches.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bound, ParamStore};
use crate::tensor::{Precision, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    #[serde(default)]
    pub schedule_kind: ScheduleKind,
    #[serde(default)]
    pub alpha_max: f64,
    #[serde(default)]
    pub beta_max: f64,
    pub rope_base: f64,
    pub global_batch: usize,
    pub micro_batch: usize,
    pub grad_accum_steps: usize,
}

/// How the router loss coefficients move over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoeffDecay {
    /// Linear from the first stage's maxima to zero at the plan's last step.
    #[default]
    Spanning,
    /// Linear from each stage's maxima to zero at that stage's last step.
    PerStage,
    /// Each stage's maxima, held fixed.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub coeff_decay: CoeffDecay,
}

impl StagePlan {
    pub fn new(stages: Vec<Stage>) -> Self {
        Self {
            stages,
            coeff_decay: CoeffDecay::Spanning,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("stage plan has no stages".into()));
        }
        for s in &self.stages {
            let bad = |m: &str| Err(Error::Config(format!("stage {}: {m}", s.name)));
            if s.total_steps == 0 {
                return bad("total_steps must be positive");
            }
            if s.warmup_steps > s.total_steps {
                return bad("warmup_steps exceeds total_steps");
            }
            if !(s.lr_min >= 0.0 && s.lr_min <= s.lr_max) {
                return bad("need 0 <= lr_min <= lr_max");
            }
            if s.grad_accum_steps == 0 || s.micro_batch == 0 {
                return bad("grad_accum_steps and micro_batch must be at least 1");
            }
            if s.alpha_max < 0.0 || s.beta_max < 0.0 {
                return bad("loss coefficients must be non-negative");
            }
            if s.rope_base.is_nan() || s.rope_base <= 0.0 {
                return bad("rope_base must be positive");
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.total_steps).sum()
    }

    /// Plan-wide index of `step` within `stage`.
    pub fn global_step(&self, stage: usize, step: usize) -> Result<usize> {
        let s = self
            .stages
            .get(stage)
            .ok_or_else(|| Error::Schedule(format!("no stage {stage}")))?;
        if step >= s.total_steps {
            return Err(Error::Schedule(format!(
                "step {step} outside stage {} of {} steps",
                s.name, s.total_steps
            )));
        }
        Ok(self.stages[..stage].iter().map(|s| s.total_steps).sum::<usize>() + step)
    }
}

/// Linear warmup from 0 to `lr_max`, then cosine decay reaching `lr_min` at
/// the stage's last step.
pub fn lr_at_step(plan: &StagePlan, stage: usize, step: usize) -> Result<f64> {
    plan.global_step(stage, step)?;
    let s = &plan.stages[stage];
    if step < s.warmup_steps {
        return Ok(s.lr_max * step as f64 / s.warmup_steps as f64);
    }
    if s.schedule_kind == ScheduleKind::Constant {
        return Ok(s.lr_max);
    }
    let span = s.total_steps - 1 - s.warmup_steps;
    if span == 0 {
        return Ok(s.lr_max);
    }
    let progress = (step - s.warmup_steps) as f64 / span as f64;
    Ok(s.lr_min + (s.lr_max - s.lr_min) * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Router aux and z loss coefficients `(alpha, beta)` at a step.
pub fn moe_coeff_at_step(plan: &StagePlan, stage: usize, step: usize) -> Result<(f64, f64)> {
    let g = plan.global_step(stage, step)?;
    let (maxima, pos, last) = match plan.coeff_decay {
        CoeffDecay::Spanning => (&plan.stages[0], g, plan.total_steps() - 1),
        CoeffDecay::PerStage => (&plan.stages[stage], step, plan.stages[stage].total_steps - 1),
        CoeffDecay::Constant => (&plan.stages[stage], 0, 0),
    };
    let frac = if last == 0 { 1.0 } else { 1.0 - pos as f64 / last as f64 };
    Ok((maxima.alpha_max * frac, maxima.beta_max * frac))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm after clipping.
    pub clipped_norm: f64,
}

/// Global L2 norm of the gradients of trainable parameters.
pub fn global_grad_norm(params: &ParamStore) -> f64 {
    params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// One AdamW update from the gradients stored on `params`.
///
/// Gradients are first rescaled so their global norm is at most the clip
/// threshold. Weight decay is decoupled and touches trainable parameters
/// only; frozen parameters are never modified. With `lr == 0` only the step
/// counter advances.
pub fn adamw_step(params: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<StepReport> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    for (name, t) in params.iter() {
        if t.requires_grad() && t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric(format!("non-finite gradient for {name}; step skipped")));
        }
    }
    let cfg = state.config;
    let norm = global_grad_norm(params);
    let scale = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let report = StepReport {
        grad_norm: norm,
        clipped_norm: norm * scale,
    };
    if lr == 0.0 {
        return Ok(report);
    }
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        if !p.requires_grad() {
            continue;
        }
        let n = p.numel();
        let g: Vec<f64> = match p.grad() {
            Some(g) => g.iter().map(|x| x * scale).collect(),
            None => vec![0.0; n],
        };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
        }
    }
    Ok(report)
}

/// Denominator used to normalize the summed LM loss of a global batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossAveraging {
    /// Loss-bearing tokens across the whole global batch.
    #[default]
    GlobalTokens,
    /// Samples across the whole global batch.
    GlobalSamples,
    /// Each micro-batch averaged over its own tokens, then micro-batches
    /// averaged. Differs from the large-batch result when token counts vary.
    NaivePerMicro,
}

/// Counts of one micro-batch, known before its forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroInfo {
    pub tokens: f64,
    pub samples: usize,
}

/// Terms produced by a micro-batch forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MicroLoss {
    /// Summed LM loss over the micro-batch.
    pub lm_sum: Var,
    /// Already-normalized extra objective (router losses); averaged over
    /// micro-batches.
    pub extra: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccumReport {
    /// LM loss of the global batch under the chosen averaging.
    pub lm_loss: f64,
    /// Mean of the extra terms over micro-batches.
    pub extra: f64,
    pub denominator: f64,
    pub step: StepReport,
}

/// Runs `forward` for each micro-batch, backpropagates its loss scaled by
/// the global denominator, sums gradients in micro-batch order, and applies
/// one AdamW update.
pub fn accumulated_step<F>(
    params: &mut ParamStore,
    state: &mut OptimizerState,
    lr: f64,
    micro: &[MicroInfo],
    averaging: LossAveraging,
    precision: Precision,
    mut forward: F,
) -> Result<AccumReport>
where
    F: FnMut(usize, &mut Tape, &Bound) -> Result<MicroLoss>,
{
    if micro.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let tokens: f64 = micro.iter().map(|m| m.tokens).sum();
    let samples: usize = micro.iter().map(|m| m.samples).sum();
    let denominator = match averaging {
        LossAveraging::GlobalTokens | LossAveraging::NaivePerMicro => tokens,
        LossAveraging::GlobalSamples => samples as f64,
    };
    if denominator <= 0.0 {
        return Err(Error::EmptyBatch);
    }
    let n_micro = micro.len() as f64;
    params.zero_grads();
    let mut lm_loss = 0.0;
    let mut extra_total = 0.0;
    for (i, info) in micro.iter().enumerate() {
        let mut tape = Tape::with_precision(precision);
        let bound = params.bind(&mut tape)?;
        let out = forward(i, &mut tape, &bound)?;
        let lm_scale = match averaging {
            LossAveraging::NaivePerMicro => {
                if info.tokens <= 0.0 {
                    return Err(Error::EmptyBatch);
                }
                1.0 / (info.tokens * n_micro)
            }
            _ => 1.0 / denominator,
        };
        lm_loss += tape.value(out.lm_sum).item() * lm_scale;
        let mut loss = tape.scale(out.lm_sum, lm_scale)?;
        if let Some(e) = out.extra {
            extra_total += tape.value(e).item();
            let e = tape.scale(e, 1.0 / n_micro)?;
            loss = tape.add(loss, e)?;
        }
        tape.backward(loss)?;
        bound.collect_grads(&tape, params, 1.0);
    }
    let step = adamw_step(params, state, lr)?;
    Ok(AccumReport {
        lm_loss,
        extra: extra_total / n_micro,
        denominator,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage1() -> Stage {
        Stage {
            name: "pretrain".into(),
            total_steps: 10_000,
            warmup_steps: 3000,
            lr_max: 3.0e-4,
            lr_min: 3.0e-5,
            schedule_kind: ScheduleKind::Cosine,
            alpha_max: 0.01,
            beta_max: 0.001,
            rope_base: 1e4,
            global_batch: 5760,
            micro_batch: 1,
            grad_accum_steps: 1,
        }
    }

    #[test]
    fn warmup_peak_final_and_midpoint() {
        let plan = StagePlan::new(vec![stage1()]);
        assert_eq!(lr_at_step(&plan, 0, 0).unwrap(), 0.0);
        assert!((lr_at_step(&plan, 0, 3000).unwrap() - 3.0e-4).abs() < 1e-18);
        assert!((lr_at_step(&plan, 0, 9999).unwrap() - 3.0e-5).abs() < 1e-18);
        // span 6999 is odd, so use an even-span plan for the exact midpoint
        let even = StagePlan::new(vec![Stage {
            total_steps: 3001 + 7000,
            ..stage1()
        }]);
        assert!((lr_at_step(&even, 0, 3000 + 3500).unwrap() - 1.65e-4).abs() < 1e-15);
        assert!(matches!(lr_at_step(&plan, 0, 10_000), Err(Error::Schedule(_))));
    }

    #[test]
    fn coefficient_decay() {
        let plan = StagePlan::new(vec![Stage {
            total_steps: 101,
            warmup_steps: 10,
            ..stage1()
        }]);
        assert_eq!(moe_coeff_at_step(&plan, 0, 0).unwrap(), (0.01, 0.001));
        assert_eq!(moe_coeff_at_step(&plan, 0, 100).unwrap(), (0.0, 0.0));
        let (a, b) = moe_coeff_at_step(&plan, 0, 50).unwrap();
        assert!((a - 0.005).abs() < 1e-15 && (b - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn spanning_decay_crosses_stages() {
        let s = Stage {
            total_steps: 50,
            warmup_steps: 0,
            ..stage1()
        };
        let plan = StagePlan::new(vec![s.clone(), Stage { alpha_max: 0.0, ..s }]);
        let (a_end1, _) = moe_coeff_at_step(&plan, 0, 49).unwrap();
        let (a_start2, _) = moe_coeff_at_step(&plan, 1, 0).unwrap();
        assert!(a_end1 > a_start2 && a_start2 > 0.0);
        assert_eq!(moe_coeff_at_step(&plan, 1, 49).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn plan_validation() {
        let bad = StagePlan::new(vec![Stage {
            warmup_steps: 20_000,
            ..stage1()
        }]);
        assert!(bad.validate().is_err());
        assert!(StagePlan::new(vec![stage1()]).validate().is_ok());
    }
}
