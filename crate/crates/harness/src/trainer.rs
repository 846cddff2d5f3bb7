use std::path::{Path, PathBuf};
use std::time::Instant;

use deskmoe_core::model::{apply_freeze_plan, decoder_forward, lm_cross_entropy, save_checkpoint, ModelConfig, ParamStore};
use deskmoe_core::moe::RoutingOutcome;
use deskmoe_core::optim::{
    accumulated_step, lr_at_step, moe_coeff_at_step, AdamWConfig, LossAveraging, MicroInfo, MicroLoss, OptimizerState,
    StagePlan,
};
use deskmoe_core::packing::{pack_samples, AttentionSpec, PackPolicy, Sample};
use deskmoe_core::{Precision, Tape};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DataRecipe, ExperimentConfig, LossTokens, StageConfig};
use crate::data::{generate, Item};
use crate::metrics::{MetricsRecord, MetricsWriter, MomentPolicy, StageEnd, StageStart, StepMetrics, SCHEMA_VERSION};
use crate::{HarnessError, Result};

/// A token sequence whose next-token predictions count toward the loss
/// from index `loss_from` on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainSample {
    pub tokens: Vec<usize>,
    pub loss_from: usize,
}

impl TrainSample {
    /// Byte tokens of prompt then response.
    pub fn from_item(item: &Item, loss_on: LossTokens) -> Self {
        let tokens: Vec<usize> = item.prompt.bytes().chain(item.response.bytes()).map(usize::from).collect();
        let loss_from = match loss_on {
            LossTokens::All => 1,
            LossTokens::Response => item.prompt.len().max(1),
        };
        Self { tokens, loss_from }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn loss_tokens(&self) -> usize {
        self.tokens.len().saturating_sub(self.loss_from.max(1))
    }
}

/// Samples laid end to end with block-diagonal causal attention; equivalent
/// to a padded batch of the same samples.
#[derive(Debug, Clone)]
pub struct MicroInput {
    pub tokens: Vec<usize>,
    pub spec: AttentionSpec,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
    pub samples: usize,
}

impl MicroInput {
    pub fn new(samples: &[&TrainSample]) -> Self {
        let n: usize = samples.iter().map(|s| s.len()).sum();
        let mut m = MicroInput {
            tokens: Vec::with_capacity(n),
            spec: AttentionSpec {
                segments: Vec::with_capacity(n),
                positions: Vec::with_capacity(n),
            },
            targets: vec![0; n],
            weights: vec![0.0; n],
            samples: samples.len(),
        };
        for (k, s) in samples.iter().enumerate() {
            let base = m.tokens.len();
            m.tokens.extend_from_slice(&s.tokens);
            m.spec.segments.extend(std::iter::repeat_n(Some(k as u32), s.len()));
            m.spec.positions.extend(0..s.len());
            for j in s.loss_from.max(1)..s.len() {
                m.targets[base + j - 1] = s.tokens[j];
                m.weights[base + j - 1] = 1.0;
            }
        }
        m
    }

    pub fn loss_tokens(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Learning rate, router loss coefficients and rotary base for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub rope_base: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub lm: f64,
    pub aux: f64,
    pub z: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub expert_counts: Vec<usize>,
    pub count_cv: f64,
    pub topk_exact: bool,
    pub tokens: f64,
}

fn topk_exact(o: &RoutingOutcome) -> bool {
    o.topk_idx.iter().all(|sel| {
        let mut s = sel.clone();
        s.sort_unstable();
        s.dedup();
        s.len() == o.top_k && s.iter().all(|&e| e < o.n_experts)
    }) && o.c_agg.iter().sum::<usize>() == o.batch * o.top_k
}

/// Model, parameters and optimizer state carried across stages.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub opt: OptimizerState,
    pub averaging: LossAveraging,
    pub precision: Precision,
}

impl Trainer {
    pub fn new(model: ModelConfig, seed: u64, optimizer: AdamWConfig) -> Result<Self> {
        let params = ParamStore::init(&model, seed)?;
        Ok(Self {
            model,
            params,
            opt: OptimizerState::new(optimizer),
            averaging: LossAveraging::GlobalTokens,
            precision: Precision::F64,
        })
    }

    fn cfg_with_base(&self, rope_base: f64) -> ModelConfig {
        ModelConfig {
            rope_base,
            ..self.model.clone()
        }
    }

    /// One optimizer update accumulated over `micro` batches.
    pub fn step(&mut self, ctx: &StepContext, micro: &[MicroInput]) -> Result<StepOutcome> {
        let cfg = self.cfg_with_base(ctx.rope_base);
        let infos: Vec<MicroInfo> = micro
            .iter()
            .map(|m| MicroInfo {
                tokens: m.loss_tokens(),
                samples: m.samples,
            })
            .collect();
        let mut outcomes: Vec<RoutingOutcome> = Vec::new();
        let (mut aux, mut z) = (0.0, 0.0);
        let report = accumulated_step(
            &mut self.params,
            &mut self.opt,
            ctx.lr,
            &infos,
            self.averaging,
            self.precision,
            |i, tape: &mut Tape, bound| {
                let m = &micro[i];
                let out = decoder_forward(tape, bound, &cfg, &m.tokens, &m.spec)?;
                let lm = lm_cross_entropy(tape, out.logits, &m.targets, &m.weights)?;
                let (a, zz) = out.moe.means(tape)?;
                let mut extra = None;
                for (term, c, acc) in [(a, ctx.alpha, &mut aux), (zz, ctx.beta, &mut z)] {
                    if let Some(t) = term {
                        *acc += tape.value(t).item();
                        if c > 0.0 {
                            let s = tape.scale(t, c)?;
                            extra = Some(match extra {
                                Some(e) => tape.add(e, s)?,
                                None => s,
                            });
                        }
                    }
                }
                outcomes.extend(out.moe.outcomes);
                Ok(MicroLoss { lm_sum: lm.sum, extra })
            },
        )?;
        let n = micro.len() as f64;
        let (aux, z) = (aux / n, z / n);
        let mut counts = vec![0; self.model.n_specialized_experts];
        for o in &outcomes {
            for (c, a) in counts.iter_mut().zip(&o.c_agg) {
                *c += a;
            }
        }
        Ok(StepOutcome {
            lm: report.lm_loss,
            aux,
            z,
            total: report.lm_loss + ctx.alpha * aux + ctx.beta * z,
            grad_norm: report.step.grad_norm,
            count_cv: deskmoe_core::moe::count_cv(&counts),
            expert_counts: counts,
            topk_exact: outcomes.iter().all(topk_exact),
            tokens: report.denominator,
        })
    }

    /// Token-mean NLL of `samples` at `rope_base`, `batch` samples per pass.
    pub fn eval_loss(&self, samples: &[TrainSample], rope_base: f64, batch: usize) -> Result<f64> {
        let cfg = self.cfg_with_base(rope_base);
        let (mut sum, mut count) = (0.0, 0.0);
        for chunk in samples.chunks(batch.max(1)) {
            let refs: Vec<&TrainSample> = chunk.iter().collect();
            let m = MicroInput::new(&refs);
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape)?;
            let out = decoder_forward(&mut tape, &bound, &cfg, &m.tokens, &m.spec)?;
            let lm = lm_cross_entropy(&mut tape, out.logits, &m.targets, &m.weights)?;
            sum += tape.value(lm.sum).item();
            count += lm.count;
        }
        if count == 0.0 {
            return Err(HarnessError::Config("evaluation set has no loss tokens".into()));
        }
        Ok(sum / count)
    }
}

/// Per-source sample pools for a stage and the weighted draw over them.
pub struct DataPool {
    sources: Vec<Vec<TrainSample>>,
    chooser: WeightedIndex<f64>,
}

impl DataPool {
    pub fn build(recipe: &DataRecipe, loss_on: LossTokens, context: usize, seed: u64) -> Result<Self> {
        let mut keep_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut sources = Vec::with_capacity(recipe.sources.len());
        for (k, src) in recipe.sources.iter().enumerate() {
            let items = generate(src.task, recipe.pool_size, seed.wrapping_add(k as u64));
            let mut pool = Vec::with_capacity(items.len());
            for it in &items {
                if it.longcot && keep_rng.random::<f64>() >= recipe.longcot_keep {
                    continue;
                }
                let s = TrainSample::from_item(it, loss_on);
                if s.len() > context {
                    return Err(HarnessError::Config(format!(
                        "{} sample of {} tokens exceeds context {context}",
                        src.task,
                        s.len()
                    )));
                }
                pool.push(s);
            }
            sources.push(pool);
        }
        let weights: Vec<f64> = recipe
            .sources
            .iter()
            .zip(&sources)
            .map(|(s, p)| if p.is_empty() { 0.0 } else { s.weight })
            .collect();
        let chooser = WeightedIndex::new(&weights)
            .map_err(|e| HarnessError::Config(format!("data mixture: {e}")))?;
        Ok(Self { sources, chooser })
    }

    pub fn draw<'a>(&'a self, rng: &mut ChaCha8Rng, n: usize) -> Vec<&'a TrainSample> {
        (0..n)
            .map(|_| {
                let pool = &self.sources[self.chooser.sample(rng)];
                &pool[rng.random_range(0..pool.len())]
            })
            .collect()
    }
}

/// Splits a step's samples into micro-batches: FFD packs of `context`
/// tokens when packing, otherwise `micro_batch` samples each. Also returns
/// real tokens over charged slot tokens.
pub fn build_micro_batches(drawn: &[&TrainSample], sc: &StageConfig) -> Result<(Vec<MicroInput>, f64)> {
    let real: usize = drawn.iter().map(|s| s.len()).sum();
    if sc.pack {
        let samples: Vec<Sample> = drawn.iter().enumerate().map(|(i, s)| Sample::new(i, s.tokens.clone())).collect();
        let (packs, report) = pack_samples(&samples, sc.context, PackPolicy::FirstFitDecreasing)?;
        let micro = packs
            .iter()
            .map(|p| MicroInput::new(&p.sample_order().into_iter().map(|i| drawn[i]).collect::<Vec<_>>()))
            .collect();
        Ok((micro, report.packing_ratio))
    } else {
        let mut charged = 0;
        let micro = drawn
            .chunks(sc.schedule.micro_batch)
            .map(|c| {
                charged += c.len() * c.iter().map(|s| s.len()).max().unwrap_or(0);
                MicroInput::new(c)
            })
            .collect();
        Ok((micro, real as f64 / charged.max(1) as f64))
    }
}

/// Held-out samples drawn from the stage mixture with a disjoint seed.
pub fn held_out(sc: &StageConfig, seed: u64, n: usize) -> Result<Vec<TrainSample>> {
    let pool = DataPool::build(&sc.data, sc.loss_on, sc.context, seed ^ 0x0e7a_1000)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
    Ok(pool.draw(&mut rng, n).into_iter().cloned().collect())
}

fn stage_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64 * 7919)
}

impl Trainer {
    /// Applies the stage's trainability and moment policy and runs its
    /// steps, passing every record to `sink`.
    pub fn run_stage(
        &mut self,
        config: &ExperimentConfig,
        index: usize,
        sink: &mut dyn FnMut(MetricsRecord) -> Result<()>,
    ) -> Result<()> {
        let plan: StagePlan = config.plan();
        let sc = &config.stages[index];
        let name = sc.schedule.name.clone();
        let seed = stage_seed(config.seed, index);
        let wrap = |step: usize| {
            let name = name.clone();
            move |e: HarnessError| HarnessError::Stage {
                stage: name,
                step,
                source: Box::new(e),
            }
        };
        match &sc.freeze {
            Some(f) => self.params = apply_freeze_plan(&self.params, &self.model, f, seed).map_err(|e| wrap(0)(e.into()))?.params,
            None => self.params.iter_mut().for_each(|(_, t)| t.set_requires_grad(true)),
        }
        if config.reset_moments {
            self.opt = OptimizerState::new(self.opt.config);
        }
        let start = plan.global_step(index, 0)?;
        sink(MetricsRecord::StageStart(StageStart {
            schema_version: SCHEMA_VERSION,
            stage: name.clone(),
            stage_index: index,
            global_step: start,
            rope_base: sc.schedule.rope_base,
            context: sc.context,
            trainable_params: self.params.trainable_count(),
            moments: if config.reset_moments {
                MomentPolicy::Reset
            } else {
                MomentPolicy::Persist
            },
            optimizer_step: self.opt.step,
        }))?;
        let pool = DataPool::build(&sc.data, sc.loss_on, sc.context, seed).map_err(wrap(0))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for step in 0..sc.schedule.total_steps {
            let lr = lr_at_step(&plan, index, step)?;
            let (alpha, beta) = moe_coeff_at_step(&plan, index, step)?;
            let drawn = pool.draw(&mut rng, sc.schedule.global_batch);
            let (micro, packing_ratio) = build_micro_batches(&drawn, sc).map_err(wrap(step))?;
            let ctx = StepContext {
                lr,
                alpha,
                beta,
                rope_base: sc.schedule.rope_base,
            };
            let o = self.step(&ctx, &micro).map_err(wrap(step))?;
            sink(MetricsRecord::Step(StepMetrics {
                schema_version: SCHEMA_VERSION,
                stage: name.clone(),
                step,
                global_step: start + step,
                lm: o.lm,
                aux: o.aux,
                z: o.z,
                total: o.total,
                lr,
                alpha,
                beta,
                grad_norm: o.grad_norm,
                expert_counts: o.expert_counts,
                count_cv: o.count_cv,
                topk_exact: o.topk_exact,
                tokens: o.tokens,
                packing_ratio,
            }))?;
        }
        let eval = held_out(sc, config.seed, 16)?;
        let eval_loss = self.eval_loss(&eval, sc.schedule.rope_base, 8)?;
        sink(MetricsRecord::StageEnd(StageEnd {
            schema_version: SCHEMA_VERSION,
            stage: name,
            global_step: start + sc.schedule.total_steps,
            eval_loss,
        }))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub records: usize,
    pub stage_eval_loss: Vec<(String, f64)>,
    pub dpo_margins: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct Timing<'a> {
    kind: &'a str,
    index: usize,
    elapsed_ms: u128,
}

/// Runs every stage in order, then the optional DPO phase, writing
/// `metrics.ndjson`, per-stage checkpoints and `final/` under the output
/// directory. Wall-clock times go to `timings.ndjson` so the metrics file
/// stays byte-identical across runs with the same seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    let out = &config.out_dir;
    std::fs::create_dir_all(out.join("checkpoints"))?;
    std::fs::write(out.join("config.toml"), config.to_toml()?)?;
    let mut metrics = MetricsWriter::create(&out.join("metrics.ndjson"))?;
    let mut timings = MetricsWriter::create_raw(&out.join("timings.ndjson"))?;
    let clock = Instant::now();
    let mut trainer = Trainer::new(config.model.clone(), config.seed, config.optimizer)?;
    trainer.averaging = config.averaging;
    let mut records = 0;
    let mut stage_eval_loss = Vec::new();
    for index in 0..config.stages.len() {
        trainer.run_stage(config, index, &mut |r| {
            records += 1;
            if let MetricsRecord::StageEnd(e) = &r {
                stage_eval_loss.push((e.stage.clone(), e.eval_loss));
            }
            metrics.write(&r)
        })?;
        timings.write_value(&Timing {
            kind: "stage",
            index,
            elapsed_ms: clock.elapsed().as_millis(),
        })?;
        let name = &config.stages[index].schedule.name;
        save_checkpoint(&out.join("checkpoints").join(name), &trainer.model, &trainer.params)?;
    }
    let mut dpo_margins = None;
    if let Some(a) = &config.alignment {
        let run = crate::dpo::alignment_phase(&trainer, a, config.seed, out, &mut |r| {
            records += 1;
            metrics.write(&r)
        })?;
        trainer.params = run.params;
        dpo_margins = Some(run.epoch_margins);
        timings.write_value(&Timing {
            kind: "dpo",
            index: 0,
            elapsed_ms: clock.elapsed().as_millis(),
        })?;
    }
    save_checkpoint(&out.join("final"), &trainer.model, &trainer.params)?;
    metrics.finish()?;
    timings.finish()?;
    Ok(RunSummary {
        out_dir: out.clone(),
        records,
        stage_eval_loss,
        dpo_margins,
    })
}

pub fn metrics_path(run_dir: &Path) -> PathBuf {
    run_dir.join("metrics.ndjson")
}
