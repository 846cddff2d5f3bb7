use std::path::Path;

use deskmoe_align::{
    build_preference_pairs, dpo_loss_on_tape, render_template, sequence_logprob, write_preferences, CandidateGenerator,
    ChatMode, DiscardReason, PairKind, PairOutcome, PreferencePair, SeededScorer, TemplateGenerator,
};
use deskmoe_core::model::{ModelConfig, ParamStore};
use deskmoe_core::optim::{adamw_step, AdamWConfig, OptimizerState};
use deskmoe_core::Tape;
use deskmoe_tokenizer::{train_bpe, SubwordVocab, DEFAULT_MAX_PIECE_LEN};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::AlignmentConfig;
use crate::data::{generate, Task};
use crate::metrics::{DpoMetrics, MetricsRecord, SCHEMA_VERSION};
use crate::trainer::Trainer;
use crate::{HarnessError, Result};

/// Prompt, chosen and rejected token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPair {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoSettings {
    pub beta: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct DpoRun {
    pub params: ParamStore,
    /// Mean chosen-minus-rejected policy log-prob before training and after
    /// each completed epoch (plus the final partial one).
    pub epoch_margins: Vec<f64>,
    pub losses: Vec<f64>,
}

fn logp(tape: &mut Tape, params: &ParamStore, cfg: &ModelConfig, prompt: &[usize], resp: &[usize]) -> Result<f64> {
    let bound = params.bind(tape)?;
    let v = sequence_logprob(tape, &bound, cfg, prompt, resp)?;
    Ok(tape.value(v).item())
}

/// Per-pair `(log p(chosen), log p(rejected))`.
pub fn pair_logps(params: &ParamStore, cfg: &ModelConfig, pairs: &[TokenPair]) -> Result<Vec<(f64, f64)>> {
    pairs
        .iter()
        .map(|p| {
            Ok((
                logp(&mut Tape::new(), params, cfg, &p.prompt, &p.chosen)?,
                logp(&mut Tape::new(), params, cfg, &p.prompt, &p.rejected)?,
            ))
        })
        .collect()
}

pub fn mean_margin(params: &ParamStore, cfg: &ModelConfig, pairs: &[TokenPair]) -> Result<f64> {
    let lp = pair_logps(params, cfg, pairs)?;
    Ok(lp.iter().map(|(c, r)| c - r).sum::<f64>() / lp.len().max(1) as f64)
}

/// DPO against a frozen copy of the starting parameters, with constant
/// learning rate and shuffled epochs.
pub fn train_dpo(
    mut params: ParamStore,
    cfg: &ModelConfig,
    pairs: &[TokenPair],
    s: &DpoSettings,
    sink: &mut dyn FnMut(MetricsRecord) -> Result<()>,
) -> Result<DpoRun> {
    if pairs.is_empty() {
        return Err(HarnessError::Config("no preference pairs to train on".into()));
    }
    let reference = pair_logps(&params, cfg, pairs)?;
    let mut margins = vec![reference.iter().map(|(c, r)| c - r).sum::<f64>() / pairs.len() as f64];
    let mut opt = OptimizerState::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(s.steps);
    for step in 0..s.steps {
        if order.len() < s.batch {
            let mut fresh: Vec<usize> = (0..pairs.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let batch: Vec<usize> = order.drain(..s.batch.min(pairs.len())).collect();
        params.zero_grads();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape)?;
        let (mut cv, mut rv, mut rc, mut rr) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &i in &batch {
            let p = &pairs[i];
            cv.push(sequence_logprob(&mut tape, &bound, cfg, &p.prompt, &p.chosen)?);
            rv.push(sequence_logprob(&mut tape, &bound, cfg, &p.prompt, &p.rejected)?);
            rc.push(reference[i].0);
            rr.push(reference[i].1);
        }
        let batch_margin = cv
            .iter()
            .zip(&rv)
            .map(|(&c, &r)| tape.value(c).item() - tape.value(r).item())
            .sum::<f64>()
            / batch.len() as f64;
        let loss = dpo_loss_on_tape(&mut tape, &cv, &rv, &rc, &rr, s.beta)?;
        let loss_value = tape.value(loss).item();
        tape.backward(loss)?;
        bound.collect_grads(&tape, &mut params, 1.0);
        adamw_step(&mut params, &mut opt, s.lr)?;
        losses.push(loss_value);
        let epoch_end = order.len() < s.batch || step + 1 == s.steps;
        let epoch_margin = if epoch_end {
            let m = mean_margin(&params, cfg, pairs)?;
            margins.push(m);
            Some(m)
        } else {
            None
        };
        sink(MetricsRecord::Dpo(DpoMetrics {
            schema_version: SCHEMA_VERSION,
            step,
            dpo: loss_value,
            lr: s.lr,
            batch_margin,
            epoch_margin,
        }))?;
    }
    Ok(DpoRun {
        params,
        epoch_margins: margins,
        losses,
    })
}

/// Text codec for the preference phase.
#[derive(Debug, Clone)]
pub enum Codec {
    Bytes,
    Bpe(SubwordVocab),
}

impl Codec {
    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self {
            Codec::Bytes => text.bytes().map(usize::from).collect(),
            Codec::Bpe(v) => v.encode(text).into_iter().map(|i| i as usize).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Discard {
    pub prompt: String,
    #[serde(flatten)]
    pub reason: DiscardReason,
}

/// One prompt's sampled candidates and ground truth.
#[derive(Debug, Clone)]
pub struct PromptCandidates {
    pub prompt: String,
    pub truth: String,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PreferenceSet {
    pub pairs: Vec<PreferencePair>,
    pub discards: Vec<Discard>,
    /// Every prompt in generation order.
    pub prompts: Vec<PromptCandidates>,
}

/// Math prompts, seeded candidates and scorer, and the verified pair rule.
pub fn build_math_preferences(a: &AlignmentConfig, seed: u64) -> Result<PreferenceSet> {
    let generator = TemplateGenerator {
        seed,
        max_accuracy: a.max_accuracy,
    };
    let scorer = SeededScorer { seed: seed ^ 0x5c0e };
    let mut set = PreferenceSet {
        pairs: Vec::new(),
        discards: Vec::new(),
        prompts: Vec::new(),
    };
    for item in generate(Task::ModArith, a.prompts, seed ^ 0xd90) {
        let truth = item.truth.clone().expect("arithmetic items carry a truth");
        let cands = generator.generate(&item.prompt, Some(&truth), a.candidates);
        match build_preference_pairs(&item.prompt, &cands, &scorer, &PairKind::Math { truth: truth.clone() })? {
            PairOutcome::Pair(p) => set.pairs.push(*p),
            PairOutcome::Discard(reason) => set.discards.push(Discard {
                prompt: item.prompt.clone(),
                reason,
            }),
        }
        set.prompts.push(PromptCandidates {
            prompt: item.prompt,
            truth,
            candidates: cands,
        });
    }
    Ok(set)
}

/// Trains a BPE vocabulary no larger than the model's on the rendered
/// preference texts.
pub fn preference_codec(pairs: &[PreferencePair], vocab_size: usize) -> Result<Codec> {
    if vocab_size <= 256 {
        return Ok(Codec::Bytes);
    }
    let mut corpus = Vec::new();
    for p in pairs.iter().take(64) {
        corpus.push(render_template(ChatMode::LongCot, &p.prompt)?);
        corpus.push(p.chosen.clone());
        corpus.push(p.rejected.clone());
    }
    Ok(Codec::Bpe(train_bpe(&corpus, vocab_size, DEFAULT_MAX_PIECE_LEN)?))
}

pub fn tokenize_pairs(pairs: &[PreferencePair], codec: &Codec) -> Result<Vec<TokenPair>> {
    pairs
        .iter()
        .map(|p| {
            Ok(TokenPair {
                prompt: codec.encode(&render_template(ChatMode::LongCot, &p.prompt)?),
                chosen: codec.encode(&p.chosen),
                rejected: codec.encode(&p.rejected),
            })
        })
        .collect()
}

/// Builds preferences, writes them to `out`, and runs DPO on the trainer's
/// parameters.
pub fn alignment_phase(
    trainer: &Trainer,
    a: &AlignmentConfig,
    seed: u64,
    out: &Path,
    sink: &mut dyn FnMut(MetricsRecord) -> Result<()>,
) -> Result<DpoRun> {
    let set = build_math_preferences(a, seed)?;
    write_preferences(&out.join("preferences.ndjson"), &set.pairs)?;
    let mut w = crate::metrics::MetricsWriter::create_raw(&out.join("discards.ndjson"))?;
    for d in &set.discards {
        w.write_value(d)?;
    }
    w.finish()?;
    let codec = preference_codec(&set.pairs, trainer.model.vocab_size)?;
    if let Codec::Bpe(v) = &codec {
        v.save(&out.join("dpo_vocab.txt"))?;
    }
    let pairs = tokenize_pairs(&set.pairs, &codec)?;
    let settings = DpoSettings {
        beta: a.beta,
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        seed,
    };
    train_dpo(trainer.params.clone(), &trainer.model, &pairs, &settings, sink)
}
