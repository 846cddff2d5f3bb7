use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use deskmoe_align::{read_preferences, write_preferences};
use deskmoe_core::model::load_checkpoint;
use deskmoe_curation::{
    dedup_and_decontaminate, read_samples, select_multilingual, write_removals, write_samples, HashedNgramEmbedder,
    SelectConfig,
};
use deskmoe_tokenizer::{compression_ratio, merge_subtokenizers, train_bpe, SubwordVocab, DEFAULT_MAX_PIECE_LEN};
use serde::Deserialize;

use crate::config::{AlignmentConfig, ExperimentConfig};
use crate::dpo::{build_math_preferences, preference_codec, tokenize_pairs, train_dpo, DpoSettings};
use crate::metrics::MetricsWriter;
use crate::report::{render_freeze_table, render_packing_table, report, FREEZE_FILE, PACKING_FILE};
use crate::study::{run_freeze_study, stage_packing_table, FreezeStudyConfig, PackingTable};
use crate::trainer::run_experiment;
use crate::{HarnessError, Result};

#[derive(Debug, Parser)]
#[command(name = "deskmoe", about = "Toy MoE training, tokenizer, data-selection and alignment runs")]
pub struct Cli {
    /// Experiment config (TOML); the built-in toy config when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every stage of the config, then DPO when configured.
    Train,
    /// Train, merge or evaluate byte-level BPE vocabularies.
    Tokenize {
        #[command(subcommand)]
        action: TokenizeAction,
    },
    /// Dedup, decontaminate and select from an NDJSON sample store.
    Select {
        #[arg(long)]
        samples: PathBuf,
        /// Files with one eval question per line; the file stem names the set.
        #[arg(long = "eval-set")]
        eval_sets: Vec<PathBuf>,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value_t = 0.5)]
        eps: f64,
        #[arg(long, default_value_t = 3)]
        min_pts: usize,
        #[arg(long, default_value_t = 8)]
        pca_k: usize,
    },
    /// Build math preference pairs with the seeded generator and scorer.
    Prefs,
    /// DPO from a checkpoint on a preference file.
    Dpo {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prefs: PathBuf,
    },
    /// Freeze/LoRA loss comparison or packing-efficiency tables, written into
    /// --out for `report`.
    Study {
        #[command(subcommand)]
        kind: StudyKind,
    },
    /// Render tables for a run directory (defaults to --out).
    Report {
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum StudyKind {
    Freeze {
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 300)]
        pretrain_steps: usize,
        #[arg(long, default_value_t = 300)]
        finetune_steps: usize,
    },
    /// Ratios for every packed stage of the config.
    Packing {
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        ranks: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum TokenizeAction {
    Train {
        /// Text files; each line is a document.
        #[arg(long, required = true)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_PIECE_LEN)]
        max_piece_len: usize,
        #[arg(long)]
        output: PathBuf,
    },
    Merge {
        #[arg(long, required = true)]
        vocab: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Prints tokens per character for NDJSON `{language, text}` records.
    Eval {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        texts: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::toy(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

#[derive(Deserialize)]
struct TextRecord {
    language: String,
    text: String,
}

fn write_packing(cfg: &ExperimentConfig, samples: usize, ranks: usize) -> Result<Vec<(String, PackingTable)>> {
    let tables = cfg
        .stages
        .iter()
        .filter(|s| s.pack)
        .map(|s| Ok((s.schedule.name.clone(), stage_packing_table(s, cfg.seed, samples, ranks)?)))
        .collect::<Result<Vec<_>>>()?;
    std::fs::write(cfg.out_dir.join(PACKING_FILE), serde_json::to_string_pretty(&tables)?)?;
    Ok(tables)
}

/// Executes one CLI invocation and returns what to print on success.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli)?;
            let summary = run_experiment(&cfg)?;
            write_packing(&cfg, 256, 4)?;
            Ok(serde_json::to_string_pretty(&summary)?)
        }
        Command::Study { kind } => match kind {
            StudyKind::Freeze {
                layers,
                pretrain_steps,
                finetune_steps,
            } => {
                let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
                std::fs::create_dir_all(&out)?;
                let rows = run_freeze_study(&FreezeStudyConfig {
                    n_layers: *layers,
                    pretrain_steps: *pretrain_steps,
                    finetune_steps: *finetune_steps,
                    seed: cli.seed.unwrap_or(0),
                    ..FreezeStudyConfig::default()
                })?;
                std::fs::write(out.join(FREEZE_FILE), serde_json::to_string_pretty(&rows)?)?;
                Ok(render_freeze_table(&rows))
            }
            StudyKind::Packing { samples, ranks } => {
                let cfg = load_config(cli)?;
                std::fs::create_dir_all(&cfg.out_dir)?;
                Ok(render_packing_table(&write_packing(&cfg, *samples, *ranks)?))
            }
        },
        Command::Tokenize { action } => tokenize(action),
        Command::Select {
            samples,
            eval_sets,
            budget,
            eps,
            min_pts,
            pca_k,
        } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&out)?;
            let samples = read_samples(samples)?;
            let mut sets = BTreeMap::new();
            for p in eval_sets {
                let name = p.file_stem().map_or("eval".into(), |s| s.to_string_lossy().into_owned());
                sets.insert(name, read_lines(p)?);
            }
            let dedup = dedup_and_decontaminate(&samples, &sets);
            write_removals(&out.join("removed.ndjson"), &dedup.removed)?;
            let cfg = SelectConfig {
                pca_k: *pca_k,
                eps: *eps,
                min_pts: *min_pts,
                seed: cli.seed.unwrap_or(0),
            };
            let budget = (*budget).min(dedup.retained.len());
            let sel = select_multilingual(&dedup.retained, budget, &HashedNgramEmbedder::default(), &cfg)?;
            let chosen: Vec<_> = sel.indices.iter().map(|&i| dedup.retained[i].clone()).collect();
            write_samples(&out.join("selected.ndjson"), &chosen)?;
            Ok(format!(
                "{} samples, {} removed, {} clusters, {} selected",
                samples.len(),
                dedup.removed.len(),
                sel.allocation.iter().filter(|a| a.0.is_some()).count(),
                chosen.len()
            ))
        }
        Command::Prefs => {
            let cfg = load_config(cli)?;
            let a = cfg.alignment.clone().unwrap_or_default();
            std::fs::create_dir_all(&cfg.out_dir)?;
            let set = build_math_preferences(&a, cfg.seed)?;
            write_preferences(&cfg.out_dir.join("preferences.ndjson"), &set.pairs)?;
            let mut w = MetricsWriter::create_raw(&cfg.out_dir.join("discards.ndjson"))?;
            for d in &set.discards {
                w.write_value(d)?;
            }
            w.finish()?;
            Ok(format!("{} pairs, {} discarded", set.pairs.len(), set.discards.len()))
        }
        Command::Dpo { checkpoint, prefs } => {
            let cfg = load_config(cli)?;
            let a: AlignmentConfig = cfg.alignment.clone().unwrap_or_default();
            std::fs::create_dir_all(&cfg.out_dir)?;
            let (model, params) = load_checkpoint(checkpoint)?;
            let pairs = read_preferences(prefs)?;
            let codec = preference_codec(&pairs, model.vocab_size)?;
            let tokens = tokenize_pairs(&pairs, &codec)?;
            let mut w = MetricsWriter::create(&cfg.out_dir.join("metrics.ndjson"))?;
            let settings = DpoSettings {
                beta: a.beta,
                steps: a.steps,
                batch: a.batch,
                lr: a.lr,
                seed: cfg.seed,
            };
            let run = train_dpo(params, &model, &tokens, &settings, &mut |r| w.write(&r))?;
            w.finish()?;
            deskmoe_core::model::save_checkpoint(&cfg.out_dir.join("final"), &model, &run.params)?;
            Ok(format!("epoch margins: {:?}", run.epoch_margins))
        }
        Command::Report { run } => {
            let dir = run
                .clone()
                .or_else(|| cli.out.clone())
                .ok_or_else(|| HarnessError::Report("pass --run or --out".into()))?;
            report(&dir)
        }
    }
}

fn tokenize(action: &TokenizeAction) -> Result<String> {
    match action {
        TokenizeAction::Train {
            corpus,
            vocab_size,
            max_piece_len,
            output,
        } => {
            let mut docs = Vec::new();
            for p in corpus {
                docs.extend(read_lines(p)?);
            }
            let v = train_bpe(&docs, *vocab_size, *max_piece_len)?;
            v.save(output)?;
            Ok(format!("{} pieces, {} merges", v.len(), v.merges().len()))
        }
        TokenizeAction::Merge { vocab, output } => {
            let vs = vocab.iter().map(|p| SubwordVocab::load(p)).collect::<std::result::Result<Vec<_>, _>>()?;
            let m = merge_subtokenizers(&vs)?;
            m.save(output)?;
            Ok(format!("{} pieces, {} merges", m.len(), m.merges().len()))
        }
        TokenizeAction::Eval { vocab, texts } => {
            let v = SubwordVocab::load(vocab)?;
            let mut by_lang: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for line in read_lines(texts)? {
                let r: TextRecord = serde_json::from_str(&line)?;
                by_lang.entry(r.language).or_default().push(r.text);
            }
            let mut out = String::from("language tokens chars ratio\n");
            for r in compression_ratio(&by_lang, &v) {
                let ratio = r.ratio.map_or("-".into(), |x| format!("{x:.4}"));
                out.push_str(&format!("{} {} {} {}\n", r.language, r.tokens, r.chars, ratio));
            }
            Ok(out)
        }
    }
}
