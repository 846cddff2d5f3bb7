use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{verify_boxed_answer, AlignError, Result, Verdict};

fn fnv(seed: u64, parts: &[&str]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for p in parts {
        for b in p.bytes().chain(std::iter::once(0xff)) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    // final avalanche (splitmix64)
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Scores a response to a prompt; higher is better.
pub trait RewardScorer {
    fn score(&self, prompt: &str, response: &str) -> f64;
}

/// Hash of `(seed, prompt, response)` mapped to `[0, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct SeededScorer {
    pub seed: u64,
}

impl RewardScorer for SeededScorer {
    fn score(&self, prompt: &str, response: &str) -> f64 {
        unit(fnv(self.seed, &[prompt, response]))
    }
}

/// Produces `n` candidate responses for a prompt.
pub trait CandidateGenerator {
    fn generate(&self, prompt: &str, truth: Option<&str>, n: usize) -> Vec<String>;
}

/// Fills a think/boxed template. Each prompt draws its own accuracy in
/// `[0, max_accuracy)`, so some prompts get no correct candidate.
#[derive(Debug, Clone, Copy)]
pub struct TemplateGenerator {
    pub seed: u64,
    pub max_accuracy: f64,
}

impl CandidateGenerator for TemplateGenerator {
    fn generate(&self, prompt: &str, truth: Option<&str>, n: usize) -> Vec<String> {
        let accuracy = self.max_accuracy * unit(fnv(self.seed, &[prompt]));
        (0..n)
            .map(|i| {
                let tag = i.to_string();
                let h = fnv(self.seed, &[prompt, &tag]);
                let answer = match truth {
                    Some(t) if unit(h) < accuracy => t.to_string(),
                    Some(t) => match t.parse::<i64>() {
                        Ok(v) => (v + 1 + (h % 5) as i64).to_string(),
                        Err(_) => format!("{t}{}", h % 7),
                    },
                    None => format!("option {}", h % 97),
                };
                format!("<think>attempt {i} for: {prompt}</think> The answer is \\boxed{{{answer}}}.")
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairKind {
    Math { truth: String },
    /// Pairs are emitted only when `max - min >= margin`.
    General { margin: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_reward: f64,
    pub rejected_reward: f64,
    pub chosen_index: usize,
    pub rejected_index: usize,
    pub kind: PairKind,
    /// Math pairs only.
    pub chosen_verdict: Option<Verdict>,
    pub rejected_verdict: Option<Verdict>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DiscardReason {
    AllIncorrect,
    AllCorrect,
    MarginTooSmall { gap: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairOutcome {
    Pair(Box<PreferencePair>),
    Discard(DiscardReason),
}

/// First index of the maximum.
fn argmax(idx: &[usize], r: &[f64]) -> usize {
    idx.iter().copied().fold(idx[0], |b, i| if r[i] > r[b] { i } else { b })
}

/// Math prompts pair the best-scored verified-correct candidate with the
/// best-scored incorrect one. General prompts pair the best and the worst
/// scored candidates.
pub fn build_preference_pairs(
    prompt: &str,
    candidates: &[String],
    scorer: &dyn RewardScorer,
    kind: &PairKind,
) -> Result<PairOutcome> {
    if candidates.len() < 2 {
        return Err(AlignError::Config(format!("need at least 2 candidates, got {}", candidates.len())));
    }
    let rewards: Vec<f64> = candidates.iter().map(|c| scorer.score(prompt, c)).collect();
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(AlignError::Numeric("non-finite reward".into()));
    }
    let pair = |c: usize, r: usize, cv: Option<Verdict>, rv: Option<Verdict>, reason: &str| {
        PairOutcome::Pair(Box::new(PreferencePair {
            prompt: prompt.to_string(),
            chosen: candidates[c].clone(),
            rejected: candidates[r].clone(),
            chosen_reward: rewards[c],
            rejected_reward: rewards[r],
            chosen_index: c,
            rejected_index: r,
            kind: kind.clone(),
            chosen_verdict: cv,
            rejected_verdict: rv,
            reason: reason.to_string(),
        }))
    };
    match kind {
        PairKind::Math { truth } => {
            let verdicts = candidates
                .iter()
                .map(|c| verify_boxed_answer(c, truth))
                .collect::<Result<Vec<_>>>()?;
            let (gt, gf): (Vec<usize>, Vec<usize>) = (0..candidates.len()).partition(|&i| verdicts[i].correct);
            if gt.is_empty() {
                return Ok(PairOutcome::Discard(DiscardReason::AllIncorrect));
            }
            if gf.is_empty() {
                return Ok(PairOutcome::Discard(DiscardReason::AllCorrect));
            }
            let (c, r) = (argmax(&gt, &rewards), argmax(&gf, &rewards));
            Ok(pair(c, r, Some(verdicts[c].clone()), Some(verdicts[r].clone()), "best_correct_vs_best_incorrect"))
        }
        PairKind::General { margin } => {
            let all: Vec<usize> = (0..candidates.len()).collect();
            let c = argmax(&all, &rewards);
            let r = all
                .iter()
                .copied()
                .filter(|&i| i != c)
                .fold(None, |b: Option<usize>, i| match b {
                    Some(b) if rewards[b] <= rewards[i] => Some(b),
                    _ => Some(i),
                })
                .expect("at least two candidates");
            let gap = rewards[c] - rewards[r];
            if gap < *margin {
                return Ok(PairOutcome::Discard(DiscardReason::MarginTooSmall { gap }));
            }
            Ok(pair(c, r, None, None, "max_vs_min_reward"))
        }
    }
}

pub fn write_preferences(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_preferences(path: &Path) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
