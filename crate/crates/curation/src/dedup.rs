use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::Sample;

/// Trim, collapse internal whitespace runs to one space, lowercase.
pub fn canonicalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RemovalReason {
    Duplicate { of: String },
    Contaminated { eval_set: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    #[serde(flatten)]
    pub sample: Sample,
    #[serde(flatten)]
    pub reason: RemovalReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DedupOutcome {
    pub retained: Vec<Sample>,
    pub removed: Vec<Removal>,
}

/// Drops samples whose canonical question matches an eval-set entry, then
/// later copies of an already retained canonical question.
///
/// When an entry occurs in several eval sets the first set name in map
/// order is logged.
pub fn dedup_and_decontaminate(samples: &[Sample], eval_sets: &BTreeMap<String, Vec<String>>) -> DedupOutcome {
    let mut eval: HashMap<String, &str> = HashMap::new();
    for (name, entries) in eval_sets {
        for e in entries {
            eval.entry(canonicalize(e)).or_insert(name);
        }
    }
    let mut seen: HashMap<String, &str> = HashMap::new();
    let mut retained = Vec::new();
    let mut removed = Vec::new();
    for s in samples {
        let key = canonicalize(&s.question);
        let reason = if let Some(set) = eval.get(&key) {
            RemovalReason::Contaminated { eval_set: set.to_string() }
        } else if let Some(first) = seen.get(&key) {
            RemovalReason::Duplicate { of: first.to_string() }
        } else {
            seen.insert(key, &s.id);
            retained.push(s.clone());
            continue;
        };
        removed.push(Removal {
            sample: s.clone(),
            reason,
        });
    }
    DedupOutcome { retained, removed }
}
