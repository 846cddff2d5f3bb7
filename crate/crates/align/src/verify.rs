use serde::{Deserialize, Serialize};

use crate::{AlignError, Result};

const BOXED: &str = "\\boxed{";
const NUMERIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictReason {
    Match,
    NumericMatch,
    Mismatch,
    Unparsed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub correct: bool,
    pub reason: VerdictReason,
    pub extracted: Option<String>,
}

/// Content of the last balanced `\boxed{...}`.
pub fn extract_last_boxed(response: &str) -> Option<String> {
    let mut found = None;
    let mut from = 0;
    while let Some(pos) = response[from..].find(BOXED) {
        let start = from + pos + BOXED.len();
        let mut depth = 1usize;
        let mut end = None;
        for (i, c) in response[start..].char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(start + i);
                        break;
                    }
                }
                _ => {}
            }
        }
        if let Some(e) = end {
            found = Some(response[start..e].to_string());
        }
        from = start;
    }
    found
}

fn balanced(s: &str) -> bool {
    let mut depth = 0i64;
    for c in s.chars() {
        match c {
            '{' => depth += 1,
            '}' => depth -= 1,
            _ => {}
        }
        if depth < 0 {
            return false;
        }
    }
    depth == 0
}

fn strip_wrapper<'a>(s: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let inner = s.strip_prefix(open)?.strip_suffix(close)?;
    balanced(inner).then(|| inner.trim())
}

/// Trims, collapses whitespace and peels `$...$`, `{...}`, `\text{...}` and
/// `\mathrm{...}` wrappers until none applies.
pub fn normalize_answer(s: &str) -> String {
    let mut cur = s.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let next = ["\\text{", "\\mathrm{", "{"]
            .iter()
            .find_map(|open| strip_wrapper(&cur, open, "}"))
            .or_else(|| strip_wrapper(&cur, "$", "$"));
        match next {
            Some(n) if n.len() < cur.len() => cur = n.to_string(),
            _ => return cur,
        }
    }
}

/// Compares the last boxed expression against `truth` after normalization,
/// falling back to numeric comparison when both sides parse as numbers.
pub fn verify_boxed_answer(response: &str, truth: &str) -> Result<Verdict> {
    let truth = normalize_answer(truth);
    if truth.is_empty() {
        return Err(AlignError::Input("ground truth is empty".into()));
    }
    let Some(raw) = extract_last_boxed(response) else {
        return Ok(Verdict {
            correct: false,
            reason: VerdictReason::Unparsed,
            extracted: None,
        });
    };
    let got = normalize_answer(&raw);
    let reason = if got == truth {
        VerdictReason::Match
    } else {
        match (got.parse::<f64>(), truth.parse::<f64>()) {
            (Ok(a), Ok(b)) if (a - b).abs() <= NUMERIC_TOL => VerdictReason::NumericMatch,
            _ => VerdictReason::Mismatch,
        }
    };
    Ok(Verdict {
        correct: reason != VerdictReason::Mismatch,
        reason,
        extracted: Some(got),
    })
}
