use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{HarnessError, Result};

/// 32 symbols for the copy and reversal tasks.
pub const COPY_ALPHABET: &[u8; 32] = b"abcdefghijklmnopqrstuvwxyz012345";
pub const COPY_LEN: usize = 12;
pub const RETRIEVAL_LINES: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    Reversal,
    ModArith,
    Multilingual,
    LineRetrieval,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Copy, Task::Reversal, Task::ModArith, Task::Multilingual, Task::LineRetrieval];

    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reversal => "reversal",
            Task::ModArith => "mod_arith",
            Task::Multilingual => "multilingual",
            Task::LineRetrieval => "line_retrieval",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown task {s:?}")))
    }
}

/// One prompt/response example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub task: Task,
    pub prompt: String,
    pub response: String,
    /// Boxed-answer ground truth for verifiable tasks.
    pub truth: Option<String>,
    pub language: String,
    /// Response carries a think block.
    pub longcot: bool,
}

fn symbols(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *COPY_ALPHABET.choose(rng).unwrap() as char).collect()
}

fn item(task: Task, prompt: String, response: String) -> Item {
    Item {
        task,
        prompt,
        response,
        truth: None,
        language: "en".into(),
        longcot: false,
    }
}

/// `a+b mod m?` with the think-block working and boxed residue.
pub fn mod_arith_item(a: u64, b: u64, m: u64) -> Item {
    let sum = a + b;
    let r = sum % m;
    Item {
        truth: Some(r.to_string()),
        longcot: true,
        ..item(
            Task::ModArith,
            format!("{a}+{b} mod {m}?"),
            format!("<think>{a}+{b}={sum}={m}*{}+{r}</think>\\boxed{{{r}}}", sum / m),
        )
    }
}

const LEXICON: [(&str, &str, &str); 4] = [
    ("en", "What colour is the {}?", "The {} is {}."),
    ("vi", "{} màu gì?", "{} màu {}."),
    ("th", "{} สีอะไร", "{} สี{}"),
    ("id", "Apa warna {}?", "{} berwarna {}."),
];
const OBJECTS: [(&str, [&str; 4]); 6] = [
    ("sky", ["blue", "xanh", "ฟ้า", "biru"]),
    ("grass", ["green", "lục", "เขียว", "hijau"]),
    ("snow", ["white", "trắng", "ขาว", "putih"]),
    ("coal", ["black", "đen", "ดำ", "hitam"]),
    ("blood", ["red", "đỏ", "แดง", "merah"]),
    ("sun", ["yellow", "vàng", "เหลือง", "kuning"]),
];

fn fill(template: &str, args: &[&str]) -> String {
    let mut out = String::new();
    let mut parts = template.split("{}");
    out.push_str(parts.next().unwrap_or(""));
    for (p, a) in parts.zip(args.iter().chain(std::iter::repeat(&""))) {
        out.push_str(a);
        out.push_str(p);
    }
    out
}

/// A document of `lines` numbered lines followed by a lookup question.
pub fn line_retrieval_item(rng: &mut ChaCha8Rng, lines: usize) -> Item {
    let words: Vec<String> = (0..lines).map(|_| symbols(rng, 3)).collect();
    let mut doc = String::new();
    for (i, w) in words.iter().enumerate() {
        doc.push_str(&format!("L{i:02}:{w}\n"));
    }
    let q = rng.random_range(0..lines);
    item(Task::LineRetrieval, format!("{doc}L{q:02}?"), words[q].clone())
}

/// Deterministic synthetic dataset of `size` items.
pub fn generate(task: Task, size: usize, seed: u64) -> Vec<Item> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (task as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    (0..size)
        .map(|_| match task {
            Task::Copy => {
                let s = symbols(&mut rng, COPY_LEN);
                item(task, format!("{s}|"), s)
            }
            Task::Reversal => {
                let s = symbols(&mut rng, COPY_LEN);
                item(task, format!("{s}<"), s.chars().rev().collect())
            }
            Task::ModArith => {
                let m = rng.random_range(3..=13);
                mod_arith_item(rng.random_range(0..100), rng.random_range(0..100), m)
            }
            Task::Multilingual => {
                let l = rng.random_range(0..LEXICON.len());
                let (obj, colours) = OBJECTS[rng.random_range(0..OBJECTS.len())];
                let (lang, q, a) = LEXICON[l];
                Item {
                    language: lang.into(),
                    ..item(task, fill(q, &[obj]), fill(a, &[obj, colours[l]]))
                }
            }
            Task::LineRetrieval => line_retrieval_item(&mut rng, RETRIEVAL_LINES),
        })
        .collect()
}

/// [`generate`] with the task given by name.
pub fn gen_synthetic_corpus(task: &str, size: usize, seed: u64) -> Result<Vec<Item>> {
    Ok(generate(task.parse()?, size, seed))
}
