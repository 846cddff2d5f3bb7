use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{CurationError, Removal, Result};

/// One question/answer record of the sample store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub language: String,
    /// In `[0, 1]`.
    pub quality: f64,
    /// How many times the record occurred in the raw data; at least 1.
    pub occurrence: u32,
}

impl Sample {
    pub fn new(id: impl Into<String>, question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            answer: answer.into(),
            language: "en".into(),
            quality: 1.0,
            occurrence: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.quality) {
            return Err(CurationError::Input(format!("{}: quality {} outside [0, 1]", self.id, self.quality)));
        }
        if self.occurrence == 0 {
            return Err(CurationError::Input(format!("{}: occurrence must be at least 1", self.id)));
        }
        Ok(())
    }
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    write_lines(path, samples)
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let samples: Vec<Sample> = read_lines(path)?;
    for s in &samples {
        s.validate()?;
    }
    Ok(samples)
}

pub fn write_removals(path: &Path, removals: &[Removal]) -> Result<()> {
    write_lines(path, removals)
}

pub fn read_removals(path: &Path) -> Result<Vec<Removal>> {
    read_lines(path)
}
