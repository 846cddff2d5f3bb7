use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentPolicy {
    Persist,
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageStart {
    pub schema_version: u32,
    pub stage: String,
    pub stage_index: usize,
    pub global_step: usize,
    pub rope_base: f64,
    pub context: usize,
    pub trainable_params: usize,
    pub moments: MomentPolicy,
    pub optimizer_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepMetrics {
    pub schema_version: u32,
    pub stage: String,
    pub step: usize,
    pub global_step: usize,
    pub lm: f64,
    pub aux: f64,
    pub z: f64,
    pub total: f64,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub grad_norm: f64,
    /// Activation counts per specialized expert, summed over MoE layers.
    pub expert_counts: Vec<usize>,
    pub count_cv: f64,
    /// Every routed token selected exactly `top_k` distinct experts.
    pub topk_exact: bool,
    pub tokens: f64,
    /// Real tokens over charged slot tokens for this step's batches.
    pub packing_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEnd {
    pub schema_version: u32,
    pub stage: String,
    pub global_step: usize,
    pub eval_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoMetrics {
    pub schema_version: u32,
    pub step: usize,
    pub dpo: f64,
    pub lr: f64,
    pub batch_margin: f64,
    /// Mean chosen-minus-rejected policy log-prob over all pairs; set at
    /// epoch boundaries.
    pub epoch_margin: Option<f64>,
}

/// One line of `metrics.ndjson`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    StageStart(StageStart),
    Step(StepMetrics),
    StageEnd(StageEnd),
    Dpo(DpoMetrics),
}

impl MetricsRecord {
    pub fn schema_version(&self) -> u32 {
        match self {
            Self::StageStart(r) => r.schema_version,
            Self::Step(r) => r.schema_version,
            Self::StageEnd(r) => r.schema_version,
            Self::Dpo(r) => r.schema_version,
        }
    }
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    /// Writer for free-form records outside the metrics schema.
    pub fn create_raw(path: &Path) -> Result<Self> {
        Self::create(path)
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        self.write_value(r)
    }

    pub fn write_value<T: Serialize>(&mut self, r: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Parses a metrics file and checks it against the schema: known record
/// kinds with exactly the published fields, the current schema version,
/// finite losses, and steps increasing by one within a stage.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: MetricsRecord = serde_json::from_str(&line)
            .map_err(|e| HarnessError::Report(format!("line {}: {e}", n + 1)))?;
        out.push(r);
    }
    validate_records(&out)?;
    Ok(out)
}

pub fn validate_records(records: &[MetricsRecord]) -> Result<()> {
    let bad = |m: String| Err(HarnessError::Report(m));
    let mut last: Option<(String, usize)> = None;
    let mut last_dpo: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        if r.schema_version() != SCHEMA_VERSION {
            return bad(format!("record {i}: schema version {}", r.schema_version()));
        }
        match r {
            MetricsRecord::StageStart(s) => last = Some((s.stage.clone(), usize::MAX)),
            MetricsRecord::Step(s) => {
                if ![s.lm, s.aux, s.z, s.total, s.lr, s.grad_norm].iter().all(|v| v.is_finite()) {
                    return bad(format!("record {i}: non-finite value"));
                }
                match &last {
                    Some((stage, prev)) if *stage == s.stage && prev.wrapping_add(1) == s.step => {}
                    _ => return bad(format!("record {i}: step {} of {} out of order", s.step, s.stage)),
                }
                last = Some((s.stage.clone(), s.step));
            }
            MetricsRecord::StageEnd(_) => last = None,
            MetricsRecord::Dpo(d) => {
                if last_dpo.map_or(d.step != 0, |p| d.step != p + 1) || !d.dpo.is_finite() {
                    return bad(format!("record {i}: bad dpo step {}", d.step));
                }
                last_dpo = Some(d.step);
            }
        }
    }
    Ok(())
}
