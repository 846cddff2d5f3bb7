use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::metrics::{read_metrics, MetricsRecord};
use crate::study::{FreezeRow, PackingTable};
use crate::{HarnessError, Result};

pub const PACKING_FILE: &str = "packing.json";
pub const FREEZE_FILE: &str = "freeze_study.json";
pub const LOSS_CSV: &str = "loss_curve.csv";

/// First, last and minimum loss, step count, expert counts, eval loss.
type StageSummary = (f64, f64, f64, usize, Vec<usize>, Option<f64>);

pub fn render_freeze_table(rows: &[FreezeRow]) -> String {
    let mut s = String::new();
    writeln!(s, "{:<10} {:>10} {:>12}  Description", "Setting", "Loss", "Trainable").unwrap();
    for r in rows {
        writeln!(
            s,
            "{:<10} {:>10.5} {:>12}  {}",
            r.setting, r.final_loss, r.trainable_params, r.description
        )
        .unwrap();
    }
    s
}

pub fn render_packing_table(rows: &[(String, PackingTable)]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:<14} {:>8} {:>6} {:>10} {:>10} {:>10} {:>10}",
        "Stage", "Capacity", "Ranks", "FixedPad", "Dynamic", "DDP", "Packing"
    )
    .unwrap();
    for (name, t) in rows {
        writeln!(
            s,
            "{:<14} {:>8} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            name, t.capacity, t.ranks, t.fixed, t.dynamic, t.ddp, t.packing
        )
        .unwrap();
    }
    s
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&std::fs::read_to_string(path)?)?))
}

/// Renders loss, expert-utilization, packing, freeze and DPO tables for a
/// run directory, and writes `loss_curve.csv` next to the metrics.
pub fn report(run_dir: &Path) -> Result<String> {
    let path = run_dir.join("metrics.ndjson");
    if !path.is_file() {
        return Err(HarnessError::Report(format!("no metrics.ndjson in {}", run_dir.display())));
    }
    let records = read_metrics(&path)?;
    if records.is_empty() {
        return Err(HarnessError::Report(format!("{} is empty", path.display())));
    }
    let mut csv = String::from("global_step,stage,lm,aux,z,total,lr,alpha,beta,count_cv\n");
    let mut stages: Vec<String> = Vec::new();
    let mut per_stage: BTreeMap<String, StageSummary> = BTreeMap::new();
    let mut dpo: Vec<(usize, f64, Option<f64>)> = Vec::new();
    for r in &records {
        match r {
            MetricsRecord::StageStart(s) => stages.push(s.stage.clone()),
            MetricsRecord::Step(m) => {
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{},{}",
                    m.global_step, m.stage, m.lm, m.aux, m.z, m.total, m.lr, m.alpha, m.beta, m.count_cv
                )
                .unwrap();
                let e = per_stage
                    .entry(m.stage.clone())
                    .or_insert((m.lm, m.lm, f64::INFINITY, 0, vec![0; m.expert_counts.len()], None));
                e.1 = m.lm;
                e.2 = e.2.min(m.lm);
                e.3 += 1;
                for (a, c) in e.4.iter_mut().zip(&m.expert_counts) {
                    *a += c;
                }
            }
            MetricsRecord::StageEnd(s) => {
                if let Some(e) = per_stage.get_mut(&s.stage) {
                    e.5 = Some(s.eval_loss);
                }
            }
            MetricsRecord::Dpo(d) => dpo.push((d.step, d.dpo, d.epoch_margin)),
        }
    }
    std::fs::write(run_dir.join(LOSS_CSV), &csv)?;

    let mut out = String::new();
    writeln!(out, "== Loss by stage ==").unwrap();
    writeln!(out, "{:<14} {:>6} {:>10} {:>10} {:>10} {:>10}", "Stage", "Steps", "FirstLM", "LastLM", "MinLM", "Eval").unwrap();
    for name in &stages {
        if let Some((first, last, min, steps, _, eval)) = per_stage.get(name) {
            let eval = eval.map_or("-".to_string(), |v| format!("{v:.4}"));
            writeln!(out, "{name:<14} {steps:>6} {first:>10.4} {last:>10.4} {min:>10.4} {eval:>10}").unwrap();
        }
    }
    writeln!(out, "(per-step curve written to {LOSS_CSV})\n").unwrap();

    writeln!(out, "== Expert utilization (share of routed slots) ==").unwrap();
    for name in &stages {
        if let Some((.., counts, _)) = per_stage.get(name) {
            let total: usize = counts.iter().sum();
            let shares: Vec<String> = counts
                .iter()
                .map(|&c| format!("{:.3}", c as f64 / total.max(1) as f64))
                .collect();
            writeln!(
                out,
                "{name:<14} cv={:.4} [{}]",
                deskmoe_core::moe::count_cv(counts),
                shares.join(" ")
            )
            .unwrap();
        }
    }

    if let Some(rows) = read_json::<Vec<(String, PackingTable)>>(&run_dir.join(PACKING_FILE))? {
        writeln!(out, "\n== Packing efficiency (real / charged tokens) ==").unwrap();
        out.push_str(&render_packing_table(&rows));
    }
    if let Some(rows) = read_json::<Vec<FreezeRow>>(&run_dir.join(FREEZE_FILE))? {
        writeln!(out, "\n== Training settings and loss ==").unwrap();
        out.push_str(&render_freeze_table(&rows));
    }
    if let (Some(first), Some(last)) = (dpo.first(), dpo.last()) {
        writeln!(out, "\n== DPO ==").unwrap();
        writeln!(out, "steps {} loss {:.4} -> {:.4}", dpo.len(), first.1, last.1).unwrap();
        let margins: Vec<String> = dpo.iter().filter_map(|d| d.2).map(|m| format!("{m:.3}")).collect();
        writeln!(out, "epoch margins: {}", margins.join(" ")).unwrap();
    }
    Ok(out)
}
