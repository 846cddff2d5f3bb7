//! Sample packing, attention boundary metadata, and per-step dynamic
//! padding across simulated data-parallel ranks.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id written into pad slots. Pads carry loss weight 0, so the value
/// only has to be a valid vocabulary index.
pub const PAD_TOKEN: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: usize,
    pub tokens: Vec<usize>,
}

impl Sample {
    pub fn new(id: usize, tokens: Vec<usize>) -> Self {
        Self { id, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackPolicy {
    /// First-fit over samples sorted by decreasing length, ties kept in input order.
    #[default]
    FirstFitDecreasing,
    /// One sample per pack, padded to capacity.
    OnePerPack,
}

/// One buffer of `capacity` tokens holding whole samples followed by pad.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBatch {
    pub capacity: usize,
    pub tokens: Vec<usize>,
    /// Start offset of each sample in `tokens`.
    pub boundaries: Vec<usize>,
    /// Sample id per token, `None` in the pad tail.
    pub sample_ids: Vec<Option<usize>>,
    pub positions: Vec<usize>,
    pub pad_len: usize,
    pub rank_id: usize,
}

impl PackedBatch {
    fn from_samples(samples: &[&Sample], capacity: usize) -> Self {
        let mut pack = PackedBatch {
            capacity,
            tokens: Vec::with_capacity(capacity),
            boundaries: Vec::with_capacity(samples.len()),
            sample_ids: Vec::with_capacity(capacity),
            positions: Vec::with_capacity(capacity),
            pad_len: 0,
            rank_id: 0,
        };
        for s in samples {
            pack.boundaries.push(pack.tokens.len());
            pack.tokens.extend_from_slice(&s.tokens);
            pack.sample_ids.extend(std::iter::repeat_n(Some(s.id), s.len()));
            pack.positions.extend(0..s.len());
        }
        pack.pad_len = capacity - pack.tokens.len();
        pack.tokens.resize(capacity, PAD_TOKEN);
        pack.sample_ids.resize(capacity, None);
        pack.positions.resize(capacity, 0);
        pack
    }

    pub fn real_tokens(&self) -> usize {
        self.capacity - self.pad_len
    }

    pub fn n_samples(&self) -> usize {
        self.boundaries.len()
    }

    /// Sample ids in pack order.
    pub fn sample_order(&self) -> Vec<usize> {
        self.boundaries
            .iter()
            .map(|&b| self.sample_ids[b].expect("boundary inside real region"))
            .collect()
    }

    /// Token range of the `k`-th sample.
    pub fn span(&self, k: usize) -> std::ops::Range<usize> {
        let end = self
            .boundaries
            .get(k + 1)
            .copied()
            .unwrap_or(self.real_tokens());
        self.boundaries[k]..end
    }

    /// Recovers the packed samples.
    pub fn unpack(&self) -> Vec<Sample> {
        (0..self.n_samples())
            .map(|k| {
                let r = self.span(k);
                Sample::new(self.sample_ids[r.start].unwrap(), self.tokens[r].to_vec())
            })
            .collect()
    }

    /// Next-token targets and loss weights for causal LM training: the last
    /// token of each sample and every pad position get weight 0.
    pub fn lm_targets(&self) -> (Vec<usize>, Vec<f64>) {
        let n = self.capacity;
        let mut targets = vec![PAD_TOKEN; n];
        let mut weights = vec![0.0; n];
        for t in 0..n.saturating_sub(1) {
            if self.sample_ids[t].is_some() && self.sample_ids[t] == self.sample_ids[t + 1] {
                targets[t] = self.tokens[t + 1];
                weights[t] = 1.0;
            }
        }
        (targets, weights)
    }

    pub fn attention_spec(&self) -> AttentionSpec {
        packed_attention_spec(self)
    }
}

/// Causal attention restricted to tokens of the same sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSpec {
    /// Segment per token; `None` is pad, which neither attends nor is attended.
    pub segments: Vec<Option<u32>>,
    /// Rotary positions per token.
    pub positions: Vec<usize>,
}

impl AttentionSpec {
    /// Plain causal mask over one sequence.
    pub fn causal(seq: usize) -> Self {
        Self {
            segments: vec![Some(0); seq],
            positions: (0..seq).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        j <= i && self.segments[i].is_some() && self.segments[i] == self.segments[j]
    }

    /// Indices of non-pad tokens.
    pub fn real_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.segments[i].is_some()).collect()
    }
}

pub fn packed_attention_spec(pack: &PackedBatch) -> AttentionSpec {
    let mut segments = vec![None; pack.capacity];
    for k in 0..pack.n_samples() {
        for t in pack.span(k) {
            segments[t] = Some(k as u32);
        }
    }
    AttentionSpec {
        segments,
        positions: pack.positions.clone(),
    }
}

/// Effective-token ratios of the padding strategies on one workload.
///
/// Every strategy is charged `capacity` tokens per forward slot:
/// fixed padding spends one slot per sample, dynamic padding groups
/// consecutive samples while `count * longest <= capacity`, and packing
/// spends one slot per pack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub real_tokens: usize,
    pub capacity: usize,
    pub packs: usize,
    pub dynamic_batches: usize,
    pub fixed_slots: usize,
    pub packing_ratio: f64,
    pub dynamic_ratio: f64,
    pub fixed_ratio: f64,
}

fn check_lengths(samples: &[Sample], capacity: usize) -> Result<()> {
    if capacity == 0 {
        return Err(Error::Config("pack capacity must be positive".into()));
    }
    for s in samples {
        if s.len() > capacity {
            return Err(Error::Oversize {
                id: s.id,
                len: s.len(),
                capacity,
            });
        }
        if s.is_empty() {
            return Err(Error::Input(format!("sample {} is empty", s.id)));
        }
    }
    Ok(())
}

/// Packs `samples` into buffers of `capacity` tokens.
pub fn pack_samples(samples: &[Sample], capacity: usize, policy: PackPolicy) -> Result<(Vec<PackedBatch>, EfficiencyReport)> {
    check_lengths(samples, capacity)?;
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let bins: Vec<Vec<&Sample>> = match policy {
        PackPolicy::OnePerPack => samples.iter().map(|s| vec![s]).collect(),
        PackPolicy::FirstFitDecreasing => {
            let mut order: Vec<&Sample> = samples.iter().collect();
            order.sort_by_key(|s| std::cmp::Reverse(s.len()));
            let mut bins: Vec<(usize, Vec<&Sample>)> = Vec::new();
            for s in order {
                match bins.iter_mut().find(|(used, _)| used + s.len() <= capacity) {
                    Some((used, members)) => {
                        *used += s.len();
                        members.push(s);
                    }
                    None => bins.push((s.len(), vec![s])),
                }
            }
            bins.into_iter().map(|(_, m)| m).collect()
        }
    };
    let packs: Vec<PackedBatch> = bins.iter().map(|b| PackedBatch::from_samples(b, capacity)).collect();
    let report = efficiency_report(samples, capacity, packs.len());
    Ok((packs, report))
}

fn efficiency_report(samples: &[Sample], capacity: usize, packs: usize) -> EfficiencyReport {
    let real: usize = samples.iter().map(Sample::len).sum();
    let dynamic = dynamic_batches(samples, capacity).len();
    let ratio = |slots: usize| real as f64 / (slots * capacity) as f64;
    EfficiencyReport {
        real_tokens: real,
        capacity,
        packs,
        dynamic_batches: dynamic,
        fixed_slots: samples.len(),
        packing_ratio: ratio(packs),
        dynamic_ratio: ratio(dynamic),
        fixed_ratio: ratio(samples.len()),
    }
}

/// Groups consecutive samples into padded batches whose `count * longest`
/// stays within `capacity`.
pub fn dynamic_batches(samples: &[Sample], capacity: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut longest = 0;
    for (i, s) in samples.iter().enumerate() {
        let fits = batches
            .last()
            .is_some_and(|b| (b.len() + 1) * longest.max(s.len()) <= capacity);
        if fits {
            batches.last_mut().unwrap().push(i);
            longest = longest.max(s.len());
        } else {
            batches.push(vec![i]);
            longest = s.len();
        }
    }
    batches
}

/// Per-step input shapes for a group of simulated ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPadding {
    /// Padded length shared by every rank, per step.
    pub step_lengths: Vec<usize>,
    /// Real tokens per step summed over ranks.
    pub step_real: Vec<usize>,
    /// `real / (padded length * ranks)` per step.
    pub step_ratios: Vec<f64>,
    /// Same ratio over all steps.
    pub ratio: f64,
    /// Ratio if every rank were padded to `fixed_len` each step.
    pub fixed_ratio: f64,
    pub fixed_len: usize,
}

/// Pads every rank's input at each step to the group maximum of that step.
///
/// `per_rank[r][s]` is the real length rank `r` feeds at step `s`; ranks
/// with fewer steps count as length 0 there. `fixed_len` is the static
/// baseline length, typically the model context.
pub fn ddp_group_pad(per_rank: &[Vec<usize>], fixed_len: usize) -> Result<GroupPadding> {
    if per_rank.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(r) = per_rank.iter().position(Vec::is_empty) {
        return Err(Error::EmptyRank(r));
    }
    let ranks = per_rank.len();
    let steps = per_rank.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = GroupPadding {
        step_lengths: Vec::with_capacity(steps),
        step_real: Vec::with_capacity(steps),
        step_ratios: Vec::with_capacity(steps),
        ratio: 0.0,
        fixed_ratio: 0.0,
        fixed_len,
    };
    for s in 0..steps {
        let lens: Vec<usize> = per_rank.iter().map(|r| r.get(s).copied().unwrap_or(0)).collect();
        let max = lens.iter().copied().max().unwrap_or(0);
        if max > fixed_len {
            return Err(Error::Oversize {
                id: s,
                len: max,
                capacity: fixed_len,
            });
        }
        let real: usize = lens.iter().sum();
        out.step_lengths.push(max);
        out.step_real.push(real);
        out.step_ratios.push(real as f64 / (max * ranks).max(1) as f64);
    }
    let real: usize = out.step_real.iter().sum();
    let padded: usize = out.step_lengths.iter().sum::<usize>() * ranks;
    out.ratio = real as f64 / padded.max(1) as f64;
    out.fixed_ratio = real as f64 / (fixed_len * ranks * steps).max(1) as f64;
    Ok(out)
}

/// Deals packs round-robin to `ranks` ranks, setting `rank_id`.
pub fn assign_ranks(packs: &mut [PackedBatch], ranks: usize) -> Result<Vec<Vec<usize>>> {
    if ranks == 0 {
        return Err(Error::Config("need at least one rank".into()));
    }
    let mut per_rank = vec![Vec::new(); ranks];
    for (i, p) in packs.iter_mut().enumerate() {
        p.rank_id = i % ranks;
        per_rank[i % ranks].push(i);
    }
    if let Some(r) = per_rank.iter().position(Vec::is_empty) {
        return Err(Error::EmptyRank(r));
    }
    Ok(per_rank)
}

/// One line of the pack manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackRecord {
    pub rank: usize,
    pub step: usize,
    pub boundaries: Vec<usize>,
    pub pad_len: usize,
}

/// Writes one JSON record per pack. Pack `i` on its rank is step
/// `i / ranks` under round-robin assignment.
pub fn write_pack_manifest(path: &Path, packs: &[PackedBatch], ranks: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, p) in packs.iter().enumerate() {
        let rec = PackRecord {
            rank: p.rank_id,
            step: i / ranks.max(1),
            boundaries: p.boundaries.clone(),
            pad_len: p.pad_len,
        };
        serde_json::to_writer(&mut f, &rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_pack_manifest(path: &Path) -> Result<Vec<PackRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(lens: &[usize]) -> Vec<Sample> {
        lens.iter()
            .enumerate()
            .map(|(i, &n)| Sample::new(i, (0..n).map(|t| 1 + (i * 7 + t) % 11).collect()))
            .collect()
    }

    #[test]
    fn ffd_hand_trace() {
        let (packs, report) = pack_samples(&samples(&[5, 3, 4, 2]), 8, PackPolicy::FirstFitDecreasing).unwrap();
        let lens: Vec<Vec<usize>> = packs
            .iter()
            .map(|p| (0..p.n_samples()).map(|k| p.span(k).len()).collect())
            .collect();
        assert_eq!(lens, vec![vec![5, 3], vec![4, 2]]);
        assert_eq!(report.packing_ratio, 14.0 / 16.0);
    }

    #[test]
    fn exact_fit_and_oversize() {
        let (packs, report) = pack_samples(&samples(&[8]), 8, PackPolicy::FirstFitDecreasing).unwrap();
        assert_eq!(packs.len(), 1);
        assert_eq!(packs[0].pad_len, 0);
        assert_eq!(report.packing_ratio, 1.0);
        let err = pack_samples(&samples(&[9]), 8, PackPolicy::FirstFitDecreasing).unwrap_err();
        assert!(matches!(err, Error::Oversize { id: 0, len: 9, capacity: 8 }));
    }

    #[test]
    fn positions_restart_and_pads_weightless() {
        let (packs, _) = pack_samples(&samples(&[3, 2]), 8, PackPolicy::FirstFitDecreasing).unwrap();
        let p = &packs[0];
        assert_eq!(p.positions, vec![0, 1, 2, 0, 1, 0, 0, 0]);
        assert_eq!(p.boundaries, vec![0, 3]);
        let (_, w) = p.lm_targets();
        assert_eq!(w, vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_sample_spec_is_causal() {
        let (packs, _) = pack_samples(&samples(&[6]), 6, PackPolicy::FirstFitDecreasing).unwrap();
        let spec = packs[0].attention_spec();
        let causal = AttentionSpec::causal(6);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(spec.allows(i, j), causal.allows(i, j));
            }
        }
    }

    #[test]
    fn group_pad_examples() {
        let g = ddp_group_pad(&[vec![7], vec![8]], 8).unwrap();
        assert_eq!(g.step_lengths, vec![8]);
        assert_eq!(g.ratio, 15.0 / 16.0);
        let g = ddp_group_pad(&[vec![5, 5], vec![5, 5]], 8).unwrap();
        assert_eq!(g.ratio, 1.0);
        let g = ddp_group_pad(&[vec![8, 6, 3], vec![2, 5, 8]], 8).unwrap();
        assert_eq!(g.step_lengths, vec![8, 6, 8]);
        assert!(g.ratio > g.fixed_ratio);
        assert!(matches!(ddp_group_pad(&[vec![1], vec![]], 8), Err(Error::EmptyRank(1))));
    }

    #[test]
    fn manifest_round_trip() {
        let mut packs = pack_samples(&samples(&[5, 3, 4, 2, 7]), 8, PackPolicy::FirstFitDecreasing).unwrap().0;
        assign_ranks(&mut packs, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("packs.ndjson");
        write_pack_manifest(&path, &packs, 2).unwrap();
        let recs = read_pack_manifest(&path).unwrap();
        assert_eq!(recs.len(), packs.len());
        assert_eq!(recs[1].rank, 1);
        assert_eq!(recs[2].step, 1);
    }
}
