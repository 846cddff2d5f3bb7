use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{cosine, dbscan_cluster, pca_reduce, CurationError, Embedder, Label, Result, Sample};

#[derive(Debug, Clone, PartialEq)]
pub struct SelectConfig {
    /// Capped at the embedding dimension.
    pub pca_k: usize,
    pub eps: f64,
    pub min_pts: usize,
    pub seed: u64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            pca_k: 8,
            eps: 0.5,
            min_pts: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Selected sample indices, ascending.
    pub indices: Vec<usize>,
    pub labels: Vec<Label>,
    pub qa_similarity: Vec<f64>,
    /// `(cluster, size, drawn)`; the noise bucket has cluster `None`.
    pub allocation: Vec<(Label, usize, usize)>,
}

/// Splits `budget` proportionally to `sizes`: floors first, then one extra
/// unit to the largest remainders, ties to the lower index.
pub fn allocate_largest_remainder(sizes: &[usize], budget: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let budget = budget.min(total);
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| budget * s / total).collect();
    let mut rest: Vec<usize> = (0..sizes.len()).collect();
    rest.sort_by_key(|&i| (std::cmp::Reverse(budget * sizes[i] % total), i));
    let short = budget - alloc.iter().sum::<usize>();
    for &i in &rest[..short] {
        alloc[i] += 1;
    }
    alloc
}

/// Draws `m` of `weights` without replacement (Efraimidis-Spirakis keys
/// `ln(u) / w`). Zero-weight items come last, in index order.
fn weighted_pick(weights: &[f64], m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u: f64 = 1.0 - rng.random::<f64>();
            (if w > 0.0 { u.ln() / w } else { f64::NEG_INFINITY }, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(m).map(|(_, i)| i).collect()
}

/// Embeds questions, reduces them with PCA, clusters with DBSCAN, then
/// draws from each cluster in proportion to its size. Within a cluster a
/// sample is weighted by `1 - cos(question, answer)`. Noise points form one
/// extra bucket.
pub fn select_multilingual(
    samples: &[Sample],
    budget: usize,
    embedder: &dyn Embedder,
    cfg: &SelectConfig,
) -> Result<Selection> {
    if budget > samples.len() {
        return Err(CurationError::Config(format!("budget {budget} exceeds {} samples", samples.len())));
    }
    let questions: Vec<Vec<f64>> = samples.iter().map(|s| embedder.embed(&s.question)).collect();
    let qa_similarity: Vec<f64> = samples
        .iter()
        .zip(&questions)
        .map(|(s, q)| cosine(q, &embedder.embed(&s.answer)))
        .collect();
    let labels = if samples.len() >= 2 {
        let pca = pca_reduce(&questions, cfg.pca_k.min(embedder.dim()))?;
        dbscan_cluster(&pca.projected, cfg.eps, cfg.min_pts)
    } else {
        vec![None; samples.len()]
    };

    let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut buckets: Vec<(Label, Vec<usize>)> = (0..n_clusters).map(|c| (Some(c), Vec::new())).collect();
    buckets.push((None, Vec::new()));
    for (i, l) in labels.iter().enumerate() {
        buckets[l.unwrap_or(n_clusters)].1.push(i);
    }
    buckets.retain(|(_, members)| !members.is_empty());
    let sizes: Vec<usize> = buckets.iter().map(|(_, m)| m.len()).collect();
    let quota = allocate_largest_remainder(&sizes, budget);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices = Vec::with_capacity(budget);
    let mut allocation = Vec::with_capacity(buckets.len());
    for ((label, members), &m) in buckets.iter().zip(&quota) {
        let weights: Vec<f64> = members.iter().map(|&i| (1.0 - qa_similarity[i]).max(0.0)).collect();
        indices.extend(weighted_pick(&weights, m, &mut rng).into_iter().map(|j| members[j]));
        allocation.push((*label, members.len(), m));
    }
    indices.sort_unstable();
    Ok(Selection {
        indices,
        labels,
        qa_similarity,
        allocation,
    })
}

/// Expands each sample into `occurrence` copies of weight `quality^gamma`
/// and draws `target_size` copies without replacement. Returns the sample
/// index of each drawn copy in draw order, so repeats are possible.
pub fn selective_resample(samples: &[Sample], target_size: usize, gamma: f64, seed: u64) -> Result<Vec<usize>> {
    if target_size == 0 {
        return Err(CurationError::Config("target size must be at least 1".into()));
    }
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(CurationError::Config(format!("gamma {gamma} must be finite and non-negative")));
    }
    let mut owners = Vec::new();
    let mut weights = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        let w = s.quality.powf(gamma);
        for _ in 0..s.occurrence {
            owners.push(i);
            weights.push(w);
        }
    }
    let positive = weights.iter().filter(|&&w| w > 0.0).count();
    if positive == 0 {
        return Err(CurationError::Selection("every sampling weight is zero".into()));
    }
    if target_size > positive {
        return Err(CurationError::Selection(format!(
            "target size {target_size} exceeds the {positive} copies with positive weight"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(weighted_pick(&weights, target_size, &mut rng)
        .into_iter()
        .map(|c| owners[c])
        .collect())
}
