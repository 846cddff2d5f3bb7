use std::collections::{BTreeMap, HashMap};

use deskmoe_curation::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Union-find over core points, then border points take the adjacent
/// cluster whose smallest core index is lowest.
fn dbscan_oracle(pts: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Label> {
    let n = pts.len();
    let adj = |i: usize, j: usize| pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= eps * eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| adj(i, j)).count() >= min_pts).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in 0..i {
            if core[i] && core[j] && adj(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    // root = smallest core index in the component
    let mut labels = vec![None; n];
    for i in 0..n {
        if core[i] {
            labels[i] = Some(find(&mut parent, i));
        } else {
            labels[i] = (0..n).filter(|&j| core[j] && adj(i, j)).map(|j| find(&mut parent, j)).min();
        }
    }
    labels
}

fn canonical(labels: &[Label]) -> Vec<Label> {
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|l| {
            l.map(|c| {
                let next = map.len();
                *map.entry(c).or_insert(next)
            })
        })
        .collect()
}

#[test]
fn dbscan_examples() {
    let pts: Vec<Vec<f64>> = [0.0, 1.0, 2.0, 10.0, 11.0].iter().map(|&x| vec![x]).collect();
    assert_eq!(
        dbscan_cluster(&pts, 1.5, 2),
        vec![Some(0), Some(0), Some(0), Some(1), Some(1)]
    );
    let same = vec![vec![3.0, 3.0]; 6];
    assert!(dbscan_cluster(&same, 0.1, 3).iter().all(|l| *l == Some(0)));
    let spread: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 10.0]).collect();
    assert!(dbscan_cluster(&spread, 1.0, 2).iter().all(Option::is_none));
}

#[test]
fn dbscan_matches_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let n = rng.random_range(1..=200);
        let d = rng.random_range(1..=3);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let eps = rng.random_range(0.2..2.0);
        let min_pts = rng.random_range(1..=6);
        assert_eq!(canonical(&dbscan_cluster(&pts, eps, min_pts)), canonical(&dbscan_oracle(&pts, eps, min_pts)));
    }
}

proptest! {
    #[test]
    fn dbscan_oracle_property(
        pts in proptest::collection::vec(proptest::collection::vec(0.0f64..5.0, 2), 1..60),
        eps in 0.1f64..1.5,
        min_pts in 1usize..5,
    ) {
        prop_assert_eq!(canonical(&dbscan_cluster(&pts, eps, min_pts)), canonical(&dbscan_oracle(&pts, eps, min_pts)));
    }

    #[test]
    fn pca_full_rank_preserves_distances(
        rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 2..20)
    ) {
        let pca = pca_reduce(&rows, 4).unwrap();
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                prop_assert!((d(&rows[i], &rows[j]) - d(&pca.projected[i], &pca.projected[j])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dedup_idempotent(qs in proptest::collection::vec("[ab ]{0,4}", 0..30)) {
        let samples: Vec<Sample> = qs.iter().enumerate().map(|(i, q)| Sample::new(i.to_string(), q.clone(), "x")).collect();
        let mut eval = BTreeMap::new();
        eval.insert("bench".to_string(), vec!["a b".to_string()]);
        let once = dedup_and_decontaminate(&samples, &eval);
        let twice = dedup_and_decontaminate(&once.retained, &eval);
        prop_assert_eq!(&twice.retained, &once.retained);
        prop_assert!(twice.removed.is_empty());
    }

    #[test]
    fn pass_rate_widening_is_monotone(
        pats in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 0..9), 1..20),
        lo in 0.0f64..1.0, hi in 0.0f64..1.0, widen in 0.0f64..0.5,
    ) {
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        let rs: Vec<PromptRollouts> = pats.iter().enumerate()
            .map(|(i, v)| PromptRollouts { prompt_id: i.to_string(), verdicts: v.clone() }).collect();
        let narrow = pass_rate_filter(&rs, lo, hi).unwrap();
        let wide = pass_rate_filter(&rs, (lo - widen).max(0.0), (hi + widen).min(1.0)).unwrap();
        for id in &narrow.retained {
            prop_assert!(wide.retained.contains(id));
        }
    }

    #[test]
    fn selection_respects_budget(n in 1usize..40, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let samples: Vec<Sample> = (0..n)
            .map(|i| Sample::new(i.to_string(), format!("question {} about topic {}", i, i % 3), format!("answer {}", i * 7)))
            .collect();
        let budget = (n as f64 * frac) as usize;
        let cfg = SelectConfig { seed, ..SelectConfig::default() };
        let sel = select_multilingual(&samples, budget, &HashedNgramEmbedder::default(), &cfg).unwrap();
        prop_assert_eq!(sel.indices.len(), budget);
        let mut dedup = sel.indices.clone();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), budget);
    }
}

#[test]
fn dedup_examples() {
    let s = vec![
        Sample::new("a", "What is 2+2?", "4"),
        Sample::new("b", "What is 2+2?", "four"),
        Sample::new("c", "  name the   capital of France ", "Paris"),
        Sample::new("d", "Something else", "x"),
    ];
    let mut eval = BTreeMap::new();
    eval.insert("geo".to_string(), vec!["Name the capital of France".to_string()]);
    let out = dedup_and_decontaminate(&s, &eval);
    let ids: Vec<&str> = out.retained.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["a", "d"]);
    assert_eq!(out.removed[0].reason, RemovalReason::Duplicate { of: "a".into() });
    assert_eq!(out.removed[1].reason, RemovalReason::Contaminated { eval_set: "geo".into() });

    let mut other = BTreeMap::new();
    other.insert("x".to_string(), vec!["unrelated".to_string()]);
    let clean = dedup_and_decontaminate(&s[2..], &other);
    assert_eq!(clean.retained.len(), 2);
}

#[test]
fn pca_examples() {
    let line: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, i as f64]).collect();
    let p = pca_reduce(&line, 1).unwrap();
    let r = 1.0 / 2f64.sqrt();
    assert!((p.components[0][0] - r).abs() < 1e-12 && (p.components[0][1] - r).abs() < 1e-12);
    assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-12);

    let square = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
    let p = pca_reduce(&square, 2).unwrap();
    assert!((p.explained_variance_ratio[0] - 0.5).abs() < 1e-12);
    assert!((p.explained_variance_ratio[1] - 0.5).abs() < 1e-12);

    assert!(matches!(pca_reduce(&square, 3), Err(CurationError::Config(_))));
    assert!(matches!(pca_reduce(&square[..1], 1), Err(CurationError::Input(_))));
}

#[test]
fn pca_full_rank_reconstruction() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let p = pca_reduce(&rows, 5).unwrap();
    let err = rows
        .iter()
        .zip(&p.projected)
        .flat_map(|(r, q)| r.iter().zip(p.reconstruct(q)).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    assert!(err <= 1e-9, "{err}");
    for c in &p.components {
        let pivot = c.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
        assert!(pivot > 0.0);
    }
    assert!(p.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn largest_remainder() {
    assert_eq!(allocate_largest_remainder(&[80, 20], 10), vec![8, 2]);
    assert_eq!(allocate_largest_remainder(&[1, 1, 1], 2), vec![1, 1, 0]);
    assert_eq!(allocate_largest_remainder(&[5, 3, 2], 7).iter().sum::<usize>(), 7);
}

#[test]
fn selection_examples() {
    let emb = HashedNgramEmbedder::default();
    let samples: Vec<Sample> = (0..12)
        .map(|i| Sample::new(i.to_string(), format!("q{i} {}", "abc".repeat(i % 4)), format!("a{i}")))
        .collect();
    let all = select_multilingual(&samples, samples.len(), &emb, &SelectConfig::default()).unwrap();
    assert_eq!(all.indices, (0..12).collect::<Vec<_>>());
    assert!(select_multilingual(&samples, 0, &emb, &SelectConfig::default()).unwrap().indices.is_empty());
    assert!(select_multilingual(&samples, 13, &emb, &SelectConfig::default()).is_err());

    // identical question embeddings put both in one cluster
    let pair = vec![
        Sample::new("same", "tell me about rust", "tell me about rust"),
        Sample::new("diff", "tell me about rust", "zzzz qqqq"),
    ];
    let cfg = SelectConfig { pca_k: 2, eps: 0.1, min_pts: 1, seed: 0 };
    for seed in 0..20 {
        let sel = select_multilingual(&pair, 1, &emb, &SelectConfig { seed, ..cfg.clone() }).unwrap();
        assert!((sel.qa_similarity[0] - 1.0).abs() < 1e-12);
        assert_eq!(sel.indices, vec![1]);
    }
    let a = select_multilingual(&samples, 5, &emb, &SelectConfig { seed: 9, ..SelectConfig::default() }).unwrap();
    let b = select_multilingual(&samples, 5, &emb, &SelectConfig { seed: 9, ..SelectConfig::default() }).unwrap();
    assert_eq!(a, b);
}

#[test]
fn embedder_is_deterministic_and_normalized() {
    let e = HashedNgramEmbedder::default();
    let v = e.embed("Xin chào thế giới");
    assert_eq!(v.len(), 64);
    assert_eq!(v, e.embed("  xin chào   thế giới"));
    assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(cosine(&v, &e.embed("unrelated english")) < 0.9);
}

#[test]
fn resample_frequencies_follow_occurrence() {
    let occ = [1u32, 2, 3, 4];
    let samples: Vec<Sample> = occ
        .iter()
        .enumerate()
        .map(|(i, &o)| Sample { occurrence: o, quality: 0.5, ..Sample::new(i.to_string(), "q", "a") })
        .collect();
    let draws = 10_000;
    let mut counts = [0usize; 4];
    for seed in 0..draws {
        counts[selective_resample(&samples, 1, 1.0, seed).unwrap()[0]] += 1;
    }
    let total: u32 = occ.iter().sum();
    let chi2: f64 = counts
        .iter()
        .zip(occ)
        .map(|(&c, o)| {
            let e = draws as f64 * o as f64 / total as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    // 3 degrees of freedom, p = 0.001
    assert!(chi2 < 16.27, "chi2 {chi2} counts {counts:?}");
}

#[test]
fn resample_edge_cases() {
    let mut samples = vec![
        Sample { quality: 0.0, occurrence: 3, ..Sample::new("z", "q", "a") },
        Sample { quality: 0.8, occurrence: 2, ..Sample::new("p", "q", "a") },
    ];
    for seed in 0..50 {
        let got = selective_resample(&samples, 2, 1.0, seed).unwrap();
        assert_eq!(got, vec![1, 1]);
    }
    assert!(matches!(selective_resample(&samples, 3, 1.0, 0), Err(CurationError::Selection(_))));
    // gamma = 0: weights are occurrence counts alone, zero quality included
    assert_eq!(selective_resample(&samples, 5, 0.0, 0).unwrap().len(), 5);
    samples[1].quality = 0.0;
    assert!(matches!(selective_resample(&samples, 1, 1.0, 0), Err(CurationError::Selection(_))));
    assert!(matches!(selective_resample(&samples, 0, 1.0, 0), Err(CurationError::Config(_))));
}

#[test]
fn pass_rate_examples() {
    let r = |id: &str, correct: usize, total: usize| PromptRollouts {
        prompt_id: id.into(),
        verdicts: (0..total).map(|i| i < correct).collect(),
    };
    let rs = vec![r("half", 4, 8), r("easy", 8, 8), r("hard", 0, 8), r("none", 0, 0), r("edge", 2, 8)];
    let out = pass_rate_filter(&rs, 0.25, 0.75).unwrap();
    assert_eq!(out.retained, ["half", "edge"]);
    assert_eq!(out.skipped, ["none"]);
    assert_eq!(out.dropped.len(), 2);
    assert!(pass_rate_filter(&rs, 0.8, 0.2).is_err());
    assert!(pass_rate_filter(&rs, -0.1, 0.2).is_err());
}

#[test]
fn sample_store_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = vec![
        Sample { language: "th".into(), quality: 0.3, occurrence: 4, ..Sample::new("1", "สวัสดี", "ครับ") },
        Sample::new("2", "b", "c"),
    ];
    let path = dir.path().join("samples.ndjson");
    write_samples(&path, &s).unwrap();
    assert_eq!(read_samples(&path).unwrap(), s);

    let out = dedup_and_decontaminate(&[s[1].clone(), s[1].clone()], &BTreeMap::new());
    let log = dir.path().join("removed.ndjson");
    write_removals(&log, &out.removed).unwrap();
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.contains("\"reason\":\"duplicate\""));
    assert_eq!(read_removals(&log).unwrap(), out.removed);

    std::fs::write(&path, "{\"id\":\"x\",\"question\":\"q\",\"answer\":\"a\",\"language\":\"en\",\"quality\":2.0,\"occurrence\":1}\n").unwrap();
    assert!(matches!(read_samples(&path), Err(CurationError::Input(_))));
}
