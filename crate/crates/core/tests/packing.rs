mod common;

use common::{max_abs_diff, tiny};
use deskmoe_core::model::{decoder_forward, forward_logits, lm_cross_entropy, ParamStore};
use deskmoe_core::packing::{ddp_group_pad, pack_samples, packed_attention_spec, AttentionSpec, PackPolicy, Sample};
use deskmoe_core::Tape;
use proptest::prelude::*;

fn arb_samples(max_len: usize) -> impl Strategy<Value = Vec<Sample>> {
    proptest::collection::vec(proptest::collection::vec(1usize..11, 1..=max_len), 1..40).prop_map(|v| {
        v.into_iter().enumerate().map(|(i, t)| Sample::new(i, t)).collect()
    })
}

fn sorted(mut v: Vec<Sample>) -> Vec<(usize, Vec<usize>)> {
    v.sort_by_key(|s| s.id);
    v.into_iter().map(|s| (s.id, s.tokens)).collect()
}

proptest! {
    #[test]
    fn unpack_restores_input(samples in arb_samples(24), extra in 0usize..8) {
        let cap = 24 + extra;
        let (packs, report) = pack_samples(&samples, cap, PackPolicy::FirstFitDecreasing).unwrap();
        let back: Vec<Sample> = packs.iter().flat_map(|p| p.unpack()).collect();
        prop_assert_eq!(sorted(back), sorted(samples.clone()));
        for p in &packs {
            prop_assert!(p.boundaries.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(p.real_tokens() + p.pad_len, cap);
            for (k, &b) in p.boundaries.iter().enumerate() {
                prop_assert_eq!(p.positions[b], 0);
                for t in p.span(k) {
                    prop_assert_eq!(p.positions[t], t - b);
                }
            }
            let (_, w) = p.lm_targets();
            prop_assert!(w[p.real_tokens()..].iter().all(|&x| x == 0.0));
            let spec = packed_attention_spec(p);
            for i in 0..cap {
                for j in 0..cap {
                    let same = p.sample_ids[i].is_some() && p.sample_ids[i] == p.sample_ids[j];
                    prop_assert_eq!(spec.allows(i, j), same && j <= i);
                }
            }
        }
        let again = pack_samples(&samples, cap, PackPolicy::FirstFitDecreasing).unwrap();
        prop_assert_eq!(again.0, packs);
        prop_assert_eq!(again.1, report);
    }

    #[test]
    fn packing_beats_dynamic_beats_fixed(samples in arb_samples(64), cap in 64usize..160) {
        let (_, r) = pack_samples(&samples, cap, PackPolicy::FirstFitDecreasing).unwrap();
        prop_assert!(r.packing_ratio >= r.dynamic_ratio);
        prop_assert!(r.dynamic_ratio >= r.fixed_ratio);
    }
}

#[test]
fn packed_sample_logits_match_solo_forward() {
    let cfg = tiny();
    let store = ParamStore::init(&cfg, 21).unwrap();
    let samples = vec![
        Sample::new(0, vec![3, 1, 4, 1, 5]),
        Sample::new(1, vec![9, 2, 6]),
        Sample::new(2, vec![5, 3, 5, 8]),
    ];
    let (packs, _) = pack_samples(&samples, 14, PackPolicy::FirstFitDecreasing).unwrap();
    assert_eq!(packs.len(), 1);
    let pack = &packs[0];
    assert!(pack.pad_len > 0);
    let logits = forward_logits(&store, &cfg, &pack.tokens, &pack.attention_spec()).unwrap();
    let v = cfg.vocab_size;
    for (k, s) in pack.unpack().iter().enumerate() {
        let solo = forward_logits(&store, &cfg, &s.tokens, &AttentionSpec::causal(s.len())).unwrap();
        let r = pack.span(k);
        assert!(max_abs_diff(&logits.data()[r.start * v..r.end * v], solo.data()) <= 1e-10);
    }

    // pads carry no loss: the pack's loss equals the sum of solo losses
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let out = decoder_forward(&mut tape, &p, &cfg, &pack.tokens, &pack.attention_spec()).unwrap();
    let (t, w) = pack.lm_targets();
    let packed = lm_cross_entropy(&mut tape, out.logits, &t, &w).unwrap();
    let mut solo_sum = 0.0;
    for s in &samples {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let out = decoder_forward(&mut tape, &p, &cfg, &s.tokens, &AttentionSpec::causal(s.len())).unwrap();
        let targets: Vec<usize> = s.tokens[1..].iter().copied().chain([0]).collect();
        let mut weights = vec![1.0; s.len()];
        weights[s.len() - 1] = 0.0;
        let l = lm_cross_entropy(&mut tape, out.logits, &targets, &weights).unwrap();
        solo_sum += tape.value(l.sum).item();
    }
    assert!((tape.value(packed.sum).item() - solo_sum).abs() <= 1e-10);
}

#[test]
fn dynamic_group_padding_across_steps() {
    // two ranks, three steps with group maxima 8, 6, 8
    let per_rank = vec![vec![8, 4, 5], vec![3, 6, 8]];
    let g = ddp_group_pad(&per_rank, 8).unwrap();
    assert_eq!(g.step_lengths, vec![8, 6, 8]);
    let real = 8 + 4 + 5 + 3 + 6 + 8;
    assert_eq!(g.ratio, real as f64 / (2 * (8 + 6 + 8)) as f64);
    assert_eq!(g.fixed_ratio, real as f64 / (2 * 3 * 8) as f64);
    assert!(g.ratio > g.fixed_ratio);
    assert_eq!(g.step_ratios, vec![11.0 / 16.0, 10.0 / 12.0, 13.0 / 16.0]);
}
