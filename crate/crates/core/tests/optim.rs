mod common;

use common::{max_abs_diff, tiny};
use deskmoe_core::model::{apply_freeze_plan, decoder_forward, lm_cross_entropy, FreezePlan, FreezeRule, LayerRange, ParamStore, Submodule};
use deskmoe_core::optim::{
    accumulated_step, adamw_step, lr_at_step, AdamWConfig, LossAveraging, MicroInfo, MicroLoss, OptimizerState, ScheduleKind,
    Stage, StagePlan,
};
use deskmoe_core::packing::{pack_samples, PackPolicy, PackedBatch, Sample};
use deskmoe_core::{Error, Precision, Tape, Tensor};
use proptest::prelude::*;

fn scalar_store(v: f64, g: Option<f64>) -> ParamStore {
    let mut s = ParamStore::new();
    let mut t = Tensor::from_vec(vec![v]).with_requires_grad(true);
    if let Some(g) = g {
        t.accumulate_grad(&[g], 1.0);
    }
    s.insert("p", t);
    s
}

fn no_decay() -> AdamWConfig {
    AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    }
}

#[test]
fn zero_grads_without_decay_change_nothing() {
    let mut s = scalar_store(0.7, Some(0.0));
    let mut st = OptimizerState::new(no_decay());
    adamw_step(&mut s, &mut st, 0.1).unwrap();
    assert_eq!(s.get("p").unwrap().data(), &[0.7]);
}

#[test]
fn first_step_moves_by_lr() {
    let mut s = scalar_store(0.0, Some(1.0));
    let mut st = OptimizerState::new(no_decay());
    adamw_step(&mut s, &mut st, 0.1).unwrap();
    let expect = -0.1 * 1.0 / (1.0 + 1e-8);
    assert!((s.get("p").unwrap().item() - expect).abs() < 1e-15);
}

#[test]
fn clipping_rescales_to_unit_norm() {
    let mut s = ParamStore::new();
    let mut t = Tensor::from_vec(vec![0.0, 0.0]).with_requires_grad(true);
    t.accumulate_grad(&[3.0, 4.0], 1.0);
    s.insert("p", t);
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        beta1: 0.0,
        beta2: 0.0,
        ..AdamWConfig::default()
    };
    let mut st = OptimizerState::new(cfg);
    let r = adamw_step(&mut s, &mut st, 1.0).unwrap();
    assert_eq!(r.grad_norm, 5.0);
    assert!((r.clipped_norm - 1.0).abs() < 1e-15);
    assert!(max_abs_diff(&st.m["p"], &[0.6, 0.8]) < 1e-15);
}

#[test]
fn non_finite_gradient_aborts_step() {
    let mut s = scalar_store(1.0, Some(f64::NAN));
    let mut st = OptimizerState::new(AdamWConfig::default());
    assert!(matches!(adamw_step(&mut s, &mut st, 0.1), Err(Error::Numeric(_))));
    assert_eq!(st.step, 0);
    assert_eq!(s.get("p").unwrap().item(), 1.0);
}

#[test]
fn zero_lr_only_counts_steps() {
    let mut s = scalar_store(0.3, Some(0.5));
    let mut st = OptimizerState::new(AdamWConfig::default());
    adamw_step(&mut s, &mut st, 0.01).unwrap();
    let (p, m, v) = (s.get("p").unwrap().item(), st.m.clone(), st.v.clone());
    adamw_step(&mut s, &mut st, 0.0).unwrap();
    assert_eq!(st.step, 2);
    assert_eq!(s.get("p").unwrap().item(), p);
    assert_eq!((st.m, st.v), (m, v));
}

proptest! {
    #[test]
    fn clipping_never_increases_norm(g in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
        let mut s = ParamStore::new();
        let mut t = Tensor::from_vec(vec![0.0; g.len()]).with_requires_grad(true);
        t.accumulate_grad(&g, 1.0);
        s.insert("p", t);
        let mut st = OptimizerState::new(AdamWConfig::default());
        let r = adamw_step(&mut s, &mut st, 1e-3).unwrap();
        prop_assert!(r.clipped_norm <= r.grad_norm + 1e-12);
        prop_assert!(r.clipped_norm <= 1.0 + 1e-12);
    }

    #[test]
    fn schedule_continuous_and_nonincreasing(total in 3usize..400, warm_frac in 0.0f64..0.9, lr_max in 1e-5f64..1e-2, ratio in 0.0f64..1.0) {
        let warmup = ((total as f64) * warm_frac) as usize;
        let plan = StagePlan::new(vec![Stage {
            name: "s".into(),
            total_steps: total,
            warmup_steps: warmup,
            lr_max,
            lr_min: lr_max * ratio,
            schedule_kind: ScheduleKind::Cosine,
            alpha_max: 0.0,
            beta_max: 0.0,
            rope_base: 1e4,
            global_batch: 1,
            micro_batch: 1,
            grad_accum_steps: 1,
        }]);
        prop_assert!(plan.validate().is_ok());
        let lrs: Vec<f64> = (0..total).map(|t| lr_at_step(&plan, 0, t).unwrap()).collect();
        if warmup > 0 {
            // the last warmup step is one linear increment below the peak
            prop_assert!((lrs[warmup] - lrs[warmup - 1] - lr_max / warmup as f64).abs() < 1e-12);
        }
        prop_assert!((lrs[warmup] - lr_max).abs() < 1e-15);
        for w in lrs[warmup..].windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-18);
        }
        prop_assert!((lrs[total - 1] - lr_max * ratio).abs() < 1e-15 || warmup == total - 1);
    }
}

fn sample(id: usize, len: usize) -> Sample {
    Sample::new(id, (0..len).map(|t| 1 + (id * 5 + t * 3) % 10).collect())
}

fn pack_all(samples: &[Sample]) -> PackedBatch {
    let cap: usize = samples.iter().map(Sample::len).sum();
    let (packs, _) = pack_samples(samples, cap, PackPolicy::FirstFitDecreasing).unwrap();
    assert_eq!(packs.len(), 1);
    packs.into_iter().next().unwrap()
}

fn run_step(store: &ParamStore, batches: &[PackedBatch], averaging: LossAveraging) -> ParamStore {
    let cfg = tiny();
    let mut params = store.clone();
    let mut state = OptimizerState::new(AdamWConfig::default());
    let micro: Vec<MicroInfo> = batches
        .iter()
        .map(|b| MicroInfo {
            tokens: b.lm_targets().1.iter().sum(),
            samples: b.n_samples(),
        })
        .collect();
    accumulated_step(&mut params, &mut state, 1e-2, &micro, averaging, Precision::F64, |i, tape: &mut Tape, p| {
        let b = &batches[i];
        let out = decoder_forward(tape, p, &cfg, &b.tokens, &b.attention_spec())?;
        let (targets, weights) = b.lm_targets();
        let lm = lm_cross_entropy(tape, out.logits, &targets, &weights)?;
        Ok(MicroLoss { lm_sum: lm.sum, extra: None })
    })
    .unwrap();
    params
}

fn max_param_diff(a: &ParamStore, b: &ParamStore) -> f64 {
    a.iter()
        .map(|(n, t)| max_abs_diff(t.data(), b.get(n).unwrap().data()))
        .fold(0.0, f64::max)
}

#[test]
fn four_micro_batches_match_one_big_batch() {
    let cfg = tiny();
    let store = ParamStore::init(&cfg, 12).unwrap();
    let samples: Vec<Sample> = (0..4).map(|i| sample(i, 4)).collect();
    let micro: Vec<PackedBatch> = samples.iter().map(|s| pack_all(std::slice::from_ref(s))).collect();
    let big = vec![pack_all(&samples)];
    let a = run_step(&store, &micro, LossAveraging::GlobalTokens);
    let b = run_step(&store, &big, LossAveraging::GlobalTokens);
    assert!(max_param_diff(&a, &b) <= 1e-10);
    assert!(max_param_diff(&a, &store) > 1e-4);
}

#[test]
fn unequal_micro_batches_need_global_averaging() {
    let cfg = tiny();
    let store = ParamStore::init(&cfg, 13).unwrap();
    // 3 and 5 tokens: 2 and 4 loss-bearing positions
    let samples = [sample(0, 3), sample(1, 5)];
    let micro: Vec<PackedBatch> = samples.iter().map(|s| pack_all(std::slice::from_ref(s))).collect();
    let big = vec![pack_all(&samples)];
    let oracle = run_step(&store, &big, LossAveraging::GlobalTokens);
    let global = run_step(&store, &micro, LossAveraging::GlobalTokens);
    let naive = run_step(&store, &micro, LossAveraging::NaivePerMicro);
    assert!(max_param_diff(&global, &oracle) <= 1e-10);
    assert!(max_param_diff(&naive, &oracle) > 1e-6);
    let by_sample = run_step(&store, &micro, LossAveraging::GlobalSamples);
    let by_sample_oracle = run_step(&store, &big, LossAveraging::GlobalSamples);
    assert!(max_param_diff(&by_sample, &by_sample_oracle) <= 1e-10);
}

#[test]
fn single_micro_batch_equals_plain_step() {
    let cfg = tiny();
    let store = ParamStore::init(&cfg, 14).unwrap();
    let b = pack_all(&[sample(0, 6), sample(1, 3)]);
    let accumulated = run_step(&store, std::slice::from_ref(&b), LossAveraging::GlobalTokens);

    let mut params = store.clone();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape).unwrap();
    let out = decoder_forward(&mut tape, &p, &cfg, &b.tokens, &b.attention_spec()).unwrap();
    let (targets, weights) = b.lm_targets();
    let lm = lm_cross_entropy(&mut tape, out.logits, &targets, &weights).unwrap();
    let loss = tape.scale(lm.sum, 1.0 / lm.count).unwrap();
    tape.backward(loss).unwrap();
    p.collect_grads(&tape, &mut params, 1.0);
    let mut state = OptimizerState::new(AdamWConfig::default());
    adamw_step(&mut params, &mut state, 1e-2).unwrap();
    assert!(max_param_diff(&accumulated, &params) <= 1e-15);
}

#[test]
fn empty_global_count_errors() {
    let mut params = ParamStore::init(&tiny(), 0).unwrap();
    let mut state = OptimizerState::default();
    let micro = [MicroInfo { tokens: 0.0, samples: 0 }];
    let err = accumulated_step(&mut params, &mut state, 1e-3, &micro, LossAveraging::GlobalTokens, Precision::F64, |_, _, _| {
        unreachable!()
    })
    .unwrap_err();
    assert!(matches!(err, Error::EmptyBatch));
}

#[test]
fn frozen_parameters_stay_bit_identical() {
    let cfg = tiny();
    let store = ParamStore::init(&cfg, 15).unwrap();
    let plan = FreezePlan::with_rules(vec![FreezeRule::only(LayerRange::Last(1), &[Submodule::Attention, Submodule::Experts])]);
    let frozen = apply_freeze_plan(&store, &cfg, &plan, 0).unwrap();
    let b = pack_all(&[sample(0, 7), sample(3, 5)]);
    let mut params = frozen.params.clone();
    let mut state = OptimizerState::new(AdamWConfig::default());
    for _ in 0..5 {
        let micro = [MicroInfo {
            tokens: b.lm_targets().1.iter().sum(),
            samples: 2,
        }];
        accumulated_step(&mut params, &mut state, 1e-2, &micro, LossAveraging::GlobalTokens, Precision::F64, |_, tape, p| {
            let out = decoder_forward(tape, p, &cfg, &b.tokens, &b.attention_spec())?;
            let (t, w) = b.lm_targets();
            Ok(MicroLoss {
                lm_sum: lm_cross_entropy(tape, out.logits, &t, &w)?.sum,
                extra: None,
            })
        })
        .unwrap();
    }
    let mut moved = 0;
    for (name, t) in params.iter() {
        let before = frozen.params.get(name).unwrap();
        if frozen.trainable.contains(name) {
            moved += usize::from(t.data() != before.data());
        } else {
            assert_eq!(t.data(), before.data(), "{name}");
        }
    }
    assert!(moved > 0);
}
