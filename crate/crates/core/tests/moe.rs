mod common;

use common::max_abs_diff;
use deskmoe_core::model::{swiglu, SwigluWeights};
use deskmoe_core::moe::{
    aux_loss, aux_loss_on_tape, moe_forward, route_on_tape, route_tokens, total_objective_on_tape, z_loss,
    z_loss_on_tape, MoeTerms, MoeWeights, RoutingOutcome,
};
use deskmoe_core::tensor::check_gradients;
use deskmoe_core::{Error, Precision, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Inputs: x, router, then gate/up/down for each expert (shared first).
fn setup(b: usize, d: usize, n: usize, shared: usize, inter: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![random(vec![b, d], &mut rng, 1.0), random(vec![d, n], &mut rng, 1.0)];
    for _ in 0..shared + n {
        v.push(random(vec![d, inter], &mut rng, 0.5));
        v.push(random(vec![d, inter], &mut rng, 0.5));
        v.push(random(vec![inter, d], &mut rng, 0.5));
    }
    v
}

fn weights(vars: &[Var], shared: usize) -> MoeWeights {
    let experts: Vec<SwigluWeights> = vars[2..]
        .chunks(3)
        .map(|c| SwigluWeights {
            gate: c[0],
            up: c[1],
            down: c[2],
        })
        .collect();
    MoeWeights {
        shared: experts[..shared].to_vec(),
        specialized: experts[shared..].to_vec(),
    }
}

fn moe_loss(tape: &mut Tape, vars: &[Var], shared: usize, k: usize) -> Result<Var, Error> {
    let routed = route_on_tape(tape, vars[0], vars[1], k)?;
    let y = moe_forward(tape, vars[0], &weights(vars, shared), &routed)?;
    let sq = tape.mul(y, y)?;
    let lm = tape.sum(sq)?;
    let mut terms = MoeTerms::default();
    terms.aux.push(aux_loss_on_tape(tape, &routed)?);
    terms.z.push(z_loss_on_tape(tape, &routed)?);
    total_objective_on_tape(tape, lm, &terms, 0.3, 0.2)
}

#[test]
fn moe_forward_gradient_check() {
    let (b, d, n, k, shared) = (3, 8, 4, 2, 1);
    let inputs = setup(b, d, n, shared, 5, 11);
    let report = check_gradients(&inputs, 1e-6, |tape, vars| moe_loss(tape, vars, shared, k)).unwrap();
    assert!(report.max_rel_err <= 1e-5, "{report:?}");

}

#[test]
fn gradients_reach_only_selected_and_shared_experts() {
    let (n, k, shared) = (4, 2, 1);
    let inputs = setup(1, 8, n, shared, 5, 11);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let routed = route_on_tape(&mut tape, vars[0], vars[1], k).unwrap();
    let selected: Vec<usize> = (0..n).filter(|&e| routed.outcome.c_agg[e] > 0).collect();
    let loss = moe_loss(&mut tape, &vars, shared, k).unwrap();
    tape.backward(loss).unwrap();
    for e in 0..shared + n {
        let gate = vars[2 + 3 * e];
        let active = e < shared || selected.contains(&(e - shared));
        let g = tape.grad(gate).map(|g| g.iter().any(|&x| x != 0.0)).unwrap_or(false);
        assert_eq!(g, active, "expert {e}");
    }
    assert_eq!(selected.len(), k);
}

#[test]
fn single_expert_moe_is_dense_swiglu() {
    let inputs = setup(5, 8, 1, 0, 6, 3);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let routed = route_on_tape(&mut tape, vars[0], vars[1], 1).unwrap();
    assert!(routed.outcome.probs.iter().all(|&p| p == 1.0));
    let w = weights(&vars, 0);
    let y = moe_forward(&mut tape, vars[0], &w, &routed).unwrap();
    let dense = swiglu(&mut tape, vars[0], &w.specialized[0]).unwrap();
    assert!(max_abs_diff(tape.data(y), tape.data(dense)) <= 1e-12);
}

#[test]
fn zero_specialized_experts_leave_shared_sum() {
    let (b, d, n, shared) = (4, 6, 3, 2);
    let mut inputs = setup(b, d, n, shared, 4, 5);
    for t in inputs.iter_mut().skip(2 + 3 * shared) {
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let routed = route_on_tape(&mut tape, vars[0], vars[1], 2).unwrap();
    let w = weights(&vars, shared);
    let y = moe_forward(&mut tape, vars[0], &w, &routed).unwrap();
    let s0 = swiglu(&mut tape, vars[0], &w.shared[0]).unwrap();
    let s1 = swiglu(&mut tape, vars[0], &w.shared[1]).unwrap();
    let s = tape.add(s0, s1).unwrap();
    assert!(max_abs_diff(tape.data(y), tape.data(s)) <= 1e-12);
}

#[test]
fn batch_mismatch_is_dimension_error() {
    let inputs = setup(3, 4, 2, 0, 3, 1);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let routed = route_on_tape(&mut tape, vars[0], vars[1], 1).unwrap();
    let other = tape.constant(Tensor::zeros(vec![2, 4]));
    let err = moe_forward(&mut tape, other, &weights(&vars, 0), &routed).unwrap_err();
    assert!(matches!(err, Error::Tensor(_)));
}

#[test]
fn uniform_router_picks_lowest_indices() {
    let h = Tensor::full(vec![3, 5], 0.0);
    let w = Tensor::full(vec![5, 48], 0.7);
    let o = route_tokens(&h, &w, 4).unwrap();
    for t in 0..3 {
        assert_eq!(o.topk_idx[t], vec![0, 1, 2, 3]);
        for e in 0..48 {
            assert!((o.prob(t, e) - 1.0 / 48.0).abs() < 1e-15);
        }
    }
}

#[test]
fn aux_worked_example_through_router() {
    // hidden = [1, 0] and [0, 1]; router columns give the target probabilities
    let l0 = (0.75f64 / 0.25).ln();
    let l1 = (0.6f64 / 0.4).ln();
    let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let w = Tensor::from_rows(&[vec![l0, 0.0], vec![l1, 0.0]]).unwrap();
    let o = route_tokens(&h, &w, 1).unwrap();
    assert!(max_abs_diff(&o.p_agg, &[1.35, 0.65]) < 1e-12);
    assert_eq!(o.c_agg, vec![2, 0]);
    assert!((aux_loss(&o).unwrap() - 1.35).abs() < 1e-12);
}

#[test]
fn non_finite_logits_are_numeric_error() {
    let h = Tensor::full(vec![1, 2], 1e300);
    let w = Tensor::full(vec![2, 3], 1e300);
    assert!(matches!(route_tokens(&h, &w, 1), Err(Error::Numeric(_))));
}

#[test]
fn router_runs_at_full_precision_on_f32_tapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = random(vec![16, 8], &mut rng, 2.0);
    let w = random(vec![8, 6], &mut rng, 2.0);
    let mut t32 = Tape::with_precision(Precision::F32);
    let (hv, wv) = (t32.leaf(h.clone()), t32.leaf(w.clone()));
    let r32 = route_on_tape(&mut t32, hv, wv, 2).unwrap();
    // inputs were rounded to f32 on entry; the router itself adds no rounding
    let h32 = t32.value(hv).clone();
    let w32 = t32.value(wv).clone();
    let exact = route_tokens(&h32, &w32, 2).unwrap();
    assert_eq!(r32.outcome.probs, exact.probs);
    let r64 = route_tokens(&h, &w, 2).unwrap();
    assert!(r64.z_logits.iter().all(|l| l.abs() <= 30.0));
    assert!(max_abs_diff(&r32.outcome.probs, &r64.probs) <= 1e-6);
}

fn arb_routing() -> impl Strategy<Value = (Vec<Vec<f64>>, usize, usize)> {
    (1usize..7, 1usize..10, 1usize..4).prop_flat_map(|(n, b, k)| {
        let k = k.min(n);
        (proptest::collection::vec(proptest::collection::vec(-30.0f64..30.0, n), b), Just(n), Just(k))
    })
}

proptest! {
    #[test]
    fn routing_invariants((rows, n, k) in arb_routing()) {
        let b = rows.len();
        let h = Tensor::from_rows(&rows).unwrap();
        let mut eye = vec![0.0; n * n];
        for i in 0..n { eye[i * n + i] = 1.0; }
        let w = Tensor::new(vec![n, n], eye).unwrap();
        let o = route_tokens(&h, &w, k).unwrap();
        for row in o.probs.chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        for sel in &o.topk_idx {
            let mut s = sel.clone();
            s.sort_unstable();
            s.dedup();
            prop_assert_eq!(s.len(), k);
        }
        prop_assert!((o.p_agg.iter().sum::<f64>() - b as f64).abs() <= 1e-9);
        prop_assert_eq!(o.c_agg.iter().sum::<usize>(), b * k);
        let z = z_loss(&o).unwrap();
        prop_assert!(z >= 0.0);
    }

    #[test]
    fn aux_at_least_one_when_orderings_agree(
        n in 2usize..12,
        k in 1usize..4,
        b in 1usize..40,
        raw in proptest::collection::vec(0.01f64..1.0, 12),
        craw in proptest::collection::vec(0usize..100, 12),
    ) {
        let k = k.min(n);
        // p sums to B, c sums to B·K, both sorted descending
        let mut p: Vec<f64> = raw[..n].to_vec();
        let ps: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x *= b as f64 / ps);
        p.sort_by(|a, c| c.total_cmp(a));
        let total = b * k;
        let cs: usize = craw[..n].iter().sum::<usize>().max(1);
        let mut c: Vec<usize> = craw[..n].iter().map(|&x| x * total / cs).collect();
        let short = total - c.iter().sum::<usize>();
        c[0] += short;
        c.sort_by(|a, d| d.cmp(a));
        let o = RoutingOutcome {
            batch: b,
            n_experts: n,
            top_k: k,
            probs: vec![],
            topk_idx: vec![],
            p_agg: p,
            c_agg: c,
            z_logits: vec![],
        };
        prop_assert!(aux_loss(&o).unwrap() >= 1.0 - 1e-9);
    }
}

#[test]
fn collapse_yields_n() {
    let n = 6;
    let o = RoutingOutcome {
        batch: 5,
        n_experts: n,
        top_k: 1,
        probs: vec![],
        topk_idx: vec![],
        p_agg: vec![5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        c_agg: vec![5, 0, 0, 0, 0, 0],
        z_logits: vec![],
    };
    assert_eq!(aux_loss(&o).unwrap(), n as f64);
}
