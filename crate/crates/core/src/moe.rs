//! Shared plus specialized expert layer, its router, and the load-balancing
//! and router z regularizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::{swiglu, SwigluWeights};
use crate::tensor::{Precision, Tape, Tensor, TensorError, Var};

/// Router decisions for one batch of `batch` tokens over `n_experts`
/// specialized experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingOutcome {
    pub batch: usize,
    pub n_experts: usize,
    pub top_k: usize,
    /// Row-major `[batch, n_experts]` softmax probabilities.
    pub probs: Vec<f64>,
    /// Selected experts per token, highest probability first.
    pub topk_idx: Vec<Vec<usize>>,
    /// Column sums of `probs`.
    pub p_agg: Vec<f64>,
    /// Number of tokens that selected each expert.
    pub c_agg: Vec<usize>,
    /// Row-major `[batch, n_experts]` router logits.
    pub z_logits: Vec<f64>,
}

impl RoutingOutcome {
    fn from_values(logits: Vec<f64>, probs: Vec<f64>, n: usize, k: usize) -> Self {
        let batch = probs.len() / n;
        let mut p_agg = vec![0.0; n];
        let mut c_agg = vec![0; n];
        let mut topk_idx = Vec::with_capacity(batch);
        for row in probs.chunks(n) {
            for (a, p) in p_agg.iter_mut().zip(row) {
                *a += p;
            }
            let sel = top_k(row, k);
            for &e in &sel {
                c_agg[e] += 1;
            }
            topk_idx.push(sel);
        }
        Self {
            batch,
            n_experts: n,
            top_k: k,
            probs,
            topk_idx,
            p_agg,
            c_agg,
            z_logits: logits,
        }
    }

    pub fn prob(&self, token: usize, expert: usize) -> f64 {
        self.probs[token * self.n_experts + expert]
    }

    /// Tokens routed to `expert`, in token order.
    pub fn tokens_for(&self, expert: usize) -> Vec<usize> {
        (0..self.batch)
            .filter(|&t| self.topk_idx[t].contains(&expert))
            .collect()
    }

    /// Coefficient of variation of the activation counts.
    pub fn count_cv(&self) -> f64 {
        count_cv(&self.c_agg)
    }
}

/// Standard deviation over mean of integer counts (population form).
pub fn count_cv(counts: &[usize]) -> f64 {
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Indices of the `k` largest entries, ties resolved toward the lower index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx.truncate(k);
    idx
}

fn check_router(batch_shape: &[usize], router_shape: &[usize], k: usize) -> Result<(usize, usize)> {
    let (&[b, d], &[rd, n]) = (batch_shape, router_shape) else {
        return Err(Error::Input("router expects hidden [B, d] and weights [d, N]".into()));
    };
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    if d != rd {
        return Err(TensorError::Dimension {
            op: "route_tokens",
            detail: format!("hidden width {d} vs router input {rd}"),
        }
        .into());
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("top_k {k} must lie in 1..={n}")));
    }
    Ok((b, n))
}

fn numeric(e: TensorError) -> Error {
    match e {
        TensorError::NonFinite { op } => Error::Numeric(format!("non-finite router output in {op}")),
        other => other.into(),
    }
}

/// Router values recorded on a tape.
#[derive(Debug, Clone)]
pub struct Routed {
    pub outcome: RoutingOutcome,
    pub logits: Var,
    pub probs: Var,
}

/// Routes `h[B, d]` through `router[d, N]`. Logits and softmax always run at
/// 64-bit precision, whatever the tape's precision.
pub fn route_on_tape(tape: &mut Tape, h: Var, router: Var, k: usize) -> Result<Routed> {
    let (_, n) = check_router(tape.shape(h), tape.shape(router), k)?;
    let saved = tape.precision();
    tape.set_precision(Precision::F64);
    let run = |tape: &mut Tape| -> std::result::Result<(Var, Var), TensorError> {
        let logits = tape.matmul(h, router)?;
        let probs = tape.softmax(logits)?;
        Ok((logits, probs))
    };
    let res = run(tape);
    tape.set_precision(saved);
    let (logits, probs) = res.map_err(numeric)?;
    let outcome = RoutingOutcome::from_values(tape.data(logits).to_vec(), tape.data(probs).to_vec(), n, k);
    Ok(Routed { outcome, logits, probs })
}

/// Routing decision without gradient bookkeeping.
pub fn route_tokens(hidden: &Tensor, router: &Tensor, k: usize) -> Result<RoutingOutcome> {
    let mut tape = Tape::new();
    let h = tape.constant(hidden.clone());
    let w = tape.constant(router.clone());
    Ok(route_on_tape(&mut tape, h, w, k)?.outcome)
}

/// Expert weights of one layer.
#[derive(Debug, Clone)]
pub struct MoeWeights {
    pub shared: Vec<SwigluWeights>,
    pub specialized: Vec<SwigluWeights>,
}

/// Sum of all shared experts plus each token's selected specialized experts
/// weighted by their raw router probabilities. No token is dropped.
pub fn moe_forward(tape: &mut Tape, x: Var, w: &MoeWeights, routed: &Routed) -> Result<Var> {
    let out = &routed.outcome;
    let &[b, _] = tape.shape(x) else {
        return Err(Error::Input("moe input must be [B, d]".into()));
    };
    if b != out.batch {
        return Err(TensorError::Dimension {
            op: "moe_forward",
            detail: format!("{} routed tokens for a batch of {b}", out.batch),
        }
        .into());
    }
    if w.specialized.len() != out.n_experts {
        return Err(Error::Config(format!(
            "{} specialized experts but router covers {}",
            w.specialized.len(),
            out.n_experts
        )));
    }
    let mut acc: Option<Var> = None;
    let mut add = |tape: &mut Tape, v: Var| -> Result<()> {
        acc = Some(match acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
        Ok(())
    };
    for sw in &w.shared {
        let y = swiglu(tape, x, sw)?;
        add(tape, y)?;
    }
    for (e, sw) in w.specialized.iter().enumerate() {
        let tokens = out.tokens_for(e);
        if tokens.is_empty() {
            continue;
        }
        let xs = tape.gather_rows(x, &tokens)?;
        let y = swiglu(tape, xs, sw)?;
        let flat: Vec<usize> = tokens.iter().map(|&t| t * out.n_experts + e).collect();
        let p = tape.gather(routed.probs, &flat)?;
        let y = tape.scale_rows(y, p)?;
        let y = tape.scatter_rows(y, &tokens, b)?;
        add(tape, y)?;
    }
    acc.ok_or_else(|| Error::Config("moe layer has no experts".into()))
}

/// `N · Σᵢ (pᵢ/B)(cᵢ/(B·K))`, differentiable through `p` only.
pub fn aux_loss_on_tape(tape: &mut Tape, routed: &Routed) -> Result<Var> {
    let o = &routed.outcome;
    if o.batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let b = o.batch as f64;
    let p = tape.sum_rows(routed.probs)?;
    let c = tape.constant(Tensor::from_vec(o.c_agg.iter().map(|&c| c as f64).collect()));
    let pc = tape.mul(p, c)?;
    let s = tape.sum(pc)?;
    Ok(tape.scale(s, o.n_experts as f64 / (b * b * o.top_k as f64))?)
}

/// `(1/B) Σⱼ (logsumexp zʲ)²`.
pub fn z_loss_on_tape(tape: &mut Tape, routed: &Routed) -> Result<Var> {
    let lse = tape.logsumexp(routed.logits)?;
    let sq = tape.mul(lse, lse)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, 1.0 / routed.outcome.batch as f64)?)
}

pub fn aux_loss(o: &RoutingOutcome) -> Result<f64> {
    if o.batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let b = o.batch as f64;
    let k = o.top_k as f64;
    let s: f64 = o
        .p_agg
        .iter()
        .zip(&o.c_agg)
        .map(|(p, &c)| (p / b) * (c as f64 / (b * k)))
        .sum();
    Ok(o.n_experts as f64 * s)
}

pub fn z_loss(o: &RoutingOutcome) -> Result<f64> {
    if o.batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for row in o.z_logits.chunks(o.n_experts) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        if !lse.is_finite() {
            return Err(Error::Numeric("non-finite router logits".into()));
        }
        total += lse * lse;
    }
    Ok(total / o.batch as f64)
}

fn check_coeffs(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::Config(format!("loss coefficients must be non-negative, got {alpha}, {beta}")));
    }
    Ok(())
}

/// `lm + alpha·aux + beta·z`.
pub fn total_objective(lm: f64, aux: f64, z: f64, alpha: f64, beta: f64) -> Result<f64> {
    check_coeffs(alpha, beta)?;
    Ok(lm + alpha * aux + beta * z)
}

/// Per-layer regularizer terms gathered during one forward pass.
#[derive(Debug, Clone, Default)]
pub struct MoeTerms {
    pub aux: Vec<Var>,
    pub z: Vec<Var>,
    pub outcomes: Vec<RoutingOutcome>,
}

impl MoeTerms {
    pub fn is_empty(&self) -> bool {
        self.aux.is_empty()
    }

    fn mean(tape: &mut Tape, vs: &[Var]) -> Result<Option<Var>> {
        let Some((&first, rest)) = vs.split_first() else {
            return Ok(None);
        };
        let mut acc = first;
        for &v in rest {
            acc = tape.add(acc, v)?;
        }
        Ok(Some(tape.scale(acc, 1.0 / vs.len() as f64)?))
    }

    /// Layer means of the aux and z losses.
    pub fn means(&self, tape: &mut Tape) -> Result<(Option<Var>, Option<Var>)> {
        Ok((Self::mean(tape, &self.aux)?, Self::mean(tape, &self.z)?))
    }

    /// Activation counts summed over layers.
    pub fn total_counts(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for o in &self.outcomes {
            if out.is_empty() {
                out = vec![0; o.n_experts];
            }
            for (a, c) in out.iter_mut().zip(&o.c_agg) {
                *a += c;
            }
        }
        out
    }
}

/// `lm + alpha·mean(aux) + beta·mean(z)` on the tape.
pub fn total_objective_on_tape(tape: &mut Tape, lm: Var, terms: &MoeTerms, alpha: f64, beta: f64) -> Result<Var> {
    check_coeffs(alpha, beta)?;
    let (aux, z) = terms.means(tape)?;
    let mut total = lm;
    for (term, c) in [(aux, alpha), (z, beta)] {
        if let (Some(t), true) = (term, c > 0.0) {
            let s = tape.scale(t, c)?;
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(probs: Vec<f64>, n: usize, k: usize) -> RoutingOutcome {
        let logits = probs.iter().map(|p| p.ln()).collect();
        RoutingOutcome::from_values(logits, probs, n, k)
    }

    #[test]
    fn tie_break_lowest_index() {
        assert_eq!(top_k(&[0.3, 0.3, 0.2, 0.2], 2), vec![0, 1]);
        assert_eq!(top_k(&[0.1, 0.2, 0.2, 0.5], 2), vec![3, 1]);
        assert_eq!(top_k(&[1.0 / 48.0; 48], 4), vec![0, 1, 2, 3]);
    }

    #[test]
    fn route_dominant_pair() {
        let h = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![9.0, 9.0, 0.0, 0.0]]).unwrap();
        let o = route_tokens(&h, &w, 2).unwrap();
        assert_eq!(o.topk_idx, vec![vec![0, 1]]);
    }

    #[test]
    fn aux_worked_example() {
        let o = outcome(vec![0.75, 0.25, 0.6, 0.4], 2, 1);
        assert!((o.p_agg[0] - 1.35).abs() < 1e-12 && (o.p_agg[1] - 0.65).abs() < 1e-12);
        assert_eq!(o.c_agg, vec![2, 0]);
        assert!((aux_loss(&o).unwrap() - 1.35).abs() < 1e-12);
    }

    #[test]
    fn aux_uniform_and_collapse() {
        let n = 4;
        let k = 2;
        let o = RoutingOutcome {
            batch: 4,
            n_experts: n,
            top_k: k,
            probs: vec![0.25; 16],
            topk_idx: vec![],
            p_agg: vec![1.0; 4],
            c_agg: vec![2; 4],
            z_logits: vec![0.0; 16],
        };
        assert_eq!(aux_loss(&o).unwrap(), 1.0);
        let o = RoutingOutcome {
            p_agg: vec![4.0, 0.0, 0.0, 0.0],
            c_agg: vec![8, 0, 0, 0],
            ..o
        };
        assert_eq!(aux_loss(&o).unwrap(), 4.0);
    }

    #[test]
    fn z_loss_examples() {
        let zero4 = outcome(vec![0.25; 4], 4, 1);
        let zero4 = RoutingOutcome {
            z_logits: vec![0.0; 4],
            ..zero4
        };
        assert!((z_loss(&zero4).unwrap() - 4f64.ln().powi(2)).abs() < 1e-12);
        assert!((z_loss(&zero4).unwrap() - 1.9218).abs() < 1e-4);
        let o = RoutingOutcome {
            z_logits: vec![1.0, 1.0],
            ..outcome(vec![0.5, 0.5], 2, 1)
        };
        assert!((z_loss(&o).unwrap() - (1.0 + 2f64.ln()).powi(2)).abs() < 1e-12);
        assert!((z_loss(&o).unwrap() - 2.8667).abs() < 1e-4);
        let o = RoutingOutcome {
            z_logits: vec![0.0, 0.0],
            ..o
        };
        assert!((z_loss(&o).unwrap() - 0.4805).abs() < 1e-4);
    }

    #[test]
    fn objective_arithmetic() {
        assert_eq!(total_objective(2.0, 1.0, 0.5, 0.0, 0.0).unwrap(), 2.0);
        assert!((total_objective(2.0, 1.0, 0.5, 0.01, 0.001).unwrap() - 2.0105).abs() < 1e-15);
        assert!(matches!(total_objective(2.0, 1.0, 0.5, -0.1, 0.0), Err(Error::Config(_))));
    }
}
