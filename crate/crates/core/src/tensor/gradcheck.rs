use super::{Tape, Tensor, TensorError, Var};

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the tape gradient of `f` against central differences.
///
/// Relative error per element is `|a - n| / max(|a|, |n|, 1e-3)`; the floor
/// keeps near-zero gradients from amplifying rounding noise.
pub fn check_gradients<F, E>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, E> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (e, &a) in grads.iter().enumerate() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
