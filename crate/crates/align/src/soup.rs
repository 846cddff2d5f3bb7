use std::path::Path;

use deskmoe_core::model::{load_checkpoint, save_checkpoint, ParamStore};
use deskmoe_core::Tensor;

use crate::{AlignError, Result};

/// Elementwise mean of parameter stores with identical names and shapes.
///
/// Each element is `v0 + sum(v - v0) / n` over its values in sorted order,
/// so the result does not depend on input order and equal inputs average
/// to themselves exactly.
pub fn soup_average(stores: &[ParamStore]) -> Result<ParamStore> {
    let Some(first) = stores.first() else {
        return Err(AlignError::Checkpoint("nothing to average".into()));
    };
    for (k, s) in stores.iter().enumerate().skip(1) {
        if s.len() != first.len() || s.names().zip(first.names()).any(|(a, b)| a != b) {
            return Err(AlignError::Checkpoint(format!("checkpoint {k} has different parameter names")));
        }
    }
    let n = stores.len() as f64;
    let mut out = ParamStore::new();
    for (name, t0) in first.iter() {
        let ts: Vec<&Tensor> = stores.iter().map(|s| s.get(name).expect("names checked")).collect();
        if let Some(bad) = ts.iter().find(|t| t.shape() != t0.shape()) {
            return Err(AlignError::Checkpoint(format!(
                "{name}: shape {:?} vs {:?}",
                bad.shape(),
                t0.shape()
            )));
        }
        let mut vals = vec![0.0; ts.len()];
        let data = (0..t0.numel())
            .map(|e| {
                for (v, t) in vals.iter_mut().zip(&ts) {
                    *v = t.data()[e];
                }
                vals.sort_by(f64::total_cmp);
                vals[0] + vals.iter().map(|v| v - vals[0]).sum::<f64>() / n
            })
            .collect();
        let trainable = ts.iter().any(|t| t.requires_grad());
        out.insert(name, Tensor::new(t0.shape().to_vec(), data)?.with_requires_grad(trainable));
    }
    Ok(out)
}

/// Averages checkpoint directories that share a model config into `out`.
pub fn soup_checkpoints(dirs: &[&Path], out: &Path) -> Result<()> {
    let mut cfg = None;
    let mut stores = Vec::with_capacity(dirs.len());
    for d in dirs {
        let (c, s) = load_checkpoint(d)?;
        match &cfg {
            Some(prev) if *prev != c => {
                return Err(AlignError::Checkpoint(format!("{} has a different model config", d.display())))
            }
            _ => cfg = Some(c),
        }
        stores.push(s);
    }
    let avg = soup_average(&stores)?;
    let cfg = cfg.ok_or_else(|| AlignError::Checkpoint("nothing to average".into()))?;
    save_checkpoint(out, &cfg, &avg)?;
    Ok(())
}
