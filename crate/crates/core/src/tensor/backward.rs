use super::ops::{sigmoid, softmax_row};
use super::{Node, Op, Result, Tape, TensorError, Var};

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.value.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

impl Tape {
    /// Reverse pass from a scalar `loss`, accumulating into the gradient of
    /// every reachable node that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        let nodes = &self.nodes;
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            propagate(nodes, &mut grads, node, &g);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                if node.value.requires_grad {
                    node.value.accumulate_grad(&g, 1.0);
                }
            }
        }
        Ok(())
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |v: Var| nodes[v.0].value.data();
    let shape = |v: Var| nodes[v.0].value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (shape(*a)[0], shape(*a)[1]);
            let n = shape(*b)[1];
            if let Some(ga) = slot(grads, nodes, *a) {
                // dA = dC · Bᵀ
                let bv = val(*b);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                // dB = Aᵀ · dC
                let av = val(*a);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (o, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += aip * x;
                        }
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (shape(*x)[0], shape(*x)[1]);
            if let Some(gx) = slot(grads, nodes, *x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                if let Some(gv) = slot(grads, nodes, v) {
                    gv.iter_mut().zip(g).for_each(|(o, x)| *o += sign * x);
                }
            }
        }
        Op::Sub(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                if let Some(gv) = slot(grads, nodes, v) {
                    gv.iter_mut().zip(g).for_each(|(o, x)| *o += sign * x);
                }
            }
        }
        Op::Mul(a, b) => {
            let bv = val(*b);
            let av = val(*a);
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                    *o += x * y;
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                    *o += x * y;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(o, v)| *o += c * v);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
            }
        }
        Op::MulRow(x, w) => {
            let d = shape(*w)[0];
            let wv = val(*w);
            let xv = val(*x);
            if let Some(gx) = slot(grads, nodes, *x) {
                for (grow, orow) in g.chunks(d).zip(gx.chunks_mut(d)) {
                    for ((o, a), b) in orow.iter_mut().zip(grow).zip(wv) {
                        *o += a * b;
                    }
                }
            }
            if let Some(gw) = slot(grads, nodes, *w) {
                for (grow, xrow) in g.chunks(d).zip(xv.chunks(d)) {
                    for ((o, a), b) in gw.iter_mut().zip(grow).zip(xrow) {
                        *o += a * b;
                    }
                }
            }
        }
        Op::ScaleRows(x, s) => {
            let d = shape(*x)[1];
            let sv = val(*s);
            let xv = val(*x);
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((grow, orow), c) in g.chunks(d).zip(gx.chunks_mut(d)).zip(sv) {
                    for (o, a) in orow.iter_mut().zip(grow) {
                        *o += a * c;
                    }
                }
            }
            if let Some(gs) = slot(grads, nodes, *s) {
                for ((grow, xrow), o) in g.chunks(d).zip(xv.chunks(d)).zip(gs.iter_mut()) {
                    *o += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::SumRows(x) => {
            let d = shape(*x)[1];
            if let Some(gx) = slot(grads, nodes, *x) {
                for orow in gx.chunks_mut(d) {
                    orow.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let d = node.value.last_dim();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((yrow, grow), orow) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((o, yi), gi) in orow.iter_mut().zip(yrow).zip(grow) {
                        *o += yi * (gi - dot);
                    }
                }
            }
        }
        Op::LogSumExp(x) => {
            let d = nodes[x.0].value.last_dim();
            let xv = val(*x);
            if let Some(gx) = slot(grads, nodes, *x) {
                let mut p = vec![0.0; d];
                for ((xrow, orow), gv) in xv.chunks(d).zip(gx.chunks_mut(d)).zip(g) {
                    softmax_row(xrow, &mut p);
                    for (o, pi) in orow.iter_mut().zip(&p) {
                        *o += gv * pi;
                    }
                }
            }
        }
        Op::Silu(x) => {
            let xv = val(*x);
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((o, a), gv) in gx.iter_mut().zip(xv).zip(g) {
                    let s = sigmoid(*a);
                    *o += gv * (s + a * s * (1.0 - s));
                }
            }
        }
        Op::Softplus(x) => {
            let xv = val(*x);
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((o, a), gv) in gx.iter_mut().zip(xv).zip(g) {
                    *o += gv * sigmoid(*a);
                }
            }
        }
        Op::RmsNorm { x, w, inv_rms } => {
            let d = shape(*w)[0];
            let wv = val(*w);
            let xv = val(*x);
            if let Some(gx) = slot(grads, nodes, *x) {
                for (((xrow, grow), orow), r) in xv.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).zip(inv_rms) {
                    // y = x r w, r = (mean(x²)+eps)^(-1/2)
                    let gw: Vec<f64> = grow.iter().zip(wv).map(|(a, b)| a * b).collect();
                    let dot: f64 = gw.iter().zip(xrow).map(|(a, b)| a * b).sum();
                    let coeff = r * r * r * dot / d as f64;
                    for ((o, gwi), xi) in orow.iter_mut().zip(&gw).zip(xrow) {
                        *o += r * gwi - coeff * xi;
                    }
                }
            }
            if let Some(gwt) = slot(grads, nodes, *w) {
                for ((xrow, grow), r) in xv.chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                    for ((o, a), xi) in gwt.iter_mut().zip(grow).zip(xrow) {
                        *o += a * xi * r;
                    }
                }
            }
        }
        Op::Rope {
            x,
            cos,
            sin,
            n_heads,
            head_dim,
        } => {
            let width = n_heads * head_dim;
            let half = head_dim / 2;
            let seq = shape(*x)[0];
            if let Some(gx) = slot(grads, nodes, *x) {
                for t in 0..seq {
                    let cs = &cos[t * half..(t + 1) * half];
                    let sn = &sin[t * half..(t + 1) * half];
                    for h in 0..*n_heads {
                        let b0 = t * width + h * head_dim;
                        for i in 0..half {
                            let ga = g[b0 + i];
                            let gb = g[b0 + i + half];
                            gx[b0 + i] += ga * cs[i] + gb * sn[i];
                            gx[b0 + i + half] += -ga * sn[i] + gb * cs[i];
                        }
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            segments,
            n_heads,
            n_kv_heads,
            head_dim,
            probs,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), segments, *n_heads, *n_kv_heads, *head_dim, probs),
        Op::Embedding { table, ids } => {
            let d = shape(*table)[1];
            if let Some(gt) = slot(grads, nodes, *table) {
                for (t, &id) in ids.iter().enumerate() {
                    for (o, v) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[t * d..(t + 1) * d]) {
                        *o += v;
                    }
                }
            }
        }
        Op::GatherRows { x, idx } => {
            let d = shape(*x)[1];
            if let Some(gx) = slot(grads, nodes, *x) {
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in gx[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
            }
        }
        Op::ScatterRows { x, idx } => {
            let d = shape(*x)[1];
            if let Some(gx) = slot(grads, nodes, *x) {
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in gx[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *o += v;
                    }
                }
            }
        }
        Op::Gather { x, idx } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for (r, &i) in idx.iter().enumerate() {
                    gx[i] += g[r];
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
        } => {
            let vocab = shape(*logits)[1];
            let lv = val(*logits);
            if let Some(gl) = slot(grads, nodes, *logits) {
                let mut p = vec![0.0; vocab];
                for (t, (&target, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    softmax_row(&lv[t * vocab..(t + 1) * vocab], &mut p);
                    let orow = &mut gl[t * vocab..(t + 1) * vocab];
                    let c = g[0] * w;
                    for (o, pi) in orow.iter_mut().zip(&p) {
                        *o += c * pi;
                    }
                    orow[target] -= c;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (Var, Var, Var),
    segments: &[Option<u32>],
    n_heads: usize,
    n_kv_heads: usize,
    head_dim: usize,
    probs: &[f64],
) {
    let seq = segments.len();
    let qw = n_heads * head_dim;
    let kw = n_kv_heads * head_dim;
    let group = n_heads / n_kv_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let qd = nodes[q.0].value.data();
    let kd = nodes[k.0].value.data();
    let vd = nodes[v.0].value.data();
    let mut gq = vec![0.0; seq * qw];
    let mut gk = vec![0.0; seq * kw];
    let mut gv = vec![0.0; seq * kw];
    let mut dp = vec![0.0; seq];
    for h in 0..n_heads {
        let kvh = h / group;
        for i in 0..seq {
            if segments[i].is_none() {
                continue;
            }
            let prow = &probs[(h * seq + i) * seq..(h * seq + i + 1) * seq];
            let go = &g[i * qw + h * head_dim..i * qw + (h + 1) * head_dim];
            let mut dot = 0.0;
            for j in 0..=i {
                let p = prow[j];
                if p == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                let vj = &vd[j * kw + kvh * head_dim..j * kw + (kvh + 1) * head_dim];
                let d: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                dp[j] = d;
                dot += p * d;
                for (o, x) in gv[j * kw + kvh * head_dim..j * kw + (kvh + 1) * head_dim].iter_mut().zip(go) {
                    *o += p * x;
                }
            }
            let qi = &qd[i * qw + h * head_dim..i * qw + (h + 1) * head_dim];
            for j in 0..=i {
                let p = prow[j];
                if p == 0.0 {
                    continue;
                }
                let ds = p * (dp[j] - dot) * scale;
                let kj = &kd[j * kw + kvh * head_dim..j * kw + (kvh + 1) * head_dim];
                for (o, x) in gq[i * qw + h * head_dim..i * qw + (h + 1) * head_dim].iter_mut().zip(kj) {
                    *o += ds * x;
                }
                for (o, x) in gk[j * kw + kvh * head_dim..j * kw + (kvh + 1) * head_dim].iter_mut().zip(qi) {
                    *o += ds * x;
                }
            }
        }
    }
    for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
        if let Some(s) = slot(grads, nodes, var) {
            s.iter_mut().zip(&buf).for_each(|(o, x)| *o += x);
        }
    }
}
