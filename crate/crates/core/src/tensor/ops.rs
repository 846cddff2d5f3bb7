use super::{dim_err, Op, Result, Tape, Var};

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return dim_err(op, format!("shapes {a:?} and {b:?} differ"));
    }
    Ok(())
}

fn as_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => dim_err(op, format!("expected a matrix, got shape {shape:?}")),
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`, row-major.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn logsumexp_row(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.shape(a))?;
        let (k2, n) = as_matrix("matmul", self.shape(b))?;
        if k != k2 {
            return dim_err("matmul", format!("inner extents {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        self.push("matmul", Op::MatMul(a, b), vec![m, n], out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = as_matrix("transpose", self.shape(x))?;
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Op::Transpose(x), vec![c, r], out)
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", Op::Add(a, b), s, d)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", Op::Sub(a, b), s, d)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", Op::Mul(a, b), s, d)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let d = self.data(x).iter().map(|v| v * c).collect();
        let s = self.shape(x).to_vec();
        self.push("scale", Op::Scale(x, c), s, d)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let d = self.data(x).iter().map(|v| v + c).collect();
        let s = self.shape(x).to_vec();
        self.push("add_scalar", Op::AddScalar(x), s, d)
    }

    /// `x[..., d] * w[d]`, broadcasting over the leading axes.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(w) != [d] {
            return dim_err("mul_row", format!("weight {:?} vs last axis {d}", self.shape(w)));
        }
        let wv = self.data(w);
        let out = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(wv).map(|(a, b)| a * b))
            .collect();
        let s = self.shape(x).to_vec();
        self.push("mul_row", Op::MulRow(x, w), s, out)
    }

    /// `x[n, d] * s[n]` row by row.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, d) = as_matrix("scale_rows", self.shape(x))?;
        if self.shape(s) != [n] {
            return dim_err("scale_rows", format!("scales {:?} vs {n} rows", self.shape(s)));
        }
        let sv = self.data(s);
        let out = self
            .data(x)
            .chunks(d)
            .zip(sv)
            .flat_map(|(row, &c)| row.iter().map(move |a| a * c))
            .collect();
        self.push("scale_rows", Op::ScaleRows(x, s), vec![n, d], out)
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.data(x).iter().sum();
        self.push("sum", Op::Sum(x), vec![], vec![total])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Column sums of a matrix: `[n, d] -> [d]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (_, d) = as_matrix("sum_rows", self.shape(x))?;
        let mut out = vec![0.0; d];
        for row in self.data(x).chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        self.push("sum_rows", Op::SumRows(x), vec![d], out)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).is_empty() {
            return dim_err("softmax", "scalar input has no axis");
        }
        let d = self.value(x).last_dim();
        let mut out = vec![0.0; self.value(x).numel()];
        for (src, dst) in self.data(x).chunks(d).zip(out.chunks_mut(d)) {
            softmax_row(src, dst);
        }
        let s = self.shape(x).to_vec();
        self.push("softmax", Op::Softmax(x), s, out)
    }

    /// Log-sum-exp over the last axis; drops that axis.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return dim_err("logsumexp", "scalar input has no axis");
        }
        let d = self.value(x).last_dim();
        let out: Vec<f64> = self.data(x).chunks(d).map(logsumexp_row).collect();
        let mut s = shape[..shape.len() - 1].to_vec();
        if s.is_empty() {
            s = vec![];
        }
        self.push("logsumexp", Op::LogSumExp(x), s, out)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        let s = self.shape(x).to_vec();
        self.push("silu", Op::Silu(x), s, d)
    }

    /// `ln(1 + e^x)`, stable for large |x|.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let d = self
            .data(x)
            .iter()
            .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
            .collect();
        let s = self.shape(x).to_vec();
        self.push("softplus", Op::Softplus(x), s, d)
    }

    /// `x / sqrt(mean(x^2) + eps) * w` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(w) != [d] {
            return dim_err("rmsnorm", format!("weight {:?} vs last axis {d}", self.shape(w)));
        }
        let wv = self.data(w);
        let mut inv_rms = Vec::with_capacity(self.value(x).leading());
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(wv).map(|(a, b)| a * r * b));
        }
        let s = self.shape(x).to_vec();
        self.push("rmsnorm", Op::RmsNorm { x, w, inv_rms }, s, out)
    }

    /// Rotary embedding over `x[seq, n_heads*head_dim]`.
    ///
    /// Dimension `i` of each head is paired with `i + head_dim/2` and the
    /// pair is rotated by `pos * base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64, n_heads: usize, head_dim: usize) -> Result<Var> {
        let (seq, width) = as_matrix("rope", self.shape(x))?;
        if !head_dim.is_multiple_of(2) || width != n_heads * head_dim {
            return dim_err("rope", format!("width {width} vs {n_heads} heads of dim {head_dim}"));
        }
        if positions.len() != seq {
            return dim_err("rope", format!("{} positions for {seq} rows", positions.len()));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for &p in positions {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        let src = self.data(x);
        let mut out = vec![0.0; seq * width];
        for t in 0..seq {
            let cs = &cos[t * half..(t + 1) * half];
            let sn = &sin[t * half..(t + 1) * half];
            for h in 0..n_heads {
                let base_idx = t * width + h * head_dim;
                for i in 0..half {
                    let a = src[base_idx + i];
                    let b = src[base_idx + i + half];
                    out[base_idx + i] = a * cs[i] - b * sn[i];
                    out[base_idx + i + half] = a * sn[i] + b * cs[i];
                }
            }
        }
        let op = Op::Rope {
            x,
            cos,
            sin,
            n_heads,
            head_dim,
        };
        self.push("rope", op, vec![seq, width], out)
    }

    /// Masked scaled dot-product attention with grouped key/value heads.
    ///
    /// `segments[i]` is the sample id of token `i`; `None` marks padding.
    /// Query `i` sees key `j` iff `j <= i` and both share a sample id.
    /// Padding rows attend to nothing and produce zeros.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Option<u32>],
        n_heads: usize,
        n_kv_heads: usize,
        head_dim: usize,
    ) -> Result<Var> {
        let (seq, qw) = as_matrix("attention", self.shape(q))?;
        let (kseq, kw) = as_matrix("attention", self.shape(k))?;
        if self.shape(v) != [kseq, kw] || kseq != seq {
            return dim_err("attention", "query/key/value row counts differ");
        }
        if n_kv_heads == 0 || !n_heads.is_multiple_of(n_kv_heads) {
            return dim_err("attention", format!("{n_heads} heads not divisible into {n_kv_heads} groups"));
        }
        if qw != n_heads * head_dim || kw != n_kv_heads * head_dim {
            return dim_err("attention", "projection widths do not match head layout");
        }
        if segments.len() != seq {
            return dim_err("attention", format!("mask covers {} tokens, sequence has {seq}", segments.len()));
        }
        let group = n_heads / n_kv_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; n_heads * seq * seq];
        let mut out = vec![0.0; seq * qw];
        let mut scores = vec![0.0; seq];
        for h in 0..n_heads {
            let kvh = h / group;
            for i in 0..seq {
                let Some(si) = segments[i] else { continue };
                let qi = &qd[i * qw + h * head_dim..i * qw + (h + 1) * head_dim];
                let mut max = f64::NEG_INFINITY;
                let mut any = false;
                for j in 0..=i {
                    if segments[j] != Some(si) {
                        continue;
                    }
                    let kj = &kd[j * kw + kvh * head_dim..j * kw + (kvh + 1) * head_dim];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    scores[j] = s;
                    max = max.max(s);
                    any = true;
                }
                if !any {
                    continue;
                }
                let prow = &mut probs[(h * seq + i) * seq..(h * seq + i + 1) * seq];
                let mut sum = 0.0;
                for j in 0..=i {
                    if segments[j] == Some(si) {
                        let e = (scores[j] - max).exp();
                        prow[j] = e;
                        sum += e;
                    }
                }
                let orow = &mut out[i * qw + h * head_dim..i * qw + (h + 1) * head_dim];
                for j in 0..=i {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    prow[j] /= sum;
                    let p = prow[j];
                    let vj = &vd[j * kw + kvh * head_dim..j * kw + (kvh + 1) * head_dim];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            segments: segments.to_vec(),
            n_heads,
            n_kv_heads,
            head_dim,
            probs,
        };
        self.push("attention", op, vec![seq, qw], out)
    }

    /// Row lookup `table[ids[t]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = as_matrix("embedding", self.shape(table))?;
        if ids.is_empty() {
            return dim_err("embedding", "no ids");
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return dim_err("embedding", format!("id {bad} outside vocabulary of {vocab}"));
        }
        let tv = self.data(table);
        let out = ids.iter().flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied()).collect();
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push("embedding", op, vec![ids.len(), d], out)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = as_matrix("gather_rows", self.shape(x))?;
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return dim_err("gather_rows", "row index out of range or empty");
        }
        let xv = self.data(x);
        let out = idx.iter().flat_map(|&i| xv[i * d..(i + 1) * d].iter().copied()).collect();
        let op = Op::GatherRows { x, idx: idx.to_vec() };
        self.push("gather_rows", op, vec![idx.len(), d], out)
    }

    /// Places row `r` of `x` at output row `idx[r]` in a zero `[rows, d]`
    /// matrix, adding where indices repeat.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (n, d) = as_matrix("scatter_rows", self.shape(x))?;
        if idx.len() != n || idx.iter().any(|&i| i >= rows) {
            return dim_err("scatter_rows", "row index out of range or count mismatch");
        }
        let xv = self.data(x);
        let mut out = vec![0.0; rows * d];
        for (r, &i) in idx.iter().enumerate() {
            for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        let op = Op::ScatterRows { x, idx: idx.to_vec() };
        self.push("scatter_rows", op, vec![rows, d], out)
    }

    /// Picks flat elements of `x` into a vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return dim_err("gather", "element index out of range or empty");
        }
        let xv = self.data(x);
        let out = idx.iter().map(|&i| xv[i]).collect();
        let op = Op::Gather { x, idx: idx.to_vec() };
        self.push("gather", op, vec![idx.len()], out)
    }

    /// Weighted sum of token negative log-likelihoods, as a scalar.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (seq, vocab) = as_matrix("cross_entropy", self.shape(logits))?;
        if targets.len() != seq || weights.len() != seq {
            return dim_err("cross_entropy", "targets/weights not aligned to logits");
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= vocab) {
            return dim_err("cross_entropy", format!("target {bad} outside vocabulary of {vocab}"));
        }
        let lv = self.data(logits);
        let mut total = 0.0;
        for t in 0..seq {
            if weights[t] == 0.0 {
                continue;
            }
            let row = &lv[t * vocab..(t + 1) * vocab];
            total += weights[t] * (logsumexp_row(row) - row[targets[t]]);
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        };
        self.push("cross_entropy", op, vec![], vec![total])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() || shape.contains(&0) {
            return dim_err("reshape", format!("{:?} -> {shape:?}", self.shape(x)));
        }
        let d = self.data(x).to_vec();
        self.push("reshape", Op::Reshape(x), shape, d)
    }
}
