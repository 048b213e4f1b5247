//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every op records its output value on the tape; `backward` sweeps the tape in
//! reverse and accumulates gradients into the parameters that were registered with
//! [`Tape::param`]. Constants never receive gradients, which is how frozen inputs
//! (projected visual tokens, replayed latent embeddings) are kept out of updates.

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gelu, gelu_grad, layer_norm_row, softmax_in_place, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    CausalSoftmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    /// Rows taken from `table` where `ids[i]` is set; other rows are constants.
    Assemble {
        table: Var,
        ids: Vec<Option<usize>>,
    },
    SelectRows(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Matrix,
    },
    LogProbs {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Matrix,
    },
    Kl {
        logits: Var,
        rows: Vec<usize>,
        probs: Matrix,
        log_ratio: Matrix,
    },
    SqDistMean {
        pred: Var,
        target: Matrix,
    },
    Combine(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Token ids excluded from a restricted softmax; they receive probability zero.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenMask {
    excluded: Vec<usize>,
}

impl TokenMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn excluding(ids: impl IntoIterator<Item = usize>) -> Self {
        let mut excluded: Vec<usize> = ids.into_iter().collect();
        excluded.sort_unstable();
        excluded.dedup();
        Self { excluded }
    }

    pub fn is_excluded(&self, id: usize) -> bool {
        self.excluded.binary_search(&id).is_ok()
    }

    /// Softmax over non-excluded entries; excluded entries get exactly 0.
    pub fn softmax(&self, row: &[f64]) -> Vec<f64> {
        let mut out = row.to_vec();
        for &e in &self.excluded {
            if e < out.len() {
                out[e] = f64::NEG_INFINITY;
            }
        }
        softmax_in_place(&mut out);
        out
    }

    /// Log-probabilities over non-excluded entries; excluded entries are `-inf`.
    pub fn log_softmax(&self, row: &[f64]) -> Vec<f64> {
        let mut masked = row.to_vec();
        for &e in &self.excluded {
            if e < masked.len() {
                masked[e] = f64::NEG_INFINITY;
            }
        }
        let max = masked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + masked
                .iter()
                .map(|v| (v - max).exp())
                .sum::<f64>()
                .ln();
        masked.iter().map(|v| v - lse).collect()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const)
    }

    /// Registers a parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let op = if p.trainable { Op::Param(id) } else { Op::Const };
        self.push(p.value.clone(), op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(self.value(bias).rows(), 1, "bias must be a row vector");
        v.add_row_assign(self.value(bias).row(0));
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale_assign(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        let g = self.value(gamma).row(0);
        let b = self.value(beta).row(0);
        let ones = vec![1.0; cols];
        let zeros = vec![0.0; cols];
        let mut normed = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            inv_std.push(layer_norm_row(xm.row(r), &ones, &zeros, normed.row_mut(r)));
            for ((o, &n), (&gi, &bi)) in out
                .row_mut(r)
                .iter_mut()
                .zip(normed.row(r))
                .zip(g.iter().zip(b))
            {
                *o = n * gi + bi;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
        )
    }

    /// Row-wise softmax of a square score matrix where row `i` sees columns `0..=i`.
    pub fn causal_softmax(&mut self, scores: Var) -> Var {
        let s = self.value(scores);
        let n = s.rows();
        assert_eq!(n, s.cols(), "causal softmax needs square scores");
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            let row = &mut out.row_mut(i)[..=i];
            row.copy_from_slice(&s.row(i)[..=i]);
            softmax_in_place(row);
        }
        self.push(out, Op::CausalSoftmax(scores))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Builds a matrix whose row `i` is `table[ids[i]]` when `ids[i]` is set and
    /// `constants.row(i)` otherwise. Gradients flow only into the table rows.
    pub fn assemble(&mut self, table: Var, ids: Vec<Option<usize>>, constants: Matrix) -> Var {
        assert_eq!(ids.len(), constants.rows(), "assemble row count");
        let t = self.value(table);
        assert_eq!(t.cols(), constants.cols(), "assemble width");
        let mut out = constants;
        for (i, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                out.row_mut(i).copy_from_slice(t.row(id));
            }
        }
        self.push(out, Op::Assemble { table, ids })
    }

    pub fn select_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).select_rows(&idx);
        self.push(v, Op::SelectRows(a, idx))
    }

    /// Mean cross-entropy over the listed rows of `logits` (full softmax).
    pub fn cross_entropy(&mut self, logits: Var, rows: Vec<usize>, targets: Vec<usize>) -> Var {
        assert_eq!(rows.len(), targets.len());
        assert!(!rows.is_empty(), "cross entropy over zero rows");
        let l = self.value(logits);
        let mut probs = Matrix::zeros(rows.len(), l.cols());
        let mut total = 0.0;
        for (k, (&r, &t)) in rows.iter().zip(&targets).enumerate() {
            let p = probs.row_mut(k);
            p.copy_from_slice(l.row(r));
            softmax_in_place(p);
            let max = l.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + l.row(r).iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - l.get(r, t);
        }
        let value = Matrix::from_vec(1, 1, vec![total / rows.len() as f64]);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                probs,
            },
        )
    }

    /// `k × 1` column of `log p(target | row)` under the masked softmax.
    pub fn log_probs(
        &mut self,
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        mask: &TokenMask,
    ) -> Var {
        assert_eq!(rows.len(), targets.len());
        let l = self.value(logits);
        let mut probs = Matrix::zeros(rows.len(), l.cols());
        let mut out = Matrix::zeros(rows.len(), 1);
        for (k, (&r, &t)) in rows.iter().zip(&targets).enumerate() {
            let lp = mask.log_softmax(l.row(r));
            out.set(k, 0, lp[t]);
            for (p, v) in probs.row_mut(k).iter_mut().zip(&lp) {
                *p = v.exp();
            }
        }
        self.push(
            out,
            Op::LogProbs {
                logits,
                rows,
                targets,
                probs,
            },
        )
    }

    /// `k × 1` column of exact `KL(softmax(logits[row]) ‖ ref)` under the masked softmax.
    /// `ref_log_probs` holds one row of reference log-probabilities per listed row.
    pub fn kl_to_reference(
        &mut self,
        logits: Var,
        rows: Vec<usize>,
        ref_log_probs: &Matrix,
        mask: &TokenMask,
    ) -> Var {
        assert_eq!(rows.len(), ref_log_probs.rows());
        let l = self.value(logits);
        let v = l.cols();
        let mut probs = Matrix::zeros(rows.len(), v);
        let mut log_ratio = Matrix::zeros(rows.len(), v);
        let mut out = Matrix::zeros(rows.len(), 1);
        for (k, &r) in rows.iter().enumerate() {
            let lp = mask.log_softmax(l.row(r));
            let mut kl = 0.0;
            for j in 0..v {
                if mask.is_excluded(j) {
                    continue;
                }
                let p = lp[j].exp();
                let lr = lp[j] - ref_log_probs.get(k, j);
                probs.set(k, j, p);
                log_ratio.set(k, j, lr);
                if p > 0.0 {
                    kl += p * lr;
                }
            }
            out.set(k, 0, kl);
        }
        self.push(
            out,
            Op::Kl {
                logits,
                rows,
                probs,
                log_ratio,
            },
        )
    }

    /// Mean over rows of the squared Euclidean distance to a constant target.
    pub fn sq_dist_mean(&mut self, pred: Var, target: Matrix) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "reconstruction target shape");
        assert!(p.rows() > 0, "squared distance over zero rows");
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let value = Matrix::from_vec(1, 1, vec![total / p.rows() as f64]);
        self.push(value, Op::SqDistMean { pred, target })
    }

    /// `Σ cᵢ·xᵢ` over same-shaped inputs.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut out = Matrix::zeros(self.value(terms[0].0).rows(), self.value(terms[0].0).cols());
        for &(v, c) in terms {
            for (o, &x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += c * x;
            }
        }
        self.push(out, Op::Combine(terms.to_vec()))
    }

    pub fn backward(&self, loss: Var, num_params: usize) -> Gradients {
        let seed = Matrix::filled(self.value(loss).rows(), self.value(loss).cols(), 1.0);
        self.backward_seeded(&[(loss, seed)], num_params)
    }

    /// Reverse sweep starting from arbitrary upstream gradients on several nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Matrix)], num_params: usize) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape");
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        let mut out = Gradients::new(num_params);
        for idx in (0..=last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(*b));
                    let gb = self.value(*a).matmul_at(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_at(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut grads, *bias, g.sum_rows());
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.scale_assign(*s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gi, &xi) in ga.data_mut().iter_mut().zip(x.data()) {
                        *gi *= gelu_grad(xi);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normed,
                    inv_std,
                } => {
                    let gam = self.value(*gamma).row(0);
                    let (rows, cols) = normed.shape();
                    let mut g_gamma = vec![0.0; cols];
                    let mut g_beta = vec![0.0; cols];
                    let mut gx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let gr = g.row(r);
                        let nr = normed.row(r);
                        let mut sum_dn = 0.0;
                        let mut sum_dn_n = 0.0;
                        for c in 0..cols {
                            g_gamma[c] += gr[c] * nr[c];
                            g_beta[c] += gr[c];
                            let dn = gr[c] * gam[c];
                            sum_dn += dn;
                            sum_dn_n += dn * nr[c];
                        }
                        let gxr = gx.row_mut(r);
                        for c in 0..cols {
                            let dn = gr[c] * gam[c];
                            gxr[c] = inv_std[r] * (dn - sum_dn / n - nr[c] * sum_dn_n / n);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, Matrix::row_vector(g_gamma));
                    accumulate(&mut grads, *beta, Matrix::row_vector(g_beta));
                }
                Op::CausalSoftmax(s) => {
                    let p = &node.value;
                    let n = p.rows();
                    let mut gs = Matrix::zeros(n, n);
                    for i in 0..n {
                        let pr = &p.row(i)[..=i];
                        let gr = &g.row(i)[..=i];
                        let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, o) in gs.row_mut(i)[..=i].iter_mut().enumerate() {
                            *o = pr[j] * (gr[j] - inner);
                        }
                    }
                    accumulate(&mut grads, *s, gs);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        accumulate(&mut grads, p, g.slice_cols(offset, w));
                        offset += w;
                    }
                }
                Op::Assemble { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Matrix::zeros(t.rows(), t.cols());
                    for (i, id) in ids.iter().enumerate() {
                        if let Some(id) = *id {
                            for (o, &x) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                                *o += x;
                            }
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::SelectRows(a, idx) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, &x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropy {
                    logits,
                    rows,
                    targets,
                    probs,
                } => {
                    let src = self.value(*logits);
                    let scale = g.data()[0] / rows.len() as f64;
                    let mut gl = Matrix::zeros(src.rows(), src.cols());
                    for (k, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                        let out = gl.row_mut(r);
                        for (o, &p) in out.iter_mut().zip(probs.row(k)) {
                            *o += scale * p;
                        }
                        out[t] -= scale;
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::LogProbs {
                    logits,
                    rows,
                    targets,
                    probs,
                } => {
                    let src = self.value(*logits);
                    let mut gl = Matrix::zeros(src.rows(), src.cols());
                    for (k, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                        let up = g.get(k, 0);
                        if up == 0.0 {
                            continue;
                        }
                        let out = gl.row_mut(r);
                        for (o, &p) in out.iter_mut().zip(probs.row(k)) {
                            *o -= up * p;
                        }
                        out[t] += up;
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::Kl {
                    logits,
                    rows,
                    probs,
                    log_ratio,
                } => {
                    let src = self.value(*logits);
                    let mut gl = Matrix::zeros(src.rows(), src.cols());
                    for (k, &r) in rows.iter().enumerate() {
                        let up = g.get(k, 0);
                        if up == 0.0 {
                            continue;
                        }
                        let kl = node.value.get(k, 0);
                        let out = gl.row_mut(r);
                        for (j, o) in out.iter_mut().enumerate() {
                            let p = probs.get(k, j);
                            if p > 0.0 {
                                *o += up * p * (log_ratio.get(k, j) - kl);
                            }
                        }
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::SqDistMean { pred, target } => {
                    let p = self.value(*pred);
                    let scale = 2.0 * g.data()[0] / p.rows() as f64;
                    let data = p
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, b)| scale * (a - b))
                        .collect();
                    accumulate(&mut grads, *pred, Matrix::from_vec(p.rows(), p.cols(), data));
                }
                Op::Combine(terms) => {
                    for &(v, c) in terms {
                        let mut gv = g.clone();
                        gv.scale_assign(c);
                        accumulate(&mut grads, v, gv);
                    }
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Central-difference check of every coordinate of a single parameter.
    fn check(build: impl Fn(&mut Tape, &ParamStore, ParamId) -> Var, init: Matrix) {
        let mut store = ParamStore::new();
        let id = store.add("x", init, true);
        let mut tape = Tape::new();
        let loss = build(&mut tape, &store, id);
        let grads = tape.backward(loss, store.len());
        let analytic = grads.get(id).unwrap().clone();
        let h = 1e-6;
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let mut t = Tape::new();
            let lp = build(&mut t, &store, id);
            let plus = t.scalar(lp);
            store.value_mut(id).data_mut()[i] = orig - h;
            let mut t = Tape::new();
            let lm = build(&mut t, &store, id);
            let minus = t.scalar(lm);
            store.value_mut(id).data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 * fd.abs().max(a.abs()).max(1.0),
                "coord {i}: analytic {a} vs numeric {fd}"
            );
        }
    }

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn attention_block_gradients() {
        let mut r = rng();
        let w = Matrix::randn(4, 4, 0.5, &mut r);
        let x0 = Matrix::randn(5, 4, 1.0, &mut r);
        let gamma = Matrix::row_vector(vec![1.1, 0.9, 1.2, 0.8]);
        let beta = Matrix::row_vector(vec![0.1, -0.1, 0.0, 0.2]);
        check(
            |t, s, id| {
                let x = t.constant(x0.clone());
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let n = t.layer_norm(x, g, b);
                let wv = t.param(s, id);
                let q = t.matmul(n, wv);
                let qh = t.slice_cols(q, 0, 2);
                let kh = t.slice_cols(q, 2, 2);
                let sc = t.matmul_bt(qh, kh);
                let sc = t.scale(sc, 0.7);
                let p = t.causal_softmax(sc);
                let o = t.matmul(p, kh);
                let o = t.concat_cols(&[o, qh]);
                let o = t.gelu(o);
                t.cross_entropy(o, vec![0, 2, 4], vec![1, 3, 0])
            },
            w,
        );
    }

    #[test]
    fn layer_norm_parameter_gradients() {
        let mut r = rng();
        let x0 = Matrix::randn(3, 5, 1.0, &mut r);
        let target = Matrix::randn(3, 5, 1.0, &mut r);
        check(
            |t, s, id| {
                let x = t.constant(x0.clone());
                let g = t.param(s, id);
                let b = t.constant(Matrix::zeros(1, 5));
                let n = t.layer_norm(x, g, b);
                t.sq_dist_mean(n, target.clone())
            },
            Matrix::row_vector(vec![1.0, 0.5, -0.3, 2.0, 0.1]),
        );
        check(
            |t, s, id| {
                let x = t.param(s, id);
                let g = t.constant(Matrix::row_vector(vec![1.0, 0.5, -0.3, 2.0, 0.1]));
                let b = t.constant(Matrix::zeros(1, 5));
                let n = t.layer_norm(x, g, b);
                t.sq_dist_mean(n, target.clone())
            },
            x0.clone(),
        );
    }

    #[test]
    fn policy_op_gradients() {
        let mut r = rng();
        let logits0 = Matrix::randn(4, 6, 1.0, &mut r);
        let mask = TokenMask::excluding([2]);
        let ref_lp = Matrix::from_rows(&[
            mask.log_softmax(&[0.1, 0.2, 0.0, -0.3, 0.5, 0.0]),
            mask.log_softmax(&[1.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
        ]);
        check(
            |t, s, id| {
                let l = t.param(s, id);
                let lp = t.log_probs(l, vec![0, 1, 3], vec![1, 4, 0], &mask);
                let kl = t.kl_to_reference(l, vec![1, 3], &ref_lp, &mask);
                let lp_sum = t.constant(Matrix::filled(1, 3, 1.0));
                let a = t.matmul(lp_sum, lp);
                let kl_sum = t.constant(Matrix::filled(1, 2, 1.0));
                let b = t.matmul(kl_sum, kl);
                t.combine(&[(a, 0.7), (b, -1.3)])
            },
            logits0,
        );
    }

    #[test]
    fn assemble_and_select_route_gradients_to_table_only() {
        let mut r = rng();
        let consts = Matrix::randn(4, 3, 1.0, &mut r);
        let target = Matrix::randn(2, 3, 1.0, &mut r);
        check(
            |t, s, id| {
                let table = t.param(s, id);
                let a = t.assemble(table, vec![Some(1), None, Some(1), Some(0)], consts.clone());
                let sel = t.select_rows(a, vec![0, 2]);
                let bias = t.constant(Matrix::row_vector(vec![0.1, 0.2, 0.3]));
                let sel = t.add_row(sel, bias);
                t.sq_dist_mean(sel, target.clone())
            },
            Matrix::randn(3, 3, 1.0, &mut r),
        );
    }

    #[test]
    fn frozen_parameters_enter_as_constants() {
        let mut store = ParamStore::new();
        let frozen = store.add("f", Matrix::row_vector(vec![1.0, 2.0]), false);
        let mut tape = Tape::new();
        let f = tape.param(&store, frozen);
        let loss = tape.sq_dist_mean(f, Matrix::zeros(1, 2));
        let grads = tape.backward(loss, store.len());
        assert!(grads.get(frozen).is_none());
    }

    #[test]
    fn masked_softmax_zeroes_excluded() {
        let mask = TokenMask::excluding([1]);
        let p = mask.softmax(&[0.0, 10.0, 0.0]);
        assert_eq!(p[1], 0.0);
        assert!((p[0] - 0.5).abs() < 1e-12);
    }
}
