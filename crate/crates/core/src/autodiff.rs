//! A minimal reverse-mode automatic differentiation tape over [`Matrix`].
//!
//! Each operation appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients for every node that
//! (transitively) depends on a trainable leaf. Some operations are fused
//! (layer norm, attention, the losses) so that their backward passes stay
//! numerically tidy and the tape stays short.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GatherElems(Var, Vec<(usize, usize)>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    L2NormalizeRows(Var, Vec<f64>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    WeightedSum(Var, Matrix),
    SoftmaxCe {
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
        probs: Matrix,
    },
    BceLogits {
        logits: Var,
        targets: Matrix,
        weights: Vec<f64>,
    },
    InfoNce {
        sim: Var,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Layout of a batch of padded sequences stacked as `batch * seq_len` rows.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub seq_len: usize,
    /// Valid length of each sequence; keys at or beyond it are masked.
    pub lengths: Vec<usize>,
    pub causal: bool,
}

impl AttentionSpec {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        j < self.lengths[b] && (!self.causal || j <= i)
    }
}

/// Parameters of a [`ParamStore`] placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    trainable: bool,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.index()]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Place every entry of `store` on the tape, as trainable leaves or constants.
    pub fn bind(&mut self, store: &ParamStore, trainable: bool) -> Bound {
        let vars = store
            .values()
            .map(|m| self.push(m.clone(), Op::Leaf, trainable))
            .collect();
        Bound { vars, trainable }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let v = Matrix::from_vec(va.rows(), va.cols(), data);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Matrix::from_vec(va.rows(), va.cols(), data);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.shape(), (1, va.cols()), "add_row shape");
        let mut v = va.clone();
        let r = vr.row(0).to_vec();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(&[a]);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let ng = self.ng(&[a]);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = self.value(*p);
                assert_eq!(pv.rows(), rows, "concat_cols row count");
                v.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        let ng = self.ng(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), cols, "stack_rows column count");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let ng = self.ng(parts);
        self.push(Matrix::from_vec(rows, cols, data), Op::StackRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let va = self.value(a);
        let mut v = Matrix::zeros(idx.len(), va.cols());
        for (o, &i) in idx.iter().enumerate() {
            v.row_mut(o).copy_from_slice(va.row(i));
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::GatherRows(a, idx), ng)
    }

    /// Picks individual entries into an `n x 1` column.
    pub fn gather_elems(&mut self, a: Var, idx: Vec<(usize, usize)>) -> Var {
        let va = self.value(a);
        let data = idx.iter().map(|&(r, c)| va.get(r, c)).collect();
        let v = Matrix::from_vec(idx.len(), 1, data);
        let ng = self.ng(&[a]);
        self.push(v, Op::GatherElems(a, idx), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let g = self.value(gain).row(0).to_vec();
        let b = self.value(bias).row(0).to_vec();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Divides each row by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut v = va.clone();
        let mut norms = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let n = dot(va.row(r), va.row(r)).sqrt().max(1e-12);
            norms.push(n);
            for x in v.row_mut(r) {
                *x /= n;
            }
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::L2NormalizeRows(a, norms), ng)
    }

    /// Multi-head scaled dot-product attention over `q`, `k`, `v` laid out as
    /// `batch * seq_len` rows. Heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = vq.shape();
        let t = spec.seq_len;
        let h = spec.heads;
        assert_eq!(rows, spec.lengths.len() * t, "attention row layout");
        assert_eq!(width % h, 0, "attention width divisible by heads");
        let dh = width / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = spec.lengths.len();
        let mut probs = vec![0.0; batch * h * t * t];
        let mut out = Matrix::zeros(rows, width);
        let mut scores = vec![0.0; t];
        for b in 0..batch {
            for hd in 0..h {
                let cs = hd * dh;
                for i in 0..t {
                    let qi = &vq.row(b * t + i)[cs..cs + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..t {
                        if spec.allowed(b, i, j) {
                            let s = dot(qi, &vk.row(b * t + j)[cs..cs + dh]) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    let base = ((b * h + hd) * t + i) * t;
                    let mut z = 0.0;
                    for j in 0..t {
                        if spec.allowed(b, i, j) {
                            let e = (scores[j] - max).exp();
                            probs[base + j] = e;
                            z += e;
                        }
                    }
                    let orow = out.row_mut(b * t + i);
                    for j in 0..t {
                        if spec.allowed(b, i, j) {
                            let p = probs[base + j] / z;
                            probs[base + j] = p;
                            let vj = &vv.row(b * t + j)[cs..cs + dh];
                            for (o, x) in orow[cs..cs + dh].iter_mut().zip(vj) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            ng,
        )
    }

    /// Attention probabilities cached by an [`Tape::attention`] node, indexed
    /// `[((batch * heads + head) * seq_len + query) * seq_len + key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `Σ_ij w_ij a_ij` as a 1x1 node.
    pub fn weighted_sum(&mut self, a: Var, weights: Matrix) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), weights.shape(), "weighted_sum shape");
        let s = dot(va.data(), weights.data());
        let ng = self.ng(&[a]);
        self.push(Matrix::filled(1, 1, s), Op::WeightedSum(a, weights), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).shape();
        self.weighted_sum(a, Matrix::filled(r, c, 1.0))
    }

    /// `Σ_r w_r · (logsumexp(z_r) − z_r[target_r])` over rows that have a target.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
    ) -> Var {
        let z = self.value(logits);
        assert_eq!(z.rows(), targets.len(), "softmax_ce targets");
        assert_eq!(z.rows(), weights.len(), "softmax_ce weights");
        let mut probs = Matrix::zeros(z.rows(), z.cols());
        let mut loss = 0.0;
        for r in 0..z.rows() {
            let Some(t) = targets[r] else { continue };
            let row = z.row(r);
            let lse = log_sum_exp(row.iter().copied());
            loss += weights[r] * (lse - row[t]);
            for (p, &x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let ng = self.ng(&[logits]);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::SoftmaxCe {
                logits,
                targets,
                weights,
                probs,
            },
            ng,
        )
    }

    /// `Σ_r w_r Σ_c [softplus(z_rc) − y_rc z_rc]`, the multi-label binary cross-entropy.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Matrix, weights: Vec<f64>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape(), "bce shape");
        let mut loss = 0.0;
        for r in 0..z.rows() {
            if weights[r] == 0.0 {
                continue;
            }
            let s: f64 = z
                .row(r)
                .iter()
                .zip(targets.row(r))
                .map(|(&x, &y)| softplus(x) - y * x)
                .sum();
            loss += weights[r] * s;
        }
        let ng = self.ng(&[logits]);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::BceLogits {
                logits,
                targets,
                weights,
            },
            ng,
        )
    }

    /// Contrastive objective over a square similarity matrix whose diagonal
    /// holds the positive pairs: `Σ_k [logsumexp_{i≠k} S_ki − S_kk]`, or with the
    /// positive included in the denominator when `include_positive` is set.
    pub fn info_nce(&mut self, sim: Var, include_positive: bool) -> Var {
        let s = self.value(sim);
        let n = s.rows();
        assert_eq!(n, s.cols(), "info_nce needs a square matrix");
        let mut probs = Matrix::zeros(n, n);
        let mut loss = 0.0;
        for k in 0..n {
            let row = s.row(k);
            let keep = |i: usize| include_positive || i != k;
            let lse = log_sum_exp((0..n).filter(|&i| keep(i)).map(|i| row[i]));
            loss += lse - row[k];
            for i in (0..n).filter(|&i| keep(i)) {
                probs.set(k, i, (row[i] - lse).exp());
            }
        }
        let ng = self.ng(&[sim]);
        self.push(Matrix::filled(1, 1, loss), Op::InfoNce { sim, probs }, ng)
    }

    /// Reverse pass from a scalar output. Gradients are readable through
    /// [`Tape::grad`] until the next call.
    pub fn backward(&mut self, output: Var) {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of a bound store, in store order.
    pub fn grads_for(&self, bound: &Bound) -> Vec<Option<Matrix>> {
        bound.vars.iter().map(|v| self.grad(*v).cloned()).collect()
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g.matmul_bt(self.value(*b)));
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], self.value(*a).matmul_at(g));
                }
            }
            Op::MatMulBt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if needs(a) {
                    accumulate(&mut grads[a.0], g.matmul(self.value(*b)));
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], g.matmul_at(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if needs(a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], Matrix::from_vec(g.rows(), g.cols(), d));
                }
                if needs(b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], Matrix::from_vec(g.rows(), g.cols(), d));
                }
            }
            Op::AddRow(a, row) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if needs(row) {
                    let mut s = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, x) in s.row_mut(0).iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads[row.0], s);
                }
            }
            Op::Scale(a, s) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g.scale(*s));
                }
            }
            Op::AddScalar(a) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = g.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(&mut grads[a.0], Matrix::from_vec(g.rows(), g.cols(), d));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g.data().iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(&mut grads[a.0], Matrix::from_vec(g.rows(), g.cols(), d));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(g, &x)| g * gelu_grad(x)).collect();
                accumulate(&mut grads[a.0], Matrix::from_vec(g.rows(), g.cols(), d));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if needs(p) {
                        let mut d = Matrix::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        accumulate(&mut grads[p.0], d);
                    }
                    off += pc;
                }
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let pr = self.value(*p).rows();
                    if needs(p) {
                        let start = off * g.cols();
                        let d = g.data()[start..start + pr * g.cols()].to_vec();
                        accumulate(&mut grads[p.0], Matrix::from_vec(pr, g.cols(), d));
                    }
                    off += pr;
                }
            }
            Op::GatherRows(a, idx) => {
                let va = self.value(*a);
                let mut d = Matrix::zeros(va.rows(), va.cols());
                for (o, &i) in idx.iter().enumerate() {
                    for (acc, x) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                        *acc += x;
                    }
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::GatherElems(a, idx) => {
                let va = self.value(*a);
                let mut d = Matrix::zeros(va.rows(), va.cols());
                for (o, &(r, c)) in idx.iter().enumerate() {
                    let cur = d.get(r, c);
                    d.set(r, c, cur + g.get(o, 0));
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gain).row(0);
                if needs(gain) {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    accumulate(&mut grads[gain.0], dg);
                }
                if needs(bias) {
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            db.data_mut()[c] += g.get(r, c);
                        }
                    }
                    accumulate(&mut grads[bias.0], db);
                }
                if needs(x) {
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let dxhat: Vec<f64> = (0..cols).map(|c| g.get(r, c) * gv[c]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dot(&dxhat, xhat.row(r)) / n;
                        for c in 0..cols {
                            dx.set(r, c, rstd[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx));
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::L2NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yg = dot(y.row(r), g.row(r));
                    for c in 0..y.cols() {
                        d.set(r, c, (g.get(r, c) - y.get(r, c) * yg) / norms[r]);
                    }
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, width) = vq.shape();
                let t = spec.seq_len;
                let h = spec.heads;
                let dh = width / h;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(rows, width);
                let mut dk = Matrix::zeros(rows, width);
                let mut dv = Matrix::zeros(rows, width);
                let mut dp = vec![0.0; t];
                for b in 0..spec.lengths.len() {
                    for hd in 0..h {
                        let cs = hd * dh;
                        for i in 0..t {
                            let base = ((b * h + hd) * t + i) * t;
                            let gi = &g.row(b * t + i)[cs..cs + dh];
                            let mut weighted = 0.0;
                            for j in 0..t {
                                if spec.allowed(b, i, j) {
                                    let p = probs[base + j];
                                    dp[j] = dot(gi, &vv.row(b * t + j)[cs..cs + dh]);
                                    weighted += p * dp[j];
                                    let dvj = &mut dv.row_mut(b * t + j)[cs..cs + dh];
                                    for (acc, x) in dvj.iter_mut().zip(gi) {
                                        *acc += p * x;
                                    }
                                }
                            }
                            for j in 0..t {
                                if !spec.allowed(b, i, j) {
                                    continue;
                                }
                                let ds = probs[base + j] * (dp[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &vk.row(b * t + j)[cs..cs + dh];
                                for (acc, x) in dq.row_mut(b * t + i)[cs..cs + dh].iter_mut().zip(kj) {
                                    *acc += ds * x;
                                }
                                let qi = &vq.row(b * t + i)[cs..cs + dh];
                                for (acc, x) in dk.row_mut(b * t + j)[cs..cs + dh].iter_mut().zip(qi) {
                                    *acc += ds * x;
                                }
                            }
                        }
                    }
                }
                if needs(q) {
                    accumulate(&mut grads[q.0], dq);
                }
                if needs(k) {
                    accumulate(&mut grads[k.0], dk);
                }
                if needs(v) {
                    accumulate(&mut grads[v.0], dv);
                }
            }
            Op::WeightedSum(a, w) => {
                accumulate(&mut grads[a.0], w.scale(g.get(0, 0)));
            }
            Op::SoftmaxCe {
                logits,
                targets,
                weights,
                probs,
            } => {
                let s = g.get(0, 0);
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let w = weights[r] * s;
                    for (o, p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *o = w * p;
                    }
                    let cur = d.get(r, t);
                    d.set(r, t, cur - w);
                }
                accumulate(&mut grads[logits.0], d);
            }
            Op::BceLogits {
                logits,
                targets,
                weights,
            } => {
                let s = g.get(0, 0);
                let z = self.value(*logits);
                let mut d = Matrix::zeros(z.rows(), z.cols());
                for r in 0..z.rows() {
                    let w = weights[r] * s;
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..z.cols() {
                        d.set(r, c, w * (sigmoid(z.get(r, c)) - targets.get(r, c)));
                    }
                }
                accumulate(&mut grads[logits.0], d);
            }
            Op::InfoNce { sim, probs } => {
                let s = g.get(0, 0);
                let mut d = probs.scale(s);
                for k in 0..d.rows() {
                    let cur = d.get(k, k);
                    d.set(k, k, cur - s);
                }
                accumulate(&mut grads[sim.0], d);
            }
        }
    }
}
