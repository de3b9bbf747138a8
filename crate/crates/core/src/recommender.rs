//! Fused-input Transformer recommender.
//!
//! Each step is `x_t = [item | answer | text | state]`, four width-`d`
//! slices. Learned positions are added, pre-norm attention blocks encode the
//! sequence, and `F_t Wᵀ` scores every concept.

use std::cmp::Ordering;

use crate::autodiff::{AttentionSpec, Bound, Tape, Var};
use crate::datasets::ConceptId;
use crate::error::{Error, Result};
use crate::params::{Checkpoint, ParamId, ParamStore};
use crate::rng::{self, streams};
use crate::tensor::Matrix;

pub const LN_EPS: f64 = 1e-5;
/// Answer-embedding row for a hidden answer.
pub const ANSWER_MASK: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct RecConfig {
    pub num_concepts: usize,
    pub dim: usize,
    /// Width of the graph-adapted vectors fed to the text slice.
    pub adapted_dim: usize,
    /// Width of the knowledge-tracer hidden state.
    pub state_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Project the `4d` fused input down to `d` before the blocks.
    pub projected_fusion: bool,
    /// Zero the text slice (ID-only ablation).
    pub use_text: bool,
}

impl RecConfig {
    pub fn new(num_concepts: usize, dim: usize) -> Self {
        Self {
            num_concepts,
            dim,
            adapted_dim: dim,
            state_dim: dim,
            blocks: 3,
            heads: 2,
            max_len: 200,
            projected_fusion: false,
            use_text: true,
        }
    }

    pub fn fused_width(&self) -> usize {
        4 * self.dim
    }

    /// Width inside the attention blocks.
    pub fn width(&self) -> usize {
        if self.projected_fusion {
            self.dim
        } else {
            self.fused_width()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_concepts == 0 {
            return Err(Error::invalid("num_concepts", "need at least one concept"));
        }
        if self.dim == 0 || self.adapted_dim == 0 || self.state_dim == 0 {
            return Err(Error::invalid("dim", "widths must be positive"));
        }
        if self.heads == 0 || !self.width().is_multiple_of(self.heads) {
            return Err(Error::invalid(
                "heads",
                format!("model width {} is not divisible by {} heads", self.width(), self.heads),
            ));
        }
        if self.max_len == 0 {
            return Err(Error::invalid("max_len", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct RecIds {
    item: ParamId,
    answer: ParamId,
    text_proj: ParamId,
    state_proj: ParamId,
    fuse_proj: Option<ParamId>,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    out: ParamId,
    map_w: ParamId,
    map_b: ParamId,
    aap_w: ParamId,
    aap_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecModel {
    cfg: RecConfig,
    params: ParamStore,
    ids: RecIds,
}

/// Flattened batch layout: row `b * seq_len + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
}

impl BatchLayout {
    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    pub fn row(&self, b: usize, t: usize) -> usize {
        b * self.seq_len + t
    }
}

impl RecModel {
    /// Uniform init in `±1/sqrt(dim)`; norms start at identity.
    pub fn new(cfg: RecConfig, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, streams::REC_INIT);
        let bound = 1.0 / (cfg.dim as f64).sqrt();
        Self::build(cfg, |kind, r, c| match kind {
            Init::Random => Matrix::uniform(r, c, bound, &mut rng),
            Init::Zero => Matrix::zeros(r, c),
            Init::One => Matrix::filled(r, c, 1.0),
        })
    }

    fn build(cfg: RecConfig, mut init: impl FnMut(Init, usize, usize) -> Matrix) -> Result<Self> {
        cfg.validate()?;
        let (k, d, w) = (cfg.num_concepts, cfg.dim, cfg.width());
        let mut p = ParamStore::new();
        let item = p.add("item", init(Init::Random, k + 1, d));
        let answer = p.add("answer", init(Init::Random, 3, d));
        let text_proj = p.add("text_proj", init(Init::Random, cfg.adapted_dim, d));
        let state_proj = p.add("state_proj", init(Init::Random, cfg.state_dim, d));
        let fuse_proj = cfg
            .projected_fusion
            .then(|| p.add("fuse_proj", init(Init::Random, cfg.fused_width(), d)));
        let pos = p.add("pos", init(Init::Random, cfg.max_len, w));
        let blocks = (0..cfg.blocks)
            .map(|i| BlockIds {
                ln1_g: p.add(format!("block{i}.ln1_g"), init(Init::One, 1, w)),
                ln1_b: p.add(format!("block{i}.ln1_b"), init(Init::Zero, 1, w)),
                wq: p.add(format!("block{i}.wq"), init(Init::Random, w, w)),
                wk: p.add(format!("block{i}.wk"), init(Init::Random, w, w)),
                wv: p.add(format!("block{i}.wv"), init(Init::Random, w, w)),
                wo: p.add(format!("block{i}.wo"), init(Init::Random, w, w)),
                ln2_g: p.add(format!("block{i}.ln2_g"), init(Init::One, 1, w)),
                ln2_b: p.add(format!("block{i}.ln2_b"), init(Init::Zero, 1, w)),
                w1: p.add(format!("block{i}.w1"), init(Init::Random, w, w)),
                b1: p.add(format!("block{i}.b1"), init(Init::Zero, 1, w)),
                w2: p.add(format!("block{i}.w2"), init(Init::Random, w, w)),
                b2: p.add(format!("block{i}.b2"), init(Init::Zero, 1, w)),
            })
            .collect();
        let lnf_g = p.add("lnf_g", init(Init::One, 1, w));
        let lnf_b = p.add("lnf_b", init(Init::Zero, 1, w));
        let out = p.add("out", init(Init::Random, k, w));
        let map_w = p.add("ssl.map_w", init(Init::Random, w, k));
        let map_b = p.add("ssl.map_b", init(Init::Zero, 1, k));
        let aap_w = p.add("ssl.aap_w", init(Init::Random, w, k));
        let aap_b = p.add("ssl.aap_b", init(Init::Zero, 1, k));
        Ok(Self {
            cfg,
            params: p,
            ids: RecIds {
                item,
                answer,
                text_proj,
                state_proj,
                fuse_proj,
                pos,
                blocks,
                lnf_g,
                lnf_b,
                out,
                map_w,
                map_b,
                aap_w,
                aap_b,
            },
        })
    }

    pub fn config(&self) -> &RecConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// The scoring matrix `W` (`K x width`).
    pub fn output_matrix(&self) -> &Matrix {
        self.params.get(self.ids.out)
    }

    pub fn item_embedding(&self) -> &Matrix {
        self.params.get(self.ids.item)
    }

    pub fn answer_embedding(&self) -> &Matrix {
        self.params.get(self.ids.answer)
    }

    pub fn text_projection(&self) -> &Matrix {
        self.params.get(self.ids.text_proj)
    }

    pub fn state_projection(&self) -> &Matrix {
        self.params.get(self.ids.state_proj)
    }

    /// Fused inputs for a flattened batch. `items` index the item table (with
    /// `K` as the mask token), `answers` the answer table. `adapted` holds one
    /// graph-adapted row per item-table row, and `states` one tracer state per row.
    pub fn fuse_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        items: &[usize],
        answers: &[usize],
        adapted: Var,
        states: Var,
    ) -> Var {
        let n = items.len();
        let id = tape.gather_rows(bound[self.ids.item], items.to_vec());
        let ans = tape.gather_rows(bound[self.ids.answer], answers.to_vec());
        let text = if self.cfg.use_text {
            let rows = tape.gather_rows(adapted, items.to_vec());
            tape.matmul(rows, bound[self.ids.text_proj])
        } else {
            tape.constant(Matrix::zeros(n, self.cfg.dim))
        };
        let state = tape.matmul(states, bound[self.ids.state_proj]);
        tape.concat_cols(&[id, ans, text, state])
    }

    /// Brings fused inputs to block width (identity unless fusion is projected).
    pub fn input_tape(&self, tape: &mut Tape, bound: &Bound, fused: Var) -> Var {
        match self.ids.fuse_proj {
            Some(p) => tape.matmul(fused, bound[p]),
            None => fused,
        }
    }

    /// Encodes block-width inputs; returns the final normalized `F`.
    pub fn encode_tape(&self, tape: &mut Tape, bound: &Bound, x: Var, layout: &BatchLayout, causal: bool) -> Var {
        let positions: Vec<usize> = (0..layout.batch).flat_map(|_| 0..layout.seq_len).collect();
        let pos = tape.gather_rows(bound[self.ids.pos], positions);
        let mut h = tape.add(x, pos);
        for blk in &self.ids.blocks {
            let a = tape.layer_norm(h, bound[blk.ln1_g], bound[blk.ln1_b], LN_EPS);
            let q = tape.matmul(a, bound[blk.wq]);
            let k = tape.matmul(a, bound[blk.wk]);
            let v = tape.matmul(a, bound[blk.wv]);
            let att = tape.attention(
                q,
                k,
                v,
                AttentionSpec {
                    heads: self.cfg.heads,
                    seq_len: layout.seq_len,
                    lengths: layout.lengths.clone(),
                    causal,
                },
            );
            let o = tape.matmul(att, bound[blk.wo]);
            h = tape.add(h, o);
            let f = tape.layer_norm(h, bound[blk.ln2_g], bound[blk.ln2_b], LN_EPS);
            let f = tape.matmul(f, bound[blk.w1]);
            let f = tape.add_row(f, bound[blk.b1]);
            let f = tape.gelu(f);
            let f = tape.matmul(f, bound[blk.w2]);
            let f = tape.add_row(f, bound[blk.b2]);
            h = tape.add(h, f);
        }
        tape.layer_norm(h, bound[self.ids.lnf_g], bound[self.ids.lnf_b], LN_EPS)
    }

    /// `F Wᵀ`: one row of concept logits per encoded row.
    pub fn logits_tape(&self, tape: &mut Tape, bound: &Bound, f: Var) -> Var {
        tape.matmul_bt(f, bound[self.ids.out])
    }

    /// Attribute logits from encoder outputs (masked positions).
    pub fn map_logits_tape(&self, tape: &mut Tape, bound: &Bound, f: Var) -> Var {
        let z = tape.matmul(f, bound[self.ids.map_w]);
        tape.add_row(z, bound[self.ids.map_b])
    }

    /// Attribute logits from block-width item inputs (unmasked positions).
    pub fn aap_logits_tape(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let z = tape.matmul(x, bound[self.ids.aap_w]);
        tape.add_row(z, bound[self.ids.aap_b])
    }

    pub fn push_checkpoint(&self, ckpt: &mut Checkpoint, prefix: &str) {
        let c = &self.cfg;
        for (key, v) in [
            ("num_concepts", c.num_concepts),
            ("dim", c.dim),
            ("adapted_dim", c.adapted_dim),
            ("state_dim", c.state_dim),
            ("blocks", c.blocks),
            ("heads", c.heads),
            ("max_len", c.max_len),
            ("projected_fusion", usize::from(c.projected_fusion)),
            ("use_text", usize::from(c.use_text)),
        ] {
            ckpt.set_meta(&format!("{prefix}{key}"), v as f64);
        }
        ckpt.push_store(prefix, &self.params);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let m = |key: &str| ckpt.meta_usize(&format!("{prefix}{key}"));
        let cfg = RecConfig {
            num_concepts: m("num_concepts")?,
            dim: m("dim")?,
            adapted_dim: m("adapted_dim")?,
            state_dim: m("state_dim")?,
            blocks: m("blocks")?,
            heads: m("heads")?,
            max_len: m("max_len")?,
            projected_fusion: m("projected_fusion")? != 0,
            use_text: m("use_text")? != 0,
        };
        let mut model = Self::build(cfg, |_, r, c| Matrix::zeros(r, c))?;
        ckpt.fill_store(prefix, &mut model.params)?;
        Ok(model)
    }
}

#[derive(Clone, Copy)]
enum Init {
    Random,
    Zero,
    One,
}

/// `[item | answer | text | state]` for one step. `adapted` and `state` must
/// already be projected to width `d`.
pub fn fuse(item: &[f64], answer: &[f64], adapted: &[f64], state: &[f64]) -> Result<Vec<f64>> {
    let d = item.len();
    for (name, part) in [("answer", answer), ("adapted", adapted), ("state", state)] {
        if part.len() != d {
            return Err(Error::Shape(format!("{name} slice has width {}, expected {d}", part.len())));
        }
    }
    Ok([item, answer, adapted, state].concat())
}

/// Encodes one sequence of fused inputs (most recent `max_len` kept).
pub fn seq_forward(model: &RecModel, inputs: &[Vec<f64>], causal: bool) -> Result<Vec<Vec<f64>>> {
    if inputs.is_empty() {
        return Err(Error::invalid("inputs", "empty sequence"));
    }
    let fw = model.cfg.fused_width();
    if let Some(bad) = inputs.iter().find(|v| v.len() != fw) {
        return Err(Error::Shape(format!("input width {} vs fused width {fw}", bad.len())));
    }
    let start = inputs.len().saturating_sub(model.cfg.max_len);
    let rows = &inputs[start..];
    let layout = BatchLayout {
        batch: 1,
        seq_len: rows.len(),
        lengths: vec![rows.len()],
    };
    let mut tape = Tape::new();
    let bound = tape.bind(&model.params, false);
    let x = tape.constant(Matrix::from_rows(rows));
    let x = model.input_tape(&mut tape, &bound, x);
    let f = model.encode_tape(&mut tape, &bound, x, &layout, causal);
    let out = tape.value(f);
    Ok((0..out.rows()).map(|r| out.row(r).to_vec()).collect())
}

/// Logits `W F_t` over all concepts.
pub fn score(model: &RecModel, f: &[f64]) -> Result<Vec<f64>> {
    let w = model.output_matrix();
    if f.len() != w.cols() {
        return Err(Error::Shape(format!("F has width {}, W has {}", f.len(), w.cols())));
    }
    Ok((0..w.rows()).map(|k| crate::tensor::dot(w.row(k), f)).collect())
}

/// Concepts by descending logit, ties by ascending id.
pub fn rank(logits: &[f64]) -> Vec<ConceptId> {
    let mut order: Vec<ConceptId> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// 1-based position of `target` in [`rank`] order, computed without sorting.
pub fn rank_of(logits: &[f64], target: ConceptId) -> usize {
    let t = logits[target];
    1 + logits
        .iter()
        .enumerate()
        .filter(|&(k, &z)| z > t || (z == t && k < target))
        .count()
}

/// Mean softmax cross-entropy of one target per logit row.
pub fn rec_loss(logits: &Matrix, targets: &[ConceptId]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!("{} rows vs {} targets", logits.rows(), targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::UnknownConcept(format!("target {bad} outside {} concepts", logits.cols())));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let l = rec_loss_tape(&mut tape, z, targets.iter().map(|&t| Some(t)).collect());
    Ok(tape.scalar(l))
}

/// Mean cross-entropy over rows that have a target.
pub fn rec_loss_tape(tape: &mut Tape, logits: Var, targets: Vec<Option<ConceptId>>) -> Var {
    let n = targets.iter().filter(|t| t.is_some()).count().max(1);
    let weights = vec![1.0 / n as f64; targets.len()];
    tape.softmax_cross_entropy(logits, targets, weights)
}
