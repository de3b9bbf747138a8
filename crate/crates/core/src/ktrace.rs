//! GRU knowledge tracer over `(concept, correct)` histories.
//!
//! Each record enters as index `concept + correct * K` into a learned
//! `2K x d_kt` embedding. The hidden state after record `t` is the knowledge
//! state `s_t`; `sigmoid(s_t W_o + b_o)` gives per-concept mastery.

use rand::seq::SliceRandom;

use crate::autodiff::{Bound, Tape, Var};
use crate::datasets::{LearnerSequence, LearningRecord};
use crate::error::{Error, Result};
use crate::params::{Checkpoint, Optimizer, OptimizerKind, ParamId, ParamStore};
use crate::rng::{self, streams};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KtLoss {
    SquaredError,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KtModel {
    num_concepts: usize,
    hidden: usize,
    params: ParamStore,
    ids: KtIds,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct KtIds {
    input: ParamId,
    wz: ParamId,
    uz: ParamId,
    bz: ParamId,
    wr: ParamId,
    ur: ParamId,
    br: ParamId,
    wn: ParamId,
    un: ParamId,
    bn: ParamId,
    head: ParamId,
    head_bias: ParamId,
}

/// Hidden vector and mastery after one record.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeState {
    pub hidden: Vec<f64>,
    pub mastery: Vec<f64>,
}

impl KtModel {
    /// Uniform init in `±1/sqrt(hidden)`, zero biases.
    pub fn new(num_concepts: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, streams::KT_INIT);
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        Self::build(num_concepts, hidden, |r, c, bias| {
            if bias {
                Matrix::zeros(r, c)
            } else {
                Matrix::uniform(r, c, bound, &mut rng)
            }
        })
    }

    pub fn zeros(num_concepts: usize, hidden: usize) -> Result<Self> {
        Self::build(num_concepts, hidden, |r, c, _| Matrix::zeros(r, c))
    }

    fn build(num_concepts: usize, hidden: usize, mut init: impl FnMut(usize, usize, bool) -> Matrix) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::invalid("kt_hidden", "hidden width must be positive"));
        }
        if num_concepts == 0 {
            return Err(Error::invalid("num_concepts", "need at least one concept"));
        }
        let (k, h) = (num_concepts, hidden);
        let mut p = ParamStore::new();
        let ids = KtIds {
            input: p.add("input", init(2 * k, h, false)),
            wz: p.add("wz", init(h, h, false)),
            uz: p.add("uz", init(h, h, false)),
            bz: p.add("bz", init(1, h, true)),
            wr: p.add("wr", init(h, h, false)),
            ur: p.add("ur", init(h, h, false)),
            br: p.add("br", init(1, h, true)),
            wn: p.add("wn", init(h, h, false)),
            un: p.add("un", init(h, h, false)),
            bn: p.add("bn", init(1, h, true)),
            head: p.add("head", init(h, k, false)),
            head_bias: p.add("head_bias", init(1, k, true)),
        };
        Ok(Self {
            num_concepts,
            hidden,
            params: p,
            ids,
        })
    }

    pub fn num_concepts(&self) -> usize {
        self.num_concepts
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn input_index(&self, r: &LearningRecord) -> Result<usize> {
        if r.concept >= self.num_concepts {
            return Err(Error::UnknownConcept(format!(
                "{} (tracer knows {} concepts)",
                r.concept, self.num_concepts
            )));
        }
        Ok(r.concept + usize::from(r.correct) * self.num_concepts)
    }

    /// Hidden states for a batch. `inputs[b][t]` is the embedding index of the
    /// record at step `t`, or `None` to carry the previous state unchanged.
    /// Returns one `B x hidden` node per step.
    pub fn hidden_tape(&self, tape: &mut Tape, bound: &Bound, inputs: &[Vec<Option<usize>>], steps: usize) -> Vec<Var> {
        let b = inputs.len();
        let id = &self.ids;
        let mut h = tape.constant(Matrix::zeros(b, self.hidden));
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let col: Vec<Option<usize>> = inputs.iter().map(|s| s.get(t).copied().flatten()).collect();
            let idx: Vec<usize> = col.iter().map(|i| i.unwrap_or(0)).collect();
            let x = tape.gather_rows(bound[id.input], idx);
            let gate = |tape: &mut Tape, w: ParamId, u: ParamId, bias: ParamId, hh: Var| {
                let a = tape.matmul(x, bound[w]);
                let c = tape.matmul(hh, bound[u]);
                let s = tape.add(a, c);
                tape.add_row(s, bound[bias])
            };
            let zpre = gate(tape, id.wz, id.uz, id.bz, h);
            let z = tape.sigmoid(zpre);
            let rpre = gate(tape, id.wr, id.ur, id.br, h);
            let r = tape.sigmoid(rpre);
            let rh = tape.mul(r, h);
            let npre = gate(tape, id.wn, id.un, id.bn, rh);
            let n = tape.tanh(npre);
            // h' = n + z ⊙ (h − n)
            let diff = tape.sub(h, n);
            let zd = tape.mul(z, diff);
            let candidate = tape.add(n, zd);
            h = if col.iter().all(Option::is_some) {
                candidate
            } else {
                let mut m = Matrix::zeros(b, self.hidden);
                for (row, c) in col.iter().enumerate() {
                    if c.is_some() {
                        m.row_mut(row).fill(1.0);
                    }
                }
                let m = tape.constant(m);
                let step = tape.sub(candidate, h);
                let gated = tape.mul(m, step);
                tape.add(h, gated)
            };
            out.push(h);
        }
        out
    }

    /// Mastery logits `h W_o + b_o` for stacked hidden rows.
    pub fn head_tape(&self, tape: &mut Tape, bound: &Bound, hidden: Var) -> Var {
        let z = tape.matmul(hidden, bound[self.ids.head]);
        tape.add_row(z, bound[self.ids.head_bias])
    }

    /// Batch objective: mean over sequences of the per-sequence mean
    /// next-answer error. Sequences shorter than 2 contribute nothing.
    pub fn loss_tape(&self, tape: &mut Tape, bound: &Bound, seqs: &[&[LearningRecord]], loss: KtLoss) -> Result<Var> {
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let inputs = seqs
            .iter()
            .map(|s| s.iter().map(|r| self.input_index(r).map(Some)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let usable = seqs.iter().filter(|s| s.len() >= 2).count();
        if usable == 0 {
            return Err(Error::invalid("sequence", "knowledge tracing needs a sequence of length >= 2"));
        }
        let hs = self.hidden_tape(tape, bound, &inputs, steps.saturating_sub(1));
        let stacked = tape.stack_rows(&hs);
        let logits = self.head_tape(tape, bound, stacked);
        let b = seqs.len();
        let (mut picks, mut targets, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for (si, s) in seqs.iter().enumerate() {
            if s.len() < 2 {
                continue;
            }
            let w = 1.0 / (usable as f64 * (s.len() - 1) as f64);
            for t in 0..s.len() - 1 {
                picks.push((t * b + si, s[t + 1].concept));
                targets.push(if s[t + 1].is_correct() { 1.0 } else { 0.0 });
                weights.push(w);
            }
        }
        let n = picks.len();
        let sel = tape.gather_elems(logits, picks);
        Ok(match loss {
            KtLoss::SquaredError => {
                let p = tape.sigmoid(sel);
                let y = tape.constant(Matrix::from_vec(n, 1, targets));
                let e = tape.sub(p, y);
                let sq = tape.mul(e, e);
                tape.weighted_sum(sq, Matrix::from_vec(n, 1, weights))
            }
            KtLoss::CrossEntropy => tape.bce_with_logits(sel, Matrix::from_vec(n, 1, targets), weights),
        })
    }

    pub fn push_checkpoint(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.set_meta(&format!("{prefix}num_concepts"), self.num_concepts as f64);
        ckpt.set_meta(&format!("{prefix}hidden"), self.hidden as f64);
        ckpt.push_store(prefix, &self.params);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut m = Self::zeros(
            ckpt.meta_usize(&format!("{prefix}num_concepts"))?,
            ckpt.meta_usize(&format!("{prefix}hidden"))?,
        )?;
        ckpt.fill_store(prefix, &mut m.params)?;
        Ok(m)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new("ktrace");
        self.push_checkpoint(&mut ckpt, "");
        ckpt
    }
}

/// One knowledge state per prefix of `history`.
pub fn kt_forward(model: &KtModel, history: &[LearningRecord]) -> Result<Vec<KnowledgeState>> {
    if history.is_empty() {
        return Err(Error::invalid("history", "empty history"));
    }
    let inputs = vec![history
        .iter()
        .map(|r| model.input_index(r).map(Some))
        .collect::<Result<Vec<_>>>()?];
    let mut tape = Tape::new();
    let bound = tape.bind(&model.params, false);
    let hs = model.hidden_tape(&mut tape, &bound, &inputs, history.len());
    let stacked = tape.stack_rows(&hs);
    let logits = model.head_tape(&mut tape, &bound, stacked);
    let hidden = tape.value(stacked);
    let logits = tape.value(logits);
    Ok((0..history.len())
        .map(|t| KnowledgeState {
            hidden: hidden.row(t).to_vec(),
            mastery: logits.row(t).iter().map(|&z| sigmoid(z)).collect(),
        })
        .collect())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean squared next-answer error over one sequence.
pub fn kt_loss(model: &KtModel, seq: &LearnerSequence) -> Result<f64> {
    kt_loss_with(model, seq, KtLoss::SquaredError)
}

pub fn kt_loss_with(model: &KtModel, seq: &LearnerSequence, loss: KtLoss) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::Learner {
            learner: seq.learner.clone(),
            message: "knowledge tracing needs at least 2 records".into(),
        });
    }
    let mut tape = Tape::new();
    let bound = tape.bind(&model.params, false);
    let l = model.loss_tape(&mut tape, &bound, &[&seq.records], loss)?;
    Ok(tape.scalar(l))
}

/// `(predicted mastery of the next concept, observed correctness)` for every
/// step of every sequence.
pub fn next_answer_predictions(model: &KtModel, seqs: &[LearnerSequence]) -> Result<Vec<(f64, bool)>> {
    let mut out = Vec::new();
    for s in seqs.iter().filter(|s| s.len() >= 2) {
        let states = kt_forward(model, &s.records)?;
        for t in 0..s.len() - 1 {
            let next = &s.records[t + 1];
            out.push((states[t].mastery[next.concept], next.is_correct()));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KtTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub loss: KtLoss,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for KtTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.01,
            batch_size: 64,
            optimizer: OptimizerKind::adam(),
            loss: KtLoss::SquaredError,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

/// Minibatch training on the mean per-sequence loss. Returns the mean
/// training loss of each epoch.
pub fn pretrain_kt(model: &mut KtModel, data: &[LearnerSequence], cfg: &KtTrainConfig) -> Result<Vec<f64>> {
    let usable: Vec<&LearnerSequence> = data.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::invalid("data", "no sequence has 2 or more records"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be positive"));
    }
    let mut rng = rng::stream(cfg.seed, streams::KT_SHUFFLE);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate).with_clip_norm(cfg.clip_norm);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&[LearningRecord]> = chunk.iter().map(|&i| usable[i].records.as_slice()).collect();
            let mut tape = Tape::new();
            let bound = tape.bind(&model.params, true);
            let loss = model.loss_tape(&mut tape, &bound, &batch, cfg.loss)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    stage: "kt".into(),
                    epoch,
                    step,
                });
            }
            total += value * chunk.len() as f64;
            tape.backward(loss);
            let grads = tape.grads_for(&bound);
            opt.step(&mut model.params, &grads);
        }
        let mean = total / usable.len() as f64;
        log::debug!("kt epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok(history)
}
