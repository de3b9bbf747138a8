//! The jointly trained model: graph adapter, knowledge tracer and recommender,
//! together with the frozen text encodings and the graph they run on.

use crate::adapter::{AdapterConfig, Aggregation, GraphAdapter};
use crate::autodiff::{Bound, Tape, Var};
use crate::datasets::{ConceptId, LearningRecord};
use crate::encoder::{EmbeddingTable, Stage};
use crate::error::{Error, Result};
use crate::kgraph::KnowledgeGraph;
use crate::ktrace::KtModel;
use crate::params::Checkpoint;
use crate::recommender::{rank, BatchLayout, RecConfig, RecModel, ANSWER_MASK};
use crate::tensor::Matrix;

/// Architecture hyperparameters shared by every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub kt_hidden: usize,
    pub gcn_layers: usize,
    pub aggregation: Aggregation,
    pub blocks: usize,
    pub heads: usize,
    pub max_len: usize,
    pub projected_fusion: bool,
    /// Drop the text slice entirely (ID-only ablation).
    pub id_only: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            kt_hidden: 64,
            gcn_layers: 2,
            aggregation: Aggregation::Undirected,
            blocks: 3,
            heads: 2,
            max_len: 200,
            projected_fusion: false,
            id_only: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub adapter: GraphAdapter,
    pub kt: KtModel,
    pub rec: RecModel,
    pub raw: EmbeddingTable,
    pub graph: KnowledgeGraph,
    /// Set once fine-tuning has run.
    pub trained: bool,
}

/// Which sub-models receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub adapter: bool,
    pub kt: bool,
    pub rec: bool,
}

pub struct Bindings {
    pub adapter: Bound,
    pub kt: Bound,
    pub rec: Bound,
}

/// A padded batch of histories in the flattened `b * seq_len + t` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub layout: BatchLayout,
    pub items: Vec<usize>,
    pub answers: Vec<usize>,
    pub kt_inputs: Vec<Vec<Option<usize>>>,
}

impl SeqBatch {
    /// Keeps the most recent `max_len` records of each history. `masked[b][t]`
    /// (indexed on the kept window) hides a record: its item becomes the mask
    /// token, its answer the mask answer, and the tracer skips it.
    pub fn new(
        histories: &[&[LearningRecord]],
        num_concepts: usize,
        max_len: usize,
        masked: Option<&[Vec<bool>]>,
    ) -> Result<Self> {
        if histories.is_empty() || histories.iter().any(|h| h.is_empty()) {
            return Err(Error::invalid("history", "empty history in batch"));
        }
        let windows: Vec<&[LearningRecord]> = histories
            .iter()
            .map(|h| &h[h.len().saturating_sub(max_len)..])
            .collect();
        let seq_len = windows.iter().map(|w| w.len()).max().unwrap_or(0);
        let b = windows.len();
        let mut items = vec![num_concepts; b * seq_len];
        let mut answers = vec![ANSWER_MASK; b * seq_len];
        let mut kt_inputs = vec![vec![None; seq_len]; b];
        for (bi, w) in windows.iter().enumerate() {
            for (t, r) in w.iter().enumerate() {
                if r.concept >= num_concepts {
                    return Err(Error::UnknownConcept(format!("{} in history", r.concept)));
                }
                if masked.is_some_and(|m| m[bi].get(t).copied().unwrap_or(false)) {
                    continue;
                }
                items[bi * seq_len + t] = r.concept;
                answers[bi * seq_len + t] = usize::from(r.correct);
                kt_inputs[bi][t] = Some(r.concept + usize::from(r.correct) * num_concepts);
            }
        }
        Ok(Self {
            layout: BatchLayout {
                batch: b,
                seq_len,
                lengths: windows.iter().map(|w| w.len()).collect(),
            },
            items,
            answers,
            kt_inputs,
        })
    }
}

/// Nodes produced by one forward pass.
pub struct Forward {
    /// Block-width inputs, before positions are added.
    pub inputs: Var,
    /// Encoder outputs.
    pub encoded: Var,
}

impl ModelState {
    pub fn new(cfg: &ModelConfig, raw: EmbeddingTable, graph: KnowledgeGraph) -> Result<Self> {
        let k = graph.num_nodes();
        if raw.len() != k {
            return Err(Error::Shape(format!("{} text vectors for {k} concepts", raw.len())));
        }
        let adapter = GraphAdapter::new(
            AdapterConfig {
                layers: cfg.gcn_layers,
                aggregation: cfg.aggregation,
                ..AdapterConfig::new(raw.dim(), cfg.dim)
            },
            cfg.seed,
        )?;
        let kt = KtModel::new(k, cfg.kt_hidden, cfg.seed)?;
        let rec = RecModel::new(
            RecConfig {
                num_concepts: k,
                dim: cfg.dim,
                adapted_dim: cfg.dim,
                state_dim: cfg.kt_hidden,
                blocks: cfg.blocks,
                heads: cfg.heads,
                max_len: cfg.max_len,
                projected_fusion: cfg.projected_fusion,
                use_text: !cfg.id_only,
            },
            cfg.seed,
        )?;
        Ok(Self {
            adapter,
            kt,
            rec,
            raw,
            graph,
            trained: false,
        })
    }

    pub fn num_concepts(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn max_len(&self) -> usize {
        self.rec.config().max_len
    }

    pub fn bind(&self, tape: &mut Tape, train: Trainable) -> Bindings {
        Bindings {
            adapter: tape.bind(self.adapter.params(), train.adapter),
            kt: tape.bind(self.kt.params(), train.kt),
            rec: tape.bind(self.rec.params(), train.rec),
        }
    }

    /// Adapted embeddings over the full graph plus a zero row for the mask token.
    pub fn adapted_tape(&self, tape: &mut Tape, bound: &Bound) -> Var {
        let raw = tape.constant(self.raw.to_matrix());
        let agg = tape.constant(self.adapter.aggregation_matrix(&self.graph.full_view()));
        let h = self.adapter.forward_tape(tape, bound, raw, agg);
        let pad = tape.constant(Matrix::zeros(1, self.adapter.config().dim));
        tape.stack_rows(&[h, pad])
    }

    pub fn forward_tape(&self, tape: &mut Tape, b: &Bindings, batch: &SeqBatch, causal: bool) -> Forward {
        let layout = &batch.layout;
        let adapted = self.adapted_tape(tape, &b.adapter);
        let hs = self.kt.hidden_tape(tape, &b.kt, &batch.kt_inputs, layout.seq_len);
        let stacked = tape.stack_rows(&hs);
        // stacked row t * B + b  ->  layout row b * T + t
        let order: Vec<usize> = (0..layout.batch)
            .flat_map(|bi| (0..layout.seq_len).map(move |t| t * layout.batch + bi))
            .collect();
        let states = tape.gather_rows(stacked, order);
        let fused = self.rec.fuse_tape(tape, &b.rec, &batch.items, &batch.answers, adapted, states);
        let inputs = self.rec.input_tape(tape, &b.rec, fused);
        let encoded = self.rec.encode_tape(tape, &b.rec, inputs, layout, causal);
        Forward { inputs, encoded }
    }

    /// Next-concept logits after each history (`B x K`).
    pub fn next_logits(&self, histories: &[&[LearningRecord]]) -> Result<Matrix> {
        let k = self.num_concepts();
        let mut out = Vec::with_capacity(histories.len() * k);
        for chunk in histories.chunks(128) {
            let batch = SeqBatch::new(chunk, k, self.max_len(), None)?;
            let mut tape = Tape::new();
            let b = self.bind(
                &mut tape,
                Trainable {
                    adapter: false,
                    kt: false,
                    rec: false,
                },
            );
            let fwd = self.forward_tape(&mut tape, &b, &batch, true);
            let last: Vec<usize> = batch
                .layout
                .lengths
                .iter()
                .enumerate()
                .map(|(bi, &len)| batch.layout.row(bi, len - 1))
                .collect();
            let f = tape.gather_rows(fwd.encoded, last);
            let logits = self.rec.logits_tape(&mut tape, &b.rec, f);
            out.extend_from_slice(tape.value(logits).data());
        }
        Ok(Matrix::from_vec(histories.len(), k, out))
    }

    /// Top `k` concepts with their logits.
    pub fn recommend(&self, history: &[LearningRecord], top_k: usize) -> Result<Vec<(ConceptId, f64)>> {
        let logits = self.next_logits(&[history])?;
        let row = logits.row(0);
        Ok(rank(row).into_iter().take(top_k).map(|c| (c, row[c])).collect())
    }

    /// Graph-adapted table of every concept under the full graph.
    pub fn adapted_table(&self) -> Result<EmbeddingTable> {
        self.adapter.adapt(&self.graph.full_view(), &self.raw)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new("model");
        self.push_checkpoint(&mut ckpt);
        ckpt
    }

    pub fn push_checkpoint(&self, ckpt: &mut Checkpoint) {
        self.adapter.push_checkpoint(ckpt, "adapter.");
        self.kt.push_checkpoint(ckpt, "kt.");
        self.rec.push_checkpoint(ckpt, "rec.");
        ckpt.set_meta("trained", f64::from(u8::from(self.trained)));
        ckpt.set_meta("graph.nodes", self.graph.num_nodes() as f64);
        ckpt.tensors.push(("raw".into(), self.raw.to_matrix()));
        let edges = self.graph.edges();
        let flat: Vec<f64> = edges.iter().flat_map(|&(a, b)| [a as f64, b as f64]).collect();
        ckpt.tensors.push(("graph.edges".into(), Matrix::from_vec(edges.len(), 2, flat)));
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let raw = ckpt
            .tensor("raw")
            .ok_or_else(|| Error::Format("checkpoint has no text table".into()))?;
        let edges = ckpt
            .tensor("graph.edges")
            .ok_or_else(|| Error::Format("checkpoint has no graph".into()))?;
        let graph = KnowledgeGraph::new(
            ckpt.meta_usize("graph.nodes")?,
            (0..edges.rows()).map(|r| (edges.get(r, 0) as usize, edges.get(r, 1) as usize)),
        )?;
        let state = Self {
            adapter: GraphAdapter::from_checkpoint(ckpt, "adapter.")?,
            kt: KtModel::from_checkpoint(ckpt, "kt.")?,
            rec: RecModel::from_checkpoint(ckpt, "rec.")?,
            raw: EmbeddingTable::from_matrix(Stage::RawText, raw)?,
            graph,
            trained: ckpt.meta("trained")? != 0.0,
        };
        state.check_widths()?;
        Ok(state)
    }

    /// Copies the sub-models a stage checkpoint carries.
    pub fn load_stage(&mut self, ckpt: &Checkpoint) -> Result<()> {
        match ckpt.kind.as_str() {
            "adapter" => self.adapter = GraphAdapter::from_checkpoint(ckpt, "")?,
            "ktrace" => self.kt = KtModel::from_checkpoint(ckpt, "")?,
            _ => {
                let other = Self::from_checkpoint(ckpt)?;
                self.adapter = other.adapter;
                self.kt = other.kt;
                self.rec = other.rec;
                self.trained = other.trained;
            }
        }
        self.check_widths()
    }

    /// Sub-model widths must agree once checkpoints have been swapped in.
    pub fn check_widths(&self) -> Result<()> {
        let a = self.adapter.config();
        let r = self.rec.config();
        let k = self.num_concepts();
        if a.native_dim != self.raw.dim() || a.dim != r.adapted_dim {
            return Err(Error::Shape(format!(
                "adapter maps {} -> {}, but text width is {} and the recommender expects {}",
                a.native_dim,
                a.dim,
                self.raw.dim(),
                r.adapted_dim
            )));
        }
        if self.kt.hidden() != r.state_dim || self.kt.num_concepts() != k || r.num_concepts != k {
            return Err(Error::Shape(format!(
                "tracer is {} concepts x {} hidden, recommender is {} concepts x {} state width, graph has {k} nodes",
                self.kt.num_concepts(),
                self.kt.hidden(),
                r.num_concepts,
                r.state_dim
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::LearnerSequence;
    use crate::gradcheck;
    use crate::params::ParamStore;
    use crate::recommender::rec_loss_tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_state(seed: u64) -> ModelState {
        let g = KnowledgeGraph::new(5, vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 2)]).unwrap();
        let raw = EmbeddingTable::from_matrix(
            Stage::RawText,
            &Matrix::uniform(5, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)),
        )
        .unwrap();
        let cfg = ModelConfig {
            dim: 2,
            kt_hidden: 3,
            blocks: 1,
            heads: 2,
            max_len: 6,
            seed,
            ..Default::default()
        };
        ModelState::new(&cfg, raw, g).unwrap()
    }

    fn histories(seed: u64) -> Vec<LearnerSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3)
            .map(|i| {
                let n = rng.random_range(3..6);
                let pairs: Vec<(usize, bool)> = (0..n).map(|_| (rng.random_range(0..5), rng.random_bool(0.5))).collect();
                LearnerSequence::from_pairs(format!("u{i}"), &pairs)
            })
            .collect()
    }

    /// Next-item cross-entropy over every position of a batch.
    fn finetune_objective(state: &ModelState, tape: &mut Tape, b: &Bindings, seqs: &[LearnerSequence]) -> Var {
        let inputs: Vec<&[LearningRecord]> = seqs.iter().map(|s| &s.records[..s.len() - 1]).collect();
        let batch = SeqBatch::new(&inputs, 5, 6, None).unwrap();
        let fwd = state.forward_tape(tape, b, &batch, true);
        let logits = state.rec.logits_tape(tape, &b.rec, fwd.encoded);
        let mut targets = vec![None; batch.layout.rows()];
        for (bi, s) in seqs.iter().enumerate() {
            for t in 0..s.len() - 1 {
                targets[batch.layout.row(bi, t)] = Some(s.records[t + 1].concept);
            }
        }
        rec_loss_tape(tape, logits, targets)
    }

    #[test]
    fn finetune_gradients_match_finite_differences() {
        let all = Trainable {
            adapter: true,
            kt: true,
            rec: true,
        };
        for seed in 0..3 {
            let state = tiny_state(seed);
            let seqs = histories(seed + 10);
            let mut tape = Tape::new();
            let b = state.bind(&mut tape, all);
            let l = finetune_objective(&state, &mut tape, &b, &seqs);
            tape.backward(l);
            // Check each sub-model with the others held fixed.
            for part in 0..3 {
                let (store, grads): (&ParamStore, _) = match part {
                    0 => (state.adapter.params(), tape.grads_for(&b.adapter)),
                    1 => (state.kt.params(), tape.grads_for(&b.kt)),
                    _ => (state.rec.params(), tape.grads_for(&b.rec)),
                };
                gradcheck::check_store(store, &grads, 1e-7, |p| {
                    let mut s = state.clone();
                    match part {
                        0 => *s.adapter.params_mut() = p.clone(),
                        1 => *s.kt.params_mut() = p.clone(),
                        _ => *s.rec.params_mut() = p.clone(),
                    }
                    let mut t = Tape::new();
                    let bb = s.bind(
                        &mut t,
                        Trainable {
                            adapter: false,
                            kt: false,
                            rec: false,
                        },
                    );
                    let l = finetune_objective(&s, &mut t, &bb, &seqs);
                    t.scalar(l)
                });
            }
        }
    }

    #[test]
    fn batch_masks_and_pads() {
        let h1 = LearnerSequence::from_pairs("a", &[(1, true), (2, false), (3, true)]);
        let h2 = LearnerSequence::from_pairs("b", &[(4, false)]);
        let mask = vec![vec![false, true, false], vec![false]];
        let b = SeqBatch::new(&[&h1.records, &h2.records], 5, 10, Some(&mask)).unwrap();
        assert_eq!(b.items, vec![1, 5, 3, 4, 5, 5]);
        assert_eq!(b.answers, vec![1, 2, 1, 0, 2, 2]);
        assert_eq!(b.kt_inputs[0], vec![Some(6), None, Some(8)]);
        assert_eq!(b.layout.lengths, vec![3, 1]);
        let short = SeqBatch::new(&[&h1.records], 5, 2, None).unwrap();
        assert_eq!(short.items, vec![2, 3]);
    }

    #[test]
    fn batched_logits_match_single_histories() {
        let state = tiny_state(4);
        let seqs = histories(5);
        let refs: Vec<&[LearningRecord]> = seqs.iter().map(|s| s.records.as_slice()).collect();
        let all = state.next_logits(&refs).unwrap();
        for (i, r) in refs.iter().enumerate() {
            let one = state.next_logits(&[r]).unwrap();
            for (a, b) in one.row(0).iter().zip(all.row(i)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut state = tiny_state(2);
        state.trained = true;
        let back = ModelState::from_checkpoint(&Checkpoint::from_bytes(&state.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, state);
    }
}
