//! Staged training: graph contrastive pretraining, knowledge-tracing
//! pretraining, sequence self-supervision, then joint fine-tuning.
//!
//! Sequence self-supervision uses four objectives over one masked copy of each
//! training sequence:
//!
//! * masked item: recover masked concepts from bidirectional encodings;
//! * masked segment: recover a masked contiguous span from a second pass;
//! * masked attribute: predict the masked concept's predecessor set from its encoding;
//! * associated attribute: predict the predecessor set of an unmasked concept
//!   from its fused input.
//!
//! The adapter and tracer stay frozen during self-supervision.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::adapter::{pretrain_adapter, ContrastiveConfig};
use crate::datasets::{ConceptId, LearnerSequence, LearningRecord, SplitDataset};
use crate::error::{Error, Result};
use crate::evalkit::validation_mrr;
use crate::kgraph::KnowledgeGraph;
use crate::ktrace::{pretrain_kt, KtLoss, KtTrainConfig};
use crate::model::{Bindings, ModelState, SeqBatch, Trainable};
use crate::params::{Checkpoint, Optimizer, OptimizerKind};
use crate::recommender::rec_loss_tape;
use crate::rng::{self, streams};
use crate::tensor::Matrix;

pub const DEFAULT_MASK_PROB: f64 = 0.2;
pub const MAX_SEGMENT: usize = 8;
pub const DEFAULT_PATIENCE: usize = 5;

const FROZEN: Trainable = Trainable {
    adapter: false,
    kt: false,
    rec: false,
};

/// Masks for one training sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SslBatch {
    pub records: Vec<LearningRecord>,
    /// Masked-item positions, ascending.
    pub mip: Vec<usize>,
    /// Masked segment as a half-open range; `None` when the sequence is too short.
    pub msp: Option<(usize, usize)>,
    /// Unmasked positions whose attributes are predicted from the input.
    pub aap: Vec<usize>,
    /// Predecessor set of the true concept at each position.
    pub attributes: Vec<Vec<ConceptId>>,
}

impl SslBatch {
    pub fn segment(&self) -> Vec<usize> {
        self.msp.map_or_else(Vec::new, |(a, b)| (a..b).collect())
    }
}

/// Draws masks for every sequence from one seeded stream, in order.
pub fn build_ssl_batches(
    seqs: &[&[LearningRecord]],
    graph: &KnowledgeGraph,
    mask_prob: f64,
    seed: u64,
) -> Result<Vec<SslBatch>> {
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(Error::invalid("mask_prob", format!("{mask_prob} is outside (0, 1)")));
    }
    let mut rng = rng::stream(seed, streams::SSL_MASK);
    let mut out = Vec::with_capacity(seqs.len());
    for records in seqs {
        let n = records.len();
        let mut attributes = Vec::with_capacity(n);
        for r in records.iter() {
            if r.concept >= graph.num_nodes() {
                return Err(Error::UnknownConcept(format!("{} outside the graph", r.concept)));
            }
            attributes.push(graph.predecessors(r.concept).to_vec());
        }
        let mip: Vec<usize> = (0..n).filter(|_| rng.random_bool(mask_prob)).collect();
        let longest = MAX_SEGMENT.min(n / 2);
        let msp = (longest >= 2).then(|| {
            let len = rng.random_range(2..=longest);
            let start = rng.random_range(0..=n - len);
            (start, start + len)
        });
        let aap: Vec<usize> = (0..n)
            .filter(|t| !mip.contains(t))
            .filter(|_| rng.random_bool(mask_prob))
            .collect();
        out.push(SslBatch {
            records: records.to_vec(),
            mip,
            msp,
            aap,
            attributes,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SslLosses {
    pub mip: f64,
    pub msp: f64,
    pub map: f64,
    pub aap: f64,
    pub total: f64,
}

/// Tape nodes of the four objectives; `None` when a term has no positions.
pub struct SslTerms {
    pub mip: Option<Var>,
    pub msp: Option<Var>,
    pub map: Option<Var>,
    pub aap: Option<Var>,
}

impl SslTerms {
    pub fn total(&self, tape: &mut Tape) -> Var {
        let parts: Vec<Var> = [self.mip, self.msp, self.map, self.aap].into_iter().flatten().collect();
        match parts.split_first() {
            None => tape.constant(Matrix::zeros(1, 1)),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &v| tape.add(acc, v)),
        }
    }
}

/// Multi-label targets with one row per position.
fn attribute_targets(rows: &[&[ConceptId]], k: usize) -> Matrix {
    let mut m = Matrix::zeros(rows.len(), k);
    for (r, attrs) in rows.iter().enumerate() {
        for &c in attrs.iter() {
            m.set(r, c, 1.0);
        }
    }
    m
}

fn masks(batches: &[SslBatch], pick: impl Fn(&SslBatch) -> Vec<usize>) -> Vec<Vec<bool>> {
    batches
        .iter()
        .map(|s| {
            let mut m = vec![false; s.records.len()];
            for t in pick(s) {
                m[t] = true;
            }
            m
        })
        .collect()
}

/// Builds the four objectives on `tape`. Each is a mean over its positions;
/// attribute terms skip positions whose concept has no predecessors.
pub fn ssl_terms(tape: &mut Tape, state: &ModelState, b: &Bindings, batches: &[SslBatch]) -> Result<SslTerms> {
    let k = state.num_concepts();
    let max_len = state.max_len();
    if let Some(long) = batches.iter().find(|s| s.records.len() > max_len) {
        return Err(Error::Shape(format!(
            "sequence of {} records exceeds max_len {max_len}",
            long.records.len()
        )));
    }
    let mut terms = SslTerms {
        mip: None,
        msp: None,
        map: None,
        aap: None,
    };
    let batches: Vec<&SslBatch> = batches.iter().filter(|s| !s.records.is_empty()).collect();
    if batches.is_empty() {
        return Ok(terms);
    }
    let owned: Vec<SslBatch> = batches.iter().map(|s| (*s).clone()).collect();
    let histories: Vec<&[LearningRecord]> = owned.iter().map(|s| s.records.as_slice()).collect();

    let any_item = owned.iter().any(|s| !s.mip.is_empty() || !s.aap.is_empty());
    if any_item {
        let item_masks = masks(&owned, |s| s.mip.clone());
        let batch = SeqBatch::new(&histories, k, max_len, Some(&item_masks))?;
        let fwd = state.forward_tape(tape, b, &batch, false);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut attr_rows = Vec::new();
        let mut attrs: Vec<&[ConceptId]> = Vec::new();
        for (bi, s) in owned.iter().enumerate() {
            for &t in &s.mip {
                rows.push(batch.layout.row(bi, t));
                targets.push(Some(s.records[t].concept));
                if !s.attributes[t].is_empty() {
                    attr_rows.push(batch.layout.row(bi, t));
                    attrs.push(&s.attributes[t]);
                }
            }
        }
        if !rows.is_empty() {
            let f = tape.gather_rows(fwd.encoded, rows);
            let logits = state.rec.logits_tape(tape, &b.rec, f);
            terms.mip = Some(rec_loss_tape(tape, logits, targets));
        }
        if !attr_rows.is_empty() {
            let n = attr_rows.len();
            let f = tape.gather_rows(fwd.encoded, attr_rows);
            let z = state.rec.map_logits_tape(tape, &b.rec, f);
            terms.map = Some(tape.bce_with_logits(z, attribute_targets(&attrs, k), vec![1.0 / n as f64; n]));
        }
        let mut aap_rows = Vec::new();
        let mut aap_attrs: Vec<&[ConceptId]> = Vec::new();
        for (bi, s) in owned.iter().enumerate() {
            for &t in s.aap.iter().filter(|&&t| !s.attributes[t].is_empty()) {
                aap_rows.push(batch.layout.row(bi, t));
                aap_attrs.push(&s.attributes[t]);
            }
        }
        if !aap_rows.is_empty() {
            let n = aap_rows.len();
            let x = tape.gather_rows(fwd.inputs, aap_rows);
            let z = state.rec.aap_logits_tape(tape, &b.rec, x);
            terms.aap = Some(tape.bce_with_logits(z, attribute_targets(&aap_attrs, k), vec![1.0 / n as f64; n]));
        }
    }

    if owned.iter().any(|s| s.msp.is_some()) {
        let seg_masks = masks(&owned, SslBatch::segment);
        let batch = SeqBatch::new(&histories, k, max_len, Some(&seg_masks))?;
        let fwd = state.forward_tape(tape, b, &batch, false);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (bi, s) in owned.iter().enumerate() {
            for t in s.segment() {
                rows.push(batch.layout.row(bi, t));
                targets.push(Some(s.records[t].concept));
            }
        }
        let f = tape.gather_rows(fwd.encoded, rows);
        let logits = state.rec.logits_tape(tape, &b.rec, f);
        terms.msp = Some(rec_loss_tape(tape, logits, targets));
    }
    Ok(terms)
}

/// The four objective values and their unweighted sum.
pub fn ssl_losses(state: &ModelState, batches: &[SslBatch]) -> Result<SslLosses> {
    let mut tape = Tape::new();
    let b = state.bind(&mut tape, FROZEN);
    let terms = ssl_terms(&mut tape, state, &b, batches)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    let mut out = SslLosses {
        mip: value(terms.mip),
        msp: value(terms.msp),
        map: value(terms.map),
        aap: value(terms.aap),
        total: 0.0,
    };
    out.total = out.mip + out.msp + out.map + out.aap;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 256,
            mask_prob: DEFAULT_MASK_PROB,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

/// Most recent `len` records.
fn tail(records: &[LearningRecord], len: usize) -> &[LearningRecord] {
    &records[records.len().saturating_sub(len)..]
}

/// Trains the recommender on the self-supervised objectives with fresh masks
/// each epoch. Returns the mean total loss per epoch.
pub fn pretrain_seq(state: &mut ModelState, seqs: &[LearnerSequence], cfg: &SslConfig) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be positive"));
    }
    let max_len = state.max_len();
    let windows: Vec<&[LearningRecord]> = seqs
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| tail(&s.records, max_len))
        .collect();
    if windows.is_empty() {
        return Err(Error::invalid("data", "no training sequences"));
    }
    let mut rng = rng::stream(cfg.seed, streams::SSL_SHUFFLE);
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.learning_rate).with_clip_norm(cfg.clip_norm);
    let train = Trainable {
        adapter: false,
        kt: false,
        rec: true,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = build_ssl_batches(&windows, &state.graph, cfg.mask_prob, rng.random())?;
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let group: Vec<SslBatch> = chunk.iter().map(|&i| batches[i].clone()).collect();
            let mut tape = Tape::new();
            let b = state.bind(&mut tape, train);
            let terms = ssl_terms(&mut tape, state, &b, &group)?;
            let loss = terms.total(&mut tape);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    stage: StageKind::SeqSsl.to_string(),
                    epoch,
                    step,
                });
            }
            total += value * chunk.len() as f64;
            tape.backward(loss);
            let grads = tape.grads_for(&b.rec);
            opt.step(state.rec.params_mut(), &grads);
        }
        let mean = total / windows.len() as f64;
        log::debug!("seq-ssl epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok(history)
}

/// Next-concept cross-entropy at every position of each sequence, averaged
/// over positions. Sequences keep their most recent `max_len + 1` records.
pub fn finetune_objective(
    tape: &mut Tape,
    state: &ModelState,
    b: &Bindings,
    seqs: &[&[LearningRecord]],
) -> Result<Var> {
    let windows: Vec<&[LearningRecord]> = seqs.iter().map(|s| tail(s, state.max_len() + 1)).collect();
    if windows.iter().any(|w| w.len() < 2) {
        return Err(Error::invalid("sequence", "fine-tuning needs at least 2 records per sequence"));
    }
    let inputs: Vec<&[LearningRecord]> = windows.iter().map(|w| &w[..w.len() - 1]).collect();
    let batch = SeqBatch::new(&inputs, state.num_concepts(), state.max_len(), None)?;
    let fwd = state.forward_tape(tape, b, &batch, true);
    let logits = state.rec.logits_tape(tape, &b.rec, fwd.encoded);
    let mut targets = vec![None; batch.layout.rows()];
    for (bi, w) in windows.iter().enumerate() {
        for t in 0..w.len() - 1 {
            targets[batch.layout.row(bi, t)] = Some(w[t + 1].concept);
        }
    }
    Ok(rec_loss_tape(tape, logits, targets))
}

fn positions(s: &[LearningRecord], max_len: usize) -> usize {
    tail(s, max_len + 1).len() - 1
}

/// Position-weighted mean fine-tuning loss over `seqs`, without updates.
pub fn finetune_loss(state: &ModelState, seqs: &[&[LearningRecord]], batch_size: usize) -> Result<f64> {
    let max_len = state.max_len();
    let seqs: Vec<&[LearningRecord]> = seqs.iter().copied().filter(|s| s.len() >= 2).collect();
    if seqs.is_empty() {
        return Err(Error::invalid("data", "no sequence has 2 or more records"));
    }
    let mut total = 0.0;
    let mut count = 0;
    for chunk in seqs.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let b = state.bind(&mut tape, FROZEN);
        let l = finetune_objective(&mut tape, state, &b, chunk)?;
        let n: usize = chunk.iter().map(|s| positions(s, max_len)).sum();
        total += tape.scalar(l) * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 256,
            patience: DEFAULT_PATIENCE,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    /// Training loss before the first update.
    pub initial_loss: f64,
    /// Validation MRR before the first update.
    pub initial_val_mrr: f64,
    pub losses: Vec<f64>,
    pub val_mrr: Vec<f64>,
    /// Epoch whose parameters were kept; `None` keeps the initial ones.
    pub best_epoch: Option<usize>,
    pub best_val_mrr: f64,
}

/// Trains adapter, tracer and recommender jointly on next-concept prediction,
/// keeping the parameters with the best validation MRR and stopping after
/// `patience` epochs without improvement.
pub fn finetune(state: &mut ModelState, data: &SplitDataset, cfg: &FinetuneConfig) -> Result<FinetuneReport> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be positive"));
    }
    let train = data.train_sequences();
    let seqs: Vec<&[LearningRecord]> = train
        .iter()
        .map(|s| s.records.as_slice())
        .filter(|s| s.len() >= 2)
        .collect();
    if seqs.is_empty() {
        return Err(Error::invalid("data", "no training sequence has 2 or more records"));
    }
    let max_len = state.max_len();
    let initial_loss = finetune_loss(state, &seqs, cfg.batch_size)?;
    let initial_val_mrr = validation_mrr(state, data)?;
    let mut report = FinetuneReport {
        initial_loss,
        initial_val_mrr,
        losses: Vec::new(),
        val_mrr: Vec::new(),
        best_epoch: None,
        best_val_mrr: initial_val_mrr,
    };
    let mut best = (state.adapter.clone(), state.kt.clone(), state.rec.clone());
    let mut rng = rng::stream(cfg.seed, streams::FINETUNE_SHUFFLE);
    let new_opt = || Optimizer::new(OptimizerKind::adam(), cfg.learning_rate).with_clip_norm(cfg.clip_norm);
    let (mut opt_a, mut opt_k, mut opt_r) = (new_opt(), new_opt(), new_opt());
    let all = Trainable {
        adapter: true,
        kt: true,
        rec: true,
    };
    let total_positions: usize = seqs.iter().map(|s| positions(s, max_len)).sum();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let group: Vec<&[LearningRecord]> = chunk.iter().map(|&i| seqs[i]).collect();
            let mut tape = Tape::new();
            let b = state.bind(&mut tape, all);
            let loss = finetune_objective(&mut tape, state, &b, &group)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    stage: StageKind::Finetune.to_string(),
                    epoch,
                    step,
                });
            }
            total += value * group.iter().map(|s| positions(s, max_len)).sum::<usize>() as f64;
            tape.backward(loss);
            let (ga, gk, gr) = (tape.grads_for(&b.adapter), tape.grads_for(&b.kt), tape.grads_for(&b.rec));
            opt_a.step(state.adapter.params_mut(), &ga);
            opt_k.step(state.kt.params_mut(), &gk);
            opt_r.step(state.rec.params_mut(), &gr);
        }
        let loss = total / total_positions as f64;
        let mrr = validation_mrr(state, data)?;
        log::debug!("finetune epoch {epoch}: loss {loss:.6}, val MRR {mrr:.4}");
        report.losses.push(loss);
        report.val_mrr.push(mrr);
        if mrr > report.best_val_mrr {
            report.best_val_mrr = mrr;
            report.best_epoch = Some(epoch);
            best = (state.adapter.clone(), state.kt.clone(), state.rec.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    (state.adapter, state.kt, state.rec) = best;
    state.trained = true;
    Ok(report)
}

/// Pipeline stages in their required order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageKind {
    Graph,
    Kt,
    SeqSsl,
    Finetune,
}

impl StageKind {
    pub const ALL: [StageKind; 4] = [StageKind::Graph, StageKind::Kt, StageKind::SeqSsl, StageKind::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Graph => "graph",
            StageKind::Kt => "kt",
            StageKind::SeqSsl => "seq-ssl",
            StageKind::Finetune => "finetune",
        }
    }

    pub fn default_checkpoint(self) -> &'static str {
        match self {
            StageKind::Graph => "graph.ckpt",
            StageKind::Kt => "kt.ckpt",
            StageKind::SeqSsl => "seq.ckpt",
            StageKind::Finetune => "model.ckpt",
        }
    }

    fn checkpoint_kind(self) -> &'static str {
        match self {
            StageKind::Graph => "adapter",
            StageKind::Kt => "ktrace",
            StageKind::SeqSsl => "seq",
            StageKind::Finetune => "model",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graph" => Ok(StageKind::Graph),
            "kt" => Ok(StageKind::Kt),
            "seq-ssl" | "seq" => Ok(StageKind::SeqSsl),
            "finetune" => Ok(StageKind::Finetune),
            other => Err(Error::invalid("stage", format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: StageKind,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub checkpoints_in: Vec<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub batch_size: usize,
    /// Edge-dropout ratio (graph).
    pub gamma: f64,
    /// Contrastive temperature (graph).
    pub tau: f64,
    /// Masking probability (seq-ssl).
    pub mask_prob: f64,
    /// Early-stopping patience (finetune).
    pub patience: usize,
}

impl StageConfig {
    pub fn new(stage: StageKind) -> Self {
        let graph = ContrastiveConfig::default();
        let kt = KtTrainConfig::default();
        let ssl = SslConfig::default();
        let ft = FinetuneConfig::default();
        let (epochs, lr) = match stage {
            StageKind::Graph => (graph.epochs, graph.learning_rate),
            StageKind::Kt => (kt.epochs, kt.learning_rate),
            StageKind::SeqSsl => (ssl.epochs, ssl.learning_rate),
            StageKind::Finetune => (ft.epochs, ft.learning_rate),
        };
        Self {
            stage,
            epochs,
            lr,
            seed: 0,
            checkpoints_in: Vec::new(),
            checkpoint_out: None,
            batch_size: 256,
            gamma: graph.gamma,
            tau: graph.tau,
            mask_prob: DEFAULT_MASK_PROB,
            patience: DEFAULT_PATIENCE,
        }
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn with_output(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint_out = Some(path.into());
        self
    }

    pub fn with_input(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoints_in.push(path.into());
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineOptions {
    /// Allow fine-tuning without pre-trained checkpoints.
    pub from_scratch: bool,
    /// Stages dropped from the run (ablations); their prerequisites are waived.
    pub skip: Vec<StageKind>,
    /// json-lines metrics destination.
    pub metrics_log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutcome {
    pub state: ModelState,
    pub metrics: Vec<MetricRecord>,
    pub finetune: Option<FinetuneReport>,
}

/// Rejects stage lists that repeat a stage or run one before an earlier stage.
pub fn check_order(stages: &[StageConfig]) -> Result<()> {
    for w in stages.windows(2) {
        if w[1].stage <= w[0].stage {
            return Err(Error::Pipeline(format!(
                "stage `{}` cannot run after `{}`; order is graph, kt, seq-ssl, finetune",
                w[1].stage, w[0].stage
            )));
        }
    }
    Ok(())
}

/// Stages a checkpoint accounts for.
fn stages_in(ckpt: &Checkpoint) -> Vec<StageKind> {
    match ckpt.kind.as_str() {
        "adapter" => vec![StageKind::Graph],
        "ktrace" => vec![StageKind::Kt],
        _ => StageKind::ALL
            .into_iter()
            .filter(|s| ckpt.meta.get(&format!("stage.{s}")).is_some_and(|&v| v != 0.0))
            .collect(),
    }
}

fn stage_checkpoint(state: &ModelState, stage: StageKind, done: &BTreeSet<StageKind>) -> Checkpoint {
    match stage {
        StageKind::Graph => state.adapter.to_checkpoint(),
        StageKind::Kt => state.kt.to_checkpoint(),
        _ => {
            let mut ckpt = Checkpoint::new(stage.checkpoint_kind());
            state.push_checkpoint(&mut ckpt);
            for s in done {
                ckpt.set_meta(&format!("stage.{s}"), 1.0);
            }
            ckpt
        }
    }
}

fn append_metrics(path: &Path, records: &[MetricRecord], truncate: bool) -> Result<()> {
    let file = if truncate {
        File::create(path)
    } else {
        File::options().append(true).create(true).open(path)
    }
    .map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn epoch_records(stage: StageKind, losses: &[f64], val: &[f64]) -> Vec<MetricRecord> {
    losses
        .iter()
        .enumerate()
        .map(|(epoch, &loss)| MetricRecord {
            stage: stage.to_string(),
            epoch,
            loss,
            val_metric: val.get(epoch).copied(),
        })
        .collect()
}

/// Runs `stages` in order on `state`. Each stage first loads its declared
/// checkpoints, then trains and optionally writes its own checkpoint.
pub fn run_pipeline(
    stages: &[StageConfig],
    data: &SplitDataset,
    mut state: ModelState,
    opts: &PipelineOptions,
) -> Result<PipelineOutcome> {
    let stages: Vec<&StageConfig> = stages.iter().filter(|s| !opts.skip.contains(&s.stage)).collect();
    check_order(&stages.iter().map(|s| (*s).clone()).collect::<Vec<_>>())?;
    if let Some(path) = &opts.metrics_log {
        append_metrics(path, &[], true)?;
    }
    let mut done = BTreeSet::new();
    let mut metrics = Vec::new();
    let mut finetune_report = None;
    for sc in stages {
        for path in &sc.checkpoints_in {
            let ckpt = Checkpoint::load(path)?;
            state.load_stage(&ckpt)?;
            done.extend(stages_in(&ckpt));
        }
        let records = match sc.stage {
            StageKind::Graph => {
                let cfg = ContrastiveConfig {
                    gamma: sc.gamma,
                    tau: sc.tau,
                    epochs: sc.epochs,
                    learning_rate: sc.lr,
                    seed: sc.seed,
                    ..Default::default()
                };
                let losses = pretrain_adapter(&mut state.adapter, &state.graph, &state.raw, &cfg)?;
                epoch_records(sc.stage, &losses, &[])
            }
            StageKind::Kt => {
                let cfg = KtTrainConfig {
                    epochs: sc.epochs,
                    learning_rate: sc.lr,
                    batch_size: sc.batch_size,
                    loss: KtLoss::SquaredError,
                    seed: sc.seed,
                    ..Default::default()
                };
                let losses = pretrain_kt(&mut state.kt, &data.train_sequences(), &cfg)?;
                epoch_records(sc.stage, &losses, &[])
            }
            StageKind::SeqSsl => {
                let cfg = SslConfig {
                    epochs: sc.epochs,
                    learning_rate: sc.lr,
                    batch_size: sc.batch_size,
                    mask_prob: sc.mask_prob,
                    seed: sc.seed,
                    ..Default::default()
                };
                let losses = pretrain_seq(&mut state, &data.train_sequences(), &cfg)?;
                epoch_records(sc.stage, &losses, &[])
            }
            StageKind::Finetune => {
                let missing: Vec<&str> = [StageKind::Graph, StageKind::Kt, StageKind::SeqSsl]
                    .into_iter()
                    .filter(|s| !done.contains(s) && !opts.skip.contains(s))
                    .map(StageKind::default_checkpoint)
                    .collect();
                if !missing.is_empty() && !opts.from_scratch {
                    return Err(Error::Pipeline(format!(
                        "finetune requires pre-trained checkpoints: {} (use --from-scratch to override)",
                        missing.join(", ")
                    )));
                }
                let cfg = FinetuneConfig {
                    epochs: sc.epochs,
                    learning_rate: sc.lr,
                    batch_size: sc.batch_size,
                    patience: sc.patience,
                    seed: sc.seed,
                    ..Default::default()
                };
                let report = finetune(&mut state, data, &cfg)?;
                let records = epoch_records(sc.stage, &report.losses, &report.val_mrr);
                finetune_report = Some(report);
                records
            }
        };
        done.insert(sc.stage);
        if let Some(path) = &sc.checkpoint_out {
            stage_checkpoint(&state, sc.stage, &done).save(path)?;
        }
        if let Some(path) = &opts.metrics_log {
            append_metrics(path, &records, false)?;
        }
        log::info!("stage {} finished after {} epochs", sc.stage, records.len());
        metrics.extend(records);
    }
    Ok(PipelineOutcome {
        state,
        metrics,
        finetune: finetune_report,
    })
}

/// Runs the pipeline once per edge-dropout ratio without writing outputs,
/// then reruns the ratio with the best validation MRR with outputs enabled.
/// Ties keep the earlier ratio.
pub fn select_gamma(
    grid: &[f64],
    stages: &[StageConfig],
    data: &SplitDataset,
    state: &ModelState,
    opts: &PipelineOptions,
) -> Result<(f64, PipelineOutcome)> {
    if grid.is_empty() {
        return Err(Error::invalid("gamma_grid", "grid is empty"));
    }
    let with_gamma = |gamma: f64, quiet: bool| -> Vec<StageConfig> {
        stages
            .iter()
            .map(|s| {
                let mut s = s.clone();
                if s.stage == StageKind::Graph {
                    s.gamma = gamma;
                }
                if quiet {
                    s.checkpoint_out = None;
                }
                s
            })
            .collect()
    };
    let quiet_opts = PipelineOptions {
        metrics_log: None,
        ..opts.clone()
    };
    let mut best: Option<(f64, f64)> = None;
    for &gamma in grid {
        let out = run_pipeline(&with_gamma(gamma, true), data, state.clone(), &quiet_opts)?;
        let mrr = out
            .finetune
            .as_ref()
            .map(|r| r.best_val_mrr)
            .ok_or_else(|| Error::Pipeline("gamma selection needs a finetune stage".into()))?;
        log::info!("gamma {gamma}: validation MRR {mrr:.4}");
        if best.is_none_or(|(_, m)| mrr > m) {
            best = Some((gamma, mrr));
        }
    }
    let (gamma, _) = best.expect("grid is nonempty");
    Ok((gamma, run_pipeline(&with_gamma(gamma, false), data, state.clone(), opts)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::split_leave_one_out;
    use crate::encoder::{EmbeddingTable, Stage};
    use crate::gradcheck;
    use crate::model::ModelConfig;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(k: usize) -> KnowledgeGraph {
        KnowledgeGraph::new(k, (0..k - 1).map(|i| (i, i + 1))).unwrap()
    }

    fn state(k: usize, seed: u64) -> ModelState {
        let raw = Matrix::uniform(k, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let cfg = ModelConfig {
            dim: 4,
            kt_hidden: 3,
            blocks: 1,
            heads: 2,
            max_len: 12,
            seed,
            ..Default::default()
        };
        ModelState::new(&cfg, EmbeddingTable::from_matrix(Stage::RawText, &raw).unwrap(), chain(k)).unwrap()
    }

    fn random_seqs(n: usize, k: usize, len: std::ops::RangeInclusive<usize>, seed: u64) -> Vec<LearnerSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let l = rng.random_range(len.clone());
                let pairs: Vec<(usize, bool)> = (0..l).map(|_| (rng.random_range(0..k), rng.random_bool(0.5))).collect();
                LearnerSequence::from_pairs(format!("u{i}"), &pairs)
            })
            .collect()
    }

    fn refs(seqs: &[LearnerSequence]) -> Vec<&[LearningRecord]> {
        seqs.iter().map(|s| s.records.as_slice()).collect()
    }

    #[test]
    fn masked_count_matches_binomial_expectation() {
        let g = chain(10);
        let seq = LearnerSequence::from_pairs("u", &(0..100).map(|i| (i % 10, true)).collect::<Vec<_>>());
        let p = 0.2;
        let seeds = 1000;
        let total: usize = (0..seeds)
            .map(|s| build_ssl_batches(&[&seq.records], &g, p, s).unwrap()[0].mip.len())
            .sum();
        let mean = total as f64 / seeds as f64;
        let se = (100.0 * p * (1.0 - p) / seeds as f64).sqrt();
        assert!((mean - 100.0 * p).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn batch_structure() {
        let g = chain(6);
        let seqs = random_seqs(200, 6, 1..=20, 3);
        let batches = build_ssl_batches(&refs(&seqs), &g, 0.3, 9).unwrap();
        assert_eq!(batches, build_ssl_batches(&refs(&seqs), &g, 0.3, 9).unwrap());
        for (s, b) in seqs.iter().zip(&batches) {
            let n = s.len();
            match b.msp {
                Some((a, e)) => {
                    assert!(e - a >= 2 && e - a <= MAX_SEGMENT.min(n / 2));
                    assert!(e <= n);
                    assert_eq!(b.segment(), (a..e).collect::<Vec<_>>());
                }
                None => assert!(n < 4),
            }
            assert!(b.mip.windows(2).all(|w| w[0] < w[1]));
            assert!(b.aap.iter().all(|t| !b.mip.contains(t)));
            for (t, r) in s.records.iter().enumerate() {
                assert_eq!(b.attributes[t], g.predecessors(r.concept));
            }
        }
        assert!(build_ssl_batches(&refs(&seqs), &g, 0.0, 1).is_err());
        assert!(build_ssl_batches(&refs(&seqs), &g, 1.0, 1).is_err());
    }

    fn empty_masks(seqs: &[LearnerSequence]) -> Vec<SslBatch> {
        let g = chain(8);
        build_ssl_batches(&refs(seqs), &g, 0.5, 0)
            .unwrap()
            .into_iter()
            .map(|mut b| {
                b.mip.clear();
                b.aap.clear();
                b.msp = None;
                b
            })
            .collect()
    }

    #[test]
    fn no_masked_positions_give_zero_losses() {
        let st = state(8, 1);
        let seqs = random_seqs(3, 8, 2..=6, 1);
        let l = ssl_losses(&st, &empty_masks(&seqs)).unwrap();
        assert_eq!(l, SslLosses::default());
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut st = state(8, 2);
        let out = st.rec.params().find("out").unwrap();
        *st.rec.params_mut().get_mut(out) = Matrix::zeros(8, st.rec.config().width());
        let seqs = random_seqs(1, 8, 5..=5, 4);
        let mut b = empty_masks(&seqs);
        b[0].mip = vec![2];
        let l = ssl_losses(&st, &b).unwrap();
        assert_abs_diff_eq!(l.mip, 8f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn total_is_sum_of_terms() {
        let st = state(8, 3);
        let g = chain(8);
        for seed in 0..5 {
            let seqs = random_seqs(4, 8, 2..=12, seed);
            let b = build_ssl_batches(&refs(&seqs), &g, 0.4, seed).unwrap();
            let l = ssl_losses(&st, &b).unwrap();
            assert!((l.total - (l.mip + l.msp + l.map + l.aap)).abs() <= 1e-9);
            let mut tape = Tape::new();
            let bb = st.bind(&mut tape, FROZEN);
            let terms = ssl_terms(&mut tape, &st, &bb, &b).unwrap();
            let total = terms.total(&mut tape);
            assert_abs_diff_eq!(tape.scalar(total), l.total, epsilon = 1e-9);
        }
    }

    #[test]
    fn attribute_terms_match_manual_bce() {
        let st = state(6, 4);
        let seqs = vec![LearnerSequence::from_pairs("u", &[(0, true), (3, false), (4, true), (1, true)])];
        let mut b = empty_masks(&seqs);
        b[0].mip = vec![1];
        b[0].aap = vec![0, 2];
        let l = ssl_losses(&st, &b).unwrap();
        // Position 0 (concept 0) has no predecessors, so only position 2 counts for AAP.
        let mut tape = Tape::new();
        let bb = st.bind(&mut tape, FROZEN);
        let batch = SeqBatch::new(&[&seqs[0].records], 6, 12, Some(&[vec![false, true, false, false]])).unwrap();
        let fwd = st.forward_tape(&mut tape, &bb, &batch, false);
        let x = tape.gather_rows(fwd.inputs, vec![2]);
        let z = st.rec.aap_logits_tape(&mut tape, &bb.rec, x);
        let manual: f64 = tape
            .value(z)
            .row(0)
            .iter()
            .enumerate()
            .map(|(c, &v)| {
                let y = if c == 3 { 1.0 } else { 0.0 };
                (1.0 + v.exp()).ln() - y * v
            })
            .sum();
        assert_abs_diff_eq!(l.aap, manual, epsilon = 1e-9);
        assert!(l.map > 0.0);
    }

    #[test]
    fn ssl_gradients_match_finite_differences() {
        let g = chain(6);
        for seed in 0..3 {
            let st = state(6, seed);
            let seqs = random_seqs(2, 6, 4..=6, seed + 20);
            let b = build_ssl_batches(&refs(&seqs), &g, 0.4, seed).unwrap();
            let mut tape = Tape::new();
            let bb = st.bind(
                &mut tape,
                Trainable {
                    adapter: false,
                    kt: false,
                    rec: true,
                },
            );
            let terms = ssl_terms(&mut tape, &st, &bb, &b).unwrap();
            let total = terms.total(&mut tape);
            tape.backward(total);
            let grads = tape.grads_for(&bb.rec);
            gradcheck::check_store(st.rec.params(), &grads, 1e-7, |p| {
                let mut s = st.clone();
                *s.rec.params_mut() = p.clone();
                ssl_losses(&s, &b).unwrap().total
            });
        }
    }

    #[test]
    fn finetune_loss_is_position_weighted() {
        let st = state(8, 5);
        let seqs = random_seqs(5, 8, 2..=9, 6);
        let r = refs(&seqs);
        let whole = finetune_loss(&st, &r, 100).unwrap();
        let split = finetune_loss(&st, &r, 2).unwrap();
        assert_abs_diff_eq!(whole, split, epsilon = 1e-9);
    }

    fn split(k: usize, seed: u64) -> SplitDataset {
        split_leave_one_out(&random_seqs(12, k, 5..=10, seed)).unwrap()
    }

    fn quick(stage: StageKind) -> StageConfig {
        StageConfig::new(stage).with_epochs(2).with_batch_size(4).with_lr(0.01)
    }

    #[test]
    fn out_of_order_and_missing_prerequisites_are_rejected() {
        let data = split(8, 1);
        let st = state(8, 1);
        let bad = [quick(StageKind::Kt), quick(StageKind::Graph)];
        let err = run_pipeline(&bad, &data, st.clone(), &PipelineOptions::default()).unwrap_err();
        assert!(err.to_string().contains("cannot run after"));
        let dup = [quick(StageKind::Kt), quick(StageKind::Kt)];
        assert!(run_pipeline(&dup, &data, st.clone(), &PipelineOptions::default()).is_err());
        let err = run_pipeline(&[quick(StageKind::Finetune)], &data, st.clone(), &PipelineOptions::default())
            .unwrap_err()
            .to_string();
        for name in ["graph.ckpt", "kt.ckpt", "seq.ckpt"] {
            assert!(err.contains(name), "{err}");
        }
        let opts = PipelineOptions {
            from_scratch: true,
            ..Default::default()
        };
        let out = run_pipeline(&[quick(StageKind::Finetune)], &data, st.clone(), &opts).unwrap();
        assert!(out.state.trained);
        let skip = PipelineOptions {
            skip: vec![StageKind::Graph],
            ..Default::default()
        };
        let stages = [quick(StageKind::Graph), quick(StageKind::Kt), quick(StageKind::SeqSsl), quick(StageKind::Finetune)];
        let out = run_pipeline(&stages, &data, st, &skip).unwrap();
        assert!(out.metrics.iter().all(|m| m.stage != "graph"));
    }

    #[test]
    fn checkpoints_chain_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n);
        let data = split(8, 2);
        let st = state(8, 2);
        let pre = [
            quick(StageKind::Graph).with_output(p("graph.ckpt")),
            quick(StageKind::Kt).with_output(p("kt.ckpt")),
            quick(StageKind::SeqSsl).with_output(p("seq.ckpt")),
        ];
        let opts = PipelineOptions {
            metrics_log: Some(p("metrics.jsonl")),
            ..Default::default()
        };
        let first = run_pipeline(&pre, &data, st.clone(), &opts).unwrap();
        let log = std::fs::read_to_string(p("metrics.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 6);
        let rec: MetricRecord = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!((rec.stage.as_str(), rec.epoch, rec.val_metric), ("graph", 0, None));

        // A fresh run that only loads the seq checkpoint satisfies every prerequisite.
        let ft = [quick(StageKind::Finetune).with_input(p("seq.ckpt")).with_output(p("model.ckpt"))];
        let resumed = run_pipeline(&ft, &data, st.clone(), &PipelineOptions::default()).unwrap();
        let chained = [
            pre[0].clone(),
            pre[1].clone(),
            pre[2].clone(),
            quick(StageKind::Finetune),
        ];
        let direct = run_pipeline(&chained, &data, st.clone(), &PipelineOptions::default()).unwrap();
        assert_eq!(resumed.state, direct.state);
        assert_eq!(first.state.rec, ModelState::from_checkpoint(&Checkpoint::load(&p("seq.ckpt")).unwrap()).unwrap().rec);
        let model = ModelState::from_checkpoint(&Checkpoint::load(&p("model.ckpt")).unwrap()).unwrap();
        assert!(model.trained);

        // Stage checkpoints alone also satisfy their prerequisites.
        let ft = [quick(StageKind::Finetune)
            .with_input(p("graph.ckpt"))
            .with_input(p("kt.ckpt"))];
        let err = run_pipeline(&ft, &data, st, &PipelineOptions::default()).unwrap_err();
        assert!(err.to_string().contains("seq.ckpt") && !err.to_string().contains("kt.ckpt"));
    }

    #[test]
    fn finetune_keeps_best_validation_parameters() {
        let data = split(8, 3);
        let mut st = state(8, 3);
        let cfg = FinetuneConfig {
            epochs: 6,
            learning_rate: 0.01,
            batch_size: 4,
            patience: 2,
            ..Default::default()
        };
        let report = finetune(&mut st, &data, &cfg).unwrap();
        assert!(report.losses.len() <= 6);
        let best = report.val_mrr.iter().copied().fold(report.initial_val_mrr, f64::max);
        assert_eq!(report.best_val_mrr, best);
        assert_abs_diff_eq!(validation_mrr(&st, &data).unwrap(), best, epsilon = 1e-12);
        // stopped runs end exactly `patience` epochs after the best one
        if report.losses.len() < 6 {
            let best_at = report.best_epoch.map_or(0, |e| e + 1);
            assert_eq!(report.losses.len(), best_at + 2);
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let data = split(8, 4);
        let stages = [quick(StageKind::Graph), quick(StageKind::Kt), quick(StageKind::SeqSsl), quick(StageKind::Finetune)];
        let a = run_pipeline(&stages, &data, state(8, 4), &PipelineOptions::default()).unwrap();
        let b = run_pipeline(&stages, &data, state(8, 4), &PipelineOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.state.to_checkpoint().to_bytes(), b.state.to_checkpoint().to_bytes());
    }

    #[test]
    fn gamma_grid_picks_best_validation_run() {
        let data = split(8, 5);
        let stages = [quick(StageKind::Graph), quick(StageKind::Kt), quick(StageKind::SeqSsl), quick(StageKind::Finetune)];
        let st = state(8, 5);
        let grid = [0.1, 0.3, 0.5];
        let (gamma, out) = select_gamma(&grid, &stages, &data, &st, &PipelineOptions::default()).unwrap();
        let score = |g: f64| {
            let s: Vec<StageConfig> = stages
                .iter()
                .cloned()
                .map(|mut s| {
                    s.gamma = g;
                    s
                })
                .collect();
            run_pipeline(&s, &data, st.clone(), &PipelineOptions::default())
                .unwrap()
                .finetune
                .unwrap()
                .best_val_mrr
        };
        let scores: Vec<f64> = grid.iter().map(|&g| score(g)).collect();
        let best = scores.iter().copied().fold(f64::MIN, f64::max);
        let first_best = grid[scores.iter().position(|&s| s == best).unwrap()];
        assert_eq!(gamma, first_best);
        assert_eq!(out.finetune.unwrap().best_val_mrr, best);
    }
}
