//! Ranking metrics, graph-consistency evaluation and embedding diagnostics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{ConceptId, LearnerSequence, LearningRecord, SplitDataset};
use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::kgraph::{consistency_ratio, learner_consistency_score, KnowledgeGraph};
use crate::model::ModelState;
use crate::recommender::{rank, rank_of};
use crate::rng::{self, streams};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedPrediction {
    pub learner: String,
    pub target: ConceptId,
    pub ranking: Vec<ConceptId>,
}

impl RankedPrediction {
    /// Checks that `ranking` is a permutation of `0..len` containing `target`.
    pub fn new(learner: impl Into<String>, target: ConceptId, ranking: Vec<ConceptId>) -> Result<Self> {
        let mut seen = vec![false; ranking.len()];
        for &c in &ranking {
            if c >= seen.len() || std::mem::replace(&mut seen[c], true) {
                return Err(Error::invalid("ranking", "not a permutation of the concept ids"));
            }
        }
        if target >= ranking.len() {
            return Err(Error::UnknownConcept(format!("target {target}")));
        }
        Ok(Self {
            learner: learner.into(),
            target,
            ranking,
        })
    }

    /// 1-based position of the target.
    pub fn rank(&self) -> usize {
        1 + self
            .ranking
            .iter()
            .position(|&c| c == self.target)
            .expect("target is in ranking")
    }
}

fn ranks(preds: &[RankedPrediction]) -> Result<Vec<usize>> {
    if preds.is_empty() {
        return Err(Error::invalid("predictions", "no predictions to score"));
    }
    Ok(preds.iter().map(RankedPrediction::rank).collect())
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k", "cutoff must be at least 1"));
    }
    Ok(())
}

pub fn hr_at_k(preds: &[RankedPrediction], k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(hr_from_ranks(&ranks(preds)?, k))
}

pub fn ndcg_at_k(preds: &[RankedPrediction], k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(ndcg_from_ranks(&ranks(preds)?, k))
}

pub fn mrr(preds: &[RankedPrediction]) -> Result<f64> {
    Ok(mrr_from_ranks(&ranks(preds)?))
}

pub fn hr_from_ranks(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Single relevant item: `1 / log2(1 + rank)` inside the cutoff.
pub fn ndcg_from_ranks(ranks: &[usize], k: usize) -> f64 {
    ranks
        .iter()
        .map(|&r| if r <= k { 1.0 / (1.0 + r as f64).log2() } else { 0.0 })
        .sum::<f64>()
        / ranks.len() as f64
}

pub fn mrr_from_ranks(ranks: &[usize]) -> f64 {
    ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64
}

/// Area under the ROC curve of `(score, label)` pairs, ties counted half.
/// `None` when either class is absent.
pub fn auc(preds: &[(f64, bool)]) -> Option<f64> {
    let mut sorted: Vec<(f64, bool)> = preds.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pos = sorted.iter().filter(|p| p.1).count();
    let neg = sorted.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // Sum of average ranks of positives (Mann-Whitney U).
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * sorted[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

/// Anything that scores the next concept after a history.
pub trait Scorer {
    fn num_concepts(&self) -> usize;
    /// One row of `K` logits per history.
    fn next_logits(&self, histories: &[&[LearningRecord]]) -> Result<Matrix>;
}

impl Scorer for ModelState {
    fn num_concepts(&self) -> usize {
        ModelState::num_concepts(self)
    }

    fn next_logits(&self, histories: &[&[LearningRecord]]) -> Result<Matrix> {
        ModelState::next_logits(self, histories)
    }
}

/// Uniform random scores; a fresh generator per call, so results depend only on the seed and batch.
pub struct RandomScorer {
    pub num_concepts: usize,
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn num_concepts(&self) -> usize {
        self.num_concepts
    }

    fn next_logits(&self, histories: &[&[LearningRecord]]) -> Result<Matrix> {
        let mut rng = rng::stream(self.seed, streams::RANDOM_BASELINE);
        let mut m = Matrix::zeros(histories.len(), self.num_concepts);
        for v in m.data_mut() {
            *v = rng.random();
        }
        Ok(m)
    }
}

/// Ranks of `targets` after each history.
pub fn target_ranks(scorer: &dyn Scorer, histories: &[&[LearningRecord]], targets: &[ConceptId]) -> Result<Vec<usize>> {
    let logits = scorer.next_logits(histories)?;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(i, &t)| rank_of(logits.row(i), t))
        .collect())
}

/// MRR of the validation records given the training histories.
pub fn validation_mrr(scorer: &dyn Scorer, split: &SplitDataset) -> Result<f64> {
    let histories: Vec<&[LearningRecord]> = split.learners.iter().map(|l| l.valid_history()).collect();
    let targets: Vec<ConceptId> = split.learners.iter().map(|l| l.valid.concept).collect();
    if histories.is_empty() {
        return Err(Error::invalid("split", "no learners"));
    }
    Ok(mrr_from_ranks(&target_ranks(scorer, &histories, &targets)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "HR@1")]
    pub hr_at_1: f64,
    #[serde(rename = "NDCG@5")]
    pub ndcg_at_5: f64,
    #[serde(rename = "MRR")]
    pub mrr: f64,
    pub consistency_all: f64,
    /// `None` when no learner's own history follows the graph more than half the time.
    pub consistency_adherent: Option<f64>,
    #[serde(rename = "DBI_raw")]
    pub dbi_raw: Option<f64>,
    #[serde(rename = "DBI_adapted")]
    pub dbi_adapted: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<RankedPrediction>,
    /// `(last observed concept, top-1 recommendation)` per learner.
    pub top1_pairs: Vec<(ConceptId, ConceptId)>,
    /// Learners whose observed history follows graph edges more than half the time.
    pub adherent: Vec<bool>,
}

/// Test-slice ranking metrics and top-1 graph consistency for any scorer.
pub fn evaluate_scorer(scorer: &dyn Scorer, split: &SplitDataset, graph: &KnowledgeGraph) -> Result<Evaluation> {
    if split.learners.is_empty() {
        return Err(Error::invalid("split", "no learners to evaluate"));
    }
    let histories: Vec<Vec<LearningRecord>> = split.learners.iter().map(|l| l.test_history()).collect();
    let refs: Vec<&[LearningRecord]> = histories.iter().map(Vec::as_slice).collect();
    let logits = scorer.next_logits(&refs)?;
    let mut predictions = Vec::with_capacity(refs.len());
    let mut top1_pairs = Vec::with_capacity(refs.len());
    let mut adherent = Vec::with_capacity(refs.len());
    for (i, l) in split.learners.iter().enumerate() {
        let ranking = rank(logits.row(i));
        top1_pairs.push((histories[i].last().expect("nonempty").concept, ranking[0]));
        let observed = LearnerSequence {
            learner: l.learner.clone(),
            records: histories[i].clone(),
        };
        adherent.push(learner_consistency_score(graph, &observed)? > 0.5);
        predictions.push(RankedPrediction::new(l.learner.clone(), l.test.concept, ranking)?);
    }
    let adherent_pairs: Vec<(ConceptId, ConceptId)> = top1_pairs
        .iter()
        .zip(&adherent)
        .filter(|(_, &a)| a)
        .map(|(p, _)| *p)
        .collect();
    let report = EvalReport {
        hr_at_1: hr_at_k(&predictions, 1)?,
        ndcg_at_5: ndcg_at_k(&predictions, 5)?,
        mrr: mrr(&predictions)?,
        consistency_all: consistency_ratio(graph, &top1_pairs)?,
        consistency_adherent: if adherent_pairs.is_empty() {
            None
        } else {
            Some(consistency_ratio(graph, &adherent_pairs)?)
        },
        dbi_raw: None,
        dbi_adapted: None,
    };
    Ok(Evaluation {
        report,
        predictions,
        top1_pairs,
        adherent,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Cluster count for the DBI diagnostics; `None` uses `round(sqrt(K))`.
    pub clusters: Option<usize>,
    pub seed: u64,
}

/// Full report for a fine-tuned model, including raw vs adapted DBI.
pub fn evaluate_model(
    state: &ModelState,
    split: &SplitDataset,
    graph: &KnowledgeGraph,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    if !state.trained {
        return Err(Error::Pipeline("model has not been fine-tuned".into()));
    }
    let mut eval = evaluate_scorer(state, split, graph)?;
    let k = opts
        .clusters
        .unwrap_or_else(|| ((state.num_concepts() as f64).sqrt().round() as usize).max(2));
    let er = embedding_report(&state.raw, &state.adapted_table()?, k, opts.seed)?;
    eval.report.dbi_raw = Some(er.dbi_raw);
    eval.report.dbi_adapted = Some(er.dbi_adapted);
    Ok(eval)
}

fn rows64(table: &EmbeddingTable) -> Vec<Vec<f64>> {
    table.rows().map(|r| r.iter().map(|&x| f64::from(x)).collect()).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroids(points: &[Vec<f64>], assign: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assign) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            for x in s.iter_mut() {
                *x /= n as f64;
            }
        }
    }
    (sums, counts)
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

pub const KMEANS_MAX_ITERS: usize = 100;

/// Lloyd's algorithm from a seeded farthest-point start. Returns one cluster
/// index per row.
pub fn kmeans(table: &EmbeddingTable, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = table.len();
    if k < 2 {
        return Err(Error::invalid("k", "need at least 2 clusters"));
    }
    if k > n {
        return Err(Error::invalid("k", format!("{k} clusters for {n} points")));
    }
    let points = rows64(table);
    let mut rng = rng::stream(seed, streams::KMEANS);
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let far = (0..n)
            .max_by(|&a, &b| min_d[a].total_cmp(&min_d[b]).then(b.cmp(&a)))
            .expect("nonempty");
        centers.push(points[far].clone());
        for (d, p) in min_d.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        let (means, counts) = centroids(&points, &assign, k);
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = means[c].clone();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok(assign)
}

/// Davies-Bouldin index with Euclidean scatter and centroid distances.
pub fn dbi(table: &EmbeddingTable, assignments: &[usize]) -> Result<f64> {
    if assignments.len() != table.len() {
        return Err(Error::Shape(format!(
            "{} assignments for {} rows",
            assignments.len(),
            table.len()
        )));
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::invalid("assignments", "need at least 2 clusters"));
    }
    let points = rows64(table);
    let (cents, counts) = centroids(&points, assignments, k);
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid("assignments", format!("cluster {empty} is empty")));
    }
    let mut scatter = vec![0.0; k];
    for (p, &c) in points.iter().zip(assignments) {
        scatter[c] += sq_dist(p, &cents[c]).sqrt();
    }
    for (s, &n) in scatter.iter_mut().zip(&counts) {
        *s /= n as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in (0..k).filter(|&j| j != i) {
            let m = sq_dist(&cents[i], &cents[j]).sqrt();
            if m == 0.0 {
                return Err(Error::invalid("assignments", format!("clusters {i} and {j} share a centroid")));
            }
            worst = worst.max((scatter[i] + scatter[j]) / m);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterDiagnostics {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub dbi: f64,
}

pub fn cluster_diagnostics(table: &EmbeddingTable, k: usize, seed: u64) -> Result<ClusterDiagnostics> {
    let assignments = kmeans(table, k, seed)?;
    let dbi = dbi(table, &assignments)?;
    Ok(ClusterDiagnostics { k, assignments, dbi })
}

/// Raw vs adapted DBI under the same clustering policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReport {
    pub k: usize,
    pub seed: u64,
    #[serde(rename = "DBI_raw")]
    pub dbi_raw: f64,
    #[serde(rename = "DBI_adapted")]
    pub dbi_adapted: f64,
}

impl EmbeddingReport {
    /// Two-row comparison table.
    pub fn to_table(&self) -> String {
        format!(
            "representation\tDBI\nraw\t{:.4}\nadapted\t{:.4}\n",
            self.dbi_raw, self.dbi_adapted
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("embedding report: {e}")))
    }
}

pub fn embedding_report(raw: &EmbeddingTable, adapted: &EmbeddingTable, k: usize, seed: u64) -> Result<EmbeddingReport> {
    if raw.len() != adapted.len() {
        return Err(Error::Shape(format!(
            "raw table has {} concepts, adapted has {}",
            raw.len(),
            adapted.len()
        )));
    }
    Ok(EmbeddingReport {
        k,
        seed,
        dbi_raw: cluster_diagnostics(raw, k, seed)?.dbi,
        dbi_adapted: cluster_diagnostics(adapted, k, seed)?.dbi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::split_leave_one_out;
    use crate::encoder::Stage;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pred_at(rank: usize, n: usize) -> RankedPrediction {
        // target 0 placed at `rank`
        let mut ranking: Vec<usize> = (1..n).collect();
        ranking.insert(rank - 1, 0);
        RankedPrediction::new("u", 0, ranking).unwrap()
    }

    #[test]
    fn metric_examples() {
        let ones: Vec<_> = (0..4).map(|_| pred_at(1, 10)).collect();
        assert_eq!(hr_at_k(&ones, 1).unwrap(), 1.0);
        assert_eq!(mrr(&ones).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&ones, 5).unwrap(), 1.0);
        assert_eq!(hr_at_k(&[pred_at(2, 10)], 1).unwrap(), 0.0);
        let mixed = [pred_at(1, 10), pred_at(3, 10), pred_at(7, 10)];
        assert_abs_diff_eq!(hr_at_k(&mixed, 5).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ndcg_at_k(&[pred_at(3, 10)], 5).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(ndcg_at_k(&[pred_at(6, 10)], 5).unwrap(), 0.0);
        let m = mrr(&[pred_at(1, 10), pred_at(2, 10), pred_at(4, 10)]).unwrap();
        assert_abs_diff_eq!(m, 1.75 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(mrr(&[pred_at(10, 10)]).unwrap(), 0.1, epsilon = 1e-15);
        assert!(hr_at_k(&[], 1).is_err());
        assert!(ndcg_at_k(&[], 1).is_err());
        assert!(mrr(&[]).is_err());
        assert!(hr_at_k(&ones, 0).is_err());
    }

    #[test]
    fn prediction_validation() {
        assert!(RankedPrediction::new("u", 0, vec![1, 1, 0]).is_err());
        assert!(RankedPrediction::new("u", 3, vec![1, 2, 0]).is_err());
        assert!(RankedPrediction::new("u", 0, vec![3, 2, 0]).is_err());
    }

    proptest! {
        #[test]
        fn hr_monotone_and_ndcg_hr_agree(ranks in prop::collection::vec(1usize..40, 1..20), k in 1usize..40) {
            prop_assert!(hr_from_ranks(&ranks, k) <= hr_from_ranks(&ranks, k + 1));
            for &r in &ranks {
                prop_assert_eq!(ndcg_from_ranks(&[r], k) > 0.0, hr_from_ranks(&[r], k) > 0.0);
            }
        }
    }

    #[test]
    fn auc_matches_pairwise_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let preds: Vec<(f64, bool)> = (0..30)
                .map(|_| ((rng.random_range(0..8) as f64) / 8.0, rng.random_bool(0.4)))
                .collect();
            let (mut w, mut n) = (0.0, 0.0);
            for a in preds.iter().filter(|p| p.1) {
                for b in preds.iter().filter(|p| !p.1) {
                    n += 1.0;
                    w += if a.0 > b.0 { 1.0 } else if a.0 == b.0 { 0.5 } else { 0.0 };
                }
            }
            match auc(&preds) {
                Some(v) => assert_abs_diff_eq!(v, w / n, epsilon = 1e-12),
                None => assert_eq!(n, 0.0),
            }
        }
    }

    fn table(rows: Vec<Vec<f64>>) -> EmbeddingTable {
        EmbeddingTable::from_matrix(Stage::RawText, &Matrix::from_rows(&rows)).unwrap()
    }

    #[test]
    fn kmeans_recovers_separated_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows = Vec::new();
        let mut planted = Vec::new();
        for g in 0..2 {
            for _ in 0..10 {
                let c = if g == 0 { -20.0 } else { 20.0 };
                rows.push(vec![c + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
                planted.push(g);
            }
        }
        let t = table(rows.clone());
        let a = kmeans(&t, 2, 7).unwrap();
        let same = |x: usize, y: usize| a[x] == a[y];
        for i in 0..20 {
            for j in 0..20 {
                assert_eq!(same(i, j), planted[i] == planted[j]);
            }
        }
        // brute-force: every point is closest to its own cluster mean
        let (cents, _) = centroids(&rows, &a, 2);
        for (p, &c) in rows.iter().zip(&a) {
            assert_eq!(nearest(p, &cents), c);
        }
        assert_eq!(kmeans(&t, 2, 7).unwrap(), a);
    }

    #[test]
    fn kmeans_edge_cases() {
        let t = table(vec![vec![0.0, 1.0], vec![3.0, 1.0], vec![7.0, -2.0], vec![3.0, 1.0]]);
        assert!(kmeans(&t, 5, 0).is_err());
        let a = kmeans(&t, 2, 0).unwrap();
        assert_eq!(a[1], a[3]);
        let distinct = table(vec![vec![0.0], vec![5.0], vec![-4.0]]);
        let a = kmeans(&distinct, 3, 1).unwrap();
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
        let (cents, _) = centroids(&rows64(&distinct), &a, 3);
        for (p, &c) in rows64(&distinct).iter().zip(&a) {
            assert_eq!(sq_dist(p, &cents[c]), 0.0);
        }
    }

    #[test]
    fn dbi_examples() {
        let t = table(vec![vec![0.0], vec![1.0]]);
        assert_eq!(dbi(&t, &[0, 1]).unwrap(), 0.0);
        let eps = 0.1;
        let pairs = table(vec![vec![-eps], vec![eps], vec![10.0 - eps], vec![10.0 + eps]]);
        // tables hold f32
        assert_abs_diff_eq!(dbi(&pairs, &[0, 0, 1, 1]).unwrap(), 0.02, epsilon = 1e-6);
        assert!(dbi(&pairs, &[0, 0, 2, 2]).is_err());
        assert!(dbi(&pairs, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn dbi_translation_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Matrix::uniform(12, 3, 2.0, &mut rng);
        let assign: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let base = dbi(&EmbeddingTable::from_matrix(Stage::RawText, &m).unwrap(), &assign).unwrap();
        let shifted = m.map(|x| x + 3.0);
        let scaled = m.scale(2.5);
        for t in [shifted, scaled] {
            let v = dbi(&EmbeddingTable::from_matrix(Stage::RawText, &t).unwrap(), &assign).unwrap();
            assert_abs_diff_eq!(v, base, epsilon = 1e-5);
        }
    }

    #[test]
    fn embedding_report_properties() {
        let t = table((0..8).map(|i| vec![i as f64, (i % 3) as f64]).collect());
        let r = embedding_report(&t, &t, 2, 1).unwrap();
        assert_eq!(r.dbi_raw, r.dbi_adapted);
        assert_eq!(EmbeddingReport::from_json(&r.to_json()).unwrap(), r);
        assert!(r.to_table().contains("adapted"));
        let short = table(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert!(embedding_report(&t, &short, 2, 1).is_err());
    }

    /// Puts a fixed concept list first; the target lookup uses the history length.
    struct FixedScorer {
        k: usize,
        favored: std::collections::HashMap<usize, ConceptId>,
        worst: bool,
    }

    impl Scorer for FixedScorer {
        fn num_concepts(&self) -> usize {
            self.k
        }
        fn next_logits(&self, histories: &[&[LearningRecord]]) -> Result<Matrix> {
            let mut m = Matrix::zeros(histories.len(), self.k);
            for (i, h) in histories.iter().enumerate() {
                let t = self.favored[&h.len()];
                for c in 0..self.k {
                    let v = if c == t { 1.0 } else { 0.5 + c as f64 * 1e-3 };
                    m.set(i, c, if self.worst { -v } else { v });
                }
            }
            Ok(m)
        }
    }

    fn toy_split() -> (SplitDataset, KnowledgeGraph) {
        let g = KnowledgeGraph::new(6, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]).unwrap();
        let seqs: Vec<LearnerSequence> = [vec![0, 1, 2, 3], vec![5, 0, 3, 1, 4], vec![2, 3, 4, 5, 1, 0]]
            .iter()
            .enumerate()
            .map(|(i, c)| LearnerSequence::from_pairs(format!("u{i}"), &c.iter().map(|&x| (x, true)).collect::<Vec<_>>()))
            .collect();
        (split_leave_one_out(&seqs).unwrap(), g)
    }

    #[test]
    fn oracle_and_anti_oracle() {
        let (split, g) = toy_split();
        let favored = split.learners.iter().map(|l| (l.test_history().len(), l.test.concept)).collect();
        let oracle = FixedScorer {
            k: 6,
            favored,
            worst: false,
        };
        let ev = evaluate_scorer(&oracle, &split, &g).unwrap();
        assert_eq!((ev.report.hr_at_1, ev.report.ndcg_at_5, ev.report.mrr), (1.0, 1.0, 1.0));
        let anti = FixedScorer { worst: true, ..oracle };
        let ev = evaluate_scorer(&anti, &split, &g).unwrap();
        assert_eq!(ev.report.hr_at_1, 0.0);
        assert_abs_diff_eq!(ev.report.mrr, 1.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn report_agrees_with_standalone_metrics_and_brute_force_consistency() {
        let (split, g) = toy_split();
        let ev = evaluate_scorer(&RandomScorer { num_concepts: 6, seed: 3 }, &split, &g).unwrap();
        assert_abs_diff_eq!(ev.report.hr_at_1, hr_at_k(&ev.predictions, 1).unwrap(), epsilon = 1e-9);
        assert_abs_diff_eq!(ev.report.ndcg_at_5, ndcg_at_k(&ev.predictions, 5).unwrap(), epsilon = 1e-9);
        assert_abs_diff_eq!(ev.report.mrr, mrr(&ev.predictions).unwrap(), epsilon = 1e-9);
        let hits = ev
            .top1_pairs
            .iter()
            .filter(|(a, b)| g.edges().contains(&(*a, *b)) || g.edges().contains(&(*b, *a)))
            .count();
        assert_eq!(ev.report.consistency_all, hits as f64 / 3.0);
        // learners 0 and 2 follow the chain in most steps, learner 1 does not
        assert_eq!(ev.adherent, vec![true, false, true]);
        let round = EvalReport::from_json(&ev.report.to_json()).unwrap();
        assert_eq!(round, ev.report);
        let v: serde_json::Value = serde_json::from_str(&ev.report.to_json()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(
            keys,
            ["HR@1", "NDCG@5", "MRR", "consistency_all", "consistency_adherent", "DBI_raw", "DBI_adapted"]
        );
    }

    #[test]
    fn untrained_model_is_rejected() {
        let (split, g) = toy_split();
        let raw = table((0..6).map(|i| vec![i as f64, 1.0, -(i as f64)]).collect());
        let cfg = crate::model::ModelConfig {
            dim: 2,
            kt_hidden: 2,
            blocks: 1,
            max_len: 8,
            ..Default::default()
        };
        let state = ModelState::new(&cfg, raw, g.clone()).unwrap();
        assert!(matches!(
            evaluate_model(&state, &split, &g, &EvalOptions::default()),
            Err(Error::Pipeline(_))
        ));
    }

    #[test]
    fn random_rankings_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut preds = Vec::new();
        for _ in 0..50 {
            let mut r: Vec<usize> = (0..12).collect();
            r.shuffle(&mut rng);
            preds.push(RankedPrediction::new("u", rng.random_range(0..12), r).unwrap());
        }
        let h = hr_at_k(&preds, 3).unwrap();
        assert!((0.0..=1.0).contains(&h));
    }
}
