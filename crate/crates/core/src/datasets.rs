//! Learner sequences: file ingest, synthetic generation and leave-one-out splits.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgraph::KnowledgeGraph;
use crate::rng::{self, streams};

pub type ConceptId = usize;

/// Sequences shorter than this are dropped on load; leave-one-out needs three slots.
pub const MIN_SEQUENCE_LEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningRecord {
    pub concept: ConceptId,
    pub correct: u8,
    pub step: usize,
}

impl LearningRecord {
    pub fn new(concept: ConceptId, correct: bool, step: usize) -> Self {
        Self {
            concept,
            correct: u8::from(correct),
            step,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.correct == 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerSequence {
    pub learner: String,
    pub records: Vec<LearningRecord>,
}

impl LearnerSequence {
    /// Builds a sequence from `(concept, correct)` pairs, numbering steps from 0.
    pub fn from_pairs(learner: impl Into<String>, pairs: &[(ConceptId, bool)]) -> Self {
        Self {
            learner: learner.into(),
            records: pairs
                .iter()
                .enumerate()
                .map(|(i, &(c, ok))| LearningRecord::new(c, ok, i))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn concepts(&self) -> impl Iterator<Item = ConceptId> + '_ {
        self.records.iter().map(|r| r.concept)
    }
}

/// Bidirectional mapping between concept names and contiguous ids,
/// assigned in first-appearance order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConceptVocab {
    names: Vec<String>,
    index: HashMap<String, ConceptId>,
}

impl ConceptVocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::new();
        for n in names {
            v.intern(&n.into());
        }
        v
    }

    pub fn intern(&mut self, name: &str) -> ConceptId {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ConceptId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ConceptId) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Sidecar json object `{concept_name: id}` in id order.
    pub fn to_json(&self) -> String {
        let map: serde_json::Map<String, serde_json::Value> = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), serde_json::Value::from(i)))
            .collect();
        serde_json::to_string_pretty(&map).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: HashMap<String, usize> =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("concept id map: {e}")))?;
        let mut names = vec![None; map.len()];
        for (name, id) in map {
            let slot = names
                .get_mut(id)
                .ok_or_else(|| Error::Format(format!("concept id {id} out of range")))?;
            if slot.is_some() {
                return Err(Error::Format(format!("duplicate concept id {id}")));
            }
            *slot = Some(name);
        }
        Ok(Self::from_names(names.into_iter().map(Option::unwrap)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SequenceFormat {
    Tabular,
    JsonLines,
}

impl SequenceFormat {
    /// `.jsonl`/`.json` files are json-lines, everything else tabular.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => SequenceFormat::JsonLines,
            _ => SequenceFormat::Tabular,
        }
    }
}

impl FromStr for SequenceFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular" | "csv" => Ok(SequenceFormat::Tabular),
            "json-lines" | "jsonl" => Ok(SequenceFormat::JsonLines),
            other => Err(Error::invalid("format", format!("unknown sequence format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadedSequences {
    pub sequences: Vec<LearnerSequence>,
    pub vocab: ConceptVocab,
    /// Learners dropped during loading, with the reason.
    pub warnings: Vec<String>,
}

struct RawRow {
    line: u64,
    learner: String,
    concept: String,
    correct: String,
    step: i64,
}

#[derive(Deserialize)]
struct CsvRow {
    learner_id: String,
    concept_name: String,
    correct: String,
    step: String,
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_tabular(path: &Path) -> Result<Vec<RawRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(path, 1, format!("{other:?}")),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let mut rows = Vec::new();
    for result in reader.records() {
        let record = result.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row: CsvRow = record
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(path, line, e.to_string()))?;
        let step = row
            .step
            .parse::<i64>()
            .map_err(|_| parse_err(path, line, format!("step `{}` is not an integer", row.step)))?;
        if row.learner_id.is_empty() || row.concept_name.is_empty() {
            return Err(parse_err(path, line, "empty learner_id or concept_name"));
        }
        rows.push(RawRow {
            line,
            learner: row.learner_id,
            concept: row.concept_name,
            correct: row.correct,
            step,
        });
    }
    Ok(rows)
}

fn read_json_lines(path: &Path) -> Result<Vec<RawRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse_err(path, line_no, e.to_string()))?;
        let text = |key: &str| -> Result<String> {
            match v.get(key) {
                Some(serde_json::Value::String(s)) if !s.is_empty() => Ok(s.clone()),
                Some(serde_json::Value::Number(n)) => Ok(n.to_string()),
                _ => Err(parse_err(path, line_no, format!("missing or invalid `{key}`"))),
            }
        };
        let step = v
            .get("step")
            .and_then(serde_json::Value::as_i64)
            .ok_or_else(|| parse_err(path, line_no, "missing or invalid `step`"))?;
        let correct = match v.get("correct") {
            Some(serde_json::Value::Bool(b)) => u8::from(*b).to_string(),
            Some(_) => text("correct")?,
            None => return Err(parse_err(path, line_no, "missing `correct`")),
        };
        rows.push(RawRow {
            line: line_no,
            learner: text("learner_id")?,
            concept: text("concept_name")?,
            correct,
            step,
        });
    }
    Ok(rows)
}

/// Loads learner sequences, grouping rows by learner (first-appearance order)
/// and sorting each learner's rows by `step`. Learners with an invalid
/// correctness value or fewer than [`MIN_SEQUENCE_LEN`] records are dropped
/// with a warning.
pub fn load_sequences(path: &Path, format: SequenceFormat) -> Result<LoadedSequences> {
    let rows = match format {
        SequenceFormat::Tabular => read_tabular(path)?,
        SequenceFormat::JsonLines => read_json_lines(path)?,
    };
    let mut vocab = ConceptVocab::new();
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<(i64, ConceptId, Option<u8>, u64)>> = HashMap::new();
    for row in rows {
        let concept = vocab.intern(&row.concept);
        let correct = match row.correct.as_str() {
            "0" => Some(0),
            "1" => Some(1),
            _ => None,
        };
        let entry = grouped.entry(row.learner.clone()).or_insert_with(|| {
            order.push(row.learner.clone());
            Vec::new()
        });
        entry.push((row.step, concept, correct, row.line));
    }

    let mut sequences = Vec::new();
    let mut warnings = Vec::new();
    for learner in order {
        let mut rows = grouped.remove(&learner).unwrap_or_default();
        if let Some(bad) = rows.iter().find(|r| r.2.is_none()) {
            let msg = format!("learner {learner}: correctness outside {{0,1}} at line {}, learner dropped", bad.3);
            warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        if rows.len() < MIN_SEQUENCE_LEN {
            let msg = format!(
                "learner {learner}: {} records is below the minimum of {MIN_SEQUENCE_LEN}, learner dropped",
                rows.len()
            );
            warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        rows.sort_by_key(|r| r.0);
        let records = rows
            .iter()
            .enumerate()
            .map(|(i, r)| LearningRecord {
                concept: r.1,
                correct: r.2.unwrap(),
                step: i,
            })
            .collect();
        sequences.push(LearnerSequence { learner, records });
    }
    Ok(LoadedSequences {
        sequences,
        vocab,
        warnings,
    })
}

pub fn write_sequences(
    seqs: &[LearnerSequence],
    vocab: &ConceptVocab,
    path: &Path,
    format: SequenceFormat,
) -> Result<()> {
    let name = |c: ConceptId| -> Result<&str> {
        vocab
            .name(c)
            .ok_or_else(|| Error::UnknownConcept(c.to_string()))
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    match format {
        SequenceFormat::Tabular => {
            writeln!(out, "learner_id,concept_name,correct,step").map_err(io)?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            for s in seqs {
                for r in &s.records {
                    let step = r.step.to_string();
                    let correct = r.correct.to_string();
                    w.write_record([s.learner.as_str(), name(r.concept)?, &correct, &step])
                        .map_err(|e| Error::Format(e.to_string()))?;
                }
            }
            w.flush().map_err(io)?;
        }
        SequenceFormat::JsonLines => {
            for s in seqs {
                for r in &s.records {
                    let obj = serde_json::json!({
                        "learner_id": s.learner,
                        "concept_name": name(r.concept)?,
                        "correct": r.correct,
                        "step": r.step,
                    });
                    writeln!(out, "{obj}").map_err(io)?;
                }
            }
            out.flush().map_err(io)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_concepts: usize,
    pub num_learners: usize,
    pub walk_bias: f64,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Fixed starting concept; uniform when `None`.
    pub start: Option<ConceptId>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_concepts: 30,
            num_learners: 200,
            walk_bias: 0.8,
            seed: 0,
            min_len: 10,
            max_len: 40,
            start: None,
        }
    }
}

/// Probability a learner answers correctly after `exposures` earlier encounters.
pub fn synthetic_mastery(exposures: u32) -> f64 {
    1.0 - 0.5f64.powi(1 + exposures as i32)
}

/// Biased random walks over `graph`: each step follows a uniformly chosen
/// successor with probability `walk_bias`, else jumps to a uniform concept.
/// Correctness is Bernoulli([`synthetic_mastery`]) of the learner's exposure count.
pub fn generate_synthetic(cfg: &SyntheticConfig, graph: &KnowledgeGraph) -> Result<Vec<LearnerSequence>> {
    if !(0.0..=1.0).contains(&cfg.walk_bias) {
        return Err(Error::invalid("walk_bias", "must lie in [0, 1]"));
    }
    if graph.num_nodes() == 0 {
        return Err(Error::invalid("graph", "graph has no nodes"));
    }
    if cfg.num_concepts < graph.num_nodes() {
        return Err(Error::invalid(
            "num_concepts",
            format!("{} is smaller than the graph's {} nodes", cfg.num_concepts, graph.num_nodes()),
        ));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::invalid("min_len", "need 1 <= min_len <= max_len"));
    }
    if let Some(s) = cfg.start {
        if s >= cfg.num_concepts {
            return Err(Error::invalid("start", format!("concept {s} out of range")));
        }
    }
    let k = cfg.num_concepts;
    let mut rng = rng::stream(cfg.seed, streams::SYNTHETIC);
    let mut out = Vec::with_capacity(cfg.num_learners);
    let width = cfg.num_learners.max(1).to_string().len();
    for learner in 0..cfg.num_learners {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut exposures = vec![0u32; k];
        let mut records = Vec::with_capacity(len);
        let mut current = cfg.start.unwrap_or_else(|| rng.random_range(0..k));
        for step in 0..len {
            if step > 0 {
                let succ = if current < graph.num_nodes() {
                    graph.successors(current)
                } else {
                    &[]
                };
                let biased = rng.random_bool(cfg.walk_bias);
                current = match (biased, succ.choose(&mut rng)) {
                    (true, Some(&next)) => next,
                    _ => rng.random_range(0..k),
                };
            }
            let correct = rng.random_bool(synthetic_mastery(exposures[current]));
            exposures[current] += 1;
            records.push(LearningRecord::new(current, correct, step));
        }
        out.push(LearnerSequence {
            learner: format!("u{learner:0width$}"),
            records,
        });
    }
    Ok(out)
}

/// Random digraph where every node has exactly `out_degree` distinct successors.
pub fn planted_graph(num_concepts: usize, out_degree: usize, seed: u64) -> Result<KnowledgeGraph> {
    if out_degree >= num_concepts {
        return Err(Error::invalid("out_degree", "must be smaller than the concept count"));
    }
    let mut rng = rng::stream(seed, streams::GRAPH);
    let mut edges = Vec::new();
    for from in 0..num_concepts {
        let others: Vec<usize> = (0..num_concepts).filter(|&c| c != from).collect();
        for &to in others.choose_multiple(&mut rng, out_degree) {
            edges.push((from, to));
        }
    }
    KnowledgeGraph::new(num_concepts, edges)
}

/// `clusters` equal groups; every intra-group ordered pair is an edge with
/// probability `density`, and no edge crosses groups. Returns the graph and
/// each node's group.
pub fn clustered_graph(
    num_concepts: usize,
    clusters: usize,
    density: f64,
    seed: u64,
) -> Result<(KnowledgeGraph, Vec<usize>)> {
    if clusters == 0 || clusters > num_concepts {
        return Err(Error::invalid("clusters", "need 1 <= clusters <= concepts"));
    }
    let mut rng = rng::stream(seed, streams::GRAPH);
    let labels: Vec<usize> = (0..num_concepts).map(|i| i * clusters / num_concepts).collect();
    let mut edges = Vec::new();
    for a in 0..num_concepts {
        for b in 0..num_concepts {
            if a != b && labels[a] == labels[b] && rng.random_bool(density) {
                edges.push((a, b));
            }
        }
    }
    Ok((KnowledgeGraph::new(num_concepts, edges)?, labels))
}

/// Pronounceable, distinct concept names for synthetic data.
pub fn synthetic_names(n: usize) -> Vec<String> {
    const SYL: [&str; 16] = [
        "ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "va", "ze", "bo", "di", "fu", "ge", "hi", "jo",
    ];
    (0..n)
        .map(|i| {
            let mut name = String::new();
            let mut x = i;
            for _ in 0..3 {
                name.push_str(SYL[x % SYL.len()]);
                x /= SYL.len();
            }
            name
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LearnerSplit {
    pub learner: String,
    pub train: Vec<LearningRecord>,
    pub valid: LearningRecord,
    pub test: LearningRecord,
}

impl LearnerSplit {
    /// History used to predict the validation record.
    pub fn valid_history(&self) -> &[LearningRecord] {
        &self.train
    }

    /// History used to predict the test record.
    pub fn test_history(&self) -> Vec<LearningRecord> {
        let mut h = self.train.clone();
        h.push(self.valid);
        h
    }

    pub fn full(&self) -> Vec<LearningRecord> {
        let mut h = self.test_history();
        h.push(self.test);
        h
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitDataset {
    pub learners: Vec<LearnerSplit>,
}

impl SplitDataset {
    pub fn train_sequences(&self) -> Vec<LearnerSequence> {
        self.learners
            .iter()
            .map(|l| LearnerSequence {
                learner: l.learner.clone(),
                records: l.train.clone(),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.learners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.learners.is_empty()
    }
}

/// Last record to test, second-to-last to validation, the rest to training.
pub fn split_leave_one_out(seqs: &[LearnerSequence]) -> Result<SplitDataset> {
    let mut learners = Vec::with_capacity(seqs.len());
    for s in seqs {
        let n = s.records.len();
        if n < MIN_SEQUENCE_LEN {
            return Err(Error::Learner {
                learner: s.learner.clone(),
                message: format!("sequence of length {n} is too short for leave-one-out (need {MIN_SEQUENCE_LEN})"),
            });
        }
        learners.push(LearnerSplit {
            learner: s.learner.clone(),
            train: s.records[..n - 2].to_vec(),
            valid: s.records[n - 2],
            test: s.records[n - 1],
        });
    }
    Ok(SplitDataset { learners })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str, suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn tabular_load_interns_in_first_appearance_order() {
        let f = write_tmp("learner_id,concept_name,correct,step\nu1,A,1,0\nu1,B,0,1\nu1,C,1,2\n", ".csv");
        let loaded = load_sequences(f.path(), SequenceFormat::Tabular).unwrap();
        assert_eq!(loaded.sequences.len(), 1);
        assert_eq!(loaded.vocab.names(), ["A", "B", "C"]);
        let s = &loaded.sequences[0];
        assert_eq!(s.concepts().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(s.records.iter().map(|r| r.correct).collect::<Vec<_>>(), vec![1, 0, 1]);
    }

    #[test]
    fn empty_file_gives_nothing() {
        let f = write_tmp("", ".csv");
        let loaded = load_sequences(f.path(), SequenceFormat::Tabular).unwrap();
        assert!(loaded.sequences.is_empty());
        assert!(loaded.vocab.is_empty());
        let f = write_tmp("", ".jsonl");
        assert!(load_sequences(f.path(), SequenceFormat::JsonLines).unwrap().sequences.is_empty());
    }

    #[test]
    fn short_learner_is_dropped_with_warning() {
        let f = write_tmp(
            "learner_id,concept_name,correct,step\nu1,A,1,0\nu1,B,0,1\nu2,A,1,0\nu2,B,1,1\nu2,C,0,2\n",
            ".csv",
        );
        let loaded = load_sequences(f.path(), SequenceFormat::Tabular).unwrap();
        assert_eq!(loaded.sequences.len(), 1);
        assert_eq!(loaded.sequences[0].learner, "u2");
        assert_eq!(loaded.warnings.len(), 1);
        assert!(loaded.warnings[0].contains("u1"));
    }

    #[test]
    fn bad_correctness_drops_only_that_learner() {
        let f = write_tmp(
            "learner_id,concept_name,correct,step\nu1,A,2,0\nu1,B,0,1\nu1,C,0,2\nu2,A,1,0\nu2,B,1,1\nu2,C,0,2\n",
            ".csv",
        );
        let loaded = load_sequences(f.path(), SequenceFormat::Tabular).unwrap();
        assert_eq!(loaded.sequences.len(), 1);
        assert!(loaded.warnings[0].contains("correctness"));
    }

    #[test]
    fn malformed_row_names_line() {
        let f = write_tmp("learner_id,concept_name,correct,step\nu1,A,1,0\nu1,B,0\n", ".csv");
        let err = load_sequences(f.path(), SequenceFormat::Tabular).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_tmp("learner_id,concept_name,correct,step\nu1,A,1,0\nu1,B,0,x\n", ".csv");
        match load_sequences(f.path(), SequenceFormat::Tabular).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rows_sorted_by_step_and_columns_may_be_reordered() {
        let f = write_tmp("step,correct,concept_name,learner_id\n20,1,C,u1\n5,0,A,u1\n9,1,B,u1\n", ".csv");
        let loaded = load_sequences(f.path(), SequenceFormat::Tabular).unwrap();
        let s = &loaded.sequences[0];
        let names: Vec<_> = s.concepts().map(|c| loaded.vocab.name(c).unwrap()).collect();
        assert_eq!(names, ["A", "B", "C"]);
        assert_eq!(s.records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn json_lines_load_and_bad_line() {
        let f = write_tmp(
            "{\"learner_id\":\"u1\",\"concept_name\":\"A\",\"correct\":1,\"step\":0}\n\
             {\"learner_id\":\"u1\",\"concept_name\":\"B\",\"correct\":0,\"step\":1}\n\
             {\"learner_id\":\"u1\",\"concept_name\":\"C\",\"correct\":1,\"step\":2}\n",
            ".jsonl",
        );
        let loaded = load_sequences(f.path(), SequenceFormat::JsonLines).unwrap();
        assert_eq!(loaded.sequences[0].len(), 3);
        let f = write_tmp("{\"learner_id\":\"u1\"}\n", ".jsonl");
        assert!(matches!(
            load_sequences(f.path(), SequenceFormat::JsonLines),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn vocab_sidecar_round_trip() {
        let v = ConceptVocab::from_names(["z", "a", "m"]);
        assert_eq!(ConceptVocab::from_json(&v.to_json()).unwrap(), v);
    }

    #[test]
    fn leave_one_out_examples() {
        let s = LearnerSequence::from_pairs("u", &[(0, true), (1, false), (2, true), (3, true)]);
        let split = split_leave_one_out(&[s]).unwrap();
        let l = &split.learners[0];
        assert_eq!(l.train.iter().map(|r| r.concept).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(l.valid.concept, 2);
        assert_eq!(l.test.concept, 3);

        let s = LearnerSequence::from_pairs("u", &[(0, true), (1, false), (2, true)]);
        let split = split_leave_one_out(&[s]).unwrap();
        assert_eq!(split.learners[0].train.len(), 1);

        let s = LearnerSequence::from_pairs("short", &[(0, true), (1, false)]);
        let err = split_leave_one_out(&[s]).unwrap_err();
        assert!(err.to_string().contains("short"));
    }

    #[test]
    fn full_bias_walk_follows_chain() {
        let g = KnowledgeGraph::new(3, vec![(0, 1), (1, 2)]).unwrap();
        let cfg = SyntheticConfig {
            num_concepts: 3,
            num_learners: 20,
            walk_bias: 1.0,
            seed: 4,
            min_len: 3,
            max_len: 3,
            start: Some(0),
        };
        for s in generate_synthetic(&cfg, &g).unwrap() {
            assert_eq!(s.concepts().collect::<Vec<_>>(), vec![0, 1, 2]);
        }
    }

    #[test]
    fn unbiased_walk_hits_successors_at_density_rate() {
        // every node has out-degree 3 over 20 concepts: uniform steps land on a
        // successor with probability 3/20
        let g = planted_graph(20, 3, 1).unwrap();
        let cfg = SyntheticConfig {
            num_concepts: 20,
            num_learners: 100,
            walk_bias: 0.0,
            seed: 9,
            min_len: 101,
            max_len: 101,
            start: None,
        };
        let seqs = generate_synthetic(&cfg, &g).unwrap();
        let (mut hits, mut total) = (0usize, 0usize);
        for s in &seqs {
            for w in s.records.windows(2) {
                total += 1;
                hits += usize::from(g.has_edge(w[0].concept, w[1].concept));
            }
        }
        assert_eq!(total, 10_000);
        let p = 3.0 / 20.0;
        let se = (p * (1.0 - p) / total as f64).sqrt();
        let rate = hits as f64 / total as f64;
        assert!((rate - p).abs() < 3.0 * se, "rate {rate} vs {p} (se {se})");
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let g = planted_graph(12, 2, 3).unwrap();
        let cfg = SyntheticConfig {
            num_concepts: 12,
            num_learners: 15,
            seed: 21,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg, &g).unwrap();
        let b = generate_synthetic(&cfg, &g).unwrap();
        assert_eq!(a, b);
        let vocab = ConceptVocab::from_names(synthetic_names(12));
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_sequences(&a, &vocab, &pa, SequenceFormat::Tabular).unwrap();
        write_sequences(&b, &vocab, &pb, SequenceFormat::Tabular).unwrap();
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    }

    #[test]
    fn mastery_increases_with_exposure() {
        assert_eq!(synthetic_mastery(0), 0.5);
        assert_eq!(synthetic_mastery(1), 0.75);
        assert!((0..10).all(|e| synthetic_mastery(e + 1) > synthetic_mastery(e)));
    }

    #[test]
    fn synthetic_names_are_distinct() {
        let names = synthetic_names(500);
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), 500);
    }
}
