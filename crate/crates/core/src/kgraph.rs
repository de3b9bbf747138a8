//! The directed prerequisite graph, edge-dropout views and the
//! graph-consistency measures used in evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;

use crate::datasets::{ConceptId, ConceptVocab, LearnerSequence};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Directed graph over concepts `0..num_nodes`. Edges are kept sorted and
/// unique; self-loops are never stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeGraph {
    num_nodes: usize,
    edges: Vec<(ConceptId, ConceptId)>,
    successors: Vec<Vec<ConceptId>>,
    predecessors: Vec<Vec<ConceptId>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Predecessors,
    Successors,
    Both,
}

impl KnowledgeGraph {
    /// Duplicate edges collapse; a self-loop or out-of-range endpoint is an error.
    pub fn new(num_nodes: usize, edges: impl IntoIterator<Item = (ConceptId, ConceptId)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::invalid("edge", format!("({a}, {b}) has an endpoint outside 0..{num_nodes}")));
            }
            if a == b {
                return Err(Error::invalid("edge", format!("self-loop on {a}")));
            }
            set.insert((a, b));
        }
        Ok(Self::from_sorted(num_nodes, set.into_iter().collect()))
    }

    fn from_sorted(num_nodes: usize, edges: Vec<(ConceptId, ConceptId)>) -> Self {
        let mut successors = vec![Vec::new(); num_nodes];
        let mut predecessors = vec![Vec::new(); num_nodes];
        for &(a, b) in &edges {
            successors[a].push(b);
            predecessors[b].push(a);
        }
        for p in &mut predecessors {
            p.sort_unstable();
        }
        Self {
            num_nodes,
            edges,
            successors,
            predecessors,
        }
    }

    pub fn empty(num_nodes: usize) -> Self {
        Self::from_sorted(num_nodes, Vec::new())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges in canonical (sorted) order.
    pub fn edges(&self) -> &[(ConceptId, ConceptId)] {
        &self.edges
    }

    pub fn successors(&self, k: ConceptId) -> &[ConceptId] {
        &self.successors[k]
    }

    pub fn predecessors(&self, k: ConceptId) -> &[ConceptId] {
        &self.predecessors[k]
    }

    pub fn has_edge(&self, from: ConceptId, to: ConceptId) -> bool {
        from < self.num_nodes && self.successors[from].binary_search(&to).is_ok()
    }

    /// Edge in either direction.
    pub fn adjacent(&self, a: ConceptId, b: ConceptId) -> bool {
        self.has_edge(a, b) || self.has_edge(b, a)
    }

    /// In-degree plus out-degree.
    pub fn degree(&self, k: ConceptId) -> usize {
        self.successors[k].len() + self.predecessors[k].len()
    }

    pub fn neighbors(&self, k: ConceptId, direction: Direction) -> Result<Vec<ConceptId>> {
        if k >= self.num_nodes {
            return Err(Error::UnknownConcept(k.to_string()));
        }
        Ok(match direction {
            Direction::Predecessors => self.predecessors[k].clone(),
            Direction::Successors => self.successors[k].clone(),
            Direction::Both => {
                let set: BTreeSet<_> = self.predecessors[k].iter().chain(&self.successors[k]).copied().collect();
                set.into_iter().collect()
            }
        })
    }

    /// A view keeping every edge.
    pub fn full_view(&self) -> GraphView<'_> {
        GraphView {
            base: self,
            kept: self.edges.clone(),
            mask_ratio: 0.0,
            seed: 0,
        }
    }
}

/// Convenience wrapper matching the free-function query style.
pub fn neighbors(g: &KnowledgeGraph, k: ConceptId, direction: Direction) -> Result<Vec<ConceptId>> {
    g.neighbors(k, direction)
}

/// Edge `a→b` is kept when the transition occurs at least `min_count` times
/// and makes up at least `min_ratio` of all transitions leaving `a`.
pub fn build_transition_graph(
    seqs: &[LearnerSequence],
    num_concepts: usize,
    min_count: usize,
    min_ratio: f64,
) -> Result<KnowledgeGraph> {
    let mut pair_counts: BTreeMap<(ConceptId, ConceptId), usize> = BTreeMap::new();
    let mut out_counts = vec![0usize; num_concepts];
    for s in seqs {
        for w in s.records.windows(2) {
            let (a, b) = (w[0].concept, w[1].concept);
            if a >= num_concepts || b >= num_concepts {
                return Err(Error::UnknownConcept(a.max(b).to_string()));
            }
            if a == b {
                continue;
            }
            *pair_counts.entry((a, b)).or_default() += 1;
            out_counts[a] += 1;
        }
    }
    let edges = pair_counts
        .into_iter()
        .filter(|&((a, _), c)| c >= min_count && c as f64 / out_counts[a] as f64 >= min_ratio)
        .map(|(e, _)| e)
        .collect();
    Ok(KnowledgeGraph::from_sorted(num_concepts, edges))
}

fn parse_edge_lines(
    path: &Path,
    mut resolve: impl FnMut(&str, u64) -> Result<ConceptId>,
) -> Result<(Vec<(ConceptId, ConceptId)>, Vec<String>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut edges = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split('\t');
        let (Some(from), Some(to), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: "expected `from<TAB>to`".into(),
            });
        };
        let a = resolve(from, line_no)?;
        let b = resolve(to, line_no)?;
        if a == b {
            let msg = format!("{}:{line_no}: self-loop on `{from}` ignored", path.display());
            warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        edges.push((a, b));
    }
    Ok((edges, warnings))
}

/// Reads a tab-separated edge list against an existing concept id map.
/// Self-loops are skipped with a warning; duplicates collapse.
pub fn load_graph(path: &Path, vocab: &ConceptVocab) -> Result<(KnowledgeGraph, Vec<String>)> {
    let (edges, warnings) = parse_edge_lines(path, |name, line| {
        vocab.id(name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("concept `{name}` is not in the concept id map"),
        })
    })?;
    Ok((KnowledgeGraph::new(vocab.len(), edges)?, warnings))
}

/// Like [`load_graph`], but interns unseen names into `vocab`.
pub fn load_graph_interning(path: &Path, vocab: &mut ConceptVocab) -> Result<(KnowledgeGraph, Vec<String>)> {
    let (edges, warnings) = parse_edge_lines(path, |name, _| Ok(vocab.intern(name)))?;
    Ok((KnowledgeGraph::new(vocab.len(), edges)?, warnings))
}

pub fn write_graph(g: &KnowledgeGraph, vocab: &ConceptVocab, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for &(a, b) in g.edges() {
        let na = vocab.name(a).ok_or_else(|| Error::UnknownConcept(a.to_string()))?;
        let nb = vocab.name(b).ok_or_else(|| Error::UnknownConcept(b.to_string()))?;
        writeln!(out, "{na}\t{nb}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// An edge-masked view of a graph. The node set is always the base graph's.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphView<'g> {
    pub base: &'g KnowledgeGraph,
    kept: Vec<(ConceptId, ConceptId)>,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl GraphView<'_> {
    pub fn num_nodes(&self) -> usize {
        self.base.num_nodes()
    }

    pub fn kept_edges(&self) -> &[(ConceptId, ConceptId)] {
        &self.kept
    }

    /// Undirected neighbor lists (union of in- and out-neighbors), sorted.
    pub fn undirected_neighbors(&self) -> Vec<Vec<ConceptId>> {
        let mut sets = vec![BTreeSet::new(); self.num_nodes()];
        for &(a, b) in &self.kept {
            sets[a].insert(b);
            sets[b].insert(a);
        }
        sets.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// In-neighbor lists only: messages flow along edge direction.
    pub fn in_neighbors(&self) -> Vec<Vec<ConceptId>> {
        let mut lists = vec![Vec::new(); self.num_nodes()];
        for &(a, b) in &self.kept {
            lists[b].push(a);
        }
        lists
    }
}

/// Number of edges a view keeps under mask ratio `gamma`.
pub fn kept_edge_count(num_edges: usize, gamma: f64) -> usize {
    ((1.0 - gamma) * num_edges as f64).round() as usize
}

/// Two independently sampled edge-dropout views. Each keeps exactly
/// `round((1 - gamma) * |E|)` edges chosen without replacement.
pub fn make_views(g: &KnowledgeGraph, gamma: f64, seed: u64) -> Result<(GraphView<'_>, GraphView<'_>)> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid("gamma", format!("{gamma} is outside [0, 1)")));
    }
    let keep = kept_edge_count(g.num_edges(), gamma);
    let mut rng = rng::stream(seed, streams::VIEWS);
    let mut sample = || {
        let mut idx = rand::seq::index::sample(&mut rng, g.num_edges(), keep).into_vec();
        idx.sort_unstable();
        let kept: Vec<_> = idx.into_iter().map(|i| g.edges[i]).collect();
        GraphView {
            base: g,
            kept,
            mask_ratio: gamma,
            seed,
        }
    };
    let first = sample();
    let second = sample();
    Ok((first, second))
}

/// Share of `(previous, recommended)` pairs joined by an edge in either direction.
pub fn consistency_ratio(g: &KnowledgeGraph, pairs: &[(ConceptId, ConceptId)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("pairs", "no pairs to score"));
    }
    let hits = pairs.iter().filter(|&&(a, b)| g.adjacent(a, b)).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Share of consecutive steps `k_t → k_{t+1}` that follow a directed edge.
pub fn learner_consistency_score(g: &KnowledgeGraph, seq: &LearnerSequence) -> Result<f64> {
    if seq.records.len() < 2 {
        return Err(Error::Learner {
            learner: seq.learner.clone(),
            message: "need at least two records for a consistency score".into(),
        });
    }
    let pairs = seq.records.len() - 1;
    let hits = seq
        .records
        .windows(2)
        .filter(|w| g.has_edge(w[0].concept, w[1].concept))
        .count();
    Ok(hits as f64 / pairs as f64)
}
