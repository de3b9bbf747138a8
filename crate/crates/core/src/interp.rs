//! Four-part concept interpretations: name, an LLM explanation disambiguated
//! by the concept's graph neighborhood, and its predecessor/successor names.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::datasets::{ConceptId, ConceptVocab};
use crate::error::{Error, Result};
use crate::kgraph::KnowledgeGraph;

pub const TEMPLATE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptText {
    pub concept: ConceptId,
    pub name: String,
    pub explanation: String,
    pub predecessors: Vec<String>,
    pub successors: Vec<String>,
}

fn render_list(items: &[String]) -> String {
    if items.is_empty() {
        "none".to_string()
    } else {
        items.join(", ")
    }
}

/// `Name: …; Explanation: …; Predecessors: a, b; Successors: none`
pub fn serialize_concept_text(ct: &ConceptText) -> String {
    format!(
        "Name: {}; Explanation: {}; Predecessors: {}; Successors: {}",
        ct.name,
        ct.explanation,
        render_list(&ct.predecessors),
        render_list(&ct.successors)
    )
}

/// Inverse of [`serialize_concept_text`] for names free of `;` and `, `,
/// explanations free of `; `, and no neighbor literally named `none`.
pub fn parse_concept_text(concept: ConceptId, text: &str) -> Result<ConceptText> {
    let bad = || Error::Format(format!("not a serialized concept text: `{text}`"));
    let rest = text.strip_prefix("Name: ").ok_or_else(bad)?;
    let (name, rest) = rest.split_once("; Explanation: ").ok_or_else(bad)?;
    let (explanation, rest) = rest.rsplit_once("; Predecessors: ").ok_or_else(bad)?;
    let (preds, succs) = rest.rsplit_once("; Successors: ").ok_or_else(bad)?;
    let list = |s: &str| -> Vec<String> {
        if s == "none" {
            Vec::new()
        } else {
            s.split(", ").map(str::to_string).collect()
        }
    };
    Ok(ConceptText {
        concept,
        name: name.to_string(),
        explanation: explanation.to_string(),
        predecessors: list(preds),
        successors: list(succs),
    })
}

/// Prompt asking for a short explanation of `name` in the context its
/// neighbors imply. With no neighbors the context clause is left out.
pub fn build_prompt(name: &str, predecessors: &[String], successors: &[String]) -> String {
    let mut p = format!("You are an expert curriculum designer. Explain the concept '{name}'");
    if !predecessors.is_empty() {
        p.push_str(&format!(" as taught after {}", predecessors.join(", ")));
    }
    if !successors.is_empty() {
        let joiner = if predecessors.is_empty() { " as taught" } else { " and" };
        p.push_str(&format!("{joiner} before {}", successors.join(", ")));
    }
    p.push_str(", in 2-4 sentences, for a student.");
    if !predecessors.is_empty() || !successors.is_empty() {
        p.push_str(&format!(
            " Interpret '{name}' in the educational context implied by these related concepts. \
             Do not mention that a list of related concepts was provided."
        ));
    }
    p
}

#[derive(Debug)]
pub enum ProviderError {
    /// Unrecoverable: retrying cannot help.
    Fatal(String),
    Transient(String),
}

pub trait LlmProvider: Sync {
    fn explain(&self, concept_name: &str, prompt: &str) -> std::result::Result<String, ProviderError>;
    fn calls(&self) -> usize;
}

/// Canned explanations keyed by concept name.
#[derive(Debug, Default)]
pub struct FixtureProvider {
    explanations: HashMap<String, String>,
    calls: AtomicUsize,
}

impl FixtureProvider {
    pub fn new(explanations: HashMap<String, String>) -> Self {
        Self {
            explanations,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: HashMap<String, String> =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(Self::new(map))
    }
}

impl LlmProvider for FixtureProvider {
    fn explain(&self, concept_name: &str, _prompt: &str) -> std::result::Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.explanations
            .get(concept_name)
            .cloned()
            .ok_or_else(|| ProviderError::Fatal(format!("fixture has no explanation for concept `{concept_name}`")))
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Chat-completion endpoint speaking the common `messages` json protocol.
#[derive(Debug)]
pub struct RemoteProvider {
    endpoint: String,
    model: String,
    api_key: String,
    calls: AtomicUsize,
}

impl RemoteProvider {
    pub const API_KEY_VAR: &'static str = "LLM_API_KEY";

    /// Reads the key from `LLM_API_KEY`.
    pub fn from_env(endpoint: impl Into<String>, model: impl Into<String>) -> Result<Self> {
        let api_key = std::env::var(Self::API_KEY_VAR)
            .map_err(|_| Error::invalid(Self::API_KEY_VAR, "environment variable is not set"))?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            calls: AtomicUsize::new(0),
        })
    }
}

impl LlmProvider for RemoteProvider {
    fn explain(&self, _concept_name: &str, prompt: &str) -> std::result::Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let mut resp = ureq::post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        let value: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.trim().to_string())
            .ok_or_else(|| ProviderError::Transient("response has no choices[0].message.content".into()))
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[derive(Clone, Debug)]
pub struct EnhanceOptions {
    /// Neighbor names listed in a prompt, highest degree first.
    pub max_prompt_neighbors: usize,
    pub attempts: usize,
    pub backoff: Duration,
    pub max_in_flight: usize,
    /// Minimum spacing between request starts.
    pub min_interval: Duration,
}

impl Default for EnhanceOptions {
    fn default() -> Self {
        Self {
            max_prompt_neighbors: 10,
            attempts: 3,
            backoff: Duration::from_millis(500),
            max_in_flight: 4,
            min_interval: Duration::ZERO,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct CacheEntry {
    id: ConceptId,
    name: String,
    explanation: String,
    predecessors: Vec<String>,
    successors: Vec<String>,
    template_version: u32,
    #[serde(default)]
    truncated: bool,
}

type CacheKey = (String, Vec<String>, Vec<String>, u32);

fn cache_key(name: &str, preds: &[String], succs: &[String], version: u32) -> CacheKey {
    let mut p = preds.to_vec();
    p.sort();
    let mut s = succs.to_vec();
    s.sort();
    (name.to_string(), p, s, version)
}

fn read_cache(path: &Path) -> Result<HashMap<CacheKey, CacheEntry>> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CacheEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        let key = cache_key(&entry.name, &entry.predecessors, &entry.successors, entry.template_version);
        out.insert(key, entry);
    }
    Ok(out)
}

/// Neighbors ordered by descending degree, ties by id, cut to `limit`.
fn prompt_neighbors(g: &KnowledgeGraph, ids: &[ConceptId], limit: usize) -> (Vec<ConceptId>, bool) {
    let mut sorted = ids.to_vec();
    sorted.sort_by(|&a, &b| g.degree(b).cmp(&g.degree(a)).then(a.cmp(&b)));
    let truncated = sorted.len() > limit;
    sorted.truncate(limit);
    (sorted, truncated)
}

fn ask_with_retry(provider: &dyn LlmProvider, name: &str, prompt: &str, opts: &EnhanceOptions) -> Result<String> {
    let mut last = String::new();
    for attempt in 0..opts.attempts.max(1) {
        match provider.explain(name, prompt) {
            Ok(text) => return Ok(text),
            Err(ProviderError::Fatal(msg)) => return Err(Error::Provider(msg)),
            Err(ProviderError::Transient(msg)) => {
                last = msg;
                if attempt + 1 < opts.attempts {
                    std::thread::sleep(opts.backoff * 2u32.pow(attempt as u32));
                }
            }
        }
    }
    warn!("no explanation for `{name}` after {} attempts: {last}", opts.attempts);
    Ok(String::new())
}

/// Builds a [`ConceptText`] for every concept, reusing cached explanations and
/// querying `provider` only for concepts missing from `cache_path`.
pub fn enhance_concepts(
    g: &KnowledgeGraph,
    vocab: &ConceptVocab,
    provider: &dyn LlmProvider,
    cache_path: &Path,
    opts: &EnhanceOptions,
) -> Result<BTreeMap<ConceptId, ConceptText>> {
    if vocab.len() != g.num_nodes() {
        return Err(Error::invalid(
            "names",
            format!("{} names for a graph of {} nodes", vocab.len(), g.num_nodes()),
        ));
    }
    let mut cache_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(cache_path)
        .map_err(|e| Error::io(cache_path, e))?;
    let cache = read_cache(cache_path)?;
    let name_of = |k: ConceptId| vocab.name(k).expect("vocab covers graph").to_string();

    struct Pending {
        id: ConceptId,
        prompt: String,
        truncated: bool,
    }
    let mut out = BTreeMap::new();
    let mut pending = Vec::new();
    for k in 0..g.num_nodes() {
        let name = name_of(k);
        if name.is_empty() {
            return Err(Error::invalid("names", format!("concept {k} has an empty name")));
        }
        let preds: Vec<String> = g.predecessors(k).iter().map(|&p| name_of(p)).collect();
        let succs: Vec<String> = g.successors(k).iter().map(|&s| name_of(s)).collect();
        let key = cache_key(&name, &preds, &succs, TEMPLATE_VERSION);
        let explanation = match cache.get(&key) {
            Some(hit) => hit.explanation.clone(),
            None => {
                let (pp, pt) = prompt_neighbors(g, g.predecessors(k), opts.max_prompt_neighbors);
                let (ss, st) = prompt_neighbors(g, g.successors(k), opts.max_prompt_neighbors);
                let pp: Vec<String> = pp.into_iter().map(name_of).collect();
                let ss: Vec<String> = ss.into_iter().map(name_of).collect();
                pending.push(Pending {
                    id: k,
                    prompt: build_prompt(&name, &pp, &ss),
                    truncated: pt || st,
                });
                String::new()
            }
        };
        out.insert(
            k,
            ConceptText {
                concept: k,
                name,
                explanation,
                predecessors: preds,
                successors: succs,
            },
        );
    }

    let mut answers: Vec<(usize, Result<String>)> = Vec::with_capacity(pending.len());
    let mut last_start: Option<Instant> = None;
    for chunk in pending.chunks(opts.max_in_flight.max(1)) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    if let Some(t) = last_start {
                        let wait = opts.min_interval.saturating_sub(t.elapsed());
                        std::thread::sleep(wait);
                    }
                    last_start = Some(Instant::now());
                    let name = out[&p.id].name.clone();
                    (i, scope.spawn(move || ask_with_retry(provider, &name, &p.prompt, opts)))
                })
                .collect();
            for (i, h) in handles {
                answers.push((i, h.join().expect("provider thread panicked")));
            }
        });
        let base = answers.len() - chunk.len();
        for (offset, p) in chunk.iter().enumerate() {
            let (_, result) = std::mem::replace(&mut answers[base + offset], (0, Ok(String::new())));
            let explanation = result?;
            let ct = out.get_mut(&p.id).expect("pending concept present");
            ct.explanation = explanation;
            if ct.explanation.is_empty() {
                continue;
            }
            let entry = CacheEntry {
                id: p.id,
                name: ct.name.clone(),
                explanation: ct.explanation.clone(),
                predecessors: ct.predecessors.clone(),
                successors: ct.successors.clone(),
                template_version: TEMPLATE_VERSION,
                truncated: p.truncated,
            };
            let line = serde_json::to_string(&entry).expect("cache entry serializes");
            writeln!(cache_file, "{line}").map_err(|e| Error::io(cache_path, e))?;
        }
    }
    cache_file.flush().map_err(|e| Error::io(cache_path, e))?;
    Ok(out)
}

/// Reads finished interpretations back from an enhancement cache file.
pub fn load_concept_texts(cache_path: &Path, vocab: &ConceptVocab) -> Result<BTreeMap<ConceptId, ConceptText>> {
    let mut out = BTreeMap::new();
    for entry in read_cache(cache_path)?.into_values() {
        if let Some(id) = vocab.id(&entry.name) {
            out.insert(
                id,
                ConceptText {
                    concept: id,
                    name: entry.name,
                    explanation: entry.explanation,
                    predecessors: entry.predecessors,
                    successors: entry.successors,
                },
            );
        }
    }
    Ok(out)
}

/// Deterministic stand-in explanations for synthetic concepts.
pub fn synthetic_fixture(vocab: &ConceptVocab) -> HashMap<String, String> {
    vocab
        .names()
        .iter()
        .map(|n| {
            (
                n.clone(),
                format!("The unit on {n} introduces the idea of {n} and practices it through worked examples."),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::kgraph::Direction;

    #[test]
    fn prompt_contains_context_and_instruction() {
        let p = build_prompt("Table", &["SQL basics".into()], &["Joins".into()]);
        assert!(p.contains("Table") && p.contains("SQL basics") && p.contains("Joins"));
        assert!(p.contains("educational context"));
        assert!(p.contains("Do not mention that a list"));
        assert!(p.contains("2-4 sentences"));
        assert_eq!(p, build_prompt("Table", &["SQL basics".into()], &["Joins".into()]));

        let bare = build_prompt("Addition", &[], &[]);
        assert!(bare.contains("Addition"));
        assert!(!bare.contains("taught"));
        assert!(!bare.contains("related concepts"));
    }

    #[test]
    fn serialization_format() {
        let ct = ConceptText {
            concept: 0,
            name: "Table".into(),
            explanation: "A grid of rows.".into(),
            predecessors: vec!["SQL basics".into(), "Schemas".into()],
            successors: vec![],
        };
        assert_eq!(
            serialize_concept_text(&ct),
            "Name: Table; Explanation: A grid of rows.; Predecessors: SQL basics, Schemas; Successors: none"
        );
        assert_eq!(parse_concept_text(0, &serialize_concept_text(&ct)).unwrap(), ct);
    }

    fn field() -> impl Strategy<Value = String> {
        "[a-zA-Z][a-zA-Z0-9 ]{0,8}".prop_filter("reserved", |s| s != "none" && !s.ends_with(' '))
    }

    proptest! {
        #[test]
        fn serialization_is_injective(
            a in (field(), field(), prop::collection::vec(field(), 0..3), prop::collection::vec(field(), 0..3)),
            b in (field(), field(), prop::collection::vec(field(), 0..3), prop::collection::vec(field(), 0..3)),
        ) {
            let mk = |t: &(String, String, Vec<String>, Vec<String>)| ConceptText {
                concept: 0,
                name: t.0.clone(),
                explanation: t.1.clone(),
                predecessors: t.2.clone(),
                successors: t.3.clone(),
            };
            let (ca, cb) = (mk(&a), mk(&b));
            let (sa, sb) = (serialize_concept_text(&ca), serialize_concept_text(&cb));
            prop_assert_eq!(ca == cb, sa == sb);
            prop_assert_eq!(parse_concept_text(0, &sa).unwrap(), ca);
        }
    }

    #[test]
    fn fixture_passthrough_and_warm_cache() {
        let vocab = ConceptVocab::from_names(["A"]);
        let g = KnowledgeGraph::empty(1);
        let provider = FixtureProvider::new([("A".to_string(), "expl-A".to_string())].into());
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("cache.jsonl");
        let out = enhance_concepts(&g, &vocab, &provider, &cache, &EnhanceOptions::default()).unwrap();
        assert_eq!(
            out[&0],
            ConceptText {
                concept: 0,
                name: "A".into(),
                explanation: "expl-A".into(),
                predecessors: vec![],
                successors: vec![],
            }
        );
        assert_eq!(provider.calls(), 1);
        let again = enhance_concepts(&g, &vocab, &provider, &cache, &EnhanceOptions::default()).unwrap();
        assert_eq!(again, out);
        assert_eq!(provider.calls(), 1);
        assert_eq!(load_concept_texts(&cache, &vocab).unwrap(), out);
    }

    #[test]
    fn neighbor_fields_match_graph() {
        let vocab = ConceptVocab::from_names(["A", "B", "C"]);
        let g = KnowledgeGraph::new(3, vec![(0, 1), (1, 2)]).unwrap();
        let provider = FixtureProvider::new(synthetic_fixture(&vocab));
        let dir = tempfile::tempdir().unwrap();
        let out = enhance_concepts(&g, &vocab, &provider, &dir.path().join("c.jsonl"), &EnhanceOptions::default())
            .unwrap();
        for k in 0..3 {
            let names = |ids: Vec<usize>| ids.into_iter().map(|i| vocab.name(i).unwrap().to_string()).collect::<Vec<_>>();
            assert_eq!(out[&k].predecessors, names(g.neighbors(k, Direction::Predecessors).unwrap()));
            assert_eq!(out[&k].successors, names(g.neighbors(k, Direction::Successors).unwrap()));
        }
    }

    #[test]
    fn missing_fixture_entry_names_concept() {
        let vocab = ConceptVocab::from_names(["A", "B"]);
        let g = KnowledgeGraph::empty(2);
        let provider = FixtureProvider::new([("A".to_string(), "x".to_string())].into());
        let dir = tempfile::tempdir().unwrap();
        let err = enhance_concepts(&g, &vocab, &provider, &dir.path().join("c.jsonl"), &EnhanceOptions::default())
            .unwrap_err();
        assert!(err.to_string().contains("`B`"));
    }

    #[test]
    fn unwritable_cache_is_an_error() {
        let vocab = ConceptVocab::from_names(["A"]);
        let g = KnowledgeGraph::empty(1);
        let provider = FixtureProvider::new([("A".to_string(), "x".to_string())].into());
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("missing-dir").join("cache.jsonl");
        assert!(matches!(
            enhance_concepts(&g, &vocab, &provider, &bad, &EnhanceOptions::default()),
            Err(Error::Io { .. })
        ));
        assert_eq!(provider.calls(), 0);
    }

    struct Flaky {
        calls: AtomicUsize,
    }

    impl LlmProvider for Flaky {
        fn explain(&self, _: &str, _: &str) -> std::result::Result<String, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Err(ProviderError::Transient("timeout".into()))
        }
        fn calls(&self) -> usize {
            self.calls.load(Ordering::SeqCst)
        }
    }

    #[test]
    fn failing_provider_yields_empty_explanation_after_retries() {
        let vocab = ConceptVocab::from_names(["A"]);
        let g = KnowledgeGraph::empty(1);
        let provider = Flaky { calls: AtomicUsize::new(0) };
        let opts = EnhanceOptions {
            backoff: Duration::from_millis(1),
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = enhance_concepts(&g, &vocab, &provider, &dir.path().join("c.jsonl"), &opts).unwrap();
        assert_eq!(out[&0].explanation, "");
        assert_eq!(provider.calls(), 3);
    }

    #[test]
    fn prompt_neighbors_are_truncated_by_degree() {
        // node 0 has 12 successors; node 12 gets extra degree
        let mut edges: Vec<(usize, usize)> = (1..=12).map(|i| (0, i)).collect();
        edges.push((13, 12));
        let g = KnowledgeGraph::new(14, edges).unwrap();
        let (kept, truncated) = prompt_neighbors(&g, g.successors(0), 10);
        assert!(truncated);
        assert_eq!(kept.len(), 10);
        assert_eq!(kept[0], 12);
    }
}
