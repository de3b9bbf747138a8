//! End-to-end runs driven by a [`PipelineConfig`]: data, graph, concept
//! text, encodings, the staged pipeline and the final report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::PipelineConfig;
use crate::datasets::{
    generate_synthetic, load_sequences, planted_graph, split_leave_one_out, synthetic_names, write_sequences,
    ConceptId, ConceptVocab, LearnerSequence, SequenceFormat, SplitDataset, SyntheticConfig,
};
use crate::encoder::{encode_texts, EmbeddingTable, ExternalLmEncoder, HashEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_model, EvalOptions, EvalReport};
use crate::interp::{
    enhance_concepts, serialize_concept_text, synthetic_fixture, ConceptText, EnhanceOptions, FixtureProvider,
    LlmProvider, RemoteProvider,
};
use crate::kgraph::{build_transition_graph, load_graph, write_graph, KnowledgeGraph};
use crate::model::ModelState;
use crate::trainer::{run_pipeline, select_gamma, PipelineOutcome};

pub const SEQUENCES_FILE: &str = "sequences.csv";
pub const GRAPH_FILE: &str = "graph.tsv";
pub const VOCAB_FILE: &str = "vocab.json";
pub const TEXT_CACHE_FILE: &str = "texts.jsonl";
pub const RAW_TABLE_FILE: &str = "raw.emb";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Learner sequences with their concept names and prerequisite graph.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub sequences: Vec<LearnerSequence>,
    pub vocab: ConceptVocab,
    pub graph: KnowledgeGraph,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Generates or loads sequences and the graph. Without a graph file, loaded
/// data gets a transition graph built from its training slice.
pub fn prepare_dataset(cfg: &PipelineConfig, base: &Path) -> Result<Dataset> {
    let d = &cfg.data;
    if d.synthetic {
        let graph = planted_graph(d.concepts, d.out_degree, cfg.seed)?;
        let sequences = generate_synthetic(
            &SyntheticConfig {
                num_concepts: d.concepts,
                num_learners: d.learners,
                walk_bias: d.walk_bias,
                seed: cfg.seed,
                min_len: d.min_len,
                max_len: d.max_len,
                start: None,
            },
            &graph,
        )?;
        return Ok(Dataset {
            sequences,
            vocab: ConceptVocab::from_names(synthetic_names(d.concepts)),
            graph,
        });
    }
    let path = resolve(base, d.sequences.as_deref().expect("validated"));
    let loaded = load_sequences(&path, SequenceFormat::from_path(&path))?;
    let mut vocab = loaded.vocab;
    let graph = match &cfg.graph.path {
        Some(p) => {
            let (g, _) = crate::kgraph::load_graph_interning(&resolve(base, p), &mut vocab)?;
            g
        }
        None => {
            let split = split_leave_one_out(&loaded.sequences)?;
            build_transition_graph(
                &split.train_sequences(),
                vocab.len(),
                cfg.graph.min_count,
                cfg.graph.min_ratio,
            )?
        }
    };
    Ok(Dataset {
        sequences: loaded.sequences,
        vocab,
        graph,
    })
}

/// Writes sequences, graph and vocabulary under `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    write_sequences(&ds.sequences, &ds.vocab, &dir.join(SEQUENCES_FILE), SequenceFormat::Tabular)?;
    write_graph(&ds.graph, &ds.vocab, &dir.join(GRAPH_FILE))?;
    ds.vocab.save(&dir.join(VOCAB_FILE))
}

/// Reads what [`write_dataset`] wrote, keeping the saved concept ids.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let vocab = ConceptVocab::load(&dir.join(VOCAB_FILE))?;
    let loaded = load_sequences(&dir.join(SEQUENCES_FILE), SequenceFormat::Tabular)?;
    let remap: Vec<ConceptId> = loaded
        .vocab
        .names()
        .iter()
        .map(|n| vocab.id(n).ok_or_else(|| Error::UnknownConcept(n.clone())))
        .collect::<Result<_>>()?;
    let sequences = loaded
        .sequences
        .into_iter()
        .map(|mut s| {
            for r in &mut s.records {
                r.concept = remap[r.concept];
            }
            s
        })
        .collect();
    let (graph, _) = load_graph(&dir.join(GRAPH_FILE), &vocab)?;
    Ok(Dataset { sequences, vocab, graph })
}

pub fn provider(cfg: &PipelineConfig, base: &Path, vocab: &ConceptVocab) -> Result<Box<dyn LlmProvider>> {
    let t = &cfg.text;
    Ok(match t.provider.as_str() {
        "synthetic" => Box::new(FixtureProvider::new(synthetic_fixture(vocab))),
        "fixture" => Box::new(FixtureProvider::load(&resolve(base, t.fixture.as_deref().expect("validated")))?),
        _ => Box::new(RemoteProvider::from_env(
            t.endpoint.clone().expect("validated"),
            t.llm_model.clone().unwrap_or_else(|| "gpt-3.5-turbo".into()),
        )?),
    })
}

pub fn text_encoder(cfg: &PipelineConfig) -> Box<dyn TextEncoder> {
    let t = &cfg.text;
    match t.backend.as_str() {
        "lm" => {
            let cmd = t.lm_command.clone().expect("validated");
            Box::new(ExternalLmEncoder::new(cmd[0].clone(), cmd[1..].to_vec(), t.native_dim))
        }
        _ => Box::new(HashEncoder::new(t.native_dim)),
    }
}

/// Serialized interpretations encoded into the raw table.
pub fn encode_concepts(
    texts: &BTreeMap<ConceptId, ConceptText>,
    vocab: &ConceptVocab,
    encoder: &dyn TextEncoder,
) -> Result<EmbeddingTable> {
    let serialized: BTreeMap<ConceptId, String> =
        texts.iter().map(|(&k, ct)| (k, serialize_concept_text(ct))).collect();
    encode_texts(&serialized, vocab.names(), encoder)
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    pub split: SplitDataset,
    pub outcome: PipelineOutcome,
    /// Selected edge-dropout ratio when a grid was configured.
    pub gamma: Option<f64>,
    pub report: EvalReport,
}

/// Everything `run --config` does. Relative paths resolve against `base`.
pub fn run_from_config(cfg: &PipelineConfig, base: &Path) -> Result<RunOutput> {
    let out_dir = resolve(base, &cfg.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let ds = prepare_dataset(cfg, base)?;
    write_dataset(&ds, &out_dir)?;
    let split = split_leave_one_out(&ds.sequences)?;

    let provider = provider(cfg, base, &ds.vocab)?;
    let opts = EnhanceOptions {
        max_prompt_neighbors: cfg.text.max_prompt_neighbors,
        ..Default::default()
    };
    let texts = enhance_concepts(&ds.graph, &ds.vocab, provider.as_ref(), &out_dir.join(TEXT_CACHE_FILE), &opts)?;
    let raw = encode_concepts(&texts, &ds.vocab, text_encoder(cfg).as_ref())?;
    raw.save(&out_dir.join(RAW_TABLE_FILE))?;

    let state = ModelState::new(&cfg.model_config()?, raw, ds.graph.clone())?;
    let stages = cfg.stage_configs(&out_dir)?;
    let mut popts = cfg.pipeline_options()?;
    popts.metrics_log = Some(out_dir.join(METRICS_FILE));
    let (gamma, outcome) = if cfg.pipeline.gamma_grid.is_empty() {
        (None, run_pipeline(&stages, &split, state, &popts)?)
    } else {
        let (g, out) = select_gamma(&cfg.pipeline.gamma_grid, &stages, &split, &state, &popts)?;
        (Some(g), out)
    };
    let eval = evaluate_model(
        &outcome.state,
        &split,
        &ds.graph,
        &EvalOptions {
            clusters: cfg.eval.clusters,
            seed: cfg.seed,
        },
    )?;
    let report_path = out_dir.join(REPORT_FILE);
    std::fs::write(&report_path, eval.report.to_json()).map_err(|e| Error::io(&report_path, e))?;
    Ok(RunOutput {
        out_dir,
        split,
        outcome,
        gamma,
        report: eval.report,
    })
}
