//! `conceptrec` command-line entry point.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conceptrec::adapter::{pretrain_adapter, AdapterConfig, Aggregation, ContrastiveConfig, GraphAdapter};
use conceptrec::config::PipelineConfig;
use conceptrec::datasets::{generate_synthetic, planted_graph, split_leave_one_out, synthetic_names, ConceptVocab};
use conceptrec::datasets::{load_sequences, SequenceFormat, SyntheticConfig};
use conceptrec::encoder::{EmbeddingTable, ExternalLmEncoder, HashEncoder, TextEncoder};
use conceptrec::evalkit::{embedding_report, evaluate_model, EvalOptions};
use conceptrec::interp::{
    enhance_concepts, load_concept_texts, synthetic_fixture, EnhanceOptions, FixtureProvider, LlmProvider,
    RemoteProvider,
};
use conceptrec::kgraph::build_transition_graph;
use conceptrec::ktrace::{pretrain_kt, KtModel, KtTrainConfig};
use conceptrec::model::{ModelConfig, ModelState};
use conceptrec::params::Checkpoint;
use conceptrec::trainer::{run_pipeline, PipelineOptions, StageConfig, StageKind};
use conceptrec::workflow::{self, Dataset};
use conceptrec::Error;

#[derive(Parser)]
#[command(name = "conceptrec", version, about = "Knowledge-graph-aware concept recommendation")]
struct Cli {
    /// Minimum level written to stderr and the log file.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    /// Also write json-lines log records to this file.
    #[arg(long, global = true)]
    log: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (sequences.csv, graph.tsv, vocab.json) into a directory.
    GenData(GenData),
    /// Normalize an interaction file into a data directory and build its transition graph.
    BuildGraph(BuildGraph),
    /// Write enhanced concept texts to a cache file.
    Enhance(Enhance),
    /// Encode enhanced texts into a raw embedding table.
    Encode(Encode),
    /// Contrastive pre-training of the graph adapter.
    PretrainGraph(PretrainGraph),
    /// Knowledge-tracing pre-training.
    PretrainKt(PretrainKt),
    /// Self-supervised sequence pre-training.
    PretrainSeq(PretrainSeq),
    /// Joint fine-tuning on next-concept prediction.
    Finetune(Finetune),
    /// Print top-k recommendations per learner as json lines.
    Recommend(Recommend),
    /// Write the evaluation report of a fine-tuned model.
    Evaluate(Evaluate),
    /// Compare clustering quality of raw and adapted embeddings.
    EmbedReport(EmbedReport),
    /// Run the full pipeline from a config file.
    Run(Run),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    learners: usize,
    #[arg(long, default_value_t = 30)]
    concepts: usize,
    #[arg(long, default_value_t = 0.8)]
    walk_bias: f64,
    /// Successors per concept in the planted graph.
    #[arg(long, default_value_t = 2)]
    out_degree: usize,
    #[arg(long, default_value_t = 10)]
    min_len: usize,
    #[arg(long, default_value_t = 40)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BuildGraph {
    /// Interaction file (csv or jsonl).
    #[arg(long)]
    sequences: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    min_count: usize,
    #[arg(long, default_value_t = 0.05)]
    min_ratio: f64,
}

#[derive(Args)]
struct DataArg {
    /// Data directory written by gen-data or build-graph.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct Enhance {
    #[command(flatten)]
    data: DataArg,
    /// synthetic, fixture or remote.
    #[arg(long, default_value = "synthetic")]
    provider: String,
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// Chat-completion endpoint; the key is read from LLM_API_KEY.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value = "gpt-3.5-turbo")]
    llm_model: String,
    /// Defaults to `texts.jsonl` in the data directory.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    max_prompt_neighbors: usize,
}

#[derive(Args)]
struct Encode {
    #[command(flatten)]
    data: DataArg,
    /// Defaults to `texts.jsonl` in the data directory.
    #[arg(long)]
    texts: Option<PathBuf>,
    /// hash or lm.
    #[arg(long, default_value = "hash")]
    backend: String,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Encoder command for the lm backend (program followed by its arguments).
    #[arg(long, num_args = 1.., allow_hyphen_values = true)]
    lm_command: Vec<String>,
    /// Defaults to `raw.emb` in the data directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainGraph {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the adapted table of the trained adapter.
    #[arg(long)]
    adapted_out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long)]
    directed: bool,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    gamma: f64,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainKt {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 64)]
    kt_hidden: usize,
    #[arg(long, default_value_t = 3)]
    blocks: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 200)]
    max_len: usize,
    /// Project fused inputs from 4d to d before the attention blocks.
    #[arg(long)]
    projected_fusion: bool,
    /// Drop the text slice (ID-only ablation).
    #[arg(long)]
    id_only: bool,
}

#[derive(Args)]
struct PretrainSeq {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long)]
    graph_ckpt: Option<PathBuf>,
    #[arg(long)]
    kt_ckpt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.2)]
    mask_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Finetune {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long)]
    graph_ckpt: Option<PathBuf>,
    #[arg(long)]
    kt_ckpt: Option<PathBuf>,
    #[arg(long)]
    seq_ckpt: Option<PathBuf>,
    /// Fine-tune without the pre-trained checkpoints.
    #[arg(long)]
    from_scratch: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    adapted_out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Recommend {
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    data: DataArg,
    /// Only this learner.
    #[arg(long)]
    learner: Option<String>,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    data: DataArg,
    /// Graph file; defaults to the data directory's graph.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// K-Means clusters for the DBI diagnostics; round(sqrt(K)) when unset.
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EmbedReport {
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long)]
    adapted: Option<PathBuf>,
    /// Cluster count; round(sqrt(K)) when unset.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the json report here instead of printing the table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Run {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Drop a stage (repeatable), e.g. `--no-stage graph`.
    #[arg(long = "no-stage")]
    no_stage: Vec<String>,
    #[arg(long)]
    from_scratch: bool,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    kind: &'static str,
    field: Option<String>,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::InvalidArgument { field, .. } => Failure {
                code: 3,
                kind: "config",
                field: Some(field.clone()),
                message: e.to_string(),
            },
            _ => Failure {
                code: 1,
                kind: "runtime",
                field: None,
                message: e.to_string(),
            },
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn need<'a, T>(v: &'a Option<T>, field: &str) -> CliResult<&'a T> {
    v.as_ref().ok_or_else(|| Failure {
        code: 3,
        kind: "config",
        field: Some(field.to_string()),
        message: format!("missing required argument --{}", field.replace('_', "-")),
    })
}

fn init_logging(level: log::LevelFilter, path: Option<&Path>) -> Result<(), String> {
    let mut dispatch = fern::Dispatch::new().level(level).chain(
        fern::Dispatch::new()
            .format(|out, msg, rec| out.finish(format_args!("[{}] {}", rec.level(), msg)))
            .chain(std::io::stderr()),
    );
    if let Some(p) = path {
        let file = fern::log_file(p).map_err(|e| format!("cannot open log {}: {e}", p.display()))?;
        dispatch = dispatch.chain(
            fern::Dispatch::new()
                .format(|out, msg, rec| {
                    let millis = std::time::SystemTime::now()
                        .duration_since(std::time::UNIX_EPOCH)
                        .map_or(0, |d| d.as_millis());
                    let line = serde_json::json!({
                        "ts_ms": millis as u64,
                        "level": rec.level().to_string(),
                        "target": rec.target(),
                        "message": msg.to_string(),
                    });
                    out.finish(format_args!("{line}"))
                })
                .chain(file),
        );
    }
    dispatch.apply().map_err(|e| e.to_string())
}

fn read_data(arg: &DataArg) -> CliResult<(PathBuf, Dataset)> {
    let dir = need(&arg.data, "data")?.clone();
    let ds = workflow::read_dataset(&dir)?;
    Ok((dir, ds))
}

fn gen_data(a: &GenData) -> CliResult {
    let dir = need(&a.out_dir, "out_dir")?;
    std::fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io {
        path: dir.clone(),
        source: e,
    }))?;
    let graph = planted_graph(a.concepts, a.out_degree, a.seed)?;
    let sequences = generate_synthetic(
        &SyntheticConfig {
            num_concepts: a.concepts,
            num_learners: a.learners,
            walk_bias: a.walk_bias,
            seed: a.seed,
            min_len: a.min_len,
            max_len: a.max_len,
            start: None,
        },
        &graph,
    )?;
    let ds = Dataset {
        sequences,
        vocab: ConceptVocab::from_names(synthetic_names(a.concepts)),
        graph,
    };
    workflow::write_dataset(&ds, dir)?;
    log::info!("wrote {} learners over {} concepts to {}", a.learners, a.concepts, dir.display());
    Ok(())
}

fn build_graph(a: &BuildGraph) -> CliResult {
    let path = need(&a.sequences, "sequences")?;
    let dir = need(&a.out_dir, "out_dir")?;
    std::fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io {
        path: dir.clone(),
        source: e,
    }))?;
    let loaded = load_sequences(path, SequenceFormat::from_path(path))?;
    let split = split_leave_one_out(&loaded.sequences)?;
    let graph = build_transition_graph(&split.train_sequences(), loaded.vocab.len(), a.min_count, a.min_ratio)?;
    log::info!("transition graph: {} nodes, {} edges", graph.num_nodes(), graph.num_edges());
    let ds = Dataset {
        sequences: loaded.sequences,
        vocab: loaded.vocab,
        graph,
    };
    workflow::write_dataset(&ds, dir)?;
    Ok(())
}

fn enhance(a: &Enhance) -> CliResult {
    let (dir, ds) = read_data(&a.data)?;
    let cache = a.cache.clone().unwrap_or_else(|| dir.join(workflow::TEXT_CACHE_FILE));
    let provider: Box<dyn LlmProvider> = match a.provider.as_str() {
        "synthetic" => Box::new(FixtureProvider::new(synthetic_fixture(&ds.vocab))),
        "fixture" => Box::new(FixtureProvider::load(need(&a.fixture, "fixture")?)?),
        "remote" => Box::new(RemoteProvider::from_env(need(&a.endpoint, "endpoint")?.clone(), a.llm_model.clone())?),
        other => {
            return Err(Error::InvalidArgument {
                field: "provider".into(),
                message: format!("unknown provider `{other}`"),
            }
            .into())
        }
    };
    let opts = EnhanceOptions {
        max_prompt_neighbors: a.max_prompt_neighbors,
        ..Default::default()
    };
    let texts = enhance_concepts(&ds.graph, &ds.vocab, provider.as_ref(), &cache, &opts)?;
    log::info!("{} concept texts ready, {} provider calls", texts.len(), provider.calls());
    Ok(())
}

fn encode(a: &Encode) -> CliResult {
    let (dir, ds) = read_data(&a.data)?;
    let texts_path = a.texts.clone().unwrap_or_else(|| dir.join(workflow::TEXT_CACHE_FILE));
    let texts = load_concept_texts(&texts_path, &ds.vocab)?;
    let out = a.out.clone().unwrap_or_else(|| dir.join(workflow::RAW_TABLE_FILE));
    let encoder: Box<dyn TextEncoder> = match a.backend.as_str() {
        "hash" => Box::new(HashEncoder::new(a.dim)),
        "lm" => {
            let Some((program, args)) = a.lm_command.split_first() else {
                return Err(need::<()>(&None, "lm_command").unwrap_err());
            };
            Box::new(ExternalLmEncoder::new(program.clone(), args.to_vec(), a.dim))
        }
        other => {
            return Err(Error::InvalidArgument {
                field: "backend".into(),
                message: format!("unknown backend `{other}`"),
            }
            .into())
        }
    };
    let table = workflow::encode_concepts(&texts, &ds.vocab, encoder.as_ref())?;
    table.save(&out)?;
    Ok(())
}

fn pretrain_graph(a: &PretrainGraph) -> CliResult {
    let (_, ds) = read_data(&a.data)?;
    let raw = EmbeddingTable::load(need(&a.raw, "raw")?)?;
    let out = need(&a.out, "out")?;
    let cfg = AdapterConfig {
        layers: a.layers,
        aggregation: if a.directed {
            Aggregation::Directed
        } else {
            Aggregation::Undirected
        },
        ..AdapterConfig::new(raw.dim(), a.dim)
    };
    let mut adapter = GraphAdapter::new(cfg, a.seed)?;
    let losses = pretrain_adapter(
        &mut adapter,
        &ds.graph,
        &raw,
        &ContrastiveConfig {
            gamma: a.gamma,
            tau: a.tau,
            epochs: a.epochs,
            learning_rate: a.lr,
            seed: a.seed,
            ..Default::default()
        },
    )?;
    log::info!("graph pre-training final loss {:.6}", losses.last().copied().unwrap_or(f64::NAN));
    adapter.to_checkpoint().save(out)?;
    if let Some(p) = &a.adapted_out {
        adapter.adapt(&ds.graph.full_view(), &raw)?.save(p)?;
    }
    Ok(())
}

fn pretrain_kt_cmd(a: &PretrainKt) -> CliResult {
    let (_, ds) = read_data(&a.data)?;
    let out = need(&a.out, "out")?;
    let split = split_leave_one_out(&ds.sequences)?;
    let mut model = KtModel::new(ds.vocab.len(), a.hidden, a.seed)?;
    let losses = pretrain_kt(
        &mut model,
        &split.train_sequences(),
        &KtTrainConfig {
            epochs: a.epochs,
            learning_rate: a.lr,
            batch_size: a.batch_size,
            seed: a.seed,
            ..Default::default()
        },
    )?;
    log::info!("kt pre-training final loss {:.6}", losses.last().copied().unwrap_or(f64::NAN));
    model.to_checkpoint().save(out)?;
    Ok(())
}

impl ModelArgs {
    fn config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            kt_hidden: self.kt_hidden,
            blocks: self.blocks,
            heads: self.heads,
            max_len: self.max_len,
            projected_fusion: self.projected_fusion,
            id_only: self.id_only,
            seed,
            ..Default::default()
        }
    }
}

/// Builds a model whose widths agree with the stage checkpoints it will load.
fn model_for(ds: &Dataset, raw: EmbeddingTable, args: &ModelArgs, seed: u64, ckpts: &[&PathBuf]) -> CliResult<ModelState> {
    let mut cfg = args.config(seed);
    for p in ckpts {
        let ckpt = Checkpoint::load(p)?;
        match ckpt.kind.as_str() {
            "adapter" => {
                cfg.dim = ckpt.meta_usize("dim")?;
                cfg.gcn_layers = ckpt.meta_usize("layers")?;
            }
            "ktrace" => cfg.kt_hidden = ckpt.meta_usize("hidden")?,
            _ => {}
        }
    }
    if cfg.dim != args.dim || cfg.kt_hidden != args.kt_hidden {
        log::info!("using widths from checkpoints: dim {}, kt hidden {}", cfg.dim, cfg.kt_hidden);
    }
    Ok(ModelState::new(&cfg, raw, ds.graph.clone())?)
}

fn pretrain_seq(a: &PretrainSeq) -> CliResult {
    let (_, ds) = read_data(&a.data)?;
    let raw = EmbeddingTable::load(need(&a.raw, "raw")?)?;
    let out = need(&a.out, "out")?;
    let inputs: Vec<&PathBuf> = a.graph_ckpt.iter().chain(&a.kt_ckpt).collect();
    let state = model_for(&ds, raw, &a.model, a.seed, &inputs)?;
    let mut stage = StageConfig::new(StageKind::SeqSsl)
        .with_epochs(a.epochs)
        .with_lr(a.lr)
        .with_batch_size(a.batch_size)
        .with_seed(a.seed)
        .with_output(out);
    stage.mask_prob = a.mask_prob;
    stage.checkpoints_in = inputs.into_iter().cloned().collect();
    let split = split_leave_one_out(&ds.sequences)?;
    run_pipeline(&[stage], &split, state, &PipelineOptions::default())?;
    Ok(())
}

fn finetune_cmd(a: &Finetune) -> CliResult {
    let (_, ds) = read_data(&a.data)?;
    let raw = EmbeddingTable::load(need(&a.raw, "raw")?)?;
    let out = need(&a.out, "out")?;
    let inputs: Vec<&PathBuf> = a.graph_ckpt.iter().chain(&a.kt_ckpt).chain(&a.seq_ckpt).collect();
    let state = model_for(&ds, raw, &a.model, a.seed, &inputs)?;
    let mut stage = StageConfig::new(StageKind::Finetune)
        .with_epochs(a.epochs)
        .with_lr(a.lr)
        .with_batch_size(a.batch_size)
        .with_seed(a.seed)
        .with_output(out);
    stage.patience = a.patience;
    stage.checkpoints_in = inputs.into_iter().cloned().collect();
    let split = split_leave_one_out(&ds.sequences)?;
    let opts = PipelineOptions {
        from_scratch: a.from_scratch,
        ..Default::default()
    };
    let outcome = run_pipeline(&[stage], &split, state, &opts)?;
    if let Some(r) = &outcome.finetune {
        log::info!("best validation MRR {:.4}", r.best_val_mrr);
    }
    if let Some(p) = &a.adapted_out {
        outcome.state.adapted_table()?.save(p)?;
    }
    Ok(())
}

fn load_model(path: &Path) -> CliResult<ModelState> {
    Ok(ModelState::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn recommend(a: &Recommend) -> CliResult {
    let state = load_model(need(&a.model, "model")?)?;
    let (_, ds) = read_data(&a.data)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut found = false;
    for s in ds.sequences.iter().filter(|s| a.learner.as_ref().is_none_or(|l| *l == s.learner)) {
        found = true;
        let recs = state.recommend(&s.records, a.top_k)?;
        let items: Vec<serde_json::Value> = recs
            .iter()
            .map(|&(c, score)| serde_json::json!({ "concept": ds.vocab.name(c), "score": score }))
            .collect();
        let line = serde_json::json!({ "learner": s.learner, "recommendations": items });
        match writeln!(out, "{line}") {
            Ok(()) => {}
            // Reader went away (e.g. `| head`).
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => return Ok(()),
            Err(e) => return Err(Error::Format(e.to_string()).into()),
        }
    }
    if !found {
        return Err(Error::InvalidArgument {
            field: "learner".into(),
            message: format!("no learner `{}`", a.learner.clone().unwrap_or_default()),
        }
        .into());
    }
    Ok(())
}

fn evaluate(a: &Evaluate) -> CliResult {
    let model_path = need(&a.model, "model")?;
    let out = need(&a.out, "out")?;
    let (_, mut ds) = read_data(&a.data)?;
    if let Some(g) = &a.graph {
        ds.graph = conceptrec::kgraph::load_graph(g, &ds.vocab)?.0;
    }
    let state = load_model(model_path)?;
    let split = split_leave_one_out(&ds.sequences)?;
    let eval = evaluate_model(
        &state,
        &split,
        &ds.graph,
        &EvalOptions {
            clusters: a.clusters,
            seed: a.seed,
        },
    )?;
    std::fs::write(out, eval.report.to_json()).map_err(|e| Failure::from(Error::Io {
        path: out.clone(),
        source: e,
    }))?;
    Ok(())
}

fn embed_report(a: &EmbedReport) -> CliResult {
    let raw = EmbeddingTable::load(need(&a.raw, "raw")?)?;
    let adapted = EmbeddingTable::load(need(&a.adapted, "adapted")?)?;
    let k = a
        .k
        .unwrap_or_else(|| ((raw.len() as f64).sqrt().round() as usize).max(2));
    let report = embedding_report(&raw, &adapted, k, a.seed)?;
    match &a.out {
        Some(p) => std::fs::write(p, report.to_json()).map_err(|e| Failure::from(Error::Io {
            path: p.clone(),
            source: e,
        }))?,
        None => print!("{}", report.to_table()),
    }
    Ok(())
}

fn run(a: &Run) -> CliResult {
    let path = need(&a.config, "config")?;
    let mut cfg = PipelineConfig::load(path)?;
    cfg.pipeline.skip.extend(a.no_stage.iter().cloned());
    cfg.pipeline.from_scratch |= a.from_scratch;
    cfg.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    let out = workflow::run_from_config(&cfg, base)?;
    if let Some(g) = out.gamma {
        log::info!("selected gamma {g}");
    }
    log::info!(
        "report written to {}: HR@1 {:.4}, NDCG@5 {:.4}, MRR {:.4}",
        out.out_dir.join(workflow::REPORT_FILE).display(),
        out.report.hr_at_1,
        out.report.ndcg_at_5,
        out.report.mrr
    );
    Ok(())
}

fn dispatch(cmd: &Command) -> CliResult {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::BuildGraph(a) => build_graph(a),
        Command::Enhance(a) => enhance(a),
        Command::Encode(a) => encode(a),
        Command::PretrainGraph(a) => pretrain_graph(a),
        Command::PretrainKt(a) => pretrain_kt_cmd(a),
        Command::PretrainSeq(a) => pretrain_seq(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Recommend(a) => recommend(a),
        Command::Evaluate(a) => evaluate(a),
        Command::EmbedReport(a) => embed_report(a),
        Command::Run(a) => run(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging(cli.log_level, cli.log.as_deref()) {
        eprintln!("{}", serde_json::json!({ "error": "config", "field": "log", "message": e }));
        return ExitCode::from(3);
    }
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = serde_json::json!({ "error": f.kind, "field": f.field, "message": f.message });
            eprintln!("{line}");
            ExitCode::from(f.code)
        }
    }
}
