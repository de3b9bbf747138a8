use std::path::Path;

use conceptrec::config::PipelineConfig;
use conceptrec::datasets::split_leave_one_out;
use conceptrec::encoder::EmbeddingTable;
use conceptrec::evalkit::{evaluate_model, EvalOptions};
use conceptrec::model::ModelState;
use conceptrec::params::Checkpoint;
use conceptrec::trainer::{run_pipeline, PipelineOptions, StageConfig, StageKind};
use conceptrec::workflow::{prepare_dataset, run_from_config, RAW_TABLE_FILE};

const CONFIG: &str = "seed = 5\nout_dir = \"out\"\n\
    [data]\nsynthetic = true\nlearners = 30\nconcepts = 10\nmin_len = 6\nmax_len = 14\n\
    [text]\nnative_dim = 12\n\
    [model]\ndim = 4\nkt_hidden = 4\nblocks = 1\nheads = 2\nmax_len = 16\n\
    [[stage]]\nname = \"graph\"\nepochs = 5\n\
    [[stage]]\nname = \"kt\"\nepochs = 2\nbatch_size = 8\n\
    [[stage]]\nname = \"seq-ssl\"\nepochs = 2\nbatch_size = 8\n\
    [[stage]]\nname = \"finetune\"\nepochs = 4\nbatch_size = 8\n";

fn stage(kind: StageKind, dir: &Path) -> StageConfig {
    let sc = StageConfig::new(kind).with_output(dir.join(kind.default_checkpoint()));
    match kind {
        StageKind::Graph => sc.with_epochs(5),
        StageKind::Kt | StageKind::SeqSsl => sc.with_epochs(2).with_batch_size(8),
        StageKind::Finetune => sc.with_epochs(4).with_batch_size(8),
    }
    .with_seed(5)
}

/// One invocation per stage, chained through checkpoint files, ends where a
/// single invocation of all four stages ends.
#[test]
fn chained_invocations_match_a_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::from_toml(CONFIG).unwrap();
    let one_shot = run_from_config(&cfg, dir.path()).unwrap();

    let ds = prepare_dataset(&cfg, dir.path()).unwrap();
    let split = split_leave_one_out(&ds.sequences).unwrap();
    let raw = EmbeddingTable::load(&dir.path().join("out").join(RAW_TABLE_FILE)).unwrap();
    let fresh = || ModelState::new(&cfg.model_config().unwrap(), raw.clone(), ds.graph.clone()).unwrap();
    let steps = dir.path().join("steps");
    std::fs::create_dir_all(&steps).unwrap();
    let opts = PipelineOptions::default();

    run_pipeline(&[stage(StageKind::Graph, &steps)], &split, fresh(), &opts).unwrap();
    run_pipeline(&[stage(StageKind::Kt, &steps)], &split, fresh(), &opts).unwrap();
    let seq = stage(StageKind::SeqSsl, &steps)
        .with_input(steps.join("graph.ckpt"))
        .with_input(steps.join("kt.ckpt"));
    run_pipeline(&[seq], &split, fresh(), &opts).unwrap();
    let ft = stage(StageKind::Finetune, &steps).with_input(steps.join("seq.ckpt"));
    let chained = run_pipeline(&[ft], &split, fresh(), &opts).unwrap();

    assert_eq!(chained.state, one_shot.outcome.state);
    assert_eq!(chained.finetune, one_shot.outcome.finetune);
    let a = std::fs::read(steps.join("model.ckpt")).unwrap();
    let b = std::fs::read(dir.path().join("out/model.ckpt")).unwrap();
    assert_eq!(a, b);

    let report = evaluate_model(&chained.state, &split, &ds.graph, &EvalOptions { clusters: None, seed: 5 })
        .unwrap()
        .report;
    assert_eq!(report, one_shot.report);
}

#[test]
fn finetune_refuses_partial_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::from_toml(CONFIG).unwrap();
    let ds = prepare_dataset(&cfg, dir.path()).unwrap();
    let split = split_leave_one_out(&ds.sequences).unwrap();
    let raw = EmbeddingTable::new(
        conceptrec::encoder::Stage::RawText,
        3,
        (0..10).map(|i| vec![1.0, i as f32, 0.5]).collect(),
    )
    .unwrap();
    let state = ModelState::new(&cfg.model_config().unwrap(), raw, ds.graph.clone()).unwrap();
    let opts = PipelineOptions::default();
    let out = run_pipeline(&[stage(StageKind::Graph, dir.path())], &split, state.clone(), &opts).unwrap();
    assert!(Checkpoint::load(&dir.path().join("graph.ckpt")).is_ok());

    let ft = stage(StageKind::Finetune, dir.path()).with_input(dir.path().join("graph.ckpt"));
    let err = run_pipeline(std::slice::from_ref(&ft), &split, out.state.clone(), &opts).unwrap_err().to_string();
    assert!(err.contains("kt.ckpt") && err.contains("seq.ckpt") && !err.contains("graph.ckpt"), "{err}");

    let skip = PipelineOptions {
        skip: vec![StageKind::Kt, StageKind::SeqSsl],
        ..Default::default()
    };
    assert!(run_pipeline(&[ft], &split, out.state, &skip).is_ok());
}
