//! Declarative pipeline configuration (TOML).
//!
//! ```toml
//! seed = 7
//! out_dir = "out"
//!
//! [data]
//! synthetic = true
//! learners = 200
//!
//! [model]
//! dim = 16
//!
//! [[stage]]
//! name = "graph"
//! epochs = 100
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::adapter::Aggregation;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{PipelineOptions, StageConfig, StageKind};

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the config file.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub text: TextSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default, rename = "stage")]
    pub stages: Vec<StageSection>,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Interaction file (csv or jsonl). Ignored when `synthetic` is set.
    pub sequences: Option<PathBuf>,
    pub synthetic: bool,
    pub learners: usize,
    pub concepts: usize,
    pub walk_bias: f64,
    /// Successors per concept in the planted graph.
    pub out_degree: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            sequences: None,
            synthetic: false,
            learners: 200,
            concepts: 30,
            walk_bias: 0.8,
            out_degree: 2,
            min_len: 10,
            max_len: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    /// Prerequisite edges (`from<TAB>to`). Without one, real data gets a
    /// transition graph and synthetic data its planted graph.
    pub path: Option<PathBuf>,
    pub min_count: usize,
    pub min_ratio: f64,
}

impl Default for GraphSection {
    fn default() -> Self {
        Self {
            path: None,
            min_count: 2,
            min_ratio: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextSection {
    /// `synthetic`, `fixture` or `remote`.
    pub provider: String,
    pub fixture: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub llm_model: Option<String>,
    /// `hash` or `lm`.
    pub backend: String,
    pub native_dim: usize,
    /// External encoder command for the `lm` backend.
    pub lm_command: Option<Vec<String>>,
    pub max_prompt_neighbors: usize,
}

impl Default for TextSection {
    fn default() -> Self {
        Self {
            provider: "synthetic".into(),
            fixture: None,
            endpoint: None,
            llm_model: None,
            backend: "hash".into(),
            native_dim: 64,
            lm_command: None,
            max_prompt_neighbors: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub dim: usize,
    pub kt_hidden: usize,
    pub gcn_layers: usize,
    /// `undirected` or `directed`.
    pub aggregation: String,
    pub blocks: usize,
    pub heads: usize,
    pub max_len: usize,
    pub projected_fusion: bool,
    pub id_only: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            dim: d.dim,
            kt_hidden: d.kt_hidden,
            gcn_layers: d.gcn_layers,
            aggregation: "undirected".into(),
            blocks: d.blocks,
            heads: d.heads,
            max_len: d.max_len,
            projected_fusion: d.projected_fusion,
            id_only: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub from_scratch: bool,
    /// Stage names dropped from the run.
    pub skip: Vec<String>,
    /// Edge-dropout ratios to select from by validation MRR.
    pub gamma_grid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub name: String,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub mask_prob: Option<f64>,
    pub patience: Option<usize>,
    #[serde(default)]
    pub checkpoints_in: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// K-Means cluster count; `round(sqrt(K))` when unset.
    pub clusters: Option<usize>,
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::invalid(field, "must be positive"));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            // serde reports unknown and missing keys by name
            let field = msg
                .split('`')
                .nth(1)
                .map_or_else(|| "config".to_string(), str::to_string);
            Error::invalid(&field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !d.synthetic && d.sequences.is_none() {
            return Err(Error::invalid("data.sequences", "set a sequence file or `synthetic = true`"));
        }
        if d.synthetic {
            positive("data.learners", d.learners)?;
            if d.concepts < 2 {
                return Err(Error::invalid("data.concepts", "need at least 2 concepts"));
            }
            if !(0.0..=1.0).contains(&d.walk_bias) {
                return Err(Error::invalid("data.walk_bias", "must lie in [0, 1]"));
            }
            if d.out_degree == 0 || d.out_degree >= d.concepts {
                return Err(Error::invalid("data.out_degree", "need 1 <= out_degree < concepts"));
            }
            if d.min_len < 3 || d.min_len > d.max_len {
                return Err(Error::invalid("data.min_len", "need 3 <= min_len <= max_len"));
            }
        }
        if !matches!(self.text.provider.as_str(), "synthetic" | "fixture" | "remote") {
            return Err(Error::invalid("text.provider", "expected synthetic, fixture or remote"));
        }
        if self.text.provider == "fixture" && self.text.fixture.is_none() {
            return Err(Error::invalid("text.fixture", "the fixture provider needs a fixture file"));
        }
        if self.text.provider == "remote" && self.text.endpoint.is_none() {
            return Err(Error::invalid("text.endpoint", "the remote provider needs an endpoint"));
        }
        match self.text.backend.as_str() {
            "hash" => {}
            "lm" if self.text.lm_command.as_ref().is_some_and(|c| !c.is_empty()) => {}
            "lm" => return Err(Error::invalid("text.lm_command", "the lm backend needs a command")),
            _ => return Err(Error::invalid("text.backend", "expected hash or lm")),
        }
        positive("text.native_dim", self.text.native_dim)?;
        self.model_config()?;
        self.stage_configs(Path::new("."))?;
        self.pipeline_options()?;
        if let Some(g) = self.pipeline.gamma_grid.iter().find(|g| !(0.0..1.0).contains(*g)) {
            return Err(Error::invalid("pipeline.gamma_grid", format!("{g} is outside [0, 1)")));
        }
        if self.eval.clusters.is_some_and(|k| k < 2) {
            return Err(Error::invalid("eval.clusters", "need at least 2 clusters"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        positive("model.dim", m.dim)?;
        positive("model.kt_hidden", m.kt_hidden)?;
        positive("model.blocks", m.blocks)?;
        positive("model.heads", m.heads)?;
        positive("model.max_len", m.max_len)?;
        let aggregation = match m.aggregation.as_str() {
            "undirected" => Aggregation::Undirected,
            "directed" => Aggregation::Directed,
            _ => return Err(Error::invalid("model.aggregation", "expected undirected or directed")),
        };
        let width = if m.projected_fusion { m.dim } else { 4 * m.dim };
        if width % m.heads != 0 {
            return Err(Error::invalid("model.heads", format!("{} does not divide width {width}", m.heads)));
        }
        Ok(ModelConfig {
            dim: m.dim,
            kt_hidden: m.kt_hidden,
            gcn_layers: m.gcn_layers,
            aggregation,
            blocks: m.blocks,
            heads: m.heads,
            max_len: m.max_len,
            projected_fusion: m.projected_fusion,
            id_only: m.id_only,
            seed: self.seed,
        })
    }

    /// Stage list with checkpoints under `out_dir`. An empty list means all
    /// four stages with defaults.
    pub fn stage_configs(&self, out_dir: &Path) -> Result<Vec<StageConfig>> {
        let sections: Vec<StageSection> = if self.stages.is_empty() {
            StageKind::ALL
                .iter()
                .map(|s| StageSection {
                    name: s.name().into(),
                    epochs: None,
                    lr: None,
                    seed: None,
                    batch_size: None,
                    gamma: None,
                    tau: None,
                    mask_prob: None,
                    patience: None,
                    checkpoints_in: Vec::new(),
                })
                .collect()
        } else {
            self.stages.clone()
        };
        let mut out = Vec::with_capacity(sections.len());
        for s in sections {
            let kind: StageKind = s
                .name
                .parse()
                .map_err(|_| Error::invalid("stage.name", format!("unknown stage `{}`", s.name)))?;
            let mut c = StageConfig::new(kind).with_seed(s.seed.unwrap_or(self.seed));
            c.epochs = s.epochs.unwrap_or(c.epochs);
            c.lr = s.lr.unwrap_or(c.lr);
            c.batch_size = s.batch_size.unwrap_or(c.batch_size);
            c.gamma = s.gamma.unwrap_or(c.gamma);
            c.tau = s.tau.unwrap_or(c.tau);
            c.mask_prob = s.mask_prob.unwrap_or(c.mask_prob);
            c.patience = s.patience.unwrap_or(c.patience);
            c.checkpoints_in = s.checkpoints_in.iter().map(|p| out_dir.join(p)).collect();
            c.checkpoint_out = Some(out_dir.join(kind.default_checkpoint()));
            positive("stage.batch_size", c.batch_size)?;
            if !(c.lr >= 0.0) {
                return Err(Error::invalid("stage.lr", "must be non-negative"));
            }
            if !(0.0..1.0).contains(&c.gamma) {
                return Err(Error::invalid("stage.gamma", format!("{} is outside [0, 1)", c.gamma)));
            }
            if !(c.tau > 0.0) {
                return Err(Error::invalid("stage.tau", "must be positive"));
            }
            if !(c.mask_prob > 0.0 && c.mask_prob < 1.0) {
                return Err(Error::invalid("stage.mask_prob", "must lie in (0, 1)"));
            }
            out.push(c);
        }
        Ok(out)
    }

    pub fn pipeline_options(&self) -> Result<PipelineOptions> {
        let skip = self
            .pipeline
            .skip
            .iter()
            .map(|s| s.parse().map_err(|_| Error::invalid("pipeline.skip", format!("unknown stage `{s}`"))))
            .collect::<Result<Vec<StageKind>>>()?;
        Ok(PipelineOptions {
            from_scratch: self.pipeline.from_scratch,
            skip,
            metrics_log: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(text: &str) -> String {
        match PipelineConfig::from_toml(text).unwrap_err() {
            Error::InvalidArgument { field, .. } => field,
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = PipelineConfig::from_toml("[data]\nsynthetic = true\n").unwrap();
        assert_eq!(cfg.model_config().unwrap().dim, 64);
        assert_eq!(cfg.model_config().unwrap().blocks, 3);
        assert_eq!(cfg.model_config().unwrap().max_len, 200);
        let stages = cfg.stage_configs(Path::new("o")).unwrap();
        assert_eq!(stages.iter().map(|s| s.stage).collect::<Vec<_>>(), StageKind::ALL);
        assert_eq!(stages[0].checkpoint_out.as_deref(), Some(Path::new("o/graph.ckpt")));
        assert_eq!(stages[3].batch_size, 256);
    }

    #[test]
    fn stage_overrides_apply() {
        let cfg = PipelineConfig::from_toml(
            "seed = 4\n[data]\nsynthetic = true\n[[stage]]\nname = \"graph\"\nepochs = 3\ngamma = 0.4\n[[stage]]\nname = \"finetune\"\nseed = 9\n",
        )
        .unwrap();
        let s = cfg.stage_configs(Path::new(".")).unwrap();
        assert_eq!((s[0].epochs, s[0].gamma, s[0].seed), (3, 0.4, 4));
        assert_eq!(s[1].seed, 9);
    }

    #[test]
    fn validation_names_the_field() {
        assert_eq!(field_of("[data]\nsynthetic = true\nwalk_bias = 2.0\n"), "data.walk_bias");
        assert_eq!(field_of("[data]\n"), "data.sequences");
        assert_eq!(field_of("[data]\nsynthetic = true\n[model]\nheads = 3\ndim = 2\n"), "model.heads");
        assert_eq!(field_of("[data]\nsynthetic = true\n[[stage]]\nname = \"warmup\"\n"), "stage.name");
        assert_eq!(field_of("[data]\nsynthetic = true\nbogus = 1\n"), "bogus");
        assert_eq!(field_of("[data]\nsynthetic = true\n[pipeline]\nskip = [\"nope\"]\n"), "pipeline.skip");
        assert_eq!(field_of("[data]\nsynthetic = true\n[text]\nbackend = \"lm\"\n"), "text.lm_command");
    }
}
