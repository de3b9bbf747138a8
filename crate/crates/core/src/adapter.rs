//! Graph adapter: a GCN over the knowledge graph whose input is the projected
//! text encoding, pre-trained by contrasting two edge-dropout views.

use rand::Rng;

use crate::autodiff::{Bound, Tape, Var};
use crate::encoder::{EmbeddingTable, Stage};
use crate::error::{Error, Result};
use crate::kgraph::{make_views, GraphView, KnowledgeGraph};
use crate::params::{Checkpoint, Optimizer, OptimizerKind, ParamId, ParamStore};
use crate::rng::{self, streams};
use crate::tensor::{l2_norm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Mean over the union of in- and out-neighbors.
    Undirected,
    /// Mean over in-neighbors only.
    Directed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterConfig {
    pub native_dim: usize,
    pub dim: usize,
    pub layers: usize,
    pub activation: Activation,
    pub aggregation: Aggregation,
}

impl AdapterConfig {
    pub fn new(native_dim: usize, dim: usize) -> Self {
        Self {
            native_dim,
            dim,
            layers: 2,
            activation: Activation::Tanh,
            aggregation: Aggregation::Undirected,
        }
    }
}

/// Input projection plus one unshared affine map per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphAdapter {
    cfg: AdapterConfig,
    params: ParamStore,
    proj: ParamId,
    layers: Vec<(ParamId, ParamId)>,
}

impl GraphAdapter {
    /// Uniform init in `±1/sqrt(dim)`.
    pub fn new(cfg: AdapterConfig, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, streams::ADAPTER_INIT);
        let bound = 1.0 / (cfg.dim as f64).sqrt();
        Self::build(cfg, |r, c| Matrix::uniform(r, c, bound, &mut rng))
    }

    /// Identity projection and layer maps, zero biases. Needs `native_dim == dim`.
    pub fn identity(cfg: AdapterConfig) -> Result<Self> {
        if cfg.native_dim != cfg.dim {
            return Err(Error::invalid("dim", "identity adapter needs native_dim == dim"));
        }
        Self::build(cfg, |r, c| if r == c { Matrix::identity(r) } else { Matrix::zeros(r, c) })
    }

    fn build(cfg: AdapterConfig, mut init: impl FnMut(usize, usize) -> Matrix) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::invalid("layers", "need at least one GCN layer"));
        }
        if cfg.dim == 0 || cfg.native_dim == 0 {
            return Err(Error::invalid("dim", "widths must be positive"));
        }
        let mut params = ParamStore::new();
        let proj = params.add("proj", init(cfg.native_dim, cfg.dim));
        let layers = (0..cfg.layers)
            .map(|l| {
                let w = params.add(format!("layer{l}.w"), init(cfg.dim, cfg.dim));
                let b = params.add(format!("layer{l}.b"), init(1, cfg.dim).map(|_| 0.0));
                (w, b)
            })
            .collect();
        Ok(Self {
            cfg,
            params,
            proj,
            layers,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn projection(&self) -> &Matrix {
        self.params.get(self.proj)
    }

    pub fn layer_weights(&self, layer: usize) -> (&Matrix, &Matrix) {
        let (w, b) = self.layers[layer];
        (self.params.get(w), self.params.get(b))
    }

    /// Row-normalized aggregation matrix of a view: `A[k][i] = 1/|N_k|` for `i ∈ N_k`.
    pub fn aggregation_matrix(&self, view: &GraphView<'_>) -> Matrix {
        let lists = match self.cfg.aggregation {
            Aggregation::Undirected => view.undirected_neighbors(),
            Aggregation::Directed => view.in_neighbors(),
        };
        let n = view.num_nodes();
        let mut a = Matrix::zeros(n, n);
        for (k, list) in lists.iter().enumerate() {
            let w = 1.0 / list.len().max(1) as f64;
            for &i in list {
                a.set(k, i, a.get(k, i) + w);
            }
        }
        a
    }

    fn activate(&self, tape: &mut Tape, x: Var) -> Var {
        match self.cfg.activation {
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }

    /// GCN layers on an already projected `h0`.
    pub fn gcn_tape(&self, tape: &mut Tape, bound: &Bound, h0: Var, agg: Var) -> Var {
        let mut h = h0;
        for &(w, b) in &self.layers {
            let lin = tape.matmul(h, bound[w]);
            let z = tape.add_row(lin, bound[b]);
            let msg = tape.matmul(agg, z);
            let sum = tape.add(z, msg);
            h = self.activate(tape, sum);
        }
        h
    }

    /// Projection followed by the GCN layers.
    pub fn forward_tape(&self, tape: &mut Tape, bound: &Bound, raw: Var, agg: Var) -> Var {
        let h0 = tape.matmul(raw, bound[self.proj]);
        self.gcn_tape(tape, bound, h0, agg)
    }

    /// Raw text vectors mapped to width `dim`.
    pub fn project(&self, raw: &EmbeddingTable) -> Result<EmbeddingTable> {
        crate::encoder::project(raw, self.cfg.dim, self.projection())
    }

    /// Adapted embeddings of every concept under `view`.
    pub fn adapt(&self, view: &GraphView<'_>, raw: &EmbeddingTable) -> Result<EmbeddingTable> {
        gcn_forward(self, view, &self.project(raw)?)
    }

    pub fn push_checkpoint(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.set_meta(&format!("{prefix}native_dim"), self.cfg.native_dim as f64);
        ckpt.set_meta(&format!("{prefix}dim"), self.cfg.dim as f64);
        ckpt.set_meta(&format!("{prefix}layers"), self.cfg.layers as f64);
        ckpt.set_meta(
            &format!("{prefix}tanh"),
            f64::from(u8::from(self.cfg.activation == Activation::Tanh)),
        );
        ckpt.set_meta(
            &format!("{prefix}directed"),
            f64::from(u8::from(self.cfg.aggregation == Aggregation::Directed)),
        );
        ckpt.push_store(prefix, &self.params);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let cfg = AdapterConfig {
            native_dim: ckpt.meta_usize(&format!("{prefix}native_dim"))?,
            dim: ckpt.meta_usize(&format!("{prefix}dim"))?,
            layers: ckpt.meta_usize(&format!("{prefix}layers"))?,
            activation: if ckpt.meta(&format!("{prefix}tanh"))? != 0.0 {
                Activation::Tanh
            } else {
                Activation::Identity
            },
            aggregation: if ckpt.meta(&format!("{prefix}directed"))? != 0.0 {
                Aggregation::Directed
            } else {
                Aggregation::Undirected
            },
        };
        let mut adapter = Self::build(cfg, Matrix::zeros)?;
        ckpt.fill_store(prefix, &mut adapter.params)?;
        Ok(adapter)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new("adapter");
        self.push_checkpoint(&mut ckpt, "");
        ckpt
    }
}

/// Runs the GCN layers of `adapter` over `view`, starting from `init`
/// (text vectors already projected to the adapter width).
pub fn gcn_forward(adapter: &GraphAdapter, view: &GraphView<'_>, init: &EmbeddingTable) -> Result<EmbeddingTable> {
    if init.len() != view.num_nodes() {
        return Err(Error::UnknownConcept(format!(
            "{} (init covers only {} nodes)",
            init.len().min(view.num_nodes()),
            init.len()
        )));
    }
    if init.dim() != adapter.cfg.dim {
        return Err(Error::Shape(format!(
            "init width {} vs adapter width {}",
            init.dim(),
            adapter.cfg.dim
        )));
    }
    let mut tape = Tape::new();
    let bound = tape.bind(&adapter.params, false);
    let h0 = tape.constant(init.to_matrix());
    let agg = tape.constant(adapter.aggregation_matrix(view));
    let out = adapter.gcn_tape(&mut tape, &bound, h0, agg);
    EmbeddingTable::from_matrix(Stage::GraphAdapted, tape.value(out))
}

/// Contrastive loss between two tables whose rows pair up by concept.
/// Returns the total and the per-concept terms.
pub fn info_nce_loss(
    h1: &EmbeddingTable,
    h2: &EmbeddingTable,
    tau: f64,
    include_positive: bool,
) -> Result<(f64, Vec<f64>)> {
    if h1.len() != h2.len() || h1.dim() != h2.dim() {
        return Err(Error::Shape(format!(
            "tables {}x{} and {}x{}",
            h1.len(),
            h1.dim(),
            h2.len(),
            h2.dim()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("tau", format!("{tau} must be positive")));
    }
    let n = h1.len();
    if n < 2 {
        return Err(Error::invalid("nodes", "contrastive loss needs at least two nodes"));
    }
    let unit = |t: &EmbeddingTable| -> Result<Vec<Vec<f64>>> {
        (0..n)
            .map(|k| {
                let v: Vec<f64> = t.vector(k).iter().map(|&x| f64::from(x)).collect();
                let norm = l2_norm(&v);
                if norm == 0.0 {
                    return Err(Error::invalid("embedding", format!("node {k} has a zero vector")));
                }
                Ok(v.into_iter().map(|x| x / norm).collect())
            })
            .collect()
    };
    let (u1, u2) = (unit(h1)?, unit(h2)?);
    let mut terms = Vec::with_capacity(n);
    for k in 0..n {
        let sims: Vec<f64> = (0..n)
            .map(|i| crate::tensor::dot(&u1[k], &u2[i]) / tau)
            .collect();
        let max = sims
            .iter()
            .enumerate()
            .filter(|&(i, _)| include_positive || i != k)
            .map(|(_, &s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = sims
            .iter()
            .enumerate()
            .filter(|&(i, _)| include_positive || i != k)
            .map(|(_, &s)| (s - max).exp())
            .sum();
        terms.push(max + denom.ln() - sims[k]);
    }
    Ok((terms.iter().sum(), terms))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub gamma: f64,
    pub tau: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub include_positive: bool,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            tau: 0.5,
            epochs: 100,
            learning_rate: 0.05,
            momentum: 0.0,
            include_positive: false,
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma", format!("{} is outside [0, 1)", self.gamma)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau", format!("{} must be positive", self.tau)));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::invalid("lr", "learning rate must be non-negative"));
        }
        Ok(())
    }
}

/// Builds the contrastive objective for one view pair on `tape`.
pub fn contrastive_objective(
    tape: &mut Tape,
    adapter: &GraphAdapter,
    bound: &Bound,
    raw: &Matrix,
    views: (&GraphView<'_>, &GraphView<'_>),
    tau: f64,
    include_positive: bool,
) -> Var {
    let x = tape.constant(raw.clone());
    let a1 = tape.constant(adapter.aggregation_matrix(views.0));
    let a2 = tape.constant(adapter.aggregation_matrix(views.1));
    let h1 = adapter.forward_tape(tape, bound, x, a1);
    let h2 = adapter.forward_tape(tape, bound, x, a2);
    let n1 = tape.l2_normalize_rows(h1);
    let n2 = tape.l2_normalize_rows(h2);
    let sim = tape.matmul_bt(n1, n2);
    let sim = tape.scale(sim, 1.0 / tau);
    tape.info_nce(sim, include_positive)
}

/// Trains the adapter (projection included) for `cfg.epochs` steps, one fresh
/// view pair per epoch. Returns the per-epoch loss.
pub fn pretrain_adapter(
    adapter: &mut GraphAdapter,
    g: &KnowledgeGraph,
    raw: &EmbeddingTable,
    cfg: &ContrastiveConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if raw.len() != g.num_nodes() || raw.dim() != adapter.cfg.native_dim {
        return Err(Error::Shape(format!(
            "raw table {}x{} for {} nodes at native width {}",
            raw.len(),
            raw.dim(),
            g.num_nodes(),
            adapter.cfg.native_dim
        )));
    }
    if g.num_nodes() < 2 {
        return Err(Error::invalid("nodes", "contrastive loss needs at least two nodes"));
    }
    let raw = raw.to_matrix();
    let mut seeds = rng::stream(cfg.seed, streams::VIEWS);
    let mut opt = Optimizer::new(
        OptimizerKind::Sgd {
            momentum: cfg.momentum,
        },
        cfg.learning_rate,
    );
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (v1, v2) = make_views(g, cfg.gamma, seeds.random())?;
        let mut tape = Tape::new();
        let bound = tape.bind(&adapter.params, true);
        let loss = contrastive_objective(&mut tape, adapter, &bound, &raw, (&v1, &v2), cfg.tau, cfg.include_positive);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                stage: "graph".into(),
                epoch,
                step: 0,
            });
        }
        tape.backward(loss);
        let grads = tape.grads_for(&bound);
        opt.step(&mut adapter.params, &grads);
        log::debug!("graph epoch {epoch}: loss {value:.6}");
        history.push(value);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::clustered_graph;
    use crate::gradcheck;
    use crate::tensor::cosine;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(rows: Vec<Vec<f64>>) -> EmbeddingTable {
        EmbeddingTable::from_matrix(Stage::RawText, &Matrix::from_rows(&rows)).unwrap()
    }

    fn random_table(n: usize, dim: usize, seed: u64) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingTable::from_matrix(Stage::RawText, &Matrix::uniform(n, dim, 1.0, &mut rng)).unwrap()
    }

    fn to64(v: &[f32]) -> Vec<f64> {
        v.iter().map(|&x| f64::from(x)).collect()
    }

    #[test]
    fn isolated_node_gets_activation_of_input() {
        let g = KnowledgeGraph::new(3, vec![(0, 1)]).unwrap();
        let cfg = AdapterConfig {
            layers: 1,
            ..AdapterConfig::new(2, 2)
        };
        let adapter = GraphAdapter::identity(cfg).unwrap();
        let init = table(vec![vec![0.1, 0.2], vec![0.3, -0.4], vec![0.7, -1.5]]);
        let out = gcn_forward(&adapter, &g.full_view(), &init).unwrap();
        assert_eq!(out.vector(2), &[(0.7f32 as f64).tanh() as f32, (-1.5f32 as f64).tanh() as f32]);
    }

    #[test]
    fn two_node_linear_message_passing() {
        let g = KnowledgeGraph::new(2, vec![(0, 1), (1, 0)]).unwrap();
        let cfg = AdapterConfig {
            layers: 1,
            activation: Activation::Identity,
            ..AdapterConfig::new(3, 3)
        };
        let adapter = GraphAdapter::identity(cfg).unwrap();
        let init = table(vec![vec![1.0, 2.0, 3.0], vec![-0.5, 0.25, 4.0]]);
        let out = gcn_forward(&adapter, &g.full_view(), &init).unwrap();
        for (c, want) in [0.5, 2.25, 7.0].iter().enumerate() {
            assert_abs_diff_eq!(f64::from(out.vector(0)[c]), *want, epsilon = 1e-6);
            assert_abs_diff_eq!(f64::from(out.vector(1)[c]), *want, epsilon = 1e-6);
        }
    }

    #[test]
    fn unmasked_views_give_identical_outputs() {
        let (g, _) = clustered_graph(10, 2, 0.6, 3).unwrap();
        let adapter = GraphAdapter::new(AdapterConfig::new(5, 4), 1).unwrap();
        let init = adapter.project(&random_table(10, 5, 2)).unwrap();
        let (v1, v2) = make_views(&g, 0.0, 9).unwrap();
        assert_eq!(
            gcn_forward(&adapter, &v1, &init).unwrap(),
            gcn_forward(&adapter, &v2, &init).unwrap()
        );
    }

    #[test]
    fn short_init_is_an_error() {
        let g = KnowledgeGraph::empty(3);
        let adapter = GraphAdapter::new(AdapterConfig::new(2, 2), 0).unwrap();
        let init = random_table(2, 2, 0);
        assert!(matches!(gcn_forward(&adapter, &g.full_view(), &init), Err(Error::UnknownConcept(_))));
    }

    #[test]
    fn info_nce_orthogonal_pair() {
        let h = table(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (loss, per) = info_nce_loss(&h, &h, 1.0, false).unwrap();
        assert_abs_diff_eq!(loss, -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(per[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(per[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn info_nce_errors() {
        let z = table(vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        let ok = table(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let err = info_nce_loss(&ok, &z, 1.0, false).unwrap_err();
        assert!(err.to_string().contains("node 1"));
        let one = table(vec![vec![1.0, 0.0]]);
        assert!(info_nce_loss(&one, &one, 1.0, false).is_err());
        assert!(info_nce_loss(&ok, &ok, 0.0, false).is_err());
    }

    #[test]
    fn info_nce_scale_invariant_and_high_temperature_limit() {
        let a = random_table(7, 4, 11);
        let b = random_table(7, 4, 12);
        let scaled = |t: &EmbeddingTable, s: f64| {
            EmbeddingTable::from_matrix(Stage::RawText, &t.to_matrix().scale(s)).unwrap()
        };
        let base = info_nce_loss(&a, &b, 0.3, false).unwrap().0;
        let (a2, b2) = (scaled(&a, 4.0), scaled(&b, 4.0));
        assert_abs_diff_eq!(info_nce_loss(&a2, &b2, 0.3, false).unwrap().0, base, epsilon = 1e-6);

        let limit = -7.0 * (1.0f64 / 6.0).ln();
        assert_abs_diff_eq!(info_nce_loss(&a, &b, 1e4, false).unwrap().0, limit, epsilon = 1e-3);
    }

    /// Direct transcription of the contrastive sum with no stabilization.
    fn naive_info_nce(a: &EmbeddingTable, b: &EmbeddingTable, tau: f64) -> f64 {
        let n = a.len();
        let mut total = 0.0;
        for k in 0..n {
            let pos = (cosine(&to64(a.vector(k)), &to64(b.vector(k))) / tau).exp();
            let mut denom = 0.0;
            for i in 0..n {
                if i != k {
                    denom += (cosine(&to64(a.vector(k)), &to64(b.vector(i))) / tau).exp();
                }
            }
            total -= (pos / denom).ln();
        }
        total
    }

    #[test]
    fn info_nce_matches_naive_reference() {
        for (n, seed) in [(2, 1), (5, 2), (17, 3), (50, 4)] {
            let a = random_table(n, 6, seed);
            let b = random_table(n, 6, seed + 100);
            for tau in [0.2, 1.0] {
                let fast = info_nce_loss(&a, &b, tau, false).unwrap().0;
                assert_abs_diff_eq!(fast, naive_info_nce(&a, &b, tau), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn tape_objective_matches_table_loss() {
        let (g, _) = clustered_graph(8, 2, 0.7, 5).unwrap();
        let adapter = GraphAdapter::new(AdapterConfig::new(6, 4), 3).unwrap();
        let raw = random_table(8, 6, 4);
        let (v1, v2) = make_views(&g, 0.3, 2).unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(adapter.params(), false);
        let loss = contrastive_objective(&mut tape, &adapter, &bound, &raw.to_matrix(), (&v1, &v2), 0.5, false);
        let h1 = adapter.adapt(&v1, &raw).unwrap();
        let h2 = adapter.adapt(&v2, &raw).unwrap();
        let table_loss = info_nce_loss(&h1, &h2, 0.5, false).unwrap().0;
        assert_abs_diff_eq!(tape.scalar(loss), table_loss, epsilon = 1e-4);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let (g, _) = clustered_graph(6, 2, 0.8, 1).unwrap();
        let mut adapter = GraphAdapter::new(AdapterConfig::new(4, 3), 7).unwrap();
        let before = adapter.params().clone();
        let cfg = ContrastiveConfig {
            learning_rate: 0.0,
            epochs: 5,
            ..Default::default()
        };
        pretrain_adapter(&mut adapter, &g, &random_table(6, 4, 1), &cfg).unwrap();
        assert_eq!(adapter.params(), &before);
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let g = KnowledgeGraph::new(4, vec![(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]).unwrap();
        let adapter = GraphAdapter::new(AdapterConfig::new(5, 4), 5).unwrap();
        let raw = random_table(4, 5, 8).to_matrix();
        let (v1, v2) = make_views(&g, 0.4, 6).unwrap();
        for include_positive in [false, true] {
            let loss_of = |store: &ParamStore| {
                let mut a = adapter.clone();
                *a.params_mut() = store.clone();
                let mut tape = Tape::new();
                let bound = tape.bind(a.params(), false);
                let l = contrastive_objective(&mut tape, &a, &bound, &raw, (&v1, &v2), 1.0, include_positive);
                tape.scalar(l)
            };
            let mut tape = Tape::new();
            let bound = tape.bind(adapter.params(), true);
            let l = contrastive_objective(&mut tape, &adapter, &bound, &raw, (&v1, &v2), 1.0, include_positive);
            tape.backward(l);
            gradcheck::check_store(adapter.params(), &tape.grads_for(&bound), 1e-7, loss_of);
        }
    }

    fn cluster_cosines(t: &EmbeddingTable, labels: &[usize]) -> (f64, f64) {
        let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0, 0.0, 0);
        for a in 0..t.len() {
            for b in a + 1..t.len() {
                let c = cosine(&to64(t.vector(a)), &to64(t.vector(b)));
                if labels[a] == labels[b] {
                    intra += c;
                    ni += 1;
                } else {
                    inter += c;
                    ne += 1;
                }
            }
        }
        (intra / ni as f64, inter / ne as f64)
    }

    #[test]
    fn pretraining_separates_clusters() {
        let (g, labels) = clustered_graph(12, 2, 0.7, 21).unwrap();
        let raw = random_table(12, 8, 22);
        let mut adapter = GraphAdapter::new(AdapterConfig::new(8, 8), 23).unwrap();
        let cfg = ContrastiveConfig {
            epochs: 200,
            seed: 4,
            ..Default::default()
        };
        let history = pretrain_adapter(&mut adapter, &g, &raw, &cfg).unwrap();
        assert!(history.last().unwrap() < &history[0], "{history:?}");
        let out = adapter.adapt(&g.full_view(), &raw).unwrap();
        let (intra, inter) = cluster_cosines(&out, &labels);
        assert!(intra > inter, "intra {intra} inter {inter}");
    }

    #[test]
    fn pretraining_is_deterministic() {
        let (g, _) = clustered_graph(8, 2, 0.7, 1).unwrap();
        let raw = random_table(8, 5, 1);
        let cfg = ContrastiveConfig {
            epochs: 10,
            ..Default::default()
        };
        let run = || {
            let mut a = GraphAdapter::new(AdapterConfig::new(5, 4), 2).unwrap();
            let h = pretrain_adapter(&mut a, &g, &raw, &cfg).unwrap();
            (a, h)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn relabeling_nodes_permutes_outputs() {
        let (g, _) = clustered_graph(9, 3, 0.6, 8).unwrap();
        let perm = [4usize, 7, 0, 2, 8, 1, 6, 3, 5];
        let pg = KnowledgeGraph::new(9, g.edges().iter().map(|&(a, b)| (perm[a], perm[b]))).unwrap();
        let raw = random_table(9, 4, 3);
        let mut prow = vec![vec![0.0; 4]; 9];
        for k in 0..9 {
            prow[perm[k]] = to64(raw.vector(k));
        }
        let praw = table(prow);
        let adapter = GraphAdapter::new(AdapterConfig::new(4, 4), 6).unwrap();
        let out = adapter.adapt(&g.full_view(), &raw).unwrap();
        let pout = adapter.adapt(&pg.full_view(), &praw).unwrap();
        for k in 0..9 {
            for (x, y) in out.vector(k).iter().zip(pout.vector(perm[k])) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let adapter = GraphAdapter::new(AdapterConfig::new(5, 3), 9).unwrap();
        let bytes = adapter.to_checkpoint().to_bytes();
        let back = GraphAdapter::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), "").unwrap();
        assert_eq!(back, adapter);
    }
}
