//! Stage 1: train the graph-modality codebook.
//!
//! Two mean-aggregating encoders (node features / structural features) map
//! every node into the code space, where each embedding is softly assigned
//! to the shared codebook by a Gumbel-softmax relaxation (or a hard
//! straight-through strategy). The mixed code embeddings are decoded two
//! ways and trained end to end on
//!
//! ```text
//! L = alpha_edge * ||A - sigmoid(Y Y^T)||^2_mean            (edge reconstruction)
//!   + alpha_node * mean_u (1 - cos(v_u, v_hat_u))^gamma     (node reconstruction)
//!   + beta_kl    * KL(assignments || uniform)               (codebook pressure)
//! ```
//!
//! Everything that matters downstream — the encoders, the codebook, the
//! decoders — is retained at the best validation loss and can be frozen to
//! disk for Stage 2.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codebook::{
    hard_assign_batch_tape, relax_batch_tape, sample_gumbel, Codebook, LogitKind,
    SelectionStrategy, TauSchedule,
};
use crate::gnn::{encode_tape, init_encoder, structure_features, Channel, EncoderParams, EncoderVars};
use crate::graph::{Graph, GraphError, Split};
use crate::metrics::Stage1EpochMetrics;
use crate::numgrad::checkpoint::{CheckpointError, Container};
use crate::numgrad::gradcheck::{grad_check, GradCheckReport};
use crate::numgrad::optim::{AdamState, ParamSet};
use crate::numgrad::tape::{Tape, Var};
use crate::numgrad::tensor::Tensor;
use crate::numgrad::NumError;
use crate::{codebook, rng};

#[derive(Debug, Error)]
pub enum Stage1Error {
    #[error("invalid stage-1 config: {0}")]
    Config(String),
    #[error("node {node} has an all-zero feature row; cosine reconstruction is undefined")]
    ZeroFeatureRow { node: usize },
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Stage-1 hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Config {
    /// Codebook size.
    pub k: usize,
    /// Code embedding width.
    pub d_code: usize,
    /// Hidden widths between the input and `d_code` (same stack shape for
    /// both channels).
    pub hidden: Vec<usize>,
    /// Width of the decoded edge embedding whose Gram matrix predicts
    /// adjacency.
    pub d_edge: usize,
    /// Weight of the node reconstruction term.
    pub alpha_node: f64,
    /// Weight of the edge reconstruction term (1.0 reproduces the standard
    /// objective; 0.0 ablates it).
    pub alpha_edge: f64,
    /// Weight of the KL-to-uniform term.
    pub beta_kl: f64,
    /// Exponent on (1 - cos); must exceed 1 so small errors are damped.
    pub gamma: f64,
    pub logit_kind: LogitKind,
    pub strategy: SelectionStrategy,
    pub tau: TauSchedule,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Early-stopping patience, in epochs without validation improvement.
    pub patience: usize,
    /// Negative pairs drawn per positive edge when sampling.
    pub negative_ratio: usize,
    /// Up to this many nodes the edge loss uses the full dense adjacency;
    /// beyond it, sampled pairs.
    pub full_matrix_threshold: usize,
    /// Use KL(mean assignment || uniform) instead of the per-node mean.
    pub kl_batch_mean: bool,
    /// Add codebook + commitment terms for hard strategies.
    pub vq_terms: bool,
    /// Commitment weight when `vq_terms` is on.
    pub commitment_beta: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            k: 2048,
            d_code: 16,
            hidden: vec![32],
            d_edge: 8,
            alpha_node: 10.0,
            alpha_edge: 1.0,
            beta_kl: 1e-2,
            gamma: 2.0,
            logit_kind: LogitKind::default(),
            strategy: SelectionStrategy::default(),
            tau: TauSchedule::default(),
            epochs: 1000,
            learning_rate: 0.005,
            patience: 50,
            negative_ratio: 5,
            full_matrix_threshold: 2000,
            kl_batch_mean: false,
            vq_terms: false,
            commitment_beta: 0.25,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<(), Stage1Error> {
        let bad = |msg: String| Err(Stage1Error::Config(msg));
        if self.k < 2 {
            return bad(format!("codebook size must be at least 2, got {}", self.k));
        }
        if self.d_code == 0 || self.d_edge == 0 {
            return bad(format!("code widths must be nonzero (d_code {}, d_edge {})", self.d_code, self.d_edge));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return bad(format!("hidden widths must be nonzero, got {:?}", self.hidden));
        }
        for (name, v) in [
            ("alpha_node", self.alpha_node),
            ("alpha_edge", self.alpha_edge),
            ("beta_kl", self.beta_kl),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a non-negative finite weight, got {v}"));
            }
        }
        if !(self.gamma > 1.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must exceed 1, got {}", self.gamma));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1 epoch".into());
        }
        if self.negative_ratio == 0 {
            return bad("negative_ratio must be at least 1".into());
        }
        if !(self.commitment_beta.is_finite() && self.commitment_beta >= 0.0) {
            return bad(format!("commitment_beta must be non-negative, got {}", self.commitment_beta));
        }
        self.tau.validate()?;
        Ok(())
    }

    /// Layer widths of the node-feature encoder for input width `d_in`.
    pub fn node_dims(&self, d_in: usize) -> Vec<usize> {
        let mut dims = vec![d_in];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.d_code);
        dims
    }

    /// Layer widths of the structure encoder; the input width depends on
    /// whether `graph` carries positional coordinates.
    pub fn edge_dims(&self, graph: &Graph) -> Vec<usize> {
        let mut dims = vec![crate::gnn::structure_dim(graph)];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.d_code);
        dims
    }
}

/// Decoders from the code space: `node_proj` reconstructs raw features,
/// `edge_proj` produces the embedding whose inner products predict edges.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub node_proj: Tensor,
    pub edge_proj: Tensor,
}

/// Everything Stage 1 trains.
#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub encoder_node: EncoderParams,
    pub encoder_edge: EncoderParams,
    pub codebook: Codebook,
    pub decoder: DecoderParams,
}

fn glorot(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = gain * (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_raw(rows, cols, (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect())
}

/// Init gain for the edge head, keeping its initial gram logits inside the
/// sigmoid's linear regime. The quantized rows share a large common
/// component (ReLU stacks correlate their outputs), so at ordinary gains
/// the initial gram is uniformly, saturatingly positive: every pair
/// predicts ~1, the sigmoid's slope vanishes, and the head never recovers.
/// Starting near zero instead costs nothing — the loss surface there
/// pushes the head's common-direction response down and its
/// structure-direction response up, which is exactly the split we want.
const EDGE_HEAD_GAIN: f64 = 0.01;

impl Stage1Model {
    /// Fresh model for `graph` under `cfg`, deterministic in `seed`.
    pub fn init(graph: &Graph, cfg: &Stage1Config, seed: u64) -> Result<Self, Stage1Error> {
        let encoder_node = init_encoder(&cfg.node_dims(graph.d_in()), Channel::Node, seed)?;
        let encoder_edge = init_encoder(&cfg.edge_dims(graph), Channel::Edge, seed)?;
        // Seed the codebook from both channels' initial embeddings so every
        // node starts within reach of a codeword; a Gaussian codebook at
        // these widths leaves most rows unused and can funnel a whole
        // channel into a handful of cells.
        let pool = {
            let hn = crate::gnn::encode(&encoder_node, graph, graph.features())?;
            let he = crate::gnn::encode(&encoder_edge, graph, &structure_features(graph))?;
            let mut data = Vec::with_capacity(2 * graph.n() * cfg.d_code);
            data.extend_from_slice(hn.data());
            data.extend_from_slice(he.data());
            Tensor::from_raw(2 * graph.n(), cfg.d_code, data)
        };
        let codebook = Codebook::init_from_samples(&pool, cfg.k, seed)?;
        let mut dec_rng = rng::stream(seed, "stage1-init-decoder");
        let decoder = DecoderParams {
            node_proj: glorot(cfg.d_code, graph.d_in(), 1.0, &mut dec_rng),
            edge_proj: glorot(cfg.d_code, cfg.d_edge, EDGE_HEAD_GAIN, &mut dec_rng),
        };
        Ok(Self { encoder_node, encoder_edge, codebook, decoder })
    }

    /// Canonical flat parameter order shared by the optimizer, the tape
    /// leaves, and checkpoints.
    pub fn to_param_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        self.encoder_node.push_into("encoder_node", &mut set);
        self.encoder_edge.push_into("encoder_edge", &mut set);
        set.push("codebook.e", self.codebook.embeddings().clone());
        set.push("decoder.node_proj", self.decoder.node_proj.clone());
        set.push("decoder.edge_proj", self.decoder.edge_proj.clone());
        set
    }

    /// Rebuilds a model from the canonical order, using `self` as the shape
    /// template.
    pub fn with_params(&self, set: &ParamSet) -> Result<Self, Stage1Error> {
        let mut out = self.clone();
        let mut i = out.encoder_node.read_from(set, 0);
        i = out.encoder_edge.read_from(set, i);
        out.codebook = Codebook::from_tensor(set.tensor(i).clone())?;
        out.decoder.node_proj = set.tensor(i + 1).clone();
        out.decoder.edge_proj = set.tensor(i + 2).clone();
        Ok(out)
    }

    fn layer_counts(&self) -> (usize, usize) {
        (self.encoder_node.layers.len(), self.encoder_edge.layers.len())
    }
}

/// Frozen Stage-1 output: the model plus the assignment geometry it was
/// trained under (Stage 2 must score the same way).
#[derive(Debug, Clone)]
pub struct Stage1Artifacts {
    pub model: Stage1Model,
    pub logit_kind: LogitKind,
    pub strategy: SelectionStrategy,
}

impl Stage1Artifacts {
    pub fn save(&self, dir: &std::path::Path) -> Result<(), Stage1Error> {
        let mut c = Container::new();
        c.set_meta("logit_kind", self.logit_kind.as_str())?;
        c.set_meta("strategy", self.strategy.as_str())?;
        let (ln, le) = self.model.layer_counts();
        c.set_meta("layers_node", ln.to_string())?;
        c.set_meta("layers_edge", le.to_string())?;
        for (prefix, enc) in
            [("encoder_node", &self.model.encoder_node), ("encoder_edge", &self.model.encoder_edge)]
        {
            for (l, layer) in enc.layers.iter().enumerate() {
                c.insert(format!("{prefix}.layer{l}.w_self"), layer.w_self.clone())?;
                c.insert(format!("{prefix}.layer{l}.w_nb"), layer.w_nb.clone())?;
            }
        }
        c.insert("codebook.e", self.model.codebook.embeddings().clone())?;
        c.insert("decoder.node_proj", self.model.decoder.node_proj.clone())?;
        c.insert("decoder.edge_proj", self.model.decoder.edge_proj.clone())?;
        c.save(dir)?;
        Ok(())
    }

    pub fn load(dir: &std::path::Path) -> Result<Self, Stage1Error> {
        let c = Container::load(dir)?;
        let logit_kind: LogitKind =
            c.require_meta("logit_kind")?.parse().map_err(Stage1Error::Config)?;
        let strategy: SelectionStrategy =
            c.require_meta("strategy")?.parse().map_err(Stage1Error::Config)?;
        let layers_node: usize = c.require_meta_parse("layers_node", "a layer count")?;
        let layers_edge: usize = c.require_meta_parse("layers_edge", "a layer count")?;

        let read_encoder = |prefix: &str, count: usize, channel: Channel| -> Result<EncoderParams, Stage1Error> {
            let mut layers = Vec::with_capacity(count);
            for l in 0..count {
                layers.push(crate::gnn::EncoderLayer {
                    w_self: c.require(&format!("{prefix}.layer{l}.w_self"))?.clone(),
                    w_nb: c.require(&format!("{prefix}.layer{l}.w_nb"))?.clone(),
                });
            }
            Ok(EncoderParams { channel, layers })
        };
        let model = Stage1Model {
            encoder_node: read_encoder("encoder_node", layers_node, Channel::Node)?,
            encoder_edge: read_encoder("encoder_edge", layers_edge, Channel::Edge)?,
            codebook: Codebook::from_tensor(c.require("codebook.e")?.clone())?,
            decoder: DecoderParams {
                node_proj: c.require("decoder.node_proj")?.clone(),
                edge_proj: c.require("decoder.edge_proj")?.clone(),
            },
        };
        Ok(Self { model, logit_kind, strategy })
    }
}

/// How the edge loss covers the pair space.
#[derive(Debug, Clone)]
pub enum EdgePlan {
    /// Every ordered pair, diagonal included (dense `n x n` residual).
    Full,
    /// Positive edges plus sampled non-edges.
    Sampled { us: Arc<Vec<usize>>, vs: Arc<Vec<usize>>, targets: Tensor },
}

impl EdgePlan {
    /// All positive edges once (as `u < v`) plus `negative_ratio` sampled
    /// non-edge pairs per positive (self-pairs allowed; the diagonal is
    /// zero in the full matrix too).
    pub fn sample(
        graph: &Graph,
        negative_ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, Stage1Error> {
        let m = graph.num_edges();
        if m == 0 {
            return Err(Stage1Error::Config("cannot sample edge pairs from an edgeless graph".into()));
        }
        let n = graph.n();
        let mut us = Vec::with_capacity(m * (1 + negative_ratio));
        let mut vs = Vec::with_capacity(us.capacity());
        let mut targets = Vec::with_capacity(us.capacity());
        for &(u, v) in graph.edges() {
            us.push(u);
            vs.push(v);
            targets.push(1.0);
        }
        let mut drawn = 0usize;
        while drawn < m * negative_ratio {
            let u = rng.random_range(0..n);
            let v = rng.random_range(0..n);
            if graph.neighbors(u).binary_search(&v).is_ok() {
                continue;
            }
            us.push(u);
            vs.push(v);
            targets.push(0.0);
            drawn += 1;
        }
        let count = targets.len();
        Ok(EdgePlan::Sampled {
            us: Arc::new(us),
            vs: Arc::new(vs),
            targets: Tensor::from_raw(count, 1, targets),
        })
    }
}

/// Mean over rows of `(1 - cos(v_u, v_hat_u))^gamma`, optionally restricted
/// to `rows`. True rows with zero norm are an error; zero predicted rows
/// score cosine 0.
pub fn node_recon_loss_rows(
    v: &Tensor,
    v_hat: &Tensor,
    gamma: f64,
    rows: Option<&[usize]>,
) -> Result<f64, NumError> {
    if v.shape() != v_hat.shape() {
        return Err(NumError::ShapeMismatch {
            op: "node_recon_loss",
            detail: format!("{:?} vs {:?}", v.shape(), v_hat.shape()),
        });
    }
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..v.rows()).collect();
            &all
        }
    };
    if rows.is_empty() {
        return Err(NumError::Invalid("node reconstruction over an empty row set".into()));
    }
    let mut terms = Vec::with_capacity(rows.len());
    for &u in rows {
        if u >= v.rows() {
            return Err(NumError::RowOutOfRange { index: u, rows: v.rows() });
        }
        let a = v.row(u);
        let b = v_hat.row(u);
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 {
            return Err(NumError::Invalid(format!("true feature row {u} has zero norm")));
        }
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = if nb == 0.0 {
            0.0
        } else {
            a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum::<f64>()
        };
        terms.push(pow_gamma(1.0 - cos, gamma));
    }
    Ok(crate::numgrad::kernels::sorted_sum(&mut terms) / rows.len() as f64)
}

/// [`node_recon_loss_rows`] over every row.
pub fn node_recon_loss(v: &Tensor, v_hat: &Tensor, gamma: f64) -> Result<f64, NumError> {
    node_recon_loss_rows(v, v_hat, gamma, None)
}

fn pow_gamma(u: f64, gamma: f64) -> f64 {
    if gamma.fract() == 0.0 && gamma <= 64.0 {
        u.powi(gamma as i32)
    } else {
        ((u + 1e-12).ln() * gamma).exp()
    }
}

/// Mean squared residual `(A_uv - sigmoid(<y_u, y_v>))^2` over every
/// ordered pair including the diagonal. `adjacency` must be square and
/// match `y`'s rows.
pub fn edge_recon_loss(adjacency: &Tensor, y: &Tensor) -> Result<f64, NumError> {
    let n = y.rows();
    if adjacency.shape() != (n, n) {
        return Err(NumError::ShapeMismatch {
            op: "edge_recon_loss",
            detail: format!("adjacency {:?} for {n} embedding rows", adjacency.shape()),
        });
    }
    let d = y.cols();
    let mut gram = vec![0.0; n * n];
    let yt = y.transposed();
    crate::numgrad::kernels::matmul(y.data(), yt.data(), n, d, n, &mut gram);
    let mut terms: Vec<f64> = gram
        .iter()
        .zip(adjacency.data())
        .map(|(&g, &a)| {
            let r = crate::numgrad::kernels::sigmoid(g) - a;
            r * r
        })
        .collect();
    Ok(crate::numgrad::kernels::sorted_sum(&mut terms) / (n * n) as f64)
}

/// Mean squared residual over an explicit pair list.
pub fn edge_recon_loss_sampled(
    us: &[usize],
    vs: &[usize],
    targets: &Tensor,
    y: &Tensor,
) -> Result<f64, NumError> {
    if us.len() != vs.len() || targets.numel() != us.len() || us.is_empty() {
        return Err(NumError::ShapeMismatch {
            op: "edge_recon_loss_sampled",
            detail: format!("{} us, {} vs, {} targets", us.len(), vs.len(), targets.numel()),
        });
    }
    let mut terms = Vec::with_capacity(us.len());
    for ((&u, &v), &t) in us.iter().zip(vs).zip(targets.data()) {
        let dot: f64 = y.row(u).iter().zip(y.row(v)).map(|(a, b)| a * b).sum();
        let r = crate::numgrad::kernels::sigmoid(dot) - t;
        terms.push(r * r);
    }
    Ok(crate::numgrad::kernels::sorted_sum(&mut terms) / us.len() as f64)
}

/// Mean over rows of `KL(p_row || uniform_K) = ln K + sum_j p_j ln p_j`.
pub fn kl_to_uniform(p: &Tensor) -> Result<f64, NumError> {
    let (n, k) = p.shape();
    if n == 0 || k == 0 {
        return Err(NumError::Invalid("KL of an empty assignment batch".into()));
    }
    let ln_k = (k as f64).ln();
    let mut rows = Vec::with_capacity(n);
    for r in 0..n {
        let neg_h: f64 = p.row(r).iter().map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 }).sum();
        rows.push(ln_k + neg_h);
    }
    Ok(crate::numgrad::kernels::sorted_sum(&mut rows) / n as f64)
}

/// `KL(mean_row(p) || uniform_K)` — the batch-mean variant.
pub fn kl_of_mean_to_uniform(p: &Tensor) -> Result<f64, NumError> {
    let (n, k) = p.shape();
    if n == 0 || k == 0 {
        return Err(NumError::Invalid("KL of an empty assignment batch".into()));
    }
    let mut mean = vec![0.0; k];
    crate::numgrad::kernels::column_mean_sorted(p.data(), n, k, &mut mean);
    let neg_h: f64 = mean.iter().map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 }).sum();
    Ok((k as f64).ln() + neg_h)
}

/// Constant graph-side inputs reused across epochs.
struct GraphData {
    x: Tensor,
    s: Tensor,
    adjacency: Arc<Vec<Vec<usize>>>,
    a_dense: Option<Tensor>,
    val_rows: Arc<Vec<usize>>,
}

impl GraphData {
    fn prepare(graph: &Graph, needs_dense: bool) -> Result<Self, Stage1Error> {
        for u in 0..graph.n() {
            if graph.features().row(u).iter().all(|&v| v == 0.0) {
                return Err(Stage1Error::ZeroFeatureRow { node: u });
            }
        }
        Ok(Self {
            x: graph.features().clone(),
            s: structure_features(graph),
            adjacency: Arc::new(graph.adjacency().to_vec()),
            a_dense: needs_dense.then(|| graph.dense_adjacency()),
            val_rows: Arc::new(graph.split_indices(Split::Val)),
        })
    }
}

/// Tape leaves for the whole model, in canonical parameter order.
struct TapeModel {
    enc_node: EncoderVars,
    enc_edge: EncoderVars,
    codebook: Var,
    node_proj: Var,
    edge_proj: Var,
}

impl TapeModel {
    fn from_set(tape: &mut Tape, set: &ParamSet, layers: (usize, usize)) -> Self {
        let (enc_node, i) = EncoderVars::from_params(tape, set, 0, layers.0);
        let (enc_edge, i) = EncoderVars::from_params(tape, set, i, layers.1);
        let codebook = tape.param(set.tensor(i).clone());
        let node_proj = tape.param(set.tensor(i + 1).clone());
        let edge_proj = tape.param(set.tensor(i + 2).clone());
        Self { enc_node, enc_edge, codebook, node_proj, edge_proj }
    }

    fn from_vars(vars: &[Var], layers: (usize, usize)) -> Self {
        let pair = |i: usize| (vars[2 * i], vars[2 * i + 1]);
        let enc_node = EncoderVars { layers: (0..layers.0).map(pair).collect() };
        let enc_edge =
            EncoderVars { layers: (0..layers.1).map(|i| pair(layers.0 + i)).collect() };
        let base = 2 * (layers.0 + layers.1);
        Self {
            enc_node,
            enc_edge,
            codebook: vars[base],
            node_proj: vars[base + 1],
            edge_proj: vars[base + 2],
        }
    }

    fn leaf_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(a, b) in self.enc_node.layers.iter().chain(&self.enc_edge.layers) {
            out.push(a);
            out.push(b);
        }
        out.extend([self.codebook, self.node_proj, self.edge_proj]);
        out
    }
}

/// Per-channel assignment evidence for diagnostics.
enum AssignDiag {
    Soft { p_node: Var, p_edge: Var },
    Hard { idx_node: Arc<Vec<usize>>, idx_edge: Arc<Vec<usize>> },
}

struct LossVars {
    total: Var,
    node: Var,
    edge: Var,
    kl: Var,
    assign: AssignDiag,
}

/// Loss term values plus codebook diagnostics for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Terms {
    pub total: f64,
    pub node: f64,
    pub edge: f64,
    pub kl: f64,
    pub tau: f64,
    pub perplexity: f64,
    pub usage: f64,
}

/// Gumbel noise for one epoch: a matrix per channel (zeros for noise-free
/// strategies or evaluation).
fn draw_noise(
    strategy: SelectionStrategy,
    n: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Tensor) {
    if strategy.uses_noise() {
        let node = Tensor::from_raw(n, k, sample_gumbel(n * k, rng));
        let edge = Tensor::from_raw(n, k, sample_gumbel(n * k, rng));
        (node, edge)
    } else {
        (Tensor::zeros(n, k), Tensor::zeros(n, k))
    }
}

#[allow(clippy::too_many_arguments)]
fn build_loss(
    tape: &mut Tape,
    tm: &TapeModel,
    data: &GraphData,
    cfg: &Stage1Config,
    tau: f64,
    noise_node: &Tensor,
    noise_edge: &Tensor,
    node_rows: Option<Arc<Vec<usize>>>,
    plan: &EdgePlan,
) -> Result<LossVars, Stage1Error> {
    let _n = data.x.rows();
    let k = cfg.k;

    // Encode both channels.
    let xv = tape.constant(data.x.clone());
    let sv = tape.constant(data.s.clone());
    let h_node = encode_tape(tape, &tm.enc_node, data.adjacency.clone(), xv)?;
    let h_edge = encode_tape(tape, &tm.enc_edge, data.adjacency.clone(), sv)?;

    // Quantize against the shared codebook.
    let (z_node, z_edge, kl, assign);
    match cfg.strategy {
        SelectionStrategy::GumbelSoftmax => {
            let nn = tape.constant(noise_node.clone());
            let ne = tape.constant(noise_edge.clone());
            let rn = relax_batch_tape(tape, h_node, tm.codebook, cfg.logit_kind, tau, nn)?;
            let re = relax_batch_tape(tape, h_edge, tm.codebook, cfg.logit_kind, tau, ne)?;
            z_node = rn.z;
            z_edge = re.z;
            let ln_k = (k as f64).ln();
            let kl_of = |tape: &mut Tape, p: Var, log_p: Var| -> Result<Var, NumError> {
                if cfg.kl_batch_mean {
                    let pb = tape.mean_rows(p)?;
                    let shifted = tape.affine(pb, 1.0, 1e-30)?;
                    let lg = tape.log(shifted)?;
                    let prod = tape.multiply(pb, lg)?;
                    let s = tape.sum(prod)?;
                    tape.affine(s, 1.0, ln_k)
                } else {
                    let prod = tape.multiply(p, log_p)?;
                    let ones_k = tape.constant(Tensor::filled(k, 1, 1.0)?);
                    let row_sums = tape.matmul(prod, ones_k)?;
                    let m = tape.mean(row_sums)?;
                    tape.affine(m, 1.0, ln_k)
                }
            };
            let kl_n = kl_of(tape, rn.p, rn.log_p)?;
            let kl_e = kl_of(tape, re.p, re.log_p)?;
            let kl_sum = tape.add(kl_n, kl_e)?;
            kl = tape.affine(kl_sum, 0.5, 0.0)?;
            assign = AssignDiag::Soft { p_node: rn.p, p_edge: re.p };
        }
        hard => {
            let (idx_node, q_node) =
                hard_assign_batch_tape(tape, h_node, tm.codebook, hard, cfg.logit_kind, noise_node)?;
            let (idx_edge, q_edge) =
                hard_assign_batch_tape(tape, h_edge, tm.codebook, hard, cfg.logit_kind, noise_edge)?;
            z_node = q_node;
            z_edge = q_edge;
            // One-hot assignments have KL(p || uniform) = ln K exactly; it
            // carries no gradient, but stays in the reported total.
            kl = tape.scalar_const((k as f64).ln())?;
            assign = AssignDiag::Hard { idx_node, idx_edge };
        }
    }

    // Node reconstruction: scaled cosine error against raw features.
    let v_hat = tape.matmul(z_node, tm.node_proj)?;
    let v_hat_n = tape.row_l2_normalize(v_hat)?;
    let v_norm = {
        let v = tape.constant(data.x.clone());
        tape.row_l2_normalize(v)?
    };
    let cos_terms = tape.multiply(v_hat_n, v_norm)?;
    let ones_d = tape.constant(Tensor::filled(data.x.cols(), 1, 1.0)?);
    let cos = tape.matmul(cos_terms, ones_d)?; // n x 1
    let one_minus = tape.affine(cos, -1.0, 1.0)?;
    let powed = if cfg.gamma.fract() == 0.0 && cfg.gamma <= 64.0 {
        tape.powi(one_minus, cfg.gamma as i32)?
    } else {
        let shifted = tape.affine(one_minus, 1.0, 1e-12)?;
        let lg = tape.log(shifted)?;
        let scaled = tape.affine(lg, cfg.gamma, 0.0)?;
        tape.exp(scaled)?
    };
    let node = match node_rows {
        Some(rows) => {
            let picked = tape.gather_rows(powed, rows)?;
            tape.mean(picked)?
        }
        None => tape.mean(powed)?,
    };

    // Edge reconstruction from the structure channel's codes.
    let y = tape.matmul(z_edge, tm.edge_proj)?;
    let edge = match plan {
        EdgePlan::Full => {
            let a = tape.constant(
                data.a_dense.clone().expect("dense adjacency prepared for full edge plans"),
            );
            let y_t = tape.transpose(y)?;
            let gram = tape.matmul(y, y_t)?;
            let sig = tape.sigmoid(gram)?;
            let neg_a = tape.affine(a, -1.0, 0.0)?;
            let diff = tape.add(sig, neg_a)?;
            let sq = tape.multiply(diff, diff)?;
            tape.mean(sq)?
        }
        EdgePlan::Sampled { us, vs, targets } => {
            let yu = tape.gather_rows(y, us.clone())?;
            let yv = tape.gather_rows(y, vs.clone())?;
            let prod = tape.multiply(yu, yv)?;
            let ones_e = tape.constant(Tensor::filled(cfg.d_edge, 1, 1.0)?);
            let dots = tape.matmul(prod, ones_e)?;
            let sig = tape.sigmoid(dots)?;
            let t = tape.constant(targets.clone());
            let neg_t = tape.affine(t, -1.0, 0.0)?;
            let diff = tape.add(sig, neg_t)?;
            let sq = tape.multiply(diff, diff)?;
            tape.mean(sq)?
        }
    };

    let mut total = {
        let e = tape.affine(edge, cfg.alpha_edge, 0.0)?;
        let nterm = tape.affine(node, cfg.alpha_node, 0.0)?;
        let kterm = tape.affine(kl, cfg.beta_kl, 0.0)?;
        let en = tape.add(e, nterm)?;
        tape.add(en, kterm)?
    };

    // Optional codebook/commitment pull for hard strategies (the relaxation
    // already trains the codebook through the mixing weights).
    if cfg.vq_terms {
        if let AssignDiag::Hard { idx_node, idx_edge } = &assign {
            for (h, idx) in [(h_node, idx_node.clone()), (h_edge, idx_edge.clone())] {
                let h_frozen = tape.constant(tape.value(h).clone());
                let picked = tape.gather_rows(tm.codebook, idx.clone())?;
                let neg_h = tape.affine(h_frozen, -1.0, 0.0)?;
                let d_cb = tape.add(picked, neg_h)?;
                let sq_cb = tape.multiply(d_cb, d_cb)?;
                let cb_term = tape.mean(sq_cb)?;

                let picked_frozen = tape.constant(tape.value(picked).clone());
                let neg_e = tape.affine(picked_frozen, -1.0, 0.0)?;
                let d_cm = tape.add(h, neg_e)?;
                let sq_cm = tape.multiply(d_cm, d_cm)?;
                let cm = tape.mean(sq_cm)?;
                let cm_term = tape.affine(cm, cfg.commitment_beta, 0.0)?;

                let vq = tape.add(cb_term, cm_term)?;
                total = tape.add(total, vq)?;
            }
        }
    }

    Ok(LossVars { total, node, edge, kl, assign })
}

fn diagnostics(tape: &Tape, assign: &AssignDiag, k: usize) -> Result<(f64, f64), Stage1Error> {
    match assign {
        AssignDiag::Soft { p_node, p_edge } => {
            let pn = tape.value(*p_node);
            let pe = tape.value(*p_edge);
            let n = pn.rows() + pe.rows();
            let mut stacked = Vec::with_capacity(n * k);
            stacked.extend_from_slice(pn.data());
            stacked.extend_from_slice(pe.data());
            let stacked = Tensor::from_raw(n, k, stacked);
            let perp = codebook::perplexity(&stacked)?;
            let indices: Vec<usize> = (0..n)
                .map(|r| {
                    let row = stacked.row(r);
                    let mut best = 0;
                    for (i, &v) in row.iter().enumerate().skip(1) {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    best
                })
                .collect();
            Ok((perp, codebook::usage_rate(&indices, k)?))
        }
        AssignDiag::Hard { idx_node, idx_edge } => {
            let all: Vec<usize> = idx_node.iter().chain(idx_edge.iter()).copied().collect();
            let mut rows = vec![0.0; all.len() * k];
            for (r, &i) in all.iter().enumerate() {
                rows[r * k + i] = 1.0;
            }
            let rows = Tensor::from_raw(all.len(), k, rows);
            Ok((codebook::perplexity(&rows)?, codebook::usage_rate(&all, k)?))
        }
    }
}

/// Noise source for a single loss evaluation.
pub enum Noise<'a> {
    /// Draw fresh Gumbel noise (training behavior).
    Draw(&'a mut ChaCha8Rng),
    /// All-zero noise (evaluation behavior; the relaxation becomes a plain
    /// tempered softmax).
    Zero,
}

/// Evaluates the full Stage-1 objective once (no parameter update) and
/// reports every term plus codebook diagnostics. `epoch` only sets the
/// annealed temperature.
pub fn stage1_loss(
    graph: &Graph,
    model: &Stage1Model,
    cfg: &Stage1Config,
    epoch: usize,
    plan: &EdgePlan,
    noise: Noise,
) -> Result<Stage1Terms, Stage1Error> {
    cfg.validate()?;
    let data = GraphData::prepare(graph, matches!(plan, EdgePlan::Full))?;
    let tau = cfg.tau.anneal(epoch);
    let (noise_node, noise_edge) = match noise {
        Noise::Draw(rng) => draw_noise(cfg.strategy, graph.n(), cfg.k, rng),
        Noise::Zero => (Tensor::zeros(graph.n(), cfg.k), Tensor::zeros(graph.n(), cfg.k)),
    };
    let set = model.to_param_set();
    let mut tape = Tape::new();
    let tm = TapeModel::from_set(&mut tape, &set, model.layer_counts());
    let vars = build_loss(&mut tape, &tm, &data, cfg, tau, &noise_node, &noise_edge, None, plan)?;
    let (perplexity, usage) = diagnostics(&tape, &vars.assign, cfg.k)?;
    Ok(Stage1Terms {
        total: tape.value(vars.total).item()?,
        node: tape.value(vars.node).item()?,
        edge: tape.value(vars.edge).item()?,
        kl: tape.value(vars.kl).item()?,
        tau,
        perplexity,
        usage,
    })
}

/// Result of a full Stage-1 training run.
pub struct Stage1Outcome {
    /// Model state at the best validation loss.
    pub artifacts: Stage1Artifacts,
    /// One record per trained epoch (training-mode losses and diagnostics).
    pub metrics: Vec<Stage1EpochMetrics>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Trains Stage 1 on `graph`. Deterministic in `(cfg, seed)`: reruns yield
/// bit-identical parameters and metrics. Early-stops after
/// `cfg.patience` epochs without validation improvement; returns the
/// best-validation model. `epochs == 0` returns the initialization.
pub fn train_stage1(
    graph: &Graph,
    cfg: &Stage1Config,
    seed: u64,
) -> Result<Stage1Outcome, Stage1Error> {
    cfg.validate()?;
    if graph.n() < 2 {
        return Err(Stage1Error::Config(format!("graph has {} nodes; need at least 2", graph.n())));
    }
    let full = graph.n() <= cfg.full_matrix_threshold;
    if !full && graph.num_edges() == 0 {
        return Err(Stage1Error::Config("cannot sample edge pairs from an edgeless graph".into()));
    }
    let data = GraphData::prepare(graph, full)?;
    let template = Stage1Model::init(graph, cfg, seed)?;
    let layers = template.layer_counts();
    let mut params = template.to_param_set();
    let mut adam = AdamState::new(cfg.learning_rate, &params)?;
    let mut gumbel = rng::stream(seed, "gumbel-stage1");
    let mut negsample = rng::stream(seed, "stage1-negsample");

    // A fixed pair plan keeps validation losses comparable across epochs.
    let val_plan =
        if full { EdgePlan::Full } else { EdgePlan::sample(graph, cfg.negative_ratio, &mut negsample)? };

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamSet, usize)> = None;
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        let tau = cfg.tau.anneal(epoch);
        let train_plan = if full {
            EdgePlan::Full
        } else {
            EdgePlan::sample(graph, cfg.negative_ratio, &mut negsample)?
        };
        let (noise_node, noise_edge) = draw_noise(cfg.strategy, graph.n(), cfg.k, &mut gumbel);

        let mut tape = Tape::new();
        let tm = TapeModel::from_set(&mut tape, &params, layers);
        let vars =
            build_loss(&mut tape, &tm, &data, cfg, tau, &noise_node, &noise_edge, None, &train_plan)?;
        let loss_total = tape.value(vars.total).item()?;
        if !loss_total.is_finite() {
            return Err(Stage1Error::NonFiniteLoss { epoch });
        }
        let (perplexity, usage) = diagnostics(&tape, &vars.assign, cfg.k)?;
        metrics.push(Stage1EpochMetrics {
            epoch,
            loss_total,
            loss_node: tape.value(vars.node).item()?,
            loss_edge: tape.value(vars.edge).item()?,
            kl: tape.value(vars.kl).item()?,
            tau,
            perplexity,
            usage,
        });

        let mut grads = tape.backward(vars.total)?;
        let grad_tensors: Vec<Tensor> = tm
            .leaf_vars()
            .into_iter()
            .map(|v| grads.take(v).expect("parameter leaf gradient is always populated"))
            .collect();
        adam.step(&mut params, &grad_tensors)?;

        // Noise-free validation pass on the updated parameters.
        let zero = Tensor::zeros(graph.n(), cfg.k);
        let mut vtape = Tape::new();
        let vtm = TapeModel::from_set(&mut vtape, &params, layers);
        let vvars = build_loss(
            &mut vtape,
            &vtm,
            &data,
            cfg,
            tau,
            &zero,
            &zero,
            (!data.val_rows.is_empty()).then(|| data.val_rows.clone()),
            &val_plan,
        )?;
        let val_loss = vtape.value(vvars.total).item()?;

        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, params.clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (artifact_params, best_epoch) = match best {
        Some((_, p, e)) => (p, e),
        None => (params, 0), // epochs == 0
    };
    let model = template.with_params(&artifact_params)?;
    Ok(Stage1Outcome {
        artifacts: Stage1Artifacts { model, logit_kind: cfg.logit_kind, strategy: cfg.strategy },
        metrics,
        best_epoch,
    })
}

/// Verifies the full Stage-1 gradient (every parameter of both encoders,
/// the codebook, and both decoders) against central finite differences at
/// zero noise. Returns the worst relative error report.
pub fn gradient_check_error(
    graph: &Graph,
    cfg: &Stage1Config,
    seed: u64,
    eps: f64,
) -> Result<GradCheckReport, Stage1Error> {
    cfg.validate()?;
    let data = GraphData::prepare(graph, true)?;
    let model = Stage1Model::init(graph, cfg, seed)?;
    let layers = model.layer_counts();
    let set = model.to_param_set();
    let cfg = cfg.clone();
    let n = graph.n();
    let zero = Tensor::zeros(n, cfg.k);
    let tau = cfg.tau.anneal(0);

    let report = grad_check(set.tensors(), eps, move |tape, vars| {
        let tm = TapeModel::from_vars(vars, layers);
        let loss =
            build_loss(tape, &tm, &data, &cfg, tau, &zero, &zero, None, &EdgePlan::Full)
                .map_err(|e| NumError::Invalid(format!("stage-1 loss build failed: {e}")))?;
        Ok(loss.total)
    })?;
    Ok(report)
}

/// Renders one line per epoch for logs; used by the CLI's verbose mode.
pub fn format_epoch(m: &Stage1EpochMetrics) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "epoch {:4}  total {:.6}  node {:.6}  edge {:.6}  kl {:.4}  tau {:.3}  perp {:.1}  usage {:.3}",
        m.epoch, m.loss_total, m.loss_node, m.loss_edge, m.kl, m.tau, m.perplexity, m.usage
    );
    s
}
