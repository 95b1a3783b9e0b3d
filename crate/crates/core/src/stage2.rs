//! Stage 2: align the student to the frozen graph model.
//!
//! The Stage-1 encoders and codebook are loaded read-only. Each training
//! node is serialized to tokens and pushed through the student; its loss is
//!
//! ```text
//! L = CE(logits, label)
//!   + alpha_mse * MSE(z_llm, z_gnn)      (quantized embeddings)
//!   + beta_kl  * KL(p_llm || p_gnn)      (relaxed code distributions)
//! ```
//!
//! where both `(z, p)` pairs come from the same Gumbel-softmax relaxation
//! against the shared codebook. Inference afterwards needs the student
//! alone: tokens in, argmax logits out, zero graph-encoder calls (the
//! encoder invocation counter proves it).

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codebook::{relax_assign_with_noise, sample_gumbel, Codebook, LogitKind};
use crate::gnn::encode;
use crate::graph::{Graph, GraphError, Split};
use crate::metrics::Stage2EpochMetrics;
use crate::numgrad::checkpoint::{CheckpointError, Container};
use crate::numgrad::gradcheck::{grad_check, GradCheckReport};
use crate::numgrad::optim::{AdamState, ParamSet};
use crate::numgrad::tape::{Tape, Var};
use crate::numgrad::tensor::Tensor;
use crate::numgrad::NumError;
use crate::rng;
use crate::stage1::Stage1Artifacts;
use crate::student::{
    serialize_node, student_forward, student_forward_tape, StudentError, StudentParams,
    StudentVars, Vocabulary,
};

#[derive(Debug, Error)]
pub enum Stage2Error {
    #[error("invalid stage-2 config: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("split {split:?} has no nodes")]
    EmptySplit { split: Split },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Which frozen encoder output anchors the alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GnnChannel {
    Node,
    Edge,
    /// Elementwise average of both channels.
    #[default]
    Mean,
}

impl GnnChannel {
    pub const ALL: [GnnChannel; 3] = [GnnChannel::Node, GnnChannel::Edge, GnnChannel::Mean];

    pub fn as_str(self) -> &'static str {
        match self {
            GnnChannel::Node => "node",
            GnnChannel::Edge => "edge",
            GnnChannel::Mean => "mean",
        }
    }
}

impl FromStr for GnnChannel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "node" => Ok(GnnChannel::Node),
            "edge" => Ok(GnnChannel::Edge),
            "mean" => Ok(GnnChannel::Mean),
            other => Err(format!("unknown channel `{other}` (want node, edge, or mean)")),
        }
    }
}

/// Stage-2 hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    /// Weight of the quantized-embedding MSE term.
    pub alpha_mse: f64,
    /// Weight of the relaxed-distribution KL term.
    pub beta_kl: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps happen once per this many batches, on the mean of
    /// their gradients.
    pub grad_accum: usize,
    /// Neighborhood radius serialized into each node's token sequence.
    pub hops: usize,
    /// Neighborhood size cap passed to the serializer.
    pub budget: usize,
    /// Token-sequence length cap.
    pub max_tokens: usize,
    /// Fixed relaxation temperature (no annealing in this stage).
    pub tau: f64,
    pub channel: GnnChannel,
    /// Feature-quantization bins per dimension for the vocabulary.
    pub bins: usize,
    pub vocab_max: usize,
    pub d_tok: usize,
    pub d_h: usize,
    pub d_rep: usize,
    /// Mix tokens with one self-attention layer before pooling.
    pub attention: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            alpha_mse: 0.5,
            beta_kl: 1e-4,
            learning_rate: 5e-5,
            epochs: 50,
            batch_size: 4,
            grad_accum: 8,
            hops: 1,
            budget: 10,
            max_tokens: 512,
            tau: 0.5,
            channel: GnnChannel::default(),
            bins: 8,
            vocab_max: 4096,
            d_tok: 16,
            d_h: 32,
            d_rep: 16,
            attention: false,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<(), Stage2Error> {
        let bad = |msg: String| Err(Stage2Error::Config(msg));
        for (name, v) in [("alpha_mse", self.alpha_mse), ("beta_kl", self.beta_kl)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a non-negative finite weight, got {v}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad(format!(
                "batch_size and grad_accum must be nonzero (got {} and {})",
                self.batch_size, self.grad_accum
            ));
        }
        if self.hops > 2 {
            return bad(format!("hops must be 0, 1, or 2, got {}", self.hops));
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be nonzero".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.bins < 2 {
            return bad(format!("need at least 2 feature bins, got {}", self.bins));
        }
        for (name, v) in [
            ("vocab_max", self.vocab_max),
            ("d_tok", self.d_tok),
            ("d_h", self.d_h),
            ("d_rep", self.d_rep),
        ] {
            if v == 0 {
                return bad(format!("{name} must be nonzero"));
            }
        }
        Ok(())
    }

    /// True when both alignment weights are zero; the trainer then skips
    /// the relaxation entirely (and draws no alignment noise), leaving the
    /// batch order identical to an aligned run with the same seed.
    pub fn unaligned(&self) -> bool {
        self.alpha_mse == 0.0 && self.beta_kl == 0.0
    }
}

/// The Stage-1 encoders evaluated once over the whole graph, with the
/// codebook they quantize against. Everything here is read-only; training
/// never writes back.
pub struct FrozenGnn {
    h_node: Tensor,
    h_edge: Tensor,
    codebook: Codebook,
    logit_kind: LogitKind,
}

impl FrozenGnn {
    /// Runs both frozen encoders over `graph` (this is the only place
    /// Stage 2 invokes them).
    pub fn new(artifacts: &Stage1Artifacts, graph: &Graph) -> Result<Self, Stage2Error> {
        let h_node = encode(&artifacts.model.encoder_node, graph, graph.features())?;
        let h_edge =
            encode(&artifacts.model.encoder_edge, graph, &crate::gnn::structure_features(graph))?;
        Ok(Self {
            h_node,
            h_edge,
            codebook: artifacts.model.codebook.clone(),
            logit_kind: artifacts.logit_kind,
        })
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn logit_kind(&self) -> LogitKind {
        self.logit_kind
    }

    /// The frozen reference embedding `h_gnn` for one node. Repeated calls
    /// return identical values; nothing is recomputed.
    pub fn reference(&self, node: usize, channel: GnnChannel) -> Result<Vec<f64>, Stage2Error> {
        if node >= self.h_node.rows() {
            return Err(Stage2Error::Graph(GraphError::NodeOutOfRange {
                node,
                n: self.h_node.rows(),
            }));
        }
        Ok(match channel {
            GnnChannel::Node => self.h_node.row(node).to_vec(),
            GnnChannel::Edge => self.h_edge.row(node).to_vec(),
            GnnChannel::Mean => self
                .h_node
                .row(node)
                .iter()
                .zip(self.h_edge.row(node))
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
        })
    }
}

/// Both sides of one alignment: quantized embeddings and relaxed code
/// distributions for the student (`llm`) and the frozen graph encoder
/// (`gnn`).
#[derive(Debug, Clone)]
pub struct AlignmentPair {
    pub z_llm: Vec<f64>,
    pub z_gnn: Vec<f64>,
    pub p_llm: Vec<f64>,
    pub p_gnn: Vec<f64>,
}

/// Noise regime for [`align_components`].
pub enum AlignNoise<'a> {
    /// Fresh Gumbel noise per side (training default; the KL regularizes
    /// in expectation).
    Independent(&'a mut ChaCha8Rng),
    /// One draw applied to both sides — a test hook making
    /// `h_llm = h_gnn` imply exact component equality.
    Shared(&'a mut ChaCha8Rng),
    /// Zeros (deterministic evaluation).
    Zero,
}

/// Relaxes both embeddings against the same codebook at temperature `tau`.
pub fn align_components(
    h_llm: &[f64],
    h_gnn: &[f64],
    codebook: &Codebook,
    kind: LogitKind,
    tau: f64,
    noise: AlignNoise,
) -> Result<AlignmentPair, NumError> {
    let k = codebook.k();
    let (g_llm, g_gnn) = match noise {
        AlignNoise::Independent(rng) => (sample_gumbel(k, rng), sample_gumbel(k, rng)),
        AlignNoise::Shared(rng) => {
            let g = sample_gumbel(k, rng);
            (g.clone(), g)
        }
        AlignNoise::Zero => (vec![0.0; k], vec![0.0; k]),
    };
    let llm = relax_assign_with_noise(h_llm, codebook, tau, kind, &g_llm)?;
    let gnn = relax_assign_with_noise(h_gnn, codebook, tau, kind, &g_gnn)?;
    Ok(AlignmentPair { z_llm: llm.z, z_gnn: gnn.z, p_llm: llm.p, p_gnn: gnn.p })
}

/// Individual Stage-2 loss terms (unweighted) plus their weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Terms {
    pub total: f64,
    pub ce: f64,
    pub mse: f64,
    pub kl: f64,
}

fn cross_entropy(logits: &[f64], label: usize) -> Result<f64, Stage2Error> {
    if label >= logits.len() {
        return Err(Stage2Error::LabelOutOfRange { label, classes: logits.len() });
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// `KL(p || q)` with `q` clamped at 1e-12; zero-probability `p` entries
/// contribute nothing.
fn kl_clamped(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi / qi.max(1e-12)).ln() } else { 0.0 })
        .sum()
}

/// Scores one node: cross-entropy on the classifier logits plus the two
/// weighted alignment terms.
pub fn stage2_loss(
    logits: &Tensor,
    label: usize,
    pair: &AlignmentPair,
    cfg: &Stage2Config,
) -> Result<Stage2Terms, Stage2Error> {
    let ce = cross_entropy(logits.data(), label)?;
    let d = pair.z_llm.len();
    let mse = pair
        .z_llm
        .iter()
        .zip(&pair.z_gnn)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / d as f64;
    let kl = kl_clamped(&pair.p_llm, &pair.p_gnn);
    Ok(Stage2Terms { total: ce + cfg.alpha_mse * mse + cfg.beta_kl * kl, ce, mse, kl })
}

/// Everything constant across a training run.
struct TrainCtx {
    tokens: Vec<Vec<usize>>,
    labels: Vec<usize>,
    h_ref: Vec<Vec<f64>>,
    codebook: Codebook,
    logit_kind: LogitKind,
    num_classes: usize,
}

impl TrainCtx {
    fn prepare(
        graph: &Graph,
        frozen: &FrozenGnn,
        vocab: &Vocabulary,
        cfg: &Stage2Config,
    ) -> Result<Self, Stage2Error> {
        let mut tokens = Vec::with_capacity(graph.n());
        let mut h_ref = Vec::with_capacity(graph.n());
        for u in 0..graph.n() {
            tokens.push(serialize_node(graph, vocab, u, cfg.hops, cfg.budget, cfg.max_tokens)?);
            h_ref.push(frozen.reference(u, cfg.channel)?);
        }
        Ok(Self {
            tokens,
            labels: (0..graph.n()).map(|u| graph.label(u)).collect(),
            h_ref,
            codebook: frozen.codebook.clone(),
            logit_kind: frozen.logit_kind,
            num_classes: graph.num_classes(),
        })
    }
}

/// Scalar readings taken while building one batch's loss.
struct BatchStats {
    ce_sum: f64,
    mse_sum: f64,
    kl_sum: f64,
    correct: usize,
}

/// Builds the mean loss of `nodes` on the tape. Noise, when present, holds
/// one `(llm, gnn)` Gumbel row pair per node.
fn build_batch_loss(
    tape: &mut Tape,
    sv: &StudentVars,
    ctx: &TrainCtx,
    nodes: &[usize],
    cfg: &Stage2Config,
    noise: Option<&[(Vec<f64>, Vec<f64>)]>,
) -> Result<(Var, BatchStats), Stage2Error> {
    let k = ctx.codebook.k();
    let mut stats = BatchStats { ce_sum: 0.0, mse_sum: 0.0, kl_sum: 0.0, correct: 0 };
    let mut total: Option<Var> = None;
    for (bi, &u) in nodes.iter().enumerate() {
        let out = student_forward_tape(tape, sv, &ctx.tokens[u])?;

        // Cross-entropy via the stable log-softmax row.
        let label = ctx.labels[u];
        if label >= ctx.num_classes {
            return Err(Stage2Error::LabelOutOfRange { label, classes: ctx.num_classes });
        }
        let log_probs = tape.row_log_softmax(out.logits)?;
        let mut hot = vec![0.0; ctx.num_classes];
        hot[label] = 1.0;
        let hot = tape.constant(Tensor::from_raw(1, ctx.num_classes, hot));
        let picked = tape.multiply(log_probs, hot)?;
        let ll = tape.sum(picked)?;
        let ce = tape.affine(ll, -1.0, 0.0)?;
        stats.ce_sum += tape.value(ce).item()?;

        let logits_row = tape.value(out.logits).row(0);
        if argmax_lowest(logits_row) == label {
            stats.correct += 1;
        }

        let mut node_loss = ce;
        if let Some(pairs) = noise {
            let (g_llm, g_gnn) = &pairs[bi];
            let cb = tape.constant(ctx.codebook.embeddings().clone());
            let noise_llm = tape.constant(Tensor::from_raw(1, k, g_llm.clone()));
            let relax = crate::codebook::relax_batch_tape(
                tape,
                out.h_llm,
                cb,
                ctx.logit_kind,
                cfg.tau,
                noise_llm,
            )?;
            let gnn = relax_assign_with_noise(
                &ctx.h_ref[u],
                &ctx.codebook,
                cfg.tau,
                ctx.logit_kind,
                g_gnn,
            )?;

            let d = ctx.codebook.d_code();
            let neg_zg =
                tape.constant(Tensor::from_raw(1, d, gnn.z.iter().map(|v| -v).collect()));
            let diff = tape.add(relax.z, neg_zg)?;
            let sq = tape.multiply(diff, diff)?;
            let mse = tape.mean(sq)?;
            stats.mse_sum += tape.value(mse).item()?;

            let p_ll = tape.multiply(relax.p, relax.log_p)?;
            let t1 = tape.sum(p_ll)?;
            let ln_pg = tape.constant(Tensor::from_raw(
                1,
                k,
                gnn.p.iter().map(|&q| q.max(1e-12).ln()).collect(),
            ));
            let p_lq = tape.multiply(relax.p, ln_pg)?;
            let t2 = tape.sum(p_lq)?;
            let neg_t2 = tape.affine(t2, -1.0, 0.0)?;
            let kl = tape.add(t1, neg_t2)?;
            stats.kl_sum += tape.value(kl).item()?;

            let w_mse = tape.affine(mse, cfg.alpha_mse, 0.0)?;
            let w_kl = tape.affine(kl, cfg.beta_kl, 0.0)?;
            let aligned = tape.add(w_mse, w_kl)?;
            node_loss = tape.add(node_loss, aligned)?;
        }
        total = Some(match total {
            None => node_loss,
            Some(t) => tape.add(t, node_loss)?,
        });
    }
    let total = total.expect("batches are never empty");
    let mean = tape.affine(total, 1.0 / nodes.len() as f64, 0.0)?;
    Ok((mean, stats))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicts a class for `node` from its serialized tokens alone. The call
/// path never evaluates a graph encoder (see the counter assertion in the
/// tests).
pub fn infer(
    student: &StudentParams,
    vocab: &Vocabulary,
    graph: &Graph,
    node: usize,
    cfg: &Stage2Config,
) -> Result<usize, Stage2Error> {
    let tokens = serialize_node(graph, vocab, node, cfg.hops, cfg.budget, cfg.max_tokens)?;
    let (_, logits) = student_forward(student, &tokens)?;
    Ok(argmax_lowest(logits.row(0)))
}

/// Fraction of `split` nodes whose prediction matches their label.
/// Evaluation fans out across nodes when the `parallel` feature is on;
/// the count is an integer sum, so the result is identical either way.
pub fn evaluate_split(
    student: &StudentParams,
    vocab: &Vocabulary,
    graph: &Graph,
    split: Split,
    cfg: &Stage2Config,
) -> Result<f64, Stage2Error> {
    let nodes = graph.split_indices(split);
    if nodes.is_empty() {
        return Err(Stage2Error::EmptySplit { split });
    }
    let count_one = |&u: &usize| -> Result<usize, Stage2Error> {
        Ok((infer(student, vocab, graph, u, cfg)? == graph.label(u)) as usize)
    };
    #[cfg(feature = "parallel")]
    let correct: usize = {
        use rayon::prelude::*;
        nodes.par_iter().map(count_one).try_reduce(|| 0, |a, b| Ok(a + b))?
    };
    #[cfg(not(feature = "parallel"))]
    let correct: usize = nodes.iter().map(count_one).sum::<Result<usize, Stage2Error>>()?;
    Ok(correct as f64 / nodes.len() as f64)
}

/// Result of a Stage-2 training run.
pub struct Stage2Outcome {
    /// Student state at the best validation accuracy.
    pub student: StudentParams,
    pub metrics: Vec<Stage2EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

/// Trains the student against the frozen Stage-1 model. Deterministic in
/// `(cfg, seed)`. Returns the parameters from the epoch with the highest
/// validation accuracy (earliest on ties); `epochs == 0` returns
/// `student_init` untouched.
pub fn train_stage2(
    graph: &Graph,
    artifacts: &Stage1Artifacts,
    student_init: StudentParams,
    vocab: &Vocabulary,
    cfg: &Stage2Config,
    seed: u64,
) -> Result<Stage2Outcome, Stage2Error> {
    cfg.validate()?;
    if student_init.d_code() != artifacts.model.codebook.d_code() {
        return Err(Stage2Error::Config(format!(
            "student aligns into width {} but the codebook is width {}",
            student_init.d_code(),
            artifacts.model.codebook.d_code()
        )));
    }
    if student_init.num_classes() != graph.num_classes() {
        return Err(Stage2Error::Config(format!(
            "student classifies {} classes but the graph has {}",
            student_init.num_classes(),
            graph.num_classes()
        )));
    }
    let train_nodes = graph.split_indices(Split::Train);
    if train_nodes.is_empty() {
        return Err(Stage2Error::EmptySplit { split: Split::Train });
    }

    let frozen = FrozenGnn::new(artifacts, graph)?;
    let ctx = TrainCtx::prepare(graph, &frozen, vocab, cfg)?;
    let has_attention = student_init.attention.is_some();
    let template = student_init.clone();
    let mut params = ParamSet::new();
    student_init.push_into(&mut params);
    let mut adam = AdamState::new(cfg.learning_rate, &params)?;
    let mut shuffle_rng = rng::stream(seed, "stage2-shuffle");
    let mut gumbel = rng::stream(seed, "gumbel-stage2");

    let k = ctx.codebook.k();
    let mut order = train_nodes.clone();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamSet, usize)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut acc_grads: Vec<Tensor> =
            params.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        let mut acc_batches = 0usize;
        let mut epoch_stats = BatchStats { ce_sum: 0.0, mse_sum: 0.0, kl_sum: 0.0, correct: 0 };

        let flush = |adam: &mut AdamState,
                         params: &mut ParamSet,
                         acc: &mut Vec<Tensor>,
                         count: &mut usize|
         -> Result<(), Stage2Error> {
            if *count == 0 {
                return Ok(());
            }
            let scale = 1.0 / *count as f64;
            let mean: Vec<Tensor> = acc
                .iter()
                .map(|g| {
                    Tensor::from_raw(g.rows(), g.cols(), g.data().iter().map(|v| v * scale).collect())
                })
                .collect();
            adam.step(params, &mean)?;
            for g in acc.iter_mut() {
                *g = Tensor::zeros(g.rows(), g.cols());
            }
            *count = 0;
            Ok(())
        };

        for batch in order.chunks(cfg.batch_size) {
            let noise: Option<Vec<(Vec<f64>, Vec<f64>)>> = if cfg.unaligned() {
                None
            } else {
                Some(
                    batch
                        .iter()
                        .map(|_| (sample_gumbel(k, &mut gumbel), sample_gumbel(k, &mut gumbel)))
                        .collect(),
                )
            };
            let mut tape = Tape::new();
            let (sv, _) = StudentVars::from_params(&mut tape, &params, 0, has_attention);
            let (loss, stats) =
                build_batch_loss(&mut tape, &sv, &ctx, batch, cfg, noise.as_deref())?;
            let loss_val = tape.value(loss).item()?;
            if !loss_val.is_finite() {
                return Err(Stage2Error::NonFiniteLoss { epoch });
            }
            epoch_stats.ce_sum += stats.ce_sum;
            epoch_stats.mse_sum += stats.mse_sum;
            epoch_stats.kl_sum += stats.kl_sum;
            epoch_stats.correct += stats.correct;

            let mut grads = tape.backward(loss)?;
            for (slot, v) in acc_grads.iter_mut().zip(sv.leaf_vars()) {
                let g = grads.take(v).expect("student leaves always receive gradients");
                slot.add_assign(&g)?;
            }
            acc_batches += 1;
            if acc_batches == cfg.grad_accum {
                flush(&mut adam, &mut params, &mut acc_grads, &mut acc_batches)?;
            }
        }
        flush(&mut adam, &mut params, &mut acc_grads, &mut acc_batches)?;

        let mut student = template.clone();
        student.read_from(&params, 0);
        let val_acc = evaluate_split(&student, vocab, graph, Split::Val, cfg)?;
        let n_train = train_nodes.len() as f64;
        metrics.push(Stage2EpochMetrics {
            epoch,
            loss_ce: epoch_stats.ce_sum / n_train,
            loss_mse: epoch_stats.mse_sum / n_train,
            loss_kl: epoch_stats.kl_sum / n_train,
            train_acc: epoch_stats.correct as f64 / n_train,
            val_acc,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_acc > *b) {
            best = Some((val_acc, params.clone(), epoch));
        }
    }

    let (best_val_acc, best_params, best_epoch) = match best {
        Some((v, p, e)) => (v, p, e),
        None => (0.0, params, 0), // epochs == 0
    };
    let mut student = template;
    student.read_from(&best_params, 0);
    Ok(Stage2Outcome { student, metrics, best_epoch, best_val_acc })
}

/// Trained student plus the vocabulary it reads; everything inference
/// needs.
pub struct Stage2Artifacts {
    pub student: StudentParams,
    pub vocab: Vocabulary,
}

impl Stage2Artifacts {
    pub fn save(&self, dir: &std::path::Path) -> Result<(), Stage2Error> {
        self.vocab.save(dir)?;
        let mut c = Container::new();
        c.set_meta("attention", if self.student.attention.is_some() { "on" } else { "off" })?;
        c.insert("student.embedding", self.student.embedding.clone())?;
        if let Some(a) = &self.student.attention {
            c.insert("student.attn.wq", a.wq.clone())?;
            c.insert("student.attn.wk", a.wk.clone())?;
            c.insert("student.attn.wv", a.wv.clone())?;
        }
        c.insert("student.ff1", self.student.ff1.clone())?;
        c.insert("student.ff2", self.student.ff2.clone())?;
        c.insert("student.align", self.student.align.clone())?;
        c.insert("student.classifier", self.student.classifier.clone())?;
        c.save(dir)?;
        Ok(())
    }

    pub fn load(dir: &std::path::Path) -> Result<Self, Stage2Error> {
        let vocab = Vocabulary::load(dir)?;
        let c = Container::load(dir)?;
        let attention = match c.require_meta("attention")? {
            "on" => true,
            "off" => false,
            other => {
                return Err(Stage2Error::Config(format!(
                    "bad attention flag `{other}` in checkpoint (want on/off)"
                )))
            }
        };
        let student = StudentParams {
            embedding: c.require("student.embedding")?.clone(),
            attention: attention
                .then(|| -> Result<crate::student::AttentionParams, Stage2Error> {
                    Ok(crate::student::AttentionParams {
                        wq: c.require("student.attn.wq")?.clone(),
                        wk: c.require("student.attn.wk")?.clone(),
                        wv: c.require("student.attn.wv")?.clone(),
                    })
                })
                .transpose()?,
            ff1: c.require("student.ff1")?.clone(),
            ff2: c.require("student.ff2")?.clone(),
            align: c.require("student.align")?.clone(),
            classifier: c.require("student.classifier")?.clone(),
        };
        Ok(Self { student, vocab })
    }
}

/// Verifies the full Stage-2 batch loss gradient (all student parameters)
/// against central finite differences with fixed noise. The frozen GNN
/// side enters as constants, exactly as in training.
pub fn gradient_check_error(
    graph: &Graph,
    artifacts: &Stage1Artifacts,
    vocab: &Vocabulary,
    cfg: &Stage2Config,
    seed: u64,
    eps: f64,
) -> Result<GradCheckReport, Stage2Error> {
    cfg.validate()?;
    let frozen = FrozenGnn::new(artifacts, graph)?;
    let ctx = TrainCtx::prepare(graph, &frozen, vocab, cfg)?;
    let train = graph.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Stage2Error::EmptySplit { split: Split::Train });
    }
    let batch: Vec<usize> = train.into_iter().take(cfg.batch_size.max(2)).collect();
    let dims = crate::student::StudentDims {
        d_tok: cfg.d_tok,
        d_h: cfg.d_h,
        d_rep: cfg.d_rep,
        d_code: ctx.codebook.d_code(),
        num_classes: ctx.num_classes,
        attention: cfg.attention,
    };
    let student = StudentParams::init(vocab.len(), &dims, seed)?;
    let mut set = ParamSet::new();
    student.push_into(&mut set);

    let k = ctx.codebook.k();
    let mut gumbel = rng::stream(seed, "gumbel-stage2");
    let noise: Option<Vec<(Vec<f64>, Vec<f64>)>> = if cfg.unaligned() {
        None
    } else {
        Some(
            batch
                .iter()
                .map(|_| (sample_gumbel(k, &mut gumbel), sample_gumbel(k, &mut gumbel)))
                .collect(),
        )
    };
    let attention = cfg.attention;
    let cfg = cfg.clone();

    let report = grad_check(set.tensors(), eps, move |tape, vars| {
        let mut i = 0;
        let leaf = |ix: &mut usize| {
            let v = vars[*ix];
            *ix += 1;
            v
        };
        let sv = StudentVars {
            embedding: leaf(&mut i),
            attention: attention.then(|| (leaf(&mut i), leaf(&mut i), leaf(&mut i))),
            ff1: leaf(&mut i),
            ff2: leaf(&mut i),
            align: leaf(&mut i),
            classifier: leaf(&mut i),
        };
        let (loss, _) = build_batch_loss(tape, &sv, &ctx, &batch, &cfg, noise.as_deref())
            .map_err(|e| NumError::Invalid(format!("stage-2 loss build failed: {e}")))?;
        Ok(loss)
    })?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, SbmSpec, SplitRatio};
    use crate::stage1::{train_stage1, Stage1Config};
    use crate::student::build_vocab;

    fn test_graph(seed: u64) -> Graph {
        generate_sbm(&SbmSpec {
            n: 36,
            blocks: 3,
            p_in: 0.5,
            p_out: 0.05,
            d_in: 6,
            d_pos: 0,
            text_signal: 0.8,
            seed,
            ratio: SplitRatio::default(),
        })
        .unwrap()
    }

    fn small_stage1(graph: &Graph, seed: u64) -> Stage1Artifacts {
        let cfg = Stage1Config {
            k: 10,
            d_code: 5,
            hidden: vec![8],
            d_edge: 4,
            epochs: 5,
            learning_rate: 0.01,
            ..Stage1Config::default()
        };
        train_stage1(graph, &cfg, seed).unwrap().artifacts
    }

    fn small_cfg() -> Stage2Config {
        Stage2Config {
            epochs: 4,
            learning_rate: 0.01,
            batch_size: 4,
            grad_accum: 2,
            bins: 6,
            d_tok: 6,
            d_h: 10,
            d_rep: 5,
            ..Stage2Config::default()
        }
    }

    fn fresh_student(graph: &Graph, artifacts: &Stage1Artifacts, vocab: &Vocabulary, cfg: &Stage2Config, seed: u64) -> StudentParams {
        StudentParams::init(
            vocab.len(),
            &crate::student::StudentDims {
                d_tok: cfg.d_tok,
                d_h: cfg.d_h,
                d_rep: cfg.d_rep,
                d_code: artifacts.model.codebook.d_code(),
                num_classes: graph.num_classes(),
                attention: cfg.attention,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn frozen_reference_channels_relate_as_documented() {
        let g = test_graph(0);
        let art = small_stage1(&g, 1);
        let f = FrozenGnn::new(&art, &g).unwrap();
        let node = f.reference(3, GnnChannel::Node).unwrap();
        let edge = f.reference(3, GnnChannel::Edge).unwrap();
        let mean = f.reference(3, GnnChannel::Mean).unwrap();
        for ((a, b), m) in node.iter().zip(&edge).zip(&mean) {
            assert_eq!(0.5 * (a + b), *m);
        }
        // Frozen: identical on repeat.
        assert_eq!(f.reference(3, GnnChannel::Mean).unwrap(), mean);
        assert!(f.reference(99, GnnChannel::Node).is_err());
    }

    #[test]
    fn shared_noise_makes_equal_inputs_align_exactly() {
        let g = test_graph(0);
        let art = small_stage1(&g, 1);
        let f = FrozenGnn::new(&art, &g).unwrap();
        let h = f.reference(0, GnnChannel::Mean).unwrap();
        let mut r = rng::stream(3, "align-test");
        let pair = align_components(
            &h,
            &h,
            f.codebook(),
            f.logit_kind(),
            0.5,
            AlignNoise::Shared(&mut r),
        )
        .unwrap();
        assert_eq!(pair.p_llm, pair.p_gnn);
        assert_eq!(pair.z_llm, pair.z_gnn);
        let sum: f64 = pair.p_llm.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // Independent noise breaks the tie.
        let mut r = rng::stream(3, "align-test");
        let pair2 = align_components(
            &h,
            &h,
            f.codebook(),
            f.logit_kind(),
            0.5,
            AlignNoise::Independent(&mut r),
        )
        .unwrap();
        assert_ne!(pair2.p_llm, pair2.p_gnn);
    }

    #[test]
    fn alignment_matches_scalar_recomputation() {
        // K=8 codebook; recompute p and z by hand from the definitions:
        // s_i = -||h - e_i||^2 / 2, p = softmax(s / tau), z = p^T E
        // (zero noise keeps the oracle simple).
        let cb = Codebook::init(8, 3, 5).unwrap();
        let h = [0.3, -0.2, 0.7];
        let pair = align_components(
            &h,
            &h,
            &cb,
            LogitKind::NegSqDist,
            0.5,
            AlignNoise::Zero,
        )
        .unwrap();
        let mut logits = [0.0; 8];
        for (i, l) in logits.iter_mut().enumerate() {
            let e = cb.row(i);
            let d2: f64 = h.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
            *l = -d2 / 2.0;
        }
        let scaled: Vec<f64> = logits.iter().map(|&s| s / 0.5).collect();
        let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|&s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let want_p: Vec<f64> = exps.iter().map(|&e| e / z).collect();
        for (got, want) in pair.p_llm.iter().zip(&want_p) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        let mut want_z = [0.0; 3];
        for (i, &pi) in want_p.iter().enumerate() {
            for (d, w) in want_z.iter_mut().enumerate() {
                *w += pi * cb.row(i)[d];
            }
        }
        for (got, want) in pair.z_llm.iter().zip(&want_z) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_terms_behave_at_the_corners() {
        let logits = Tensor::new(1, 4, vec![0.0, 2.0, -1.0, 0.5]).unwrap();
        let uniform = vec![0.25; 4];
        let one_hot = vec![1.0, 0.0, 0.0, 0.0];
        let zs = vec![0.1, 0.2];
        // Identical pairs zero both alignment terms.
        let pair = AlignmentPair {
            z_llm: zs.clone(),
            z_gnn: zs.clone(),
            p_llm: uniform.clone(),
            p_gnn: uniform.clone(),
        };
        let cfg = Stage2Config::default();
        let t = stage2_loss(&logits, 1, &pair, &cfg).unwrap();
        assert_eq!(t.mse, 0.0);
        assert_eq!(t.kl, 0.0);
        assert!((t.total - t.ce).abs() < 1e-15);
        // Zero weights reduce to cross-entropy even with mismatched pairs.
        let pair2 = AlignmentPair {
            z_llm: vec![5.0, -3.0],
            z_gnn: zs,
            p_llm: one_hot.clone(),
            p_gnn: uniform.clone(),
        };
        let cfg0 = Stage2Config { alpha_mse: 0.0, beta_kl: 0.0, ..cfg.clone() };
        let t0 = stage2_loss(&logits, 1, &pair2, &cfg0).unwrap();
        assert_eq!(t0.total, t0.ce);
        // One-hot vs uniform KL = ln 4.
        let t2 = stage2_loss(&logits, 1, &pair2, &cfg).unwrap();
        assert!((t2.kl - 4.0_f64.ln()).abs() < 1e-12, "{}", t2.kl);
        // CE against a hand-computed log-sum-exp (max logit is 2.0).
        let m = 2.0;
        let z: f64 = logits.data().iter().map(|&v| (v - m).exp()).sum();
        let want_ce = (m + z.ln()) - 2.0;
        assert!((t2.ce - want_ce).abs() < 1e-12);
        // Labels out of range are rejected.
        assert!(matches!(
            stage2_loss(&logits, 9, &pair2, &cfg),
            Err(Stage2Error::LabelOutOfRange { label: 9, classes: 4 })
        ));
    }

    #[test]
    fn stage2_gradients_pass_finite_differences() {
        let g = test_graph(2);
        let art = small_stage1(&g, 1);
        let cfg = small_cfg();
        let vocab = build_vocab(&g, cfg.bins, cfg.vocab_max).unwrap();
        let report = gradient_check_error(&g, &art, &vocab, &cfg, 7, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
        // The unaligned (CE-only) arm too.
        let cfg0 = Stage2Config { alpha_mse: 0.0, beta_kl: 0.0, ..cfg };
        let report = gradient_check_error(&g, &art, &vocab, &cfg0, 7, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn training_is_deterministic_and_freezes_stage1() {
        let g = test_graph(3);
        let art = small_stage1(&g, 1);
        let cfg = small_cfg();
        let vocab = build_vocab(&g, cfg.bins, cfg.vocab_max).unwrap();
        let init = fresh_student(&g, &art, &vocab, &cfg, 7);

        let cb_before: Vec<u64> =
            art.model.codebook.embeddings().data().iter().map(|v| v.to_bits()).collect();
        let enc_before: Vec<u64> =
            art.model.encoder_node.layers[0].w_self.data().iter().map(|v| v.to_bits()).collect();

        let a = train_stage2(&g, &art, init.clone(), &vocab, &cfg, 7).unwrap();
        let b = train_stage2(&g, &art, init.clone(), &vocab, &cfg, 7).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.student.classifier.data(), b.student.classifier.data());

        // Stage-1 parameters are bit-identical after training.
        let cb_after: Vec<u64> =
            art.model.codebook.embeddings().data().iter().map(|v| v.to_bits()).collect();
        let enc_after: Vec<u64> =
            art.model.encoder_node.layers[0].w_self.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(cb_before, cb_after);
        assert_eq!(enc_before, enc_after);

        // Different seed, different trajectory.
        let c = train_stage2(&g, &art, init, &vocab, &cfg, 8).unwrap();
        assert_ne!(a.metrics, c.metrics);
    }

    #[test]
    fn zero_epochs_returns_the_initial_student() {
        let g = test_graph(3);
        let art = small_stage1(&g, 1);
        let cfg = Stage2Config { epochs: 0, ..small_cfg() };
        let vocab = build_vocab(&g, cfg.bins, cfg.vocab_max).unwrap();
        let init = fresh_student(&g, &art, &vocab, &cfg, 7);
        let out = train_stage2(&g, &art, init.clone(), &vocab, &cfg, 7).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.student.embedding.data(), init.embedding.data());
        assert_eq!(out.student.classifier.data(), init.classifier.data());
    }

    #[test]
    fn gnn_weights_receive_exactly_zero_gradient() {
        // Register the frozen encoder weights as tape leaves alongside the
        // student's; the Stage-2 loss must send them nothing.
        let g = test_graph(3);
        let art = small_stage1(&g, 1);
        let cfg = small_cfg();
        let vocab = build_vocab(&g, cfg.bins, cfg.vocab_max).unwrap();
        let frozen = FrozenGnn::new(&art, &g).unwrap();
        let ctx = TrainCtx::prepare(&g, &frozen, &vocab, &cfg).unwrap();
        let student = fresh_student(&g, &art, &vocab, &cfg, 7);
        let mut set = ParamSet::new();
        student.push_into(&mut set);

        let mut tape = Tape::new();
        let gnn_leaf = tape.param(art.model.encoder_node.layers[0].w_self.clone());
        let (sv, _) = StudentVars::from_params(&mut tape, &set, 0, false);
        let batch = g.split_indices(Split::Train)[..4].to_vec();
        let mut gum = rng::stream(7, "gumbel-stage2");
        let k = ctx.codebook.k();
        let noise: Vec<(Vec<f64>, Vec<f64>)> = batch
            .iter()
            .map(|_| (sample_gumbel(k, &mut gum), sample_gumbel(k, &mut gum)))
            .collect();
        let (loss, _) =
            build_batch_loss(&mut tape, &sv, &ctx, &batch, &cfg, Some(&noise)).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let gnn_grad = grads.take(gnn_leaf).unwrap();
        assert!(gnn_grad.data().iter().all(|&v| v == 0.0));
        // ...while the student does learn something.
        let emb_grad = grads.take(sv.embedding).unwrap();
        assert!(emb_grad.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn inference_never_calls_the_graph_encoders() {
        let g = test_graph(3);
        let art = small_stage1(&g, 1);
        let cfg = Stage2Config { epochs: 2, ..small_cfg() };
        let vocab = build_vocab(&g, cfg.bins, cfg.vocab_max).unwrap();
        let init = fresh_student(&g, &art, &vocab, &cfg, 7);
        let out = train_stage2(&g, &art, init, &vocab, &cfg, 7).unwrap();

        let before = crate::gnn::forward_count();
        let mut preds = Vec::new();
        for u in g.split_indices(Split::Test) {
            let p = infer(&out.student, &vocab, &g, u, &cfg).unwrap();
            assert!(p < g.num_classes());
            preds.push(p);
        }
        let acc = evaluate_split(&out.student, &vocab, &g, Split::Test, &cfg).unwrap();
        assert_eq!(crate::gnn::forward_count(), before, "inference must be GNN-free");
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn accuracy_agrees_with_per_node_inference() {
        let g = test_graph(3);
        let art = small_stage1(&g, 1);
        let cfg = Stage2Config { epochs: 1, ..small_cfg() };
        let vocab = build_vocab(&g, cfg.bins, cfg.vocab_max).unwrap();
        let init = fresh_student(&g, &art, &vocab, &cfg, 7);
        let out = train_stage2(&g, &art, init, &vocab, &cfg, 7).unwrap();
        let nodes = g.split_indices(Split::Val);
        let manual = nodes
            .iter()
            .filter(|&&u| infer(&out.student, &vocab, &g, u, &cfg).unwrap() == g.label(u))
            .count() as f64
            / nodes.len() as f64;
        let acc = evaluate_split(&out.student, &vocab, &g, Split::Val, &cfg).unwrap();
        assert_eq!(acc, manual);
        assert_eq!(acc, out.metrics.last().unwrap().val_acc);
    }

    #[test]
    fn artifacts_round_trip_through_disk() {
        let g = test_graph(3);
        let art = small_stage1(&g, 1);
        for attention in [false, true] {
            let cfg = Stage2Config { epochs: 1, attention, ..small_cfg() };
            let vocab = build_vocab(&g, cfg.bins, cfg.vocab_max).unwrap();
            let init = fresh_student(&g, &art, &vocab, &cfg, 7);
            let out = train_stage2(&g, &art, init, &vocab, &cfg, 7).unwrap();
            let arts = Stage2Artifacts { student: out.student, vocab: vocab.clone() };
            let dir = tempfile::tempdir().unwrap();
            arts.save(dir.path()).unwrap();
            let loaded = Stage2Artifacts::load(dir.path()).unwrap();
            assert_eq!(loaded.vocab, vocab);
            assert_eq!(loaded.student.attention.is_some(), attention);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&loaded.student.embedding), bits(&arts.student.embedding));
            assert_eq!(bits(&loaded.student.align), bits(&arts.student.align));
            // Loaded artifacts predict identically.
            for u in 0..6 {
                assert_eq!(
                    infer(&loaded.student, &loaded.vocab, &g, u, &cfg).unwrap(),
                    infer(&arts.student, &arts.vocab, &g, u, &cfg).unwrap()
                );
            }
        }
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        for cfg in [
            Stage2Config { alpha_mse: -0.1, ..small_cfg() },
            Stage2Config { beta_kl: f64::NAN, ..small_cfg() },
            Stage2Config { batch_size: 0, ..small_cfg() },
            Stage2Config { hops: 3, ..small_cfg() },
            Stage2Config { tau: 0.0, ..small_cfg() },
            Stage2Config { bins: 1, ..small_cfg() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
