//! Mean-aggregating message-passing encoders (GraphSAGE style), in two
//! flavors sharing one parameterization:
//!
//! * the **node channel** consumes the node feature matrix,
//! * the **edge channel** consumes per-node structural features
//!   (`[degree, 1]`), so it sees topology and nothing else.
//!
//! Each layer computes `h' = act(h . W_self + mean_nb(h) . W_nb)` with no
//! biases; the final layer is linear. The same math exists twice: a plain
//! path for frozen/evaluation passes and a taped path for training. Both
//! bump a global forward counter, which is how the pipeline proves that
//! text-only inference never touches a graph encoder.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::graph::Graph;
use crate::numgrad::optim::ParamSet;
use crate::numgrad::tape::{Tape, Var};
use crate::numgrad::tensor::Tensor;
use crate::numgrad::{kernels, NumError};
use crate::rng;

/// Which input a graph encoder consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    /// Raw node features.
    Node,
    /// Structural features: `[standardized degree, 1, positions…]` per node.
    Edge,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Node => "node",
            Channel::Edge => "edge",
        }
    }

    /// Init gain on the final (linear) layer, controlling how spread out
    /// the channel's embeddings start. Codeword selection needs the top
    /// logit to clear the rest by more than the Gumbel noise scale (else
    /// the winner reshuffles every epoch) and by more than `tau * ln K`
    /// (else the relaxed embedding is a near-uniform codebook average,
    /// which for a zero-mean codebook is roughly the zero vector). The
    /// node channel tolerates a soft start — its cosine loss renormalizes
    /// small outputs — but the edge channel's bilinear gram scales *with*
    /// its input, so a mushy start there is a fixed point.
    fn output_gain(self) -> f64 {
        match self {
            Channel::Node => 1.0,
            Channel::Edge => 5.0,
        }
    }
}

/// Width of the degree/constant prefix of [`structure_features`] rows.
pub const STRUCTURE_DIM: usize = 2;

/// Width of [`structure_features`] rows for `graph`.
pub fn structure_dim(graph: &Graph) -> usize {
    STRUCTURE_DIM + graph.d_pos()
}

/// The edge channel's input: one `[degree, 1, positions…]` row per node,
/// with the degree column standardized over the graph. The raw degree
/// (mean ~np for random graphs) would hand every node a near-identical
/// dominant input direction, funneling the whole graph into one Voronoi
/// cell of the codebook; centering keeps per-node variation in charge.
/// The constant column keeps isolated nodes distinguishable from an
/// all-zero row; the positional block (when the dataset carries one) is
/// what lets message passing tell equal-degree nodes apart — without it
/// the channel cannot place a node relative to anything.
///
/// The degree statistics are accumulated in integers, so relabeling the
/// graph permutes the rows without perturbing a single bit.
pub fn structure_features(graph: &Graph) -> Tensor {
    let n = graph.n();
    let width = structure_dim(graph);
    let (mut sum, mut sum_sq) = (0u64, 0u64);
    for u in 0..n {
        let d = graph.degree(u) as u64;
        sum += d;
        sum_sq += d * d;
    }
    let mean = sum as f64 / n as f64;
    let var = sum_sq as f64 / n as f64 - mean * mean;
    let scale = if var > 0.0 { var.sqrt().recip() } else { 0.0 };
    let mut data = Vec::with_capacity(n * width);
    for u in 0..n {
        data.push((graph.degree(u) as f64 - mean) * scale);
        data.push(1.0);
        if let Some(pos) = graph.positions() {
            data.extend_from_slice(pos.row(u));
        }
    }
    Tensor::from_raw(n, width, data)
}

/// One message-passing layer: a self weight and a neighbor weight, both
/// `d_in x d_out`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub w_self: Tensor,
    pub w_nb: Tensor,
}

/// A stack of message-passing layers for one channel.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub channel: Channel,
    pub layers: Vec<EncoderLayer>,
}

static FORWARD_COUNT: AtomicU64 = AtomicU64::new(0);

/// Number of encoder forward passes (plain or taped) since process start.
/// Monotone; tests snapshot it before and after a region to prove the
/// region never ran an encoder.
pub fn forward_count() -> u64 {
    FORWARD_COUNT.load(Ordering::Relaxed)
}

fn glorot_uniform(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let limit = gain * (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::from_raw(rows, cols, data)
}

/// Initializes an encoder with Glorot-uniform weights. `dims` runs from the
/// input width to the code width, so `dims.len() - 1` layers; it must have
/// at least two entries, all nonzero. Deterministic in `(seed, channel)`.
pub fn init_encoder(dims: &[usize], channel: Channel, seed: u64) -> Result<EncoderParams, NumError> {
    if dims.len() < 2 {
        return Err(NumError::Invalid(format!(
            "encoder needs input and output widths, got dims {dims:?}"
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(NumError::Invalid(format!("encoder dims must be nonzero, got {dims:?}")));
    }
    let mut rng = rng::stream(seed, &format!("encoder-init-{}", channel.as_str()));
    let last = dims.len() - 2;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let gain = if l == last { channel.output_gain() } else { 1.0 };
            EncoderLayer {
                w_self: glorot_uniform(w[0], w[1], gain, &mut rng),
                w_nb: glorot_uniform(w[0], w[1], gain, &mut rng),
            }
        })
        .collect();
    Ok(EncoderParams { channel, layers })
}

impl EncoderParams {
    /// Input width expected by [`encode`].
    pub fn d_in(&self) -> usize {
        self.layers[0].w_self.rows()
    }

    /// Output (code) width.
    pub fn d_out(&self) -> usize {
        self.layers.last().expect("encoder has at least one layer").w_self.cols()
    }

    /// Appends all weights to `set` under `prefix`, in layer order. The
    /// resulting index order matches [`EncoderVars::from_params`].
    pub fn push_into(&self, prefix: &str, set: &mut ParamSet) {
        for (l, layer) in self.layers.iter().enumerate() {
            set.push(format!("{prefix}.layer{l}.w_self"), layer.w_self.clone());
            set.push(format!("{prefix}.layer{l}.w_nb"), layer.w_nb.clone());
        }
    }

    /// Rebuilds the layer weights from `set` starting at `offset`, assuming
    /// the layout produced by [`EncoderParams::push_into`]. Returns the
    /// index one past the consumed parameters.
    pub fn read_from(&mut self, set: &ParamSet, offset: usize) -> usize {
        let mut i = offset;
        for layer in &mut self.layers {
            layer.w_self = set.tensor(i).clone();
            layer.w_nb = set.tensor(i + 1).clone();
            i += 2;
        }
        i
    }
}

/// Tape handles for one encoder's weights, in the same order as
/// [`EncoderParams::push_into`].
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub layers: Vec<(Var, Var)>,
}

impl EncoderVars {
    /// Registers params `offset..` of `set` as tape leaves for an encoder
    /// with `n_layers` layers. Returns the vars and the next offset.
    pub fn from_params(
        tape: &mut Tape,
        set: &ParamSet,
        offset: usize,
        n_layers: usize,
    ) -> (Self, usize) {
        let mut layers = Vec::with_capacity(n_layers);
        let mut i = offset;
        for _ in 0..n_layers {
            let w_self = tape.param(set.tensor(i).clone());
            let w_nb = tape.param(set.tensor(i + 1).clone());
            layers.push((w_self, w_nb));
            i += 2;
        }
        (Self { layers }, i)
    }
}

/// Plain (untaped) forward pass: embeds every node of `graph`, reading
/// input rows from `x`. Used for evaluation and for freezing Stage-1
/// outputs; gradients never flow through this path.
pub fn encode(params: &EncoderParams, graph: &Graph, x: &Tensor) -> Result<Tensor, NumError> {
    if x.rows() != graph.n() || x.cols() != params.d_in() {
        return Err(NumError::ShapeMismatch {
            op: "encode",
            detail: format!(
                "input {:?} for {} nodes and encoder width {}",
                x.shape(),
                graph.n(),
                params.d_in()
            ),
        });
    }
    FORWARD_COUNT.fetch_add(1, Ordering::Relaxed);
    let n = graph.n();
    let mut h = x.clone();
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        let (d_in, d_out) = layer.w_self.shape();
        let mut agg = vec![0.0; n * d_in];
        kernels::neighbor_mean(h.data(), d_in, graph.adjacency(), &mut agg);
        let mut own = vec![0.0; n * d_out];
        kernels::matmul(h.data(), layer.w_self.data(), n, d_in, d_out, &mut own);
        let mut nb = vec![0.0; n * d_out];
        kernels::matmul(&agg, layer.w_nb.data(), n, d_in, d_out, &mut nb);
        let mut next = Vec::with_capacity(n * d_out);
        for (o, b) in own.iter().zip(&nb) {
            let v = o + b;
            next.push(if l < last { v.max(0.0) } else { v });
        }
        if !next.iter().all(|v| v.is_finite()) {
            return Err(NumError::NonFinite { op: "encode" });
        }
        h = Tensor::from_raw(n, d_out, next);
    }
    Ok(h)
}

/// Taped forward pass over leaf vars, mirroring [`encode`] exactly: the two
/// paths share kernels and produce bit-identical values.
pub fn encode_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    adjacency: Arc<Vec<Vec<usize>>>,
    x: Var,
) -> Result<Var, NumError> {
    FORWARD_COUNT.fetch_add(1, Ordering::Relaxed);
    let mut h = x;
    let last = vars.layers.len() - 1;
    for (l, &(w_self, w_nb)) in vars.layers.iter().enumerate() {
        let agg = tape.neighbor_mean(h, adjacency.clone())?;
        let own = tape.matmul(h, w_self)?;
        let nb = tape.matmul(agg, w_nb)?;
        let lin = tape.add(own, nb)?;
        h = if l < last { tape.relu(lin)? } else { lin };
    }
    Ok(h)
}
