//! Undirected attributed graphs: in-memory representation, the four-file
//! on-disk format, synthetic stochastic-block-model generation, and k-hop
//! neighborhood queries.
//!
//! On disk a dataset is a directory of four text files plus one optional:
//!
//! * `edges.tsv` — one `src\tdst` pair per line (undirected; duplicates and
//!   direction collapse to a single edge),
//! * `features.txt` — header `n d_in`, then `n` rows of `d_in` floats,
//! * `labels.txt` — one class id per node,
//! * `splits.txt` — one of `train` / `val` / `test` per node,
//! * `positions.txt` (optional) — same layout as `features.txt`; per-node
//!   positional coordinates for the structure channel.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::numgrad::tensor::Tensor;
use crate::numgrad::NumError;
use crate::rng;

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.txt";
pub const LABELS_FILE: &str = "labels.txt";
pub const SPLITS_FILE: &str = "splits.txt";
pub const POSITIONS_FILE: &str = "positions.txt";

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{file}:{line}: {detail}")]
    Malformed { file: String, line: usize, detail: String },
    #[error("{file}: {source}")]
    Io { file: String, source: std::io::Error },
    #[error("node {node} has label {label}, outside the {classes} declared classes")]
    LabelOutOfRange { node: usize, label: usize, classes: usize },
    #[error("node index {node} out of range (n = {n})")]
    NodeOutOfRange { node: usize, n: usize },
    #[error("expected {expected} {what}, got {got}")]
    CountMismatch { what: &'static str, expected: usize, got: usize },
    #[error("invalid block-model spec: {0}")]
    BadSpec(String),
    #[error("hop count must be 0, 1, or 2 (got {0})")]
    BadHops(usize),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Which partition a node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// An undirected graph with node features, class labels, and a
/// train/val/test split. Construction normalizes the edge set (symmetric,
/// deduplicated, self-loops dropped) and validates every index, so a
/// `Graph` value always satisfies its invariants.
#[derive(Debug, Clone)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    features: Tensor,
    positions: Option<Tensor>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Vec<Split>,
}

impl Graph {
    /// Builds a graph from raw parts. `raw_edges` may contain duplicates,
    /// both orientations, and self-loops; everything is normalized to a set
    /// of `u < v` pairs. Labels must lie below `num_classes`, features must
    /// have one row per node.
    pub fn new(
        n: usize,
        raw_edges: &[(usize, usize)],
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Vec<Split>,
    ) -> Result<Self, GraphError> {
        if features.rows() != n {
            return Err(GraphError::CountMismatch {
                what: "feature rows",
                expected: n,
                got: features.rows(),
            });
        }
        if labels.len() != n {
            return Err(GraphError::CountMismatch { what: "labels", expected: n, got: labels.len() });
        }
        if split.len() != n {
            return Err(GraphError::CountMismatch {
                what: "split tags",
                expected: n,
                got: split.len(),
            });
        }
        for (node, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(GraphError::LabelOutOfRange { node, label, classes: num_classes });
            }
        }

        let mut edges = Vec::with_capacity(raw_edges.len());
        for &(u, v) in raw_edges {
            if u >= n {
                return Err(GraphError::NodeOutOfRange { node: u, n });
            }
            if v >= n {
                return Err(GraphError::NodeOutOfRange { node: v, n });
            }
            if u != v {
                edges.push((u.min(v), u.max(v)));
            }
        }
        edges.sort_unstable();
        edges.dedup();

        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }

        Ok(Self { n, edges, neighbors, features, positions: None, labels, num_classes, split })
    }

    /// Attaches per-node positional coordinates (one row per node). These
    /// travel with the dataset — generated once, permuted with the nodes —
    /// and feed the structure channel, which has no other way to tell
    /// equal-degree nodes apart.
    pub fn with_positions(mut self, positions: Tensor) -> Result<Self, GraphError> {
        if positions.rows() != self.n {
            return Err(GraphError::CountMismatch {
                what: "position rows",
                expected: self.n,
                got: positions.rows(),
            });
        }
        self.positions = Some(positions);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d_in(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Normalized undirected edge list (`u < v`, sorted, unique).
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Sorted neighbor list of `u`.
    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[u]
    }

    /// All neighbor lists, indexed by node.
    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn degree(&self, u: usize) -> usize {
        self.neighbors[u].len()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Positional coordinates, if the dataset carries them.
    pub fn positions(&self) -> Option<&Tensor> {
        self.positions.as_ref()
    }

    /// Width of the positional block (0 when absent).
    pub fn d_pos(&self) -> usize {
        self.positions.as_ref().map_or(0, Tensor::cols)
    }

    pub fn label(&self, u: usize) -> usize {
        self.labels[u]
    }

    pub fn split_of(&self, u: usize) -> Split {
        self.split[u]
    }

    /// Ascending node ids belonging to `split`.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.n).filter(|&u| self.split[u] == split).collect()
    }

    /// Edge density m / (n(n-1)/2); 0 for graphs with fewer than 2 nodes.
    pub fn density(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        self.edges.len() as f64 / (self.n as f64 * (self.n as f64 - 1.0) / 2.0)
    }

    /// Dense symmetric adjacency matrix with a zero diagonal.
    pub fn dense_adjacency(&self) -> Tensor {
        let mut a = Tensor::zeros(self.n, self.n);
        for &(u, v) in &self.edges {
            a.set(u, v, 1.0);
            a.set(v, u, 1.0);
        }
        a
    }
}

/// Nodes reachable from `node` within `hops` edges, excluding `node`
/// itself, breadth-first: all 1-hop neighbors (ascending), then unseen
/// 2-hop neighbors (ascending), truncated to `budget` entries. `hops` may
/// be 0 (empty context), 1, or 2.
pub fn k_hop_neighbors(
    graph: &Graph,
    node: usize,
    hops: usize,
    budget: usize,
) -> Result<Vec<usize>, GraphError> {
    if node >= graph.n() {
        return Err(GraphError::NodeOutOfRange { node, n: graph.n() });
    }
    if hops > 2 {
        return Err(GraphError::BadHops(hops));
    }
    let mut seen = vec![false; graph.n()];
    seen[node] = true;
    let mut out = Vec::new();
    let mut frontier = vec![node];
    for _ in 0..hops {
        let mut next = Vec::new();
        for &u in &frontier {
            for &v in graph.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    next.push(v);
                }
            }
        }
        next.sort_unstable();
        out.extend_from_slice(&next);
        if out.len() >= budget {
            break;
        }
        frontier = next;
    }
    out.truncate(budget);
    Ok(out)
}

fn read(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path)
        .map_err(|source| GraphError::Io { file: path.display().to_string(), source })
}

fn malformed(path: &Path, line: usize, detail: impl Into<String>) -> GraphError {
    GraphError::Malformed { file: path.display().to_string(), line, detail: detail.into() }
}

/// Parses a `rows cols` header followed by that many rows of floats.
fn read_matrix(path: &Path, what: &'static str) -> Result<Tensor, GraphError> {
    let text = read(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) =
        lines.next().ok_or_else(|| malformed(path, 1, "missing `rows cols` header"))?;
    let mut parts = header.split_whitespace();
    let parse_header = |tok: Option<&str>, which: &str| {
        tok.and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| malformed(path, 1, format!("header needs numeric {which}")))
    };
    let n = parse_header(parts.next(), "row count")?;
    let width = parse_header(parts.next(), "column count")?;

    let mut data = Vec::with_capacity(n * width);
    let mut rows = 0usize;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| malformed(path, idx + 1, format!("bad float `{tok}`")))?;
            data.push(v);
        }
        if data.len() - before != width {
            return Err(malformed(
                path,
                idx + 1,
                format!("expected {width} values, got {}", data.len() - before),
            ));
        }
        rows += 1;
    }
    if rows != n {
        return Err(GraphError::CountMismatch { what, expected: n, got: rows });
    }
    Ok(Tensor::new(n, width, data)?)
}

/// Loads the dataset rooted at `dir`. The number of classes is inferred as
/// `max label + 1`; positions are attached when `positions.txt` exists.
pub fn load_graph(dir: &Path) -> Result<Graph, GraphError> {
    let feature_path = dir.join(FEATURES_FILE);
    let features = read_matrix(&feature_path, "feature rows")?;
    let n = features.rows();

    let edge_path = dir.join(EDGES_FILE);
    let text = read(&edge_path)?;
    let mut raw_edges = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| malformed(&edge_path, idx + 1, "expected `src\\tdst`"))?;
        let parse_node = |tok: &str| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| malformed(&edge_path, idx + 1, format!("bad node id `{tok}`")))
        };
        let u = parse_node(a)?;
        let v = parse_node(b)?;
        if u >= n || v >= n {
            return Err(malformed(
                &edge_path,
                idx + 1,
                format!("edge ({u}, {v}) references nodes outside 0..{n}"),
            ));
        }
        raw_edges.push((u, v));
    }

    let label_path = dir.join(LABELS_FILE);
    let text = read(&label_path)?;
    let mut labels = Vec::with_capacity(n);
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let label: usize = line
            .trim()
            .parse()
            .map_err(|_| malformed(&label_path, idx + 1, format!("bad label `{line}`")))?;
        labels.push(label);
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);

    let split_path = dir.join(SPLITS_FILE);
    let text = read(&split_path)?;
    let mut split = Vec::with_capacity(n);
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tag = line.trim();
        let s = Split::parse(tag).ok_or_else(|| {
            malformed(&split_path, idx + 1, format!("unknown split tag `{tag}` (want train/val/test)"))
        })?;
        split.push(s);
    }

    let graph = Graph::new(n, &raw_edges, features, labels, num_classes, split)?;
    let position_path = dir.join(POSITIONS_FILE);
    if position_path.exists() {
        let positions = read_matrix(&position_path, "position rows")?;
        return graph.with_positions(positions);
    }
    Ok(graph)
}

/// Writes `graph` into `dir` in the four-file format. Floats use Rust's
/// shortest round-trip formatting, so save → load → save is byte-stable.
pub fn save_graph(graph: &Graph, dir: &Path) -> Result<(), GraphError> {
    let io_err = |file: &Path, source| GraphError::Io { file: file.display().to_string(), source };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let mut edges = String::new();
    for &(u, v) in graph.edges() {
        let _ = writeln!(edges, "{u}\t{v}");
    }
    let edge_path = dir.join(EDGES_FILE);
    fs::write(&edge_path, edges).map_err(|e| io_err(&edge_path, e))?;

    let render_matrix = |t: &Tensor| {
        let mut out = format!("{} {}\n", t.rows(), t.cols());
        for u in 0..t.rows() {
            for (j, v) in t.row(u).iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    };
    let feature_path = dir.join(FEATURES_FILE);
    fs::write(&feature_path, render_matrix(graph.features()))
        .map_err(|e| io_err(&feature_path, e))?;
    if let Some(positions) = graph.positions() {
        let position_path = dir.join(POSITIONS_FILE);
        fs::write(&position_path, render_matrix(positions))
            .map_err(|e| io_err(&position_path, e))?;
    }

    let mut labels = String::new();
    for u in 0..graph.n() {
        let _ = writeln!(labels, "{}", graph.label(u));
    }
    let label_path = dir.join(LABELS_FILE);
    fs::write(&label_path, labels).map_err(|e| io_err(&label_path, e))?;

    let mut splits = String::new();
    for u in 0..graph.n() {
        let _ = writeln!(splits, "{}", graph.split_of(u).as_str());
    }
    let split_path = dir.join(SPLITS_FILE);
    fs::write(&split_path, splits).map_err(|e| io_err(&split_path, e))?;
    Ok(())
}

/// Train/val fractions for split assignment (test takes the remainder).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatio {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2 }
    }
}

/// Parameters of a planted-partition (stochastic block model) graph with
/// label-correlated features.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmSpec {
    pub n: usize,
    pub blocks: usize,
    /// Within-block edge probability.
    pub p_in: f64,
    /// Cross-block edge probability; must not exceed `p_in`.
    pub p_out: f64,
    pub d_in: usize,
    /// Width of the per-node Gaussian positional block (0 = none). These
    /// coordinates let the structure channel tell nodes apart; degree alone
    /// is identical in distribution across blocks.
    pub d_pos: usize,
    /// Interpolation between pure one-hot label features (1.0) and pure
    /// Gaussian noise (0.0).
    pub text_signal: f64,
    pub seed: u64,
    pub ratio: SplitRatio,
}

impl SbmSpec {
    fn validate(&self) -> Result<(), GraphError> {
        let bad = |msg: String| Err(GraphError::BadSpec(msg));
        if self.blocks < 2 {
            return bad(format!("needs at least 2 blocks, got {}", self.blocks));
        }
        if self.n < self.blocks {
            return bad(format!("{} nodes cannot fill {} blocks", self.n, self.blocks));
        }
        if !(0.0..=1.0).contains(&self.p_in) || !(0.0..=1.0).contains(&self.p_out) {
            return bad(format!("probabilities must lie in [0, 1]: p_in {}, p_out {}", self.p_in, self.p_out));
        }
        if self.p_out > self.p_in {
            return bad(format!("p_out {} exceeds p_in {}", self.p_out, self.p_in));
        }
        if self.d_in < self.blocks {
            return bad(format!(
                "d_in {} too small for {} one-hot block dimensions",
                self.d_in, self.blocks
            ));
        }
        if !(0.0..=1.0).contains(&self.text_signal) {
            return bad(format!("text_signal {} outside [0, 1]", self.text_signal));
        }
        let SplitRatio { train, val } = self.ratio;
        if !(train > 0.0 && val > 0.0 && train + val < 1.0) {
            return bad(format!("split ratio train {train} / val {val} leaves no room for test"));
        }
        Ok(())
    }
}

/// Block id of node `i` under contiguous near-equal blocks.
fn block_of(i: usize, n: usize, blocks: usize) -> usize {
    i * blocks / n
}

/// Samples a stochastic-block-model graph. Nodes are assigned to `blocks`
/// contiguous, near-equal blocks; every unordered pair draws a Bernoulli
/// edge (`p_in` within a block, `p_out` across); features interpolate
/// between the block one-hot and standard Gaussian noise by `text_signal`;
/// splits are a seeded shuffle cut by `ratio`; `d_pos > 0` attaches
/// standard-Gaussian positional coordinates. Deterministic in `seed`, and
/// each ingredient draws from its own stream, so e.g. changing `d_pos`
/// leaves the edge set untouched.
pub fn generate_sbm(spec: &SbmSpec) -> Result<Graph, GraphError> {
    spec.validate()?;
    let n = spec.n;
    let labels: Vec<usize> = (0..n).map(|i| block_of(i, n, spec.blocks)).collect();

    let mut edge_rng = rng::stream(spec.seed, "sbm-edges");
    let mut raw_edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { spec.p_in } else { spec.p_out };
            // Always draw, so the edge stream is independent of p values.
            if edge_rng.random::<f64>() < p {
                raw_edges.push((u, v));
            }
        }
    }

    let mut feat_rng = rng::stream(spec.seed, "sbm-features");
    let mut data = Vec::with_capacity(n * spec.d_in);
    for &label in &labels {
        for dim in 0..spec.d_in {
            let noise: f64 = feat_rng.sample(StandardNormal);
            let one_hot = if dim == label { 1.0 } else { 0.0 };
            data.push(spec.text_signal * one_hot + (1.0 - spec.text_signal) * noise);
        }
    }
    let features = Tensor::new(n, spec.d_in, data)?;

    let mut split_rng = rng::stream(spec.seed, "sbm-split");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut split_rng);
    let n_train = (n as f64 * spec.ratio.train).floor() as usize;
    let n_val = (n as f64 * spec.ratio.val).floor() as usize;
    let mut split = vec![Split::Test; n];
    for &u in &order[..n_train] {
        split[u] = Split::Train;
    }
    for &u in &order[n_train..n_train + n_val] {
        split[u] = Split::Val;
    }

    let graph = Graph::new(n, &raw_edges, features, labels, spec.blocks, split)?;
    if spec.d_pos == 0 {
        return Ok(graph);
    }
    let mut pos_rng = rng::stream(spec.seed, "sbm-positions");
    let pos_data: Vec<f64> =
        (0..n * spec.d_pos).map(|_| pos_rng.sample(StandardNormal)).collect();
    graph.with_positions(Tensor::new(n, spec.d_pos, pos_data)?)
}
