//! The trainable text-sequence encoder ("student").
//!
//! Nodes are rendered as token sequences — a `<node>` marker, the node's
//! own feature tokens, then one `<sep>`-prefixed block per neighborhood
//! node — and encoded by a small bag-of-tokens network: mean-pooled token
//! embeddings through a two-layer feed-forward stack, with an alignment
//! head into the code space and a classifier head over labels. Continuous
//! features become discrete tokens (`f<dim>_b<bin>`) via per-dimension
//! equal-width bins fit on the training split.
//!
//! With the default pooling the encoder is exactly token-order invariant
//! (columns are mean-reduced in value order, so permuted sequences produce
//! bit-identical outputs). The optional self-attention layer keeps that
//! invariance only mathematically, not bitwise.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::graph::{k_hop_neighbors, Graph, GraphError, Split};
use crate::numgrad::kernels;
use crate::numgrad::optim::ParamSet;
use crate::numgrad::tape::{Tape, Var};
use crate::numgrad::tensor::Tensor;
use crate::numgrad::NumError;
use crate::rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;
pub const NODE: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<sep>", "<node>"];

#[derive(Debug, Error)]
pub enum StudentError {
    #[error("invalid vocabulary: {0}")]
    Vocab(String),
    #[error("token sequence is empty after removing padding")]
    EmptyInput,
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("vocabulary file {file}: {detail}")]
    Malformed { file: String, detail: String },
    #[error("failed reading/writing {file}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Num(#[from] NumError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StudentError + '_ {
    move |source| StudentError::Io { file: path.display().to_string(), source }
}

/// Equal-width bin layout for one feature dimension.
#[derive(Debug, Clone, PartialEq)]
struct DimBins {
    lo: f64,
    width: f64,
    count: usize,
}

impl DimBins {
    /// Half-open binning: a value exactly on an interior boundary lands in
    /// the higher bin; values outside the fitted range clamp to the
    /// boundary bins.
    fn bin(&self, value: f64) -> usize {
        if self.count == 1 {
            return 0;
        }
        let raw = ((value - self.lo) / self.width).floor();
        if raw < 0.0 {
            0
        } else {
            (raw as usize).min(self.count - 1)
        }
    }
}

/// Token table plus the feature-quantization grid that generates the
/// non-reserved tokens. Ids 0..=3 are reserved; everything else is a
/// `f<dim>_b<bin>` feature token. Feature tokens cut off by `max_size`
/// simply map to `<unk>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    bins: Vec<DimBins>,
}

/// Fits per-dimension equal-width bins on the training-split rows of
/// `graph` and enumerates the vocabulary: 4 reserved tokens, then
/// `f<dim>_b<bin>` in dimension-major order until `max_size`. Dimensions
/// that are constant on the training split get a single bin.
pub fn build_vocab(
    graph: &Graph,
    bins_per_dim: usize,
    max_size: usize,
) -> Result<Vocabulary, StudentError> {
    if bins_per_dim < 2 {
        return Err(StudentError::Vocab(format!(
            "need at least 2 bins per dimension, got {bins_per_dim}"
        )));
    }
    if max_size < RESERVED.len() {
        return Err(StudentError::Vocab(format!(
            "max_size {max_size} cannot hold the {} reserved tokens",
            RESERVED.len()
        )));
    }
    let train = graph.split_indices(Split::Train);
    if train.is_empty() {
        return Err(StudentError::Vocab("graph has no training split to fit bins on".into()));
    }
    let x = graph.features();
    let mut bins = Vec::with_capacity(x.cols());
    for dim in 0..x.cols() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &u in &train {
            let v = x.get(u, dim);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            bins.push(DimBins { lo, width: (hi - lo) / bins_per_dim as f64, count: bins_per_dim });
        } else {
            bins.push(DimBins { lo, width: 1.0, count: 1 });
        }
    }
    Ok(Vocabulary::from_bins(bins, max_size))
}

impl Vocabulary {
    fn from_bins(bins: Vec<DimBins>, max_size: usize) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        'outer: for (dim, b) in bins.iter().enumerate() {
            for bin in 0..b.count {
                if tokens.len() >= max_size {
                    break 'outer;
                }
                tokens.push(format!("f{dim}_b{bin}"));
            }
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index, bins }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the reserved tokens are always present
    }

    /// Id for `token`, or `UNK` when absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Token id for feature dimension `dim` holding `value`.
    pub fn feature_id(&self, dim: usize, value: f64) -> usize {
        match self.bins.get(dim) {
            Some(b) => self.id(&format!("f{dim}_b{}", b.bin(value))),
            None => UNK,
        }
    }

    pub fn num_dims(&self) -> usize {
        self.bins.len()
    }

    /// Writes `vocab.txt` (one token per line, line number = id) and
    /// `bins.tsv` (the quantization grid) under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), StudentError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let vocab_path = dir.join("vocab.txt");
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(&vocab_path, out).map_err(io_err(&vocab_path))?;

        let bins_path = dir.join("bins.tsv");
        let mut f = fs::File::create(&bins_path).map_err(io_err(&bins_path))?;
        for (dim, b) in self.bins.iter().enumerate() {
            writeln!(f, "{dim}\t{}\t{}\t{}", b.lo, b.width, b.count).map_err(io_err(&bins_path))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, StudentError> {
        let vocab_path = dir.join("vocab.txt");
        let raw = fs::read_to_string(&vocab_path).map_err(io_err(&vocab_path))?;
        let tokens: Vec<String> = raw.lines().map(str::to_owned).collect();
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()] != RESERVED.map(str::to_owned)[..]
        {
            return Err(StudentError::Malformed {
                file: vocab_path.display().to_string(),
                detail: format!("first {} lines must be the reserved tokens", RESERVED.len()),
            });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(StudentError::Malformed {
                    file: vocab_path.display().to_string(),
                    detail: format!("duplicate token `{t}`"),
                });
            }
        }

        let bins_path = dir.join("bins.tsv");
        let raw = fs::read_to_string(&bins_path).map_err(io_err(&bins_path))?;
        let mut bins = Vec::new();
        for (lineno, line) in raw.lines().enumerate() {
            let bad = |detail: String| StudentError::Malformed {
                file: bins_path.display().to_string(),
                detail: format!("line {}: {detail}", lineno + 1),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad(format!("expected 4 tab-separated fields, got {}", fields.len())));
            }
            let dim: usize =
                fields[0].parse().map_err(|_| bad(format!("bad dim `{}`", fields[0])))?;
            if dim != lineno {
                return Err(bad(format!("dimension {dim} out of order")));
            }
            bins.push(DimBins {
                lo: fields[1].parse().map_err(|_| bad(format!("bad lo `{}`", fields[1])))?,
                width: fields[2].parse().map_err(|_| bad(format!("bad width `{}`", fields[2])))?,
                count: fields[3].parse().map_err(|_| bad(format!("bad count `{}`", fields[3])))?,
            });
        }
        Ok(Self { tokens, index, bins })
    }
}

/// Renders `node` as token ids: `<node>`, its own feature tokens, then for
/// each neighbor within `hops` (breadth-first, budget-capped) a `<sep>`
/// followed by that neighbor's feature tokens. Deterministic; truncated to
/// `max_tokens`.
pub fn serialize_node(
    graph: &Graph,
    vocab: &Vocabulary,
    node: usize,
    hops: usize,
    budget: usize,
    max_tokens: usize,
) -> Result<Vec<usize>, StudentError> {
    let neighbors = k_hop_neighbors(graph, node, hops, budget)?;
    let mut out = Vec::with_capacity(max_tokens.min((neighbors.len() + 1) * (graph.d_in() + 1)));
    out.push(NODE);
    let push_features = |out: &mut Vec<usize>, u: usize| {
        for dim in 0..graph.d_in() {
            out.push(vocab.feature_id(dim, graph.features().get(u, dim)));
        }
    };
    push_features(&mut out, node);
    for &v in &neighbors {
        out.push(SEP);
        push_features(&mut out, v);
    }
    out.truncate(max_tokens);
    Ok(out)
}

/// Optional single-head self-attention mixed in before pooling.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

/// All trainable student weights. No bias terms anywhere, matching the
/// graph encoders.
#[derive(Debug, Clone)]
pub struct StudentParams {
    /// `|V| x d_tok` token embedding table.
    pub embedding: Tensor,
    pub attention: Option<AttentionParams>,
    /// `d_tok x d_h`, ReLU after.
    pub ff1: Tensor,
    /// `d_h x d_rep`, linear.
    pub ff2: Tensor,
    /// `d_rep x d_code` alignment head into the code space.
    pub align: Tensor,
    /// `d_rep x C` classifier head.
    pub classifier: Tensor,
}

/// Width choices for [`StudentParams::init`].
#[derive(Debug, Clone, PartialEq)]
pub struct StudentDims {
    pub d_tok: usize,
    pub d_h: usize,
    pub d_rep: usize,
    pub d_code: usize,
    pub num_classes: usize,
    pub attention: bool,
}

fn glorot(rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_raw(rows, cols, (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect())
}

impl StudentParams {
    /// Fresh student for a `vocab_size`-token vocabulary, deterministic in
    /// `seed`.
    pub fn init(vocab_size: usize, dims: &StudentDims, seed: u64) -> Result<Self, StudentError> {
        if vocab_size < RESERVED.len() {
            return Err(StudentError::Vocab(format!(
                "vocabulary of {vocab_size} tokens is missing reserved entries"
            )));
        }
        for (name, v) in [
            ("d_tok", dims.d_tok),
            ("d_h", dims.d_h),
            ("d_rep", dims.d_rep),
            ("d_code", dims.d_code),
            ("num_classes", dims.num_classes),
        ] {
            if v == 0 {
                return Err(StudentError::Vocab(format!("{name} must be nonzero")));
            }
        }
        let mut r = rng::stream(seed, "student-init");
        Ok(Self {
            embedding: glorot(vocab_size, dims.d_tok, &mut r),
            attention: dims.attention.then(|| AttentionParams {
                wq: glorot(dims.d_tok, dims.d_tok, &mut r),
                wk: glorot(dims.d_tok, dims.d_tok, &mut r),
                wv: glorot(dims.d_tok, dims.d_tok, &mut r),
            }),
            ff1: glorot(dims.d_tok, dims.d_h, &mut r),
            ff2: glorot(dims.d_h, dims.d_rep, &mut r),
            align: glorot(dims.d_rep, dims.d_code, &mut r),
            classifier: glorot(dims.d_rep, dims.num_classes, &mut r),
        })
    }

    pub fn d_code(&self) -> usize {
        self.align.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    /// Appends all weights in canonical order (embedding, attention if
    /// present, ff1, ff2, align, classifier).
    pub fn push_into(&self, set: &mut ParamSet) {
        set.push("student.embedding", self.embedding.clone());
        if let Some(a) = &self.attention {
            set.push("student.attn.wq", a.wq.clone());
            set.push("student.attn.wk", a.wk.clone());
            set.push("student.attn.wv", a.wv.clone());
        }
        set.push("student.ff1", self.ff1.clone());
        set.push("student.ff2", self.ff2.clone());
        set.push("student.align", self.align.clone());
        set.push("student.classifier", self.classifier.clone());
    }

    /// Reads weights back from `set` starting at `offset` (canonical
    /// order); returns the next offset.
    pub fn read_from(&mut self, set: &ParamSet, offset: usize) -> usize {
        let mut i = offset;
        self.embedding = set.tensor(i).clone();
        i += 1;
        if let Some(a) = &mut self.attention {
            a.wq = set.tensor(i).clone();
            a.wk = set.tensor(i + 1).clone();
            a.wv = set.tensor(i + 2).clone();
            i += 3;
        }
        self.ff1 = set.tensor(i).clone();
        self.ff2 = set.tensor(i + 1).clone();
        self.align = set.tensor(i + 2).clone();
        self.classifier = set.tensor(i + 3).clone();
        i + 4
    }

    pub fn param_count(&self) -> usize {
        5 + if self.attention.is_some() { 3 } else { 0 }
    }
}

/// Tape leaves for the student, mirroring [`StudentParams`].
pub struct StudentVars {
    pub embedding: Var,
    pub attention: Option<(Var, Var, Var)>,
    pub ff1: Var,
    pub ff2: Var,
    pub align: Var,
    pub classifier: Var,
}

impl StudentVars {
    /// Registers params `offset..` of `set` as leaves. Returns the vars
    /// and the next offset.
    pub fn from_params(
        tape: &mut Tape,
        set: &ParamSet,
        offset: usize,
        has_attention: bool,
    ) -> (Self, usize) {
        let mut i = offset;
        let mut leaf = |tape: &mut Tape| {
            let v = tape.param(set.tensor(i).clone());
            i += 1;
            v
        };
        let embedding = leaf(tape);
        let attention =
            has_attention.then(|| (leaf(tape), leaf(tape), leaf(tape)));
        let ff1 = leaf(tape);
        let ff2 = leaf(tape);
        let align = leaf(tape);
        let classifier = leaf(tape);
        (Self { embedding, attention, ff1, ff2, align, classifier }, i)
    }

    pub fn leaf_vars(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        if let Some((q, k, v)) = self.attention {
            out.extend([q, k, v]);
        }
        out.extend([self.ff1, self.ff2, self.align, self.classifier]);
        out
    }
}

fn strip_pads(tokens: &[usize], vocab_size: usize) -> Result<Vec<usize>, StudentError> {
    let mut kept = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if t >= vocab_size {
            return Err(StudentError::TokenOutOfRange { id: t, size: vocab_size });
        }
        if t != PAD {
            kept.push(t);
        }
    }
    if kept.is_empty() {
        return Err(StudentError::EmptyInput);
    }
    Ok(kept)
}

/// Encodes one token sequence: `(h_llm: 1 x d_code, logits: 1 x C)`.
/// Padding is ignored; an all-PAD sequence is an error.
pub fn student_forward(
    params: &StudentParams,
    tokens: &[usize],
) -> Result<(Tensor, Tensor), StudentError> {
    let kept = strip_pads(tokens, params.vocab_size())?;
    let d_tok = params.embedding.cols();
    let mut gathered = Vec::with_capacity(kept.len() * d_tok);
    for &t in &kept {
        gathered.extend_from_slice(params.embedding.row(t));
    }
    let l = kept.len();

    let mm = |a: &[f64], b: &Tensor, m: usize| -> Vec<f64> {
        let mut out = vec![0.0; m * b.cols()];
        kernels::matmul(a, b.data(), m, b.rows(), b.cols(), &mut out);
        out
    };

    let mixed = match &params.attention {
        None => gathered,
        Some(att) => {
            let q = mm(&gathered, &att.wq, l);
            let k = mm(&gathered, &att.wk, l);
            let v = mm(&gathered, &att.wv, l);
            let kt = Tensor::from_raw(l, d_tok, k).transposed();
            let mut scores = vec![0.0; l * l];
            kernels::matmul(&q, kt.data(), l, d_tok, l, &mut scores);
            let scale = 1.0 / (d_tok as f64).sqrt();
            for s in &mut scores {
                *s *= scale;
            }
            let mut attn = vec![0.0; l * l];
            kernels::row_softmax(&scores, l, &mut attn);
            let mut out = vec![0.0; l * d_tok];
            kernels::matmul(&attn, &v, l, l, d_tok, &mut out);
            out
        }
    };

    let mut pooled = vec![0.0; d_tok];
    kernels::column_mean_sorted(&mixed, l, d_tok, &mut pooled);
    let mut a1 = mm(&pooled, &params.ff1, 1);
    for v in &mut a1 {
        *v = v.max(0.0);
    }
    let r = mm(&a1, &params.ff2, 1);
    let h = mm(&r, &params.align, 1);
    let logits = mm(&r, &params.classifier, 1);
    Ok((
        Tensor::from_raw(1, params.d_code(), h),
        Tensor::from_raw(1, params.num_classes(), logits),
    ))
}

/// Taped outputs of [`student_forward_tape`].
pub struct StudentOut {
    /// `1 x d_code` alignment-head output.
    pub h_llm: Var,
    /// `1 x C` classifier logits.
    pub logits: Var,
    /// `1 x d_rep` shared representation feeding both heads.
    pub rep: Var,
}

/// Tape twin of [`student_forward`]; matches it bit for bit when attention
/// is off (both paths share the same kernels and reduction order).
pub fn student_forward_tape(
    tape: &mut Tape,
    vars: &StudentVars,
    tokens: &[usize],
) -> Result<StudentOut, StudentError> {
    let vocab_size = tape.value(vars.embedding).rows();
    let kept = Arc::new(strip_pads(tokens, vocab_size)?);
    let gathered = tape.gather_rows(vars.embedding, kept)?;

    let mixed = match vars.attention {
        None => gathered,
        Some((wq, wk, wv)) => {
            let d_tok = tape.value(vars.embedding).cols();
            let q = tape.matmul(gathered, wq)?;
            let k = tape.matmul(gathered, wk)?;
            let v = tape.matmul(gathered, wv)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scaled = tape.affine(scores, 1.0 / (d_tok as f64).sqrt(), 0.0)?;
            let attn = tape.row_softmax(scaled)?;
            tape.matmul(attn, v)?
        }
    };

    let pooled = tape.mean_rows(mixed)?;
    let a1 = tape.matmul(pooled, vars.ff1)?;
    let a1 = tape.relu(a1)?;
    let rep = tape.matmul(a1, vars.ff2)?;
    let h_llm = tape.matmul(rep, vars.align)?;
    let logits = tape.matmul(rep, vars.classifier)?;
    Ok(StudentOut { h_llm, logits, rep })
}
