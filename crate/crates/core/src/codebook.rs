//! The shared quantization codebook and its relaxed / hard assignments.
//!
//! An embedding row `h` scores every codebook row by either negative
//! squared Euclidean distance (`-||h - e_i||^2 / 2`, the default) or cosine
//! similarity. Training softens the selection with Gumbel noise at
//! temperature `tau`:
//!
//! ```text
//! g_i = -ln(-ln u_i),  p = softmax((s + g) / tau),  z = sum_i p_i e_i
//! ```
//!
//! As `tau -> 0` the relaxation approaches the hard Gumbel-argmax sample;
//! as `tau -> inf` it flattens toward uniform. `gumbel_max_equivalence_test`
//! checks the first limit empirically: `argmax(s + g)` is distributed as
//! `softmax(s)`.

use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numgrad::kernels;
use crate::numgrad::tape::{Tape, Var};
use crate::numgrad::tensor::Tensor;
use crate::numgrad::NumError;
use crate::rng;

/// How embeddings are scored against codebook rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogitKind {
    /// `-||h - e_i||^2 / 2`: distance-faithful, never saturates, and its
    /// argmax is the nearest-neighbor assignment.
    #[default]
    NegSqDist,
    /// Cosine similarity of `h` and `e_i`; bounded to `[-1, 1]`, so
    /// temperatures act on a fixed scale.
    Cosine,
}

impl LogitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LogitKind::NegSqDist => "neg_sq_dist",
            LogitKind::Cosine => "cosine",
        }
    }
}

impl FromStr for LogitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "neg_sq_dist" => Ok(LogitKind::NegSqDist),
            "cosine" => Ok(LogitKind::Cosine),
            other => Err(format!("unknown logit kind `{other}` (want neg_sq_dist or cosine)")),
        }
    }
}

/// How a hard code index is selected from an embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectionStrategy {
    /// Soft assignment via Gumbel-softmax; diagnostics use the relaxed
    /// distribution (its argmax equals a Gumbel-argmax sample).
    #[default]
    GumbelSoftmax,
    /// Hard sample `argmax(s + g)` with a straight-through gradient.
    GumbelArgmax,
    /// Deterministic nearest row by cosine similarity, straight-through.
    ArgmaxCosine,
    /// Deterministic nearest row by Euclidean distance, straight-through.
    ArgmaxEuclidean,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 4] = [
        SelectionStrategy::GumbelSoftmax,
        SelectionStrategy::GumbelArgmax,
        SelectionStrategy::ArgmaxCosine,
        SelectionStrategy::ArgmaxEuclidean,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectionStrategy::GumbelSoftmax => "gumbel_softmax",
            SelectionStrategy::GumbelArgmax => "gumbel_argmax",
            SelectionStrategy::ArgmaxCosine => "argmax_cosine",
            SelectionStrategy::ArgmaxEuclidean => "argmax_euclidean",
        }
    }

    /// Whether the strategy consumes Gumbel noise during training.
    pub fn uses_noise(self) -> bool {
        matches!(self, SelectionStrategy::GumbelSoftmax | SelectionStrategy::GumbelArgmax)
    }
}

impl FromStr for SelectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gumbel_softmax" => Ok(SelectionStrategy::GumbelSoftmax),
            "gumbel_argmax" => Ok(SelectionStrategy::GumbelArgmax),
            "argmax_cosine" => Ok(SelectionStrategy::ArgmaxCosine),
            "argmax_euclidean" => Ok(SelectionStrategy::ArgmaxEuclidean),
            other => Err(format!(
                "unknown selection strategy `{other}` (want gumbel_softmax, gumbel_argmax, argmax_cosine, or argmax_euclidean)"
            )),
        }
    }
}

/// `K x d_code` table of code embeddings.
#[derive(Debug, Clone)]
pub struct Codebook {
    e: Tensor,
}

impl Codebook {
    /// Initializes `k` rows of width `d_code` from a scaled Gaussian
    /// (`sigma = 1/sqrt(d_code)`, so rows have roughly unit norm).
    /// Deterministic in `seed`.
    pub fn init(k: usize, d_code: usize, seed: u64) -> Result<Self, NumError> {
        if k == 0 || d_code == 0 {
            return Err(NumError::Invalid(format!("codebook needs k > 0 and d_code > 0, got {k}x{d_code}")));
        }
        let mut r = rng::stream(seed, "codebook-init");
        let scale = 1.0 / (d_code as f64).sqrt();
        let data = (0..k * d_code)
            .map(|_| {
                let g: f64 = r.sample(rand_distr::StandardNormal);
                g * scale
            })
            .collect();
        Ok(Self { e: Tensor::from_raw(k, d_code, data) })
    }

    /// Initializes `k` rows by sampling from `pool` (one candidate per row),
    /// the vector-quantization analogue of seeding k-means from the data:
    /// every codeword starts where some embedding actually is, so no region
    /// of the codebook begins unreachable. Candidates are drawn from the
    /// pool's value-sorted row order, which makes the result invariant to
    /// how the pool rows were arranged — relabeling a graph reorders the
    /// encoder outputs but yields a bit-identical codebook. When `k`
    /// exceeds the pool, the surplus rows reuse pool rows with a small
    /// Gaussian jitter to break exact ties. Deterministic in `seed`.
    pub fn init_from_samples(pool: &Tensor, k: usize, seed: u64) -> Result<Self, NumError> {
        if k == 0 || pool.rows() == 0 || pool.cols() == 0 {
            return Err(NumError::Invalid(format!(
                "codebook sampling needs k > 0 and a non-empty pool, got k={k} pool {:?}",
                pool.shape()
            )));
        }
        let mut order: Vec<usize> = (0..pool.rows()).collect();
        order.sort_by(|&a, &b| {
            pool.row(a)
                .iter()
                .zip(pool.row(b))
                .find_map(|(x, y)| match x.partial_cmp(y).expect("finite embeddings") {
                    std::cmp::Ordering::Equal => None,
                    ord => Some(ord),
                })
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut r = rng::stream(seed, "codebook-init");
        let d = pool.cols();
        let rms = (pool.data().iter().map(|v| v * v).sum::<f64>() / pool.data().len() as f64).sqrt();
        let jitter = 0.01 * rms.max(1e-12);
        let mut data = Vec::with_capacity(k * d);
        if k <= pool.rows() {
            let mut picks = rand::seq::index::sample(&mut r, pool.rows(), k).into_vec();
            picks.sort_unstable();
            for p in picks {
                data.extend_from_slice(pool.row(order[p]));
            }
        } else {
            for c in 0..k {
                let row = pool.row(order[c % pool.rows()]);
                if c < pool.rows() {
                    data.extend_from_slice(row);
                } else {
                    data.extend(row.iter().map(|v| {
                        let g: f64 = r.sample(rand_distr::StandardNormal);
                        v + jitter * g
                    }));
                }
            }
        }
        Ok(Self { e: Tensor::from_raw(k, d, data) })
    }

    pub fn from_tensor(e: Tensor) -> Result<Self, NumError> {
        if e.rows() == 0 || e.cols() == 0 {
            return Err(NumError::Invalid("codebook tensor must be non-empty".into()));
        }
        Ok(Self { e })
    }

    pub fn k(&self) -> usize {
        self.e.rows()
    }

    pub fn d_code(&self) -> usize {
        self.e.cols()
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.e
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.e.row(i)
    }
}

/// Temperature annealing schedule: `tau(epoch) = max(tau_min, tau0 * decay^epoch)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauSchedule {
    pub tau0: f64,
    pub tau_min: f64,
    pub decay: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self { tau0: 1.0, tau_min: 0.1, decay: 0.97 }
    }
}

impl TauSchedule {
    pub fn validate(&self) -> Result<(), NumError> {
        if !(self.tau_min > 0.0 && self.tau_min.is_finite()) {
            return Err(NumError::Invalid(format!("tau_min must be positive, got {}", self.tau_min)));
        }
        if !(self.tau0 >= self.tau_min && self.tau0.is_finite()) {
            return Err(NumError::Invalid(format!(
                "tau0 {} must be >= tau_min {}",
                self.tau0, self.tau_min
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(NumError::Invalid(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        Ok(())
    }

    /// Temperature for `epoch`, clamped below at `tau_min`.
    pub fn anneal(&self, epoch: usize) -> f64 {
        (self.tau0 * self.decay.powi(epoch.min(i32::MAX as usize) as i32)).max(self.tau_min)
    }
}

/// Transforms a uniform draw into a standard Gumbel sample,
/// `g = -ln(-ln u)`, with `u` clamped away from {0, 1} so the result is
/// always finite.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}

/// Draws `count` independent Gumbel samples.
pub fn sample_gumbel(count: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..count).map(|_| gumbel_from_uniform(rng.random::<f64>())).collect()
}

/// Scores one embedding row against every codebook row.
pub fn logits(h: &[f64], codebook: &Codebook, kind: LogitKind) -> Result<Vec<f64>, NumError> {
    if h.len() != codebook.d_code() {
        return Err(NumError::ShapeMismatch {
            op: "logits",
            detail: format!("embedding width {} vs codebook width {}", h.len(), codebook.d_code()),
        });
    }
    let k = codebook.k();
    let mut out = Vec::with_capacity(k);
    match kind {
        LogitKind::NegSqDist => {
            // Grouped exactly like the taped batch build:
            // s = -0.5 * ((<h,h> + <e,e>) + (-2 <h,e>)).
            let hh: f64 = h.iter().map(|v| v * v).sum();
            for i in 0..k {
                let e = codebook.row(i);
                let ee: f64 = e.iter().map(|v| v * v).sum();
                let he: f64 = h.iter().zip(e).map(|(a, b)| a * b).sum();
                out.push(-0.5 * ((hh + ee) + (-2.0 * he)));
            }
        }
        LogitKind::Cosine => {
            let hn = h.iter().map(|v| v * v).sum::<f64>().sqrt();
            for i in 0..k {
                let e = codebook.row(i);
                let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                if hn == 0.0 || en == 0.0 {
                    out.push(0.0);
                } else {
                    let dot: f64 = h.iter().zip(e).map(|(a, b)| (a / hn) * (b / en)).sum();
                    out.push(dot);
                }
            }
        }
    }
    Ok(out)
}

/// A soft codebook assignment: the relaxed distribution over codes and the
/// mixed embedding it induces.
#[derive(Debug, Clone)]
pub struct RelaxedAssignment {
    /// Softmax weights over the `K` codes; non-negative, sums to 1.
    pub p: Vec<f64>,
    /// `sum_i p_i e_i`, the differentiable quantized embedding.
    pub z: Vec<f64>,
}

fn check_tau(tau: f64) -> Result<(), NumError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(NumError::Invalid(format!("temperature must be positive and finite, got {tau}")));
    }
    Ok(())
}

/// Gumbel-softmax relaxation of one embedding row with explicit noise (one
/// Gumbel sample per code; pass zeros to disable the stochastic part).
pub fn relax_assign_with_noise(
    h: &[f64],
    codebook: &Codebook,
    tau: f64,
    kind: LogitKind,
    noise: &[f64],
) -> Result<RelaxedAssignment, NumError> {
    check_tau(tau)?;
    let k = codebook.k();
    if noise.len() != k {
        return Err(NumError::ShapeMismatch {
            op: "relax_assign",
            detail: format!("{} noise values for {k} codes", noise.len()),
        });
    }
    let s = logits(h, codebook, kind)?;
    let inv_tau = 1.0 / tau;
    let t: Vec<f64> = s.iter().zip(noise).map(|(si, gi)| (si + gi) * inv_tau).collect();
    let mut p = vec![0.0; k];
    kernels::row_softmax(&t, k, &mut p);
    let mut z = vec![0.0; codebook.d_code()];
    kernels::matmul(&p, codebook.embeddings().data(), 1, k, codebook.d_code(), &mut z);
    Ok(RelaxedAssignment { p, z })
}

/// Gumbel-softmax relaxation with noise drawn from `rng` (always exactly
/// `K` draws, so stream positions stay aligned across strategies).
pub fn relax_assign(
    h: &[f64],
    codebook: &Codebook,
    tau: f64,
    kind: LogitKind,
    rng: &mut ChaCha8Rng,
) -> Result<RelaxedAssignment, NumError> {
    let noise = sample_gumbel(codebook.k(), rng);
    relax_assign_with_noise(h, codebook, tau, kind, &noise)
}

/// Relaxes every row of `h` at once. `noise` must be `n x K` (zeros for
/// deterministic evaluation). Returns `(p, z)` with rows matching `h`;
/// bit-identical to the taped batch construction.
pub fn relax_batch(
    h: &Tensor,
    codebook: &Codebook,
    tau: f64,
    kind: LogitKind,
    noise: &Tensor,
) -> Result<(Tensor, Tensor), NumError> {
    check_tau(tau)?;
    let (n, d) = h.shape();
    let k = codebook.k();
    if d != codebook.d_code() {
        return Err(NumError::ShapeMismatch {
            op: "relax_batch",
            detail: format!("embedding width {d} vs codebook width {}", codebook.d_code()),
        });
    }
    if noise.shape() != (n, k) {
        return Err(NumError::ShapeMismatch {
            op: "relax_batch",
            detail: format!("noise {:?} for {n} rows and {k} codes", noise.shape()),
        });
    }
    let inv_tau = 1.0 / tau;
    let mut t = vec![0.0; n * k];
    for r in 0..n {
        let s = logits(h.row(r), codebook, kind)?;
        for (c, si) in s.iter().enumerate() {
            t[r * k + c] = (si + noise.get(r, c)) * inv_tau;
        }
    }
    let mut p = vec![0.0; n * k];
    kernels::row_softmax(&t, k, &mut p);
    let p = Tensor::from_raw(n, k, p);
    let mut z = vec![0.0; n * d];
    kernels::matmul(p.data(), codebook.embeddings().data(), n, k, d, &mut z);
    Ok((p, Tensor::from_raw(n, d, z)))
}

/// Hard code selection. Deterministic strategies ignore `noise`; the Gumbel
/// strategies add it to the logits before taking the argmax (for
/// `GumbelSoftmax` this equals the argmax of the relaxed distribution,
/// which is how its diagnostics are defined). Ties resolve to the lowest
/// index. Returns the winning index and its one-hot indicator.
pub fn hard_assign_with_noise(
    h: &[f64],
    codebook: &Codebook,
    strategy: SelectionStrategy,
    kind: LogitKind,
    noise: &[f64],
) -> Result<(usize, Vec<f64>), NumError> {
    let k = codebook.k();
    let index = match strategy {
        SelectionStrategy::ArgmaxEuclidean => {
            // argmax of -||h-e||^2/2 == nearest neighbor, independent of `kind`.
            let s = logits(h, codebook, LogitKind::NegSqDist)?;
            argmax(&s)
        }
        SelectionStrategy::ArgmaxCosine => {
            let s = logits(h, codebook, LogitKind::Cosine)?;
            argmax(&s)
        }
        SelectionStrategy::GumbelSoftmax | SelectionStrategy::GumbelArgmax => {
            if noise.len() != k {
                return Err(NumError::ShapeMismatch {
                    op: "hard_assign",
                    detail: format!("{} noise values for {k} codes", noise.len()),
                });
            }
            let s = logits(h, codebook, kind)?;
            let noisy: Vec<f64> = s.iter().zip(noise).map(|(si, gi)| si + gi).collect();
            argmax(&noisy)
        }
    };
    let mut one_hot = vec![0.0; k];
    one_hot[index] = 1.0;
    Ok((index, one_hot))
}

/// [`hard_assign_with_noise`] drawing its Gumbel noise from `rng`
/// (deterministic strategies draw nothing).
pub fn hard_assign(
    h: &[f64],
    codebook: &Codebook,
    strategy: SelectionStrategy,
    kind: LogitKind,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, Vec<f64>), NumError> {
    let noise = if strategy.uses_noise() {
        sample_gumbel(codebook.k(), rng)
    } else {
        vec![0.0; codebook.k()]
    };
    hard_assign_with_noise(h, codebook, strategy, kind, &noise)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Taped batch relaxation: scores, softmax, log-softmax, and mixed
/// embeddings as tape vars.
pub struct RelaxVars {
    /// `n x K` logits.
    pub s: Var,
    /// `n x K` relaxed assignment (softmax rows).
    pub p: Var,
    /// `n x K` log of `p`, computed stably from the same pre-softmax input.
    pub log_p: Var,
    /// `n x d_code` mixed embeddings `P . E`.
    pub z: Var,
}

/// Builds the Gumbel-softmax relaxation on the tape for every row of `h`.
/// `codebook` may be a parameter (Stage 1) or constant (Stage 2); `noise`
/// must be an `n x K` constant. Matches [`relax_batch`] bit for bit.
pub fn relax_batch_tape(
    tape: &mut Tape,
    h: Var,
    codebook: Var,
    kind: LogitKind,
    tau: f64,
    noise: Var,
) -> Result<RelaxVars, NumError> {
    check_tau(tau)?;
    let (n, d) = tape.value(h).shape();
    let (k, dc) = tape.value(codebook).shape();
    if d != dc {
        return Err(NumError::ShapeMismatch {
            op: "relax_batch_tape",
            detail: format!("embedding width {d} vs codebook width {dc}"),
        });
    }
    if tape.value(noise).shape() != (n, k) {
        return Err(NumError::ShapeMismatch {
            op: "relax_batch_tape",
            detail: format!("noise {:?} for {n} rows and {k} codes", tape.value(noise).shape()),
        });
    }

    let s = match kind {
        LogitKind::NegSqDist => {
            let ones_d = tape.constant(Tensor::filled(d, 1, 1.0)?);
            let ones_n = tape.constant(Tensor::filled(n, 1, 1.0)?);
            let h_sq = tape.multiply(h, h)?;
            let row_norms = tape.matmul(h_sq, ones_d)?; // n x 1
            let ones_k_row = tape.constant(Tensor::filled(1, k, 1.0)?);
            let rb = tape.matmul(row_norms, ones_k_row)?; // n x K
            let e_sq = tape.multiply(codebook, codebook)?;
            let code_norms = tape.matmul(e_sq, ones_d)?; // K x 1
            let code_norms_t = tape.transpose(code_norms)?; // 1 x K
            let qb = tape.matmul(ones_n, code_norms_t)?; // n x K
            let e_t = tape.transpose(codebook)?;
            let cross = tape.matmul(h, e_t)?; // n x K
            let neg2 = tape.affine(cross, -2.0, 0.0)?;
            let sums = tape.add(rb, qb)?;
            let dist_sq = tape.add(sums, neg2)?;
            tape.affine(dist_sq, -0.5, 0.0)?
        }
        LogitKind::Cosine => {
            let hn = tape.row_l2_normalize(h)?;
            let en = tape.row_l2_normalize(codebook)?;
            let en_t = tape.transpose(en)?;
            tape.matmul(hn, en_t)?
        }
    };

    let noisy = tape.add(s, noise)?;
    let t = tape.affine(noisy, 1.0 / tau, 0.0)?;
    let p = tape.row_softmax(t)?;
    let log_p = tape.row_log_softmax(t)?;
    let z = tape.matmul(p, codebook)?;
    Ok(RelaxVars { s, p, log_p, z })
}

/// Hard assignment on the tape: per-row indices are chosen by the plain
/// path from current values, the quantized rows are `codebook[indices]`,
/// and gradients pass straight through to `h`. Returns the indices used.
pub fn hard_assign_batch_tape(
    tape: &mut Tape,
    h: Var,
    codebook: Var,
    strategy: SelectionStrategy,
    kind: LogitKind,
    noise: &Tensor,
) -> Result<(Arc<Vec<usize>>, Var), NumError> {
    let (n, _) = tape.value(h).shape();
    let k = tape.value(codebook).rows();
    if noise.shape() != (n, k) {
        return Err(NumError::ShapeMismatch {
            op: "hard_assign_batch_tape",
            detail: format!("noise {:?} for {n} rows and {k} codes", noise.shape()),
        });
    }
    let cb = Codebook::from_tensor(tape.value(codebook).clone())?;
    let mut indices = Vec::with_capacity(n);
    for r in 0..n {
        let (idx, _) =
            hard_assign_with_noise(tape.value(h).row(r), &cb, strategy, kind, noise.row(r))?;
        indices.push(idx);
    }
    let indices = Arc::new(indices);
    let q = tape.straight_through(h, codebook, indices.clone())?;
    Ok((indices, q))
}

/// Perplexity `2^H2(mean p)` of a batch of assignment rows (soft
/// distributions or one-hot indicators). Row order cannot affect the
/// result; a uniform batch over `K` codes yields exactly `K`, a constant
/// one-hot batch exactly 1.
pub fn perplexity(assignments: &Tensor) -> Result<f64, NumError> {
    let (n, k) = assignments.shape();
    if n == 0 || k == 0 {
        return Err(NumError::Invalid("perplexity of an empty assignment batch".into()));
    }
    for r in 0..n {
        let row = assignments.row(r);
        if row.iter().any(|&v| v < 0.0) {
            return Err(NumError::Invalid(format!("assignment row {r} has negative mass")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(NumError::Invalid(format!("assignment row {r} sums to {sum}, not 1")));
        }
    }
    let mut mean = vec![0.0; k];
    kernels::column_mean_sorted(assignments.data(), n, k, &mut mean);
    // Entropy in bits, then 2^H: both steps are exact for the uniform and
    // one-hot cases the diagnostics are calibrated against.
    let h2: f64 = -mean.iter().map(|&p| if p > 0.0 { p * p.log2() } else { 0.0 }).sum::<f64>();
    Ok(h2.exp2())
}

/// Fraction of the `k` codes that appear in `indices`.
pub fn usage_rate(indices: &[usize], k: usize) -> Result<f64, NumError> {
    if k == 0 {
        return Err(NumError::Invalid("usage rate over an empty codebook".into()));
    }
    if indices.is_empty() {
        return Err(NumError::Invalid("usage rate of an empty assignment list".into()));
    }
    let mut seen = vec![false; k];
    for &i in indices {
        if i >= k {
            return Err(NumError::RowOutOfRange { index: i, rows: k });
        }
        seen[i] = true;
    }
    Ok(seen.iter().filter(|&&s| s).count() as f64 / k as f64)
}

/// Result of the Gumbel-max check: empirical argmax frequencies vs the
/// analytic softmax, and their total-variation distance.
#[derive(Debug, Clone)]
pub struct GumbelMaxReport {
    pub softmax: Vec<f64>,
    pub empirical: Vec<f64>,
    pub tv_distance: f64,
}

/// Samples `argmax(logits + g)` `samples` times and compares the empirical
/// index distribution against `softmax(logits)` in total variation.
/// Callers wanting a meaningful tolerance should pass at least ~1000
/// samples; fewer still run, the Monte Carlo error just swamps the
/// estimate (which is itself useful for demonstrating undersampling).
pub fn gumbel_max_equivalence_test(
    logits: &[f64],
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GumbelMaxReport, NumError> {
    if logits.is_empty() {
        return Err(NumError::Invalid("gumbel-max check needs at least one logit".into()));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(NumError::NonFinite { op: "gumbel_max_equivalence_test" });
    }
    if samples == 0 {
        return Err(NumError::Invalid("gumbel-max check needs at least one sample".into()));
    }
    let k = logits.len();
    let mut softmax = vec![0.0; k];
    kernels::row_softmax(logits, k, &mut softmax);

    let mut counts = vec![0u64; k];
    let mut noisy = vec![0.0; k];
    for _ in 0..samples {
        for (t, &s) in noisy.iter_mut().zip(logits) {
            *t = s + gumbel_from_uniform(rng.random::<f64>());
        }
        counts[argmax(&noisy)] += 1;
    }
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / samples as f64).collect();
    let tv_distance =
        0.5 * softmax.iter().zip(&empirical).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(GumbelMaxReport { softmax, empirical, tv_distance })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_codebook() -> Codebook {
        Codebook::from_tensor(
            Tensor::new(3, 2, vec![1.0, 0.0, 0.0, 2.0, -1.0, -1.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let a = Codebook::init(16, 4, 7).unwrap();
        let b = Codebook::init(16, 4, 7).unwrap();
        assert_eq!(a.embeddings().data(), b.embeddings().data());
        let c = Codebook::init(16, 4, 8).unwrap();
        assert_ne!(a.embeddings().data(), c.embeddings().data());
        // Mean squared entry should be near 1/d_code.
        let ms: f64 = a.embeddings().data().iter().map(|v| v * v).sum::<f64>() / 64.0;
        assert!((ms - 0.25).abs() < 0.15, "mean square {ms}");
    }

    #[test]
    fn distance_logits_by_hand() {
        let cb = small_codebook();
        let s = logits(&[1.0, 0.0], &cb, LogitKind::NegSqDist).unwrap();
        assert_eq!(s[0], 0.0); // identical row
        assert_eq!(s[1], -2.5); // dist^2 = 1 + 4
        assert_eq!(s[2], -2.5); // dist^2 = 4 + 1
    }

    #[test]
    fn cosine_logits_by_hand() {
        let cb = small_codebook();
        let s = logits(&[2.0, 0.0], &cb, LogitKind::Cosine).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert!(s[1].abs() < 1e-15);
        assert!((s[2] + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        // Zero embeddings score 0 against everything.
        let s = logits(&[0.0, 0.0], &cb, LogitKind::Cosine).unwrap();
        assert_eq!(s, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn gumbel_transform_hits_known_point() {
        // u = e^-1 gives -ln(-ln(e^-1)) = -ln(1) = 0.
        assert!(gumbel_from_uniform((-1.0_f64).exp()).abs() < 1e-12);
        // Extremes stay finite thanks to clamping.
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
        assert!(gumbel_from_uniform(0.0) < gumbel_from_uniform(1.0));
    }

    #[test]
    fn relaxation_is_a_distribution_and_z_mixes_codes() {
        let cb = small_codebook();
        let mut r = rng::stream(3, "test-gumbel");
        let relax = relax_assign(&[0.9, 0.1], &cb, 1.0, LogitKind::NegSqDist, &mut r).unwrap();
        assert_eq!(relax.p.len(), 3);
        assert!(relax.p.iter().all(|&p| p >= 0.0));
        assert!((relax.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // z is the p-weighted mix of rows.
        for j in 0..2 {
            let want: f64 = (0..3).map(|i| relax.p[i] * cb.row(i)[j]).sum();
            assert!((relax.z[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_relaxation_is_plain_softmax() {
        let cb = small_codebook();
        let h = [0.9, 0.1];
        let relax = relax_assign_with_noise(&h, &cb, 1.0, LogitKind::NegSqDist, &[0.0; 3]).unwrap();
        let s = logits(&h, &cb, LogitKind::NegSqDist).unwrap();
        let mut want = vec![0.0; 3];
        kernels::row_softmax(&s, 3, &mut want);
        assert_eq!(relax.p, want);
    }

    #[test]
    fn lower_tau_sharpens_and_keeps_argmax_with_fixed_noise() {
        let cb = Codebook::init(8, 4, 5).unwrap();
        let h = [0.3, -0.2, 0.5, 0.1];
        let mut r = rng::stream(9, "tau-noise");
        let noise = sample_gumbel(8, &mut r);
        let mut prev_max = 0.0;
        let mut prev_arg = None;
        for tau in [100.0, 10.0, 1.0, 0.1, 0.01] {
            let relax = relax_assign_with_noise(&h, &cb, tau, LogitKind::NegSqDist, &noise).unwrap();
            let max = relax.p.iter().cloned().fold(0.0_f64, f64::max);
            let arg = argmax(&relax.p);
            assert!(max >= prev_max, "max(p) fell from {prev_max} to {max} at tau {tau}");
            if let Some(a) = prev_arg {
                assert_eq!(a, arg, "argmax moved at tau {tau}");
            }
            prev_max = max;
            prev_arg = Some(arg);
        }
        assert!(prev_max > 0.999);
    }

    #[test]
    fn batch_relax_matches_taped_build_bitwise() {
        for kind in [LogitKind::NegSqDist, LogitKind::Cosine] {
            let cb = Codebook::init(6, 3, 11).unwrap();
            let h = Tensor::new(
                4,
                3,
                vec![0.5, -0.2, 0.1, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, -0.3, 0.7, 0.2],
            )
            .unwrap();
            let mut r = rng::stream(2, "batch-noise");
            let noise = Tensor::from_raw(4, 6, sample_gumbel(24, &mut r));

            let (p_plain, z_plain) = relax_batch(&h, &cb, 0.7, kind, &noise).unwrap();

            let mut tape = Tape::new();
            let hv = tape.param(h.clone());
            let ev = tape.param(cb.embeddings().clone());
            let nv = tape.constant(noise.clone());
            let relax = relax_batch_tape(&mut tape, hv, ev, kind, 0.7, nv).unwrap();

            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(tape.value(relax.p)), bits(&p_plain), "{kind:?} p differs");
            assert_eq!(bits(tape.value(relax.z)), bits(&z_plain), "{kind:?} z differs");
        }
    }

    #[test]
    fn taped_relax_gradients_pass_finite_differences() {
        use crate::numgrad::gradcheck::{grad_check, DEFAULT_EPS};
        let cb = Codebook::init(5, 3, 4).unwrap();
        let h = Tensor::new(2, 3, vec![0.4, -0.1, 0.3, -0.5, 0.2, 0.0]).unwrap();
        let mut r = rng::stream(6, "relax-grad-noise");
        let noise = Tensor::from_raw(2, 5, sample_gumbel(10, &mut r));
        for kind in [LogitKind::NegSqDist, LogitKind::Cosine] {
            let noise = noise.clone();
            let report = grad_check(
                &[h.clone(), cb.embeddings().clone()],
                DEFAULT_EPS,
                move |tape, vars| {
                    let nv = tape.constant(noise.clone());
                    let relax = relax_batch_tape(tape, vars[0], vars[1], kind, 0.9, nv)?;
                    // Scalarize through both p and z so every path is exercised.
                    let zsum = tape.sum(relax.z)?;
                    let psq = tape.multiply(relax.p, relax.p)?;
                    let psum = tape.sum(psq)?;
                    tape.add(zsum, psum)
                },
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-6, "{kind:?} rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn hard_assign_picks_nearest_neighbors() {
        let cb = small_codebook();
        let mut r = rng::stream(0, "unused");
        let (i, one_hot) =
            hard_assign(&[-0.9, -1.2], &cb, SelectionStrategy::ArgmaxEuclidean, LogitKind::NegSqDist, &mut r)
                .unwrap();
        assert_eq!(i, 2);
        assert_eq!(one_hot, vec![0.0, 0.0, 1.0]);

        // Cosine ignores magnitude: a long vector along +x picks row 0.
        let (i, _) =
            hard_assign(&[100.0, 1.0], &cb, SelectionStrategy::ArgmaxCosine, LogitKind::NegSqDist, &mut r)
                .unwrap();
        assert_eq!(i, 0);
    }

    #[test]
    fn hard_assign_breaks_ties_toward_lowest_index() {
        let cb = Codebook::from_tensor(Tensor::new(2, 1, vec![1.0, -1.0]).unwrap()).unwrap();
        let mut r = rng::stream(0, "unused");
        // h = 0 is equidistant from both rows.
        let (i, _) =
            hard_assign(&[0.0], &cb, SelectionStrategy::ArgmaxEuclidean, LogitKind::NegSqDist, &mut r)
                .unwrap();
        assert_eq!(i, 0);
    }

    #[test]
    fn gumbel_argmax_with_zero_noise_is_plain_argmax() {
        let cb = small_codebook();
        let (i, _) = hard_assign_with_noise(
            &[0.1, 1.9],
            &cb,
            SelectionStrategy::GumbelArgmax,
            LogitKind::NegSqDist,
            &[0.0; 3],
        )
        .unwrap();
        assert_eq!(i, 1);
    }

    #[test]
    fn tau_schedule_anneals_to_floor() {
        let s = TauSchedule::default();
        s.validate().unwrap();
        assert_eq!(s.anneal(0), 1.0);
        assert!((s.anneal(1) - 0.97).abs() < 1e-15);
        assert!(s.anneal(10) < s.anneal(5));
        assert_eq!(s.anneal(1000), 0.1);
        // Monotone non-increasing across a long horizon.
        let mut prev = f64::INFINITY;
        for epoch in 0..200 {
            let tau = s.anneal(epoch);
            assert!(tau <= prev && tau >= s.tau_min);
            prev = tau;
        }
    }

    #[test]
    fn tau_schedule_rejects_bad_values() {
        assert!(TauSchedule { tau0: 0.05, tau_min: 0.1, decay: 0.97 }.validate().is_err());
        assert!(TauSchedule { tau0: 1.0, tau_min: 0.0, decay: 0.97 }.validate().is_err());
        assert!(TauSchedule { tau0: 1.0, tau_min: 0.1, decay: 0.0 }.validate().is_err());
        assert!(TauSchedule { tau0: 1.0, tau_min: 0.1, decay: 1.5 }.validate().is_err());
    }

    #[test]
    fn perplexity_exact_cases() {
        // Uniform over 8 codes -> exactly 8.
        let uniform = Tensor::filled(5, 8, 0.125).unwrap();
        assert_eq!(perplexity(&uniform).unwrap(), 8.0);
        // Constant one-hot batch -> exactly 1.
        let mut rows = Vec::new();
        for _ in 0..7 {
            let mut row = vec![0.0; 8];
            row[3] = 1.0;
            rows.push(row);
        }
        assert_eq!(perplexity(&Tensor::from_rows(&rows).unwrap()).unwrap(), 1.0);
        // Two distinct one-hots -> mean [0.5, 0.5] -> exactly 2.
        let two = Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(perplexity(&two).unwrap(), 2.0);
    }

    #[test]
    fn perplexity_is_row_order_invariant() {
        let a = Tensor::new(3, 2, vec![0.9, 0.1, 0.3, 0.7, 0.5, 0.5]).unwrap();
        let b = Tensor::new(3, 2, vec![0.5, 0.5, 0.9, 0.1, 0.3, 0.7]).unwrap();
        assert_eq!(perplexity(&a).unwrap().to_bits(), perplexity(&b).unwrap().to_bits());
    }

    #[test]
    fn perplexity_rejects_bad_batches() {
        assert!(perplexity(&Tensor::zeros(0, 4)).is_err());
        let not_normalized = Tensor::new(1, 2, vec![0.6, 0.6]).unwrap();
        assert!(perplexity(&not_normalized).is_err());
        let negative = Tensor::new(1, 2, vec![1.5, -0.5]).unwrap();
        assert!(perplexity(&negative).is_err());
    }

    #[test]
    fn usage_rate_counts_distinct_codes() {
        assert_eq!(usage_rate(&[0, 0, 1], 4).unwrap(), 0.5);
        assert_eq!(usage_rate(&[3], 4).unwrap(), 0.25);
        assert!(usage_rate(&[], 4).is_err());
        assert!(matches!(usage_rate(&[4], 4), Err(NumError::RowOutOfRange { .. })));
    }

    #[test]
    fn gumbel_max_sampling_tracks_softmax() {
        let logits = [1.0, 0.0, -1.0, 0.5];
        let mut r = rng::stream(7, "gumbel-max-check");
        let report = gumbel_max_equivalence_test(&logits, 40_000, &mut r).unwrap();
        assert!(report.tv_distance < 0.02, "tv {}", report.tv_distance);
        assert!((report.empirical.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gumbel_max_check_rejects_degenerate_inputs() {
        let mut r = rng::stream(7, "gumbel-max-check");
        assert!(gumbel_max_equivalence_test(&[0.0, 1.0], 0, &mut r).is_err());
        assert!(gumbel_max_equivalence_test(&[], 5000, &mut r).is_err());
        assert!(gumbel_max_equivalence_test(&[f64::NAN], 5000, &mut r).is_err());
        // Undersampled runs still complete; they just estimate badly.
        let report = gumbel_max_equivalence_test(&[0.0, 1.0], 10, &mut r).unwrap();
        assert!(report.tv_distance.is_finite());
    }
}
