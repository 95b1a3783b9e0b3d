//! Multi-run experiment drivers: the codebook-lookup strategy comparison
//! and the neighborhood-hops ablation.
//!
//! Each sub-run is independent (own seed-derived RNG streams, own model),
//! so with the `parallel` feature the runs fan out across threads; results
//! are merged in a fixed key order either way, making the output
//! deterministic in `(config, seeds)`.

use crate::codebook::SelectionStrategy;
use crate::graph::{Graph, Split};
use crate::stage1::{train_stage1, Stage1Artifacts, Stage1Config, Stage1Error};
use crate::stage2::{evaluate_split, train_stage2, Stage2Config, Stage2Error};
use crate::student::{build_vocab, StudentDims, StudentParams};

/// Runs `jobs` over `f`, in parallel when the feature is on; output order
/// always matches input order.
fn run_all<J, R, E, F>(jobs: Vec<J>, f: F) -> Result<Vec<R>, E>
where
    J: Sync,
    R: Send,
    E: Send,
    F: Fn(&J) -> Result<R, E> + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        jobs.par_iter().map(&f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        jobs.iter().map(&f).collect()
    }
}

/// Seed-averaged end-of-training diagnostics for one selection strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupRow {
    pub strategy: SelectionStrategy,
    /// Mean final-epoch codebook perplexity.
    pub perplexity: f64,
    /// Mean final-epoch usage rate (distinct codes / K).
    pub usage: f64,
    pub loss_node: f64,
    pub loss_edge: f64,
    /// Final-epoch values per seed, for spread checks.
    pub per_seed_usage: Vec<f64>,
    pub per_seed_perplexity: Vec<f64>,
}

/// Trains Stage 1 once per `(strategy, seed)` — all four lookup strategies
/// share each seed — and reports the final training epoch's losses and
/// codebook diagnostics, averaged over seeds. Rows come back in
/// [`SelectionStrategy::ALL`] order.
pub fn compare_lookup(
    graph: &Graph,
    base: &Stage1Config,
    seeds: &[u64],
) -> Result<Vec<LookupRow>, Stage1Error> {
    if seeds.is_empty() {
        return Err(Stage1Error::Config("need at least one seed".into()));
    }
    base.validate()?;
    let jobs: Vec<(SelectionStrategy, u64)> = SelectionStrategy::ALL
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let finals = run_all(jobs, |&(strategy, seed)| {
        let cfg = Stage1Config { strategy, ..base.clone() };
        let out = train_stage1(graph, &cfg, seed)?;
        let last = out
            .metrics
            .last()
            .ok_or_else(|| Stage1Error::Config("comparison needs epochs >= 1".into()))?;
        Ok::<_, Stage1Error>(last.clone())
    })?;

    let n = seeds.len();
    let rows = SelectionStrategy::ALL
        .iter()
        .enumerate()
        .map(|(si, &strategy)| {
            let chunk = &finals[si * n..(si + 1) * n];
            let mean = |pick: fn(&crate::metrics::Stage1EpochMetrics) -> f64| {
                chunk.iter().map(pick).sum::<f64>() / n as f64
            };
            LookupRow {
                strategy,
                perplexity: mean(|m| m.perplexity),
                usage: mean(|m| m.usage),
                loss_node: mean(|m| m.loss_node),
                loss_edge: mean(|m| m.loss_edge),
                per_seed_usage: chunk.iter().map(|m| m.usage).collect(),
                per_seed_perplexity: chunk.iter().map(|m| m.perplexity).collect(),
            }
        })
        .collect();
    Ok(rows)
}

/// Seed-averaged test accuracy for one `(hops, alignment)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct HopsRow {
    pub hops: usize,
    pub aligned: bool,
    /// Mean test accuracy over seeds.
    pub test_acc: f64,
    /// Per-seed accuracies, for overlap checks.
    pub per_seed: Vec<f64>,
}

/// Trains Stage 2 for every `hops in {0, 1, 2} x {aligned, unaligned}`
/// cell and each seed, against one fixed Stage-1 checkpoint, and reports
/// test accuracy of the best-validation student. The unaligned arm zeroes
/// both alignment weights but shares everything else, including the
/// student initialization and shuffle order for the same seed. Rows are
/// ordered hops-major with the aligned arm first.
pub fn ablate_hops(
    graph: &Graph,
    artifacts: &Stage1Artifacts,
    base: &Stage2Config,
    seeds: &[u64],
) -> Result<Vec<HopsRow>, Stage2Error> {
    if seeds.is_empty() {
        return Err(Stage2Error::Config("need at least one seed".into()));
    }
    base.validate()?;
    let vocab = build_vocab(graph, base.bins, base.vocab_max)?;
    let dims = StudentDims {
        d_tok: base.d_tok,
        d_h: base.d_h,
        d_rep: base.d_rep,
        d_code: artifacts.model.codebook.d_code(),
        num_classes: graph.num_classes(),
        attention: base.attention,
    };

    let cells: Vec<(usize, bool)> =
        [0usize, 1, 2].iter().flat_map(|&h| [(h, true), (h, false)]).collect();
    let jobs: Vec<(usize, bool, u64)> = cells
        .iter()
        .flat_map(|&(h, aligned)| seeds.iter().map(move |&s| (h, aligned, s)))
        .collect();

    let accs = run_all(jobs, |&(hops, aligned, seed)| {
        let cfg = Stage2Config {
            hops,
            alpha_mse: if aligned { base.alpha_mse } else { 0.0 },
            beta_kl: if aligned { base.beta_kl } else { 0.0 },
            ..base.clone()
        };
        let init = StudentParams::init(vocab.len(), &dims, seed)?;
        let out = train_stage2(graph, artifacts, init, &vocab, &cfg, seed)?;
        evaluate_split(&out.student, &vocab, graph, Split::Test, &cfg)
    })?;

    let n = seeds.len();
    let rows = cells
        .iter()
        .enumerate()
        .map(|(ci, &(hops, aligned))| {
            let per_seed = accs[ci * n..(ci + 1) * n].to_vec();
            HopsRow {
                hops,
                aligned,
                test_acc: per_seed.iter().sum::<f64>() / n as f64,
                per_seed,
            }
        })
        .collect();
    Ok(rows)
}

/// Edge-reconstruction loss of the best constant predictor (the graph's
/// density over all ordered pairs, diagonal included): `d * (1 - d)`.
/// A structure-aware model must beat this to be saying anything.
pub fn constant_density_edge_baseline(graph: &Graph) -> f64 {
    let n = graph.n() as f64;
    let d = 2.0 * graph.num_edges() as f64 / (n * n);
    d * (1.0 - d)
}
