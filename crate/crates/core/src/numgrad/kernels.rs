//! Shared numeric inner loops.
//!
//! Every kernel has a sequential implementation; with the `parallel` feature
//! (the default) large inputs are split across rayon workers **by row**, and
//! each row is computed by exactly the same scalar code in exactly the same
//! order. Parallel and sequential builds therefore produce bit-identical
//! results — asserted by tests and compared by the `parallel` bench.
//!
//! Reductions that collapse many values into one (`sorted_sum`,
//! `column_mean_sorted`, neighbor means) first order their addends by value
//! (`f64::total_cmp`), which makes scalar losses invariant under node or
//! token relabeling at the bit level, not just approximately.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum per-call flop estimate before rayon is worth waking up.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 16 * 1024;

/// Runs `f` over disjoint `width`-sized output rows, in parallel when the
/// estimated work is large enough. `f` must not depend on execution order.
pub fn for_each_row<F>(out: &mut [f64], width: usize, work_per_row: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(width > 0 && out.len() % width == 0);
    #[cfg(feature = "parallel")]
    {
        let rows = out.len() / width;
        if rows > 1 && rows.saturating_mul(work_per_row) >= PAR_THRESHOLD {
            out.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work_per_row;
    for (i, row) in out.chunks_mut(width).enumerate() {
        f(i, row);
    }
}

/// Sums values in ascending `total_cmp` order. Sorting first makes the
/// result independent of the caller's ordering of `values`.
pub fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

fn matmul_row(i: usize, out_row: &mut [f64], a: &[f64], b: &[f64], k: usize, n: usize) {
    out_row.fill(0.0);
    for l in 0..k {
        let a_il = a[i * k + l];
        let b_row = &b[l * n..(l + 1) * n];
        for (o, &b_lj) in out_row.iter_mut().zip(b_row) {
            *o += a_il * b_lj;
        }
    }
}

/// `(m x k) . (k x n)` into `out` (`m x n`), sequential.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (i, row) in out.chunks_mut(n).enumerate() {
        matmul_row(i, row, a, b, k, n);
    }
}

/// `(m x k) . (k x n)` into `out`, parallel over output rows when built with
/// the `parallel` feature and the product is large; bit-identical to
/// [`matmul_seq`] either way.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(out, n.max(1), 2 * k * n, |i, row| matmul_row(i, row, a, b, k, n));
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut denom = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - m).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut denom = 0.0;
    for &v in x {
        denom += (v - m).exp();
    }
    let lse = denom.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - m - lse;
    }
}

/// Softmax independently over each length-`n` row of `x`.
pub fn row_softmax(x: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), out.len());
    for_each_row(out, n, 8 * n, |i, row| softmax_row(&x[i * n..(i + 1) * n], row));
}

/// Log-softmax independently over each length-`n` row of `x`.
pub fn row_log_softmax(x: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), out.len());
    for_each_row(out, n, 8 * n, |i, row| log_softmax_row(&x[i * n..(i + 1) * n], row));
}

/// Per-column mean over all rows, summed in value order so the result does
/// not depend on row ordering. `x` is `rows x n`; `out` has length `n`.
pub fn column_mean_sorted(x: &[f64], rows: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), rows * n);
    debug_assert_eq!(out.len(), n);
    for_each_row(out, 1, 8 * rows, |j, cell| {
        let mut col: Vec<f64> = (0..rows).map(|r| x[r * n + j]).collect();
        cell[0] = sorted_sum(&mut col) / rows as f64;
    });
}

/// Mean of neighbor rows for every node, in value order per `(node, dim)`.
/// Nodes without neighbors get a zero row. `adjacency[u]` lists `u`'s
/// neighbors; rows of `x` are node features.
pub fn neighbor_mean(x: &[f64], n_cols: usize, adjacency: &[Vec<usize>], out: &mut [f64]) {
    debug_assert_eq!(out.len(), adjacency.len() * n_cols);
    let avg_deg = x.len().max(1) / n_cols.max(1);
    for_each_row(out, n_cols, 8 * n_cols * avg_deg.max(1), |u, row| {
        let nb = &adjacency[u];
        if nb.is_empty() {
            row.fill(0.0);
            return;
        }
        let inv = 1.0 / nb.len() as f64;
        let mut vals = Vec::with_capacity(nb.len());
        for (j, cell) in row.iter_mut().enumerate() {
            vals.clear();
            vals.extend(nb.iter().map(|&v| x[v * n_cols + j]));
            *cell = sorted_sum(&mut vals) * inv;
        }
    });
}

/// Gradient of [`neighbor_mean`] with respect to `x`, assuming a symmetric
/// adjacency (undirected graph): `dX[v] = sum over u in NB(v) of G[u] / deg(u)`.
pub fn neighbor_mean_backward(
    grad: &[f64],
    n_cols: usize,
    adjacency: &[Vec<usize>],
    out: &mut [f64],
) {
    debug_assert_eq!(grad.len(), out.len());
    let avg_deg = grad.len().max(1) / n_cols.max(1);
    for_each_row(out, n_cols, 8 * n_cols * avg_deg.max(1), |v, row| {
        let nb = &adjacency[v];
        if nb.is_empty() {
            row.fill(0.0);
            return;
        }
        let mut vals = Vec::with_capacity(nb.len());
        for (j, cell) in row.iter_mut().enumerate() {
            vals.clear();
            vals.extend(nb.iter().map(|&u| grad[u * n_cols + j] / adjacency[u].len() as f64));
            *cell = sorted_sum(&mut vals);
        }
    });
}
