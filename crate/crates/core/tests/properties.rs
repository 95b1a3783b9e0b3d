//! Randomized invariants for the quantization, kernel, graph, and
//! vocabulary layers. Each property states a contract the rest of the
//! workspace leans on: simplex-valued relaxations, bit-level permutation
//! invariance of sorted reductions, dispatching/sequential kernel
//! agreement, canonical graph construction, and monotone feature binning.

use std::collections::HashSet;

use langtopo_core::codebook::{
    gumbel_from_uniform, hard_assign_with_noise, logits, perplexity, relax_assign_with_noise,
    usage_rate, Codebook, LogitKind, SelectionStrategy, TauSchedule,
};
use langtopo_core::graph::{k_hop_neighbors, Graph, Split};
use langtopo_core::numgrad::kernels;
use langtopo_core::numgrad::tensor::Tensor;
use langtopo_core::rng;
use langtopo_core::student::{build_vocab, serialize_node, NODE, PAD, SEP, UNK};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// A codebook plus one query embedding of matching width, with entries
/// bounded so exp/softmax never overflow.
fn codebook_and_query() -> impl Strategy<Value = (Codebook, Vec<f64>)> {
    (2usize..8, 1usize..5).prop_flat_map(|(k, d)| {
        let entries = prop::collection::vec(-3.0f64..3.0, k * d);
        let query = prop::collection::vec(-3.0f64..3.0, d);
        (entries, query).prop_map(move |(e, h)| {
            let cb = Codebook::from_tensor(Tensor::new(k, d, e).unwrap()).unwrap();
            (cb, h)
        })
    })
}

fn both_kinds() -> impl Strategy<Value = LogitKind> {
    prop_oneof![Just(LogitKind::NegSqDist), Just(LogitKind::Cosine)]
}

/// Node count plus an arbitrary raw edge list over it: duplicates,
/// reversals, and self-loops included on purpose.
fn raw_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2usize..12).prop_flat_map(|n| {
        (Just(n), prop::collection::vec((0..n, 0..n), 0..40))
    })
}

fn build_graph(n: usize, raw_edges: &[(usize, usize)], features: Tensor) -> Graph {
    let labels = vec![0; n];
    let split = vec![Split::Train; n];
    Graph::new(n, raw_edges, features, labels, 2, split).unwrap()
}

proptest! {
    #[test]
    fn relaxed_assignments_lie_on_the_simplex(
        (cb, h) in codebook_and_query(),
        kind in both_kinds(),
        tau in 0.05f64..5.0,
        uniforms in prop::collection::vec(0.0f64..1.0, 8),
    ) {
        let noise: Vec<f64> = uniforms.iter().take(cb.k()).map(|&u| gumbel_from_uniform(u)).collect();
        let out = relax_assign_with_noise(&h, &cb, tau, kind, &noise).unwrap();
        prop_assert_eq!(out.p.len(), cb.k());
        let mut sum = 0.0;
        for &p in &out.p {
            prop_assert!(p.is_finite() && (0.0..=1.0).contains(&p), "p = {p}");
            sum += p;
        }
        prop_assert!((sum - 1.0).abs() <= 1e-12, "simplex sum {sum}");
        // z must be exactly the p-weighted codebook mix.
        for c in 0..cb.d_code() {
            let manual: f64 = (0..cb.k()).map(|i| out.p[i] * cb.row(i)[c]).sum();
            prop_assert!((out.z[c] - manual).abs() <= 1e-9);
        }
    }

    #[test]
    fn lowering_temperature_never_flattens_the_winner(
        (cb, h) in codebook_and_query(),
        kind in both_kinds(),
        (tau_lo, tau_hi) in (0.02f64..0.5, 0.5f64..5.0),
    ) {
        let zeros = vec![0.0; cb.k()];
        let sharp = relax_assign_with_noise(&h, &cb, tau_lo, kind, &zeros).unwrap();
        let smooth = relax_assign_with_noise(&h, &cb, tau_hi, kind, &zeros).unwrap();
        let max = |p: &[f64]| p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(max(&sharp.p) >= max(&smooth.p) - 1e-12);
    }

    #[test]
    fn hard_assignment_is_a_valid_one_hot_at_the_nearest_code(
        (cb, h) in codebook_and_query(),
    ) {
        let zeros = vec![0.0; cb.k()];
        let (idx, one_hot) =
            hard_assign_with_noise(&h, &cb, SelectionStrategy::ArgmaxEuclidean, LogitKind::Cosine, &zeros)
                .unwrap();
        prop_assert!(idx < cb.k());
        prop_assert_eq!(one_hot.iter().filter(|&&v| v == 1.0).count(), 1);
        prop_assert_eq!(one_hot.iter().filter(|&&v| v == 0.0).count(), cb.k() - 1);
        prop_assert_eq!(one_hot[idx], 1.0);
        // Brute-force nearest neighbor, ties to the lowest index.
        let dist = |i: usize| -> f64 {
            h.iter().zip(cb.row(i)).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        let mut best = 0;
        for i in 1..cb.k() {
            if dist(i) < dist(best) {
                best = i;
            }
        }
        prop_assert_eq!(idx, best);
    }

    #[test]
    fn gumbel_argmax_picks_the_largest_noisy_logit(
        (cb, h) in codebook_and_query(),
        kind in both_kinds(),
        uniforms in prop::collection::vec(0.001f64..0.999, 8),
    ) {
        let noise: Vec<f64> = uniforms.iter().take(cb.k()).map(|&u| gumbel_from_uniform(u)).collect();
        let (idx, _) =
            hard_assign_with_noise(&h, &cb, SelectionStrategy::GumbelArgmax, kind, &noise).unwrap();
        let s = logits(&h, &cb, kind).unwrap();
        let noisy: Vec<f64> = s.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let mut best = 0;
        for i in 1..noisy.len() {
            if noisy[i] > noisy[best] {
                best = i;
            }
        }
        prop_assert_eq!(idx, best);
    }

    #[test]
    fn perplexity_stays_between_one_and_k(
        (rows, k) in (1usize..6, 2usize..9),
        raw in prop::collection::vec(0.01f64..1.0, 48),
    ) {
        let mut data = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let slice = &raw[r * k..(r + 1) * k];
            let sum: f64 = slice.iter().sum();
            data.extend(slice.iter().map(|v| v / sum));
        }
        let perp = perplexity(&Tensor::new(rows, k, data).unwrap()).unwrap();
        prop_assert!(perp >= 1.0 - 1e-9, "perplexity {perp} below 1");
        prop_assert!(perp <= k as f64 + 1e-9, "perplexity {perp} above K = {k}");
    }

    #[test]
    fn usage_rate_counts_distinct_codes(
        k in 1usize..20,
        picks in prop::collection::vec(0usize..64, 1..40),
    ) {
        let indices: Vec<usize> = picks.iter().map(|&i| i % k).collect();
        let rate = usage_rate(&indices, k).unwrap();
        let distinct: HashSet<usize> = indices.iter().copied().collect();
        prop_assert_eq!(rate, distinct.len() as f64 / k as f64);
        prop_assert!(rate > 0.0 && rate <= 1.0);
    }

    #[test]
    fn sorted_sum_ignores_input_order_bitwise(
        values in prop::collection::vec(-1e6f64..1e6, 0..60),
        seed in any::<u64>(),
    ) {
        let mut a = values.clone();
        let mut b = values;
        b.shuffle(&mut rng::stream(seed, "prop-shuffle"));
        prop_assert_eq!(kernels::sorted_sum(&mut a).to_bits(), kernels::sorted_sum(&mut b).to_bits());
    }

    #[test]
    fn column_means_ignore_row_order_bitwise(
        (rows, n) in (1usize..8, 1usize..6),
        raw in prop::collection::vec(-100.0f64..100.0, 48),
        seed in any::<u64>(),
    ) {
        let x: Vec<f64> = raw.iter().cycle().take(rows * n).copied().collect();
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut rng::stream(seed, "prop-rows"));
        let mut permuted = vec![0.0; rows * n];
        for (dst, &src) in order.iter().enumerate() {
            permuted[dst * n..(dst + 1) * n].copy_from_slice(&x[src * n..(src + 1) * n]);
        }
        let mut out_a = vec![0.0; n];
        let mut out_b = vec![0.0; n];
        kernels::column_mean_sorted(&x, rows, n, &mut out_a);
        kernels::column_mean_sorted(&permuted, rows, n, &mut out_b);
        for c in 0..n {
            prop_assert_eq!(out_a[c].to_bits(), out_b[c].to_bits());
        }
    }

    #[test]
    fn dispatching_matmul_matches_sequential_bitwise(
        (m, k, n) in (1usize..40, 1usize..40, 1usize..40),
        raw in prop::collection::vec(-2.0f64..2.0, 128),
    ) {
        // Sizes straddle the parallel dispatch threshold, so both code
        // paths get exercised across the case set.
        let a: Vec<f64> = raw.iter().cycle().take(m * k).copied().collect();
        let b: Vec<f64> = raw.iter().cycle().skip(7).take(k * n).copied().collect();
        let mut fast = vec![0.0; m * n];
        let mut slow = vec![0.0; m * n];
        kernels::matmul(&a, &b, m, k, n, &mut fast);
        kernels::matmul_seq(&a, &b, m, k, n, &mut slow);
        for (x, y) in fast.iter().zip(&slow) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn graph_construction_canonicalizes_any_edge_list(
        (n, raw_edges) in raw_graph(),
    ) {
        let g = build_graph(n, &raw_edges, Tensor::filled(n, 1, 1.0).unwrap());
        // Stored edges: unique, u < v, sorted.
        for w in g.edges().windows(2) {
            prop_assert!(w[0] < w[1], "edges out of order: {:?}", w);
        }
        for &(u, v) in g.edges() {
            prop_assert!(u < v && v < n);
        }
        // Adjacency: symmetric, loop-free, strictly sorted, degree sum 2m.
        let mut degree_sum = 0;
        for u in 0..n {
            let nb = g.neighbors(u);
            degree_sum += nb.len();
            for w in nb.windows(2) {
                prop_assert!(w[0] < w[1]);
            }
            for &v in nb {
                prop_assert!(v != u, "self-loop survived at {u}");
                prop_assert!(g.neighbors(v).contains(&u), "asymmetric edge {u}-{v}");
            }
        }
        prop_assert_eq!(degree_sum, 2 * g.num_edges());
    }

    #[test]
    fn k_hop_neighborhoods_respect_the_budget(
        (n, raw_edges) in raw_graph(),
        node_pick in 0usize..64,
        hops in 0usize..3,
        budget in 0usize..12,
    ) {
        let g = build_graph(n, &raw_edges, Tensor::filled(n, 1, 1.0).unwrap());
        let node = node_pick % n;
        let out = k_hop_neighbors(&g, node, hops, budget).unwrap();
        prop_assert!(out.len() <= budget);
        let distinct: HashSet<usize> = out.iter().copied().collect();
        prop_assert_eq!(distinct.len(), out.len(), "duplicate neighbor");
        prop_assert!(!out.contains(&node), "root listed as its own neighbor");
        if hops == 0 {
            prop_assert!(out.is_empty());
        }
        if hops == 1 {
            // Exactly the sorted direct neighbors, truncated.
            let want: Vec<usize> = g.neighbors(node).iter().copied().take(budget).collect();
            prop_assert_eq!(out, want);
        }
    }
}

proptest! {
    // Vocabulary fitting walks every node; keep the case count modest.
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_ids_are_monotone_in_the_raw_value(
        (n, raw_edges) in raw_graph(),
        d in 1usize..4,
        bins in 2usize..6,
        raw in prop::collection::vec(-5.0f64..5.0, 48),
        probe_a in -10.0f64..10.0,
        probe_b in -10.0f64..10.0,
    ) {
        let feats: Vec<f64> = raw.iter().cycle().take(n * d).copied().collect();
        let g = build_graph(n, &raw_edges, Tensor::new(n, d, feats).unwrap());
        // Roomy cap: every (dim, bin) token stays in-vocabulary.
        let vocab = build_vocab(&g, bins, 4 + d * bins).unwrap();
        let (lo, hi) = if probe_a <= probe_b { (probe_a, probe_b) } else { (probe_b, probe_a) };
        for dim in 0..d {
            let id_lo = vocab.feature_id(dim, lo);
            let id_hi = vocab.feature_id(dim, hi);
            prop_assert!(id_lo < vocab.len() && id_hi < vocab.len());
            prop_assert!(id_lo > UNK && id_hi > UNK, "feature token fell back to <unk>");
            prop_assert!(id_lo <= id_hi, "binning not monotone: {lo} -> {id_lo}, {hi} -> {id_hi}");
        }
    }

    #[test]
    fn vocabulary_fitting_is_deterministic(
        (n, raw_edges) in raw_graph(),
        raw in prop::collection::vec(-5.0f64..5.0, 24),
    ) {
        let feats: Vec<f64> = raw.iter().cycle().take(n * 2).copied().collect();
        let g = build_graph(n, &raw_edges, Tensor::new(n, 2, feats).unwrap());
        let a = build_vocab(&g, 4, 64).unwrap();
        let b = build_vocab(&g, 4, 64).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for id in 0..a.len() {
            prop_assert_eq!(a.token(id), b.token(id));
        }
    }

    #[test]
    fn serialized_token_streams_stay_within_bounds(
        (n, raw_edges) in raw_graph(),
        raw in prop::collection::vec(-5.0f64..5.0, 24),
        node_pick in 0usize..64,
        hops in 0usize..3,
        budget in 0usize..8,
        max_tokens in 1usize..40,
    ) {
        let feats: Vec<f64> = raw.iter().cycle().take(n * 2).copied().collect();
        let g = build_graph(n, &raw_edges, Tensor::new(n, 2, feats).unwrap());
        let vocab = build_vocab(&g, 4, 64).unwrap();
        let node = node_pick % n;
        let toks = serialize_node(&g, &vocab, node, hops, budget, max_tokens).unwrap();
        prop_assert!(!toks.is_empty() && toks.len() <= max_tokens);
        prop_assert_eq!(toks[0], NODE);
        for &t in &toks {
            prop_assert!(t < vocab.len(), "token id {t} out of range");
            prop_assert!(t != PAD, "padding leaked into a serialized stream");
        }
        let again = serialize_node(&g, &vocab, node, hops, budget, max_tokens).unwrap();
        prop_assert_eq!(toks, again);
        // Separator count never exceeds the neighbor budget.
        let seps = serialize_node(&g, &vocab, node, hops, budget, usize::MAX >> 1)
            .unwrap()
            .iter()
            .filter(|&&t| t == SEP)
            .count();
        prop_assert!(seps <= budget);
    }
}

proptest! {
    #[test]
    fn temperature_anneal_is_monotone_and_clamped(
        tau_min in 0.01f64..1.0,
        scale in 1.0f64..20.0,
        decay in 0.5f64..1.0,
        horizon in 1usize..200,
    ) {
        let sched = TauSchedule { tau0: tau_min * scale, tau_min, decay };
        sched.validate().unwrap();
        prop_assert_eq!(sched.anneal(0), sched.tau0);
        let mut prev = sched.anneal(0);
        for epoch in 1..horizon {
            let tau = sched.anneal(epoch);
            prop_assert!(tau <= prev + 1e-15, "temperature rose at epoch {epoch}");
            prop_assert!(tau >= sched.tau_min, "temperature fell through the floor");
            prev = tau;
        }
    }

    #[test]
    fn gumbel_transform_is_finite_and_monotone(
        u_raw in 0.0f64..=1.0,
        v_raw in 0.0f64..=1.0,
    ) {
        let (u, v) = if u_raw <= v_raw { (u_raw, v_raw) } else { (v_raw, u_raw) };
        let gu = gumbel_from_uniform(u);
        let gv = gumbel_from_uniform(v);
        prop_assert!(gu.is_finite() && gv.is_finite(), "endpoints must be clamped finite");
        prop_assert!(gu <= gv, "gumbel transform not monotone: g({u}) = {gu} > g({v}) = {gv}");
    }

    #[test]
    fn named_rng_streams_are_reproducible_and_distinct(seed in any::<u64>()) {
        let draw4 = |name: &str| -> Vec<u64> {
            let mut r = rng::stream(seed, name);
            (0..4).map(|_| r.random::<u64>()).collect()
        };
        prop_assert_eq!(draw4("gumbel-stage1"), draw4("gumbel-stage1"));
        prop_assert_ne!(draw4("gumbel-stage1"), draw4("gumbel-stage2"));
        prop_assert_ne!(draw4("codebook-init"), draw4("student-init"));
    }
}
