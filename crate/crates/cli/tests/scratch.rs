//! Throwaway probe (delete before ship): measures the edge channel's
//! logit-gap distribution at init against the Gumbel noise scale.

use langtopo_core::codebook::{gumbel_from_uniform, logits, LogitKind};
use langtopo_core::gnn::{encode, structure_features};
use langtopo_core::graph::load_graph;
use langtopo_core::rng;
use langtopo_core::stage1::{Stage1Config, Stage1Model};
use rand::Rng;

fn winner<R: Rng>(l: &[f64], r: &mut R) -> usize {
    let noisy: Vec<f64> = l.iter().map(|&v| v + gumbel_from_uniform(r.random::<f64>())).collect();
    (0..l.len()).max_by(|&a, &b| noisy[a].partial_cmp(&noisy[b]).unwrap()).unwrap()
}

#[test]
#[ignore]
fn edge_winner_flip_rate_at_init() {
    let graph = load_graph(std::path::Path::new("/tmp/tune/data")).unwrap();
    let cfg = Stage1Config {
        k: 384,
        d_code: 320,
        hidden: vec![64],
        d_edge: 320,
        ..Stage1Config::default()
    };
    let model = Stage1Model::init(&graph, &cfg, 4242).unwrap();
    let h = encode(&model.encoder_edge, &graph, &structure_features(&graph)).unwrap();

    let n = graph.n();
    let mut gaps = Vec::with_capacity(n);
    let mut rms = 0.0;
    let mut rng_a = rng::stream(99, "probe-a");
    let mut rng_b = rng::stream(100, "probe-b");
    let mut stable = 0usize;
    for u in 0..n {
        let row = h.row(u);
        rms += row.iter().map(|v| v * v).sum::<f64>();
        let l = logits(row, &model.codebook, LogitKind::NegSqDist).unwrap();
        let mut sorted = l.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        gaps.push(sorted[0] - sorted[1]);

        if winner(&l, &mut rng_a) == winner(&l, &mut rng_b) {
            stable += 1;
        }
    }
    rms = (rms / n as f64).sqrt();
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "rms row norm {:.4}  gap median {:.4} p90 {:.4} max {:.4}  stable {}/{}",
        rms,
        gaps[n / 2],
        gaps[(n * 9) / 10],
        gaps[n - 1],
        stable,
        n
    );

    // Noise-free winners: how many distinct codewords, and how block-pure?
    let mut winners = Vec::with_capacity(n);
    for u in 0..n {
        let l = logits(h.row(u), &model.codebook, LogitKind::NegSqDist).unwrap();
        winners.push((0..l.len()).max_by(|&a, &b| l[a].partial_cmp(&l[b]).unwrap()).unwrap());
    }
    let mut distinct: Vec<usize> = winners.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let block = |u: usize| u / (n / 3);
    let mut per_code: std::collections::HashMap<usize, [usize; 3]> = Default::default();
    for (u, &w) in winners.iter().enumerate() {
        per_code.entry(w).or_default()[block(u)] += 1;
    }
    let pure: usize = per_code.values().map(|c| *c.iter().max().unwrap()).sum();
    println!("distinct winners {}  majority-block purity {}/{}", distinct.len(), pure, n);
}
