use pairforge::model::ImageId;
use pairforge::viewgraph::{ncut_value, ViewGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum Ncut over every non-trivial bipartition (vertex 0 fixed on side A).
pub fn exhaustive_min_ncut(g: &ViewGraph) -> (f64, Vec<ImageId>) {
    let ids = g.vertices();
    let n = ids.len();
    let mut best = (f64::INFINITY, Vec::new());
    for mask in 0u32..(1 << (n - 1)) {
        let side: Vec<ImageId> = std::iter::once(ids[0])
            .chain((1..n).filter(|i| mask & (1 << (i - 1)) != 0).map(|i| ids[i]))
            .collect();
        if side.len() == n {
            continue;
        }
        let v = ncut_value(g, &side);
        if v < best.0 {
            best = (v, side);
        }
    }
    best
}

pub fn two_cliques(bridge: f64) -> ViewGraph {
    let mut edges = Vec::new();
    for base in [0u32, 5] {
        for i in 0..5 {
            for j in i + 1..5 {
                edges.push((ImageId(base + i), ImageId(base + j), 1.0));
            }
        }
    }
    edges.push((ImageId(4), ImageId(5), bridge));
    ViewGraph::from_weighted_edges((0..10).map(ImageId), edges).unwrap()
}

pub fn random_connected_graph(seed: u64) -> ViewGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(6..=14u32);
    let p = rng.random_range(0.25..0.7);
    let mut edges = Vec::new();
    // random spanning path keeps the graph connected
    for i in 1..n {
        let j = rng.random_range(0..i);
        edges.push((ImageId(j), ImageId(i), rng.random_range(0.05..1.0)));
    }
    for i in 0..n {
        for j in i + 1..n {
            let exists = edges.iter().any(|&(a, b, _)| (a.0, b.0) == (i, j) || (a.0, b.0) == (j, i));
            if !exists && rng.random_bool(p) {
                edges.push((ImageId(i), ImageId(j), rng.random_range(0.05..1.0)));
            }
        }
    }
    ViewGraph::from_weighted_edges((0..n).map(ImageId), edges).unwrap()
}
