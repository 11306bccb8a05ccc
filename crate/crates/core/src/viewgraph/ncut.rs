use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ViewGraph, ViewGraphError};
use crate::model::{text_lines, FormatError, ImageId};

pub const DEFAULT_MAX_CLUSTER_SIZE: usize = 500;

const EIGEN_TOLERANCE: f64 = 1e-8;
const EIGEN_MAX_ITERATIONS: usize = 10_000;

/// Assignment of every vertex to exactly one non-empty cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignment: BTreeMap<ImageId, usize>,
    clusters: Vec<Vec<ImageId>>,
}

impl Partition {
    /// Builds a partition from clusters, numbering them by smallest member.
    pub fn from_clusters(mut clusters: Vec<Vec<ImageId>>) -> Result<Self, ViewGraphError> {
        clusters.retain(|c| !c.is_empty());
        for c in &mut clusters {
            c.sort_unstable();
        }
        clusters.sort_by_key(|c| c[0]);
        let mut assignment = BTreeMap::new();
        for (idx, c) in clusters.iter().enumerate() {
            for &id in c {
                if assignment.insert(id, idx).is_some() {
                    return Err(ViewGraphError::DuplicateAssignment(id));
                }
            }
        }
        Ok(Self {
            assignment,
            clusters,
        })
    }

    pub fn cluster_of(&self, id: ImageId) -> Option<usize> {
        self.assignment.get(&id).copied()
    }

    pub fn clusters(&self) -> &[Vec<ImageId>] {
        &self.clusters
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

/// Undirected weighted adjacency over dense local indices.
#[derive(Debug, Clone)]
pub(crate) struct Adjacency {
    pub ids: Vec<ImageId>,
    pub neighbors: Vec<Vec<(usize, f64)>>,
}

impl Adjacency {
    pub fn from_graph(g: &ViewGraph) -> Self {
        let ids = g.vertices().to_vec();
        let index: HashMap<ImageId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut neighbors = vec![Vec::new(); ids.len()];
        for e in g.edges() {
            if e.weight <= 0.0 {
                continue;
            }
            let (a, b) = (index[&e.pair.lo()], index[&e.pair.hi()]);
            neighbors[a].push((b, e.weight));
            neighbors[b].push((a, e.weight));
        }
        Self { ids, neighbors }
    }

    /// Connected components of the subgraph induced by `subset`, each sorted.
    fn components(&self, subset: &[usize]) -> Vec<Vec<usize>> {
        let mut member = vec![false; self.ids.len()];
        for &v in subset {
            member[v] = true;
        }
        let mut seen = vec![false; self.ids.len()];
        let mut out = Vec::new();
        for &start in subset {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut stack = vec![start];
            let mut comp = Vec::new();
            while let Some(v) = stack.pop() {
                comp.push(v);
                for &(u, _) in &self.neighbors[v] {
                    if member[u] && !seen[u] {
                        seen[u] = true;
                        stack.push(u);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

/// Normalized-cut value of splitting `vertices` into `side` and the rest.
/// Degenerate splits (an empty side or zero volume) return infinity.
pub fn ncut_value(g: &ViewGraph, side: &[ImageId]) -> f64 {
    let adj = Adjacency::from_graph(g);
    let index: HashMap<ImageId, usize> = adj.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut in_a = vec![false; adj.ids.len()];
    for id in side {
        if let Some(&i) = index.get(id) {
            in_a[i] = true;
        }
    }
    let all: Vec<usize> = (0..adj.ids.len()).collect();
    ncut_of(&adj, &all, &in_a)
}

pub(crate) fn ncut_of(adj: &Adjacency, subset: &[usize], in_a: &[bool]) -> f64 {
    let mut member = vec![false; adj.ids.len()];
    for &v in subset {
        member[v] = true;
    }
    let (mut cut, mut vol_a, mut vol_b) = (0.0, 0.0, 0.0);
    for &v in subset {
        for &(u, w) in &adj.neighbors[v] {
            if !member[u] {
                continue;
            }
            if in_a[v] {
                vol_a += w;
            } else {
                vol_b += w;
            }
            if in_a[v] && !in_a[u] {
                cut += w;
            }
        }
    }
    if vol_a <= 0.0 || vol_b <= 0.0 {
        return f64::INFINITY;
    }
    cut / vol_a + cut / vol_b
}

/// Number of leading non-trivial eigenvectors whose sweeps compete for a split.
const CANDIDATE_VECTORS: usize = 3;

/// Leading non-trivial eigenvectors of the generalized problem
/// `(D - W) y = λ D y` over a connected `comp`, in the `y` coordinates and in
/// order of increasing `λ` (the first is the Fiedler vector).
///
/// Power iteration runs on `(I + D^-1/2 W D^-1/2) / 2`, whose spectrum lies in
/// `[0, 1]`; the known leading eigenvector `D^1/2 1` and every vector already
/// found are deflated at each step.
pub(crate) fn spectral_vectors(adj: &Adjacency, comp: &[usize], count: usize) -> Vec<Vec<f64>> {
    let n = comp.len();
    let local: HashMap<usize, usize> = comp.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut degree = vec![0.0; n];
    for (i, &v) in comp.iter().enumerate() {
        for &(u, w) in &adj.neighbors[v] {
            if let Some(&j) = local.get(&u) {
                rows[i].push((j, w));
                degree[i] += w;
            }
        }
    }
    let sqrt_d: Vec<f64> = degree.iter().map(|d| d.sqrt()).collect();
    let norm = sqrt_d.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut basis: Vec<Vec<f64>> = vec![sqrt_d.iter().map(|x| x / norm).collect()];

    let deflate = |v: &mut [f64], basis: &[Vec<f64>]| {
        for b in basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 0.0 {
            for x in v.iter_mut() {
                *x /= len;
            }
        }
        len
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x6e63_7574 ^ n as u64);
    let mut out = Vec::new();
    for _ in 0..count.min(n - 1) {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        if deflate(&mut v, &basis) == 0.0 {
            break;
        }
        let mut next = vec![0.0; n];
        for _ in 0..EIGEN_MAX_ITERATIONS {
            for i in 0..n {
                let spread: f64 = rows[i].iter().map(|&(j, w)| w * v[j] / sqrt_d[j]).sum();
                next[i] = 0.5 * (v[i] + spread / sqrt_d[i]);
            }
            if deflate(&mut next, &basis) == 0.0 {
                break;
            }
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            std::mem::swap(&mut v, &mut next);
            if delta < EIGEN_TOLERANCE {
                break;
            }
        }
        out.push(v.iter().zip(&sqrt_d).map(|(z, s)| z / s).collect());
        basis.push(v);
    }
    out
}

/// Best refined sweep split over the leading eigenvectors; ties keep the
/// Fiedler vector's split.
fn best_split(adj: &Adjacency, comp: &[usize]) -> Vec<bool> {
    let mut best: Option<(f64, Vec<bool>)> = None;
    for y in spectral_vectors(adj, comp, CANDIDATE_VECTORS) {
        let mask = sweep_split(adj, comp, &y);
        let value = ncut_of(adj, comp, &expand(adj, comp, &mask));
        if best.as_ref().is_none_or(|b| value < b.0 - 1e-12) {
            best = Some((value, mask));
        }
    }
    best.map(|b| b.1).unwrap_or_else(|| (0..comp.len()).map(|i| i < comp.len() / 2).collect())
}

fn expand(adj: &Adjacency, comp: &[usize], mask: &[bool]) -> Vec<bool> {
    let mut in_a = vec![false; adj.ids.len()];
    for (&v, &m) in comp.iter().zip(mask) {
        in_a[v] = m;
    }
    in_a
}

/// Sweeps all `n - 1` threshold positions of the sorted eigenvector and
/// returns the side (as a membership mask over `comp`) with minimum Ncut.
pub(crate) fn sweep_split(adj: &Adjacency, comp: &[usize], y: &[f64]) -> Vec<bool> {
    let n = comp.len();
    let local: HashMap<usize, usize> = comp.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]).then(a.cmp(&b)));

    let degree: Vec<f64> = comp
        .iter()
        .map(|&v| adj.neighbors[v].iter().filter(|(u, _)| local.contains_key(u)).map(|(_, w)| w).sum())
        .collect();
    let total: f64 = degree.iter().sum();

    let mut in_a = vec![false; n];
    let (mut cut, mut vol_a) = (0.0, 0.0);
    let mut best = (f64::INFINITY, 1);
    for (k, &i) in order.iter().enumerate().take(n - 1) {
        let to_a: f64 = adj.neighbors[comp[i]]
            .iter()
            .filter_map(|(u, w)| local.get(u).filter(|&&j| in_a[j]).map(|_| w))
            .sum();
        in_a[i] = true;
        cut += degree[i] - 2.0 * to_a;
        vol_a += degree[i];
        let vol_b = total - vol_a;
        if vol_a > 0.0 && vol_b > 0.0 {
            let value = cut / vol_a + cut / vol_b;
            if value < best.0 {
                best = (value, k + 1);
            }
        }
    }
    let mut mask = vec![false; n];
    for &i in &order[..best.1] {
        mask[i] = true;
    }
    refine_split(adj, comp, &local, &degree, &mut mask);
    mask
}

/// Greedy single-vertex moves from the sweep split, taking the best strictly
/// improving move until none is left. Each move lowers Ncut, so the result is
/// never worse than the sweep.
fn refine_split(adj: &Adjacency, comp: &[usize], local: &HashMap<usize, usize>, degree: &[f64], mask: &mut [bool]) {
    let n = comp.len();
    let total: f64 = degree.iter().sum();
    // weight from each vertex into side A
    let mut to_a = vec![0.0; n];
    for (i, &v) in comp.iter().enumerate() {
        for &(u, w) in &adj.neighbors[v] {
            if let Some(&j) = local.get(&u) {
                if mask[j] {
                    to_a[i] += w;
                }
            }
        }
    }
    let mut vol_a: f64 = (0..n).filter(|&i| mask[i]).map(|i| degree[i]).sum();
    let mut cut: f64 = (0..n).filter(|&i| !mask[i]).map(|i| to_a[i]).sum();
    let mut size_a = mask.iter().filter(|&&m| m).count();
    let ncut = |cut: f64, vol_a: f64| {
        let vol_b = total - vol_a;
        if vol_a <= 0.0 || vol_b <= 0.0 {
            f64::INFINITY
        } else {
            cut / vol_a + cut / vol_b
        }
    };
    let mut current = ncut(cut, vol_a);
    for _ in 0..4 * n {
        let mut best: Option<(f64, usize, f64, f64)> = None;
        for i in 0..n {
            let to_b = degree[i] - to_a[i];
            let (new_cut, new_vol, new_size) = if mask[i] {
                (cut + to_a[i] - to_b, vol_a - degree[i], size_a - 1)
            } else {
                (cut + to_b - to_a[i], vol_a + degree[i], size_a + 1)
            };
            if new_size == 0 || new_size == n {
                continue;
            }
            let value = ncut(new_cut, new_vol);
            if value < current - 1e-12 && best.is_none_or(|b| value < b.0) {
                best = Some((value, i, new_cut, new_vol));
            }
        }
        let Some((value, i, new_cut, new_vol)) = best else {
            break;
        };
        let joining_a = !mask[i];
        mask[i] = joining_a;
        size_a = if joining_a { size_a + 1 } else { size_a - 1 };
        for &(u, w) in &adj.neighbors[comp[i]] {
            if let Some(&j) = local.get(&u) {
                to_a[j] += if joining_a { w } else { -w };
            }
        }
        cut = new_cut;
        vol_a = new_vol;
        current = value;
    }
}

/// One spectral two-way split of the whole vertex set, treated as a single
/// component. Returns `None` for fewer than two vertices or a graph whose
/// edges carry no weight at a vertex.
pub fn spectral_bisection(g: &ViewGraph) -> Option<[Vec<ImageId>; 2]> {
    let adj = Adjacency::from_graph(g);
    if adj.ids.len() < 2 || adj.neighbors.iter().any(Vec::is_empty) {
        return None;
    }
    let comp: Vec<usize> = (0..adj.ids.len()).collect();
    let mask = best_split(&adj, &comp);
    let mut sides = [Vec::new(), Vec::new()];
    for (v, m) in comp.into_iter().zip(mask) {
        sides[usize::from(!m)].push(adj.ids[v]);
    }
    Some(sides)
}

/// Recursive two-way spectral partitioning until every cluster has at most
/// `max_cluster_size` vertices. Connected components are handled separately;
/// isolated vertices become singleton clusters.
pub fn normalized_cut(g: &ViewGraph, max_cluster_size: usize) -> Result<Partition, ViewGraphError> {
    if max_cluster_size < 2 {
        return Err(ViewGraphError::ClusterSize(max_cluster_size));
    }
    let adj = Adjacency::from_graph(g);
    let all: Vec<usize> = (0..adj.ids.len()).collect();
    let mut pending = adj.components(&all);
    let mut clusters = Vec::new();
    while let Some(comp) = pending.pop() {
        if comp.len() <= max_cluster_size {
            clusters.push(comp.iter().map(|&v| adj.ids[v]).collect());
            continue;
        }
        let mask = best_split(&adj, &comp);
        let (a, b): (Vec<_>, Vec<_>) = comp.iter().zip(&mask).partition(|(_, &m)| m);
        for side in [a, b] {
            let side: Vec<usize> = side.into_iter().map(|(&v, _)| v).collect();
            pending.extend(adj.components(&side));
        }
    }
    Partition::from_clusters(clusters)
}

/// Partition file: one `CLUSTER <cluster_idx> <image_id>...` line per cluster.
pub fn write_partition(p: &Partition) -> String {
    let mut out = String::from("# pairforge partition v1\n");
    for (idx, c) in p.clusters.iter().enumerate() {
        let _ = write!(out, "CLUSTER {idx}");
        for id in c {
            let _ = write!(out, " {id}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_partition(input: &str) -> Result<Partition, FormatError> {
    let mut clusters = Vec::new();
    for line in text_lines(input) {
        let head = line.tokens[0];
        if head.text != "CLUSTER" {
            return Err(line.error(head.column, format!("expected CLUSTER, found {:?}", head.text)));
        }
        let idx: usize = line.field(1, "cluster_idx")?;
        if idx != clusters.len() {
            return Err(line.error(line.tokens[1].column, format!("expected cluster index {}", clusters.len())));
        }
        if line.tokens.len() < 3 {
            return Err(line.error(line.end_column, "empty cluster"));
        }
        let ids = (2..line.tokens.len())
            .map(|k| line.field(k, "image_id").map(ImageId))
            .collect::<Result<Vec<_>, _>>()?;
        clusters.push(ids);
    }
    Partition::from_clusters(clusters)
        .map_err(|e| FormatError::DimensionMismatch(e.to_string()))
}
