use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{squared_distance, top_k, Neighbor, RetrievalError, RetrievalResult};
use crate::model::DescriptorSet;

pub const DEFAULT_M: usize = 16;
pub const DEFAULT_EF_CONSTRUCTION: usize = 200;
pub const DEFAULT_EF_SEARCH: usize = 64;

const INDEX_MAGIC: [u8; 4] = *b"HNSW";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HnswConfig {
    /// Maximum degree on upper layers; layer 0 allows `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswConfig {
    fn default() -> Self {
        Self {
            m: DEFAULT_M,
            ef_construction: DEFAULT_EF_CONSTRUCTION,
            ef_search: DEFAULT_EF_SEARCH,
            seed: 0,
        }
    }
}

/// Candidate ordered by distance, then node index.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    dist: f64,
    node: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.node.cmp(&other.node))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Layered navigable small-world graph over a descriptor set.
#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    cfg: HnswConfig,
    corpus: DescriptorSet,
    /// `links[node][layer]`, present for layers `0..=level(node)`.
    links: Vec<Vec<Vec<u32>>>,
    entry: u32,
    max_level: usize,
}

impl HnswIndex {
    pub fn build(corpus: &DescriptorSet, cfg: HnswConfig) -> Result<Self, RetrievalError> {
        if corpus.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        if cfg.m < 2 || cfg.ef_construction == 0 || cfg.ef_search == 0 {
            return Err(RetrievalError::InvalidConfig(
                "m must be at least 2 and beam widths positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let ml = 1.0 / (cfg.m as f64).ln();
        let mut index = Self {
            cfg,
            corpus: corpus.clone(),
            links: Vec::with_capacity(corpus.len()),
            entry: 0,
            max_level: 0,
        };
        for node in 0..corpus.len() {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let level = (-u.ln() * ml).floor() as usize;
            index.insert(node as u32, level);
        }
        Ok(index)
    }

    pub fn config(&self) -> HnswConfig {
        self.cfg
    }

    pub fn corpus(&self) -> &DescriptorSet {
        &self.corpus
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    fn vector(&self, node: u32) -> &[f64] {
        &self.corpus.entries()[node as usize].1
    }

    fn dist(&self, q: &[f64], node: u32) -> f64 {
        squared_distance(q, self.vector(node))
    }

    fn max_degree(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.cfg.m
        } else {
            self.cfg.m
        }
    }

    fn insert(&mut self, node: u32, level: usize) {
        self.links.push(vec![Vec::new(); level + 1]);
        if node == 0 {
            self.entry = 0;
            self.max_level = level;
            return;
        }
        let q = self.vector(node).to_vec();
        let mut ep = Cand {
            dist: self.dist(&q, self.entry),
            node: self.entry,
        };
        for layer in (level + 1..=self.max_level).rev() {
            ep = self.greedy(&q, ep, layer);
        }
        let mut eps = vec![ep];
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(&q, &eps, self.cfg.ef_construction, layer, None);
            let chosen = self.select(&found, self.cfg.m);
            self.links[node as usize][layer] = chosen.iter().map(|c| c.node).collect();
            for c in &chosen {
                self.link(c.node, node, layer);
            }
            eps = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = node;
        }
    }

    /// Adds `to` to the neighbor list of `from`, pruning with the selection
    /// heuristic when the list overflows.
    fn link(&mut self, from: u32, to: u32, layer: usize) {
        let max = self.max_degree(layer);
        let list = &mut self.links[from as usize][layer];
        list.push(to);
        if list.len() <= max {
            return;
        }
        let base = self.vector(from).to_vec();
        let mut cands: Vec<Cand> = self.links[from as usize][layer]
            .iter()
            .map(|&n| Cand {
                dist: self.dist(&base, n),
                node: n,
            })
            .collect();
        cands.sort();
        let kept = self.select(&cands, max);
        self.links[from as usize][layer] = kept.into_iter().map(|c| c.node).collect();
    }

    /// Neighbor-selection heuristic: keep a candidate only if it is closer to
    /// the base than to every already kept neighbor, then top up with the
    /// nearest discarded candidates. `cands` must be sorted.
    fn select(&self, cands: &[Cand], max: usize) -> Vec<Cand> {
        let mut kept: Vec<Cand> = Vec::with_capacity(max);
        let mut discarded = Vec::new();
        for &c in cands {
            if kept.len() >= max {
                break;
            }
            let v = self.vector(c.node);
            if kept.iter().all(|k| squared_distance(v, self.vector(k.node)) > c.dist) {
                kept.push(c);
            } else {
                discarded.push(c);
            }
        }
        for c in discarded {
            if kept.len() >= max {
                break;
            }
            kept.push(c);
        }
        kept
    }

    fn greedy(&self, q: &[f64], mut ep: Cand, layer: usize) -> Cand {
        loop {
            let mut improved = false;
            for &n in &self.links[ep.node as usize][layer] {
                let c = Cand {
                    dist: self.dist(q, n),
                    node: n,
                };
                if c < ep {
                    ep = c;
                    improved = true;
                }
            }
            if !improved {
                return ep;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` nearest nodes, sorted.
    /// `skip` is never returned but may be traversed.
    fn search_layer(&self, q: &[f64], eps: &[Cand], ef: usize, layer: usize, skip: Option<u32>) -> Vec<Cand> {
        let mut visited: HashSet<u32> = eps.iter().map(|c| c.node).collect();
        let mut frontier: BinaryHeap<Reverse<Cand>> = eps.iter().copied().map(Reverse).collect();
        let mut best: BinaryHeap<Cand> = BinaryHeap::new();
        for &c in eps {
            if Some(c.node) != skip {
                best.push(c);
            }
        }
        while best.len() > ef {
            best.pop();
        }
        while let Some(Reverse(cur)) = frontier.pop() {
            if best.len() >= ef && best.peek().is_some_and(|w| cur > *w) {
                break;
            }
            for &n in &self.links[cur.node as usize][layer] {
                if !visited.insert(n) {
                    continue;
                }
                let c = Cand {
                    dist: self.dist(q, n),
                    node: n,
                };
                if best.len() < ef || best.peek().is_some_and(|w| c < *w) {
                    frontier.push(Reverse(c));
                    if Some(n) != skip {
                        best.push(c);
                        if best.len() > ef {
                            best.pop();
                        }
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    /// Approximate `k` nearest neighbors of `q`, excluding the corpus entry
    /// named `exclude`.
    pub fn search(&self, q: &[f64], k: usize, exclude: Option<&str>) -> Vec<Neighbor> {
        let skip = exclude.and_then(|name| self.corpus.entries().iter().position(|(n, _)| n == name));
        let available = self.len() - usize::from(skip.is_some());
        let k = k.min(available);
        if k == 0 {
            return Vec::new();
        }
        if self.len() <= k + 1 {
            return top_k(q, &self.corpus, k, exclude);
        }
        let mut ep = Cand {
            dist: self.dist(q, self.entry),
            node: self.entry,
        };
        for layer in (1..=self.max_level).rev() {
            ep = self.greedy(q, ep, layer);
        }
        let found = self.search_layer(q, &[ep], self.cfg.ef_search.max(k), 0, skip.map(|s| s as u32));
        let mut out: Vec<Neighbor> = found
            .into_iter()
            .map(|c| Neighbor {
                name: self.corpus.entries()[c.node as usize].0.clone(),
                distance: c.dist.sqrt(),
            })
            .collect();
        out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.name.cmp(&b.name)));
        out.truncate(k);
        out
    }

    /// Serializes the graph and its corpus.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&INDEX_MAGIC);
        let put = |out: &mut Vec<u8>, v: u64| out.extend_from_slice(&v.to_le_bytes());
        put(&mut out, u64::from(INDEX_VERSION));
        for v in [self.cfg.m, self.cfg.ef_construction, self.cfg.ef_search] {
            put(&mut out, v as u64);
        }
        put(&mut out, self.cfg.seed);
        put(&mut out, self.corpus.dim() as u64);
        put(&mut out, self.len() as u64);
        put(&mut out, u64::from(self.entry));
        put(&mut out, self.max_level as u64);
        for (node, (name, v)) in self.corpus.entries().iter().enumerate() {
            put(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
            put(&mut out, self.links[node].len() as u64);
            for layer in &self.links[node] {
                put(&mut out, layer.len() as u64);
                for n in layer {
                    out.extend_from_slice(&n.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, RetrievalError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != INDEX_MAGIC {
            return Err(RetrievalError::IndexFile("bad magic".into()));
        }
        let version = r.u64()?;
        if version != u64::from(INDEX_VERSION) {
            return Err(RetrievalError::IndexFile(format!("unsupported version {version}")));
        }
        let cfg = HnswConfig {
            m: r.usize()?,
            ef_construction: r.usize()?,
            ef_search: r.usize()?,
            seed: r.u64()?,
        };
        let dim = r.usize()?;
        let count = r.usize()?;
        let entry = r.usize()?;
        let max_level = r.usize()?;
        let mut corpus = DescriptorSet::new(dim).map_err(|e| RetrievalError::IndexFile(e.to_string()))?;
        let mut links = Vec::with_capacity(count.min(bytes.len()));
        for _ in 0..count {
            let len = r.usize()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| RetrievalError::IndexFile("name is not UTF-8".into()))?
                .to_string();
            let v = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            corpus.push(name, v).map_err(|e| RetrievalError::IndexFile(e.to_string()))?;
            let layers = r.usize()?;
            let mut node_links = Vec::with_capacity(layers.min(64));
            for _ in 0..layers {
                let n = r.usize()?;
                let list = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
                node_links.push(list);
            }
            links.push(node_links);
        }
        if r.pos != bytes.len() {
            return Err(RetrievalError::IndexFile("trailing bytes".into()));
        }
        let valid = count > 0
            && entry < count
            && links[entry].len() == max_level + 1
            && links.iter().all(|l| {
                !l.is_empty() && l.len() <= max_level + 1 && l.iter().flatten().all(|&n| (n as usize) < count)
            });
        if !valid {
            return Err(RetrievalError::IndexFile("inconsistent graph".into()));
        }
        Ok(Self {
            cfg,
            corpus,
            links,
            entry: entry as u32,
            max_level,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RetrievalError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| RetrievalError::IndexFile("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, RetrievalError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, RetrievalError> {
        usize::try_from(self.u64()?).map_err(|_| RetrievalError::IndexFile("size overflow".into()))
    }

    fn u32(&mut self) -> Result<u32, RetrievalError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, RetrievalError> {
        let v = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(RetrievalError::IndexFile("non-finite vector value".into()));
        }
        Ok(v)
    }
}

pub fn build_ann_index(corpus: &DescriptorSet, cfg: HnswConfig) -> Result<HnswIndex, RetrievalError> {
    HnswIndex::build(corpus, cfg)
}

/// Approximate neighbors for every query; a query never retrieves the corpus
/// entry of the same name.
pub fn ann_query(index: &HnswIndex, queries: &DescriptorSet, k: usize) -> Result<RetrievalResult, RetrievalError> {
    use rayon::prelude::*;

    if queries.dim() != index.corpus().dim() {
        return Err(RetrievalError::DimensionMismatch {
            corpus: index.corpus().dim(),
            queries: queries.dim(),
        });
    }
    let lists = queries
        .entries()
        .par_iter()
        .map(|(name, v)| (name.clone(), index.search(v, k, Some(name))))
        .collect();
    Ok(RetrievalResult { lists })
}
