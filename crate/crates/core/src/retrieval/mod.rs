//! Nearest-neighbor retrieval over global descriptors and the evaluation of
//! retrieved pairs against matching ground truth.

mod hnsw;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::aggregate::{AggregateError, Head, HeadInput};
use crate::model::{DescriptorSet, FeatureMap, FormatError, ImageId, MatchSet};

pub use hnsw::{
    ann_query, build_ann_index, HnswConfig, HnswIndex, DEFAULT_EF_CONSTRUCTION, DEFAULT_EF_SEARCH, DEFAULT_M,
};

pub const DEFAULT_RETRIEVAL_NUMBER: usize = 30;
/// Pairs with more inliers than this count as correct.
pub const DEFAULT_INLIER_THRESHOLD: usize = 15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("query dimension {queries} differs from corpus dimension {corpus}")]
    DimensionMismatch { corpus: usize, queries: usize },
    #[error("invalid index configuration: {0}")]
    InvalidConfig(String),
    #[error("index file: {0}")]
    IndexFile(String),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub name: String,
    pub distance: f64,
}

/// Ranked neighbors per query, in query order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalResult {
    pub lists: Vec<(String, Vec<Neighbor>)>,
}

impl RetrievalResult {
    /// Retrieved pairs as canonical (lexicographically ordered) name pairs.
    pub fn pairs(&self) -> BTreeSet<(String, String)> {
        self.lists
            .iter()
            .flat_map(|(q, list)| list.iter().map(move |n| canonical(q, &n.name)))
            .collect()
    }

    /// Fraction of exact neighbors recovered, averaged over queries.
    pub fn recall_against(&self, exact: &RetrievalResult) -> f64 {
        let mut hit = 0usize;
        let mut total = 0usize;
        for ((_, approx), (_, truth)) in self.lists.iter().zip(&exact.lists) {
            let found: BTreeSet<&str> = approx.iter().map(|n| n.name.as_str()).collect();
            hit += truth.iter().filter(|n| found.contains(n.name.as_str())).count();
            total += truth.len();
        }
        if total == 0 {
            1.0
        } else {
            hit as f64 / total as f64
        }
    }
}

fn canonical(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Exact `k` nearest corpus entries, ties by ascending name.
pub(crate) fn top_k(q: &[f64], corpus: &DescriptorSet, k: usize, exclude: Option<&str>) -> Vec<Neighbor> {
    let mut all: Vec<(f64, &str)> = corpus
        .entries()
        .iter()
        .filter(|(name, _)| Some(name.as_str()) != exclude)
        .map(|(name, v)| (squared_distance(q, v), name.as_str()))
        .collect();
    let by = |a: &(f64, &str), b: &(f64, &str)| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1));
    if k < all.len() {
        all.select_nth_unstable_by(k, by);
        all.truncate(k);
    }
    all.sort_by(by);
    all.into_iter()
        .map(|(d, name)| Neighbor {
            name: name.to_string(),
            distance: d.sqrt(),
        })
        .collect()
}

/// Exact `k` nearest neighbors per query. A query never retrieves a corpus
/// entry with its own name; `k` is truncated to the available candidates.
pub fn brute_force_knn(queries: &DescriptorSet, corpus: &DescriptorSet, k: usize) -> Result<RetrievalResult, RetrievalError> {
    if queries.dim() != corpus.dim() {
        return Err(RetrievalError::DimensionMismatch {
            corpus: corpus.dim(),
            queries: queries.dim(),
        });
    }
    let lists = queries
        .entries()
        .par_iter()
        .map(|(name, v)| (name.clone(), top_k(v, corpus, k, Some(name))))
        .collect();
    Ok(RetrievalResult { lists })
}

/// Canonical name pairs whose inlier count exceeds a threshold.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth {
    pairs: BTreeSet<(String, String)>,
}

impl GroundTruth {
    pub fn from_matches(matches: &MatchSet, threshold: usize, name_of: impl Fn(ImageId) -> String) -> Self {
        let pairs = matches
            .iter()
            .filter(|(_, corr)| corr.len() > threshold)
            .map(|(pair, _)| canonical(&name_of(pair.lo()), &name_of(pair.hi())))
            .collect();
        Self { pairs }
    }

    pub fn from_pairs<I: IntoIterator<Item = (String, String)>>(pairs: I) -> Self {
        Self {
            pairs: pairs.into_iter().map(|(a, b)| canonical(&a, &b)).collect(),
        }
    }

    pub fn contains(&self, a: &str, b: &str) -> bool {
        self.pairs.contains(&canonical(a, b))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Accuracy of a retrieval run with its pair counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub pairs: usize,
    pub correct: usize,
}

/// `|MP ∩ RP| / |RP|` over canonical pairs; 0 when nothing was retrieved.
pub fn retrieval_accuracy(results: &RetrievalResult, truth: &GroundTruth) -> f64 {
    accuracy_report(&results.pairs(), truth).accuracy
}

pub fn accuracy_report(retrieved: &BTreeSet<(String, String)>, truth: &GroundTruth) -> AccuracyReport {
    let correct = retrieved.iter().filter(|p| truth.pairs.contains(*p)).count();
    let pairs = retrieved.len();
    AccuracyReport {
        accuracy: if pairs == 0 { 0.0 } else { correct as f64 / pairs as f64 },
        pairs,
        correct,
    }
}

/// Writes `<query> <candidate> <rank> <distance>` lines with 1-based ranks.
pub fn write_pairs(results: &RetrievalResult) -> String {
    let mut out = String::from("# pairforge pairs v1\n");
    for (q, list) in &results.lists {
        for (rank, n) in list.iter().enumerate() {
            let _ = writeln!(out, "{q} {} {} {:?}", n.name, rank + 1, n.distance);
        }
    }
    out
}

/// Reads a pairs file; consecutive lines with the same query form one list.
pub fn parse_pairs(input: &str) -> Result<RetrievalResult, FormatError> {
    let mut lists: Vec<(String, Vec<Neighbor>)> = Vec::new();
    for line in crate::model::text_lines(input) {
        line.expect_len(4)?;
        let q = line.tokens[0].text;
        let _rank: usize = line.field(2, "rank")?;
        let distance = line.finite(3, "distance")?;
        if distance < 0.0 {
            return Err(line.error(line.tokens[3].column, "negative distance"));
        }
        let n = Neighbor {
            name: line.tokens[1].text.to_string(),
            distance,
        };
        match lists.last_mut() {
            Some((last, list)) if last == q => list.push(n),
            _ => lists.push((q.to_string(), vec![n])),
        }
    }
    Ok(RetrievalResult { lists })
}

/// Wall-clock and summed per-task time of both pipeline stages.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TimingReport {
    pub t_feature_extraction: Duration,
    pub t_nn_search: Duration,
    pub cpu_feature_extraction: Duration,
    pub cpu_nn_search: Duration,
}

impl TimingReport {
    pub fn total(&self) -> Duration {
        self.t_feature_extraction + self.t_nn_search
    }

    pub fn cpu_total(&self) -> Duration {
        self.cpu_feature_extraction + self.cpu_nn_search
    }
}

/// Pipeline input: descriptors ready for search, or maps to aggregate first.
pub enum PipelineInput<'a> {
    Descriptors(&'a DescriptorSet),
    Maps { head: &'a Head, maps: &'a [(String, FeatureMap)] },
}

/// Extracts descriptors (if needed), builds an index and queries every image
/// against the others. Exhaustive search is used when `index` is `None`.
pub fn timed_pipeline(
    input: PipelineInput<'_>,
    index: Option<HnswConfig>,
    k: usize,
) -> Result<(RetrievalResult, TimingReport), RetrievalError> {
    let mut report = TimingReport::default();
    let extracted;
    let descriptors = match input {
        PipelineInput::Descriptors(d) => d,
        PipelineInput::Maps { head, maps } => {
            let start = Instant::now();
            let timed: Vec<(String, Vec<f64>, Duration)> = maps
                .par_iter()
                .map(|(name, map)| {
                    let t = Instant::now();
                    head.forward(HeadInput::Map(map)).map(|(v, _)| (name.clone(), v, t.elapsed()))
                })
                .collect::<Result<_, _>>()?;
            report.t_feature_extraction = start.elapsed();
            report.cpu_feature_extraction = timed.iter().map(|t| t.2).sum();
            let dim = timed.first().map_or(1, |t| t.1.len());
            extracted = DescriptorSet::from_entries(dim, timed.into_iter().map(|(n, v, _)| (n, v)).collect())
                .map_err(|e| RetrievalError::InvalidConfig(e.to_string()))?;
            &extracted
        }
    };
    if descriptors.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let start = Instant::now();
    let (results, cpu) = match index {
        Some(cfg) => {
            let t = Instant::now();
            let idx = build_ann_index(descriptors, cfg)?;
            let build = t.elapsed();
            let timed: Vec<_> = descriptors
                .entries()
                .par_iter()
                .map(|(name, v)| {
                    let t = Instant::now();
                    (name.clone(), idx.search(v, k, Some(name)), t.elapsed())
                })
                .collect();
            let cpu = build + timed.iter().map(|t| t.2).sum::<Duration>();
            (timed.into_iter().map(|(n, l, _)| (n, l)).collect(), cpu)
        }
        None => {
            let timed: Vec<_> = descriptors
                .entries()
                .par_iter()
                .map(|(name, v)| {
                    let t = Instant::now();
                    (name.clone(), top_k(v, descriptors, k, Some(name)), t.elapsed())
                })
                .collect();
            let cpu = timed.iter().map(|t| t.2).sum::<Duration>();
            (timed.into_iter().map(|(n, l, _)| (n, l)).collect(), cpu)
        }
    };
    report.t_nn_search = start.elapsed();
    report.cpu_nn_search = cpu;
    Ok((RetrievalResult { lists: results }, report))
}
