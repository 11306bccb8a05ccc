//! Training batch construction.
//!
//! Batched mining draws `B` queries from distinct scenes and `M` positives per
//! query; the negatives of a query are the positives of the other queries, so
//! mining reads only geometric similarity. The global-hard baseline instead
//! needs fresh descriptors of the whole dataset every epoch.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::annotate::{Positive, PositiveLists};
use crate::model::{DescriptorSet, FormatError, ImageId, Reconstruction, SceneId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MiningError {
    #[error("invalid mining configuration: {0}")]
    InvalidConfig(String),
    #[error("need {needed} scenes with an eligible query, found {eligible}")]
    InsufficientScenes { needed: usize, eligible: usize },
    #[error("no image outside the scene of query {0}")]
    NoCrossScene(ImageId),
    #[error("no descriptor for image {0}")]
    MissingDescriptor(ImageId),
    #[error("descriptor name {0:?} is not an image of the reconstruction")]
    UnknownName(String),
    #[error("no candidates to choose from")]
    EmptyCandidates,
    #[error("image {0} has no scene")]
    UnknownImage(ImageId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiningStrategy {
    Batched,
    GlobalHard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningConfig {
    /// Queries per batch.
    pub b: usize,
    /// Positives per query.
    pub m: usize,
    /// Batches per epoch.
    pub t: usize,
    /// Positives need `GS > epsilon`.
    pub epsilon: u32,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            b: 5,
            m: 3,
            t: 2000,
            epsilon: crate::annotate::DEFAULT_EPSILON,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<(), MiningError> {
        if self.b < 2 {
            return Err(MiningError::InvalidConfig(format!("B = {} must be at least 2", self.b)));
        }
        if self.m < 1 {
            return Err(MiningError::InvalidConfig("M must be at least 1".into()));
        }
        if self.t < 1 {
            return Err(MiningError::InvalidConfig("T must be at least 1".into()));
        }
        Ok(())
    }
}

/// One query of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchEntry {
    pub query: ImageId,
    /// Sorted by GS descending, then id ascending.
    pub positives: Vec<Positive>,
    /// Explicit negatives from descriptor mining; empty for batched mining,
    /// whose negatives are structural.
    pub hard_negatives: Vec<ImageId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainingBatch {
    entries: Vec<BatchEntry>,
}

impl TrainingBatch {
    pub fn new(entries: Vec<BatchEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[BatchEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Queries plus positives, i.e. `B * (M + 1)` for a batched-mining batch.
    pub fn sample_count(&self) -> usize {
        self.entries.iter().map(|e| 1 + e.positives.len()).sum()
    }

    /// Negatives of query `i`: its hard negatives when present, otherwise the
    /// positives of every other query, in batch order without repeats.
    pub fn negatives_of(&self, i: usize) -> Vec<ImageId> {
        let entry = &self.entries[i];
        if !entry.hard_negatives.is_empty() {
            return entry.hard_negatives.clone();
        }
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, e)| e.positives.iter().map(|p| p.image))
            .filter(|id| seen.insert(*id))
            .collect()
    }

    /// Every image the batch references, with repeats.
    pub fn members(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.entries.iter().flat_map(|e| {
            std::iter::once(e.query)
                .chain(e.positives.iter().map(|p| p.image))
                .chain(e.hard_negatives.iter().copied())
        })
    }
}

/// Scenes with at least one query holding `min_positives` positives above
/// `epsilon`, with those queries and their filtered lists.
struct Eligible {
    scenes: Vec<(SceneId, Vec<(ImageId, Vec<Positive>)>)>,
}

impl Eligible {
    fn new(lists: &PositiveLists, epsilon: u32, min_positives: usize) -> Self {
        let mut by_scene: BTreeMap<SceneId, Vec<(ImageId, Vec<Positive>)>> = BTreeMap::new();
        for (q, list) in lists.iter() {
            let kept: Vec<Positive> = list.iter().copied().filter(|p| p.gs > epsilon).collect();
            if kept.len() < min_positives {
                continue;
            }
            if let Some(scene) = lists.scene_of(q) {
                by_scene.entry(scene).or_default().push((q, kept));
            }
        }
        Self {
            scenes: by_scene.into_iter().collect(),
        }
    }

    fn require(&self, needed: usize) -> Result<(), MiningError> {
        if self.scenes.len() < needed {
            return Err(MiningError::InsufficientScenes {
                needed,
                eligible: self.scenes.len(),
            });
        }
        Ok(())
    }

    /// Draws `b` distinct scenes and one uniform query in each.
    fn draw_queries<'a>(&'a self, rng: &mut ChaCha8Rng, b: usize) -> Vec<&'a (ImageId, Vec<Positive>)> {
        index::sample(rng, self.scenes.len(), b)
            .into_iter()
            .map(|s| {
                let queries = &self.scenes[s].1;
                &queries[rng.random_range(0..queries.len())]
            })
            .collect()
    }
}

fn sort_by_gs(list: &mut [Positive]) {
    list.sort_by(|a, b| b.gs.cmp(&a.gs).then(a.image.cmp(&b.image)));
}

/// Deterministic stream of batched-mining batches.
pub struct BatchMiner {
    eligible: Eligible,
    cfg: MiningConfig,
    rng: ChaCha8Rng,
}

impl BatchMiner {
    pub fn new(lists: &PositiveLists, cfg: MiningConfig) -> Result<Self, MiningError> {
        cfg.validate()?;
        let eligible = Eligible::new(lists, cfg.epsilon, cfg.m);
        eligible.require(cfg.b)?;
        Ok(Self {
            eligible,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn eligible_scenes(&self) -> Vec<SceneId> {
        self.eligible.scenes.iter().map(|(s, _)| *s).collect()
    }

    pub fn next_batch(&mut self) -> TrainingBatch {
        let m = self.cfg.m;
        let picks = self.eligible.draw_queries(&mut self.rng, self.cfg.b);
        let entries = picks
            .into_iter()
            .map(|(query, list)| {
                let mut positives: Vec<Positive> = index::sample(&mut self.rng, list.len(), m)
                    .into_iter()
                    .map(|i| list[i])
                    .collect();
                sort_by_gs(&mut positives);
                BatchEntry {
                    query: *query,
                    positives,
                    hard_negatives: Vec::new(),
                }
            })
            .collect();
        TrainingBatch::new(entries)
    }
}

impl Iterator for BatchMiner {
    type Item = TrainingBatch;

    fn next(&mut self) -> Option<TrainingBatch> {
        Some(self.next_batch())
    }
}

/// The first `cfg.t` batches of the batched-mining stream.
pub fn mine_batched(lists: &PositiveLists, cfg: &MiningConfig) -> Result<Vec<TrainingBatch>, MiningError> {
    Ok(BatchMiner::new(lists, *cfg)?.take(cfg.t).collect())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Maps a name-keyed descriptor set onto image ids.
pub fn descriptors_by_id(set: &DescriptorSet, r: &Reconstruction) -> Result<BTreeMap<ImageId, Vec<f64>>, MiningError> {
    set.entries()
        .iter()
        .map(|(name, v)| {
            r.image_by_name(name)
                .map(|img| (img.id, v.clone()))
                .ok_or_else(|| MiningError::UnknownName(name.clone()))
        })
        .collect()
}

/// The `k` images outside the scene of `q` nearest to it in descriptor space,
/// ties by ascending id. Fewer are returned when fewer exist.
pub fn mine_global_hard_negatives(
    q: ImageId,
    descriptors: &BTreeMap<ImageId, Vec<f64>>,
    scene_of: &BTreeMap<ImageId, SceneId>,
    k: usize,
) -> Result<Vec<ImageId>, MiningError> {
    let fq = descriptors.get(&q).ok_or(MiningError::MissingDescriptor(q))?;
    let scene = *scene_of.get(&q).ok_or(MiningError::UnknownImage(q))?;
    let mut ranked = Vec::new();
    for (&id, f) in descriptors {
        match scene_of.get(&id) {
            Some(&s) if s != scene => ranked.push((squared_distance(fq, f), id)),
            Some(_) => {}
            None => return Err(MiningError::UnknownImage(id)),
        }
    }
    if ranked.is_empty() {
        return Err(MiningError::NoCrossScene(q));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(k).map(|(_, id)| id).collect())
}

/// The candidate nearest to `q` in descriptor space, ties by ascending id.
pub fn select_descriptor_nearest_positive(
    q: ImageId,
    candidates: &[ImageId],
    descriptors: &BTreeMap<ImageId, Vec<f64>>,
) -> Result<ImageId, MiningError> {
    let fq = descriptors.get(&q).ok_or(MiningError::MissingDescriptor(q))?;
    let mut best: Option<(f64, ImageId)> = None;
    for &c in candidates {
        let d = squared_distance(fq, descriptors.get(&c).ok_or(MiningError::MissingDescriptor(c))?);
        let better = match best {
            None => true,
            Some((bd, bid)) => d < bd || (d == bd && c < bid),
        };
        if better {
            best = Some((d, c));
        }
    }
    best.map(|(_, id)| id).ok_or(MiningError::EmptyCandidates)
}

/// Descriptor extractions a strategy performs while mining.
pub fn count_descriptor_extractions(strategy: MiningStrategy, dataset_size: u64, epochs: u64) -> u64 {
    match strategy {
        MiningStrategy::Batched => 0,
        MiningStrategy::GlobalHard => dataset_size * epochs,
    }
}

/// Source of image descriptors for descriptor-driven mining.
pub trait DescriptorProvider {
    fn extract(&mut self, image: ImageId) -> Vec<f64>;
}

impl<F: FnMut(ImageId) -> Vec<f64>> DescriptorProvider for F {
    fn extract(&mut self, image: ImageId) -> Vec<f64> {
        self(image)
    }
}

/// Counts every extraction passed through it.
pub struct CountingProvider<P> {
    inner: P,
    extractions: u64,
}

impl<P: DescriptorProvider> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, extractions: 0 }
    }

    pub fn extractions(&self) -> u64 {
        self.extractions
    }
}

impl<P: DescriptorProvider> DescriptorProvider for CountingProvider<P> {
    fn extract(&mut self, image: ImageId) -> Vec<f64> {
        self.extractions += 1;
        self.inner.extract(image)
    }
}

/// Mines `epochs * cfg.t` batches with `strategy`.
///
/// Global-hard mining refreshes every descriptor at the start of each epoch,
/// then builds `B` single-positive entries per batch: the positive nearest in
/// descriptor space and the `M * (B - 1)` hardest cross-scene negatives, which
/// matches the negative count of a batched-mining query. Batched mining never
/// calls the provider.
pub fn mine_epochs(
    strategy: MiningStrategy,
    lists: &PositiveLists,
    cfg: &MiningConfig,
    epochs: usize,
    provider: &mut dyn DescriptorProvider,
) -> Result<Vec<TrainingBatch>, MiningError> {
    cfg.validate()?;
    match strategy {
        MiningStrategy::Batched => {
            let mut miner = BatchMiner::new(lists, *cfg)?;
            Ok((0..epochs * cfg.t).map(|_| miner.next_batch()).collect())
        }
        MiningStrategy::GlobalHard => {
            let eligible = Eligible::new(lists, cfg.epsilon, 1);
            eligible.require(cfg.b)?;
            let scene_of: BTreeMap<ImageId, SceneId> =
                lists.iter().filter_map(|(id, _)| lists.scene_of(id).map(|s| (id, s))).collect();
            let k = cfg.m * (cfg.b - 1);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut out = Vec::with_capacity(epochs * cfg.t);
            for _ in 0..epochs {
                let descriptors: BTreeMap<ImageId, Vec<f64>> =
                    scene_of.keys().map(|&id| (id, provider.extract(id))).collect();
                for _ in 0..cfg.t {
                    let mut entries = Vec::with_capacity(cfg.b);
                    for (query, list) in eligible.draw_queries(&mut rng, cfg.b) {
                        let ids: Vec<ImageId> = list.iter().map(|p| p.image).collect();
                        let best = select_descriptor_nearest_positive(*query, &ids, &descriptors)?;
                        let positive = *list.iter().find(|p| p.image == best).expect("selected from list");
                        entries.push(BatchEntry {
                            query: *query,
                            positives: vec![positive],
                            hard_negatives: mine_global_hard_negatives(*query, &descriptors, &scene_of, k)?,
                        });
                    }
                    out.push(TrainingBatch::new(entries));
                }
            }
            Ok(out)
        }
    }
}

/// Writes `BATCH` groups of `QUERY <id>`, `POS <id> <gs>` and `NEG <id>` lines.
pub fn write_batches(batches: &[TrainingBatch]) -> String {
    let mut out = String::from("# pairforge batches v1\n");
    for batch in batches {
        out.push_str("BATCH\n");
        for e in batch.entries() {
            let _ = writeln!(out, "QUERY {}", e.query);
            for p in &e.positives {
                let _ = writeln!(out, "POS {} {}", p.image, p.gs);
            }
            for n in &e.hard_negatives {
                let _ = writeln!(out, "NEG {n}");
            }
        }
    }
    out
}

pub fn parse_batches(input: &str) -> Result<Vec<TrainingBatch>, FormatError> {
    let mut batches: Vec<Vec<BatchEntry>> = Vec::new();
    for line in crate::model::text_lines(input) {
        let head = line.tokens[0];
        match head.text {
            "BATCH" => {
                line.expect_len(1)?;
                batches.push(Vec::new());
            }
            "QUERY" => {
                line.expect_len(2)?;
                let query = ImageId(line.field(1, "image_id")?);
                let batch = batches
                    .last_mut()
                    .ok_or_else(|| line.error(head.column, "QUERY before any BATCH"))?;
                batch.push(BatchEntry {
                    query,
                    positives: Vec::new(),
                    hard_negatives: Vec::new(),
                });
            }
            "POS" | "NEG" => {
                let entry = batches
                    .last_mut()
                    .and_then(|b| b.last_mut())
                    .ok_or_else(|| line.error(head.column, format!("{} before any QUERY", head.text)))?;
                if head.text == "POS" {
                    line.expect_len(3)?;
                    entry.positives.push(Positive {
                        image: ImageId(line.field(1, "image_id")?),
                        gs: line.field(2, "gs")?,
                    });
                } else {
                    line.expect_len(2)?;
                    entry.hard_negatives.push(ImageId(line.field(1, "image_id")?));
                }
            }
            other => return Err(line.error(head.column, format!("unknown record {other:?}"))),
        }
    }
    Ok(batches.into_iter().map(TrainingBatch::new).collect())
}

/// Scenes of the queries of `batch`, for invariant checks.
pub fn query_scenes(batch: &TrainingBatch, lists: &PositiveLists) -> Result<BTreeSet<SceneId>, MiningError> {
    batch
        .entries()
        .iter()
        .map(|e| lists.scene_of(e.query).ok_or(MiningError::UnknownImage(e.query)))
        .collect()
}
