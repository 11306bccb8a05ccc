//! Geometric similarity between images as the number of 3D points they
//! observe in common, and the per-image positive lists derived from it.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::model::{FormatError, ImageId, ImagePair, Reconstruction, SceneId};

/// Default positive threshold, in common 3D points.
pub const DEFAULT_EPSILON: u32 = 32;

/// Common-point counts for every same-scene image pair that shares at least
/// one point. Self pairs are never stored.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CovisibilityTable {
    counts: BTreeMap<ImagePair, u32>,
    observed: HashMap<ImageId, u32>,
}

impl CovisibilityTable {
    /// Geometric similarity of `a` and `b`. For `a == b` this is the number of
    /// points `a` observes.
    pub fn gs(&self, a: ImageId, b: ImageId) -> u32 {
        match ImagePair::new(a, b) {
            Some(pair) => self.counts.get(&pair).copied().unwrap_or(0),
            None => self.observed_by(a),
        }
    }

    /// Number of 3D points whose track contains `image`.
    pub fn observed_by(&self, image: ImageId) -> u32 {
        self.observed.get(&image).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ImagePair, u32)> + '_ {
        self.counts.iter().map(|(p, &n)| (*p, n))
    }

    pub fn max_gs(&self) -> u32 {
        self.counts.values().copied().max().unwrap_or(0)
    }
}

type Partial = (HashMap<ImagePair, u32>, HashMap<ImageId, u32>);

/// Builds the table by inverting tracks: each point increments every pair of
/// images in its track, so the cost is linear in total track mass.
pub fn build_covisibility(r: &Reconstruction) -> CovisibilityTable {
    let scene_of = r.scene_map();
    let (counts, observed) = r
        .points()
        .par_chunks(4096)
        .fold(Partial::default, |(mut counts, mut observed), chunk| {
            for point in chunk {
                let track = &point.track;
                for (i, a) in track.iter().enumerate() {
                    *observed.entry(a.image).or_insert(0) += 1;
                    for b in &track[i + 1..] {
                        if scene_of.get(&a.image) != scene_of.get(&b.image) {
                            continue;
                        }
                        if let Some(pair) = ImagePair::new(a.image, b.image) {
                            *counts.entry(pair).or_insert(0) += 1;
                        }
                    }
                }
            }
            (counts, observed)
        })
        .reduce(Partial::default, |(mut ca, mut oa), (cb, ob)| {
            for (k, v) in cb {
                *ca.entry(k).or_insert(0) += v;
            }
            for (k, v) in ob {
                *oa.entry(k).or_insert(0) += v;
            }
            (ca, oa)
        });
    CovisibilityTable {
        counts: counts.into_iter().collect(),
        observed,
    }
}

/// One positive candidate of a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Positive {
    pub image: ImageId,
    pub gs: u32,
}

/// Per-image same-scene positives with `GS > epsilon`, sorted by GS
/// descending then image id ascending. Every image of the reconstruction has
/// an entry, possibly empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveLists {
    epsilon: u32,
    lists: BTreeMap<ImageId, Vec<Positive>>,
    scenes: BTreeMap<ImageId, SceneId>,
}

impl PositiveLists {
    pub fn epsilon(&self) -> u32 {
        self.epsilon
    }

    pub fn get(&self, query: ImageId) -> &[Positive] {
        self.lists.get(&query).map_or(&[], Vec::as_slice)
    }

    pub fn scene_of(&self, image: ImageId) -> Option<SceneId> {
        self.scenes.get(&image).copied()
    }

    /// Queries in ascending id order with their lists.
    pub fn iter(&self) -> impl Iterator<Item = (ImageId, &[Positive])> {
        self.lists.iter().map(|(q, l)| (*q, l.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }
}

fn sort_positives(list: &mut [Positive]) {
    list.sort_by(|a, b| b.gs.cmp(&a.gs).then(a.image.cmp(&b.image)));
}

pub fn positive_lists(table: &CovisibilityTable, r: &Reconstruction, epsilon: u32) -> PositiveLists {
    let scenes: BTreeMap<ImageId, SceneId> = r.images().iter().map(|i| (i.id, i.scene)).collect();
    let mut lists: BTreeMap<ImageId, Vec<Positive>> = scenes.keys().map(|&id| (id, Vec::new())).collect();
    for (pair, gs) in table.iter() {
        if gs <= epsilon || scenes.get(&pair.lo()) != scenes.get(&pair.hi()) {
            continue;
        }
        for (q, t) in [(pair.lo(), pair.hi()), (pair.hi(), pair.lo())] {
            if let Some(list) = lists.get_mut(&q) {
                list.push(Positive { image: t, gs });
            }
        }
    }
    for list in lists.values_mut() {
        sort_positives(list);
    }
    PositiveLists {
        epsilon,
        lists,
        scenes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReconstructionSummary {
    pub registered_images: usize,
    pub points: usize,
}

pub fn reconstruction_summary(r: &Reconstruction) -> ReconstructionSummary {
    ReconstructionSummary {
        registered_images: r.images().len(),
        points: r.points().len(),
    }
}

/// Writes `POSLIST <query_id>` blocks followed by `<image_id> <gs>` lines.
pub fn write_positive_lists(lists: &PositiveLists) -> String {
    let mut out = format!("# pairforge positive lists, epsilon={}\n", lists.epsilon);
    for (q, list) in lists.iter() {
        let _ = writeln!(out, "POSLIST {q}");
        for p in list {
            let _ = writeln!(out, "{} {}", p.image, p.gs);
        }
    }
    out
}

/// Reads positive lists back, taking scene membership from `r`. The
/// threshold is not stored in the file; the returned value carries `epsilon`
/// lowered to one below the smallest GS present.
pub fn parse_positive_lists(input: &str, r: &Reconstruction) -> Result<PositiveLists, FormatError> {
    use crate::model::ModelError;

    let scenes: BTreeMap<ImageId, SceneId> = r.images().iter().map(|i| (i.id, i.scene)).collect();
    let mut lists: BTreeMap<ImageId, Vec<Positive>> = BTreeMap::new();
    let mut current: Option<ImageId> = None;
    for line in crate::model::text_lines(input) {
        let head = line.tokens[0];
        if head.text == "POSLIST" {
            line.expect_len(2)?;
            let q = ImageId(line.field(1, "query_id")?);
            if !scenes.contains_key(&q) {
                return Err(line.error(line.tokens[1].column, format!("unknown image {q}")));
            }
            if lists.insert(q, Vec::new()).is_some() {
                return Err(line.invalid(ModelError::DuplicateImage(q)));
            }
            current = Some(q);
            continue;
        }
        let Some(q) = current else {
            return Err(line.error(head.column, "entry before any POSLIST"));
        };
        line.expect_len(2)?;
        let image = ImageId(line.field(0, "image_id")?);
        let gs: u32 = line.field(1, "gs")?;
        if scenes.get(&image) != scenes.get(&q) {
            return Err(line.error(
                head.column,
                format!("positive {image} is not in the scene of query {q}"),
            ));
        }
        lists.get_mut(&q).expect("current list").push(Positive { image, gs });
    }
    for list in lists.values_mut() {
        sort_positives(list);
    }
    for id in scenes.keys() {
        lists.entry(*id).or_default();
    }
    let min_gs = lists.values().flatten().map(|p| p.gs).min().unwrap_or(1);
    Ok(PositiveLists {
        epsilon: min_gs.saturating_sub(1),
        lists,
        scenes,
    })
}
