//! Triplet and ranked list losses over L2-normalized embeddings, with exact
//! gradients with respect to the raw (unnormalized) inputs.
//!
//! Hinges use a zero subgradient at the kink, so a term exactly at its margin
//! counts as trivial.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::mining::TrainingBatch;
use crate::model::ImageId;

/// Positive–negative margin shared by both losses.
pub const DEFAULT_MARGIN: f64 = 0.1;
/// Negative hypersphere radius for pooling heads.
pub const DEFAULT_ALPHA: f64 = 0.9;
/// Negative hypersphere radius for the NetVLAD head.
pub const NETVLAD_ALPHA: f64 = 1.35;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("embedding {0} has zero norm")]
    ZeroNorm(usize),
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("ranked list loss needs at least one positive")]
    EmptyPositives,
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error("no embedding for image {0}")]
    MissingEmbedding(ImageId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Margin `m` between positives and negatives.
    pub margin: f64,
    /// Radius `alpha` of the negative hypersphere; positives are pulled within
    /// `alpha - margin`.
    pub alpha: f64,
    /// Average the hypersphere term only over terms with nonzero hinge.
    pub nontrivial_only: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            alpha: DEFAULT_ALPHA,
            nontrivial_only: true,
        }
    }
}

impl LossConfig {
    pub fn new(margin: f64, alpha: f64, nontrivial_only: bool) -> Result<Self, LossError> {
        let cfg = Self {
            margin,
            alpha,
            nontrivial_only,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(LossError::InvalidConfig(format!("margin {} must be >= 0", self.margin)));
        }
        if !(self.alpha.is_finite() && self.alpha - self.margin > 0.0) {
            return Err(LossError::InvalidConfig(format!(
                "alpha {} must exceed margin {}",
                self.alpha, self.margin
            )));
        }
        Ok(())
    }
}

/// Loss value and gradients for a single-query evaluation. `grads` follows
/// the input order of the evaluating function.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
    pub active_terms: usize,
    pub total_terms: usize,
}

/// Loss value and gradients for a batch, keyed by image. An image used in
/// several roles receives the sum of its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossReport {
    pub value: f64,
    pub grads: BTreeMap<ImageId, Vec<f64>>,
    pub active_terms: usize,
    pub total_terms: usize,
}

struct Unit {
    dir: Vec<f64>,
    norm: f64,
}

fn unit(x: &[f64], index: usize) -> Result<Unit, LossError> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(LossError::ZeroNorm(index));
    }
    Ok(Unit {
        dir: x.iter().map(|v| v / norm).collect(),
        norm,
    })
}

fn unit_distance(a: &Unit, b: &Unit) -> f64 {
    a.dir.iter().zip(&b.dir).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Adds `scale * dD/dx_a` to `ga` and `scale * dD/dx_b` to `gb`, where
/// `D = |x_a/|x_a| - x_b/|x_b||`.
fn add_distance_grad(a: &Unit, b: &Unit, dist: f64, scale: f64, ga: &mut [f64], gb: &mut [f64]) {
    if dist == 0.0 || scale == 0.0 {
        return;
    }
    let diff: Vec<f64> = a.dir.iter().zip(&b.dir).map(|(x, y)| (x - y) / dist).collect();
    add_projected(&a.dir, a.norm, &diff, scale, ga);
    add_projected(&b.dir, b.norm, &diff, -scale, gb);
}

/// `out += scale * (I - u u^T) g / norm`
fn add_projected(u: &[f64], norm: f64, g: &[f64], scale: f64, out: &mut [f64]) {
    let dot: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
    let s = scale / norm;
    for ((o, ui), gi) in out.iter_mut().zip(u).zip(g) {
        *o += s * (gi - dot * ui);
    }
}

fn check_dims(inputs: &[&[f64]]) -> Result<(), LossError> {
    let dim = inputs.first().map_or(0, |x| x.len());
    for x in inputs {
        if x.len() != dim {
            return Err(LossError::DimensionMismatch(dim, x.len()));
        }
    }
    Ok(())
}

/// Euclidean distance between the L2-normalized inputs.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64, LossError> {
    check_dims(&[a, b])?;
    Ok(unit_distance(&unit(a, 0)?, &unit(b, 1)?))
}

/// `[D(A,P) - D(A,N) + m]_+`, with gradients `[anchor, positive, negative]`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], cfg: &LossConfig) -> Result<LossReport, LossError> {
    check_dims(&[anchor, positive, negative])?;
    let units = [unit(anchor, 0)?, unit(positive, 1)?, unit(negative, 2)?];
    let mut grads = vec![vec![0.0; anchor.len()]; 3];
    let (value, active) = triplet_term(&units, [0, 1, 2], cfg.margin, 1.0, &mut grads);
    Ok(LossReport {
        value,
        grads,
        active_terms: usize::from(active),
        total_terms: 1,
    })
}

/// Evaluates one triplet over `units[idx]` and, when active, accumulates
/// `scale` times its gradient.
fn triplet_term(units: &[Unit], idx: [usize; 3], margin: f64, scale: f64, grads: &mut [Vec<f64>]) -> (f64, bool) {
    let [a, p, n] = idx;
    let d_ap = unit_distance(&units[a], &units[p]);
    let d_an = unit_distance(&units[a], &units[n]);
    let hinge = d_ap - d_an + margin;
    if hinge <= 0.0 {
        return (0.0, false);
    }
    if scale != 0.0 {
        let (ga, gp) = pair_mut(grads, a, p);
        add_distance_grad(&units[a], &units[p], d_ap, scale, ga, gp);
        let (ga, gn) = pair_mut(grads, a, n);
        add_distance_grad(&units[a], &units[n], d_an, -scale, ga, gn);
    }
    (hinge, true)
}

fn pair_mut(v: &mut [Vec<f64>], i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(i, j, "distinct slots required");
    if i < j {
        let (lo, hi) = v.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

/// Ranked list loss of one query.
///
/// `positives` must be ordered by decreasing geometric similarity. The value is
/// `L1 + L2` where `L1` averages the negative hinges `[alpha - D]_+` and the
/// positive hinges `[D - (alpha - m)]_+`, and `L2` sums the adjacent ordering
/// hinges `[D(q,p_k) - D(q,p_k+1)]_+` over `|P|`. With `nontrivial_only`, `L1`
/// divides by the number of active hinges instead of `|P| + |N|`.
///
/// Gradients are returned as `[query, positives..., negatives...]`.
pub fn ranked_list_loss(
    query: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    cfg: &LossConfig,
) -> Result<LossReport, LossError> {
    if positives.is_empty() {
        return Err(LossError::EmptyPositives);
    }
    let mut inputs = Vec::with_capacity(1 + positives.len() + negatives.len());
    inputs.push(query);
    inputs.extend_from_slice(positives);
    inputs.extend_from_slice(negatives);
    check_dims(&inputs)?;
    let units = inputs.iter().enumerate().map(|(i, x)| unit(x, i)).collect::<Result<Vec<_>, _>>()?;
    let pos: Vec<usize> = (1..=positives.len()).collect();
    let neg: Vec<usize> = (positives.len() + 1..inputs.len()).collect();
    let mut grads = vec![vec![0.0; query.len()]; inputs.len()];
    let (value, active, total) = rll_terms(&units, 0, &pos, &neg, cfg, 1.0, &mut grads);
    Ok(LossReport {
        value,
        grads,
        active_terms: active,
        total_terms: total,
    })
}

/// Shared ranked-list evaluation over slots of `units`; accumulates `scale`
/// times the gradient into `grads`. Returns `(value, active, total)`.
fn rll_terms(
    units: &[Unit],
    q: usize,
    pos: &[usize],
    neg: &[usize],
    cfg: &LossConfig,
    scale: f64,
    grads: &mut [Vec<f64>],
) -> (f64, usize, usize) {
    let pos_radius = cfg.alpha - cfg.margin;
    let d_pos: Vec<f64> = pos.iter().map(|&p| unit_distance(&units[q], &units[p])).collect();
    let d_neg: Vec<f64> = neg.iter().map(|&n| unit_distance(&units[q], &units[n])).collect();

    // (slot, distance, d hinge / d distance)
    let mut l1_terms: Vec<(usize, f64, f64, f64)> = Vec::new();
    for (&n, &d) in neg.iter().zip(&d_neg) {
        let h = cfg.alpha - d;
        if h > 0.0 {
            l1_terms.push((n, d, h, -1.0));
        }
    }
    for (&p, &d) in pos.iter().zip(&d_pos) {
        let h = d - pos_radius;
        if h > 0.0 {
            l1_terms.push((p, d, h, 1.0));
        }
    }
    let l1_den = if cfg.nontrivial_only {
        l1_terms.len().max(1) as f64
    } else {
        (pos.len() + neg.len()) as f64
    };
    let l1: f64 = l1_terms.iter().map(|t| t.2).sum::<f64>() / l1_den;

    let l2_den = pos.len() as f64;
    let mut l2 = 0.0;
    let mut l2_active = Vec::new();
    for k in 0..pos.len().saturating_sub(1) {
        let h = d_pos[k] - d_pos[k + 1];
        if h > 0.0 {
            l2 += h;
            l2_active.push(k);
        }
    }
    l2 /= l2_den;

    if scale != 0.0 {
        for &(slot, d, _, sign) in &l1_terms {
            let (gq, gx) = pair_mut(grads, q, slot);
            add_distance_grad(&units[q], &units[slot], d, scale * sign / l1_den, gq, gx);
        }
        for &k in &l2_active {
            let s = scale / l2_den;
            let (gq, gp) = pair_mut(grads, q, pos[k]);
            add_distance_grad(&units[q], &units[pos[k]], d_pos[k], s, gq, gp);
            let (gq, gp) = pair_mut(grads, q, pos[k + 1]);
            add_distance_grad(&units[q], &units[pos[k + 1]], d_pos[k + 1], -s, gq, gp);
        }
    }
    let total = neg.len() + pos.len() + pos.len().saturating_sub(1);
    (l1 + l2, l1_terms.len() + l2_active.len(), total)
}

/// Embedding slots for every distinct image of a batch.
struct BatchSlots {
    ids: Vec<ImageId>,
    index: HashMap<ImageId, usize>,
    units: Vec<Unit>,
}

impl BatchSlots {
    fn new(batch: &TrainingBatch, embeddings: &HashMap<ImageId, Vec<f64>>) -> Result<Self, LossError> {
        let mut ids = Vec::new();
        let mut index = HashMap::new();
        for id in batch.members() {
            if let std::collections::hash_map::Entry::Vacant(e) = index.entry(id) {
                e.insert(ids.len());
                ids.push(id);
            }
        }
        let vectors = ids
            .iter()
            .map(|id| embeddings.get(id).map(Vec::as_slice).ok_or(LossError::MissingEmbedding(*id)))
            .collect::<Result<Vec<_>, _>>()?;
        check_dims(&vectors)?;
        let units = vectors.iter().enumerate().map(|(i, x)| unit(x, i)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { ids, index, units })
    }

    fn slot(&self, id: ImageId) -> usize {
        self.index[&id]
    }

    fn report(self, value: f64, grads: Vec<Vec<f64>>, active: usize, total: usize) -> BatchLossReport {
        BatchLossReport {
            value,
            grads: self.ids.into_iter().zip(grads).collect(),
            active_terms: active,
            total_terms: total,
        }
    }
}

/// Mean ranked list loss over the batch queries, each query's negatives being
/// the positives of the other queries (or its explicit hard negatives).
pub fn batch_ranked_list_loss(
    batch: &TrainingBatch,
    embeddings: &HashMap<ImageId, Vec<f64>>,
    cfg: &LossConfig,
) -> Result<BatchLossReport, LossError> {
    let slots = BatchSlots::new(batch, embeddings)?;
    let dim = slots.units.first().map_or(0, |u| u.dir.len());
    let mut grads = vec![vec![0.0; dim]; slots.ids.len()];
    let b = batch.len() as f64;
    let (mut value, mut active, mut total) = (0.0, 0, 0);
    for i in 0..batch.len() {
        let entry = &batch.entries()[i];
        if entry.positives.is_empty() {
            return Err(LossError::EmptyPositives);
        }
        let pos: Vec<usize> = entry.positives.iter().map(|p| slots.slot(p.image)).collect();
        let neg: Vec<usize> = batch.negatives_of(i).into_iter().map(|n| slots.slot(n)).collect();
        let (v, a, t) = rll_terms(&slots.units, slots.slot(entry.query), &pos, &neg, cfg, 1.0 / b, &mut grads);
        value += v / b;
        active += a;
        total += t;
    }
    Ok(slots.report(value, grads, active, total))
}

/// Mean triplet loss over every `(query, positive, negative)` combination of
/// the batch. With `nontrivial_only` the mean runs over active triplets.
pub fn batch_triplet_loss(
    batch: &TrainingBatch,
    embeddings: &HashMap<ImageId, Vec<f64>>,
    cfg: &LossConfig,
) -> Result<BatchLossReport, LossError> {
    let slots = BatchSlots::new(batch, embeddings)?;
    let dim = slots.units.first().map_or(0, |u| u.dir.len());
    let mut triplets = Vec::new();
    for i in 0..batch.len() {
        let entry = &batch.entries()[i];
        let q = slots.slot(entry.query);
        let negatives = batch.negatives_of(i);
        for p in &entry.positives {
            for &n in &negatives {
                triplets.push([q, slots.slot(p.image), slots.slot(n)]);
            }
        }
    }
    let mut scratch = vec![vec![0.0; dim]; slots.ids.len()];
    let mut active_idx = Vec::new();
    let mut sum = 0.0;
    for (t, idx) in triplets.iter().enumerate() {
        let (h, on) = triplet_term(&slots.units, *idx, cfg.margin, 0.0, &mut scratch);
        if on {
            sum += h;
            active_idx.push(t);
        }
    }
    let den = if cfg.nontrivial_only {
        active_idx.len().max(1) as f64
    } else {
        triplets.len().max(1) as f64
    };
    let mut grads = vec![vec![0.0; dim]; slots.ids.len()];
    for &t in &active_idx {
        triplet_term(&slots.units, triplets[t], cfg.margin, 1.0 / den, &mut grads);
    }
    let total = triplets.len();
    Ok(slots.report(sum / den, grads, active_idx.len(), total))
}
