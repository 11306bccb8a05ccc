use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{normalize, normalize_backward, AggregateError};
use crate::model::FeatureMap;

pub const DEFAULT_CLUSTERS: usize = 64;
pub const DEFAULT_SHARPNESS: f64 = 100.0;
pub const KMEANS_MAX_ITERS: usize = 100;

/// Local features with a smaller norm are treated as zero vectors.
const TINY_NORM: f64 = 1e-12;

/// Soft-assignment VLAD layer. Matrices are row-major `K x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetVladParams {
    pub k: usize,
    pub dim: usize,
    pub centers: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Scale of the initial assignment weights.
    pub sharpness: f64,
    /// Per-cluster L2 normalization before the global one.
    pub intra_norm: bool,
}

impl NetVladParams {
    pub fn zeros(k: usize, dim: usize, sharpness: f64) -> Result<Self, AggregateError> {
        if k == 0 || dim == 0 {
            return Err(AggregateError::InvalidParam("K and D must be positive".into()));
        }
        if !(sharpness > 0.0 && sharpness.is_finite()) {
            return Err(AggregateError::InvalidParam(format!("sharpness {sharpness} must be positive")));
        }
        Ok(Self {
            k,
            dim,
            centers: vec![0.0; k * dim],
            weights: vec![0.0; k * dim],
            bias: vec![0.0; k],
            sharpness,
            intra_norm: true,
        })
    }

    /// Parameters with the given centers, `w_k = sharpness * c_k / |c_k|` and
    /// `b_k = 0`.
    pub fn from_centers(centers: Vec<Vec<f64>>, sharpness: f64) -> Result<Self, AggregateError> {
        let dim = centers.first().map_or(0, Vec::len);
        let mut p = Self::zeros(centers.len(), dim, sharpness)?;
        for (k, c) in centers.iter().enumerate() {
            if c.len() != dim {
                return Err(AggregateError::DimensionMismatch {
                    expected: dim,
                    found: c.len(),
                });
            }
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            p.centers[k * dim..(k + 1) * dim].copy_from_slice(c);
            if norm > 0.0 {
                for (w, v) in p.weights[k * dim..(k + 1) * dim].iter_mut().zip(c) {
                    *w = sharpness * v / norm;
                }
            }
        }
        Ok(p)
    }

    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    pub fn weight(&self, k: usize) -> &[f64] {
        &self.weights[k * self.dim..(k + 1) * self.dim]
    }

    pub fn output_dim(&self) -> usize {
        self.k * self.dim
    }
}

#[derive(Debug, Clone)]
pub struct NetVladCache {
    height: usize,
    width: usize,
    /// Normalized local features, `N x D`.
    xhat: Vec<f64>,
    norms: Vec<f64>,
    /// Soft assignments, `N x K`.
    assign: Vec<f64>,
    /// Aggregated residuals before any normalization, `K x D`.
    residuals: Vec<f64>,
    cluster_norms: Vec<f64>,
    /// After the optional intra-normalization.
    intra: Vec<f64>,
    out: Vec<f64>,
    out_norm: f64,
}

impl NetVladCache {
    /// Soft assignment of local feature `i` (pixel `y * W + x`).
    pub fn assignment(&self, i: usize) -> &[f64] {
        let k = self.assign.len() / self.norms.len();
        &self.assign[i * k..(i + 1) * k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetVladGrads {
    pub centers: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Same channel-major layout as the input map.
    pub input: Vec<f64>,
}

impl NetVladGrads {
    /// Parameter gradient in `Head::params` order.
    pub fn flat(self) -> Vec<f64> {
        let mut v = self.centers;
        v.extend(self.weights);
        v.extend(self.bias);
        v
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pixel-major local features, each L2-normalized, with their original norms.
fn normalized_features(map: &FeatureMap) -> (Vec<f64>, Vec<f64>) {
    let (d, n) = (map.channels(), map.pixels());
    let mut xhat = vec![0.0; n * d];
    let mut norms = vec![0.0; n];
    for c in 0..d {
        for (i, v) in map.channel(c).iter().enumerate() {
            xhat[i * d + c] = *v;
        }
    }
    for (i, row) in xhat.chunks_mut(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms[i] = norm;
        if norm > TINY_NORM {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    (xhat, norms)
}

pub fn netvlad_forward(map: &FeatureMap, p: &NetVladParams) -> Result<(Vec<f64>, NetVladCache), AggregateError> {
    if map.channels() != p.dim {
        return Err(AggregateError::DimensionMismatch {
            expected: p.dim,
            found: map.channels(),
        });
    }
    let (d, k, n) = (p.dim, p.k, map.pixels());
    let (xhat, norms) = normalized_features(map);

    let mut assign = vec![0.0; n * k];
    for i in 0..n {
        let x = &xhat[i * d..(i + 1) * d];
        let row = &mut assign[i * k..(i + 1) * k];
        for (j, s) in row.iter_mut().enumerate() {
            *s = dot(p.weight(j), x) + p.bias[j];
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        row.iter_mut().for_each(|s| *s /= sum);
    }

    let mut residuals = vec![0.0; k * d];
    for j in 0..k {
        let c = p.center(j);
        let v = &mut residuals[j * d..(j + 1) * d];
        for i in 0..n {
            let a = assign[i * k + j];
            for ((vc, x), cc) in v.iter_mut().zip(&xhat[i * d..(i + 1) * d]).zip(c) {
                *vc += a * (x - cc);
            }
        }
    }

    let mut cluster_norms = vec![1.0; k];
    let mut intra = residuals.clone();
    if p.intra_norm {
        for (j, v) in intra.chunks_mut(d).enumerate() {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            cluster_norms[j] = norm;
            if norm > TINY_NORM {
                v.iter_mut().for_each(|x| *x /= norm);
            } else {
                v.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
    let normalized = normalize(intra.clone())?;
    let out = normalized.out.clone();
    Ok((
        out.clone(),
        NetVladCache {
            height: map.height(),
            width: map.width(),
            xhat,
            norms,
            assign,
            residuals,
            cluster_norms,
            intra,
            out,
            out_norm: normalized.norm,
        },
    ))
}

pub fn netvlad_backward(cache: &NetVladCache, p: &NetVladParams, upstream: &[f64]) -> NetVladGrads {
    let (d, k, n) = (p.dim, p.k, cache.norms.len());
    assert_eq!(upstream.len(), k * d, "upstream gradient dimension");
    let g_intra = normalize_backward(&cache.out, cache.out_norm, upstream);
    let mut g_v = g_intra.clone();
    if p.intra_norm {
        for j in 0..k {
            let norm = cache.cluster_norms[j];
            let range = j * d..(j + 1) * d;
            if norm > TINY_NORM {
                g_v[range.clone()]
                    .copy_from_slice(&normalize_backward(&cache.intra[range.clone()], norm, &g_intra[range]));
            } else {
                g_v[range].iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }
    debug_assert_eq!(cache.residuals.len(), g_v.len());

    let mut g_centers = vec![0.0; k * d];
    let mut g_weights = vec![0.0; k * d];
    let mut g_bias = vec![0.0; k];
    let mut g_input = vec![0.0; n * d];
    let mut g_a = vec![0.0; k];
    let mut g_xhat = vec![0.0; d];
    for i in 0..n {
        let x = &cache.xhat[i * d..(i + 1) * d];
        let a = &cache.assign[i * k..(i + 1) * k];
        for j in 0..k {
            let gvj = &g_v[j * d..(j + 1) * d];
            g_a[j] = gvj.iter().zip(x).zip(p.center(j)).map(|((g, xv), c)| g * (xv - c)).sum();
        }
        let mean: f64 = a.iter().zip(&g_a).map(|(ai, gi)| ai * gi).sum();
        g_xhat.iter_mut().for_each(|g| *g = 0.0);
        for j in 0..k {
            let g_s = a[j] * (g_a[j] - mean);
            g_bias[j] += g_s;
            let gvj = &g_v[j * d..(j + 1) * d];
            let wj = p.weight(j);
            for c in 0..d {
                g_weights[j * d + c] += g_s * x[c];
                g_centers[j * d + c] -= a[j] * gvj[c];
                g_xhat[c] += a[j] * gvj[c] + g_s * wj[c];
            }
        }
        let norm = cache.norms[i];
        if norm > TINY_NORM {
            let proj = dot(x, &g_xhat);
            for c in 0..d {
                g_input[c * n + i] = (g_xhat[c] - x[c] * proj) / norm;
            }
        }
    }
    debug_assert_eq!(n, cache.height * cache.width);
    NetVladGrads {
        centers: g_centers,
        weights: g_weights,
        bias: g_bias,
        input: g_input,
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's k-means with k-means++ seeding, at most `max_iters` refinements.
/// Empty clusters keep their previous center.
pub fn kmeans(samples: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> Result<Vec<Vec<f64>>, AggregateError> {
    if k == 0 {
        return Err(AggregateError::InvalidParam("K must be positive".into()));
    }
    if samples.len() < k {
        return Err(AggregateError::TooFewSamples {
            samples: samples.len(),
            k,
        });
    }
    let dim = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
        return Err(AggregateError::DimensionMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![samples[rng.random_range(0..samples.len())].clone()];
    let mut nearest: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            nearest
                .iter()
                .position(|&w| {
                    r -= w;
                    r < 0.0 && w > 0.0
                })
                .unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).expect("positive weight"))
        } else {
            index::sample(&mut rng, samples.len(), 1).index(0)
        };
        centers.push(samples[pick].clone());
        for (d, s) in nearest.iter_mut().zip(samples) {
            *d = d.min(sq_dist(s, &centers[centers.len() - 1]));
        }
    }

    let mut labels = vec![usize::MAX; samples.len()];
    for _ in 0..max_iters {
        let mut changed = false;
        for (label, s) in labels.iter_mut().zip(samples) {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(s, &centers[a]).total_cmp(&sq_dist(s, &centers[b])))
                .expect("k > 0");
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&label, s) in labels.iter().zip(samples) {
            counts[label] += 1;
            for (acc, v) in sums[label].iter_mut().zip(s) {
                *acc += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|v| v / counts[j] as f64).collect();
            }
        }
    }
    Ok(centers)
}

/// k-means centers over `samples` and the default assignment initialization.
pub fn netvlad_init(samples: &[Vec<f64>], k: usize, sharpness: f64, seed: u64) -> Result<NetVladParams, AggregateError> {
    let centers = kmeans(samples, k, KMEANS_MAX_ITERS, seed)?;
    NetVladParams::from_centers(centers, sharpness)
}

/// Up to `max_samples` normalized local features drawn uniformly from `maps`.
pub fn sample_local_features(maps: &[&FeatureMap], max_samples: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut all = Vec::new();
    for map in maps {
        let (xhat, norms) = normalized_features(map);
        let d = map.channels();
        for (i, norm) in norms.iter().enumerate() {
            if *norm > TINY_NORM {
                all.push(xhat[i * d..(i + 1) * d].to_vec());
            }
        }
    }
    if all.len() <= max_samples {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, all.len(), max_samples).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| std::mem::take(&mut all[i])).collect()
}
