use super::{normalize, normalize_backward, AggregateError};
use crate::model::FeatureMap;

/// Activations are clamped to at least this before taking powers.
pub const GEM_CLAMP: f64 = 1e-6;
pub const GEM_INITIAL_P: f64 = 3.0;

/// GeM exponents: one shared value or one per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GemParams {
    pub p: Vec<f64>,
}

impl GemParams {
    pub fn new(p: Vec<f64>) -> Result<Self, AggregateError> {
        if p.is_empty() || p.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(AggregateError::InvalidParam("GeM exponents must be positive and finite".into()));
        }
        Ok(Self { p })
    }

    pub fn shared(p: f64) -> Result<Self, AggregateError> {
        Self::new(vec![p])
    }

    fn exponent(&self, channel: usize) -> f64 {
        if self.p.len() == 1 {
            self.p[0]
        } else {
            self.p[channel]
        }
    }

    fn check(&self, channels: usize) -> Result<(), AggregateError> {
        if self.p.len() != 1 && self.p.len() != channels {
            return Err(AggregateError::DimensionMismatch {
                expected: self.p.len(),
                found: channels,
            });
        }
        Ok(())
    }

    /// Enforces `p >= 1`.
    pub fn clamp(&mut self) {
        for p in &mut self.p {
            *p = p.max(1.0);
        }
    }
}

impl Default for GemParams {
    fn default() -> Self {
        Self { p: vec![GEM_INITIAL_P] }
    }
}

#[derive(Debug, Clone)]
pub struct GemCache {
    channels: usize,
    pixels: usize,
    /// Per channel: max clamped activation `m`, `T = mean((x/m)^p)`, pooled `f`.
    stats: Vec<(f64, f64, f64)>,
    clamped: Vec<f64>,
    out: Vec<f64>,
    out_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GemGrads {
    /// Same length as the exponent vector.
    pub p: Vec<f64>,
    pub input: Vec<f64>,
}

/// One channel of GeM in the overflow-safe form `f = m * T^(1/p)`.
fn gem_channel(values: impl Iterator<Item = f64>, p: f64) -> (f64, f64, f64) {
    let clamped: Vec<f64> = values.map(|v| v.max(GEM_CLAMP)).collect();
    let m = clamped.iter().copied().fold(GEM_CLAMP, f64::max);
    let t = clamped.iter().map(|v| (v / m).powf(p)).sum::<f64>() / clamped.len() as f64;
    (m, t, m * t.powf(1.0 / p))
}

/// Per-channel power means before normalization.
pub fn gem_pool(map: &FeatureMap, params: &GemParams) -> Result<Vec<f64>, AggregateError> {
    params.check(map.channels())?;
    Ok((0..map.channels())
        .map(|c| gem_channel(map.channel(c).iter().copied(), params.exponent(c)).2)
        .collect())
}

pub fn gem_forward(map: &FeatureMap, params: &GemParams) -> Result<(Vec<f64>, GemCache), AggregateError> {
    params.check(map.channels())?;
    let stats: Vec<(f64, f64, f64)> = (0..map.channels())
        .map(|c| gem_channel(map.channel(c).iter().copied(), params.exponent(c)))
        .collect();
    let normalized = normalize(stats.iter().map(|s| s.2).collect())?;
    Ok((
        normalized.out.clone(),
        GemCache {
            channels: map.channels(),
            pixels: map.pixels(),
            stats,
            clamped: map.values().iter().map(|v| v.max(GEM_CLAMP)).collect(),
            out: normalized.out,
            out_norm: normalized.norm,
        },
    ))
}

pub fn gem_backward(cache: &GemCache, params: &GemParams, upstream: &[f64]) -> GemGrads {
    assert_eq!(upstream.len(), cache.channels, "upstream gradient dimension");
    let g_f = normalize_backward(&cache.out, cache.out_norm, upstream);
    let n = cache.pixels;
    let mut g_p = vec![0.0; params.p.len()];
    let mut g_input = vec![0.0; cache.channels * n];
    for c in 0..cache.channels {
        let p = params.exponent(c);
        let (m, t, f) = cache.stats[c];
        let xs = &cache.clamped[c * n..(c + 1) * n];
        let mut mean_log = 0.0;
        for (j, &x) in xs.iter().enumerate() {
            let r = x / m;
            let rp = r.powf(p);
            mean_log += rp * r.ln();
            // clamped activations do not move the output
            if x > GEM_CLAMP {
                g_input[c * n + j] = g_f[c] * f * rp / r / (n as f64 * m * t);
            }
        }
        mean_log /= n as f64;
        let df_dp = f * (mean_log / (p * t) - t.ln() / (p * p));
        g_p[if params.p.len() == 1 { 0 } else { c }] += g_f[c] * df_dp;
    }
    GemGrads { p: g_p, input: g_input }
}

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    pixels: usize,
    argmax: Vec<usize>,
    out: Vec<f64>,
    out_norm: f64,
}

/// Per-channel maxima before normalization with the first arg-max of each.
fn channel_max(map: &FeatureMap) -> (Vec<f64>, Vec<usize>) {
    (0..map.channels())
        .map(|c| {
            map.channel(c)
                .iter()
                .enumerate()
                .fold((f64::NEG_INFINITY, 0), |best, (i, &v)| if v > best.0 { (v, i) } else { best })
        })
        .unzip()
}

pub fn max_pool(map: &FeatureMap) -> Vec<f64> {
    channel_max(map).0
}

pub fn max_pool_forward(map: &FeatureMap) -> Result<(Vec<f64>, MaxPoolCache), AggregateError> {
    let (maxima, argmax) = channel_max(map);
    let normalized = normalize(maxima)?;
    Ok((
        normalized.out.clone(),
        MaxPoolCache {
            pixels: map.pixels(),
            argmax,
            out: normalized.out,
            out_norm: normalized.norm,
        },
    ))
}

/// Input gradient; each channel's gradient goes to its first maximum.
pub fn max_pool_backward(cache: &MaxPoolCache, upstream: &[f64]) -> Vec<f64> {
    let g = normalize_backward(&cache.out, cache.out_norm, upstream);
    let mut input = vec![0.0; cache.argmax.len() * cache.pixels];
    for (c, (&i, gc)) in cache.argmax.iter().zip(&g).enumerate() {
        input[c * cache.pixels + i] = *gc;
    }
    input
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(channels: Vec<Vec<f64>>) -> FeatureMap {
        let n = channels[0].len();
        FeatureMap::new(channels.len(), 1, n, channels.concat()).unwrap()
    }

    #[test]
    fn gem_limits() {
        let m = map(vec![vec![1.0, 3.0]]);
        let avg = gem_pool(&m, &GemParams::shared(1.0).unwrap()).unwrap();
        assert!((avg[0] - 2.0).abs() < 1e-15);
        let near_max = gem_pool(&m, &GemParams::shared(100.0).unwrap()).unwrap();
        assert!((near_max[0] - 3.0).abs() < 0.05);
        // no overflow for large activations and exponents
        let big = map(vec![vec![1e200, 2e200]]);
        assert!(gem_pool(&big, &GemParams::shared(50.0).unwrap()).unwrap()[0].is_finite());
    }

    #[test]
    fn gem_clamps_zeros_and_exponents() {
        let m = map(vec![vec![0.0, -1.0, 2.0]]);
        let (out, cache) = gem_forward(&m, &GemParams::shared(2.5).unwrap()).unwrap();
        assert_eq!(out, vec![1.0]);
        let g = gem_backward(&cache, &GemParams::shared(2.5).unwrap(), &[1.0]);
        assert_eq!(&g.input[..2], &[0.0, 0.0]);
        let mut p = GemParams::new(vec![0.5, 2.0]).unwrap();
        p.clamp();
        assert_eq!(p.p, vec![1.0, 2.0]);
        assert!(GemParams::new(vec![0.0]).is_err());
        assert!(gem_pool(&m, &GemParams::new(vec![3.0, 3.0]).unwrap()).is_err());
    }

    #[test]
    fn max_pool_routes_to_first_argmax() {
        let m = map(vec![vec![2.0, 5.0, 5.0], vec![-1.0, -3.0, -2.0]]);
        assert_eq!(max_pool(&m), vec![5.0, -1.0]);
        let (_, cache) = max_pool_forward(&m).unwrap();
        let g = max_pool_backward(&cache, &[1.0, 0.0]);
        assert_eq!(g[0], 0.0);
        assert!(g[1] != 0.0);
        assert_eq!(g[2], 0.0);
        assert!(g[3] != 0.0);
        let constant = map(vec![vec![4.0; 5]]);
        assert_eq!(max_pool(&constant), vec![4.0]);
    }
}
