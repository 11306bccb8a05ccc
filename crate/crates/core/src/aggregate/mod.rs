//! Differentiable aggregation heads.
//!
//! Every head maps one input (a dense feature map, or a base descriptor for the
//! linear head) to an L2-normalized global descriptor, and back-propagates an
//! upstream gradient to its parameters and its input. Parameters are exposed
//! as one flat vector so optimizers stay head-agnostic.

mod linear;
mod netvlad;
mod pooling;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{decode_matrix, encode_matrix, FeatureMap, FormatError};

pub use linear::{linear_backward, linear_forward, LinearCache, LinearGrads, LinearParams};
pub use netvlad::{
    kmeans, netvlad_backward, netvlad_forward, netvlad_init, sample_local_features, NetVladCache, NetVladGrads,
    NetVladParams, DEFAULT_CLUSTERS, DEFAULT_SHARPNESS, KMEANS_MAX_ITERS,
};
pub use pooling::{
    gem_backward, gem_forward, gem_pool, max_pool, max_pool_backward, max_pool_forward, GemCache, GemGrads,
    GemParams, MaxPoolCache, GEM_CLAMP, GEM_INITIAL_P,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregateError {
    #[error("input has {found} channels, head expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("k-means needs at least {k} samples, got {samples}")]
    TooFewSamples { samples: usize, k: usize },
    #[error("invalid head parameter: {0}")]
    InvalidParam(String),
    #[error("{0} head needs a {1} input")]
    WrongInput(HeadKind, &'static str),
    #[error("descriptor has zero norm")]
    ZeroNorm,
    #[error("parameter file: {0}")]
    ParamsFile(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    NetVlad,
    Gem,
    Max,
    Linear,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::NetVlad => "netvlad",
            HeadKind::Gem => "gem",
            HeadKind::Max => "max",
            HeadKind::Linear => "linear",
        }
    }

    /// Whether the head consumes feature maps (as opposed to base descriptors).
    pub fn takes_maps(self) -> bool {
        self != HeadKind::Linear
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = AggregateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "netvlad" => Ok(HeadKind::NetVlad),
            "gem" => Ok(HeadKind::Gem),
            "max" => Ok(HeadKind::Max),
            "linear" => Ok(HeadKind::Linear),
            other => Err(AggregateError::InvalidParam(format!("unknown head {other:?}"))),
        }
    }
}

/// A unit-norm global descriptor with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub vector: Vec<f64>,
    pub kind: HeadKind,
    pub source: String,
}

/// L2 normalization that remembers what its backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Normalized {
    pub out: Vec<f64>,
    pub norm: f64,
}

pub(crate) fn normalize(v: Vec<f64>) -> Result<Normalized, AggregateError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(AggregateError::ZeroNorm);
    }
    Ok(Normalized {
        out: v.into_iter().map(|x| x / norm).collect(),
        norm,
    })
}

/// Gradient through `out = v / |v|`: `(g - out (out . g)) / |v|`.
pub(crate) fn normalize_backward(out: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    let dot: f64 = out.iter().zip(g).map(|(o, gi)| o * gi).sum();
    out.iter().zip(g).map(|(o, gi)| (gi - o * dot) / norm).collect()
}

/// Input of one head evaluation.
#[derive(Debug, Clone, Copy)]
pub enum HeadInput<'a> {
    Map(&'a FeatureMap),
    Vector(&'a [f64]),
}

/// Cached forward state of any head.
#[derive(Debug, Clone)]
pub enum HeadCache {
    NetVlad(NetVladCache),
    Gem(GemCache),
    Max(MaxPoolCache),
    Linear(LinearCache),
}

/// Trainable aggregation head.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    NetVlad(NetVladParams),
    Gem(GemParams),
    Max,
    Linear(LinearParams),
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::NetVlad(_) => HeadKind::NetVlad,
            Head::Gem(_) => HeadKind::Gem,
            Head::Max => HeadKind::Max,
            Head::Linear(_) => HeadKind::Linear,
        }
    }

    /// Length of the input the head expects per pixel or per descriptor, when fixed.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Head::NetVlad(p) => Some(p.dim),
            Head::Gem(p) if p.p.len() > 1 => Some(p.p.len()),
            Head::Gem(_) | Head::Max => None,
            Head::Linear(p) => Some(p.cols),
        }
    }

    pub fn forward(&self, input: HeadInput<'_>) -> Result<(Vec<f64>, HeadCache), AggregateError> {
        match (self, input) {
            (Head::NetVlad(p), HeadInput::Map(m)) => netvlad_forward(m, p).map(|(d, c)| (d, HeadCache::NetVlad(c))),
            (Head::Gem(p), HeadInput::Map(m)) => gem_forward(m, p).map(|(d, c)| (d, HeadCache::Gem(c))),
            (Head::Max, HeadInput::Map(m)) => max_pool_forward(m).map(|(d, c)| (d, HeadCache::Max(c))),
            (Head::Linear(p), HeadInput::Vector(v)) => linear_forward(v, p).map(|(d, c)| (d, HeadCache::Linear(c))),
            (Head::Linear(_), HeadInput::Map(_)) => Err(AggregateError::WrongInput(HeadKind::Linear, "descriptor")),
            (head, HeadInput::Vector(_)) => Err(AggregateError::WrongInput(head.kind(), "feature map")),
        }
    }

    /// Forward pass wrapped as a [`GlobalDescriptor`].
    pub fn describe(&self, source: &str, input: HeadInput<'_>) -> Result<GlobalDescriptor, AggregateError> {
        Ok(GlobalDescriptor {
            vector: self.forward(input)?.0,
            kind: self.kind(),
            source: source.to_string(),
        })
    }

    /// Flat parameter gradient for `upstream` (gradient w.r.t. the output).
    pub fn backward(&self, cache: &HeadCache, upstream: &[f64]) -> Vec<f64> {
        match (self, cache) {
            (Head::NetVlad(p), HeadCache::NetVlad(c)) => netvlad_backward(c, p, upstream).flat(),
            (Head::Gem(p), HeadCache::Gem(c)) => gem_backward(c, p, upstream).p,
            (Head::Max, HeadCache::Max(_)) => Vec::new(),
            (Head::Linear(p), HeadCache::Linear(c)) => linear_backward(c, p, upstream).weights,
            _ => panic!("cache does not belong to a {} head", self.kind()),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Head::NetVlad(p) => 2 * p.k * p.dim + p.k,
            Head::Gem(p) => p.p.len(),
            Head::Max => 0,
            Head::Linear(p) => p.rows * p.cols,
        }
    }

    /// Parameters in the order used by [`Head::backward`].
    pub fn params(&self) -> Vec<f64> {
        match self {
            Head::NetVlad(p) => p.centers.iter().chain(&p.weights).chain(&p.bias).copied().collect(),
            Head::Gem(p) => p.p.clone(),
            Head::Max => Vec::new(),
            Head::Linear(p) => p.weights.clone(),
        }
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "parameter vector length");
        match self {
            Head::NetVlad(p) => {
                let kd = p.k * p.dim;
                p.centers.copy_from_slice(&flat[..kd]);
                p.weights.copy_from_slice(&flat[kd..2 * kd]);
                p.bias.copy_from_slice(&flat[2 * kd..]);
            }
            Head::Gem(p) => p.p.copy_from_slice(flat),
            Head::Max => {}
            Head::Linear(p) => p.weights.copy_from_slice(flat),
        }
    }

    /// Restores parameter constraints after an update.
    pub fn project(&mut self) {
        if let Head::Gem(p) = self {
            p.clamp();
        }
    }

    /// One-line `PFHEAD` description of the head's kind and shape.
    pub fn header(&self) -> String {
        match self {
            Head::NetVlad(p) => format!(
                "PFHEAD netvlad k={} dim={} sharpness={:?} intra={}",
                p.k, p.dim, p.sharpness, p.intra_norm
            ),
            Head::Gem(p) => format!("PFHEAD gem channels={}", p.p.len()),
            Head::Max => "PFHEAD max".to_string(),
            Head::Linear(p) => format!("PFHEAD linear rows={} cols={}", p.rows, p.cols),
        }
    }
}

/// Serializes a head as one text header line followed by a descriptor-format
/// matrix holding the flat parameters (a `0 x 1` matrix for max pooling).
pub fn encode_head(head: &Head) -> Vec<u8> {
    let mut out = head.header().into_bytes();
    out.push(b'\n');
    let flat = head.params();
    if flat.is_empty() {
        out.extend(encode_matrix(0, 1, &[]));
    } else {
        out.extend(encode_matrix(1, flat.len(), &flat));
    }
    out
}

pub fn decode_head(bytes: &[u8]) -> Result<Head, AggregateError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| AggregateError::ParamsFile("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| AggregateError::ParamsFile("header is not UTF-8".into()))?;
    let mut head = head_from_header(header)?;
    let (_, _, flat) = decode_matrix(&bytes[nl + 1..])?;
    load_params(&mut head, &flat)?;
    Ok(head)
}

/// Sets the flat parameters of `head` after checking their count and constraints.
pub fn load_params(head: &mut Head, flat: &[f64]) -> Result<(), AggregateError> {
    if flat.len() != head.param_count() {
        return Err(AggregateError::ParamsFile(format!(
            "{} head needs {} parameters, found {}",
            head.kind(),
            head.param_count(),
            flat.len()
        )));
    }
    if let Head::Gem(_) = head {
        if flat.iter().any(|&v| !(v > 0.0)) {
            return Err(AggregateError::ParamsFile("GeM exponents must be positive".into()));
        }
    }
    head.set_params(flat);
    Ok(())
}

/// A head of the shape described by a `PFHEAD` line, with default parameters.
pub fn head_from_header(header: &str) -> Result<Head, AggregateError> {
    let bad = |m: String| AggregateError::ParamsFile(m);
    let mut fields = header.split_whitespace();
    if fields.next() != Some("PFHEAD") {
        return Err(bad("header must start with PFHEAD".into()));
    }
    let kind: HeadKind = fields.next().ok_or_else(|| bad("missing head kind".into()))?.parse()?;
    let mut kv = std::collections::BTreeMap::new();
    for f in fields {
        let (k, v) = f.split_once('=').ok_or_else(|| bad(format!("malformed field {f:?}")))?;
        kv.insert(k, v);
    }
    fn get<T: FromStr>(kv: &std::collections::BTreeMap<&str, &str>, key: &str) -> Result<T, AggregateError> {
        kv.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| AggregateError::ParamsFile(format!("missing or invalid {key}")))
    }
    Ok(match kind {
        HeadKind::NetVlad => {
            let (k, dim): (usize, usize) = (get(&kv, "k")?, get(&kv, "dim")?);
            let mut p = NetVladParams::zeros(k, dim, get(&kv, "sharpness")?)?;
            p.intra_norm = get(&kv, "intra")?;
            Head::NetVlad(p)
        }
        HeadKind::Gem => Head::Gem(GemParams::new(vec![GEM_INITIAL_P; get(&kv, "channels")?])?),
        HeadKind::Max => Head::Max,
        HeadKind::Linear => Head::Linear(LinearParams::identity(get(&kv, "rows")?, get(&kv, "cols")?)?),
    })
}
