use super::{normalize, normalize_backward, AggregateError};

/// Projection `y = W x` over base descriptors, followed by L2 normalization.
/// `weights` is row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl LinearParams {
    /// Identity when square, otherwise the leading identity block.
    pub fn identity(rows: usize, cols: usize) -> Result<Self, AggregateError> {
        if rows == 0 || cols == 0 {
            return Err(AggregateError::InvalidParam("linear head needs positive dimensions".into()));
        }
        let mut weights = vec![0.0; rows * cols];
        for i in 0..rows.min(cols) {
            weights[i * cols + i] = 1.0;
        }
        Ok(Self { rows, cols, weights })
    }
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    input: Vec<f64>,
    out: Vec<f64>,
    out_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub weights: Vec<f64>,
    pub input: Vec<f64>,
}

pub fn linear_forward(x: &[f64], p: &LinearParams) -> Result<(Vec<f64>, LinearCache), AggregateError> {
    if x.len() != p.cols {
        return Err(AggregateError::DimensionMismatch {
            expected: p.cols,
            found: x.len(),
        });
    }
    let y: Vec<f64> = p
        .weights
        .chunks(p.cols)
        .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
        .collect();
    let normalized = normalize(y)?;
    Ok((
        normalized.out.clone(),
        LinearCache {
            input: x.to_vec(),
            out: normalized.out,
            out_norm: normalized.norm,
        },
    ))
}

pub fn linear_backward(cache: &LinearCache, p: &LinearParams, upstream: &[f64]) -> LinearGrads {
    let g_y = normalize_backward(&cache.out, cache.out_norm, upstream);
    let mut weights = vec![0.0; p.rows * p.cols];
    let mut input = vec![0.0; p.cols];
    for (r, gy) in g_y.iter().enumerate() {
        let row = &p.weights[r * p.cols..(r + 1) * p.cols];
        for c in 0..p.cols {
            weights[r * p.cols + c] = gy * cache.input[c];
            input[c] += gy * row[c];
        }
    }
    LinearGrads { weights, input }
}
