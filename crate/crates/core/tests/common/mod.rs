#![allow(dead_code)]

pub mod graphs;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        return norm(&diff);
    }
    norm(&diff) / scale
}

pub fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `base` plus Gaussian noise of scale `sigma`.
pub fn near(rng: &mut impl Rng, base: &[f64], sigma: f64) -> Vec<f64> {
    base.iter()
        .map(|b| {
            let z: f64 = StandardNormal.sample(rng);
            b + sigma * z
        })
        .collect()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// A unit vector at chord distance `d` from unit `q`.
pub fn at_distance(rng: &mut impl Rng, q: &[f64], d: f64) -> Vec<f64> {
    let r = gaussian(rng, q.len());
    let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
    let u = unit(&r.iter().zip(q).map(|(a, b)| a - dot * b).collect::<Vec<_>>());
    let theta = 2.0 * (d / 2.0).asin();
    q.iter().zip(&u).map(|(a, b)| theta.cos() * a + theta.sin() * b).collect()
}
