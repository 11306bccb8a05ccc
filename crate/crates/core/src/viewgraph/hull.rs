use std::cmp::Ordering;

use robust::{orient2d, Coord};

fn coord(p: [f64; 2]) -> Coord<f64> {
    Coord { x: p[0], y: p[1] }
}

/// Counter-clockwise convex hull by Andrew's monotone chain. Collinear points
/// on hull edges are dropped; orientation signs are exact.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.iter().copied().filter(|p| p[0].is_finite() && p[1].is_finite()).collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    let turns_left = |hull: &[[f64; 2]], p: [f64; 2]| {
        let n = hull.len();
        orient2d(coord(hull[n - 2]), coord(hull[n - 1]), coord(p)) > 0.0
    };
    for &p in &pts {
        while hull.len() >= 2 && !turns_left(&hull, p) {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && !turns_left(&hull, p) {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    if hull.len() < 3 {
        // all input points collinear: keep the two extremes
        hull.truncate(2);
    }
    hull
}

/// Area enclosed by the convex hull of `points`; zero when fewer than three
/// non-collinear points are given.
pub fn convex_hull_area(points: &[[f64; 2]]) -> f64 {
    polygon_area(&convex_hull(points))
}

/// Absolute shoelace area of a simple polygon.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    // shift to the first vertex to limit cancellation
    let o = poly[0];
    let twice: f64 = poly
        .windows(2)
        .map(|w| (w[0][0] - o[0]) * (w[1][1] - o[1]) - (w[1][0] - o[0]) * (w[0][1] - o[1]))
        .sum();
    (twice / 2.0).abs()
}

/// Exact-sign point-in-convex-polygon test for a CCW hull (boundary counts).
pub fn hull_contains(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0] == p,
        2 => {
            orient2d(coord(hull[0]), coord(hull[1]), coord(p)) == 0.0
                && (0..2).all(|k| {
                    let (lo, hi) = match hull[0][k].partial_cmp(&hull[1][k]) {
                        Some(Ordering::Greater) => (hull[1][k], hull[0][k]),
                        _ => (hull[0][k], hull[1][k]),
                    };
                    p[k] >= lo && p[k] <= hi
                })
        }
        n => (0..n).all(|i| orient2d(coord(hull[i]), coord(hull[(i + 1) % n]), coord(p)) >= 0.0),
    }
}
