use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;

use super::hull::convex_hull_area;
use super::ViewGraphError;
use crate::model::{text_lines, Correspondence, FormatError, ImageId, ImagePair, ImageRecord, MatchSet, Reconstruction};

/// Default weighting between inlier count and match coverage.
pub const DEFAULT_R_EW: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewGraphEdge {
    pub pair: ImagePair,
    pub n_inlier: usize,
    pub w_inlier: f64,
    pub w_overlap: f64,
    pub weight: f64,
}

/// Weighted undirected graph over images whose edges are matched pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGraph {
    vertices: Vec<ImageId>,
    edges: Vec<ViewGraphEdge>,
    r_ew: f64,
    n_maxinlier: usize,
}

impl ViewGraph {
    pub fn vertices(&self) -> &[ImageId] {
        &self.vertices
    }

    pub fn edges(&self) -> &[ViewGraphEdge] {
        &self.edges
    }

    pub fn r_ew(&self) -> f64 {
        self.r_ew
    }

    pub fn n_maxinlier(&self) -> usize {
        self.n_maxinlier
    }

    /// Builds a graph from raw weighted edges, e.g. for partitioning graphs
    /// that did not come from matches. Vertices are the union of `vertices`
    /// and all edge endpoints.
    pub fn from_weighted_edges(
        vertices: impl IntoIterator<Item = ImageId>,
        edges: impl IntoIterator<Item = (ImageId, ImageId, f64)>,
    ) -> Result<Self, ViewGraphError> {
        let mut verts: BTreeSet<ImageId> = vertices.into_iter().collect();
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for (a, b, w) in edges {
            let pair = ImagePair::new(a, b).ok_or(ViewGraphError::SelfEdge(a))?;
            if !(w.is_finite() && (0.0..=1.0).contains(&w)) {
                return Err(ViewGraphError::WeightOutOfRange { pair, weight: w });
            }
            if !seen.insert(pair) {
                return Err(ViewGraphError::DuplicateEdge(pair));
            }
            verts.insert(a);
            verts.insert(b);
            out.push(ViewGraphEdge {
                pair,
                n_inlier: 0,
                w_inlier: w,
                w_overlap: w,
                weight: w,
            });
        }
        out.sort_by_key(|e| e.pair);
        Ok(Self {
            vertices: verts.into_iter().collect(),
            edges: out,
            r_ew: DEFAULT_R_EW,
            n_maxinlier: 0,
        })
    }
}

fn check_r_ew(r_ew: f64) -> Result<(), ViewGraphError> {
    if !(0.0..=1.0).contains(&r_ew) {
        return Err(ViewGraphError::InvalidCoefficient(r_ew));
    }
    Ok(())
}

/// Weight of one matched pair from its inlier count and the convex-hull
/// coverage of its inliers on both images.
pub fn edge_weight(
    pair: ImagePair,
    correspondences: &[Correspondence],
    image_i: &ImageRecord,
    image_j: &ImageRecord,
    n_maxinlier: usize,
    r_ew: f64,
) -> Result<ViewGraphEdge, ViewGraphError> {
    check_r_ew(r_ew)?;
    if n_maxinlier < 2 {
        return Err(ViewGraphError::Degenerate(n_maxinlier));
    }
    let n_inlier = correspondences.len();
    if n_inlier == 0 || n_inlier > n_maxinlier {
        return Err(ViewGraphError::InlierCount {
            pair,
            n_inlier,
            n_maxinlier,
        });
    }
    let w_inlier = (n_inlier as f64).ln() / (n_maxinlier as f64).ln();
    let pts_i: Vec<[f64; 2]> = correspondences.iter().map(|c| [c.xi, c.yi]).collect();
    let pts_j: Vec<[f64; 2]> = correspondences.iter().map(|c| [c.xj, c.yj]).collect();
    let hulls = convex_hull_area(&pts_i) + convex_hull_area(&pts_j);
    let w_overlap = (hulls / (image_i.area() + image_j.area())).clamp(0.0, 1.0);
    Ok(ViewGraphEdge {
        pair,
        n_inlier,
        w_inlier,
        w_overlap,
        weight: r_ew * w_inlier + (1.0 - r_ew) * w_overlap,
    })
}

/// One edge per matched pair with at least one inlier. The maximum inlier
/// count is taken over all pairs before any weight is computed.
pub fn build_view_graph(matches: &MatchSet, r: &Reconstruction, r_ew: f64) -> Result<ViewGraph, ViewGraphError> {
    check_r_ew(r_ew)?;
    let mut pairs = Vec::with_capacity(matches.len());
    for (pair, corr) in matches.iter() {
        let lookup = |id| r.image(id).ok_or(ViewGraphError::UnknownImage(id));
        let (img_i, img_j) = (lookup(pair.lo())?, lookup(pair.hi())?);
        if !corr.is_empty() {
            pairs.push((pair, corr, img_i, img_j));
        }
    }
    let n_maxinlier = pairs.iter().map(|p| p.1.len()).max().unwrap_or(0);
    let edges = pairs
        .par_iter()
        .map(|&(pair, corr, img_i, img_j)| edge_weight(pair, corr, img_i, img_j, n_maxinlier, r_ew))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ViewGraph {
        vertices: r.images().iter().map(|i| i.id).collect::<BTreeSet<_>>().into_iter().collect(),
        edges,
        r_ew,
        n_maxinlier,
    })
}

/// Graph file: a `VIEWGRAPH <r_ew> <n_maxinlier>` record, `VERTEX <id>` records
/// and `EDGE <id_i> <id_j> <n_inlier> <w_inlier> <w_overlap> <weight>` records.
pub fn write_view_graph(g: &ViewGraph) -> String {
    let mut out = String::from("# pairforge view graph v1\n");
    let _ = writeln!(out, "VIEWGRAPH {:?} {}", g.r_ew, g.n_maxinlier);
    for v in &g.vertices {
        let _ = writeln!(out, "VERTEX {v}");
    }
    for e in &g.edges {
        let _ = writeln!(
            out,
            "EDGE {} {} {} {:?} {:?} {:?}",
            e.pair.lo(),
            e.pair.hi(),
            e.n_inlier,
            e.w_inlier,
            e.w_overlap,
            e.weight
        );
    }
    out
}

pub fn parse_view_graph(input: &str) -> Result<ViewGraph, FormatError> {
    let mut r_ew = DEFAULT_R_EW;
    let mut declared_max = None;
    let mut vertices = BTreeSet::new();
    let mut edges = Vec::new();
    let mut seen = BTreeSet::new();
    for line in text_lines(input) {
        let head = line.tokens[0];
        match head.text {
            "VIEWGRAPH" => {
                line.expect_len(3)?;
                r_ew = line.finite(1, "r_ew")?;
                if !(0.0..=1.0).contains(&r_ew) {
                    return Err(line.error(line.tokens[1].column, "r_ew outside [0, 1]"));
                }
                declared_max = Some(line.field::<usize>(2, "n_maxinlier")?);
            }
            "VERTEX" => {
                line.expect_len(2)?;
                vertices.insert(ImageId(line.field(1, "image_id")?));
            }
            "EDGE" => {
                line.expect_len(7)?;
                let a = ImageId(line.field(1, "id_i")?);
                let b = ImageId(line.field(2, "id_j")?);
                let pair = ImagePair::new(a, b).ok_or_else(|| line.error(line.tokens[2].column, "self edge"))?;
                if !seen.insert(pair) {
                    return Err(line.error(head.column, format!("duplicate edge {pair}")));
                }
                let n_inlier: usize = line.field(3, "n_inlier")?;
                let mut w = [0.0; 3];
                for (k, what) in ["w_inlier", "w_overlap", "weight"].iter().enumerate() {
                    w[k] = line.finite(4 + k, what)?;
                    if !(0.0..=1.0).contains(&w[k]) {
                        return Err(line.error(line.tokens[4 + k].column, format!("{what} outside [0, 1]")));
                    }
                }
                vertices.insert(a);
                vertices.insert(b);
                edges.push(ViewGraphEdge {
                    pair,
                    n_inlier,
                    w_inlier: w[0],
                    w_overlap: w[1],
                    weight: w[2],
                });
            }
            other => return Err(line.error(head.column, format!("unknown record {other:?}"))),
        }
    }
    let n_maxinlier = edges.iter().map(|e| e.n_inlier).max().unwrap_or(0);
    if let Some(declared) = declared_max {
        if declared != n_maxinlier {
            return Err(FormatError::DimensionMismatch(format!(
                "graph declares n_maxinlier {declared} but its edges peak at {n_maxinlier}"
            )));
        }
    }
    Ok(ViewGraph {
        vertices: vertices.into_iter().collect(),
        edges,
        r_ew,
        n_maxinlier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_matches, parse_reconstruction, SceneId};

    fn image(id: u32, w: u32, h: u32) -> ImageRecord {
        ImageRecord {
            id: ImageId(id),
            scene: SceneId(0),
            name: format!("i{id}"),
            width_px: w,
            height_px: h,
        }
    }

    fn square(n: usize, side: f64) -> Vec<Correspondence> {
        // n >= 4 points spanning a side x side square anchored at the origin.
        let corners = [[0.0, 0.0], [side, 0.0], [side, side], [0.0, side]];
        (0..n)
            .map(|k| {
                let [x, y] = if k < 4 { corners[k] } else { [side / 2.0, side / 2.0] };
                Correspondence { xi: x, yi: y, xj: x, yj: y }
            })
            .collect()
    }

    fn pair() -> ImagePair {
        ImagePair::new(ImageId(0), ImageId(1)).unwrap()
    }

    #[test]
    fn inlier_weight_is_log_ratio() {
        let (a, b) = (image(0, 100, 100), image(1, 100, 100));
        let e = edge_weight(pair(), &square(100, 10.0), &a, &b, 10_000, 0.5).unwrap();
        assert!((e.w_inlier - 0.5).abs() < 1e-15);
        let e = edge_weight(pair(), &square(40, 10.0), &a, &b, 40, 0.5).unwrap();
        assert_eq!(e.w_inlier, 1.0);
    }

    #[test]
    fn quarter_hulls_give_quarter_overlap() {
        let (a, b) = (image(0, 100, 80), image(1, 100, 80));
        // each hull covers 50 x 40 = a quarter of its image
        let corr: Vec<_> = [[0.0, 0.0], [50.0, 0.0], [50.0, 40.0], [0.0, 40.0]]
            .iter()
            .map(|p| Correspondence { xi: p[0], yi: p[1], xj: p[0] + 50.0, yj: p[1] + 40.0 })
            .collect();
        let e = edge_weight(pair(), &corr, &a, &b, 10, 0.3).unwrap();
        assert!((e.w_overlap - 0.25).abs() < 1e-15);
        let expected = 0.3 * e.w_inlier + 0.7 * 0.25;
        assert!((e.weight - expected).abs() < 1e-12);
    }

    #[test]
    fn degenerate_max_is_rejected() {
        let (a, b) = (image(0, 10, 10), image(1, 10, 10));
        assert!(matches!(
            edge_weight(pair(), &square(1, 1.0), &a, &b, 1, 0.5),
            Err(ViewGraphError::Degenerate(1))
        ));
        assert!(edge_weight(pair(), &[], &a, &b, 5, 0.5).is_err());
        assert!(edge_weight(pair(), &square(6, 1.0), &a, &b, 5, 0.5).is_err());
        assert!(edge_weight(pair(), &square(4, 1.0), &a, &b, 5, 1.5).is_err());
    }

    #[test]
    fn weight_is_monotone_in_inliers() {
        let (a, b) = (image(0, 10, 10), image(1, 10, 10));
        let mut last = -1.0;
        for n in 4..60 {
            let e = edge_weight(pair(), &square(n, 5.0), &a, &b, 60, 0.5).unwrap();
            assert!(e.weight >= last);
            assert!((0.0..=1.0).contains(&e.weight));
            last = e.weight;
        }
    }

    const RECON: &str = "SCENE 0 s\nIMAGE 1 0 a 10 10\nIMAGE 2 0 b 10 10\nIMAGE 3 0 c 10 10\n";

    #[test]
    fn single_pair_graph_has_unit_inlier_weight() {
        let r = parse_reconstruction(RECON).unwrap();
        let m = parse_matches("PAIR 1 2 3\n0 0 0 0\n5 0 5 0\n5 5 5 5\nPAIR 1 3 0\n").unwrap();
        let g = build_view_graph(&m, &r, 0.5).unwrap();
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.edges()[0].w_inlier, 1.0);
        assert_eq!(g.n_maxinlier(), 3);
        assert_eq!(g.vertices().len(), 3);

        let g = build_view_graph(&MatchSet::new(), &r, 0.5).unwrap();
        assert!(g.edges().is_empty());

        let m = parse_matches("PAIR 1 7 0\n").unwrap();
        assert!(matches!(build_view_graph(&m, &r, 0.5), Err(ViewGraphError::UnknownImage(ImageId(7)))));
    }

    #[test]
    fn graph_file_round_trip() {
        let r = parse_reconstruction(RECON).unwrap();
        let m = parse_matches("PAIR 1 2 3\n0 0 0 0\n5 0 5 0\n5 5 5 5\nPAIR 2 3 2\n1 1 1 1\n2 2 2 2\n").unwrap();
        let g = build_view_graph(&m, &r, 0.25).unwrap();
        let back = parse_view_graph(&write_view_graph(&g)).unwrap();
        assert_eq!(back, g);
        assert!(parse_view_graph("EDGE 1 1 2 0.5 0.5 0.5\n").is_err());
        assert!(parse_view_graph("EDGE 1 2 2 0.5 1.5 0.5\n").is_err());
        assert!(parse_view_graph("VIEWGRAPH 0.5 9\nEDGE 1 2 2 0.5 0.5 0.5\n").is_err());
    }
}
