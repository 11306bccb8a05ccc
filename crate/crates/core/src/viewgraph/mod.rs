//! Weighted view graph over matched image pairs and its normalized-cut
//! partitioning into strongly intra-connected clusters.

mod graph;
mod hull;
mod ncut;

use thiserror::Error;

use crate::model::{ImageId, ImagePair};

pub use graph::{
    build_view_graph, edge_weight, parse_view_graph, write_view_graph, ViewGraph, ViewGraphEdge, DEFAULT_R_EW,
};
pub use hull::{convex_hull, convex_hull_area, hull_contains, polygon_area};
pub use ncut::{ncut_value, normalized_cut, parse_partition, spectral_bisection, write_partition, Partition, DEFAULT_MAX_CLUSTER_SIZE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ViewGraphError {
    #[error("degenerate graph: maximum inlier count {0} is below 2")]
    Degenerate(usize),
    #[error("pair {pair} has {n_inlier} inliers, outside [1, {n_maxinlier}]")]
    InlierCount {
        pair: ImagePair,
        n_inlier: usize,
        n_maxinlier: usize,
    },
    #[error("weighting coefficient {0} outside [0, 1]")]
    InvalidCoefficient(f64),
    #[error("matches reference unknown image {0}")]
    UnknownImage(ImageId),
    #[error("self edge on image {0}")]
    SelfEdge(ImageId),
    #[error("duplicate edge {0}")]
    DuplicateEdge(ImagePair),
    #[error("edge {pair} has weight {weight} outside [0, 1]")]
    WeightOutOfRange { pair: ImagePair, weight: f64 },
    #[error("max cluster size must be at least 2, got {0}")]
    ClusterSize(usize),
    #[error("image {0} assigned to more than one cluster")]
    DuplicateAssignment(ImageId),
}
