pub mod model;
pub mod annotate;
pub mod viewgraph;
pub mod mining;
pub mod losses;
pub mod aggregate;
pub mod synth;
pub mod retrieval;
pub mod trainer;
