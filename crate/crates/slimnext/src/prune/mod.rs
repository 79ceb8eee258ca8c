//! Structured channel pruning: dependency analysis over the layer graph,
//! zero-invariant group partition, hybrid sparse training, and structural
//! extraction of the surviving subnetwork. Unstructured weight masking
//! lives here too since it shares the sweep/report surface.

pub mod depgraph;
pub mod dhspg;
pub mod extract;
pub mod pzig;
pub mod unstructured;

pub use depgraph::{analyze_dependencies, DependencyGraph, NodeGroup};
pub use dhspg::{crosses_half_space, dhspg_train, DhspgConfig, DhspgReport, Saliency};
pub use extract::{extract_subnetwork, ExtractionSummary};
pub use pzig::{partition_pzigs, PruneGroup, Slice};
pub use unstructured::{
    apply_masks, l1_mask, random_mask, sweep, sweep_csv, MaskMethod, MaskSet, SweepPoint,
};
