//! Annotation ingest, entailment-pair generation and label hierarchies.

pub mod annotations;
pub mod catalog;
pub mod pairs;
pub mod tree;

pub use annotations::{convert_detection_csv, load_annotations, parse_annotations, BoundingBox, LoadMode, LoadedAnnotations};
pub use catalog::{Catalog, NodeGroup, NodeInfo};
pub use pairs::{
    containment, cross_image_pairs, filter_boxes, generate_pairs, read_pairs_tsv, within_image_pairs,
    write_pairs_tsv, AnnotationIndex, EntailmentPair, PairCounts, PairKind, PairRules, Region,
};
pub use tree::{build_hierarchy_tree, edge_statistics, EdgeStats, HierarchyTree, LabelEdge, TreeBuild};
