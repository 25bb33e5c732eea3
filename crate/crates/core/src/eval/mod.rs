//! Retrieval metrics, distribution alignment, PR curves and norm profiles.

mod norms;
mod ot;
mod pr;
mod protocol;
mod retrieval;

pub use norms::{norm_profile, NormProfile, NormSummary};
pub use ot::{label_distribution, ot_distance, LabelDistribution, OTHER};
pub use pr::{pr_area, pr_curve, threshold_sweep, write_pr_csv, PrCurve, PrPoint};
pub use protocol::{
    dominance_rate, evaluate, ground_truth_labels, node_descendants, radial_order_rate, EvalSettings, MetricsReport,
    QueryReport,
};
pub use retrieval::{
    hierarchical_recall, hit_rate_at_k, mean_hierarchical_recall, rank_candidates, rank_scored, recall_at_k, Averaged,
    Ranked, RetrievalResult, ScoreMode, Scorer,
};
