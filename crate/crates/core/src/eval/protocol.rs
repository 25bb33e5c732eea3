//! End-to-end evaluation of an embedding table against the catalog, the
//! label hierarchy and the entailment pairs it was trained on.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::norms::{norm_profile, NormProfile};
use super::ot::{label_distribution, ot_distance};
use super::pr::{pr_area, pr_curve, threshold_sweep, write_pr_csv, PrCurve};
use super::retrieval::{hierarchical_recall, recall_at_k, Averaged, RetrievalResult, ScoreMode, Scorer};
use crate::data::{Catalog, EntailmentPair, HierarchyTree, NodeInfo};
use crate::error::{Error, Result};
use crate::geometry::SpaceKind;
use crate::loss::Direction;
use crate::trainer::EmbeddingTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// Cutoffs for same-class Recall@k.
    pub ks: Vec<usize>,
    /// Extra fixed cutoffs for hierarchical recall; the exhaustive cutoff
    /// (ground-truth size per query) is always reported.
    pub large_ks: Vec<usize>,
    pub sweep_steps: usize,
    pub mode: ScoreMode,
    /// Cap on (query, candidate) pairs scored for the PR curve; above it
    /// each query scores an equal-sized random subset of its candidates.
    pub max_pr_pairs: usize,
    pub norm_bins: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            ks: vec![1, 5, 10],
            large_ks: Vec::new(),
            sweep_steps: 100,
            mode: ScoreMode::Angle,
            max_pr_pairs: 200_000,
            norm_bins: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub query_id: String,
    pub ground_truth: usize,
    /// At cutoff = ground-truth size.
    pub hierarchical_recall: Option<f64>,
    pub hierarchical_recall_at: BTreeMap<usize, f64>,
    pub ot_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub space: SpaceKind,
    pub mode: ScoreMode,
    pub nodes: usize,
    pub queries: Vec<QueryReport>,
    pub hierarchical_recall: Averaged,
    pub hierarchical_recall_at: BTreeMap<usize, Averaged>,
    pub ot_distance: Option<f64>,
    /// Scenes retrieving boxes: a box counts if its label is in the scene.
    pub recall_at_k_parent_to_child: BTreeMap<usize, Averaged>,
    /// Boxes retrieving scenes: a scene counts if it contains the box label.
    pub recall_at_k_child_to_parent: BTreeMap<usize, Averaged>,
    pub pr_curve: PrCurve,
    pub pr_area: f64,
    /// Share of entailment pairs whose child outscores every non-descendant
    /// of the parent.
    pub dominance: Option<f64>,
    /// Share of entailment pairs with a larger child norm than parent norm.
    pub radial_order: Option<f64>,
    pub norms: NormProfile,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn write_pr_csv<W: Write>(&self, w: &mut W, name: &str) -> std::io::Result<()> {
        write_pr_csv(w, &[(name.to_string(), self.pr_curve.clone())])
    }
}

/// Label sets that make a candidate a hierarchical match for `query`.
pub fn ground_truth_labels(query: &NodeInfo, tree: &HierarchyTree) -> BTreeSet<String> {
    match &query.label {
        Some(label) => tree.descendants(&std::iter::once(label.clone()).collect()),
        None => {
            let mut labels = query.contains.clone();
            labels.extend(tree.descendants(&query.contains));
            labels
        }
    }
}

/// Node-level transitive closure of `pairs`, keyed by parent row.
pub fn node_descendants(pairs: &[(usize, usize)]) -> HashMap<usize, HashSet<usize>> {
    let mut children: HashMap<usize, Vec<usize>> = HashMap::new();
    for &(p, c) in pairs {
        children.entry(p).or_default().push(c);
    }
    let mut out = HashMap::new();
    for &p in children.keys() {
        let mut seen = HashSet::new();
        let mut stack = children[&p].clone();
        while let Some(n) = stack.pop() {
            if seen.insert(n) {
                if let Some(next) = children.get(&n) {
                    stack.extend(next.iter().copied());
                }
            }
        }
        out.insert(p, seen);
    }
    out
}

/// Fraction of `pairs` whose child scores a higher `beta1` from the parent
/// than every other node outside the parent's descendants.
pub fn dominance_rate(scorer: &Scorer<'_>, pairs: &[(usize, usize)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let descendants = node_descendants(pairs);
    let n = scorer.table().len();
    let parents: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    let best_other: HashMap<usize, f64> = parents
        .par_iter()
        .map(|&p| {
            let desc = &descendants[&p];
            let best = (0..n)
                .filter(|&y| y != p && !desc.contains(&y))
                .map(|y| scorer.beta1(p, y))
                .fold(f64::NEG_INFINITY, f64::max);
            (p, best)
        })
        .collect();
    let ok = pairs
        .iter()
        .filter(|&&(p, c)| scorer.beta1(p, c) > best_other[&p])
        .count();
    Some(ok as f64 / pairs.len() as f64)
}

/// Fraction of `pairs` with `|child| > |parent|` in tangent norm.
pub fn radial_order_rate(table: &EmbeddingTable, pairs: &[(usize, usize)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let ok = pairs
        .iter()
        .filter(|&&(p, c)| table.tangent_norm(c) > table.tangent_norm(p))
        .count();
    Some(ok as f64 / pairs.len() as f64)
}

fn index_pairs(table: &EmbeddingTable, pairs: &[EntailmentPair]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = pairs
        .iter()
        .filter_map(|p| Some((table.index_of(&p.parent_id)?, table.index_of(&p.child_id)?)))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// All of `candidates` when they fit in `budget`, otherwise a seeded
/// uniform subset of that size.
fn sample_candidates(candidates: &[usize], budget: usize, seed: u64, position: usize) -> impl Iterator<Item = usize> + '_ {
    let chosen: Vec<usize> = if candidates.len() <= budget {
        (0..candidates.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (position as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut picked = rand::seq::index::sample(&mut rng, candidates.len(), budget).into_vec();
        picked.sort_unstable();
        picked
    };
    chosen.into_iter().map(move |i| candidates[i])
}

fn label_counts<'a>(ids: impl IntoIterator<Item = &'a str>, catalog: &Catalog) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for id in ids {
        let label = catalog
            .get(id)
            .and_then(|n| n.label.clone())
            .unwrap_or_else(|| super::ot::OTHER.to_string());
        *counts.entry(label).or_insert(0) += 1;
    }
    counts
}

/// Run every metric for `table`. Query and candidate nodes are the catalog
/// nodes present in the table; `pairs` supplies the entailment relation
/// for the PR curve and the dominance and radial-order rates.
pub fn evaluate(
    table: &EmbeddingTable,
    catalog: &Catalog,
    tree: &HierarchyTree,
    pairs: &[EntailmentPair],
    settings: &EvalSettings,
) -> Result<MetricsReport> {
    let scorer = Scorer::new(table);
    let nodes: Vec<(&NodeInfo, usize)> = catalog
        .iter()
        .filter_map(|n| table.index_of(&n.id).map(|i| (n, i)))
        .collect();
    if nodes.is_empty() {
        return Err(Error::invalid("no catalog node has an embedding"));
    }
    let scenes: Vec<usize> = nodes.iter().filter(|(n, _)| n.is_scene()).map(|&(_, i)| i).collect();
    let boxes: Vec<usize> = nodes.iter().filter(|(n, _)| !n.is_scene()).map(|&(_, i)| i).collect();
    let max_k = settings.ks.iter().copied().max().unwrap_or(0);

    // hierarchical retrieval: every node queries the box pool
    let per_query_budget = (settings.max_pr_pairs / nodes.len()).max(1);
    let (queries, scored): (Vec<QueryReport>, Vec<Vec<(f64, bool)>>) = nodes
        .par_iter()
        .enumerate()
        .map(|(position, &(node, q))| {
            let gt_labels = ground_truth_labels(node, tree);
            let candidates: Vec<usize> = boxes.iter().copied().filter(|&j| j != q).collect();
            let gt: BTreeSet<String> = candidates
                .iter()
                .filter(|&&j| {
                    let label = catalog.get(table.id(j)).and_then(|n| n.label.as_ref());
                    label.is_some_and(|l| gt_labels.contains(l))
                })
                .map(|&j| table.id(j).to_string())
                .collect();
            let exhaustive = gt.len();
            let cutoff = settings.large_ks.iter().copied().chain([exhaustive]).max().unwrap_or(0);
            let result = scorer.rank(q, &candidates, Direction::ParentToChild, settings.mode, cutoff);
            let recall_at = settings
                .large_ks
                .iter()
                .filter_map(|&k| Some((k, hierarchical_recall(&result, &gt, k)?)))
                .collect();
            let ot = if gt.is_empty() {
                None
            } else {
                let labels: Vec<String> = gt_labels.iter().cloned().collect();
                let h = label_distribution(&labels, &label_counts(gt.iter().map(String::as_str), catalog));
                let r = label_distribution(
                    &labels,
                    &label_counts(result.top(exhaustive).iter().map(|r| r.id.as_str()), catalog),
                );
                match (h, r) {
                    (Ok(h), Ok(r)) => ot_distance(&h, &r).ok(),
                    _ => None,
                }
            };
            let scored = sample_candidates(&candidates, per_query_budget, settings.seed, position)
                .map(|j| {
                    let score = scorer.score(q, j, Direction::ParentToChild, settings.mode);
                    (score, gt.contains(table.id(j)))
                })
                .collect();
            let report = QueryReport {
                query_id: node.id.clone(),
                ground_truth: exhaustive,
                hierarchical_recall: hierarchical_recall(&result, &gt, exhaustive),
                hierarchical_recall_at: recall_at,
                ot_distance: ot,
            };
            (report, scored)
        })
        .unzip();

    let hier = Averaged::from_options(queries.iter().map(|q| q.hierarchical_recall));
    let hier_at = settings
        .large_ks
        .iter()
        .map(|&k| {
            let values = queries.iter().map(|q| q.hierarchical_recall_at.get(&k).copied());
            (k, Averaged::from_options(values))
        })
        .collect();
    let ots: Vec<f64> = queries.iter().filter_map(|q| q.ot_distance).collect();
    let ot_mean = (!ots.is_empty()).then(|| ots.iter().sum::<f64>() / ots.len() as f64);

    // same-class retrieval between scenes and boxes
    let contains = |scene: &str, object: &str| {
        let (Some(s), Some(o)) = (catalog.get(scene), catalog.get(object)) else {
            return false;
        };
        o.label.as_ref().is_some_and(|l| s.contains.contains(l))
    };
    let p2c_results: Vec<RetrievalResult> = scenes
        .par_iter()
        .map(|&q| scorer.rank(q, &boxes, Direction::ParentToChild, settings.mode, max_k))
        .collect();
    let c2p_results: Vec<RetrievalResult> = boxes
        .par_iter()
        .map(|&q| scorer.rank(q, &scenes, Direction::ChildToParent, settings.mode, max_k))
        .collect();
    let p2c_recall = settings
        .ks
        .iter()
        .map(|&k| (k, recall_at_k(&p2c_results, k, |q, c| contains(q, c))))
        .collect();
    let c2p_recall = settings
        .ks
        .iter()
        .map(|&k| (k, recall_at_k(&c2p_results, k, |q, c| contains(c, q))))
        .collect();

    let scored: Vec<(f64, bool)> = scored.into_iter().flatten().collect();
    let pr = if !scored.iter().any(|&(_, positive)| positive) {
        PrCurve {
            points: Vec::new(),
            positives: 0,
            negatives: scored.len(),
            empty_prediction_precision: 1.0,
        }
    } else {
        pr_curve(&scored, &threshold_sweep(settings.mode, settings.sweep_steps))?
    };
    let positives = index_pairs(table, pairs);
    let groups: BTreeMap<String, String> = nodes
        .iter()
        .map(|(n, _)| (n.id.clone(), n.group.as_str().to_string()))
        .collect();

    Ok(MetricsReport {
        space: table.space,
        mode: settings.mode,
        nodes: nodes.len(),
        hierarchical_recall: hier,
        hierarchical_recall_at: hier_at,
        ot_distance: ot_mean,
        queries,
        recall_at_k_parent_to_child: p2c_recall,
        recall_at_k_child_to_parent: c2p_recall,
        pr_area: pr_area(&pr),
        pr_curve: pr,
        dominance: dominance_rate(&scorer, &positives),
        radial_order: radial_order_rate(table, &positives),
        norms: norm_profile(table, &groups, settings.norm_bins)?,
    })
}
