use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, exp_map_origin, exterior_angle_euc, exterior_angle_hyp, norm, HyperbolicPoint, SpaceKind};
use crate::loss::Direction;
use crate::trainer::EmbeddingTable;

/// Score used to rank candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `beta1` for parent-to-child queries, `alpha2` for child-to-parent.
    #[default]
    Angle,
    /// Cosine similarity of the raw vectors (baseline).
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    /// Best first; ties broken by ascending id.
    pub items: Vec<Ranked>,
    pub k: usize,
    /// Set when fewer than `k` candidates were available.
    pub short: bool,
}

impl RetrievalResult {
    pub fn top(&self, k: usize) -> &[Ranked] {
        &self.items[..k.min(self.items.len())]
    }
}

/// Precomputed points for scoring any pair of rows in a table.
pub struct Scorer<'a> {
    table: &'a EmbeddingTable,
    lifted: Vec<Option<HyperbolicPoint>>,
}

impl<'a> Scorer<'a> {
    pub fn new(table: &'a EmbeddingTable) -> Self {
        let c = table.curvature();
        let lifted = match table.space {
            SpaceKind::Euclidean => Vec::new(),
            SpaceKind::Hyperbolic => (0..table.len())
                .map(|i| exp_map_origin(table.row(i), c).ok())
                .collect(),
        };
        Scorer { table, lifted }
    }

    pub fn table(&self) -> &EmbeddingTable {
        self.table
    }

    /// Exterior angle `ext(from, to)`; degenerate configurations score a
    /// right angle, the same convention the loss uses.
    pub fn ext(&self, from: usize, to: usize) -> f64 {
        let value = match self.table.space {
            SpaceKind::Euclidean => exterior_angle_euc(self.table.row(from), self.table.row(to)),
            SpaceKind::Hyperbolic => match (&self.lifted[from], &self.lifted[to]) {
                (Some(x), Some(y)) => exterior_angle_hyp(x, y, self.table.curvature()),
                _ => return PI / 2.0,
            },
        };
        value.unwrap_or(PI / 2.0)
    }

    pub fn beta1(&self, parent: usize, child: usize) -> f64 {
        PI - self.ext(parent, child)
    }

    pub fn alpha2(&self, child: usize, parent: usize) -> f64 {
        self.ext(child, parent)
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let (x, y) = (self.table.row(a), self.table.row(b));
        let denom = norm(x) * norm(y);
        if denom == 0.0 {
            0.0
        } else {
            dot(x, y) / denom
        }
    }

    /// Score of `candidate` for `query`: `beta1(query, candidate)` when the
    /// query is the parent, `alpha2(query, candidate)` when it is the child.
    pub fn score(&self, query: usize, candidate: usize, direction: Direction, mode: ScoreMode) -> f64 {
        match (mode, direction) {
            (ScoreMode::Cosine, _) => self.cosine(query, candidate),
            (ScoreMode::Angle, Direction::ParentToChild) => self.beta1(query, candidate),
            (ScoreMode::Angle, Direction::ChildToParent) => self.alpha2(query, candidate),
        }
    }

    /// Rank `candidates` (row indices) for the query row.
    pub fn rank(
        &self,
        query: usize,
        candidates: &[usize],
        direction: Direction,
        mode: ScoreMode,
        k: usize,
    ) -> RetrievalResult {
        let scored: Vec<Ranked> = candidates
            .iter()
            .map(|&j| Ranked {
                id: self.table.id(j).to_string(),
                score: self.score(query, j, direction, mode),
            })
            .collect();
        rank_scored(self.table.id(query), scored, k)
    }
}

/// Sort pre-scored candidates best first (ties by id) and keep the top `k`.
pub fn rank_scored(query_id: &str, mut scored: Vec<Ranked>, k: usize) -> RetrievalResult {
    scored.sort_by(|a, b| match b.score.total_cmp(&a.score) {
        Ordering::Equal => a.id.cmp(&b.id),
        o => o,
    });
    let short = k > scored.len();
    scored.truncate(k);
    RetrievalResult {
        query_id: query_id.to_string(),
        items: scored,
        k,
        short,
    }
}

/// Rank the table rows named by `candidate_ids` against the query row.
pub fn rank_candidates(
    table: &EmbeddingTable,
    query_id: &str,
    candidate_ids: &[&str],
    direction: Direction,
    mode: ScoreMode,
    k: usize,
) -> Result<RetrievalResult> {
    let lookup = |id: &str| {
        table
            .index_of(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown node id {id:?}")))
    };
    let q = lookup(query_id)?;
    let candidates = candidate_ids.iter().map(|id| lookup(id)).collect::<Result<Vec<_>>>()?;
    Ok(Scorer::new(table).rank(q, &candidates, direction, mode, k))
}

/// Summary of a metric averaged over queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    /// Percentage in [0, 100]; `None` when no query was evaluated.
    pub value: Option<f64>,
    pub evaluated: usize,
    /// Queries left out because their result set (or ground truth) was empty.
    pub skipped: usize,
}

impl Averaged {
    pub(crate) fn from_options(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let (mut sum, mut evaluated, mut skipped) = (0.0, 0, 0);
        for v in values {
            match v {
                Some(v) => {
                    sum += v;
                    evaluated += 1;
                }
                None => skipped += 1,
            }
        }
        Averaged {
            value: (evaluated > 0).then(|| sum / evaluated as f64),
            evaluated,
            skipped,
        }
    }
}

/// Percentage of each query's top-`k` items accepted by `correct`,
/// averaged over queries.
pub fn recall_at_k(results: &[RetrievalResult], k: usize, correct: impl Fn(&str, &str) -> bool) -> Averaged {
    Averaged::from_options(results.iter().map(|r| {
        let top = r.top(k);
        if top.is_empty() {
            return None;
        }
        let hits = top.iter().filter(|item| correct(&r.query_id, &item.id)).count();
        Some(100.0 * hits as f64 / top.len() as f64)
    }))
}

/// Percentage of queries with at least one accepted item in the top `k`.
pub fn hit_rate_at_k(results: &[RetrievalResult], k: usize, correct: impl Fn(&str, &str) -> bool) -> Averaged {
    Averaged::from_options(results.iter().map(|r| {
        let top = r.top(k);
        if top.is_empty() {
            return None;
        }
        let hit = top.iter().any(|item| correct(&r.query_id, &item.id));
        Some(if hit { 100.0 } else { 0.0 })
    }))
}

/// `|top-cutoff ∩ ground truth| / |ground truth| * 100`; `None` for an
/// empty ground truth.
pub fn hierarchical_recall(result: &RetrievalResult, ground_truth: &BTreeSet<String>, cutoff: usize) -> Option<f64> {
    if ground_truth.is_empty() {
        return None;
    }
    let found = result
        .top(cutoff)
        .iter()
        .filter(|item| ground_truth.contains(&item.id))
        .count();
    Some(100.0 * found as f64 / ground_truth.len() as f64)
}

pub fn mean_hierarchical_recall<'r>(
    queries: impl IntoIterator<Item = (&'r RetrievalResult, &'r BTreeSet<String>, usize)>,
) -> Averaged {
    Averaged::from_options(queries.into_iter().map(|(r, gt, cutoff)| {
        let v = hierarchical_recall(r, gt, cutoff);
        if v.is_none() {
            log::debug!("query {} has no ground truth; skipped", r.query_id);
        }
        v
    }))
}
