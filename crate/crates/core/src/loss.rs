//! Bidirectional contrastive entailment-angle loss.
//!
//! For a batch of parent/child pairs the parent-to-child term is an InfoNCE
//! loss whose logits are `beta1(parent_i, child_j) / tau`, and the
//! child-to-parent term uses `alpha2(child_i, parent_j) / tau`. Negatives for
//! an anchor are the other batch items it has no entailment relation with.
//!
//! The batch loss is the *mean* over anchors of each direction, summed over
//! the two directions; a single temperature is shared by both.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{ext_euc_grad, ext_hyp_grad, Curvature, ExpLift, ExtGrad, SpaceKind};

/// Row access into an embedding store.
pub trait EmbeddingRows: Sync {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn row(&self, index: usize) -> &[f64];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl EmbeddingRows for Vec<Vec<f64>> {
    fn dim(&self) -> usize {
        self.first().map_or(0, Vec::len)
    }
    fn len(&self) -> usize {
        Vec::len(self)
    }
    fn row(&self, index: usize) -> &[f64] {
        &self[index]
    }
}

/// Tells whether `parent` entails `child` anywhere in the dataset.
pub trait EntailmentOracle: Sync {
    fn entails(&self, parent: usize, child: usize) -> bool;
}

impl EntailmentOracle for HashSet<(usize, usize)> {
    fn entails(&self, parent: usize, child: usize) -> bool {
        self.contains(&(parent, child))
    }
}

impl EntailmentOracle for BTreeSet<(usize, usize)> {
    fn entails(&self, parent: usize, child: usize) -> bool {
        self.contains(&(parent, child))
    }
}

/// How an anchor's negatives are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Exclude every batch item related to the anchor anywhere in the dataset.
    #[default]
    Oracle,
    /// Exclude only items paired with the anchor inside the batch (ablation).
    BatchLocal,
}

impl std::str::FromStr for NegativeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(NegativeMode::Oracle),
            "batch" | "batch_local" | "batch-local" => Ok(NegativeMode::BatchLocal),
            other => Err(Error::invalid(format!("unknown negative mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ParentToChild,
    ChildToParent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub space: SpaceKind,
    /// Ignored in Euclidean mode.
    pub curvature: Curvature,
}

impl LossConfig {
    pub fn new(tau: f64, space: SpaceKind, curvature: Curvature) -> Result<Self> {
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
        }
        Ok(LossConfig {
            tau,
            space,
            curvature,
        })
    }
}

/// A batch of entailment pairs over rows of an embedding store.
pub struct PairBatch<'a> {
    pairs: Vec<(usize, usize)>,
    embeddings: &'a dyn EmbeddingRows,
    oracle: &'a dyn EntailmentOracle,
    mode: NegativeMode,
    batch_relations: HashSet<(usize, usize)>,
}

impl<'a> PairBatch<'a> {
    pub fn new(
        pairs: Vec<(usize, usize)>,
        embeddings: &'a dyn EmbeddingRows,
        oracle: &'a dyn EntailmentOracle,
        mode: NegativeMode,
    ) -> Result<Self> {
        let n = embeddings.len();
        if let Some(&(p, c)) = pairs.iter().find(|&&(p, c)| p >= n || c >= n) {
            return Err(Error::invalid(format!(
                "pair ({p}, {c}) references a row outside the table of {n}"
            )));
        }
        if let Some(&(p, _)) = pairs.iter().find(|&&(p, c)| p == c) {
            return Err(Error::invalid(format!("pair ({p}, {p}) is a self-entailment")));
        }
        let batch_relations = match mode {
            NegativeMode::BatchLocal => pairs.iter().copied().collect(),
            NegativeMode::Oracle => HashSet::new(),
        };
        Ok(PairBatch {
            pairs,
            embeddings,
            oracle,
            mode,
            batch_relations,
        })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn related(&self, parent: usize, child: usize) -> bool {
        match self.mode {
            NegativeMode::Oracle => self.oracle.entails(parent, child),
            NegativeMode::BatchLocal => self.batch_relations.contains(&(parent, child)),
        }
    }

    /// Batch indices that serve as negatives for anchor `i`.
    ///
    /// Items whose candidate node is the anchor node itself are skipped; the
    /// exterior angle of a point with itself is undefined.
    pub fn negative_set(&self, i: usize, direction: Direction) -> Vec<usize> {
        let (anchor_parent, anchor_child) = self.pairs[i];
        (0..self.pairs.len())
            .filter(|&j| j != i)
            .filter(|&j| {
                let (xj, yj) = self.pairs[j];
                match direction {
                    Direction::ParentToChild => yj != anchor_parent && !self.related(anchor_parent, yj),
                    Direction::ChildToParent => xj != anchor_child && !self.related(xj, anchor_child),
                }
            })
            .collect()
    }
}

/// `-log(exp(pos/tau) / (exp(pos/tau) + sum(exp(neg/tau))))`, computed stably.
pub fn infonce_from_logits(positive: f64, negatives: &[f64], tau: f64) -> f64 {
    let max = negatives
        .iter()
        .fold(positive / tau, |m, &z| m.max(z / tau));
    let sum: f64 = std::iter::once(positive)
        .chain(negatives.iter().copied())
        .map(|z| (z / tau - max).exp())
        .sum();
    max + sum.ln() - positive / tau
}

/// Diagnostics and gradients of the bidirectional loss for one batch.
#[derive(Debug, Clone, Default)]
pub struct LossGradients {
    pub loss: f64,
    pub parent_to_child: f64,
    pub child_to_parent: f64,
    /// Gradient per embedding row (tangent coordinates).
    pub rows: BTreeMap<usize, Vec<f64>>,
    pub d_tau: f64,
    /// Zero in Euclidean mode.
    pub d_curvature: f64,
    /// Angle evaluations whose acos argument hit the clamp (zero gradient).
    pub clamped: usize,
    /// Angle evaluations that hit the square-root floor.
    pub floored: usize,
    /// Angle evaluations skipped as degenerate (point at the origin).
    pub degenerate: usize,
}

impl LossGradients {
    /// Gradient with respect to `log(tau)`.
    pub fn d_log_tau(&self, tau: f64) -> f64 {
        self.d_tau * tau
    }

    /// Gradient with respect to `log(c)`.
    pub fn d_log_curvature(&self, c: Curvature) -> f64 {
        self.d_curvature * c.value()
    }
}

/// Precomputed lifted points for every node touched by the batch.
struct Lifted {
    space: BTreeMap<usize, Vec<f64>>,
    lifts: BTreeMap<usize, ExpLift>,
}

impl Lifted {
    fn new(batch: &PairBatch<'_>, config: &LossConfig) -> Self {
        let mut nodes = BTreeSet::new();
        for &(p, c) in &batch.pairs {
            nodes.insert(p);
            nodes.insert(c);
        }
        let mut space = BTreeMap::new();
        let mut lifts = BTreeMap::new();
        for n in nodes {
            let row = batch.embeddings.row(n);
            match config.space {
                SpaceKind::Euclidean => {
                    space.insert(n, row.to_vec());
                }
                SpaceKind::Hyperbolic => {
                    let lift = ExpLift::new(row, config.curvature);
                    space.insert(n, lift.point.space().to_vec());
                    lifts.insert(n, lift);
                }
            }
        }
        Lifted { space, lifts }
    }
}

/// Per-anchor accumulator, merged in a fixed order.
#[derive(Default)]
struct Partial {
    p2c: f64,
    c2p: f64,
    space_grads: BTreeMap<usize, Vec<f64>>,
    d_tau: f64,
    d_c: f64,
    clamped: usize,
    floored: usize,
    degenerate: usize,
}

impl Partial {
    fn merge(&mut self, other: Partial) {
        self.p2c += other.p2c;
        self.c2p += other.c2p;
        for (k, g) in other.space_grads {
            add_into(self.space_grads.entry(k).or_insert_with(|| vec![0.0; g.len()]), &g, 1.0);
        }
        self.d_tau += other.d_tau;
        self.d_c += other.d_c;
        self.clamped += other.clamped;
        self.floored += other.floored;
        self.degenerate += other.degenerate;
    }
}

fn add_into(acc: &mut [f64], g: &[f64], scale: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += scale * b;
    }
}

/// Exterior angle `ext(from, to)` on lifted points, with gradients.
fn ext_between(lifted: &Lifted, from: usize, to: usize, config: &LossConfig, want_grad: bool) -> Option<ExtGrad> {
    let xs = &lifted.space[&from];
    let ys = &lifted.space[&to];
    let res = match config.space {
        SpaceKind::Hyperbolic => ext_hyp_grad(xs, ys, config.curvature, want_grad),
        SpaceKind::Euclidean => ext_euc_grad(xs, ys, want_grad),
    };
    res.ok()
}

/// Loss of one anchor in one direction; accumulates gradients into `acc`
/// scaled by `weight` (1/B for the batch mean).
fn anchor_term(
    batch: &PairBatch<'_>,
    lifted: &Lifted,
    config: &LossConfig,
    i: usize,
    direction: Direction,
    weight: f64,
    acc: Option<&mut Partial>,
) -> f64 {
    let (xi, yi) = batch.pairs[i];
    let negs = batch.negative_set(i, direction);
    if negs.is_empty() {
        return 0.0;
    }
    // (from, to) of the exterior angle behind each logit; index 0 is the positive
    let mut ends = Vec::with_capacity(negs.len() + 1);
    match direction {
        Direction::ParentToChild => {
            ends.push((xi, yi));
            ends.extend(negs.iter().map(|&j| (xi, batch.pairs[j].1)));
        }
        Direction::ChildToParent => {
            ends.push((yi, xi));
            ends.extend(negs.iter().map(|&j| (yi, batch.pairs[j].0)));
        }
    }
    let want_grad = acc.is_some();
    let mut degenerate = 0;
    let exts: Vec<Option<ExtGrad>> = ends
        .iter()
        .map(|&(a, b)| {
            let e = ext_between(lifted, a, b, config, want_grad);
            if e.is_none() {
                degenerate += 1;
            }
            e
        })
        .collect();
    // Degenerate angles contribute an uninformative right angle.
    let logits: Vec<f64> = exts
        .iter()
        .map(|e| {
            let ext = e.as_ref().map_or(PI / 2.0, |e| e.value);
            match direction {
                Direction::ParentToChild => PI - ext,
                Direction::ChildToParent => ext,
            }
        })
        .collect();
    let tau = config.tau;
    let loss = infonce_from_logits(logits[0], &logits[1..], tau);

    if let Some(acc) = acc {
        acc.degenerate += degenerate;
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z / tau));
        let weights: Vec<f64> = logits.iter().map(|z| (z / tau - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let expected: f64 = probs.iter().zip(&logits).map(|(p, z)| p * z).sum();
        acc.d_tau += weight * (logits[0] - expected) / (tau * tau);

        // d ext / d logit sign: beta1 = pi - ext, alpha2 = ext
        let sign = match direction {
            Direction::ParentToChild => -1.0,
            Direction::ChildToParent => 1.0,
        };
        for (k, (e, &(from, to))) in exts.iter().zip(&ends).enumerate() {
            let Some(e) = e else { continue };
            let indicator = if k == 0 { 1.0 } else { 0.0 };
            let g_logit = weight * (probs[k] - indicator) / tau;
            if e.clamped {
                acc.clamped += 1;
                continue;
            }
            if e.floored {
                acc.floored += 1;
            }
            let g_ext = sign * g_logit;
            let dim = e.d_x.len();
            add_into(acc.space_grads.entry(from).or_insert_with(|| vec![0.0; dim]), &e.d_x, g_ext);
            add_into(acc.space_grads.entry(to).or_insert_with(|| vec![0.0; dim]), &e.d_y, g_ext);
            acc.d_c += g_ext * e.d_c;
        }
    }
    loss
}

fn evaluate_range(
    batch: &PairBatch<'_>,
    lifted: &Lifted,
    config: &LossConfig,
    range: std::ops::Range<usize>,
    weight: f64,
    want_grad: bool,
) -> Partial {
    let mut acc = Partial::default();
    for i in range {
        for direction in [Direction::ParentToChild, Direction::ChildToParent] {
            let mut local = Partial::default();
            let l = anchor_term(
                batch,
                lifted,
                config,
                i,
                direction,
                weight,
                want_grad.then_some(&mut local),
            );
            match direction {
                Direction::ParentToChild => local.p2c += weight * l,
                Direction::ChildToParent => local.c2p += weight * l,
            }
            acc.merge(local);
        }
    }
    acc
}

/// Mean InfoNCE loss of one direction over the batch.
pub fn infonce_directional(batch: &PairBatch<'_>, config: &LossConfig, direction: Direction) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let lifted = Lifted::new(batch, config);
    let total: f64 = (0..batch.len())
        .map(|i| anchor_term(batch, &lifted, config, i, direction, 1.0, None))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Parent-to-child loss on `beta1` plus child-to-parent loss on `alpha2`.
pub fn bidirectional_loss(batch: &PairBatch<'_>, config: &LossConfig) -> Result<f64> {
    Ok(infonce_directional(batch, config, Direction::ParentToChild)?
        + infonce_directional(batch, config, Direction::ChildToParent)?)
}

/// Loss value and analytic gradients with respect to every row in the
/// batch, the temperature and (hyperbolic mode) the curvature.
pub fn loss_gradients(batch: &PairBatch<'_>, config: &LossConfig) -> Result<LossGradients> {
    loss_gradients_sharded(batch, config, 1)
}

/// Like [`loss_gradients`], splitting the anchors over `shards` threads.
/// Partial results are reduced in shard order, so a fixed shard count is
/// bit-reproducible.
pub fn loss_gradients_sharded(batch: &PairBatch<'_>, config: &LossConfig, shards: usize) -> Result<LossGradients> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let lifted = Lifted::new(batch, config);
    let n = batch.len();
    let weight = 1.0 / n as f64;
    let shards = shards.clamp(1, n);
    let partials: Vec<Partial> = if shards == 1 {
        vec![evaluate_range(batch, &lifted, config, 0..n, weight, true)]
    } else {
        let chunk = n.div_ceil(shards);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..shards)
                .map(|k| {
                    let range = (k * chunk).min(n)..((k + 1) * chunk).min(n);
                    let lifted = &lifted;
                    s.spawn(move || evaluate_range(batch, lifted, config, range, weight, true))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("gradient shard panicked"))
                .collect()
        })
    };
    let mut total = Partial::default();
    for p in partials {
        total.merge(p);
    }
    Ok(finish(total, &lifted, config))
}

/// Summed (not averaged) loss and gradients of the anchors in `anchors`,
/// with negatives drawn from the whole batch.
pub fn anchor_gradients(
    batch: &PairBatch<'_>,
    config: &LossConfig,
    anchors: std::ops::Range<usize>,
) -> Result<LossGradients> {
    if anchors.end > batch.len() {
        return Err(Error::invalid(format!(
            "anchor range {anchors:?} exceeds batch of {}",
            batch.len()
        )));
    }
    let lifted = Lifted::new(batch, config);
    let total = evaluate_range(batch, &lifted, config, anchors, 1.0, true);
    Ok(finish(total, &lifted, config))
}

fn finish(total: Partial, lifted: &Lifted, config: &LossConfig) -> LossGradients {
    let mut rows = BTreeMap::new();
    let mut d_c = total.d_c;
    for (node, g_space) in total.space_grads {
        let g = match config.space {
            SpaceKind::Euclidean => g_space,
            SpaceKind::Hyperbolic => {
                let (g_u, g_c) = lifted.lifts[&node].backprop(&g_space, config.curvature);
                d_c += g_c;
                g_u
            }
        };
        rows.insert(node, g);
    }
    if config.space == SpaceKind::Euclidean {
        d_c = 0.0;
    }
    if total.clamped > 0 || total.degenerate > 0 {
        log::trace!(
            "batch gradients: {} clamped, {} degenerate angle evaluations zeroed",
            total.clamped,
            total.degenerate
        );
    }
    LossGradients {
        loss: total.p2c + total.c2p,
        parent_to_child: total.p2c,
        child_to_parent: total.c2p,
        rows,
        d_tau: total.d_tau,
        d_curvature: d_c,
        clamped: total.clamped,
        floored: total.floored,
        degenerate: total.degenerate,
    }
}
