//! Lookup-table training: each node owns a free tangent vector that is
//! optimized directly with the bidirectional entailment loss.

mod optim;
mod table;

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{Optimizer, OptimizerKind};
pub use table::{
    export_embeddings, export_embeddings_csv, import_embeddings, import_embeddings_for_dim, init_embeddings,
    EmbeddingTable, INITIAL_TAU,
};

use crate::data::{EntailmentPair, PairKind};
use crate::error::{Error, Result};
use crate::geometry::SpaceKind;
use crate::loss::{loss_gradients_sharded, EntailmentOracle, LossConfig, NegativeMode, PairBatch};

/// Sampling weight of each pair kind when assembling batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KindWeights {
    pub scene_to_box: f64,
    pub box_to_box: f64,
    pub cross_image: f64,
}

impl Default for KindWeights {
    fn default() -> Self {
        KindWeights {
            scene_to_box: 1.0,
            box_to_box: 1.0,
            cross_image: 1.0,
        }
    }
}

impl KindWeights {
    fn weight(&self, kind: PairKind) -> f64 {
        match kind {
            PairKind::SceneToBox => self.scene_to_box,
            PairKind::BoxToBox => self.box_to_box,
            PairKind::CrossImage => self.cross_image,
        }
    }
}

/// Learning-rate multiplier over the run, applied after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero at `steps`.
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    /// Share of `steps` over which the learning rate ramps up linearly.
    pub warmup_fraction: f64,
    /// Rescale the full gradient to at most this norm; 0 disables.
    pub max_grad_norm: f64,
    pub seed: u64,
    pub space: SpaceKind,
    pub negative_mode: NegativeMode,
    pub dim: usize,
    /// Standard deviation of the Gaussian initialization.
    pub init_scale: f64,
    pub initial_tau: f64,
    pub learn_tau: bool,
    /// Hyperbolic mode only.
    pub learn_curvature: bool,
    /// Learned curvature is kept within `[min, max]`.
    pub curvature_range: [f64; 2],
    pub kind_weights: KindWeights,
    /// Take a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Threads used for gradient evaluation. Results are reproducible for a
    /// fixed value, but differ in the last bits between values.
    pub shards: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            steps: 2000,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Adam,
            schedule: LrSchedule::Cosine,
            warmup_fraction: 0.25,
            max_grad_norm: 0.0,
            seed: 0,
            space: SpaceKind::Hyperbolic,
            negative_mode: NegativeMode::Oracle,
            dim: 128,
            init_scale: 0.01,
            initial_tau: INITIAL_TAU,
            learn_tau: true,
            learn_curvature: true,
            curvature_range: [0.1, 10.0],
            kind_weights: KindWeights::default(),
            checkpoint_every: 0,
            shards: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.initial_tau.is_finite() && self.initial_tau > 0.0) {
            return Err(Error::invalid("initial_tau must be positive"));
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm >= 0.0) {
            return Err(Error::invalid("max_grad_norm must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("warmup_fraction must be in [0, 1)"));
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return Err(Error::invalid("init_scale must be positive"));
        }
        let [lo, hi] = self.curvature_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("curvature_range must satisfy 0 < min <= max"));
        }
        if self.dim < 2 {
            return Err(Error::invalid("dim must be at least 2"));
        }
        let w = self.kind_weights;
        if [w.scene_to_box, w.box_to_box, w.cross_image]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::invalid("kind weights must be non-negative"));
        }
        Ok(())
    }
}

/// Entailment pairs resolved to table rows, plus the relation oracle.
#[derive(Debug, Clone)]
pub struct PairDataset {
    ids: Vec<String>,
    pairs: Vec<(usize, usize)>,
    kinds: Vec<PairKind>,
    relations: HashSet<(usize, usize)>,
}

impl PairDataset {
    /// Node ids are every id mentioned by a pair, sorted.
    pub fn from_pairs(pairs: &[EntailmentPair]) -> Self {
        let ids: Vec<String> = pairs
            .iter()
            .flat_map(|p| [p.parent_id.as_str(), p.child_id.as_str()])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(str::to_string)
            .collect();
        let index: std::collections::HashMap<&str, usize> =
            ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let resolved: Vec<(usize, usize)> = pairs
            .iter()
            .map(|p| (index[p.parent_id.as_str()], index[p.child_id.as_str()]))
            .collect();
        PairDataset {
            relations: resolved.iter().copied().collect(),
            kinds: pairs.iter().map(|p| p.kind).collect(),
            pairs: resolved,
            ids,
        }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn kinds(&self) -> &[PairKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Row indices of the table matching each dataset id.
    fn row_map(&self, table: &EmbeddingTable) -> Result<Vec<usize>> {
        self.ids
            .iter()
            .map(|id| {
                table
                    .index_of(id)
                    .ok_or_else(|| Error::invalid(format!("node {id:?} has no embedding")))
            })
            .collect()
    }
}

impl EntailmentOracle for PairDataset {
    fn entails(&self, parent: usize, child: usize) -> bool {
        self.relations.contains(&(parent, child))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub parent_to_child: f64,
    pub child_to_parent: f64,
    pub clamped: usize,
    pub degenerate: usize,
    pub tau: f64,
    pub curvature: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    /// Mean loss over the first `window` steps.
    pub fn initial_mean(&self, window: usize) -> Option<f64> {
        let n = window.min(self.records.len());
        (n > 0).then(|| self.records[..n].iter().map(|r| r.loss).sum::<f64>() / n as f64)
    }

    /// Mean loss over the last `window` steps.
    pub fn final_mean(&self, window: usize) -> Option<f64> {
        let n = window.min(self.records.len());
        (n > 0).then(|| self.records[self.records.len() - n..].iter().map(|r| r.loss).sum::<f64>() / n as f64)
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "step,loss,parent_to_child,child_to_parent,clamped,degenerate,tau,curvature")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.step, r.loss, r.parent_to_child, r.child_to_parent, r.clamped, r.degenerate, r.tau, r.curvature
            )?;
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"HLCKPT01";

/// Resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Number of completed steps.
    pub step: usize,
    pub table: EmbeddingTable,
    pub optimizer: Optimizer,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(format!("writing {}", path.display()), e);
        // write-then-rename so an interrupted save never clobbers the last good state
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
            w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
            w.write_all(&(self.step as u64).to_le_bytes()).map_err(io)?;
            self.table.write_to(&mut w).map_err(io)?;
            self.optimizer.write_to(&mut w).map_err(io)?;
            w.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let step = table::read_u64(&mut r)? as usize;
        let table = EmbeddingTable::read_from(&mut r)?;
        let optimizer = Optimizer::read_from(&mut r)?;
        Ok(Checkpoint { step, table, optimizer })
    }
}

/// Step-wise trainer over a [`PairDataset`].
pub struct Trainer<'a> {
    dataset: &'a PairDataset,
    config: TrainConfig,
    table: EmbeddingTable,
    rows: Vec<usize>,
    /// Dataset relations expressed in table rows.
    row_relations: HashSet<(usize, usize)>,
    optimizer: Optimizer,
    step: usize,
    sampler: Option<WeightedIndex<f64>>,
    last_checkpoint: Checkpoint,
    log: TrainLog,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    // splitmix64 finalizer over (seed, step)
    let mut z = seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<'a> Trainer<'a> {
    /// Fresh run from a Gaussian initialization.
    pub fn new(dataset: &'a PairDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut table = init_embeddings(dataset.ids().to_vec(), config.dim, config.init_scale, config.seed, config.space)?;
        table.log_tau = config.initial_tau.ln();
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, table.data().len() + 2);
        Self::from_checkpoint(
            dataset,
            config,
            Checkpoint {
                step: 0,
                table,
                optimizer,
            },
        )
    }

    pub fn from_checkpoint(dataset: &'a PairDataset, config: TrainConfig, checkpoint: Checkpoint) -> Result<Self> {
        config.validate()?;
        checkpoint.table.check_dim(config.dim)?;
        if checkpoint.table.space != config.space {
            return Err(Error::invalid(format!(
                "checkpoint is {} but the run is {}",
                checkpoint.table.space, config.space
            )));
        }
        if checkpoint.optimizer.kind() != config.optimizer {
            return Err(Error::invalid("checkpoint optimizer differs from the configured one"));
        }
        let rows = dataset.row_map(&checkpoint.table)?;
        let row_relations = dataset.relations.iter().map(|&(p, c)| (rows[p], rows[c])).collect();
        let weights: Vec<f64> = dataset.kinds().iter().map(|&k| config.kind_weights.weight(k)).collect();
        let sampler = if dataset.is_empty() {
            None
        } else {
            Some(WeightedIndex::new(&weights).map_err(|e| Error::invalid(format!("pair sampling weights: {e}")))?)
        };
        Ok(Trainer {
            dataset,
            table: checkpoint.table.clone(),
            optimizer: checkpoint.optimizer.clone(),
            step: checkpoint.step,
            last_checkpoint: checkpoint,
            rows,
            row_relations,
            sampler,
            config,
            log: TrainLog::default(),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            table: self.table.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Pair indices of the batch for the given step.
    fn sample_batch(&self, step: usize) -> Vec<(usize, usize)> {
        let Some(sampler) = &self.sampler else {
            return Vec::new();
        };
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(self.config.seed, step));
        (0..self.config.batch_size)
            .map(|_| {
                let (p, c) = self.dataset.pairs()[sampler.sample(&mut rng)];
                (self.rows[p], self.rows[c])
            })
            .collect()
    }

    fn warmup_steps(&self) -> usize {
        (self.config.warmup_fraction * self.config.steps as f64).round() as usize
    }

    /// Learning-rate multiplier for `step` (0-based).
    pub fn lr_scale(&self, step: usize) -> f64 {
        let warmup = self.warmup_steps();
        if step < warmup {
            return (step + 1) as f64 / warmup as f64;
        }
        match self.config.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let span = self.config.steps.saturating_sub(warmup).max(1) as f64;
                let progress = ((step - warmup) as f64 / span).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    /// Runs one optimization step.
    pub fn advance(&mut self) -> Result<StepRecord> {
        let batch_pairs = self.sample_batch(self.step);
        let config = LossConfig::new(self.table.tau(), self.config.space, self.table.curvature())?;
        let grads = if batch_pairs.is_empty() {
            Default::default()
        } else {
            let batch = PairBatch::new(batch_pairs, &self.table, &self.row_relations, self.config.negative_mode)?;
            loss_gradients_sharded(&batch, &config, self.config.shards)?
        };
        if !grads.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                checkpoint: Box::new(self.last_checkpoint.table.clone()),
            });
        }

        let dim = self.table.dim();
        let n = self.table.data().len();
        let mut flat = vec![0.0; n + 2];
        for (row, g) in &grads.rows {
            flat[row * dim..(row + 1) * dim].copy_from_slice(g);
        }
        if self.config.learn_tau {
            flat[n] = grads.d_log_tau(config.tau);
        }
        if self.config.learn_curvature && self.config.space == SpaceKind::Hyperbolic {
            flat[n + 1] = grads.d_log_curvature(config.curvature);
        }
        if self.config.max_grad_norm > 0.0 {
            let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > self.config.max_grad_norm {
                let scale = self.config.max_grad_norm / norm;
                flat.iter_mut().for_each(|g| *g *= scale);
            }
        }
        let mut params: Vec<f64> = Vec::with_capacity(n + 2);
        params.extend_from_slice(self.table.data());
        params.push(self.table.log_tau);
        params.push(self.table.log_c);
        self.optimizer.step(&mut params, &flat, self.lr_scale(self.step));
        self.table.data_mut().copy_from_slice(&params[..n]);
        self.table.log_tau = params[n];
        let [lo, hi] = self.config.curvature_range;
        self.table.log_c = params[n + 1].clamp(lo.ln(), hi.ln());
        if !self.table.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                checkpoint: Box::new(self.last_checkpoint.table.clone()),
            });
        }

        let record = StepRecord {
            step: self.step,
            loss: grads.loss,
            parent_to_child: grads.parent_to_child,
            child_to_parent: grads.child_to_parent,
            clamped: grads.clamped,
            degenerate: grads.degenerate,
            tau: config.tau,
            curvature: config.curvature.value(),
        };
        self.step += 1;
        self.log.records.push(record.clone());
        Ok(record)
    }

    /// Advances until `target` steps are complete. `on_checkpoint` is called
    /// with every checkpoint taken along the way.
    pub fn run_until(&mut self, target: usize, mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>) -> Result<()> {
        while self.step < target {
            let record = self.advance()?;
            if record.clamped > 0 {
                log::trace!("step {}: {} clamped angle(s)", record.step, record.clamped);
            }
            if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0 {
                self.last_checkpoint = self.checkpoint();
                on_checkpoint(&self.last_checkpoint)?;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> (EmbeddingTable, TrainLog) {
        (self.table, self.log)
    }
}

/// Trains for `config.steps` steps from a fresh initialization.
pub fn train(dataset: &PairDataset, config: &TrainConfig) -> Result<(EmbeddingTable, TrainLog)> {
    let mut trainer = Trainer::new(dataset, config.clone())?;
    trainer.run_until(config.steps, |_| Ok(()))?;
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Vec<EntailmentPair> {
        vec![
            EntailmentPair::new("a", "b", PairKind::BoxToBox),
            EntailmentPair::new("a", "c", PairKind::BoxToBox),
            EntailmentPair::new("b", "c", PairKind::BoxToBox),
            EntailmentPair::new("d", "e", PairKind::BoxToBox),
        ]
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            dim: 4,
            steps: 20,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn dataset_resolves_ids_in_sorted_order() {
        let ds = PairDataset::from_pairs(&chain());
        assert_eq!(ds.ids(), &["a", "b", "c", "d", "e"]);
        assert_eq!(ds.pairs()[2], (1, 2));
        assert!(ds.entails(0, 2));
        assert!(!ds.entails(2, 0));
    }

    #[test]
    fn zero_steps_leave_the_initialization() {
        let ds = PairDataset::from_pairs(&chain());
        let cfg = TrainConfig { steps: 0, ..small_config() };
        let (table, log) = train(&ds, &cfg).unwrap();
        let init = init_embeddings(ds.ids().to_vec(), cfg.dim, cfg.init_scale, cfg.seed, cfg.space).unwrap();
        assert_eq!(table, init);
        assert!(log.records.is_empty());
    }

    #[test]
    fn zero_loss_batches_do_not_move_the_table() {
        let pairs = vec![EntailmentPair::new("a", "b", PairKind::SceneToBox)];
        let ds = PairDataset::from_pairs(&pairs);
        let cfg = TrainConfig { steps: 5, ..small_config() };
        let (table, log) = train(&ds, &cfg).unwrap();
        let init = init_embeddings(ds.ids().to_vec(), cfg.dim, cfg.init_scale, cfg.seed, cfg.space).unwrap();
        assert_eq!(table, init);
        assert!(log.records.iter().all(|r| r.loss == 0.0));
    }

    #[test]
    fn learning_rate_warms_up_then_decays_to_zero() {
        let ds = PairDataset::from_pairs(&chain());
        let cfg = TrainConfig { steps: 100, warmup_fraction: 0.2, ..small_config() };
        let t = Trainer::new(&ds, cfg.clone()).unwrap();
        assert!((t.lr_scale(0) - 0.05).abs() < 1e-12);
        assert!((t.lr_scale(19) - 1.0).abs() < 1e-12);
        assert!((t.lr_scale(20) - 1.0).abs() < 1e-12);
        assert!((t.lr_scale(60) - 0.5).abs() < 1e-12);
        assert!(t.lr_scale(99) < 1e-3);
        let flat = Trainer::new(&ds, TrainConfig { schedule: LrSchedule::Constant, warmup_fraction: 0.0, ..cfg }).unwrap();
        assert!((0..100).all(|s| flat.lr_scale(s) == 1.0));
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let ds = PairDataset::from_pairs(&chain());
        let (a, la) = train(&ds, &small_config()).unwrap();
        let (b, lb) = train(&ds, &small_config()).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn sharded_gradients_are_reproducible() {
        let ds = PairDataset::from_pairs(&chain());
        let cfg = TrainConfig { shards: 3, ..small_config() };
        let (a, _) = train(&ds, &cfg).unwrap();
        let (b, _) = train(&ds, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = PairDataset::from_pairs(&chain());
        let cfg = TrainConfig {
            checkpoint_every: 5,
            ..small_config()
        };
        let (full, _) = train(&ds, &cfg).unwrap();

        let mut first = Trainer::new(&ds, cfg.clone()).unwrap();
        let mut saved = None;
        first
            .run_until(10, |c| {
                saved = Some(c.clone());
                Ok(())
            })
            .unwrap();
        let ckpt = saved.unwrap();
        assert_eq!(ckpt.step, 10);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);

        let mut resumed = Trainer::from_checkpoint(&ds, cfg.clone(), loaded).unwrap();
        resumed.run_until(cfg.steps, |_| Ok(())).unwrap();
        assert_eq!(resumed.step(), cfg.steps);
        assert_eq!(resumed.table(), &full);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ds = PairDataset::from_pairs(&chain());
        assert!(Trainer::new(&ds, TrainConfig { batch_size: 0, ..small_config() }).is_err());
        assert!(Trainer::new(&ds, TrainConfig { learning_rate: 0.0, ..small_config() }).is_err());
        assert!(Trainer::new(&ds, TrainConfig { dim: 1, ..small_config() }).is_err());
    }

    #[test]
    fn log_running_means() {
        let log = TrainLog {
            records: (0..4)
                .map(|i| StepRecord {
                    step: i,
                    loss: i as f64,
                    parent_to_child: 0.0,
                    child_to_parent: 0.0,
                    clamped: 0,
                    degenerate: 0,
                    tau: 0.07,
                    curvature: 1.0,
                })
                .collect(),
        };
        assert_eq!(log.initial_mean(2), Some(0.5));
        assert_eq!(log.final_mean(2), Some(2.5));
        assert_eq!(TrainLog::default().final_mean(3), None);
    }
}
