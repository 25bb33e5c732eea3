//! One function per pipeline stage. Each reads and writes the files named
//! in [`ExperimentConfig::paths`].

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use hierlens_core::data::{
    build_hierarchy_tree, edge_statistics, generate_pairs, load_annotations, read_pairs_tsv, write_pairs_tsv,
    BoundingBox, Catalog, HierarchyTree, LoadMode, PairCounts,
};
use hierlens_core::eval::{evaluate, write_pr_csv, MetricsReport};
use hierlens_core::synthetic::{balanced_tree, nested_annotations, NestedScenes};
use hierlens_core::trainer::{export_embeddings, import_embeddings, init_embeddings, Checkpoint, PairDataset, Trainer};
use hierlens_core::Error;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::server::{router, Snapshot};
use crate::CliError;

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::from(Error::io(format!("writing {}", path.display()), e))
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} file {} does not exist", path.display())))
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e)),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub boxes: usize,
    pub skipped_records: usize,
    pub counts: PairCounts,
}

/// Annotations to pairs TSV, pair-count digest and node catalog.
pub fn make_pairs(config: &ExperimentConfig, lenient: bool) -> Result<PairSummary, CliError> {
    let paths = &config.paths;
    require(&paths.annotations, "annotations")?;
    let mode = if lenient { LoadMode::Lenient } else { LoadMode::Strict };
    let loaded = load_annotations(&paths.annotations, mode)?;
    let pairs = generate_pairs(&loaded.boxes, &config.pairs)?;
    for p in [&paths.pairs, &paths.pair_stats, &paths.nodes] {
        ensure_parent(p)?;
    }
    write_pairs_tsv(&paths.pairs, &pairs)?;
    Catalog::from_annotations(&loaded.boxes, &pairs).save_tsv(&paths.nodes)?;
    let summary = PairSummary {
        boxes: loaded.boxes.len(),
        skipped_records: loaded.diagnostics.len(),
        counts: PairCounts::of(&pairs),
    };
    write_json(&paths.pair_stats, &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeSummary {
    pub candidate_edges: usize,
    pub kept_edges: usize,
    pub removed_for_cycles: usize,
}

/// Label tree from the pairs file and the annotations it came from.
pub fn build_tree(config: &ExperimentConfig) -> Result<TreeSummary, CliError> {
    let paths = &config.paths;
    require(&paths.annotations, "annotations")?;
    require(&paths.pairs, "pairs")?;
    let boxes = load_annotations(&paths.annotations, LoadMode::Lenient)?.boxes;
    let pairs = read_pairs_tsv(&paths.pairs)?;
    let stats = edge_statistics(&pairs, &boxes);
    let build = build_hierarchy_tree(&stats, config.tree.min_frequency, config.tree.min_proportion);
    for (p, c) in &build.removed_for_cycles {
        log::warn!("removed edge {p} -> {c} to break a cycle");
    }
    ensure_parent(&paths.tree)?;
    build.tree.save(&paths.tree)?;
    Ok(TreeSummary {
        candidate_edges: stats.len(),
        kept_edges: build.tree.edges().len(),
        removed_for_cycles: build.removed_for_cycles.len(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint file when it exists.
    pub resume: bool,
    /// Stop once this many steps are complete (the run can be resumed).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub start_step: usize,
    pub step: usize,
    pub target: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Trains on the pairs file, checkpointing along the way. The final table
/// is written to the embeddings path and the per-step log is appended to
/// the log file.
pub fn train(config: &ExperimentConfig, options: &TrainOptions) -> Result<TrainSummary, CliError> {
    let paths = &config.paths;
    require(&paths.pairs, "pairs")?;
    let pairs = read_pairs_tsv(&paths.pairs)?;
    let dataset = PairDataset::from_pairs(&pairs);
    if dataset.is_empty() {
        return Err(CliError::usage(format!("{} holds no pairs", paths.pairs.display())));
    }
    let resuming = options.resume && paths.checkpoint.exists();
    let mut trainer = if resuming {
        let checkpoint = Checkpoint::load(&paths.checkpoint)?;
        log::info!("resuming from step {}", checkpoint.step);
        Trainer::from_checkpoint(&dataset, config.train.clone(), checkpoint)?
    } else {
        Trainer::new(&dataset, config.train.clone())?
    };
    let start_step = trainer.step();
    let target = options.stop_after.map_or(config.train.steps, |s| s.min(config.train.steps));
    for p in [&paths.checkpoint, &paths.embeddings, &paths.train_log] {
        ensure_parent(p)?;
    }

    let outcome = trainer.run_until(target, |ckpt| {
        log::debug!("checkpoint at step {}", ckpt.step);
        ckpt.save(&paths.checkpoint)
    });
    append_log(&paths.train_log, &trainer, resuming)?;
    if let Err(e) = outcome {
        if let Error::NonFiniteLoss { checkpoint, .. } = &e {
            export_embeddings(checkpoint, &paths.embeddings)?;
            log::error!("wrote the last good table to {}", paths.embeddings.display());
        }
        return Err(e.into());
    }
    trainer.checkpoint().save(&paths.checkpoint)?;
    export_embeddings(trainer.table(), &paths.embeddings)?;
    let log = trainer.log();
    let window = 100.min(log.records.len());
    Ok(TrainSummary {
        start_step,
        step: trainer.step(),
        target,
        initial_loss: log.initial_mean(window),
        final_loss: log.final_mean(window),
    })
}

fn append_log(path: &Path, trainer: &Trainer<'_>, resuming: bool) -> Result<(), CliError> {
    let append = resuming && path.exists();
    let mut buf = Vec::new();
    trainer.log().write_csv(&mut buf).map_err(|e| io_error(path, e))?;
    let body = if append {
        // drop the header line
        let start = buf.iter().position(|&b| b == b'\n').map_or(buf.len(), |i| i + 1);
        &buf[start..]
    } else {
        &buf[..]
    };
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| io_error(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(body).and_then(|_| w.flush()).map_err(|e| io_error(path, e))
}

/// Metrics for the trained table next to the same metrics for a fresh
/// random initialization of the same nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trained: MetricsReport,
    pub random_init: MetricsReport,
}

pub fn eval(config: &ExperimentConfig) -> Result<EvalReport, CliError> {
    let paths = &config.paths;
    for (p, what) in [
        (&paths.embeddings, "embeddings"),
        (&paths.nodes, "nodes"),
        (&paths.tree, "tree"),
        (&paths.pairs, "pairs"),
    ] {
        require(p, what)?;
    }
    let table = import_embeddings(&paths.embeddings)?;
    let catalog = Catalog::load_tsv(&paths.nodes)?;
    let tree = HierarchyTree::load(&paths.tree)?;
    let pairs = read_pairs_tsv(&paths.pairs)?;
    let settings = &config.eval;

    let mut random = init_embeddings(
        table.ids().to_vec(),
        table.dim(),
        config.train.init_scale,
        settings.seed,
        table.space,
    )?;
    random.log_tau = table.log_tau;
    random.log_c = table.log_c;

    let report = EvalReport {
        trained: evaluate(&table, &catalog, &tree, &pairs, settings)?,
        random_init: evaluate(&random, &catalog, &tree, &pairs, settings)?,
    };
    write_json(&paths.report, &report)?;
    ensure_parent(&paths.pr_csv)?;
    let file = File::create(&paths.pr_csv).map_err(|e| io_error(&paths.pr_csv, e))?;
    let mut w = BufWriter::new(file);
    write_pr_csv(
        &mut w,
        &[
            ("trained".to_string(), report.trained.pr_curve.clone()),
            ("random_init".to_string(), report.random_init.pr_curve.clone()),
        ],
    )
    .and_then(|_| w.flush())
    .map_err(|e| io_error(&paths.pr_csv, e))?;
    Ok(report)
}

/// Loads the snapshot the service answers from.
pub fn load_snapshot(config: &ExperimentConfig) -> Result<Snapshot, CliError> {
    let paths = &config.paths;
    require(&paths.embeddings, "embeddings")?;
    let table = import_embeddings(&paths.embeddings)?;
    let catalog = if paths.nodes.exists() {
        Catalog::load_tsv(&paths.nodes)?
    } else {
        log::warn!("{} not found; nodes will have no labels", paths.nodes.display());
        Catalog::default()
    };
    let tree = if paths.tree.exists() {
        HierarchyTree::load(&paths.tree)?
    } else {
        log::warn!("{} not found; serving an empty tree", paths.tree.display());
        HierarchyTree::default()
    };
    let mut snapshot = Snapshot::new(table, catalog, &tree, config.serve.default_k)?;
    snapshot.default_threshold = config.serve.default_threshold;
    Ok(snapshot)
}

/// Serves the snapshot until interrupted.
pub fn serve(config: &ExperimentConfig) -> Result<(), CliError> {
    let snapshot = Arc::new(load_snapshot(config)?);
    let app = router(snapshot, &config.serve.cors_origin);
    let addr = format!("{}:{}", config.serve.host, config.serve.port);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::failure(format!("starting runtime: {e}")))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::failure(format!("binding {addr}: {e}")))?;
        log::info!("listening on http://{addr}");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::failure(format!("server error: {e}")))
    })
}

/// Writes the balanced-tree fixture straight to the pairs, nodes and tree
/// files (no annotations are involved).
pub fn gen_tree(config: &ExperimentConfig, depth: usize, branching: usize) -> Result<usize, CliError> {
    if branching == 0 {
        return Err(CliError::usage("branching must be positive"));
    }
    let t = balanced_tree(depth, branching);
    let paths = &config.paths;
    for p in [&paths.pairs, &paths.nodes, &paths.tree] {
        ensure_parent(p)?;
    }
    write_pairs_tsv(&paths.pairs, &t.pairs)?;
    t.catalog.save_tsv(&paths.nodes)?;
    t.tree.save(&paths.tree)?;
    Ok(t.len())
}

/// Writes nested-scene annotations to the annotations file.
pub fn gen_scenes(config: &ExperimentConfig, scenes: &NestedScenes) -> Result<usize, CliError> {
    let boxes: Vec<BoundingBox> = nested_annotations(scenes);
    let path = &config.paths.annotations;
    ensure_parent(path)?;
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_error(path, e))?);
    for b in &boxes {
        let line = serde_json::to_string(b).map_err(Error::from)?;
        writeln!(w, "{line}").map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))?;
    Ok(boxes.len())
}
