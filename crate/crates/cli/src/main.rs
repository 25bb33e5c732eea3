use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hierlens_core::geometry::SpaceKind;
use hierlens_core::loss::NegativeMode;
use hierlens_core::synthetic::NestedScenes;
use hierlens_cli::commands::{self, TrainOptions};
use hierlens_cli::config::ExperimentConfig;
use hierlens_cli::CliError;

#[derive(Parser)]
#[command(name = "hierlens", version, about = "Hierarchy-aware embedding pipeline and retrieval service")]
struct Cli {
    /// TOML experiment config; relative paths inside it follow its location.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for pair sampling, training and the evaluation baseline.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Annotations to entailment pairs, pair counts and node catalog.
    MakePairs {
        /// Skip invalid annotation records instead of failing.
        #[arg(long)]
        lenient: bool,
    },
    /// Label hierarchy from pair statistics.
    BuildTree {
        #[arg(long)]
        min_frequency: Option<usize>,
        #[arg(long)]
        min_proportion: Option<f64>,
    },
    /// Train the embedding table.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from the checkpoint file when present.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed steps.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Retrieval, transport and PR metrics for the trained table.
    Eval {
        /// Recall cutoffs (repeatable); replaces the configured list.
        #[arg(long = "k")]
        ks: Vec<usize>,
    },
    /// HTTP retrieval service.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        /// Result count for requests that name none.
        #[arg(long)]
        k: Option<usize>,
        /// Angle threshold (radians) for requests that name none.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Synthetic inputs.
    #[command(subcommand)]
    GenSynthetic(Synthetic),
}

#[derive(Args)]
struct ModelArgs {
    /// hyp or euc
    #[arg(long)]
    space: Option<SpaceKind>,
    /// oracle or batch
    #[arg(long)]
    neg_mode: Option<NegativeMode>,
}

#[derive(Subcommand)]
enum Synthetic {
    /// Balanced label tree written as pairs, nodes and tree files.
    Tree {
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long, default_value_t = 3)]
        branching: usize,
    },
    /// Nested object/part scenes written as annotations.
    Scenes {
        #[arg(long, default_value_t = 60)]
        images: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = ExperimentConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.pairs.seed = seed;
        config.train.seed = seed;
        config.eval.seed = seed;
    }
    match cli.command {
        Command::MakePairs { lenient } => {
            config.validate()?;
            let s = commands::make_pairs(&config, lenient)?;
            println!(
                "{} boxes -> {} pairs ({} scene-box, {} box-box, {} cross-image)",
                s.boxes, s.counts.total, s.counts.scene_to_box, s.counts.box_to_box, s.counts.cross_image
            );
        }
        Command::BuildTree {
            min_frequency,
            min_proportion,
        } => {
            if let Some(f) = min_frequency {
                config.tree.min_frequency = f;
            }
            if let Some(p) = min_proportion {
                config.tree.min_proportion = p;
            }
            config.validate()?;
            let s = commands::build_tree(&config)?;
            println!(
                "kept {} of {} label edges ({} removed to break cycles)",
                s.kept_edges, s.candidate_edges, s.removed_for_cycles
            );
        }
        Command::Train {
            model,
            steps,
            resume,
            stop_after,
        } => {
            if let Some(space) = model.space {
                config.train.space = space;
            }
            if let Some(mode) = model.neg_mode {
                config.train.negative_mode = mode;
            }
            if let Some(steps) = steps {
                config.train.steps = steps;
            }
            config.validate()?;
            let s = commands::train(&config, &TrainOptions { resume, stop_after })?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "trained steps {}..{} of {}; loss {} -> {}",
                s.start_step,
                s.step,
                config.train.steps,
                fmt(s.initial_loss),
                fmt(s.final_loss)
            );
        }
        Command::Eval { ks } => {
            if !ks.is_empty() {
                config.eval.ks = ks;
            }
            config.validate()?;
            let r = commands::eval(&config)?;
            let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.1}%"));
            let num = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "hierarchical recall {} (random {}); OT {} (random {}); PR area {:.4} (random {:.4})",
                pct(r.trained.hierarchical_recall.value),
                pct(r.random_init.hierarchical_recall.value),
                num(r.trained.ot_distance),
                num(r.random_init.ot_distance),
                r.trained.pr_area,
                r.random_init.pr_area
            );
        }
        Command::Serve { host, port, k, threshold } => {
            if let Some(host) = host {
                config.serve.host = host;
            }
            if let Some(port) = port {
                config.serve.port = port;
            }
            if let Some(k) = k {
                config.serve.default_k = k;
            }
            if let Some(t) = threshold {
                config.serve.default_threshold = t;
            }
            config.validate()?;
            commands::serve(&config)?;
        }
        Command::GenSynthetic(Synthetic::Tree { depth, branching }) => {
            let n = commands::gen_tree(&config, depth, branching)?;
            println!("wrote a {n}-node tree");
        }
        Command::GenSynthetic(Synthetic::Scenes { images }) => {
            let scenes = NestedScenes {
                images,
                seed: config.pairs.seed,
                ..NestedScenes::default()
            };
            let n = commands::gen_scenes(&config, &scenes)?;
            println!("wrote {n} boxes");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
