//! `methotax`: run the taxonomy pipeline stage by stage or end to end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use methotax::pipeline::{artifacts, with_thread_pool, Pipeline, PipelineConfig, PipelineError};

const OUTPUT_ENV: &str = "METHOTAX_OUTPUT_DIR";
const DEFAULT_OUTPUT: &str = "methotax-out";

#[derive(Parser, Debug)]
#[command(name = "methotax", version, about = "Build a five-level methodology taxonomy from a labelled corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory for artifacts and the manifest.
    #[arg(long, value_name = "DIR", env = OUTPUT_ENV)]
    output: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Sequential embedding training with a single random stream.
    #[arg(long)]
    deterministic: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
    /// Override any config key, e.g. `--set sweeps.kmeans.restarts=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    set: Vec<(String, String)>,
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment and tokenize the corpus; write token streams and vocabulary.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "N")]
        min_frequency: Option<u64>,
        #[arg(long, value_name = "N")]
        min_count: Option<u64>,
    },
    /// Train skip-gram embeddings.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "N")]
        dim: Option<usize>,
        #[arg(long, value_name = "N")]
        window: Option<usize>,
        #[arg(long, value_name = "N")]
        negatives: Option<usize>,
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
        #[arg(long, value_name = "RATE")]
        learning_rate: Option<f64>,
    },
    /// Assign entities to categories by chi-square.
    Assign {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "N")]
        min_entities: Option<usize>,
    },
    /// Sweep the three clustering algorithms per eligible category.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "N")]
        min_clusters: Option<usize>,
        #[arg(long, value_name = "N")]
        restarts: Option<usize>,
        /// `cosine` or `euclidean_normalized`.
        #[arg(long, value_name = "KIND")]
        dissimilarity: Option<String>,
        /// `nearest_cluster_mean` or `nearest_point`.
        #[arg(long, value_name = "KIND")]
        separation: Option<String>,
    },
    /// Select the best runs and compare the algorithms.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// `auto`, `ap`, `agglomerative` or `kmeans`.
        #[arg(long, value_name = "NAME")]
        algorithm: Option<String>,
    },
    /// Assemble the five-level taxonomy.
    Build {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "N")]
        top_k: Option<usize>,
        #[arg(long, value_name = "PATH")]
        tag_overrides: Option<PathBuf>,
    },
    /// Render the taxonomy as a static HTML page.
    Export {
        #[command(flatten)]
        common: Common,
    },
    /// Run every stage in order.
    RunAll {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_assignment(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

/// Typed per-subcommand flags become config overrides.
fn push<T: ToString>(sets: &mut Vec<(String, String)>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        sets.push((key.to_string(), v.to_string()));
    }
}

fn quoted(s: Option<String>) -> Option<String> {
    s.map(|v| format!("\"{}\"", v.replace('\\', "\\\\").replace('"', "\\\"")))
}

fn path_value(p: Option<PathBuf>) -> Option<String> {
    quoted(p.map(|p| absolute(&p).display().to_string()))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

impl Command {
    fn split(self) -> (Common, Vec<(String, String)>) {
        let mut sets = Vec::new();
        let common = match self {
            Command::Ingest {
                common,
                min_frequency,
                min_count,
            } => {
                push(&mut sets, "preprocessing.min_frequency", min_frequency);
                push(&mut sets, "preprocessing.min_count", min_count);
                common
            }
            Command::Train {
                common,
                dim,
                window,
                negatives,
                epochs,
                learning_rate,
            } => {
                push(&mut sets, "embedding.dim", dim);
                push(&mut sets, "embedding.window", window);
                push(&mut sets, "embedding.negatives", negatives);
                push(&mut sets, "embedding.epochs", epochs);
                push(&mut sets, "embedding.learning_rate", learning_rate);
                common
            }
            Command::Assign { common, min_entities } => {
                push(&mut sets, "assignment.min_entities", min_entities);
                common
            }
            Command::Cluster {
                common,
                min_clusters,
                restarts,
                dissimilarity,
                separation,
            } => {
                push(&mut sets, "sweeps.min_clusters", min_clusters);
                push(&mut sets, "sweeps.kmeans.restarts", restarts);
                push(&mut sets, "evaluation.dissimilarity", quoted(dissimilarity));
                push(&mut sets, "evaluation.separation", quoted(separation));
                common
            }
            Command::Evaluate { common, algorithm } => {
                push(&mut sets, "taxonomy.algorithm", quoted(algorithm));
                common
            }
            Command::Build {
                common,
                top_k,
                tag_overrides,
            } => {
                push(&mut sets, "taxonomy.top_k", top_k);
                push(&mut sets, "paths.tag_overrides", path_value(tag_overrides));
                common
            }
            Command::Export { common } | Command::RunAll { common } => common,
        };
        (common, sets)
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_target(false)
        .try_init();
}

fn run(command: Command) -> Result<(), PipelineError> {
    let name = command_name(&command);
    let (common, mut sets) = command.split();
    init_logging(common.verbose);
    // Generic `--set` pairs come first so typed flags and globals win.
    let mut overrides = common.set.clone();
    overrides.append(&mut sets);
    push(&mut overrides, "seed", common.seed);
    push(&mut overrides, "jobs", common.jobs);
    if common.deterministic {
        overrides.push(("deterministic".into(), "true".into()));
    }
    let config = PipelineConfig::load(&common.config, &overrides)?;
    let output = common
        .output
        .clone()
        .or_else(|| config.paths.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
    let jobs = config.jobs;
    let pipeline = Pipeline::new(config, output)?;
    with_thread_pool(jobs, || execute(&name, &pipeline))?
}

fn command_name(c: &Command) -> String {
    match c {
        Command::Ingest { .. } => "ingest",
        Command::Train { .. } => "train",
        Command::Assign { .. } => "assign",
        Command::Cluster { .. } => "cluster",
        Command::Evaluate { .. } => "evaluate",
        Command::Build { .. } => "build",
        Command::Export { .. } => "export",
        Command::RunAll { .. } => "run-all",
    }
    .to_string()
}

fn execute(name: &str, p: &Pipeline) -> Result<(), PipelineError> {
    match name {
        "ingest" => {
            let r = p.ingest()?;
            println!(
                "ingest: {} documents ({} labelled), {} sentences, {} tokens, {} entities, vocabulary {}",
                r.documents, r.labeled_documents, r.sentences, r.tokens, r.lexicon_size, r.vocabulary_size
            );
        }
        "train" => {
            let r = p.train()?;
            println!(
                "train: {} pairs per epoch, loss {:.4} -> {:.4}",
                r.pairs_per_epoch,
                r.initial_loss(),
                r.final_loss()
            );
        }
        "assign" => {
            let r = p.assign()?;
            println!(
                "assign: {} of {} entities assigned ({} ties); eligible: {}",
                r.assigned,
                r.entities,
                r.ties,
                if r.eligible.is_empty() { "none".to_string() } else { r.eligible.join(", ") }
            );
        }
        "cluster" => {
            let r = p.cluster()?;
            println!(
                "cluster: {} categories, {} attempts, {} runs recorded",
                r.categories, r.attempts, r.recorded
            );
        }
        "evaluate" => {
            let c = p.evaluate()?;
            let ranking: Vec<String> = c.report.ranking.iter().map(|a| a.to_string()).collect();
            println!(
                "evaluate: ranking {}; taxonomy uses {}",
                ranking.join(" > "),
                c.selected_algorithm.map_or("-".to_string(), |a| a.to_string())
            );
        }
        "build" => {
            let t = p.build()?;
            println!(
                "build: {} level-4 nodes -> {}",
                t.nodes_at(4).len(),
                p.path(artifacts::TAXONOMY_JSON).display()
            );
        }
        "export" => {
            let html = p.export()?;
            println!("export: {}", html.display());
        }
        "run-all" => {
            let t = p.run_all()?;
            println!(
                "run-all: {} level-4 nodes; {} and {}",
                t.nodes_at(4).len(),
                p.path(artifacts::TAXONOMY_JSON).display(),
                p.path(artifacts::TAXONOMY_HTML).display()
            );
        }
        other => return Err(PipelineError::Internal(format!("unknown command {other}"))),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match std::panic::catch_unwind(|| run(cli.command)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => ExitCode::from(3),
    }
}
