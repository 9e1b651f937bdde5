use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sreflect::experiment::{
    artifact_root, content_hash, emit_tables, guarded, prepare_dataset, run_experiment, scores_jsonl, stage_evaluate, stage_finetune,
    stage_generate, stage_train, write_with_stats, ArtifactPaths, ExperimentConfig, MetricsReport,
};
use sreflect::graph::{Dataset, GraphInstance, Split, UpdateMode};
use sreflect::datagen::DatasetKind;
use sreflect::io::read_dataset;
use sreflect::model::ModelState;
use sreflect::reflection::reflect_batch;
use sreflect::{Error, Stage};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

/// Spurious-motif benchmarks, interpretable graph classifiers and self-reflective
/// edge masks. Outputs go to $SREFLECT_ARTIFACTS (default ./artifacts) unless
/// a path is given.
#[derive(Debug, Parser)]
#[command(name = "sreflect", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset from a config, flags, or both (flags win).
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        kind: Option<DatasetKind>,
        /// Train/valid bias.
        #[arg(long)]
        b: Option<f64>,
        /// Number of graphs.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset file; the statistics go next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the base model (dataset from --data, the artifact root, or generated).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fine-tune a base checkpoint with the reflection-aware objective.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, alias = "from")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write per-graph, per-iteration edge scores of one split.
    Reflect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value = "accumulate")]
        mode: UpdateMode,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reflection sweeps, metrics report, tables and plots for trained checkpoints.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        finetuned: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Mean ± std comparison table over report files.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// The whole pipeline: generate, train, optional fine-tune, evaluate.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_or_generate(cfg: &ExperimentConfig, paths: &ArtifactPaths, data: Option<&Path>) -> sreflect::Result<Dataset> {
    if let Some(p) = data {
        return read_dataset(p).map_err(|e| e.in_stage(Stage::Generate));
    }
    if paths.dataset().exists() {
        return read_dataset(paths.dataset()).map_err(|e| e.in_stage(Stage::Generate));
    }
    stage_generate(cfg, paths)
}

fn load_checkpoint(path: &Path, stage: Stage) -> sreflect::Result<ModelState> {
    ModelState::load(path).map_err(|e| e.in_stage(stage))
}

fn run(cli: Cli) -> sreflect::Result<()> {
    let root = artifact_root();
    match cli.command {
        Command::Generate {
            config,
            kind,
            b,
            n,
            seed,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            let d = &mut cfg.dataset;
            d.kind = kind.unwrap_or(d.kind);
            d.bias = b.unwrap_or(d.bias);
            d.num_graphs = n.unwrap_or(d.num_graphs);
            d.seed = seed.unwrap_or(d.seed);
            cfg.validate()?;
            match out {
                Some(out) => {
                    let dataset = prepare_dataset(&cfg)?;
                    write_with_stats(&dataset, &out, &out.with_extension("stats.json"))?;
                    println!("{}", out.display());
                }
                None => {
                    let paths = ArtifactPaths::new(&root, &cfg.hash());
                    guarded(&paths, || stage_generate(&cfg, &paths))?;
                    println!("{}", paths.dataset().display());
                }
            }
        }
        Command::Train { config, data } => {
            let cfg = ExperimentConfig::load(&config)?;
            let paths = ArtifactPaths::new(&root, &cfg.hash());
            guarded(&paths, || {
                let dataset = load_or_generate(&cfg, &paths, data.as_deref())?;
                stage_train(&cfg, &paths, &dataset)
            })?;
            println!("{}", paths.base_checkpoint().display());
        }
        Command::Finetune { config, checkpoint, data } => {
            let cfg = ExperimentConfig::load(&config)?;
            let paths = ArtifactPaths::new(&root, &cfg.hash());
            guarded(&paths, || {
                let dataset = load_or_generate(&cfg, &paths, data.as_deref())?;
                let base = load_checkpoint(&checkpoint.unwrap_or_else(|| paths.base_checkpoint()), Stage::Finetune)?;
                stage_finetune(&cfg, &paths, &dataset, &base)
            })?;
            println!("{}", paths.finetuned_checkpoint().display());
        }
        Command::Reflect {
            checkpoint,
            data,
            k,
            mode,
            split,
            out,
        } => {
            let state = load_checkpoint(&checkpoint, Stage::Reflect)?;
            let dataset = read_dataset(&data).map_err(|e| e.in_stage(Stage::Reflect))?;
            let indices = dataset.split_indices(split);
            let graphs: Vec<&GraphInstance> = indices.iter().map(|&i| &dataset.graphs[i]).collect();
            let runs = reflect_batch(&graphs, &state, k, mode).map_err(|e| e.in_stage(Stage::Reflect))?;
            let text = scores_jsonl(&indices, &runs)?;
            let out = match out {
                Some(p) => p,
                None => {
                    let tag = state
                        .meta
                        .config_hash
                        .clone()
                        .unwrap_or_else(|| content_hash(&state.to_bytes().unwrap_or_default()));
                    let paths = ArtifactPaths::new(&root, &tag);
                    std::fs::create_dir_all(&root).map_err(Error::Io)?;
                    paths.file(&format!("scores-{split}-{mode}-k{k}"), "jsonl")
                }
            };
            std::fs::write(&out, text).map_err(|e| Error::Io(e).in_stage(Stage::Reflect))?;
            println!("{}", out.display());
        }
        Command::Evaluate {
            config,
            checkpoint,
            finetuned,
            data,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let paths = ArtifactPaths::new(&root, &cfg.hash());
            let report = guarded(&paths, || {
                let dataset = load_or_generate(&cfg, &paths, data.as_deref())?;
                let base = load_checkpoint(&checkpoint.unwrap_or_else(|| paths.base_checkpoint()), Stage::Evaluate)?;
                let tuned_path = finetuned.or_else(|| {
                    let p = paths.finetuned_checkpoint();
                    p.exists().then_some(p)
                });
                let tuned = tuned_path.map(|p| load_checkpoint(&p, Stage::Evaluate)).transpose()?;
                let mut models = vec![("base", &base)];
                if let Some(t) = &tuned {
                    models.push(("finetuned", t));
                }
                stage_evaluate(&cfg, &paths, &dataset, &models)
            })?;
            print!("{}", emit_tables(std::slice::from_ref(&report))?);
            println!("{}", paths.report().display());
        }
        Command::Report { reports, out } => {
            let loaded = reports
                .iter()
                .map(MetricsReport::load)
                .collect::<sreflect::Result<Vec<_>>>()
                .map_err(|e| e.in_stage(Stage::Report))?;
            let table = emit_tables(&loaded).map_err(|e| e.in_stage(Stage::Report))?;
            match out {
                Some(p) => std::fs::write(&p, table).map_err(|e| Error::Io(e).in_stage(Stage::Report))?,
                None => print!("{table}"),
            }
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run_experiment(&cfg, &root)?;
            print!("{}", emit_tables(std::slice::from_ref(&report))?);
            println!("{}", ArtifactPaths::new(&root, &cfg.hash()).report().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    sreflect::tune_allocator();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_STAGE)
            }
        }
    }
}
