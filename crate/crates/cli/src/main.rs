//! `chemigraph` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure. Failures end with a JSON trailer on standard error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chemigraph::config::read_config_file;
use chemigraph::engine::{BnMode, Real};
use chemigraph::featurize::{write_cache_file, CacheHeader, FeaturizeSummary, RADII_TABLE_VERSION};
use chemigraph::finetune::CandidatePool;
use chemigraph::molio::write_dataset;
use chemigraph::pipeline::{
    artifact_header, batch_plan, chronological, evaluate_records, load_graphs, predict_path, read_records,
    run_candidates, run_finetune, run_training, split_tail, write_json, write_predictions, ExperimentConfig,
};
use chemigraph::synth::generate;
use chemigraph::trainer::load_model;
use chemigraph::{Error, ErrorClass};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

/// Seed fallback when `--seed` is absent.
const SEED_ENV: &str = "CHEMIGRAPH_SEED";

#[derive(Parser, Debug)]
#[command(name = "chemigraph", version, about = "Graph-convolutional molecular property regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file with `model`, `train`, `ensemble`, `select`, `eval`
    /// and `synth` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every random choice; falls back to CHEMIGRAPH_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Results are bit-reproducible only with 1.
    #[arg(long, default_value_t = 1, global = true)]
    threads: usize,
    #[arg(long, value_enum, default_value_t = Precision::F32, global = true)]
    precision: Precision,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Featurize a dataset into a binary cache (chronological order).
    Featurize {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes checkpoints, epochs.jsonl and pool.json.
    Train {
        /// Training dataset or cache; overrides `train.train`.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Explicit test dataset; overrides `train.test`.
        #[arg(long)]
        test: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Predict every molecule of a dataset, in input order.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Test metrics plus accuracy binned by similarity to the training set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training dataset; without `--test` its newest share is the test set.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train an ensemble over the best checkpoints of a candidate pool.
    Finetune {
        /// Pool manifest (JSON array of checkpoint, config_id, epoch,
        /// val_rmse). Without it the default candidate configurations are
        /// trained first.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Members to keep; overrides `select`.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Print the batching plan of the first batch of a dataset.
    InspectBatchplan {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        /// Plan the training graph (grouped batch norm, loss) instead of inference.
        #[arg(long)]
        train_mode: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic labeled dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Featurize { common, .. }
            | Command::Train { common, .. }
            | Command::Predict { common, .. }
            | Command::Eval { common, .. }
            | Command::Finetune { common, .. }
            | Command::InspectBatchplan { common, .. }
            | Command::Synth { common } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Featurize { .. } => "featurize",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Eval { .. } => "eval",
            Command::Finetune { .. } => "finetune",
            Command::InspectBatchplan { .. } => "inspect-batchplan",
            Command::Synth { .. } => "synth",
        }
    }
}

fn resolve(common: &Common) -> chemigraph::Result<ExperimentConfig> {
    let seed = match common.seed {
        Some(s) => Some(s),
        None => match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}='{v}' is not an integer")))?),
            Err(_) => None,
        },
    };
    let file = common.config.as_deref().map(read_config_file).transpose()?;
    ExperimentConfig::resolve(file, &common.overrides, seed)
}

fn out_path(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn buffered(path: &Path) -> chemigraph::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn print_json(value: &serde_json::Value) -> chemigraph::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run<T: Real>(command: &Command, mut cfg: ExperimentConfig) -> chemigraph::Result<()> {
    let common = command.common();
    let seed = cfg.seed();
    match command {
        Command::Featurize { input, .. } => {
            let parsed = chemigraph::molio::read_dataset_file(input)?;
            let records = chronological(parsed.records)?;
            let graphs = chemigraph::featurize::featurize_all(&records, &cfg.train.featurize);
            let header = CacheHeader {
                options: cfg.train.featurize,
                radii_table: RADII_TABLE_VERSION,
                seed,
                config: cfg.to_value(),
            };
            let out = out_path(common, "features.cache");
            write_cache_file(&out, &header, &graphs)?;
            print_json(&json!(FeaturizeSummary::of(&graphs, parsed.unknown_elements)))
        }
        Command::Train { train, test, .. } => {
            if train.is_some() {
                cfg.train.train = train.clone();
            }
            if test.is_some() {
                cfg.train.test = test.clone();
            }
            let out = out_path(common, "chemigraph-train");
            let run = run_training::<T>(&cfg, Some(&out))?;
            let summary = json!({
                "out": out,
                "epochs": run.outcome.records.len(),
                "test": run.test_metrics,
                "final": run.outcome.records.last(),
            });
            print_json(&summary)
        }
        Command::Predict { checkpoint, input, .. } => {
            let model = load_model::<T>(checkpoint)?;
            let preds = predict_path(&model, input, &cfg.train.featurize, cfg.train.batch_size)?;
            let out = out_path(common, "predictions.jsonl");
            let mut w = buffered(&out)?;
            write_predictions(&mut w, &preds, &cfg.to_value(), seed)?;
            w.flush()?;
            log::info!("{} predictions written to {}", preds.len(), out.display());
            Ok(())
        }
        Command::Eval { checkpoint, train, test, .. } => {
            let model = load_model::<T>(checkpoint)?;
            let train_records = chronological(read_records(train)?)?;
            let (train_records, test_records) = match test {
                Some(t) => (train_records, read_records(t)?),
                None => split_tail(train_records, cfg.train.test_fraction),
            };
            let report = evaluate_records(&model, &train_records, &test_records, &cfg)?;
            let mut doc = artifact_header("eval", &cfg.to_value(), seed);
            doc["report"] = serde_json::to_value(&report)?;
            if let Some(out) = &common.out {
                write_json(out, &doc)?;
            }
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Finetune { manifest, k, train, .. } => {
            if let Some(k) = k {
                cfg.select = *k;
            }
            if train.is_some() {
                cfg.train.train = train.clone();
            }
            let out = out_path(common, "chemigraph-finetune");
            let pool = match manifest {
                Some(m) => CandidatePool::read_manifest(m)?,
                None => {
                    let pool = run_candidates::<T>(&cfg, &out.join("candidates"))?;
                    write_json(&out.join("pool.json"), &serde_json::to_value(&pool)?)?;
                    pool
                }
            };
            let outcome = run_finetune::<T>(&cfg, &pool, Some(&out))?;
            print_json(&json!({
                "out": out,
                "members": outcome.ensemble.members,
                "final": outcome.records.last(),
            }))
        }
        Command::InspectBatchplan { checkpoint, input, batch, train_mode, .. } => {
            let model = load_model::<T>(checkpoint)?;
            let graphs = load_graphs(input, &cfg.train.featurize, false)?;
            let mode = if *train_mode { BnMode::Train } else { BnMode::Infer };
            let plan = batch_plan(&model, &graphs, *batch, mode)?;
            let header = format!("# {}\n", artifact_header("batchplan", &cfg.to_value(), seed));
            match &common.out {
                Some(out) => {
                    let mut w = buffered(out)?;
                    w.write_all(header.as_bytes())?;
                    w.write_all(plan.as_bytes())?;
                    w.flush()?;
                }
                None => print!("{header}{plan}"),
            }
            Ok(())
        }
        Command::Synth { .. } => {
            let records = generate(&cfg.synth)?;
            let out = out_path(common, "synth.jsonl");
            let mut w = buffered(&out)?;
            write_dataset(&records, &mut w)?;
            w.flush()?;
            log::info!("{} molecules written to {}", records.len(), out.display());
            Ok(())
        }
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn fail(message: &str, code: u8) -> ExitCode {
    eprintln!("error: {message}");
    eprintln!("{}", json!({ "error": message, "code": code }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{}", e.render());
            eprintln!("{}", json!({ "error": e.kind().to_string(), "code": 1 }));
            return ExitCode::from(1);
        }
    };
    let common = cli.command.common();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(common.threads.max(1)).build_global() {
        return fail(&format!("thread pool: {e}"), 1);
    }
    let result = resolve(common).and_then(|cfg| {
        log::info!("{} seed {} precision {:?}", cli.command.name(), cfg.seed(), common.precision);
        match common.precision {
            Precision::F32 => run::<f32>(&cli.command, cfg),
            Precision::F64 => run::<f64>(&cli.command, cfg),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e.to_string(), exit_code(e.class())),
    }
}
