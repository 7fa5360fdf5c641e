//! `blkrew`: train, prune, reorder, run and benchmark block-pruned networks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use blkrew::bench::{bench, bench_layer};
use blkrew::config::RunConfig;
use blkrew::infer::Executor;
use blkrew::model_file::MAGIC;
use blkrew::nn::evaluate;
use blkrew::prune::{pretrain, run_pipeline, train_dense};
use blkrew::report::{summarize, write_report, BenchReport, InferReport, TrainReport};
use blkrew::{Dataset, Error, LayerWeights, ModelFile, Network, Result};

#[derive(Parser)]
#[command(
    name = "blkrew",
    version,
    about = "Block-based structured pruning with reweighted group lasso"
)]
struct Cli {
    /// Threads for sparse execution; defaults to the config's `workers`, then all cores.
    #[arg(long, global = true, env = "BLKREW_THREADS")]
    workers: Option<usize>,

    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory receiving JSON reports.
    #[arg(long, global = true, default_value = "reports")]
    report_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense network and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regularize, prune and retrain; pretrains first when no checkpoint is given.
    Prune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a pruned model to the reordered execution layout.
    Reorder {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional config supplying `fuzzy_merge`.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a model file on the configured dataset.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Time dense, naive sparse and reordered execution.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Benchmark this model's layers instead of synthetic shapes.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pretty-print a JSON report, or summarize a model file.
    Report { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.set("seed", s);
    }
    Ok(cfg)
}

fn workers(cli: Option<usize>, cfg: Option<&RunConfig>) -> Result<usize> {
    let from_cfg = match cfg {
        Some(c) => c.workers()?,
        None => None,
    };
    let n = cli
        .or(from_cfg)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(Error::Config("workers must be >= 1".into()));
    }
    Ok(n)
}

fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    cfg.dataset()?.load()?.split(cfg.test_fraction()?)
}

fn emit<T: serde::Serialize>(dir: &Path, command: &str, seed: u64, value: &T) -> Result<()> {
    let path = write_report(dir, command, seed, value)?;
    println!("report: {}", path.display());
    Ok(())
}

fn train(cli: &Cli, config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config, cli.seed)?;
    cfg.require("train")?;
    let (train_set, test_set) = datasets(&cfg)?;
    let seed = cfg.seed()?;
    let tcfg = cfg.train()?;
    let epochs = cfg.epochs()?;
    let mut net = Network::init(
        cfg.architecture(train_set.dim(), train_set.classes())?,
        seed,
    )?;
    let mut state = blkrew::nn::TrainState::new(&tcfg, seed)?;
    let final_loss = train_dense(&mut net, &train_set, &tcfg, &mut state, epochs)?;
    let schemes = match cfg.get::<blkrew::BlockShape>("block")? {
        Some(b) => Some(
            b.schemes(net.weights())?
                .into_iter()
                .map(|s| s.0)
                .collect::<Vec<_>>(),
        ),
        None => None,
    };
    ModelFile::dense(&net, schemes.as_deref())?.save(out)?;
    let report = TrainReport {
        seed,
        epochs,
        final_loss,
        train_accuracy: evaluate(&net, &train_set)?,
        test_accuracy: evaluate(&net, &test_set)?,
        train_samples: train_set.len(),
        test_samples: test_set.len(),
        weights: net.weight_count(),
    };
    println!(
        "trained {} epochs: loss {:.4}, train accuracy {:.4}, test accuracy {:.4}",
        epochs, final_loss, report.train_accuracy, report.test_accuracy
    );
    emit(&cli.report_dir, "train", seed, &report)
}

fn prune(cli: &Cli, config: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config, cli.seed)?;
    cfg.require("prune")?;
    let pcfg = cfg.pipeline()?;
    let (train_set, test_set) = datasets(&cfg)?;
    let (pretrained, pretrain_epochs) = match checkpoint {
        Some(path) => (ModelFile::load(path)?.to_network()?, 0),
        None => {
            let epochs = cfg.epochs()?;
            info!("no checkpoint given; pretraining for {} epochs", epochs);
            let arch = cfg.architecture(train_set.dim(), train_set.classes())?;
            (
                pretrain(arch, &train_set, &pcfg.train, epochs, pcfg.seed)?,
                epochs,
            )
        }
    };
    if pretrained.input_len() != train_set.dim() || pretrained.classes() != train_set.classes() {
        return Err(Error::Shape(format!(
            "checkpoint expects {} features and {} classes, dataset has {} and {}",
            pretrained.input_len(),
            pretrained.classes(),
            train_set.dim(),
            train_set.classes()
        )));
    }
    let outcome = run_pipeline(pretrained, &train_set, &test_set, &pcfg, pretrain_epochs)?;
    ModelFile::masked(&outcome.pruned, &outcome.mask)?.save(out)?;
    let r = &outcome.report;
    println!(
        "compression {:.2}x ({} of {} weights), test accuracy {:.4} -> {:.4}",
        r.compression_rate,
        r.surviving_weights,
        r.total_weights,
        r.base_test_accuracy,
        r.pruned_test_accuracy
    );
    emit(&cli.report_dir, "prune", pcfg.seed, r)
}

fn reorder(config: Option<&Path>, checkpoint: &Path, out: &Path) -> Result<()> {
    let fuzzy = match config {
        Some(c) => RunConfig::load(c)?.fuzzy_merge()?,
        None => None,
    };
    let model = ModelFile::load(checkpoint)?;
    let reordered = model.reorder(fuzzy)?;
    reordered.save(out)?;
    let groups: Vec<String> = reordered
        .params
        .iter()
        .map(|p| match &p.weights {
            LayerWeights::Reordered { model, .. } => model.groups.len().to_string(),
            _ => "-".into(),
        })
        .collect();
    println!(
        "reordered {} layers, row groups per layer: {}",
        groups.len(),
        groups.join(", ")
    );
    Ok(())
}

fn infer(cli: &Cli, config: &Path, checkpoint: &Path, split: Split) -> Result<()> {
    let cfg = load_config(config, cli.seed)?;
    cfg.require("infer")?;
    let model = ModelFile::load(checkpoint)?;
    let data = match split {
        Split::All => cfg.dataset()?.load()?,
        Split::Train => datasets(&cfg)?.0,
        Split::Test => datasets(&cfg)?.1,
    };
    let workers = workers(cli.workers, Some(&cfg))?;
    let accuracy = Executor::new(&model, workers)?.accuracy(&data)?;
    let report = InferReport {
        split: split.name().into(),
        samples: data.len(),
        workers,
        accuracy,
        representations: model
            .params
            .iter()
            .map(|p| p.weights.kind().to_string())
            .collect(),
    };
    println!(
        "accuracy {} on {} {} samples",
        accuracy,
        data.len(),
        split.name()
    );
    emit(&cli.report_dir, "infer", cfg.seed()?, &report)
}

fn run_bench(cli: &Cli, config: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(c) => load_config(c, cli.seed)?,
        None => {
            let mut c = RunConfig::default();
            if let Some(s) = cli.seed {
                c.set("seed", s);
            }
            c
        }
    };
    let workers = workers(cli.workers, Some(&cfg))?;
    let repeats = cfg.repeats()?;
    let seed = cfg.seed()?;
    let rows = match checkpoint {
        Some(path) => {
            let model = ModelFile::load(path)?;
            let n = cfg.bench_batch()?;
            model
                .sparse_mask()
                .layers
                .iter()
                .zip(&model.params)
                .map(|(mask, p)| {
                    bench_layer(&p.weights.to_dense(), mask, n, workers, repeats, seed)
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => bench(
            &cfg.bench_shapes()?,
            cfg.bench_block()?,
            workers,
            repeats,
            seed,
        )?,
    };
    for r in &rows {
        println!(
            "{}x{}x{} sparsity {:.3}: dense {:.3} ms, naive {:.3} ms, reordered {:.3} ms",
            r.shape.rows,
            r.shape.cols,
            r.shape.n,
            r.sparsity,
            r.dense.median_ms,
            r.naive_sparse.median_ms,
            r.reordered.median_ms
        );
    }
    emit(
        &cli.report_dir,
        "bench",
        seed,
        &BenchReport {
            workers,
            repeats,
            rows,
        },
    )
}

fn report(cli: &Cli, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let value = if bytes.starts_with(MAGIC) {
        let model = ModelFile::decode(&bytes)?;
        serde_json::to_value(summarize(&model, workers(cli.workers, None)?))?
    } else {
        serde_json::from_slice::<serde_json::Value>(&bytes)?
    };
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { config, out } => train(cli, config, out),
        Command::Prune {
            config,
            checkpoint,
            out,
        } => prune(cli, config, checkpoint.as_deref(), out),
        Command::Reorder {
            checkpoint,
            out,
            config,
        } => reorder(config.as_deref(), checkpoint, out),
        Command::Infer {
            config,
            checkpoint,
            split,
        } => infer(cli, config, checkpoint, *split),
        Command::Bench { config, checkpoint } => {
            run_bench(cli, config.as_deref(), checkpoint.as_deref())
        }
        Command::Report { path } => report(cli, path),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
