//! `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown or repeated keys are errors and every error names the file and
//! line it came from.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bench::BenchShape;
use crate::blocks::Directions;
use crate::data::{BlobSpec, DatasetSpec};
use crate::error::{Error, Result};
use crate::nn::{mlp, LayerSpec, TrainConfig};
use crate::prune::{Baseline, BlockShape, PipelineConfig, PruneConfig, Schedule, ThresholdMode};
use crate::regularize::{Epsilon, RegConfig, RegMode};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("task", "dataset source: synthetic, csv or idx"),
    ("seed", "seed for initialization and shuffling"),
    ("lr", "SGD learning rate"),
    ("epochs", "dense (pre)training epochs"),
    ("lambda", "group-lasso coefficient shared by all layers"),
    (
        "epsilon_scale",
        "penalty guard as a multiple of the mean initial squared group norm",
    ),
    ("directions", "row, column or both"),
    ("block", "block size MxN, or whole"),
    ("T", "outer reweighting iterations"),
    ("tau", "pruning threshold"),
    ("threshold_mode", "relative or absolute"),
    ("retrain_epochs", "masked fine-tuning epochs"),
    ("workers", "threads for sparse execution"),
    ("hidden", "hidden layer widths, comma separated"),
    ("batch_size", "minibatch size"),
    ("momentum", "SGD momentum in [0, 1)"),
    ("mode", "reweighted or static_lasso"),
    (
        "epochs_per_iteration",
        "SGD epochs per reweighting iteration",
    ),
    ("baseline", "none, static_lasso or magnitude"),
    (
        "target_rate",
        "compression target of the magnitude baseline",
    ),
    (
        "floor",
        "keep one group per layer instead of failing (true/false)",
    ),
    ("schedule", "simultaneous or sequential row/column phases"),
    (
        "fuzzy_merge",
        "merge row classes differing in at most this many block-columns",
    ),
    ("classes", "synthetic: class count"),
    ("features", "synthetic: input dimension"),
    ("samples", "synthetic: sample count"),
    ("noise", "synthetic: per-sample noise standard deviation"),
    ("data_seed", "synthetic: dataset seed (defaults to seed)"),
    ("data", "csv: path to the data file"),
    ("images", "idx: path to the image file"),
    ("labels", "idx: path to the label file"),
    ("test_fraction", "trailing fraction held out for evaluation"),
    ("bench_shapes", "comma separated RxCxN GEMM shapes"),
    (
        "bench_sparsity",
        "fraction of weights removed in bench layers",
    ),
    ("bench_block", "block size of bench layers, MxN"),
    ("repeats", "timed repetitions per bench variant"),
    (
        "bench_batch",
        "input columns when benchmarking a model's own layers",
    ),
];

/// Keys each subcommand cannot run without.
pub fn required_keys(command: &str) -> &'static [&'static str] {
    match command {
        "train" => &["task", "seed", "lr", "epochs"],
        "prune" => &[
            "task",
            "seed",
            "lr",
            "lambda",
            "block",
            "T",
            "tau",
            "retrain_epochs",
        ],
        "infer" => &["task"],
        _ => &[],
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    line: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    origin: String,
    base: PathBuf,
    entries: BTreeMap<String, Entry>,
}

impl RunConfig {
    /// `origin` labels error messages; relative paths resolve against `base`.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self {
            origin: origin.to_string(),
            base: base.to_path_buf(),
            entries: BTreeMap::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                cfg.err(line, format!("expected `key = value`, got {:?}", content))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(cfg.err(line, format!("unknown key `{}`", key)));
            }
            if value.is_empty() {
                return Err(cfg.err(line, format!("key `{}` has no value", key)));
            }
            if let Some(prev) = cfg.entries.get(key) {
                return Err(cfg.err(line, format!("key `{}` repeats line {}", key, prev.line)));
            }
            cfg.entries.insert(
                key.to_string(),
                Entry {
                    value: value.to_string(),
                    line,
                },
            );
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &path.display().to_string(), &base)
    }

    fn err(&self, line: usize, msg: impl fmt::Display) -> Error {
        Error::Config(format!("{}:{}: {}", self.origin, line, msg))
    }

    /// Command-line overrides; they carry line 0.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                line: 0,
            },
        );
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Fail on the first missing required key of `command`.
    pub fn require(&self, command: &str) -> Result<()> {
        for key in required_keys(command) {
            if !self.contains(key) {
                return Err(Error::Config(format!(
                    "{}: missing required key `{}` for {}",
                    self.origin, key, command
                )));
            }
        }
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|err| {
                self.err(
                    e.line,
                    format!("bad value {:?} for `{}`: {}", e.value, key, err),
                )
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn need<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.get(key)?.ok_or_else(|| {
            Error::Config(format!("{}: missing required key `{}`", self.origin, key))
        })
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        let p: PathBuf = self.need::<String>(key)?.into();
        Ok(if p.is_absolute() {
            p
        } else {
            self.base.join(p)
        })
    }

    pub fn seed(&self) -> Result<u64> {
        self.get_or("seed", 0)
    }

    pub fn dataset(&self) -> Result<DatasetSpec> {
        let task: String = self.need("task")?;
        match task.as_str() {
            "synthetic" => Ok(DatasetSpec::Synthetic(BlobSpec {
                classes: self.get_or("classes", 10)?,
                dims: self.get_or("features", 64)?,
                samples: self.get_or("samples", 5000)?,
                noise: self.get_or("noise", 1.5)?,
                seed: match self.get("data_seed")? {
                    Some(s) => s,
                    None => self.seed()?,
                },
            })),
            "csv" => Ok(DatasetSpec::Csv {
                path: self.path("data")?,
            }),
            "idx" => Ok(DatasetSpec::Idx {
                images: self.path("images")?,
                labels: self.path("labels")?,
            }),
            other => Err(self.err(
                self.entries["task"].line,
                format!("task must be synthetic, csv or idx, got {:?}", other),
            )),
        }
    }

    pub fn test_fraction(&self) -> Result<f64> {
        self.get_or("test_fraction", 0.2)
    }

    /// Layer list for `features` inputs and `classes` outputs.
    pub fn architecture(&self, features: usize, classes: usize) -> Result<Vec<LayerSpec>> {
        let hidden: String = self.get_or("hidden", "128,64".to_string())?;
        let mut sizes = vec![features];
        for part in hidden
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty() && *p != "none")
        {
            sizes.push(part.parse().map_err(|_| {
                self.err(
                    self.entries.get("hidden").map_or(0, |e| e.line),
                    format!("bad hidden width {:?}", part),
                )
            })?);
        }
        sizes.push(classes);
        Ok(mlp(&sizes, true))
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.need("lr")?,
            batch_size: self.get_or("batch_size", 32)?,
            momentum: self.get_or("momentum", 0.9)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn epochs(&self) -> Result<usize> {
        self.need("epochs")
    }

    pub fn reg(&self) -> Result<RegConfig> {
        let cfg = RegConfig {
            lambda: self.need("lambda")?,
            epsilon: Epsilon::Relative(self.get_or("epsilon_scale", 1e-3)?),
            directions: self.get_or("directions", Directions::Both)?,
            mode: self.get_or("mode", RegMode::Reweighted)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn prune(&self) -> Result<PruneConfig> {
        let cfg = PruneConfig {
            iterations: self.need("T")?,
            epochs_per_iteration: self.get_or("epochs_per_iteration", 5)?,
            retrain_epochs: self.need("retrain_epochs")?,
            threshold_mode: self.get_or("threshold_mode", ThresholdMode::Relative)?,
            tau: self.need("tau")?,
            baseline: self.get_or("baseline", Baseline::None)?,
            floor: self.get_or("floor", true)?,
            schedule: self.get_or("schedule", Schedule::Simultaneous)?,
            target_rate: self.get_or("target_rate", 8.0)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            train: self.train()?,
            reg: self.reg()?,
            prune: self.prune()?,
            block: self.need("block")?,
            seed: self.seed()?,
        })
    }

    pub fn block(&self) -> Result<BlockShape> {
        self.need("block")
    }

    pub fn fuzzy_merge(&self) -> Result<Option<usize>> {
        self.get("fuzzy_merge")
    }

    pub fn bench_shapes(&self) -> Result<Vec<BenchShape>> {
        let text: String = self.get_or("bench_shapes", "1024x1024x256".to_string())?;
        let sparsity: f64 = self.get_or("bench_sparsity", 0.9)?;
        let line = self.entries.get("bench_shapes").map_or(0, |e| e.line);
        text.split(',')
            .map(|s| {
                let dims: Vec<usize> = s
                    .trim()
                    .split('x')
                    .map(|d| d.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| self.err(line, format!("bad bench shape {:?}", s)))?;
                match dims[..] {
                    [rows, cols, n] if rows > 0 && cols > 0 && n > 0 => Ok(BenchShape {
                        rows,
                        cols,
                        n,
                        sparsity,
                    }),
                    _ => Err(self.err(line, format!("bench shape must be RxCxN, got {:?}", s))),
                }
            })
            .collect()
    }

    pub fn bench_block(&self) -> Result<(usize, usize)> {
        match self.get_or("bench_block", BlockShape::Size { m: 16, n: 16 })? {
            BlockShape::Size { m, n } => Ok((m, n)),
            BlockShape::Whole => Err(Error::Config("bench_block must be MxN".into())),
        }
    }

    pub fn repeats(&self) -> Result<usize> {
        self.get_or("repeats", 5)
    }

    pub fn bench_batch(&self) -> Result<usize> {
        self.get_or("bench_batch", 256)
    }

    /// Worker count from the `workers` key, if set.
    pub fn workers(&self) -> Result<Option<usize>> {
        self.get("workers")
    }
}
