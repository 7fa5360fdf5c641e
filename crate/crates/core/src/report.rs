//! JSON reports, one document per run.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::bench::BenchRow;
use crate::blocks::Direction;
use crate::error::Result;
use crate::model_file::{LayerWeights, ModelFile};
use crate::reorder::{balance_metrics, BalanceMetrics, ExecutionPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub weights: usize,
}

/// Per-layer view of a stored model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub index: usize,
    pub representation: String,
    pub rows: usize,
    pub cols: usize,
    pub block_m: usize,
    pub block_n: usize,
    pub total: usize,
    pub surviving: usize,
    pub row_groups_alive: usize,
    pub column_groups_alive: usize,
    /// Present for reordered layers only.
    pub reorder: Option<ReorderSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReorderSummary {
    pub row_groups: usize,
    pub zero_rows: usize,
    pub stored_weights: usize,
    pub workers: usize,
    pub balance: BalanceMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub layers: Vec<LayerSummary>,
    pub total_weights: usize,
    pub surviving_weights: usize,
    pub compression_rate: f64,
}

pub fn summarize(model: &ModelFile, workers: usize) -> ModelSummary {
    let layers: Vec<LayerSummary> = model
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let s = p.scheme;
            let mask = p
                .weights
                .mask()
                .cloned()
                .unwrap_or_else(|| crate::blocks::LayerMask::dense(s));
            let alive = |d| mask.alive(d).iter().filter(|a| **a).count();
            let reorder = match &p.weights {
                LayerWeights::Reordered { model, .. } => Some(ReorderSummary {
                    row_groups: model.groups.len(),
                    zero_rows: model.zero_rows,
                    stored_weights: model.stored_weights(),
                    workers,
                    balance: balance_metrics(
                        &model.row_costs(),
                        &ExecutionPlan::balanced(model, workers),
                    ),
                }),
                _ => None,
            };
            LayerSummary {
                index: i,
                representation: p.weights.kind().to_string(),
                rows: s.rows(),
                cols: s.cols(),
                block_m: s.m(),
                block_n: s.n(),
                total: mask.total(),
                surviving: mask.surviving(),
                row_groups_alive: alive(Direction::Row),
                column_groups_alive: alive(Direction::Column),
                reorder,
            }
        })
        .collect();
    let total: usize = layers.iter().map(|l| l.total).sum();
    let surviving: usize = layers.iter().map(|l| l.surviving).sum();
    ModelSummary {
        layers,
        total_weights: total,
        surviving_weights: surviving,
        compression_rate: total as f64 / surviving.max(1) as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    /// `train`, `test` or `all`.
    pub split: String,
    pub samples: usize,
    pub workers: usize,
    pub accuracy: f64,
    pub representations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub workers: usize,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
}

/// Write `value` as `<dir>/<command>-s<seed>-<unix seconds>.json`, adding a
/// numeric suffix rather than overwriting an existing file.
pub fn write_report<T: Serialize>(
    dir: &Path,
    command: &str,
    seed: u64,
    value: &T,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let stem = format!("{}-s{}-{}", command, seed, ts);
    let mut path = dir.join(format!("{}.json", stem));
    let mut k = 1;
    while path.exists() {
        path = dir.join(format!("{}-{}.json", stem, k));
        k += 1;
    }
    std::fs::write(&path, serde_json::to_string_pretty(value)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mlp, Network};

    #[test]
    fn report_files_never_collide() {
        let dir = tempfile::tempdir().unwrap();
        let r = InferReport {
            split: "test".into(),
            samples: 3,
            workers: 1,
            accuracy: 1.0,
            representations: vec!["dense".into()],
        };
        let a = write_report(dir.path(), "infer", 4, &r).unwrap();
        let b = write_report(dir.path(), "infer", 4, &r).unwrap();
        assert_ne!(a, b);
        let name = a.file_name().unwrap().to_string_lossy().to_string();
        assert!(name.starts_with("infer-s4-") && name.ends_with(".json"));
        let back: InferReport =
            serde_json::from_str(&std::fs::read_to_string(&b).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn dense_summary_has_unit_compression() {
        let net = Network::init(mlp(&[4, 6, 2], true), 0).unwrap();
        let s = summarize(&ModelFile::dense(&net, None).unwrap(), 2);
        assert_eq!(s.compression_rate, 1.0);
        assert_eq!(s.total_weights, 36);
        assert!(s
            .layers
            .iter()
            .all(|l| l.reorder.is_none() && l.representation == "dense"));
        let re = summarize(
            &ModelFile::dense(&net, None).unwrap().reorder(None).unwrap(),
            2,
        );
        assert_eq!(re.layers[0].reorder.as_ref().unwrap().row_groups, 1);
    }
}
