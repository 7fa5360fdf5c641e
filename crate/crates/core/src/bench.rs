//! Wall-clock comparison of dense, naive sparse and reordered execution.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{apply_mask, BlockScheme, Direction, LayerMask};
use crate::error::{Error, Result};
use crate::reorder::{
    balance_metrics, dense_exec, naive_exec, reorder, sparse_exec, BalanceMetrics, CsrMatrix,
    ExecutionPlan,
};
use crate::tensor::Tensor;

/// Summary of repeated timings in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl Timing {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let k = sorted.len();
        let median = if k % 2 == 1 {
            sorted[k / 2]
        } else {
            0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
        };
        Self {
            median_ms: median,
            min_ms: sorted[0],
            max_ms: sorted[k - 1],
            samples_ms: samples,
        }
    }
}

fn time<F: FnMut() -> Result<Tensor>>(repeats: usize, mut f: F) -> Result<(Timing, Tensor)> {
    let mut samples = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let t = Instant::now();
        let out = f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        last = Some(out);
    }
    Ok((Timing::from_samples(samples), last.expect("repeats >= 1")))
}

/// One benchmarked GEMM: `rows × cols` weights times a `cols × n` input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchShape {
    pub rows: usize,
    pub cols: usize,
    pub n: usize,
    /// Target fraction of removed weights.
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub shape: BenchShape,
    pub block_m: usize,
    pub block_n: usize,
    pub workers: usize,
    pub repeats: usize,
    /// Measured fraction of removed weights.
    pub sparsity: f64,
    pub row_groups: usize,
    pub dense: Timing,
    pub naive_sparse: Timing,
    pub reordered: Timing,
    pub naive_balance: BalanceMetrics,
    pub reordered_balance: BalanceMetrics,
    /// Largest deviation of either sparse variant from the dense result.
    pub max_abs_error: f64,
}

/// A block-sparse matrix where column pruning dominates: every block keeps
/// all its rows with probability `1 - row_drop` and each of its columns with
/// the probability that yields the requested overall sparsity.
pub fn synthetic_layer(
    rows: usize,
    cols: usize,
    scheme: (usize, usize),
    sparsity: f64,
    row_drop: f64,
    seed: u64,
) -> Result<(Tensor, LayerMask)> {
    if !(0.0..1.0).contains(&sparsity) || !(0.0..1.0).contains(&row_drop) {
        return Err(Error::Config(format!(
            "sparsity {} and row_drop {} must be in [0, 1)",
            sparsity, row_drop
        )));
    }
    let s = BlockScheme::clamped(rows, cols, scheme.0, scheme.1)?.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let col_keep = ((1.0 - sparsity) / (1.0 - row_drop)).min(1.0);
    let mut mask = LayerMask::dense(s);
    for b in s.blocks() {
        // A dropped block-row kills every row group of the block at once.
        let drop_rows = rng.random_bool(row_drop);
        for r in b.row0..b.row0 + b.height {
            mask.set_alive(Direction::Row, s.row_group_id(r, b.col0), !drop_rows);
        }
        for c in b.col0..b.col0 + b.width {
            mask.set_alive(
                Direction::Column,
                s.col_group_id(b.row0, c),
                rng.random_bool(col_keep),
            );
        }
    }
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let w = Tensor::matrix(rows, cols, data)?;
    Ok((apply_mask(&w, &mask)?, mask))
}

/// Time the three execution variants on one masked layer.
pub fn bench_layer(
    weights: &Tensor,
    mask: &LayerMask,
    n: usize,
    workers: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchRow> {
    if repeats < 3 {
        return Err(Error::Config(format!(
            "bench needs >= 3 repeats, got {}",
            repeats
        )));
    }
    let (rows, cols) = weights.dims2()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::matrix(
        cols,
        n,
        (0..cols * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;

    let model = reorder(weights, mask, None)?;
    let plan = ExecutionPlan::balanced(&model, workers);
    let csr = CsrMatrix::from_masked(weights, mask)?;
    let naive_plan = ExecutionPlan::equal_rows(rows, workers);

    let (dense, reference) = time(repeats, || dense_exec(weights, &x, workers))?;
    let (naive, naive_out) = time(repeats, || naive_exec(&csr, &x, &naive_plan))?;
    let (reordered, re_out) = time(repeats, || sparse_exec(&model, &x, &plan))?;
    let err = |t: &Tensor| {
        t.data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    let s = mask.scheme();
    Ok(BenchRow {
        shape: BenchShape {
            rows,
            cols,
            n,
            sparsity: 1.0 - mask.surviving() as f64 / mask.total() as f64,
        },
        block_m: s.m(),
        block_n: s.n(),
        workers,
        repeats,
        sparsity: 1.0 - mask.surviving() as f64 / mask.total() as f64,
        row_groups: model.groups.len(),
        dense,
        naive_sparse: naive,
        reordered,
        naive_balance: balance_metrics(&csr.row_costs(), &naive_plan),
        reordered_balance: balance_metrics(&model.row_costs(), &plan),
        max_abs_error: err(&naive_out).max(err(&re_out)),
    })
}

/// Benchmark synthetic layers of the given shapes.
pub fn bench(
    shapes: &[BenchShape],
    block: (usize, usize),
    workers: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, sh)| {
            let (w, mask) = synthetic_layer(
                sh.rows,
                sh.cols,
                block,
                sh.sparsity,
                0.0,
                seed.wrapping_add(i as u64),
            )?;
            let mut row = bench_layer(&w, &mask, sh.n, workers, repeats, seed)?;
            row.shape.sparsity = sh.sparsity;
            Ok(row)
        })
        .collect()
}
