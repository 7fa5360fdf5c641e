//! Shared fixtures for the kernel benchmarks.

use blkrew::bench::synthetic_layer;
use blkrew::reorder::{reorder, CsrMatrix, ExecutionPlan};
use blkrew::{LayerMask, ReorderedModel, Result, Tensor};

/// One block-sparse layer prepared for every execution variant.
pub struct Fixture {
    pub weights: Tensor,
    pub mask: LayerMask,
    pub input: Tensor,
    pub csr: CsrMatrix,
    pub model: ReorderedModel,
}

impl Fixture {
    pub fn new(
        rows: usize,
        cols: usize,
        n: usize,
        block: (usize, usize),
        sparsity: f64,
        seed: u64,
    ) -> Result<Self> {
        let (weights, mask) = synthetic_layer(rows, cols, block, sparsity, 0.0, seed)?;
        let input = synthetic_layer(cols, n, (1, 1), 0.0, 0.0, seed ^ 1)?.0;
        let csr = CsrMatrix::from_masked(&weights, &mask)?;
        let model = reorder(&weights, &mask, None)?;
        Ok(Self {
            weights,
            mask,
            input,
            csr,
            model,
        })
    }

    pub fn plans(&self, workers: usize) -> (ExecutionPlan, ExecutionPlan) {
        (
            ExecutionPlan::equal_rows(self.weights.rows(), workers),
            ExecutionPlan::balanced(&self.model, workers),
        )
    }
}
