//! Executable form of block-sparse layers.
//!
//! Rows with identical sparsity patterns are permuted next to each other and
//! each such row group stores only the columns it actually uses, as a small
//! dense matrix plus input gather indices. Every worker then runs a dense
//! inner loop over a contiguous range of rows in every group.

use std::ops::Range;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::blocks::{check_scheme, LayerMask};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Rows processed together so that each gathered input row is loaded once
/// per tile rather than once per row.
const ROW_TILE: usize = 4;

pub(crate) fn pack_bits(bits: impl IntoIterator<Item = bool>) -> Vec<u64> {
    let mut out = Vec::new();
    for (i, b) in bits.into_iter().enumerate() {
        if i % 64 == 0 {
            out.push(0);
        }
        if b {
            *out.last_mut().unwrap() |= 1 << (i % 64);
        }
    }
    out
}

pub(crate) fn unpack_bits(words: &[u64], len: usize) -> Vec<bool> {
    (0..len)
        .map(|i| words[i / 64] >> (i % 64) & 1 == 1)
        .collect()
}

/// The sparsity pattern of one matrix row: which block-columns it touches and
/// which columns survive, both as packed bitsets.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RowSignature {
    pub block_cols: Vec<u64>,
    pub columns: Vec<u64>,
}

impl RowSignature {
    pub fn is_empty(&self) -> bool {
        self.columns.iter().all(|w| *w == 0)
    }

    pub fn column_count(&self) -> usize {
        self.columns.iter().map(|w| w.count_ones() as usize).sum()
    }
}

pub fn compute_signatures(mask: &LayerMask) -> Vec<RowSignature> {
    let s = mask.scheme();
    (0..s.rows())
        .map(|r| {
            let cols: Vec<bool> = (0..s.cols()).map(|c| mask.element(r, c)).collect();
            let blocks = (0..s.block_cols()).map(|bc| {
                let lo = bc * s.n();
                cols[lo..(lo + s.n()).min(s.cols())].iter().any(|a| *a)
            });
            RowSignature {
                block_cols: pack_bits(blocks),
                columns: pack_bits(cols.iter().copied()),
            }
        })
        .collect()
}

/// Reordered rows sharing one column pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowGroup {
    /// Range of reordered row positions.
    pub rows: Range<usize>,
    /// Input columns read by this group, strictly increasing.
    pub gather: Vec<usize>,
    /// `rows.len() × gather.len()`, row-major.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReorderedModel {
    pub rows: usize,
    pub cols: usize,
    /// `order[k]` is the original row placed at reordered position `k`.
    pub order: Vec<usize>,
    pub groups: Vec<RowGroup>,
    /// Rows without any surviving weight; they occupy the trailing
    /// positions `groups.last().rows.end..rows` and are never computed.
    pub zero_rows: usize,
}

impl ReorderedModel {
    /// `position[orig]`: where an original row landed.
    pub fn position(&self) -> Vec<usize> {
        let mut pos = vec![0; self.rows];
        for (k, &r) in self.order.iter().enumerate() {
            pos[r] = k;
        }
        pos
    }

    /// Scatter the compact weights back into a dense `rows × cols` matrix.
    pub fn reconstruct(&self) -> Tensor {
        let mut out = Tensor::zeros(vec![self.rows, self.cols]);
        for g in &self.groups {
            let width = g.gather.len();
            for (i, k) in g.rows.clone().enumerate() {
                let r = self.order[k];
                for (j, &c) in g.gather.iter().enumerate() {
                    out.set(r, c, g.weights[i * width + j]);
                }
            }
        }
        out
    }

    /// Multiplies per input column for every reordered row.
    pub fn row_costs(&self) -> Vec<usize> {
        let mut costs = vec![0; self.rows];
        for g in &self.groups {
            for k in g.rows.clone() {
                costs[k] = g.gather.len();
            }
        }
        costs
    }

    /// Stored weight slots, including explicit zeros of fuzzy-merged groups.
    pub fn stored_weights(&self) -> usize {
        self.groups.iter().map(|g| g.weights.len()).sum()
    }
}

/// Count of block-columns on which two signatures differ.
fn block_distance(a: &RowSignature, b: &RowSignature, n: usize, cols: usize) -> usize {
    let ca = unpack_bits(&a.columns, cols);
    let cb = unpack_bits(&b.columns, cols);
    (0..cols.div_ceil(n))
        .filter(|bc| {
            let lo = bc * n;
            ca[lo..(lo + n).min(cols)] != cb[lo..(lo + n).min(cols)]
        })
        .count()
}

/// Permute rows so equal signatures are adjacent and compact each group's
/// columns. Classes are ordered by first occurrence and rows keep their
/// original order within a class. With `fuzzy = Some(s)`, a class joins an
/// earlier class whose signature differs in at most `s` block-columns and the
/// group executes the union pattern with explicit zeros.
pub fn reorder(weights: &Tensor, mask: &LayerMask, fuzzy: Option<usize>) -> Result<ReorderedModel> {
    check_scheme(weights, mask.scheme())?;
    let s = *mask.scheme();
    let sigs = compute_signatures(mask);
    group_rows(weights, &sigs, s.n(), fuzzy)
}

fn group_rows(
    weights: &Tensor,
    sigs: &[RowSignature],
    n: usize,
    fuzzy: Option<usize>,
) -> Result<ReorderedModel> {
    let (rows, cols) = weights.dims2()?;
    // Exact classes in first-occurrence order.
    let mut class_sig: Vec<&RowSignature> = Vec::new();
    let mut class_rows: Vec<Vec<usize>> = Vec::new();
    let mut zero = Vec::new();
    let mut lookup = std::collections::HashMap::new();
    for (r, sig) in sigs.iter().enumerate() {
        if sig.is_empty() {
            zero.push(r);
            continue;
        }
        let k = *lookup.entry(sig).or_insert_with(|| {
            class_sig.push(sig);
            class_rows.push(Vec::new());
            class_sig.len() - 1
        });
        class_rows[k].push(r);
    }

    // Optional fuzzy merge into the first compatible earlier representative.
    let mut merged: Vec<(Vec<bool>, Vec<Vec<usize>>, usize)> = Vec::new();
    for (k, sig) in class_sig.iter().enumerate() {
        let target = fuzzy.and_then(|limit| {
            merged
                .iter()
                .position(|(_, _, rep)| block_distance(class_sig[*rep], sig, n, cols) <= limit)
        });
        let cols_k = unpack_bits(&sig.columns, cols);
        match target {
            Some(t) => {
                let (union, members, _) = &mut merged[t];
                for (u, c) in union.iter_mut().zip(&cols_k) {
                    *u |= *c;
                }
                members.push(class_rows[k].clone());
            }
            None => merged.push((cols_k, vec![class_rows[k].clone()], k)),
        }
    }

    let mut order = Vec::with_capacity(rows);
    let mut groups = Vec::with_capacity(merged.len());
    for (union, members, _) in merged {
        let gather: Vec<usize> = (0..cols).filter(|c| union[*c]).collect();
        let start = order.len();
        let mut w = Vec::new();
        // Members keep class order; rows inside a class keep original order.
        for r in members.into_iter().flatten() {
            order.push(r);
            w.extend(gather.iter().map(|&c| weights.at(r, c)));
        }
        groups.push(RowGroup {
            rows: start..order.len(),
            gather,
            weights: w,
        });
    }
    let zero_rows = zero.len();
    order.extend(zero);
    Ok(ReorderedModel {
        rows,
        cols,
        order,
        groups,
        zero_rows,
    })
}

/// Contiguous row ranges per worker for every pass. `passes[p][w]` is the
/// range of worker `w` in pass `p`; ranges may be empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub workers: usize,
    pub passes: Vec<Vec<Range<usize>>>,
}

/// Split `range` into `parts` contiguous pieces with near-equal cost.
fn split_by_cost(range: Range<usize>, costs: &[usize], parts: usize) -> Vec<Range<usize>> {
    let total: usize = costs[range.clone()].iter().sum();
    let mut out = Vec::with_capacity(parts);
    let mut start = range.start;
    let mut acc = 0usize;
    for p in 1..=parts {
        let mut end = start;
        if p == parts {
            end = range.end;
        } else {
            // Advance while the cut stays at or below the p-th share.
            while end < range.end && (acc + costs[end]) * parts <= total * p {
                acc += costs[end];
                end += 1;
            }
            if end == start && end < range.end && acc * parts < total * p {
                acc += costs[end];
                end += 1;
            }
        }
        out.push(start..end);
        start = end;
    }
    out
}

impl ExecutionPlan {
    /// Every group is split over all workers by multiply count; the heaviest
    /// piece goes to the currently least loaded worker.
    pub fn balanced(model: &ReorderedModel, workers: usize) -> Self {
        let workers = workers.max(1);
        let costs = model.row_costs();
        let mut load = vec![0usize; workers];
        let mut passes = Vec::with_capacity(model.groups.len());
        for g in &model.groups {
            let mut pieces = split_by_cost(g.rows.clone(), &costs, workers);
            let piece_cost = |r: &Range<usize>| costs[r.clone()].iter().sum::<usize>();
            pieces.sort_by(|a, b| {
                piece_cost(b)
                    .cmp(&piece_cost(a))
                    .then(a.start.cmp(&b.start))
            });
            let mut by_load: Vec<usize> = (0..workers).collect();
            by_load.sort_by_key(|&w| (load[w], w));
            let mut pass = vec![0..0; workers];
            for (piece, &w) in pieces.into_iter().zip(&by_load) {
                load[w] += piece_cost(&piece);
                pass[w] = piece;
            }
            passes.push(pass);
        }
        Self { workers, passes }
    }

    /// One pass with equal row counts per worker, ignoring costs.
    pub fn equal_rows(rows: usize, workers: usize) -> Self {
        let workers = workers.max(1);
        let pass = (0..workers)
            .map(|w| (w * rows / workers)..((w + 1) * rows / workers))
            .collect();
        Self {
            workers,
            passes: vec![pass],
        }
    }

    /// Total scalar multiplies for an input with `n` columns.
    pub fn multiplies(&self, row_costs: &[usize], n: usize) -> usize {
        self.passes
            .iter()
            .flatten()
            .map(|r| row_costs[r.clone()].iter().sum::<usize>())
            .sum::<usize>()
            * n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceMetrics {
    /// Mean absolute difference of row costs over all row pairs that share
    /// a worker within one pass.
    pub divergence: f64,
    /// Largest per-worker cost over the mean per-worker cost.
    pub imbalance: f64,
}

pub fn balance_metrics(row_costs: &[usize], plan: &ExecutionPlan) -> BalanceMetrics {
    let mut per_worker = vec![0usize; plan.workers];
    let (mut diff_sum, mut pairs) = (0f64, 0f64);
    for pass in &plan.passes {
        for (w, r) in pass.iter().enumerate() {
            let c = &row_costs[r.clone()];
            per_worker[w] += c.iter().sum::<usize>();
            // Sum of pairwise |a-b| via the sorted prefix identity.
            let mut sorted = c.to_vec();
            sorted.sort_unstable();
            let mut prefix = 0f64;
            for (i, v) in sorted.iter().enumerate() {
                diff_sum += *v as f64 * i as f64 - prefix;
                prefix += *v as f64;
            }
            pairs += (c.len() * c.len().saturating_sub(1) / 2) as f64;
        }
    }
    let total: usize = per_worker.iter().sum();
    let mean = total as f64 / plan.workers as f64;
    BalanceMetrics {
        divergence: if pairs > 0.0 { diff_sum / pairs } else { 0.0 },
        imbalance: if total == 0 {
            1.0
        } else {
            *per_worker.iter().max().unwrap() as f64 / mean
        },
    }
}

fn check_plan(plan: &ExecutionPlan, passes: usize, rows: usize) -> Result<()> {
    if plan.passes.len() != passes || plan.passes.iter().any(|p| p.len() != plan.workers) {
        return shape_err(format!(
            "plan has {} passes for {} row groups",
            plan.passes.len(),
            passes
        ));
    }
    if plan
        .passes
        .iter()
        .flatten()
        .any(|r| r.end > rows || r.start > r.end)
    {
        return shape_err("plan range exceeds the matrix");
    }
    Ok(())
}

/// Disjoint mutable row slices of a row-major buffer, one list per worker.
fn carve<'a>(
    mut buf: &'a mut [f64],
    width: usize,
    plan: &ExecutionPlan,
) -> Vec<Vec<(usize, &'a mut [f64])>> {
    let mut ranges: Vec<(usize, usize, usize)> = plan
        .passes
        .iter()
        .flat_map(|p| p.iter().enumerate().map(|(w, r)| (r.start, r.end, w)))
        .filter(|(s, e, _)| e > s)
        .collect();
    ranges.sort_unstable();
    let mut out: Vec<Vec<(usize, &mut [f64])>> = (0..plan.workers).map(|_| Vec::new()).collect();
    let mut at = 0usize;
    for (start, end, w) in ranges {
        let (_, rest) = std::mem::take(&mut buf).split_at_mut((start - at) * width);
        let (mine, rest) = rest.split_at_mut((end - start) * width);
        out[w].push((start, mine));
        buf = rest;
        at = end;
    }
    out
}

fn run_workers<F>(jobs: Vec<Vec<(usize, &mut [f64])>>, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    if jobs.len() == 1 {
        for (start, out) in jobs.into_iter().flatten() {
            f(start, out);
        }
        return;
    }
    thread::scope(|scope| {
        for job in jobs {
            let f = &f;
            scope.spawn(move || {
                for (start, out) in job {
                    f(start, out);
                }
            });
        }
    });
}

/// Output columns accumulated in registers per tile.
const COL_CHUNK: usize = 4;

/// `out[i] = Σ_j w[i][j] · x[gather[j]]` for rows sharing `gather`, in tiles
/// of [`ROW_TILE`] rows × [`COL_CHUNK`] columns. Every output element sums
/// in ascending `j`, so results do not depend on tiling.
fn tile_kernel(w: &[f64], width: usize, gather: &[usize], x: &[f64], n: usize, out: &mut [f64]) {
    let rows = out.len() / n;
    let mut t = 0;
    while t + ROW_TILE <= rows {
        let mut c0 = 0;
        while c0 + COL_CHUNK <= n {
            let mut acc = [[0.0f64; COL_CHUNK]; ROW_TILE];
            let wrows: [&[f64]; ROW_TILE] =
                std::array::from_fn(|i| &w[(t + i) * width..(t + i + 1) * width]);
            for (j, &c) in gather.iter().enumerate() {
                let base = c * n + c0;
                let xr: &[f64; COL_CHUNK] = x[base..base + COL_CHUNK].try_into().unwrap();
                for (acc_i, wr) in acc.iter_mut().zip(&wrows) {
                    let a = wr[j];
                    for (o, xv) in acc_i.iter_mut().zip(xr) {
                        *o += a * xv;
                    }
                }
            }
            for (i, acc_i) in acc.iter().enumerate() {
                out[(t + i) * n + c0..(t + i) * n + c0 + COL_CHUNK].copy_from_slice(acc_i);
            }
            c0 += COL_CHUNK;
        }
        if c0 < n {
            tail_kernel(
                &w[t * width..(t + ROW_TILE) * width],
                width,
                gather,
                x,
                n,
                c0,
                &mut out[t * n..(t + ROW_TILE) * n],
            );
        }
        t += ROW_TILE;
    }
    if t < rows {
        tail_kernel(&w[t * width..], width, gather, x, n, 0, &mut out[t * n..]);
    }
}

/// Plain row-by-row loop over output columns `c0..n`.
fn tail_kernel(
    w: &[f64],
    width: usize,
    gather: &[usize],
    x: &[f64],
    n: usize,
    c0: usize,
    out: &mut [f64],
) {
    for (i, o) in out.chunks_mut(n).enumerate() {
        let o = &mut o[c0..];
        for (j, &c) in gather.iter().enumerate() {
            let a = w[i * width + j];
            for (ov, xv) in o.iter_mut().zip(&x[c * n + c0..(c + 1) * n]) {
                *ov += a * xv;
            }
        }
    }
}

/// `weights · input` with the reordered model. The result does not depend on
/// the plan or the number of workers.
pub fn sparse_exec(model: &ReorderedModel, input: &Tensor, plan: &ExecutionPlan) -> Result<Tensor> {
    let (k, n) = input.dims2()?;
    if k != model.cols {
        return shape_err(format!(
            "input has {} rows, model expects {}",
            k, model.cols
        ));
    }
    check_plan(plan, model.groups.len(), model.rows)?;
    for (g, pass) in model.groups.iter().zip(&plan.passes) {
        if pass
            .iter()
            .any(|r| !r.is_empty() && (r.start < g.rows.start || r.end > g.rows.end))
        {
            return shape_err("plan range leaves its row group");
        }
    }
    let mut reordered = vec![0.0; model.rows * n];
    let group_of = {
        let mut v = vec![0usize; model.rows];
        for (gi, g) in model.groups.iter().enumerate() {
            for k in g.rows.clone() {
                v[k] = gi;
            }
        }
        v
    };
    let x = input.data();
    run_workers(carve(&mut reordered, n, plan), |start, out| {
        let g = &model.groups[group_of[start]];
        let width = g.gather.len();
        let off = (start - g.rows.start) * width;
        tile_kernel(&g.weights[off..], width, &g.gather, x, n, out);
    });
    let mut data = vec![0.0; model.rows * n];
    for (k, &r) in model.order.iter().enumerate() {
        data[r * n..(r + 1) * n].copy_from_slice(&reordered[k * n..(k + 1) * n]);
    }
    Tensor::matrix(model.rows, n, data)
}

/// Compressed sparse rows in original order: the non-reordered baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Entries kept by the mask (explicit zeros included).
    pub fn from_masked(weights: &Tensor, mask: &LayerMask) -> Result<Self> {
        check_scheme(weights, mask.scheme())?;
        let (rows, cols) = weights.dims2()?;
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if mask.element(r, c) {
                    col_idx.push(c);
                    values.push(weights.at(r, c));
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn row_costs(&self) -> Vec<usize> {
        self.row_ptr.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Row-at-a-time CSR product; `plan` must be a single pass over all rows.
pub fn naive_exec(csr: &CsrMatrix, input: &Tensor, plan: &ExecutionPlan) -> Result<Tensor> {
    let (k, n) = input.dims2()?;
    if k != csr.cols {
        return shape_err(format!("input has {} rows, matrix expects {}", k, csr.cols));
    }
    check_plan(plan, 1, csr.rows)?;
    let mut data = vec![0.0; csr.rows * n];
    let x = input.data();
    run_workers(carve(&mut data, n, plan), |start, out| {
        for (i, o) in out.chunks_mut(n).enumerate() {
            let r = start + i;
            for p in csr.row_ptr[r]..csr.row_ptr[r + 1] {
                let a = csr.values[p];
                let xr = &x[csr.col_idx[p] * n..(csr.col_idx[p] + 1) * n];
                for (ov, xv) in o.iter_mut().zip(xr) {
                    *ov += a * xv;
                }
            }
        }
    });
    Tensor::matrix(csr.rows, n, data)
}

/// Dense `weights · input` with rows split evenly over workers.
pub fn dense_exec(weights: &Tensor, input: &Tensor, workers: usize) -> Result<Tensor> {
    let (rows, kw) = weights.dims2()?;
    let (k, n) = input.dims2()?;
    if kw != k {
        return shape_err(format!("{}x{} times {}x{}", rows, kw, k, n));
    }
    let plan = ExecutionPlan::equal_rows(rows, workers);
    let mut data = vec![0.0; rows * n];
    let (w, x) = (weights.data(), input.data());
    run_workers(carve(&mut data, n, &plan), |start, out| {
        for (i, o) in out.chunks_mut(n).enumerate() {
            let wr = &w[(start + i) * k..(start + i + 1) * k];
            for (kk, &a) in wr.iter().enumerate() {
                for (ov, xv) in o.iter_mut().zip(&x[kk * n..(kk + 1) * n]) {
                    *ov += a * xv;
                }
            }
        }
    });
    Tensor::matrix(rows, n, data)
}
