//! Block tiling of GEMM-form weight matrices.
//!
//! A layer's `rows × cols` matrix is cut into `m × n` blocks enumerated
//! row-major over the block grid. Trailing blocks are smaller when the
//! dimensions do not divide evenly. Inside each block every row and every
//! column is a *group*: the unit that is regularized and pruned together.
//!
//! Group ids are dense and block-major. For row groups the id of element
//! `(r, c)` is `br·nbc·m + bc·h(br) + (r − br·m)`; for column groups it is
//! `br·cols + c`, where `(br, bc)` is the block coordinate and `h(br)` the
//! height of block-row `br`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Row,
    Column,
}

/// Which group directions a regularizer or pruner acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directions {
    Row,
    Column,
    Both,
}

impl Directions {
    pub fn includes(self, d: Direction) -> bool {
        matches!(
            (self, d),
            (Directions::Both, _)
                | (Directions::Row, Direction::Row)
                | (Directions::Column, Direction::Column)
        )
    }

    pub fn iter(self) -> impl Iterator<Item = Direction> {
        [Direction::Row, Direction::Column]
            .into_iter()
            .filter(move |d| self.includes(*d))
    }
}

impl FromStr for Directions {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(' ', "").as_str() {
            "row" | "rows" => Ok(Directions::Row),
            "column" | "columns" | "col" => Ok(Directions::Column),
            "both" | "row,column" | "column,row" => Ok(Directions::Both),
            other => Err(Error::Config(format!(
                "directions must be row, column or both, got {:?}",
                other
            ))),
        }
    }
}

impl fmt::Display for Directions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Directions::Row => "row",
            Directions::Column => "column",
            Directions::Both => "both",
        })
    }
}

/// Extent of one block in matrix coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub index: usize,
    pub row0: usize,
    pub height: usize,
    pub col0: usize,
    pub width: usize,
}

/// `m × n` tiling of a `rows × cols` matrix with ragged trailing blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockScheme {
    m: usize,
    n: usize,
    rows: usize,
    cols: usize,
}

impl BlockScheme {
    pub fn partition(rows: usize, cols: usize, m: usize, n: usize) -> Result<Self> {
        if m == 0 || n == 0 || m > rows || n > cols {
            return Err(Error::Config(format!(
                "block {}x{} invalid for a {}x{} matrix",
                m, n, rows, cols
            )));
        }
        Ok(Self { m, n, rows, cols })
    }

    /// Like [`partition`](Self::partition) but shrinks an oversized block to
    /// the matrix dims. The flag reports whether clamping happened.
    pub fn clamped(rows: usize, cols: usize, m: usize, n: usize) -> Result<(Self, bool)> {
        if m == 0 || n == 0 {
            return Err(Error::Config(format!("block {}x{} has a zero side", m, n)));
        }
        let cm = m.min(rows);
        let cn = n.min(cols);
        Ok((Self::partition(rows, cols, cm, cn)?, cm != m || cn != n))
    }

    /// A single block covering the whole matrix (classic row/column pruning).
    pub fn whole(rows: usize, cols: usize) -> Result<Self> {
        Self::partition(rows, cols, rows, cols)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn block_rows(&self) -> usize {
        self.rows.div_ceil(self.m)
    }

    pub fn block_cols(&self) -> usize {
        self.cols.div_ceil(self.n)
    }

    pub fn block_count(&self) -> usize {
        self.block_rows() * self.block_cols()
    }

    fn height(&self, br: usize) -> usize {
        self.m.min(self.rows - br * self.m)
    }

    fn width(&self, bc: usize) -> usize {
        self.n.min(self.cols - bc * self.n)
    }

    pub fn block(&self, index: usize) -> Block {
        let (br, bc) = (index / self.block_cols(), index % self.block_cols());
        Block {
            index,
            row0: br * self.m,
            height: self.height(br),
            col0: bc * self.n,
            width: self.width(bc),
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = Block> + '_ {
        (0..self.block_count()).map(|j| self.block(j))
    }

    pub fn block_of(&self, r: usize, c: usize) -> usize {
        (r / self.m) * self.block_cols() + c / self.n
    }

    pub fn group_count(&self, dir: Direction) -> usize {
        match dir {
            Direction::Row => self.rows * self.block_cols(),
            Direction::Column => self.cols * self.block_rows(),
        }
    }

    pub fn row_group_id(&self, r: usize, c: usize) -> usize {
        let (br, bc) = (r / self.m, c / self.n);
        br * self.block_cols() * self.m + bc * self.height(br) + (r - br * self.m)
    }

    pub fn col_group_id(&self, r: usize, c: usize) -> usize {
        (r / self.m) * self.cols + c
    }

    pub fn group_id(&self, dir: Direction, r: usize, c: usize) -> usize {
        match dir {
            Direction::Row => self.row_group_id(r, c),
            Direction::Column => self.col_group_id(r, c),
        }
    }

    /// Resolve a dense group id back to its coordinates.
    pub fn group(&self, layer: usize, dir: Direction, id: usize) -> Result<GroupRef> {
        if id >= self.group_count(dir) {
            return Err(Error::Shape(format!(
                "{:?} group {} out of range ({} groups)",
                dir,
                id,
                self.group_count(dir)
            )));
        }
        let g = match dir {
            Direction::Row => {
                let per_block_row = self.block_cols() * self.m;
                let br = id / per_block_row;
                let h = self.height(br);
                let rem = id - br * per_block_row;
                let (bc, p) = (rem / h, rem % h);
                let b = self.block(br * self.block_cols() + bc);
                GroupRef {
                    layer,
                    block: b.index,
                    direction: dir,
                    index: p,
                    line: b.row0 + p,
                    span: (b.col0, b.col0 + b.width),
                }
            }
            Direction::Column => {
                let (br, c) = (id / self.cols, id % self.cols);
                let bc = c / self.n;
                let b = self.block(br * self.block_cols() + bc);
                GroupRef {
                    layer,
                    block: b.index,
                    direction: dir,
                    index: c - b.col0,
                    line: c,
                    span: (b.row0, b.row0 + b.height),
                }
            }
        };
        Ok(g)
    }
}

/// One row or one column of one block.
///
/// For a row group `line` is the matrix row and `span` the column range;
/// for a column group `line` is the matrix column and `span` the row range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupRef {
    pub layer: usize,
    pub block: usize,
    pub direction: Direction,
    pub index: usize,
    pub line: usize,
    pub span: (usize, usize),
}

impl GroupRef {
    pub fn len(&self) -> usize {
        self.span.1 - self.span.0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Matrix coordinates of the group's elements, in ascending order.
    pub fn elements(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.span.0..self.span.1).map(move |k| match self.direction {
            Direction::Row => (self.line, k),
            Direction::Column => (k, self.line),
        })
    }
}

/// All groups of one direction, block-major then by index within the block.
/// Position in the returned list equals the dense group id.
pub fn enumerate_groups(scheme: &BlockScheme, layer: usize, dir: Direction) -> Vec<GroupRef> {
    let mut out = Vec::with_capacity(scheme.group_count(dir));
    for b in scheme.blocks() {
        let count = match dir {
            Direction::Row => b.height,
            Direction::Column => b.width,
        };
        for index in 0..count {
            out.push(match dir {
                Direction::Row => GroupRef {
                    layer,
                    block: b.index,
                    direction: dir,
                    index,
                    line: b.row0 + index,
                    span: (b.col0, b.col0 + b.width),
                },
                Direction::Column => GroupRef {
                    layer,
                    block: b.index,
                    direction: dir,
                    index,
                    line: b.col0 + index,
                    span: (b.row0, b.row0 + b.height),
                },
            });
        }
    }
    out
}

/// Euclidean norm of a group's weights.
pub fn group_norm(weights: &Tensor, g: &GroupRef) -> Result<f64> {
    let (rows, cols) = weights.dims2()?;
    let (line_max, span_max) = match g.direction {
        Direction::Row => (rows, cols),
        Direction::Column => (cols, rows),
    };
    if g.line >= line_max || g.span.1 > span_max || g.span.0 > g.span.1 {
        return shape_err(format!("group {:?} outside a {}x{} matrix", g, rows, cols));
    }
    let mut sq = 0.0;
    for (r, c) in g.elements() {
        let w = weights.at(r, c);
        sq += w * w;
    }
    Ok(sq.sqrt())
}

/// Norms of every group of one direction, indexed by dense group id.
///
/// Accumulates in the same element order as [`group_norm`], so the two
/// agree bit for bit.
pub fn group_norms(weights: &Tensor, scheme: &BlockScheme, dir: Direction) -> Result<Vec<f64>> {
    let sq = group_sq_norms(weights, scheme, dir)?;
    Ok(sq.into_iter().map(f64::sqrt).collect())
}

pub(crate) fn group_sq_norms(
    weights: &Tensor,
    scheme: &BlockScheme,
    dir: Direction,
) -> Result<Vec<f64>> {
    check_scheme(weights, scheme)?;
    let mut sq = vec![0.0; scheme.group_count(dir)];
    let cols = scheme.cols();
    for r in 0..scheme.rows() {
        let row = weights.row(r);
        for (c, &w) in row.iter().enumerate().take(cols) {
            sq[scheme.group_id(dir, r, c)] += w * w;
        }
    }
    Ok(sq)
}

pub(crate) fn check_scheme(weights: &Tensor, scheme: &BlockScheme) -> Result<()> {
    let (r, c) = weights.dims2()?;
    if (r, c) != (scheme.rows(), scheme.cols()) {
        return shape_err(format!(
            "{}x{} weights do not match a {}x{} block scheme",
            r,
            c,
            scheme.rows(),
            scheme.cols()
        ));
    }
    Ok(())
}

/// Surviving groups of one layer. An element survives iff both its row
/// group and its column group survive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    scheme: BlockScheme,
    row_alive: Vec<bool>,
    col_alive: Vec<bool>,
}

impl LayerMask {
    pub fn dense(scheme: BlockScheme) -> Self {
        Self {
            row_alive: vec![true; scheme.group_count(Direction::Row)],
            col_alive: vec![true; scheme.group_count(Direction::Column)],
            scheme,
        }
    }

    pub fn empty(scheme: BlockScheme) -> Self {
        Self {
            row_alive: vec![false; scheme.group_count(Direction::Row)],
            col_alive: vec![false; scheme.group_count(Direction::Column)],
            scheme,
        }
    }

    pub fn from_groups(
        scheme: BlockScheme,
        row_alive: Vec<bool>,
        col_alive: Vec<bool>,
    ) -> Result<Self> {
        if row_alive.len() != scheme.group_count(Direction::Row)
            || col_alive.len() != scheme.group_count(Direction::Column)
        {
            return shape_err(format!(
                "mask has {}/{} row/column groups, scheme needs {}/{}",
                row_alive.len(),
                col_alive.len(),
                scheme.group_count(Direction::Row),
                scheme.group_count(Direction::Column)
            ));
        }
        Ok(Self {
            scheme,
            row_alive,
            col_alive,
        })
    }

    pub fn scheme(&self) -> &BlockScheme {
        &self.scheme
    }

    pub fn alive(&self, dir: Direction) -> &[bool] {
        match dir {
            Direction::Row => &self.row_alive,
            Direction::Column => &self.col_alive,
        }
    }

    pub fn set_alive(&mut self, dir: Direction, id: usize, alive: bool) {
        match dir {
            Direction::Row => self.row_alive[id] = alive,
            Direction::Column => self.col_alive[id] = alive,
        }
    }

    pub fn element(&self, r: usize, c: usize) -> bool {
        self.row_alive[self.scheme.row_group_id(r, c)]
            && self.col_alive[self.scheme.col_group_id(r, c)]
    }

    /// Induced elementwise 0/1 matrix, row-major.
    pub fn elements(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.scheme.rows() * self.scheme.cols());
        for r in 0..self.scheme.rows() {
            for c in 0..self.scheme.cols() {
                out.push(self.element(r, c));
            }
        }
        out
    }

    pub fn surviving(&self) -> usize {
        self.elements().iter().filter(|&&a| a).count()
    }

    pub fn total(&self) -> usize {
        self.scheme.rows() * self.scheme.cols()
    }

    /// Fraction of surviving elements inside block `j`.
    pub fn block_density(&self, j: usize) -> f64 {
        let b = self.scheme.block(j);
        let mut alive = 0;
        for r in b.row0..b.row0 + b.height {
            for c in b.col0..b.col0 + b.width {
                alive += usize::from(self.element(r, c));
            }
        }
        alive as f64 / (b.height * b.width) as f64
    }
}

/// Per-layer masks for a whole network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseMask {
    pub layers: Vec<LayerMask>,
}

impl SparseMask {
    pub fn surviving(&self) -> usize {
        self.layers.iter().map(LayerMask::surviving).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(LayerMask::total).sum()
    }

    /// Total weights over surviving weights.
    pub fn compression_rate(&self) -> f64 {
        let s = self.surviving();
        if s == 0 {
            f64::INFINITY
        } else {
            self.total() as f64 / s as f64
        }
    }
}

/// Zero every weight the mask removes; survivors are copied unchanged.
pub fn apply_mask(weights: &Tensor, mask: &LayerMask) -> Result<Tensor> {
    let mut out = weights.clone();
    apply_mask_in_place(&mut out, mask)?;
    Ok(out)
}

pub fn apply_mask_in_place(weights: &mut Tensor, mask: &LayerMask) -> Result<()> {
    check_scheme(weights, &mask.scheme)?;
    let cols = mask.scheme.cols();
    for r in 0..mask.scheme.rows() {
        for c in 0..cols {
            if !mask.element(r, c) {
                weights.data_mut()[r * cols + c] = 0.0;
            }
        }
    }
    Ok(())
}
