//! Group-lasso regularizers over block row/column groups.
//!
//! Static mode is plain group lasso, `λ Σ ‖g‖₂`. Reweighted mode scales each
//! group's norm by its own penalty, `λ Σ P(g)·‖g‖₂`, and refreshes the
//! penalties from the current weights between training phases with
//! `P(g) = 1 / (‖g‖₂² + ε)`. Small groups therefore receive ever larger
//! penalties while large groups are released.
//!
//! Sums run per direction over layers in order, then multiply by `λ`, then
//! add the row term and the column term. A two-direction loss is therefore
//! exactly the sum of the two single-direction losses.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{check_scheme, group_sq_norms, BlockScheme, Direction, Directions};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Norms below this are treated as exactly zero by the subgradient.
pub const KINK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    StaticLasso,
    Reweighted,
}

impl FromStr for RegMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "static_lasso" | "static" => Ok(RegMode::StaticLasso),
            "reweighted" => Ok(RegMode::Reweighted),
            other => Err(Error::Config(format!(
                "mode must be static_lasso or reweighted, got {:?}",
                other
            ))),
        }
    }
}

impl fmt::Display for RegMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegMode::StaticLasso => "static_lasso",
            RegMode::Reweighted => "reweighted",
        })
    }
}

/// How the `ε` guard in the penalty update is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Epsilon {
    /// The same `ε` for every group.
    Absolute(f64),
    /// `scale ×` the mean squared group norm of the initial weights,
    /// resolved separately for every layer and direction.
    Relative(f64),
}

impl Epsilon {
    fn resolve(self, initial_sq_norms: &[f64]) -> f64 {
        match self {
            Epsilon::Absolute(e) => e,
            Epsilon::Relative(scale) => {
                let mean = if initial_sq_norms.is_empty() {
                    0.0
                } else {
                    initial_sq_norms.iter().sum::<f64>() / initial_sq_norms.len() as f64
                };
                if mean > 0.0 {
                    scale * mean
                } else {
                    scale
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    /// The single penalty coefficient shared by every layer.
    pub lambda: f64,
    pub epsilon: Epsilon,
    pub directions: Directions,
    pub mode: RegMode,
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        let e = match self.epsilon {
            Epsilon::Absolute(e) | Epsilon::Relative(e) => e,
        };
        if !(e > 0.0 && e.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", e)));
        }
        Ok(())
    }
}

/// Penalties of one layer, indexed by dense group id. A direction that is
/// not regularized has an empty vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPenalties {
    pub row: Vec<f64>,
    pub column: Vec<f64>,
    pub eps_row: f64,
    pub eps_column: f64,
}

impl LayerPenalties {
    pub fn get(&self, dir: Direction) -> &[f64] {
        match dir {
            Direction::Row => &self.row,
            Direction::Column => &self.column,
        }
    }

    pub fn eps(&self, dir: Direction) -> f64 {
        match dir {
            Direction::Row => self.eps_row,
            Direction::Column => self.eps_column,
        }
    }
}

/// Penalty weights for every group plus the outer iteration counter `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyState {
    pub layers: Vec<LayerPenalties>,
    pub t: usize,
}

impl PenaltyState {
    /// Every penalty set to `value` (static group lasso uses 1).
    pub fn uniform(schemes: &[BlockScheme], directions: Directions, value: f64) -> Self {
        let layers = schemes
            .iter()
            .map(|s| {
                let fill = |d: Direction| {
                    if directions.includes(d) {
                        vec![value; s.group_count(d)]
                    } else {
                        Vec::new()
                    }
                };
                LayerPenalties {
                    row: fill(Direction::Row),
                    column: fill(Direction::Column),
                    eps_row: 0.0,
                    eps_column: 0.0,
                }
            })
            .collect();
        Self { layers, t: 0 }
    }

    fn check(&self, schemes: &[BlockScheme], directions: Directions) -> Result<()> {
        if self.layers.len() != schemes.len() {
            return Err(Error::MissingPenalty(format!(
                "{} penalty layers for {} weight layers",
                self.layers.len(),
                schemes.len()
            )));
        }
        for (i, (p, s)) in self.layers.iter().zip(schemes).enumerate() {
            for d in directions.iter() {
                if p.get(d).len() != s.group_count(d) {
                    return Err(Error::MissingPenalty(format!(
                        "layer {} has {} {:?} penalties, needs {}",
                        i,
                        p.get(d).len(),
                        d,
                        s.group_count(d)
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_layers(weights: &[Tensor], schemes: &[BlockScheme]) -> Result<()> {
    if weights.len() != schemes.len() {
        return shape_err(format!(
            "{} weight tensors but {} block schemes",
            weights.len(),
            schemes.len()
        ));
    }
    for (w, s) in weights.iter().zip(schemes) {
        check_scheme(w, s)?;
    }
    Ok(())
}

fn reweight(sq_norms: &[f64], eps: f64) -> Vec<f64> {
    sq_norms.iter().map(|sq| 1.0 / (sq + eps)).collect()
}

/// Penalties from the pretrained weights: the update rule applied once, `t = 0`.
pub fn init_penalties(
    weights: &[Tensor],
    schemes: &[BlockScheme],
    cfg: &RegConfig,
) -> Result<PenaltyState> {
    cfg.validate()?;
    check_layers(weights, schemes)?;
    let mut layers = Vec::with_capacity(weights.len());
    for (w, s) in weights.iter().zip(schemes) {
        let mut lp = LayerPenalties {
            row: Vec::new(),
            column: Vec::new(),
            eps_row: 0.0,
            eps_column: 0.0,
        };
        for d in cfg.directions.iter() {
            let sq = group_sq_norms(w, s, d)?;
            let eps = cfg.epsilon.resolve(&sq);
            let p = reweight(&sq, eps);
            match d {
                Direction::Row => {
                    lp.row = p;
                    lp.eps_row = eps;
                }
                Direction::Column => {
                    lp.column = p;
                    lp.eps_column = eps;
                }
            }
        }
        layers.push(lp);
    }
    Ok(PenaltyState { layers, t: 0 })
}

/// Recompute every penalty from the current weights and advance `t`.
/// The per-layer `ε` fixed at initialization is reused.
pub fn update_penalties(
    state: &PenaltyState,
    weights: &[Tensor],
    schemes: &[BlockScheme],
    cfg: &RegConfig,
) -> Result<PenaltyState> {
    check_layers(weights, schemes)?;
    state.check(schemes, cfg.directions)?;
    let mut next = state.clone();
    for ((lp, w), s) in next.layers.iter_mut().zip(weights).zip(schemes) {
        for d in cfg.directions.iter() {
            let sq = group_sq_norms(w, s, d)?;
            match d {
                Direction::Row => lp.row = reweight(&sq, lp.eps_row),
                Direction::Column => lp.column = reweight(&sq, lp.eps_column),
            }
        }
    }
    next.t += 1;
    Ok(next)
}

fn penalty_at(cfg: &RegConfig, state: &PenaltyState, layer: usize, d: Direction, id: usize) -> f64 {
    match cfg.mode {
        RegMode::StaticLasso => 1.0,
        RegMode::Reweighted => state.layers[layer].get(d)[id],
    }
}

fn prepare(
    weights: &[Tensor],
    schemes: &[BlockScheme],
    state: &PenaltyState,
    cfg: &RegConfig,
) -> Result<()> {
    cfg.validate()?;
    check_layers(weights, schemes)?;
    if cfg.mode == RegMode::Reweighted {
        state.check(schemes, cfg.directions)?;
    }
    Ok(())
}

/// `λ Σ P(g)·‖g‖₂` over enabled directions, layers and groups.
/// Static mode ignores `state` and uses `P ≡ 1`.
pub fn reg_loss(
    weights: &[Tensor],
    schemes: &[BlockScheme],
    state: &PenaltyState,
    cfg: &RegConfig,
) -> Result<f64> {
    prepare(weights, schemes, state, cfg)?;
    let mut total = 0.0;
    for d in cfg.directions.iter() {
        let mut dir_sum = 0.0;
        for (i, (w, s)) in weights.iter().zip(schemes).enumerate() {
            for (id, sq) in group_sq_norms(w, s, d)?.into_iter().enumerate() {
                dir_sum += penalty_at(cfg, state, i, d, id) * sq.sqrt();
            }
        }
        total += cfg.lambda * dir_sum;
    }
    Ok(total)
}

/// Subgradient of [`reg_loss`]: `λ·P(g)·w/‖g‖₂` summed over the row and
/// column group containing each weight; zero for groups with norm below
/// [`KINK_TOLERANCE`].
pub fn reg_grad(
    weights: &[Tensor],
    schemes: &[BlockScheme],
    state: &PenaltyState,
    cfg: &RegConfig,
) -> Result<Vec<Tensor>> {
    prepare(weights, schemes, state, cfg)?;
    let mut out = Vec::with_capacity(weights.len());
    for (i, (w, s)) in weights.iter().zip(schemes).enumerate() {
        let coef = |d: Direction| -> Result<Vec<f64>> {
            if !cfg.directions.includes(d) {
                return Ok(Vec::new());
            }
            Ok(group_sq_norms(w, s, d)?
                .into_iter()
                .enumerate()
                .map(|(id, sq)| {
                    let norm = sq.sqrt();
                    if norm < KINK_TOLERANCE {
                        0.0
                    } else {
                        cfg.lambda * penalty_at(cfg, state, i, d, id) / norm
                    }
                })
                .collect())
        };
        let row_coef = coef(Direction::Row)?;
        let col_coef = coef(Direction::Column)?;
        let mut g = Tensor::zeros(w.shape().to_vec());
        let cols = s.cols();
        for r in 0..s.rows() {
            for c in 0..cols {
                let mut k = 0.0;
                if !row_coef.is_empty() {
                    k += row_coef[s.row_group_id(r, c)];
                }
                if !col_coef.is_empty() {
                    k += col_coef[s.col_group_id(r, c)];
                }
                g.data_mut()[r * cols + c] = k * w.at(r, c);
            }
        }
        out.push(g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(mode: RegMode, directions: Directions, lambda: f64) -> RegConfig {
        RegConfig {
            lambda,
            epsilon: Epsilon::Absolute(1e-3),
            directions,
            mode,
        }
    }

    fn random_layers(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<BlockScheme>) {
        let mut ws = Vec::new();
        let mut ss = Vec::new();
        for _ in 0..2 {
            let rows = rng.random_range(2..9);
            let cols = rng.random_range(2..9);
            let m = rng.random_range(1..=rows);
            let n = rng.random_range(1..=cols);
            ss.push(BlockScheme::partition(rows, cols, m, n).unwrap());
            ws.push(
                Tensor::matrix(
                    rows,
                    cols,
                    (0..rows * cols)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect(),
                )
                .unwrap(),
            );
        }
        (ws, ss)
    }

    #[test]
    fn init_penalty_formula_edges() {
        let s = BlockScheme::partition(2, 2, 1, 2).unwrap();
        let w = Tensor::from_rows(&[[0.0, 0.0], [0.3, 0.4]]);
        let c = cfg(RegMode::Reweighted, Directions::Row, 1.0);
        let st = init_penalties(&[w], &[s], &c).unwrap();
        assert_eq!(st.t, 0);
        assert_eq!(st.layers[0].row[0], 1.0 / 1e-3);
        assert!((st.layers[0].row[1] - 1.0 / 0.251).abs() < 1e-12);
        assert!((st.layers[0].row[1] - 3.9841).abs() < 1e-4);
        assert!(st.layers[0].column.is_empty());
    }

    #[test]
    fn relative_epsilon_scales_with_layer() {
        let s = BlockScheme::partition(2, 2, 1, 2).unwrap();
        let w = Tensor::from_rows(&[[1.0, 1.0], [2.0, 0.0]]);
        let c = RegConfig {
            epsilon: Epsilon::Relative(1e-3),
            ..cfg(RegMode::Reweighted, Directions::Both, 1.0)
        };
        let st = init_penalties(&[w], &[s], &c).unwrap();
        // 1x2 blocks: row sq norms 2 and 4; every column group is one
        // element, sq norms 1, 1, 4, 0.
        assert!((st.layers[0].eps_row - 3e-3).abs() < 1e-15);
        assert!((st.layers[0].eps_column - 1.5e-3).abs() < 1e-15);
    }

    #[test]
    fn smaller_norm_gets_larger_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (ws, ss) = random_layers(&mut rng);
            let c = cfg(RegMode::Reweighted, Directions::Both, 1.0);
            let st = init_penalties(&ws, &ss, &c).unwrap();
            for (l, (w, s)) in ws.iter().zip(&ss).enumerate() {
                for d in [Direction::Row, Direction::Column] {
                    let sq = group_sq_norms(w, s, d).unwrap();
                    let p = st.layers[l].get(d);
                    for a in 0..sq.len() {
                        assert_eq!(p[a], 1.0 / (sq[a] + 1e-3));
                        for b in 0..sq.len() {
                            if sq[a] < sq[b] {
                                assert!(p[a] > p[b]);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn reg_loss_hand_case() {
        let s = BlockScheme::partition(1, 2, 1, 2).unwrap();
        let w = vec![Tensor::from_rows(&[[3.0, 4.0]])];
        let c = cfg(RegMode::Reweighted, Directions::Row, 0.1);
        let mut st = PenaltyState::uniform(&[s], Directions::Row, 2.0);
        assert!((reg_loss(&w, &[s], &st, &c).unwrap() - 1.0).abs() < 1e-15);
        st.layers[0].row.clear();
        assert!(matches!(
            reg_loss(&w, &[s], &st, &c),
            Err(Error::MissingPenalty(_))
        ));

        let zero = vec![Tensor::zeros(vec![1, 2])];
        let st = PenaltyState::uniform(&[s], Directions::Row, 2.0);
        assert_eq!(reg_loss(&zero, &[s], &st, &c).unwrap(), 0.0);
    }

    #[test]
    fn static_equals_reweighted_with_unit_penalties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (ws, ss) = random_layers(&mut rng);
        let unit = PenaltyState::uniform(&ss, Directions::Both, 1.0);
        let rew = reg_loss(
            &ws,
            &ss,
            &unit,
            &cfg(RegMode::Reweighted, Directions::Both, 0.3),
        )
        .unwrap();
        let garbage = PenaltyState {
            layers: vec![],
            t: 0,
        };
        let stat = reg_loss(
            &ws,
            &ss,
            &garbage,
            &cfg(RegMode::StaticLasso, Directions::Both, 0.3),
        )
        .unwrap();
        assert_eq!(rew, stat);
    }

    #[test]
    fn both_directions_is_exact_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (ws, ss) = random_layers(&mut rng);
            let c = cfg(RegMode::Reweighted, Directions::Both, 0.7);
            let st = init_penalties(&ws, &ss, &c).unwrap();
            let both = reg_loss(&ws, &ss, &st, &c).unwrap();
            let row = reg_loss(
                &ws,
                &ss,
                &st,
                &RegConfig {
                    directions: Directions::Row,
                    ..c
                },
            )
            .unwrap();
            let col = reg_loss(
                &ws,
                &ss,
                &st,
                &RegConfig {
                    directions: Directions::Column,
                    ..c
                },
            )
            .unwrap();
            assert_eq!(both, row + col);
        }
    }

    #[test]
    fn static_loss_is_homogeneous_per_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut ws, ss) = random_layers(&mut rng);
        ws.truncate(1);
        let ss = &ss[..1];
        let c = cfg(RegMode::StaticLasso, Directions::Row, 1.0);
        let st = PenaltyState::uniform(ss, Directions::Row, 1.0);
        let g = crate::blocks::enumerate_groups(&ss[0], 0, Direction::Row)[0];
        let norm = crate::blocks::group_norm(&ws[0], &g).unwrap();
        let base = reg_loss(&ws, ss, &st, &c).unwrap();
        let alpha = 2.5;
        for (r, cc) in g.elements() {
            let v = ws[0].at(r, cc);
            ws[0].set(r, cc, alpha * v);
        }
        let scaled = reg_loss(&ws, ss, &st, &c).unwrap();
        assert!((scaled - base - (alpha - 1.0) * norm).abs() < 1e-12);
    }

    #[test]
    fn reg_grad_zero_and_unit_cases() {
        let s = BlockScheme::partition(2, 2, 1, 1).unwrap();
        let c = cfg(RegMode::Reweighted, Directions::Row, 1.0);
        let st = PenaltyState::uniform(&[s], Directions::Row, 1.0);
        let zero = reg_grad(&[Tensor::zeros(vec![2, 2])], &[s], &st, &c).unwrap();
        assert!(zero[0].data().iter().all(|v| *v == 0.0));

        let w = Tensor::from_rows(&[[1.0, -1.0], [1.0, -1.0]]);
        let g = reg_grad(&[w], &[s], &st, &c).unwrap();
        assert_eq!(g[0].data(), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn reg_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for mode in [RegMode::StaticLasso, RegMode::Reweighted] {
            for _ in 0..10 {
                let (mut ws, ss) = random_layers(&mut rng);
                let c = cfg(mode, Directions::Both, 0.37);
                let st = init_penalties(&ws, &ss, &c).unwrap();
                let analytic = reg_grad(&ws, &ss, &st, &c).unwrap();
                for l in 0..ws.len() {
                    for k in 0..ws[l].len() {
                        let orig = ws[l].data()[k];
                        ws[l].data_mut()[k] = orig + h;
                        let up = reg_loss(&ws, &ss, &st, &c).unwrap();
                        ws[l].data_mut()[k] = orig - h;
                        let down = reg_loss(&ws, &ss, &st, &c).unwrap();
                        ws[l].data_mut()[k] = orig;
                        let numeric = (up - down) / (2.0 * h);
                        let a = analytic[l].data()[k];
                        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                        assert!(rel < 1e-4, "{} vs {}", a, numeric);
                    }
                }
            }
        }
    }

    #[test]
    fn update_is_idempotent_on_fixed_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (ws, ss) = random_layers(&mut rng);
        let c = cfg(RegMode::Reweighted, Directions::Both, 1.0);
        let st0 = init_penalties(&ws, &ss, &c).unwrap();
        let st1 = update_penalties(&st0, &ws, &ss, &c).unwrap();
        let st2 = update_penalties(&st1, &ws, &ss, &c).unwrap();
        assert_eq!(st1.layers, st0.layers);
        assert_eq!(st2.layers, st1.layers);
        assert_eq!((st1.t, st2.t), (1, 2));
    }

    #[test]
    fn update_hand_case() {
        let s = BlockScheme::partition(1, 1, 1, 1).unwrap();
        let c = cfg(RegMode::Reweighted, Directions::Row, 1.0);
        let st = init_penalties(&[Tensor::from_rows(&[[5.0]])], &[s], &c).unwrap();
        let next = update_penalties(&st, &[Tensor::from_rows(&[[1.0]])], &[s], &c).unwrap();
        assert!((next.layers[0].row[0] - 0.999001).abs() < 1e-6);
        assert_eq!(next.layers[0].row[0], 1.0 / 1.001);
    }

    #[test]
    fn negative_lambda_rejected() {
        let s = BlockScheme::partition(1, 1, 1, 1).unwrap();
        let c = cfg(RegMode::Reweighted, Directions::Row, -1.0);
        assert!(init_penalties(&[Tensor::zeros(vec![1, 1])], &[s], &c).is_err());
    }
}
