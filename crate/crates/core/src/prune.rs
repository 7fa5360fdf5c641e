//! The pruning pipeline: pretrain, reweighted regularized training, threshold
//! pruning and masked retraining, plus the baselines it is compared against.

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::blocks::{
    apply_mask_in_place, group_norms, BlockScheme, Direction, Directions, LayerMask, SparseMask,
};
use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::nn::{evaluate, train_epoch, LayerSpec, Network, TrainConfig, TrainState};
use crate::regularize::{
    init_penalties, reg_grad, update_penalties, PenaltyState, RegConfig, RegMode,
};
use crate::tensor::Tensor;

/// Block size requested for every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockShape {
    Size {
        m: usize,
        n: usize,
    },
    /// One block per layer: classic whole-row / whole-column pruning.
    Whole,
}

impl BlockShape {
    /// One scheme per weight layer; the flag is set when the block had to be
    /// clamped to a layer smaller than it.
    pub fn schemes(&self, weights: &[Tensor]) -> Result<Vec<(BlockScheme, bool)>> {
        weights
            .iter()
            .map(|w| {
                let (r, c) = w.dims2()?;
                match *self {
                    BlockShape::Size { m, n } => BlockScheme::clamped(r, c, m, n),
                    BlockShape::Whole => Ok((BlockScheme::whole(r, c)?, false)),
                }
            })
            .collect()
    }
}

impl FromStr for BlockShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "whole" {
            return Ok(BlockShape::Whole);
        }
        let bad = || Error::Config(format!("block must be MxN or whole, got {:?}", s));
        let (m, n) = s.split_once('x').ok_or_else(bad)?;
        let m: usize = m.trim().parse().map_err(|_| bad())?;
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        if m == 0 || n == 0 {
            return Err(bad());
        }
        Ok(BlockShape::Size { m, n })
    }
}

impl fmt::Display for BlockShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockShape::Size { m, n } => write!(f, "{}x{}", m, n),
            BlockShape::Whole => f.write_str("whole"),
        }
    }
}

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!(stringify!($name), " must be one of {:?}, got {:?}"),
                        [$($text),+],
                        other
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($name::$variant => $text,)+
                })
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Kill a group when its norm is below `tau ×` the largest group norm of
    /// the same layer and direction.
    Relative,
    /// Kill a group when its norm is below `tau`.
    Absolute,
}
keyword_enum!(ThresholdMode { Relative => "relative", Absolute => "absolute" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    /// Force plain group lasso regardless of the regularizer mode.
    StaticLasso,
    /// Skip regularization; kill the globally smallest groups.
    Magnitude,
}
keyword_enum!(Baseline { None => "none", StaticLasso => "static_lasso", Magnitude => "magnitude" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Row and column terms in one objective.
    Simultaneous,
    /// Each outer iteration trains the row term, then the column term.
    Sequential,
}
keyword_enum!(Schedule { Simultaneous => "simultaneous", Sequential => "sequential" });

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Outer reweighting iterations `T`.
    pub iterations: usize,
    pub epochs_per_iteration: usize,
    pub retrain_epochs: usize,
    pub threshold_mode: ThresholdMode,
    pub tau: f64,
    pub baseline: Baseline,
    /// Keep the strongest group of a layer instead of failing when pruning
    /// would remove the whole layer.
    pub floor: bool,
    pub schedule: Schedule,
    /// Compression target of the magnitude baseline.
    pub target_rate: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            epochs_per_iteration: 5,
            retrain_epochs: 15,
            threshold_mode: ThresholdMode::Relative,
            tau: 0.05,
            baseline: Baseline::None,
            floor: true,
            schedule: Schedule::Simultaneous,
            target_rate: 8.0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("T must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.target_rate >= 1.0 && self.target_rate.is_finite()) {
            return Err(Error::Config(format!(
                "target_rate must be >= 1, got {}",
                self.target_rate
            )));
        }
        Ok(())
    }
}

fn check_schemes(net: &Network, schemes: &[BlockScheme]) -> Result<()> {
    if schemes.len() != net.weights().len() {
        return shape_err(format!(
            "{} block schemes for {} weight layers",
            schemes.len(),
            net.weights().len()
        ));
    }
    Ok(())
}

/// Dense training for `epochs` epochs; returns the last epoch's mean loss.
pub fn train_dense(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    state: &mut TrainState,
    epochs: usize,
) -> Result<f64> {
    let mut last = f64::NAN;
    for _ in 0..epochs {
        last = train_epoch(net, data, state, cfg.batch_size, None, None)?;
    }
    Ok(last)
}

/// The reweighting phase: `T` outer iterations of regularized SGD, each
/// followed by a penalty update. Returns the penalties in force before every
/// iteration and the final ones (`T + 1` entries).
pub fn reweight_train(
    net: &mut Network,
    data: &Dataset,
    schemes: &[BlockScheme],
    reg: &RegConfig,
    pcfg: &PruneConfig,
    train: &TrainConfig,
    state: &mut TrainState,
) -> Result<Vec<PenaltyState>> {
    pcfg.validate()?;
    check_schemes(net, schemes)?;
    let mut penalties = match reg.mode {
        RegMode::Reweighted => init_penalties(net.weights(), schemes, reg)?,
        RegMode::StaticLasso => PenaltyState::uniform(schemes, reg.directions, 1.0),
    };
    let mut history = vec![penalties.clone()];
    let phases: Vec<RegConfig> = match pcfg.schedule {
        Schedule::Simultaneous => vec![*reg],
        Schedule::Sequential => reg
            .directions
            .iter()
            .map(|d| RegConfig {
                directions: match d {
                    Direction::Row => Directions::Row,
                    Direction::Column => Directions::Column,
                },
                ..*reg
            })
            .collect(),
    };
    for t in 0..pcfg.iterations {
        for phase in &phases {
            let mut extra = |n: &Network| reg_grad(n.weights(), schemes, &penalties, phase);
            for _ in 0..pcfg.epochs_per_iteration {
                let loss = train_epoch(net, data, state, train.batch_size, Some(&mut extra), None)?;
                debug!("reweight t={} epoch={} loss={:.6}", t, state.epoch, loss);
            }
        }
        if reg.mode == RegMode::Reweighted {
            penalties = update_penalties(&penalties, net.weights(), schemes, reg)?;
        } else {
            penalties.t += 1;
        }
        history.push(penalties.clone());
    }
    Ok(history)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Threshold every group of the pruned directions, zero the removed weights
/// and return the mask. Directions outside `directions` are left intact.
pub fn prune_threshold(
    net: &mut Network,
    schemes: &[BlockScheme],
    directions: Directions,
    pcfg: &PruneConfig,
) -> Result<SparseMask> {
    pcfg.validate()?;
    check_schemes(net, schemes)?;
    let mut layers = Vec::with_capacity(schemes.len());
    for (i, (w, s)) in net.weights().iter().zip(schemes).enumerate() {
        let mut mask = LayerMask::dense(*s);
        let mut norms = [Vec::new(), Vec::new()];
        for d in directions.iter() {
            let nd = group_norms(w, s, d)?;
            let cut = match pcfg.threshold_mode {
                ThresholdMode::Relative => pcfg.tau * nd.iter().cloned().fold(0.0, f64::max),
                ThresholdMode::Absolute => pcfg.tau,
            };
            for (id, norm) in nd.iter().enumerate() {
                if *norm < cut {
                    mask.set_alive(d, id, false);
                }
            }
            norms[d as usize] = nd;
        }
        if mask.surviving() == 0 {
            if !pcfg.floor {
                return Err(Error::Prune(format!(
                    "threshold removes every weight of layer {}; enable floor to keep its strongest group",
                    i
                )));
            }
            restore_floor(&mut mask, w, s, directions, &norms)?;
            info!(
                "layer {} fell to zero weights; floor kept its strongest group",
                i
            );
        }
        layers.push(mask);
    }
    let mask = SparseMask { layers };
    for (w, m) in net.weights_mut().iter_mut().zip(&mask.layers) {
        apply_mask_in_place(w, m)?;
    }
    Ok(mask)
}

/// Keep the strongest row group and the strongest column group of the same
/// block, so at least one weight survives.
fn restore_floor(
    mask: &mut LayerMask,
    w: &Tensor,
    s: &BlockScheme,
    directions: Directions,
    norms: &[Vec<f64>; 2],
) -> Result<()> {
    let block = if directions.includes(Direction::Row) {
        let best = argmax(&norms[Direction::Row as usize]);
        let alive = mask.alive(Direction::Row).len();
        for id in 0..alive {
            mask.set_alive(Direction::Row, id, id == best);
        }
        let g = s.group(0, Direction::Row, best)?;
        g.block
    } else {
        let n = group_norms(w, s, Direction::Row)?;
        s.group(0, Direction::Row, argmax(&n))?.block
    };
    if directions.includes(Direction::Column) {
        let col_norms = &norms[Direction::Column as usize];
        let b = s.block(block);
        let best = (b.col0..b.col0 + b.width)
            .map(|c| s.col_group_id(b.row0, c))
            .max_by(|a, b| col_norms[*a].total_cmp(&col_norms[*b]).then(b.cmp(a)))
            .expect("blocks are never empty");
        let alive = mask.alive(Direction::Column).len();
        for id in 0..alive {
            mask.set_alive(Direction::Column, id, id == best);
        }
    }
    Ok(())
}

/// Masked fine-tuning on the data loss only; masked weights stay exactly 0.
pub fn retrain(
    net: &mut Network,
    data: &Dataset,
    mask: &SparseMask,
    epochs: usize,
    train: &TrainConfig,
    state: &mut TrainState,
) -> Result<f64> {
    let mut last = f64::NAN;
    for _ in 0..epochs {
        last = train_epoch(net, data, state, train.batch_size, None, Some(mask))?;
        debug!("retrain epoch={} loss={:.6}", state.epoch, last);
    }
    Ok(last)
}

/// Kill the globally smallest-norm groups, in ascending norm order, until the
/// compression rate reaches `target_rate`. A group whose removal would empty
/// its layer is skipped.
pub fn magnitude_baseline(
    net: &Network,
    schemes: &[BlockScheme],
    directions: Directions,
    target_rate: f64,
) -> Result<SparseMask> {
    check_schemes(net, schemes)?;
    if !(target_rate >= 1.0 && target_rate.is_finite()) {
        return Err(Error::Config(format!(
            "target_rate must be >= 1, got {}",
            target_rate
        )));
    }
    let mut order = Vec::new();
    for (l, (w, s)) in net.weights().iter().zip(schemes).enumerate() {
        for d in directions.iter() {
            for (id, n) in group_norms(w, s, d)?.into_iter().enumerate() {
                order.push((n, l, d, id));
            }
        }
    }
    order.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then((a.2 as usize).cmp(&(b.2 as usize)))
            .then(a.3.cmp(&b.3))
    });
    let mut layers: Vec<LayerMask> = schemes.iter().map(|s| LayerMask::dense(*s)).collect();
    let total: usize = layers.iter().map(LayerMask::total).sum();
    let mut per_layer: Vec<usize> = layers.iter().map(LayerMask::total).collect();
    let mut surviving = total;
    for (_, l, d, id) in order {
        if total as f64 >= target_rate * surviving as f64 {
            break;
        }
        let g = schemes[l].group(l, d, id)?;
        let lost = g
            .elements()
            .filter(|&(r, c)| layers[l].element(r, c))
            .count();
        if lost == per_layer[l] {
            continue;
        }
        layers[l].set_alive(d, id, false);
        per_layer[l] -= lost;
        surviving -= lost;
    }
    if (total as f64) < target_rate * surviving as f64 {
        return Err(Error::Prune(format!(
            "compression {} is unreachable: best is {:.3}",
            target_rate,
            total as f64 / surviving as f64
        )));
    }
    Ok(SparseMask { layers })
}

/// Magnitude histograms of a reference network: all weights versus the
/// positions a mask keeps. Bins are log10-spaced, four per decade; exact
/// zeros are counted separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalWeightReport {
    /// `edges.len() == all.len() + 1`; bin `k` holds `edges[k] <= |w| < edges[k+1]`.
    pub edges: Vec<f64>,
    pub all: Vec<u64>,
    pub surviving: Vec<u64>,
    pub zeros_all: u64,
    pub zeros_surviving: u64,
    /// Median magnitude over every reference weight.
    pub median: f64,
    /// Surviving positions whose reference magnitude is below the median.
    pub surviving_below_median: u64,
    pub surviving_total: u64,
}

const BINS_PER_DECADE: f64 = 4.0;

pub fn critical_weight_report(
    mask: &SparseMask,
    reference: &Network,
) -> Result<CriticalWeightReport> {
    let weights = reference.weights();
    if weights.len() != mask.layers.len() {
        return shape_err(format!(
            "mask has {} layers, network {}",
            mask.layers.len(),
            weights.len()
        ));
    }
    let mut mags = Vec::new();
    let mut keep = Vec::new();
    for (w, m) in weights.iter().zip(&mask.layers) {
        let (r, c) = w.dims2()?;
        if (r, c) != (m.scheme().rows(), m.scheme().cols()) {
            return shape_err(format!(
                "{}x{} weights do not match a {}x{} mask",
                r,
                c,
                m.scheme().rows(),
                m.scheme().cols()
            ));
        }
        mags.extend(w.data().iter().map(|v| v.abs()));
        keep.extend(m.elements());
    }
    let mut sorted = mags.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.is_empty() {
        0.0
    } else if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };

    let nonzero = sorted.iter().cloned().filter(|v| *v > 0.0);
    let lo = nonzero.clone().next();
    let hi = sorted.last().cloned().filter(|v| *v > 0.0);
    let edges: Vec<f64> = match (lo, hi) {
        (Some(lo), Some(hi)) => {
            let k0 = (lo.log10() * BINS_PER_DECADE).floor() as i64;
            let k1 = (hi.log10() * BINS_PER_DECADE).floor() as i64 + 1;
            (k0..=k1)
                .map(|k| 10f64.powf(k as f64 / BINS_PER_DECADE))
                .collect()
        }
        _ => Vec::new(),
    };
    let bins = edges.len().saturating_sub(1);
    let bin_of = |v: f64| -> usize {
        let k = edges.partition_point(|e| *e <= v);
        k.saturating_sub(1).min(bins - 1)
    };
    let mut rep = CriticalWeightReport {
        edges: edges.clone(),
        all: vec![0; bins],
        surviving: vec![0; bins],
        zeros_all: 0,
        zeros_surviving: 0,
        median,
        surviving_below_median: 0,
        surviving_total: 0,
    };
    for (v, k) in mags.iter().zip(&keep) {
        if *v == 0.0 {
            rep.zeros_all += 1;
            rep.zeros_surviving += u64::from(*k);
        } else {
            let b = bin_of(*v);
            rep.all[b] += 1;
            rep.surviving[b] += u64::from(*k);
        }
        if *k {
            rep.surviving_total += 1;
            rep.surviving_below_median += u64::from(*v < median);
        }
    }
    Ok(rep)
}

/// Summary of one pruned layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    pub block_m: usize,
    pub block_n: usize,
    pub clamped: bool,
    pub total: usize,
    pub surviving: usize,
    pub density: f64,
    pub row_groups_alive: usize,
    pub row_groups: usize,
    pub column_groups_alive: usize,
    pub column_groups: usize,
    /// Blocks by density, ten bins `[0, 0.1), .., [0.9, 1.0]`.
    pub block_density_histogram: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochCounts {
    pub pretrain: usize,
    pub reweight: usize,
    pub retrain: usize,
    pub total: usize,
}

/// Everything a pruning run reports. Contains no timings, so identical
/// inputs give byte-identical JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub seed: u64,
    pub mode: RegMode,
    pub baseline: Baseline,
    pub block: BlockShape,
    pub directions: Directions,
    pub lambda: f64,
    pub tau: f64,
    pub base_train_accuracy: f64,
    pub base_test_accuracy: f64,
    pub pruned_train_accuracy: f64,
    pub pruned_test_accuracy: f64,
    pub compression_rate: f64,
    pub total_weights: usize,
    pub surviving_weights: usize,
    pub layers: Vec<LayerReport>,
    /// Mean penalty per outer iteration (empty for the magnitude baseline).
    pub mean_penalty: Vec<f64>,
    pub critical: CriticalWeightReport,
    pub epochs: EpochCounts,
}

pub fn layer_reports(mask: &SparseMask, clamped: &[bool]) -> Vec<LayerReport> {
    mask.layers
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let s = m.scheme();
            let mut hist = vec![0u64; 10];
            for j in 0..s.block_count() {
                let d = m.block_density(j);
                hist[((d * 10.0) as usize).min(9)] += 1;
            }
            let count = |d: Direction| m.alive(d).iter().filter(|a| **a).count();
            LayerReport {
                index: i,
                rows: s.rows(),
                cols: s.cols(),
                block_m: s.m(),
                block_n: s.n(),
                clamped: clamped.get(i).copied().unwrap_or(false),
                total: m.total(),
                surviving: m.surviving(),
                density: m.surviving() as f64 / m.total() as f64,
                row_groups_alive: count(Direction::Row),
                row_groups: m.alive(Direction::Row).len(),
                column_groups_alive: count(Direction::Column),
                column_groups: m.alive(Direction::Column).len(),
                block_density_histogram: hist,
            }
        })
        .collect()
}

fn mean_penalty(p: &PenaltyState) -> f64 {
    let (sum, n) = p.layers.iter().fold((0.0, 0usize), |(s, n), l| {
        (
            s + l.row.iter().sum::<f64>() + l.column.iter().sum::<f64>(),
            n + l.row.len() + l.column.len(),
        )
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Everything needed for one end-to-end run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub reg: RegConfig,
    pub prune: PruneConfig,
    pub block: BlockShape,
    pub seed: u64,
}

pub struct PipelineOutcome {
    pub pretrained: Network,
    pub pruned: Network,
    pub mask: SparseMask,
    pub schemes: Vec<BlockScheme>,
    pub history: Vec<PenaltyState>,
    pub report: PruneReport,
}

/// Initialize and train a dense network.
pub fn pretrain(
    layers: Vec<LayerSpec>,
    data: &Dataset,
    train: &TrainConfig,
    epochs: usize,
    seed: u64,
) -> Result<Network> {
    let mut net = Network::init(layers, seed)?;
    let mut state = TrainState::new(train, seed)?;
    train_dense(&mut net, data, train, &mut state, epochs)?;
    Ok(net)
}

/// Regularize, prune and retrain a pretrained network. `pretrain_epochs` is
/// recorded in the report only.
pub fn run_pipeline(
    pretrained: Network,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &PipelineConfig,
    pretrain_epochs: usize,
) -> Result<PipelineOutcome> {
    cfg.train.validate()?;
    cfg.reg.validate()?;
    cfg.prune.validate()?;
    let scheme_flags = cfg.block.schemes(pretrained.weights())?;
    let schemes: Vec<BlockScheme> = scheme_flags.iter().map(|s| s.0).collect();
    let clamped: Vec<bool> = scheme_flags.iter().map(|s| s.1).collect();
    let base_train = evaluate(&pretrained, train_set)?;
    let base_test = evaluate(&pretrained, test_set)?;
    info!(
        "dense accuracy train={:.4} test={:.4}",
        base_train, base_test
    );

    let mut reg = cfg.reg;
    if cfg.prune.baseline == Baseline::StaticLasso {
        reg.mode = RegMode::StaticLasso;
    }
    let mut net = pretrained.clone();
    let mut state = TrainState::new(&cfg.train, cfg.seed.wrapping_add(1))?;
    let (history, mask, reweight_epochs) = if cfg.prune.baseline == Baseline::Magnitude {
        let mask = magnitude_baseline(&net, &schemes, reg.directions, cfg.prune.target_rate)?;
        for (w, m) in net.weights_mut().iter_mut().zip(&mask.layers) {
            apply_mask_in_place(w, m)?;
        }
        (Vec::new(), mask, 0)
    } else {
        let history = reweight_train(
            &mut net, train_set, &schemes, &reg, &cfg.prune, &cfg.train, &mut state,
        )?;
        let mask = prune_threshold(&mut net, &schemes, reg.directions, &cfg.prune)?;
        let phases = match cfg.prune.schedule {
            Schedule::Simultaneous => 1,
            Schedule::Sequential => reg.directions.iter().count(),
        };
        (
            history,
            mask,
            cfg.prune.iterations * cfg.prune.epochs_per_iteration * phases,
        )
    };
    info!(
        "compression after threshold: {:.3}x",
        mask.compression_rate()
    );
    retrain(
        &mut net,
        train_set,
        &mask,
        cfg.prune.retrain_epochs,
        &cfg.train,
        &mut state,
    )?;

    let critical = critical_weight_report(&mask, &pretrained)?;
    let report = PruneReport {
        seed: cfg.seed,
        mode: reg.mode,
        baseline: cfg.prune.baseline,
        block: cfg.block,
        directions: reg.directions,
        lambda: reg.lambda,
        tau: cfg.prune.tau,
        base_train_accuracy: base_train,
        base_test_accuracy: base_test,
        pruned_train_accuracy: evaluate(&net, train_set)?,
        pruned_test_accuracy: evaluate(&net, test_set)?,
        compression_rate: mask.compression_rate(),
        total_weights: mask.total(),
        surviving_weights: mask.surviving(),
        layers: layer_reports(&mask, &clamped),
        mean_penalty: history.iter().map(mean_penalty).collect(),
        critical,
        epochs: EpochCounts {
            pretrain: pretrain_epochs,
            reweight: reweight_epochs,
            retrain: cfg.prune.retrain_epochs,
            total: pretrain_epochs + reweight_epochs + cfg.prune.retrain_epochs,
        },
    };
    Ok(PipelineOutcome {
        pretrained,
        pruned: net,
        mask,
        schemes,
        history,
        report,
    })
}
