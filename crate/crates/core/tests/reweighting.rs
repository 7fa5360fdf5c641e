use blkrew::blocks::group_norms;
use blkrew::data::{gaussian_blobs, BlobSpec};
use blkrew::nn::{mlp, TrainConfig, TrainState};
use blkrew::prune::{pretrain, reweight_train, BlockShape, PruneConfig};
use blkrew::regularize::{Epsilon, RegConfig, RegMode};
use blkrew::{BlockScheme, Directions, Network};

/// Groups whose norm falls below `tau` times the largest norm of their layer
/// and direction.
fn below_threshold(net: &Network, schemes: &[BlockScheme], tau: f64) -> usize {
    let mut count = 0;
    for (w, s) in net.weights().iter().zip(schemes) {
        for d in Directions::Both.iter() {
            let norms = group_norms(w, s, d).unwrap();
            let cut = tau * norms.iter().cloned().fold(0.0, f64::max);
            count += norms.iter().filter(|n| **n < cut).count();
        }
    }
    count
}

#[test]
fn one_reweighting_cycle_sparsifies_more_than_static_lasso() {
    let train = TrainConfig {
        lr: 0.01,
        batch_size: 32,
        momentum: 0.9,
    };
    let pcfg = PruneConfig {
        iterations: 1,
        epochs_per_iteration: 5,
        ..Default::default()
    };
    let mut diffs = Vec::new();
    for seed in 0..5u64 {
        let (tr, _) = gaussian_blobs(&BlobSpec {
            classes: 10,
            dims: 64,
            samples: 5000,
            noise: 1.5,
            seed: 1000 + seed,
        })
        .unwrap()
        .split(0.2)
        .unwrap();
        let base = pretrain(mlp(&[64, 128, 64, 10], true), &tr, &train, 20, seed).unwrap();
        let schemes: Vec<BlockScheme> = BlockShape::Size { m: 4, n: 8 }
            .schemes(base.weights())
            .unwrap()
            .into_iter()
            .map(|s| s.0)
            .collect();
        let mut counts = [0usize; 2];
        for (k, mode) in [RegMode::Reweighted, RegMode::StaticLasso]
            .into_iter()
            .enumerate()
        {
            let reg = RegConfig {
                lambda: 5e-5,
                epsilon: Epsilon::Relative(1e-3),
                directions: Directions::Both,
                mode,
            };
            let mut net = base.clone();
            let mut state = TrainState::new(&train, seed + 1).unwrap();
            reweight_train(&mut net, &tr, &schemes, &reg, &pcfg, &train, &mut state).unwrap();
            counts[k] = below_threshold(&net, &schemes, pcfg.tau);
        }
        diffs.push(counts[0] as i64 - counts[1] as i64);
    }
    diffs.sort_unstable();
    assert!(
        diffs[2] > 0,
        "reweighted minus static below-threshold groups: {:?}",
        diffs
    );
}
