//! Induced-error oracle: the squared loss change from literally zeroing a
//! group and re-running the forward pass.

use fprune::data::{stack, Augment, Dataset};
use fprune::graph::{zero_group, Mode, NetworkGraph, PruneGroups};

/// Mean cross-entropy over `indices` in minibatches of `batch`, with
/// training-mode normalization and evaluation views.
pub fn subset_loss(g: &NetworkGraph, data: &Dataset, indices: &[usize], aug: &Augment, batch: usize) -> f64 {
    let head = g.head.unwrap();
    let mut total = 0.0;
    for chunk in indices.chunks(batch) {
        let views: Vec<Vec<f64>> = chunk
            .iter()
            .map(|&i| aug.eval_view(&data.samples[i].pixels, data.channels, data.size))
            .collect();
        let x = stack(&views, data.channels, aug.crop).unwrap();
        let labels: Vec<usize> = chunk.iter().map(|&i| data.samples[i].label).collect();
        let mut f = g.run(&x, Mode::Train, false).unwrap();
        let l = f.tape.softmax_cross_entropy(f.outputs[head], &labels).unwrap();
        total += f.tape.value(l).data()[0] * chunk.len() as f64;
    }
    total / indices.len() as f64
}

/// `(E(D, W) − E(D, W | w_S = 0))²` for every group, with `D` the whole
/// subset.
pub fn induced_errors(
    g: &NetworkGraph,
    groups: &PruneGroups,
    data: &Dataset,
    indices: &[usize],
    aug: &Augment,
    batch: usize,
) -> Vec<f64> {
    let base = subset_loss(g, data, indices, aug, batch);
    groups
        .groups()
        .iter()
        .map(|grp| {
            let mut z = g.clone();
            zero_group(&mut z, grp);
            (subset_loss(&z, data, indices, aug, batch) - base).powi(2)
        })
        .collect()
}

pub struct TaylorOracleRun {
    /// Against the minibatch-averaged oracle.
    pub spearman: f64,
    /// Against the squared change of the whole-subset mean loss.
    pub spearman_pooled: f64,
    pub filters: usize,
    pub val_accuracy: f64,
}

/// Trains a two-conv toy to convergence on synthetic identities, then
/// compares epoch-averaged Taylor scores against induced errors on a 25%
/// scoring subset. The oracle is evaluated per minibatch, the same unit the
/// scores are accumulated in.
pub fn taylor_vs_oracle(seed: u64) -> TaylorOracleRun {
    use fprune::data::{generate_synthetic_identities, Pose, Split, SyntheticIdentityConfig};
    use fprune::graph::{build_architecture, Family, ScaleConfig};
    use fprune::prune::{score_without_updates, ScoringStrategy};
    use fprune::train::{train, TrainConfig, DEFAULT_LR_LADDER};

    let mut data = generate_synthetic_identities(&SyntheticIdentityConfig {
        identities: 10,
        images_per_identity: 24,
        image_size: 14,
        poses: Pose::ALL.to_vec(),
        seed: 1000 + seed,
        noise: 0.1,
        distinctiveness: 1.0,
    })
    .unwrap();
    data.assign_holdout(0.2, seed).unwrap();
    let scale = ScaleConfig {
        family: Family::Plain,
        input_size: 12,
        input_channels: 1,
        class_count: 10,
        stem_width: 8,
        stem_kernel: 3,
        stem_pool: false,
        stage_widths: vec![8, 16],
        block_counts: vec![],
        stage_strides: vec![1, 2],
        expansion: vec![],
        embedding_width: 0,
        expand_ratio: 4,
    };
    let g = build_architecture(&scale, seed).unwrap();
    let aug = Augment {
        resize: 14,
        crop: 12,
        random_crop: true,
        flip: true,
    };
    let cfg = TrainConfig {
        batch_size: 16,
        lr_ladder: DEFAULT_LR_LADDER.to_vec(),
        patience: 3,
        plateau_threshold: 1e-4,
        momentum: 0.9,
        max_epochs: 80,
        seed,
        augment: aug,
    };
    let trained = train(&g, &data, &cfg).unwrap();
    let val_accuracy = trained.history.get(trained.best_epoch.max(1) - 1).map_or(0.0, |r| r.val_accuracy);
    let g = trained.graph;
    let train_idx = data.indices(Split::Train);
    let subset = data.subsample(&train_idx, 0.25, seed);
    let (groups, table) = score_without_updates(&g, &data, &subset, &aug, 16, ScoringStrategy::Taylor).unwrap();
    let taylor = table.averages().unwrap();
    let oracle = induced_errors_per_batch(&g, &groups, &data, &subset, &aug, 16);
    let pooled = induced_errors(&g, &groups, &data, &subset, &aug, 16);
    TaylorOracleRun {
        spearman: super::stats::spearman(&taylor, &oracle),
        spearman_pooled: super::stats::spearman(&taylor, &pooled),
        filters: groups.len(),
        val_accuracy,
    }
}

/// Mean over minibatches of `(E_b(W) − E_b(W | w_S = 0))²`.
pub fn induced_errors_per_batch(
    g: &NetworkGraph,
    groups: &PruneGroups,
    data: &Dataset,
    indices: &[usize],
    aug: &Augment,
    batch: usize,
) -> Vec<f64> {
    let chunks: Vec<&[usize]> = indices.chunks(batch).collect();
    let base: Vec<f64> = chunks.iter().map(|c| subset_loss(g, data, c, aug, batch)).collect();
    groups
        .groups()
        .iter()
        .map(|grp| {
            let mut z = g.clone();
            zero_group(&mut z, grp);
            chunks
                .iter()
                .zip(&base)
                .map(|(c, b)| (subset_loss(&z, data, c, aug, batch) - b).powi(2))
                .sum::<f64>()
                / chunks.len() as f64
        })
        .collect()
}
