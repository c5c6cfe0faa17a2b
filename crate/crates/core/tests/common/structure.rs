//! Structural oracles: small fixed architectures and checks that a removal
//! leaves everything it does not touch bit-for-bit unchanged.

use fprune::graph::{
    build_architecture, remove_groups, resolve_prune_groups, Family, LayerKind, Mode, NetworkGraph, PruneGroups,
    ScaleConfig,
};
use fprune::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_config(family: Family) -> ScaleConfig {
    let mut cfg = ScaleConfig {
        family,
        input_size: 12,
        input_channels: 1,
        class_count: 5,
        stem_width: 6,
        stem_kernel: 3,
        stem_pool: false,
        stage_widths: vec![],
        block_counts: vec![],
        stage_strides: vec![],
        expansion: vec![],
        embedding_width: 0,
        expand_ratio: 2,
    };
    match family {
        Family::FireNet => {
            cfg.stage_widths = vec![3, 4];
            cfg.block_counts = vec![1, 1];
            cfg.stage_strides = vec![2, 1];
            cfg.embedding_width = 10;
        }
        Family::InvertedResidualNet => {
            cfg.stage_widths = vec![6, 8];
            cfg.block_counts = vec![2, 2];
            cfg.stage_strides = vec![1, 2];
            cfg.expansion = vec![1, 2];
            cfg.embedding_width = 12;
        }
        Family::BottleneckNet => {
            cfg.stage_widths = vec![2, 3];
            cfg.block_counts = vec![2, 1];
            cfg.stage_strides = vec![1, 2];
        }
        Family::Plain | Family::Custom => {
            cfg.family = Family::Plain;
            cfg.stage_widths = vec![5, 7];
        }
    }
    cfg
}

/// A built toy with randomized batch-norm state so channels are distinct.
pub fn toy_graph(family: Family, seed: u64) -> NetworkGraph {
    let mut g = build_architecture(&toy_config(family), seed).expect("toy builds");
    randomize_bn(&mut g, seed ^ 0x5eed);
    g
}

pub fn randomize_bn(g: &mut NetworkGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for node in &mut g.nodes {
        if let LayerKind::BatchNorm { .. } = node.kind {
            for (t, (lo, hi)) in node
                .params
                .iter_mut()
                .chain(node.buffers.iter_mut())
                .zip([(0.5, 1.5), (-0.3, 0.3), (-0.2, 0.2), (0.5, 2.0)])
            {
                for v in t.data_mut() {
                    *v = rng.gen_range(lo..hi) as f32 as f64;
                }
            }
        }
    }
}

pub fn random_images(g: &NetworkGraph, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = g.input;
    Tensor::from_fn(&[n, s.channels, s.height, s.width], |_| rng.gen_range(-1.0..1.0))
}

/// Nodes whose output depends on the removed group's channels through a
/// conv or linear consumer.
pub fn tainted_nodes(g: &NetworkGraph, groups: &PruneGroups, gid: usize) -> Vec<bool> {
    let group = groups.get(gid).expect("group");
    let mut tainted = vec![false; g.nodes.len()];
    for c in &group.consumers {
        tainted[c.node] = true;
    }
    for i in 0..g.nodes.len() {
        if g.nodes[i].inputs.iter().any(|&j| tainted[j]) {
            tainted[i] = true;
        }
    }
    tainted
}

/// Removes `gid`, runs both graphs on `images`, and checks that every node
/// not downstream of a consumer of the group reproduces the original
/// activations of its surviving channels exactly. Returns a description of
/// the first violation.
pub fn check_single_removal(g: &NetworkGraph, groups: &PruneGroups, gid: usize, images: &Tensor) -> Result<(), String> {
    let pruned = remove_groups(g, groups, &[gid]).map_err(|e| format!("removal failed: {e}"))?;
    let before = g.run(images, Mode::Eval, false).map_err(|e| e.to_string())?;
    let after = pruned
        .run(images, Mode::Eval, false)
        .map_err(|e| format!("forward after removing group {gid} failed: {e}"))?;
    let tainted = tainted_nodes(g, groups, gid);
    let n = images.shape()[0];
    for (i, node) in g.nodes.iter().enumerate() {
        if tainted[i] || matches!(node.kind, LayerKind::Flatten | LayerKind::Linear { .. }) {
            continue;
        }
        let kept: Vec<usize> = (0..groups.channel_groups(i).len())
            .filter(|&c| groups.group_of(i, c) != Some(gid))
            .collect();
        let want = before.output(i).select(1, &kept).expect("select");
        let got = after.output(i);
        if want.shape() != got.shape() {
            return Err(format!("node '{}': shape {:?} vs {:?}", node.id, got.shape(), want.shape()));
        }
        let same = want.data().iter().zip(got.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("node '{}' (batch {n}): surviving activations changed", node.id));
        }
    }
    Ok(())
}

/// Every prunable channel is in exactly one group, and the groups' member
/// lists agree with the channel map.
pub fn check_partition(g: &NetworkGraph, groups: &PruneGroups) -> Result<(), String> {
    let shapes = g.shapes().map_err(|e| e.to_string())?;
    let mut seen = std::collections::HashSet::new();
    for grp in groups.groups() {
        for m in &grp.members {
            if !seen.insert((m.node, m.channel)) {
                return Err(format!("member {m:?} appears twice"));
            }
            if groups.group_of(m.node, m.channel) != Some(grp.id) {
                return Err(format!("member {m:?} not mapped to group {}", grp.id));
            }
        }
    }
    for (i, node) in g.nodes.iter().enumerate() {
        let weighted = match node.kind {
            LayerKind::Conv { .. } => true,
            LayerKind::Linear { .. } => g.head != Some(i),
            _ => false,
        };
        if !weighted {
            continue;
        }
        for c in 0..shapes[i].channels {
            if !seen.contains(&(i, c)) {
                return Err(format!("prunable channel {c} of '{}' is in no group", node.id));
            }
        }
    }
    Ok(())
}

pub fn groups_of(g: &NetworkGraph) -> PruneGroups {
    resolve_prune_groups(g).expect("groups resolve")
}
