use std::collections::HashSet;

use super::{FilterRef, LayerKind, LayerNode, NetworkGraph, ParamSet, PruneGroup, PruneGroups};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Surviving output channels of every node after a removal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrunePlan {
    keep: Vec<Vec<usize>>,
}

impl PrunePlan {
    pub fn new(graph: &NetworkGraph, groups: &PruneGroups, remove: &[usize]) -> Result<Self> {
        if let Some(&bad) = remove.iter().find(|&&g| g >= groups.len()) {
            return Err(Error::Prune(format!("unknown group id {bad} (have {})", groups.len())));
        }
        let removed: HashSet<usize> = remove.iter().copied().collect();
        let mut keep = Vec::with_capacity(graph.nodes.len());
        for (i, node) in graph.nodes.iter().enumerate() {
            let kept: Vec<usize> = groups
                .channel_groups(i)
                .iter()
                .enumerate()
                .filter(|(_, g)| !g.is_some_and(|g| removed.contains(&g)))
                .map(|(c, _)| c)
                .collect();
            if kept.is_empty() {
                return Err(Error::Prune(format!("removal would empty layer '{}'", node.id)));
            }
            keep.push(kept);
        }
        Ok(PrunePlan { keep })
    }

    pub fn kept(&self, node: usize) -> &[usize] {
        &self.keep[node]
    }

    fn keep_in<'a>(&'a self, node: &LayerNode) -> &'a [usize] {
        &self.keep[node.inputs[0]]
    }

    /// Excises removed channels from params, buffers and layer attributes.
    pub fn apply(&self, graph: &NetworkGraph) -> Result<NetworkGraph> {
        let mut nodes = Vec::with_capacity(graph.nodes.len());
        for (i, node) in graph.nodes.iter().enumerate() {
            let keep_out = &self.keep[i];
            let mut next = node.clone();
            next.params = self.slice_params(node, keep_out, &node.params)?;
            next.buffers = node
                .buffers
                .iter()
                .map(|b| select_if_needed(b, 0, keep_out))
                .collect::<Result<_>>()?;
            next.kind = match node.kind.clone() {
                LayerKind::Conv {
                    kernel,
                    stride,
                    padding,
                    groups,
                    bias,
                    ..
                } => {
                    let depthwise = node.kind.is_depthwise();
                    LayerKind::Conv {
                        in_channels: self.keep_in(node).len(),
                        out_channels: keep_out.len(),
                        kernel,
                        stride,
                        padding,
                        groups: if depthwise { keep_out.len() } else { groups },
                        bias,
                    }
                }
                LayerKind::BatchNorm { .. } => LayerKind::BatchNorm {
                    channels: keep_out.len(),
                },
                LayerKind::Linear { bias, .. } => LayerKind::Linear {
                    in_features: self.keep_in(node).len(),
                    out_features: keep_out.len(),
                    bias,
                },
                other => other,
            };
            nodes.push(next);
        }
        let pruned = NetworkGraph {
            family: graph.family,
            input: graph.input,
            nodes,
            embedding: graph.embedding,
            head: graph.head,
        };
        pruned.validate()?;
        Ok(pruned)
    }

    /// Slices a tensor set shaped like `graph`'s params (e.g. optimizer
    /// velocity) the same way [`apply`](Self::apply) slices the params.
    pub fn apply_params(&self, graph: &NetworkGraph, set: &ParamSet) -> Result<ParamSet> {
        if set.len() != graph.nodes.len() {
            return Err(Error::Prune("parameter set does not match the graph".into()));
        }
        graph
            .nodes
            .iter()
            .zip(set)
            .enumerate()
            .map(|(i, (node, tensors))| self.slice_params(node, &self.keep[i], tensors))
            .collect()
    }

    fn slice_params(&self, node: &LayerNode, keep_out: &[usize], tensors: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(tensors.len());
        for (p, t) in tensors.iter().enumerate() {
            let sliced = match &node.kind {
                LayerKind::Conv { groups, .. } if p == 0 => {
                    let w = select_if_needed(t, 0, keep_out)?;
                    if *groups == 1 {
                        select_if_needed(&w, 1, self.keep_in(node))?
                    } else {
                        w
                    }
                }
                LayerKind::Linear { .. } if p == 0 => {
                    let w = select_if_needed(t, 0, self.keep_in(node))?;
                    select_if_needed(&w, 1, keep_out)?
                }
                LayerKind::Conv { .. } | LayerKind::Linear { .. } | LayerKind::BatchNorm { .. } => {
                    select_if_needed(t, 0, keep_out)?
                }
                _ => t.clone(),
            };
            out.push(sliced);
        }
        Ok(out)
    }
}

fn select_if_needed(t: &Tensor, axis: usize, keep: &[usize]) -> Result<Tensor> {
    let full = t.shape()[axis] == keep.len() && keep.iter().enumerate().all(|(i, &k)| i == k);
    if full {
        Ok(t.clone())
    } else {
        t.select(axis, keep)
    }
}

/// Returns a copy of `graph` with `remove` excised.
pub fn remove_groups(graph: &NetworkGraph, groups: &PruneGroups, remove: &[usize]) -> Result<NetworkGraph> {
    PrunePlan::new(graph, groups, remove)?.apply(graph)
}

/// Calls `f(param_index, flat_index)` for every scalar parameter owned by
/// output channel `channel` of `node`.
pub(crate) fn visit_member_params(node: &LayerNode, channel: usize, mut f: impl FnMut(usize, usize)) {
    match &node.kind {
        LayerKind::Conv { .. } => {
            let w = node.params[0].shape();
            let row: usize = w[1..].iter().product();
            for k in channel * row..(channel + 1) * row {
                f(0, k);
            }
            if node.params.len() > 1 {
                f(1, channel);
            }
        }
        LayerKind::BatchNorm { .. } => {
            f(0, channel);
            f(1, channel);
        }
        LayerKind::Linear { out_features, .. } => {
            let rows = node.params[0].shape()[0];
            for j in 0..rows {
                f(0, j * out_features + channel);
            }
            if node.params.len() > 1 {
                f(1, channel);
            }
        }
        _ => {}
    }
}

/// Sets every parameter of the group's members to zero, so that its
/// channels carry exactly zero into their consumers.
pub fn zero_group(graph: &mut NetworkGraph, group: &PruneGroup) {
    for &FilterRef { node, channel } in &group.members {
        let n = &mut graph.nodes[node];
        let mut hits = Vec::new();
        visit_member_params(n, channel, |p, k| hits.push((p, k)));
        for (p, k) in hits {
            n.params[p].data_mut()[k] = 0.0;
        }
    }
}
