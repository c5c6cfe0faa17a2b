use super::{LayerKind, NetworkGraph};
use crate::error::{Error, Result};

/// One channel of one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FilterRef {
    pub node: usize,
    pub channel: usize,
}

/// Channels that must be removed together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneGroup {
    pub id: usize,
    /// Output channels carrying this group's parameters: conv and linear
    /// filters, depthwise filters, batch-norm entries.
    pub members: Vec<FilterRef>,
    /// Input channels of downstream conv/linear layers reading the group.
    pub consumers: Vec<FilterRef>,
    /// Smallest member; used for ordering and tie-breaking.
    pub anchor: FilterRef,
    /// Output-channel count of the anchor layer.
    pub layer_width: usize,
}

impl PruneGroup {
    /// Nodes whose output channels belong to this group.
    pub fn member_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().map(|m| m.node)
    }
}

/// Partition of a graph's prunable channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneGroups {
    groups: Vec<PruneGroup>,
    /// Group of every output channel of every node; `None` for channels that
    /// are not prunable (input image, classifier outputs).
    channel_group: Vec<Vec<Option<usize>>>,
}

impl PruneGroups {
    pub fn groups(&self) -> &[PruneGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&PruneGroup> {
        self.groups.get(id)
    }

    pub fn group_of(&self, node: usize, channel: usize) -> Option<usize> {
        self.channel_group.get(node)?.get(channel).copied().flatten()
    }

    pub fn channel_groups(&self, node: usize) -> &[Option<usize>] {
        &self.channel_group[node]
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn push(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Partitions prunable channels into coupled groups by tracing channel
/// identities through the graph: residual adds merge identities, concats
/// lay them side by side, depthwise convs and normalization pass them
/// through.
pub fn resolve_prune_groups(graph: &NetworkGraph) -> Result<PruneGroups> {
    let shapes = graph.shapes()?;
    let mut uf = UnionFind { parent: Vec::new() };
    let mut fixed: Vec<bool> = Vec::new();
    let mut ids: Vec<Vec<usize>> = Vec::with_capacity(graph.nodes.len());
    let mut members: Vec<(usize, FilterRef)> = Vec::new();
    let mut consumers: Vec<(usize, FilterRef)> = Vec::new();

    let fresh = |uf: &mut UnionFind, fixed: &mut Vec<bool>, n: usize, is_fixed: bool| -> Vec<usize> {
        (0..n)
            .map(|_| {
                fixed.push(is_fixed);
                uf.push()
            })
            .collect()
    };

    for (i, node) in graph.nodes.iter().enumerate() {
        let coupling = |what: &str| Error::UnsupportedCoupling(format!("node '{}': {what}", node.id));
        let src = |k: usize| ids[node.inputs[k]].clone();
        let out: Vec<usize> = match &node.kind {
            LayerKind::Input => fresh(&mut uf, &mut fixed, graph.input.channels, true),
            LayerKind::Conv {
                in_channels,
                out_channels,
                groups,
                ..
            } => {
                if *groups == 1 {
                    let input = src(0);
                    for (j, &e) in input.iter().enumerate() {
                        consumers.push((e, FilterRef { node: i, channel: j }));
                    }
                    let out = fresh(&mut uf, &mut fixed, *out_channels, false);
                    for (c, &e) in out.iter().enumerate() {
                        members.push((e, FilterRef { node: i, channel: c }));
                    }
                    out
                } else if node.kind.is_depthwise() {
                    let out = src(0);
                    for (c, &e) in out.iter().enumerate() {
                        members.push((e, FilterRef { node: i, channel: c }));
                    }
                    out
                } else {
                    return Err(coupling(&format!(
                        "grouped conv with {groups} groups over {in_channels}→{out_channels} channels"
                    )));
                }
            }
            LayerKind::BatchNorm { .. } => {
                let out = src(0);
                for (c, &e) in out.iter().enumerate() {
                    members.push((e, FilterRef { node: i, channel: c }));
                }
                out
            }
            LayerKind::Relu | LayerKind::Relu6 | LayerKind::MaxPool { .. } | LayerKind::GlobalAvgPool => src(0),
            LayerKind::Add => {
                let out = src(0);
                for k in 1..node.inputs.len() {
                    for (&a, &b) in out.iter().zip(&ids[node.inputs[k]]) {
                        uf.union(a, b);
                    }
                }
                out
            }
            LayerKind::Concat => (0..node.inputs.len()).flat_map(src).collect(),
            LayerKind::Flatten => {
                let s = shapes[node.inputs[0]];
                if s.height * s.width != 1 {
                    return Err(coupling("flatten spreads each channel over several features"));
                }
                src(0)
            }
            LayerKind::Linear { out_features, .. } => {
                for (j, &e) in src(0).iter().enumerate() {
                    consumers.push((e, FilterRef { node: i, channel: j }));
                }
                let is_head = graph.head == Some(i);
                let out = fresh(&mut uf, &mut fixed, *out_features, is_head);
                if !is_head {
                    for (c, &e) in out.iter().enumerate() {
                        members.push((e, FilterRef { node: i, channel: c }));
                    }
                }
                out
            }
        };
        ids.push(out);
    }

    // A root is fixed if any element merged into it is.
    let n_elems = fixed.len();
    let mut root_fixed = vec![false; n_elems];
    for e in 0..n_elems {
        if fixed[e] {
            let r = uf.find(e);
            root_fixed[r] = true;
        }
    }

    let mut by_root: std::collections::BTreeMap<usize, (Vec<FilterRef>, Vec<FilterRef>)> = Default::default();
    for &(e, m) in &members {
        let r = uf.find(e);
        if !root_fixed[r] {
            by_root.entry(r).or_default().0.push(m);
        }
    }
    for &(e, c) in &consumers {
        let r = uf.find(e);
        if let Some(entry) = by_root.get_mut(&r) {
            entry.1.push(c);
        }
    }

    let mut groups: Vec<(usize, PruneGroup)> = by_root
        .into_iter()
        .map(|(root, (mut m, mut c))| {
            m.sort();
            c.sort();
            let anchor = m[0];
            let layer_width = shapes[anchor.node].channels;
            (
                root,
                PruneGroup {
                    id: 0,
                    members: m,
                    consumers: c,
                    anchor,
                    layer_width,
                },
            )
        })
        .collect();
    groups.sort_by_key(|(_, g)| g.anchor);

    let mut root_to_group = vec![None; n_elems];
    for (gid, (root, g)) in groups.iter_mut().enumerate() {
        g.id = gid;
        root_to_group[*root] = Some(gid);
    }
    let channel_group = ids
        .iter()
        .map(|node_ids| node_ids.iter().map(|&e| root_to_group[uf.find(e)]).collect())
        .collect();

    Ok(PruneGroups {
        groups: groups.into_iter().map(|(_, g)| g).collect(),
        channel_group,
    })
}
