//! Layer DAGs for the three architecture families, with the channel
//! bookkeeping that makes structured pruning well defined.

mod build;
mod groups;
mod io;
mod surgery;

pub use build::{build_architecture, Family, GraphBuilder, ScaleConfig};
pub use groups::{resolve_prune_groups, FilterRef, PruneGroup, PruneGroups};
pub use io::{deserialize, serialize, Checkpoint, FORMAT_VERSION, MAGIC};
pub use surgery::{remove_groups, zero_group, PrunePlan};
pub(crate) use surgery::visit_member_params;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, BnMode, ConvAttrs, PoolAttrs, Tape, Tensor, Var};

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Relu6,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Add,
    Concat,
    GlobalAvgPool,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
}

impl LayerKind {
    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv { .. })
    }

    pub fn is_depthwise(&self) -> bool {
        matches!(self, LayerKind::Conv { in_channels, out_channels, groups, .. }
            if *groups > 1 && groups == in_channels && groups == out_channels)
    }

    /// Conv or fully connected: a layer with a weight matrix.
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Linear { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    /// Indices of predecessor nodes; always smaller than this node's index.
    pub inputs: Vec<usize>,
    /// Learnable tensors: conv `[weight, bias?]`, batch norm `[gamma, beta]`,
    /// linear `[weight (in × out), bias?]`.
    pub params: Vec<Tensor>,
    /// Non-learnable state: batch norm `[running_mean, running_var]`.
    pub buffers: Vec<Tensor>,
}

/// Output geometry of a node. Flat outputs (`[N, C]`) report `1×1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub flat: bool,
}

/// Per-node learnable tensors, aligned with [`NetworkGraph::nodes`].
pub type ParamSet = Vec<Vec<Tensor>>;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    pub family: Family,
    pub input: InputSpec,
    pub nodes: Vec<LayerNode>,
    /// Global-average-pool node whose output is the face descriptor.
    pub embedding: usize,
    /// Final classifier; its outputs are never pruned.
    pub head: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A recorded forward pass.
pub struct Forward {
    pub tape: Tape,
    /// Output of every node, by node index.
    pub outputs: Vec<Var>,
    /// Tape handles of every node's params.
    pub params: Vec<Vec<Var>>,
    /// Training-mode batch statistics, by node index.
    pub bn_stats: Vec<Option<BatchStats>>,
}

impl Forward {
    pub fn output(&self, node: usize) -> &Tensor {
        self.tape.value(self.outputs[node])
    }

    /// Parameter gradients after `tape.backward`, aligned with the graph's
    /// params. Missing gradients are reported as zeros.
    pub fn param_grads(&self, graph: &NetworkGraph) -> ParamSet {
        graph
            .nodes
            .iter()
            .zip(&self.params)
            .map(|(node, vars)| {
                node.params
                    .iter()
                    .zip(vars)
                    .map(|(p, &v)| {
                        let g = self
                            .tape
                            .grad(v)
                            .map(<[f64]>::to_vec)
                            .unwrap_or_else(|| vec![0.0; p.numel()]);
                        Tensor::new(p.shape().to_vec(), g).expect("gradient shape")
                    })
                    .collect()
            })
            .collect()
    }
}

impl NetworkGraph {
    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Infers every node's output shape, checking parameter shapes and edge
    /// compatibility along the way.
    pub fn shapes(&self) -> Result<Vec<NodeShape>> {
        let mut out: Vec<NodeShape> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let ins: Vec<NodeShape> = node.inputs.iter().map(|&j| out[j]).collect();
            out.push(infer_shape(self.input, i, node, &ins)?);
        }
        Ok(out)
    }

    /// Checks the structural invariants: unique ids, inputs precede their
    /// consumers, consistent shapes, valid embedding/head references.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !seen.insert(node.id.as_str()) {
                return Err(Error::Graph(format!("duplicate node id '{}'", node.id)));
            }
            if node.inputs.iter().any(|&j| j >= i) {
                return Err(Error::Graph(format!("node '{}' references a later node", node.id)));
            }
            let is_input = node.kind == LayerKind::Input;
            if is_input != node.inputs.is_empty() {
                return Err(Error::Graph(format!(
                    "node '{}': input nodes have no predecessors, all others at least one",
                    node.id
                )));
            }
        }
        if self.nodes.first().map(|n| &n.kind) != Some(&LayerKind::Input) {
            return Err(Error::Graph("first node must be the input".into()));
        }
        let shapes = self.shapes()?;
        let emb = self
            .nodes
            .get(self.embedding)
            .ok_or_else(|| Error::Graph("embedding index out of range".into()))?;
        if emb.kind != LayerKind::GlobalAvgPool {
            return Err(Error::Graph(format!("embedding node '{}' is not a global average pool", emb.id)));
        }
        if let Some(h) = self.head {
            let head = self
                .nodes
                .get(h)
                .ok_or_else(|| Error::Graph("head index out of range".into()))?;
            if !matches!(head.kind, LayerKind::Linear { .. }) || !shapes[h].flat {
                return Err(Error::Graph(format!("head node '{}' must be a linear layer", head.id)));
            }
        }
        Ok(())
    }

    pub fn count_learnables(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| &n.params)
            .map(Tensor::numel)
            .sum()
    }

    /// Learnables of the classifier head alone.
    pub fn head_learnables(&self) -> usize {
        self.head
            .map(|h| self.nodes[h].params.iter().map(Tensor::numel).sum())
            .unwrap_or(0)
    }

    pub fn embedding_size(&self) -> usize {
        self.shapes()
            .map(|s| s[self.embedding].channels)
            .unwrap_or(0)
    }

    pub fn class_count(&self) -> Option<usize> {
        self.head.and_then(|h| match self.nodes[h].kind {
            LayerKind::Linear { out_features, .. } => Some(out_features),
            _ => None,
        })
    }

    /// Number of convolution layers.
    pub fn conv_layer_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind.is_conv()).count()
    }

    /// Total output channels over all convolution layers.
    pub fn total_conv_filters(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n.kind {
                LayerKind::Conv { out_channels, .. } => out_channels,
                _ => 0,
            })
            .sum()
    }

    /// Largest number of weighted layers (conv or linear) on any path from the
    /// input: the usual "N layers deep" figure.
    pub fn weighted_depth(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let base = node.inputs.iter().map(|&j| depth[j]).max().unwrap_or(0);
            depth[i] = base + usize::from(node.kind.is_weighted());
        }
        depth.into_iter().max().unwrap_or(0)
    }

    /// Output channels of every conv layer, in node order, as `(id, count)`.
    pub fn filters_per_layer(&self) -> Vec<(String, usize)> {
        self.nodes
            .iter()
            .filter_map(|n| match n.kind {
                LayerKind::Conv { out_channels, .. } => Some((n.id.clone(), out_channels)),
                _ => None,
            })
            .collect()
    }

    /// Zero tensors shaped like the params (optimizer velocity).
    pub fn zeros_like_params(&self) -> ParamSet {
        self.nodes
            .iter()
            .map(|n| n.params.iter().map(|p| Tensor::zeros(p.shape())).collect())
            .collect()
    }

    /// Runs the network on `[N, C, H, W]` images. With `grad`, params are
    /// recorded as differentiable leaves.
    pub fn run(&self, images: &Tensor, mode: Mode, grad: bool) -> Result<Forward> {
        let s = images.shape();
        if s.len() != 4
            || s[1] != self.input.channels
            || s[2] != self.input.height
            || s[3] != self.input.width
        {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("images {s:?} do not match input shape {:?}", self.input),
            });
        }
        let mut tape = Tape::new();
        let mut outputs: Vec<Var> = Vec::with_capacity(self.nodes.len());
        let mut params = Vec::with_capacity(self.nodes.len());
        let mut bn_stats = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let pv: Vec<Var> = node
                .params
                .iter()
                .map(|p| tape.leaf(p.clone(), grad))
                .collect();
            let x = |k: usize| outputs[node.inputs[k]];
            let out = match &node.kind {
                LayerKind::Input => tape.constant(images.clone()),
                LayerKind::Conv {
                    stride,
                    padding,
                    groups,
                    bias,
                    ..
                } => {
                    let y = tape.conv2d(
                        x(0),
                        pv[0],
                        ConvAttrs {
                            stride: *stride,
                            padding: *padding,
                            groups: *groups,
                        },
                    )?;
                    if *bias {
                        tape.bias_add(y, pv[1])?
                    } else {
                        y
                    }
                }
                LayerKind::BatchNorm { .. } => {
                    let bn_mode = match mode {
                        Mode::Train => BnMode::Train,
                        Mode::Eval => BnMode::Eval {
                            mean: node.buffers[0].data(),
                            var: node.buffers[1].data(),
                        },
                    };
                    let (y, stats) = tape.batch_norm(x(0), pv[0], pv[1], bn_mode)?;
                    bn_stats[i] = stats;
                    y
                }
                LayerKind::Relu => tape.relu(x(0))?,
                LayerKind::Relu6 => tape.relu6(x(0))?,
                LayerKind::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => tape.max_pool2d(
                    x(0),
                    PoolAttrs {
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                    },
                )?,
                LayerKind::Add => {
                    let mut acc = x(0);
                    for k in 1..node.inputs.len() {
                        acc = tape.add(acc, x(k))?;
                    }
                    acc
                }
                LayerKind::Concat => {
                    let ins: Vec<Var> = (0..node.inputs.len()).map(x).collect();
                    tape.concat(&ins)?
                }
                LayerKind::GlobalAvgPool => tape.global_avg_pool(x(0))?,
                LayerKind::Flatten => tape.flatten(x(0))?,
                LayerKind::Linear { bias, .. } => {
                    let y = tape.matmul(x(0), pv[0])?;
                    if *bias {
                        tape.bias_add(y, pv[1])?
                    } else {
                        y
                    }
                }
            };
            outputs.push(out);
            params.push(pv);
        }
        Ok(Forward {
            tape,
            outputs,
            params,
            bn_stats,
        })
    }

    /// Differentiable forward pass.
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<Forward> {
        self.run(images, mode, true)
    }

    /// Inference-mode embeddings `[N, E]`.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let fwd = self.run(images, Mode::Eval, false)?;
        Ok(fwd.output(self.embedding).clone())
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[Option<BatchStats>]) {
        for (node, st) in self.nodes.iter_mut().zip(stats) {
            let Some(st) = st else { continue };
            for (buf, batch) in node.buffers.iter_mut().zip([&st.mean, &st.var]) {
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
                buf.round_to_f32();
            }
        }
    }
}

fn infer_shape(input: InputSpec, idx: usize, node: &LayerNode, ins: &[NodeShape]) -> Result<NodeShape> {
    let fail = |msg: String| Error::Graph(format!("node {idx} '{}': {msg}", node.id));
    let check_params = |shapes: &[&[usize]]| -> Result<()> {
        if node.params.len() != shapes.len()
            || node.params.iter().zip(shapes).any(|(p, s)| p.shape() != *s)
        {
            return Err(fail(format!(
                "params {:?} do not match expected {:?}",
                node.params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>(),
                shapes
            )));
        }
        Ok(())
    };
    let spatial = |k: usize| -> Result<NodeShape> {
        let s = ins[k];
        if s.flat {
            Err(fail("expects a spatial input".into()))
        } else {
            Ok(s)
        }
    };
    let out_size = |size: usize, k: usize, stride: usize, pad: usize| -> Result<usize> {
        if stride == 0 || size + 2 * pad < k {
            Err(fail(format!("window {k} stride {stride} pad {pad} does not fit extent {size}")))
        } else {
            Ok((size + 2 * pad - k) / stride + 1)
        }
    };
    match &node.kind {
        LayerKind::Input => Ok(NodeShape {
            channels: input.channels,
            height: input.height,
            width: input.width,
            flat: false,
        }),
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            bias,
        } => {
            let s = spatial(0)?;
            if s.channels != *in_channels {
                return Err(fail(format!("declares {in_channels} input channels, receives {}", s.channels)));
            }
            if *groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
                return Err(fail(format!("groups {groups} do not divide channels")));
            }
            let w = [*out_channels, in_channels / groups, *kernel, *kernel];
            let b = [*out_channels];
            if *bias {
                check_params(&[&w, &b])?;
            } else {
                check_params(&[&w])?;
            }
            Ok(NodeShape {
                channels: *out_channels,
                height: out_size(s.height, *kernel, *stride, *padding)?,
                width: out_size(s.width, *kernel, *stride, *padding)?,
                flat: false,
            })
        }
        LayerKind::BatchNorm { channels } => {
            let s = ins[0];
            if s.channels != *channels {
                return Err(fail(format!("normalizes {channels} channels, receives {}", s.channels)));
            }
            check_params(&[&[*channels], &[*channels]])?;
            if node.buffers.len() != 2 || node.buffers.iter().any(|b| b.shape() != [*channels]) {
                return Err(fail("running statistics missing or misshapen".into()));
            }
            Ok(s)
        }
        LayerKind::Relu | LayerKind::Relu6 => {
            check_params(&[])?;
            Ok(ins[0])
        }
        LayerKind::MaxPool {
            kernel,
            stride,
            padding,
        } => {
            let s = spatial(0)?;
            if padding >= kernel {
                return Err(fail("pool padding must be smaller than the kernel".into()));
            }
            Ok(NodeShape {
                height: out_size(s.height, *kernel, *stride, *padding)?,
                width: out_size(s.width, *kernel, *stride, *padding)?,
                ..s
            })
        }
        LayerKind::Add => {
            if ins.len() < 2 || ins.iter().any(|s| *s != ins[0]) {
                return Err(fail(format!("add inputs must match exactly, got {ins:?}")));
            }
            Ok(ins[0])
        }
        LayerKind::Concat => {
            let first = ins[0];
            if ins.iter().any(|s| s.height != first.height || s.width != first.width || s.flat != first.flat) {
                return Err(fail(format!("concat inputs differ spatially: {ins:?}")));
            }
            Ok(NodeShape {
                channels: ins.iter().map(|s| s.channels).sum(),
                ..first
            })
        }
        LayerKind::GlobalAvgPool => {
            let s = spatial(0)?;
            Ok(NodeShape {
                channels: s.channels,
                height: 1,
                width: 1,
                flat: true,
            })
        }
        LayerKind::Flatten => {
            let s = ins[0];
            Ok(NodeShape {
                channels: s.channels * s.height * s.width,
                height: 1,
                width: 1,
                flat: true,
            })
        }
        LayerKind::Linear {
            in_features,
            out_features,
            bias,
        } => {
            let s = ins[0];
            if !s.flat || s.channels != *in_features {
                return Err(fail(format!("expects {in_features} flat features, receives {s:?}")));
            }
            let w = [*in_features, *out_features];
            let b = [*out_features];
            if *bias {
                check_params(&[&w, &b])?;
            } else {
                check_params(&[&w])?;
            }
            Ok(NodeShape {
                channels: *out_features,
                height: 1,
                width: 1,
                flat: true,
            })
        }
    }
}
