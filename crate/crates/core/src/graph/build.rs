use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{infer_shape, InputSpec, LayerKind, LayerNode, NetworkGraph, NodeShape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Squeeze/expand modules with channel concatenation.
    FireNet,
    /// Expand, depthwise, project, with a skip when shapes allow.
    InvertedResidualNet,
    /// Reduce, 3×3, restore, with a skip or projection shortcut.
    BottleneckNet,
    /// Sequential 3×3 conv stack.
    Plain,
    /// Assembled by hand through [`GraphBuilder`].
    Custom,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::FireNet => "fire-net",
            Family::InvertedResidualNet => "inverted-residual-net",
            Family::BottleneckNet => "bottleneck-net",
            Family::Plain => "plain",
            Family::Custom => "custom",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Family::FireNet => 0,
            Family::InvertedResidualNet => 1,
            Family::BottleneckNet => 2,
            Family::Plain => 3,
            Family::Custom => 4,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Family::FireNet,
            1 => Family::InvertedResidualNet,
            2 => Family::BottleneckNet,
            3 => Family::Plain,
            4 => Family::Custom,
            _ => return None,
        })
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

fn four() -> usize {
    4
}

/// Scale of an architecture instance.
///
/// `stage_widths` means squeeze width (fire), output width (inverted
/// residual), reduce width (bottleneck) or conv width (plain).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleConfig {
    pub family: Family,
    pub input_size: usize,
    #[serde(default = "one")]
    pub input_channels: usize,
    pub class_count: usize,
    pub stem_width: usize,
    #[serde(default = "three")]
    pub stem_kernel: usize,
    /// 3×3/2 max pool after the stem (bottleneck only).
    #[serde(default)]
    pub stem_pool: bool,
    pub stage_widths: Vec<usize>,
    #[serde(default)]
    pub block_counts: Vec<usize>,
    /// First-block stride per stage; all ones when omitted.
    #[serde(default)]
    pub stage_strides: Vec<usize>,
    /// Expansion factor per stage (inverted residual).
    #[serde(default)]
    pub expansion: Vec<usize>,
    /// Width of the final 1×1 conv before pooling (fire, inverted residual).
    #[serde(default)]
    pub embedding_width: usize,
    /// Expand width per squeeze channel (fire).
    #[serde(default = "four")]
    pub expand_ratio: usize,
}

impl ScaleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{} scale config: {m}", self.family)));
        if self.class_count < 2 {
            return bad(format!("class count must be at least 2, got {}", self.class_count));
        }
        if self.input_size == 0 || self.input_channels == 0 || self.stem_width == 0 || self.stem_kernel == 0 {
            return bad("input size, channels and stem must be non-zero".into());
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return bad(format!("stage widths must be non-empty and non-zero, got {:?}", self.stage_widths));
        }
        let stages = self.stage_widths.len();
        if !self.stage_strides.is_empty() && self.stage_strides.len() != stages {
            return bad("stage_strides length differs from stage_widths".into());
        }
        if self.stage_strides.iter().any(|s| !(1..=2).contains(s)) {
            return bad("stage strides must be 1 or 2".into());
        }
        let needs_blocks = self.family != Family::Plain;
        if needs_blocks && (self.block_counts.len() != stages || self.block_counts.contains(&0)) {
            return bad("block_counts must give a non-zero count per stage".into());
        }
        match self.family {
            Family::FireNet | Family::InvertedResidualNet if self.embedding_width == 0 => {
                return bad("embedding_width must be non-zero".into())
            }
            Family::FireNet if self.expand_ratio == 0 => return bad("expand_ratio must be non-zero".into()),
            Family::InvertedResidualNet if self.expansion.len() != stages || self.expansion.contains(&0) => {
                return bad("expansion must give a non-zero factor per stage".into())
            }
            Family::Custom => return bad("custom graphs are not built from a scale config".into()),
            _ => {}
        }
        Ok(())
    }

    fn stride(&self, stage: usize) -> usize {
        self.stage_strides.get(stage).copied().unwrap_or(1)
    }

    /// ImageNet-style configurations with the stem stride set to 1 for
    /// 113×113 single-image inputs.
    pub fn full_scale(family: Family, class_count: usize) -> Self {
        let base = ScaleConfig {
            family,
            input_size: 113,
            input_channels: 3,
            class_count,
            stem_width: 64,
            stem_kernel: 3,
            stem_pool: false,
            stage_widths: vec![],
            block_counts: vec![],
            stage_strides: vec![],
            expansion: vec![],
            embedding_width: 0,
            expand_ratio: 4,
        };
        match family {
            Family::FireNet => ScaleConfig {
                stage_widths: vec![16, 32, 48, 64],
                block_counts: vec![2, 2, 2, 2],
                stage_strides: vec![2, 2, 2, 1],
                embedding_width: 1000,
                ..base
            },
            Family::InvertedResidualNet => ScaleConfig {
                stem_width: 32,
                stage_widths: vec![16, 24, 32, 64, 96, 160, 320],
                block_counts: vec![1, 2, 3, 4, 3, 3, 1],
                stage_strides: vec![1, 2, 2, 2, 1, 2, 1],
                expansion: vec![1, 6, 6, 6, 6, 6, 6],
                embedding_width: 1280,
                ..base
            },
            Family::BottleneckNet => ScaleConfig {
                stem_kernel: 7,
                stem_pool: true,
                stage_widths: vec![64, 128, 256, 512],
                block_counts: vec![3, 4, 6, 3],
                stage_strides: vec![1, 2, 2, 2],
                ..base
            },
            Family::Plain | Family::Custom => ScaleConfig {
                stage_widths: vec![64, 64],
                ..base
            },
        }
    }
}

/// Builds one of the three families (or the plain stack) from `cfg`.
/// Weights are drawn from a generator seeded by `seed`.
pub fn build_architecture(cfg: &ScaleConfig, seed: u64) -> Result<NetworkGraph> {
    cfg.validate()?;
    let input = InputSpec {
        channels: cfg.input_channels,
        height: cfg.input_size,
        width: cfg.input_size,
    };
    let mut b = GraphBuilder::new(cfg.family, input, seed);
    let x = b.input_node();
    let emb = match cfg.family {
        Family::FireNet => fire_net(&mut b, cfg, x)?,
        Family::InvertedResidualNet => inverted_residual_net(&mut b, cfg, x)?,
        Family::BottleneckNet => bottleneck_net(&mut b, cfg, x)?,
        Family::Plain => plain_net(&mut b, cfg, x)?,
        Family::Custom => unreachable!("rejected by validate"),
    };
    let head = b.linear("head", emb, cfg.class_count, true)?;
    b.finish(emb, Some(head))
}

fn conv_bn(b: &mut GraphBuilder, name: &str, x: usize, out: usize, k: usize, stride: usize, groups: usize) -> Result<usize> {
    let c = b.conv(name, x, out, k, stride, groups, false)?;
    b.batch_norm(&format!("{name}_bn"), c)
}

fn conv_bn_relu(b: &mut GraphBuilder, name: &str, x: usize, out: usize, k: usize, stride: usize) -> Result<usize> {
    let y = conv_bn(b, name, x, out, k, stride, 1)?;
    b.relu(&format!("{name}_relu"), y)
}

fn fire_net(b: &mut GraphBuilder, cfg: &ScaleConfig, x: usize) -> Result<usize> {
    let mut x = conv_bn_relu(b, "stem", x, cfg.stem_width, cfg.stem_kernel, 1)?;
    let mut fire = 0;
    for (s, (&sq, &n)) in cfg.stage_widths.iter().zip(&cfg.block_counts).enumerate() {
        if cfg.stride(s) == 2 {
            x = b.max_pool(&format!("pool{s}"), x, 3, 2, 1)?;
        }
        for _ in 0..n {
            fire += 1;
            let p = format!("fire{fire}");
            let e = sq * cfg.expand_ratio;
            let squeezed = conv_bn_relu(b, &format!("{p}_squeeze"), x, sq, 1, 1)?;
            let e1 = conv_bn_relu(b, &format!("{p}_expand1"), squeezed, e, 1, 1)?;
            let e3 = conv_bn_relu(b, &format!("{p}_expand3"), squeezed, e, 3, 1)?;
            x = b.concat(&format!("{p}_concat"), &[e1, e3])?;
        }
    }
    let x = conv_bn_relu(b, "embed", x, cfg.embedding_width, 1, 1)?;
    b.global_avg_pool("gap", x)
}

fn inverted_residual_net(b: &mut GraphBuilder, cfg: &ScaleConfig, x: usize) -> Result<usize> {
    let stem = conv_bn(b, "stem", x, cfg.stem_width, cfg.stem_kernel, 1, 1)?;
    let mut x = b.relu6("stem_relu6", stem)?;
    let mut in_c = cfg.stem_width;
    let mut block = 0;
    for (s, (&c, &n)) in cfg.stage_widths.iter().zip(&cfg.block_counts).enumerate() {
        let t = cfg.expansion[s];
        for i in 0..n {
            block += 1;
            let p = format!("block{block}");
            let stride = if i == 0 { cfg.stride(s) } else { 1 };
            let hidden = in_c * t;
            let mut h = x;
            if t != 1 {
                let e = conv_bn(b, &format!("{p}_expand"), h, hidden, 1, 1, 1)?;
                h = b.relu6(&format!("{p}_expand_relu6"), e)?;
            }
            let d = conv_bn(b, &format!("{p}_depthwise"), h, hidden, 3, stride, hidden)?;
            h = b.relu6(&format!("{p}_depthwise_relu6"), d)?;
            h = conv_bn(b, &format!("{p}_project"), h, c, 1, 1, 1)?;
            x = if stride == 1 && in_c == c {
                b.add(&format!("{p}_add"), &[x, h])?
            } else {
                h
            };
            in_c = c;
        }
    }
    let e = conv_bn(b, "embed", x, cfg.embedding_width, 1, 1, 1)?;
    let x = b.relu6("embed_relu6", e)?;
    b.global_avg_pool("gap", x)
}

fn bottleneck_net(b: &mut GraphBuilder, cfg: &ScaleConfig, x: usize) -> Result<usize> {
    let mut x = conv_bn_relu(b, "stem", x, cfg.stem_width, cfg.stem_kernel, 1)?;
    if cfg.stem_pool {
        x = b.max_pool("stem_pool", x, 3, 2, 1)?;
    }
    let mut in_c = cfg.stem_width;
    let mut block = 0;
    for (s, (&w, &n)) in cfg.stage_widths.iter().zip(&cfg.block_counts).enumerate() {
        let out_c = 4 * w;
        for i in 0..n {
            block += 1;
            let p = format!("block{block}");
            let stride = if i == 0 { cfg.stride(s) } else { 1 };
            let h = conv_bn_relu(b, &format!("{p}_reduce"), x, w, 1, 1)?;
            let h = conv_bn_relu(b, &format!("{p}_conv3"), h, w, 3, stride)?;
            let h = conv_bn(b, &format!("{p}_restore"), h, out_c, 1, 1, 1)?;
            let skip = if stride == 1 && in_c == out_c {
                x
            } else {
                conv_bn(b, &format!("{p}_shortcut"), x, out_c, 1, stride, 1)?
            };
            let sum = b.add(&format!("{p}_add"), &[h, skip])?;
            x = b.relu(&format!("{p}_relu"), sum)?;
            in_c = out_c;
        }
    }
    b.global_avg_pool("gap", x)
}

fn plain_net(b: &mut GraphBuilder, cfg: &ScaleConfig, x: usize) -> Result<usize> {
    let mut x = x;
    for (s, &w) in cfg.stage_widths.iter().enumerate() {
        let k = if s == 0 { cfg.stem_kernel } else { 3 };
        x = conv_bn_relu(b, &format!("conv{}", s + 1), x, w, k, cfg.stride(s))?;
    }
    b.global_avg_pool("gap", x)
}

/// Incremental graph construction with shape checking and seeded
/// initialization (Kaiming-normal convs, unit batch-norm scale).
pub struct GraphBuilder {
    family: Family,
    input: InputSpec,
    nodes: Vec<LayerNode>,
    shapes: Vec<NodeShape>,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(family: Family, input: InputSpec, seed: u64) -> Self {
        let mut b = GraphBuilder {
            family,
            input,
            nodes: Vec::new(),
            shapes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.push("input", LayerKind::Input, vec![], vec![], vec![])
            .expect("input node");
        b
    }

    pub fn input_node(&self) -> usize {
        0
    }

    pub fn shape(&self, node: usize) -> NodeShape {
        self.shapes[node]
    }

    fn push(
        &mut self,
        id: &str,
        kind: LayerKind,
        inputs: Vec<usize>,
        params: Vec<Tensor>,
        buffers: Vec<Tensor>,
    ) -> Result<usize> {
        if self.nodes.iter().any(|n| n.id == id) {
            return Err(Error::Graph(format!("duplicate node id '{id}'")));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::Graph(format!("node '{id}' references unknown node {bad}")));
        }
        let node = LayerNode {
            id: id.to_string(),
            kind,
            inputs,
            params,
            buffers,
        };
        let ins: Vec<NodeShape> = node.inputs.iter().map(|&i| self.shapes[i]).collect();
        let shape = infer_shape(self.input, self.nodes.len(), &node, &ins)?;
        self.nodes.push(node);
        self.shapes.push(shape);
        Ok(self.nodes.len() - 1)
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        let mut t = Tensor::from_fn(shape, |_| dist.sample(&mut self.rng));
        t.round_to_f32();
        t
    }

    /// Square conv with "same" padding (`kernel / 2`).
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        id: &str,
        from: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<usize> {
        let in_channels = self.shapes.get(from).map(|s| s.channels).unwrap_or(0);
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 || out_channels == 0 {
            return Err(Error::Graph(format!(
                "conv '{id}': {in_channels}→{out_channels} channels incompatible with {groups} groups"
            )));
        }
        let fan_in = in_channels / groups * kernel * kernel;
        let mut params = vec![self.normal(
            &[out_channels, in_channels / groups, kernel, kernel],
            (2.0 / fan_in as f64).sqrt(),
        )];
        if bias {
            params.push(Tensor::zeros(&[out_channels]));
        }
        let kind = LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            groups,
            bias,
        };
        self.push(id, kind, vec![from], params, vec![])
    }

    pub fn batch_norm(&mut self, id: &str, from: usize) -> Result<usize> {
        let c = self.shapes.get(from).map(|s| s.channels).unwrap_or(0);
        let params = vec![Tensor::full(&[c], 1.0), Tensor::zeros(&[c])];
        let buffers = vec![Tensor::zeros(&[c]), Tensor::full(&[c], 1.0)];
        self.push(id, LayerKind::BatchNorm { channels: c }, vec![from], params, buffers)
    }

    pub fn relu(&mut self, id: &str, from: usize) -> Result<usize> {
        self.push(id, LayerKind::Relu, vec![from], vec![], vec![])
    }

    pub fn relu6(&mut self, id: &str, from: usize) -> Result<usize> {
        self.push(id, LayerKind::Relu6, vec![from], vec![], vec![])
    }

    pub fn max_pool(&mut self, id: &str, from: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
        let kind = LayerKind::MaxPool {
            kernel,
            stride,
            padding,
        };
        self.push(id, kind, vec![from], vec![], vec![])
    }

    pub fn add(&mut self, id: &str, from: &[usize]) -> Result<usize> {
        self.push(id, LayerKind::Add, from.to_vec(), vec![], vec![])
    }

    pub fn concat(&mut self, id: &str, from: &[usize]) -> Result<usize> {
        self.push(id, LayerKind::Concat, from.to_vec(), vec![], vec![])
    }

    pub fn global_avg_pool(&mut self, id: &str, from: usize) -> Result<usize> {
        self.push(id, LayerKind::GlobalAvgPool, vec![from], vec![], vec![])
    }

    pub fn flatten(&mut self, id: &str, from: usize) -> Result<usize> {
        self.push(id, LayerKind::Flatten, vec![from], vec![], vec![])
    }

    /// Fully connected layer; weight stored as `[in, out]`.
    pub fn linear(&mut self, id: &str, from: usize, out_features: usize, bias: bool) -> Result<usize> {
        let in_features = self.shapes.get(from).map(|s| s.channels).unwrap_or(0);
        if out_features == 0 || in_features == 0 {
            return Err(Error::Graph(format!("linear '{id}' needs non-zero features")));
        }
        let mut params = vec![self.normal(&[in_features, out_features], (1.0 / in_features as f64).sqrt())];
        if bias {
            params.push(Tensor::zeros(&[out_features]));
        }
        let kind = LayerKind::Linear {
            in_features,
            out_features,
            bias,
        };
        self.push(id, kind, vec![from], params, vec![])
    }

    pub fn finish(self, embedding: usize, head: Option<usize>) -> Result<NetworkGraph> {
        let graph = NetworkGraph {
            family: self.family,
            input: self.input,
            nodes: self.nodes,
            embedding,
            head,
        };
        graph.validate()?;
        Ok(graph)
    }
}

impl NetworkGraph {
    /// Swaps the classifier for a freshly initialized one with
    /// `class_count` outputs (fine-tuning on a new identity set).
    pub fn replace_head(&mut self, class_count: usize, seed: u64) -> Result<()> {
        let h = self
            .head
            .ok_or_else(|| Error::Graph("graph has no classifier head".into()))?;
        if class_count < 2 {
            return Err(Error::Config(format!("class count must be at least 2, got {class_count}")));
        }
        let node = &mut self.nodes[h];
        let LayerKind::Linear { in_features, bias, .. } = node.kind else {
            return Err(Error::Graph("head is not a linear layer".into()));
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, (1.0 / in_features as f64).sqrt()).expect("finite std");
        let mut w = Tensor::from_fn(&[in_features, class_count], |_| dist.sample(&mut rng));
        w.round_to_f32();
        node.params = vec![w];
        if bias {
            node.params.push(Tensor::zeros(&[class_count]));
        }
        node.kind = LayerKind::Linear {
            in_features,
            out_features: class_count,
            bias,
        };
        self.validate()
    }
}
