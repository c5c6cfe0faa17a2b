use super::{Family, InputSpec, LayerKind, LayerNode, NetworkGraph, ParamSet};
use crate::codec::{check_crc, check_header, Reader, Writer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FPRN";
pub const FORMAT_VERSION: u32 = 1;

/// A graph plus optional optimizer velocity and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub graph: NetworkGraph,
    pub velocity: Option<ParamSet>,
    /// Sorted key/value pairs (config hash, stage, sparsity, ...).
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(graph: NetworkGraph) -> Self {
        Checkpoint {
            graph,
            velocity: None,
            meta: Vec::new(),
        }
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.len(self.meta.len());
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        write_graph(&mut w, &self.graph);
        match &self.velocity {
            None => w.u8(0),
            Some(vel) => {
                w.u8(1);
                for tensors in vel {
                    w.len(tensors.len());
                    for t in tensors {
                        w.tensor(t);
                    }
                }
            }
        }
        w.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        check_header(bytes, MAGIC, FORMAT_VERSION)?;
        let body = check_crc(bytes)?;
        let mut r = Reader::new(body);
        r.take(8)?;
        let n_meta = r.len()?;
        let mut meta = Vec::new();
        for _ in 0..n_meta {
            meta.push((r.str()?, r.str()?));
        }
        let graph = read_graph(&mut r)?;
        let velocity = if r.bool()? {
            let mut vel = Vec::with_capacity(graph.nodes.len());
            for node in &graph.nodes {
                let n = r.len()?;
                let tensors = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                if tensors.len() != node.params.len()
                    || tensors.iter().zip(&node.params).any(|(v, p)| v.shape() != p.shape())
                {
                    return Err(Error::Corrupt(format!("velocity of '{}' does not match its params", node.id)));
                }
                vel.push(tensors);
            }
            Some(vel)
        } else {
            None
        };
        if !r.is_done() {
            return Err(Error::Corrupt("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { graph, velocity, meta })
    }
}

pub fn serialize(graph: &NetworkGraph) -> Vec<u8> {
    Checkpoint::new(graph.clone()).to_bytes()
}

pub fn deserialize(bytes: &[u8]) -> Result<NetworkGraph> {
    Ok(Checkpoint::from_bytes(bytes)?.graph)
}

fn write_graph(w: &mut Writer, g: &NetworkGraph) {
    w.u8(g.family.code());
    w.len(g.input.channels);
    w.len(g.input.height);
    w.len(g.input.width);
    w.len(g.embedding);
    match g.head {
        Some(h) => {
            w.u8(1);
            w.len(h);
        }
        None => w.u8(0),
    }
    w.len(g.nodes.len());
    for node in &g.nodes {
        w.str(&node.id);
        write_kind(w, &node.kind);
        w.len(node.inputs.len());
        for &i in &node.inputs {
            w.len(i);
        }
        for set in [&node.params, &node.buffers] {
            w.len(set.len());
            for t in set {
                w.tensor(t);
            }
        }
    }
}

fn write_kind(w: &mut Writer, kind: &LayerKind) {
    match *kind {
        LayerKind::Input => w.u8(0),
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            bias,
        } => {
            w.u8(1);
            for v in [in_channels, out_channels, kernel, stride, padding, groups] {
                w.len(v);
            }
            w.u8(bias.into());
        }
        LayerKind::BatchNorm { channels } => {
            w.u8(2);
            w.len(channels);
        }
        LayerKind::Relu => w.u8(3),
        LayerKind::Relu6 => w.u8(4),
        LayerKind::MaxPool {
            kernel,
            stride,
            padding,
        } => {
            w.u8(5);
            for v in [kernel, stride, padding] {
                w.len(v);
            }
        }
        LayerKind::Add => w.u8(6),
        LayerKind::Concat => w.u8(7),
        LayerKind::GlobalAvgPool => w.u8(8),
        LayerKind::Flatten => w.u8(9),
        LayerKind::Linear {
            in_features,
            out_features,
            bias,
        } => {
            w.u8(10);
            w.len(in_features);
            w.len(out_features);
            w.u8(bias.into());
        }
    }
}

fn read_kind(r: &mut Reader) -> Result<LayerKind> {
    Ok(match r.u8()? {
        0 => LayerKind::Input,
        1 => LayerKind::Conv {
            in_channels: r.len()?,
            out_channels: r.len()?,
            kernel: r.len()?,
            stride: r.len()?,
            padding: r.len()?,
            groups: r.len()?,
            bias: r.bool()?,
        },
        2 => LayerKind::BatchNorm { channels: r.len()? },
        3 => LayerKind::Relu,
        4 => LayerKind::Relu6,
        5 => LayerKind::MaxPool {
            kernel: r.len()?,
            stride: r.len()?,
            padding: r.len()?,
        },
        6 => LayerKind::Add,
        7 => LayerKind::Concat,
        8 => LayerKind::GlobalAvgPool,
        9 => LayerKind::Flatten,
        10 => LayerKind::Linear {
            in_features: r.len()?,
            out_features: r.len()?,
            bias: r.bool()?,
        },
        t => return Err(Error::Corrupt(format!("unknown layer tag {t}"))),
    })
}

fn read_graph(r: &mut Reader) -> Result<NetworkGraph> {
    let code = r.u8()?;
    let family = Family::from_code(code).ok_or_else(|| Error::Corrupt(format!("unknown family code {code}")))?;
    let input = InputSpec {
        channels: r.len()?,
        height: r.len()?,
        width: r.len()?,
    };
    let embedding = r.len()?;
    let head = if r.bool()? { Some(r.len()?) } else { None };
    let n = r.len()?;
    let mut nodes = Vec::new();
    for _ in 0..n {
        let id = r.str()?;
        let kind = read_kind(r)?;
        let n_in = r.len()?;
        let inputs = (0..n_in).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n_params = r.len()?;
        let params = (0..n_params).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let n_buf = r.len()?;
        let buffers = (0..n_buf).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        nodes.push(LayerNode {
            id,
            kind,
            inputs,
            params,
            buffers,
        });
    }
    let graph = NetworkGraph {
        family,
        input,
        nodes,
        embedding,
        head,
    };
    graph
        .validate()
        .map_err(|e| Error::Corrupt(format!("decoded graph is invalid: {e}")))?;
    Ok(graph)
}
