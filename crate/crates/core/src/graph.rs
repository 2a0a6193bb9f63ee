//! Dataflow graph of configured layers with named parameters.
//!
//! Blocks (AKDC, SBA, ScConv, ...) are builders that emit primitive nodes
//! into a [`GraphBuilder`] under a dotted scope path. The resulting
//! [`Graph`] is the single representation used for forward/backward passes,
//! structural walks, cost accounting, pruning and checkpoints.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::{Session, Var};
use crate::error::{Error, Result};
use crate::ops::{Activation, BinaryOp, ConvGeometry};
use crate::rng::SplitMix64;
use crate::tensor::{Shape, Tensor};

pub type NodeId = usize;

/// How a convolution participates in channel-dependency analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvRole {
    /// Its output channels form a new, independently prunable space.
    Free,
    /// `groups == c_in == c_out`; output channel `c` is input channel `c`.
    Depthwise,
    /// Output is `c_out / c_in` stacked copies of the input channel space
    /// (AKDC branch-weight generator). Never pruned on its own.
    WeightGen,
    /// Network output (box/class maps); channel count is fixed.
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNode {
    pub input: NodeId,
    pub weight: String,
    pub bias: Option<String>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub geom: ConvGeometry,
    pub role: ConvRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SruNode {
    pub input: NodeId,
    pub gamma: String,
    pub beta: String,
    pub threshold: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeOp {
    Input { index: usize },
    Conv(ConvNode),
    Act { input: NodeId, kind: Activation },
    Affine { input: NodeId, scale: f64, shift: f64 },
    Binary { a: NodeId, b: NodeId, op: BinaryOp },
    AvgPool { input: NodeId },
    MaxPool { input: NodeId, kernel: usize, stride: usize, padding: usize },
    ResizeLike { input: NodeId, like: NodeId },
    Slice { input: NodeId, start: usize, len: usize },
    Concat { inputs: Vec<NodeId> },
    SoftmaxBlocks { input: NodeId, blocks: usize },
    Sru(SruNode),
}

impl NodeOp {
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            NodeOp::Input { .. } => vec![],
            NodeOp::Conv(c) => vec![c.input],
            NodeOp::Act { input, .. }
            | NodeOp::Affine { input, .. }
            | NodeOp::AvgPool { input }
            | NodeOp::MaxPool { input, .. }
            | NodeOp::Slice { input, .. }
            | NodeOp::SoftmaxBlocks { input, .. } => vec![*input],
            NodeOp::ResizeLike { input, like } => vec![*input, *like],
            NodeOp::Binary { a, b, .. } => vec![*a, *b],
            NodeOp::Concat { inputs } => inputs.clone(),
            NodeOp::Sru(s) => vec![s.input],
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            NodeOp::Input { .. } => "input",
            NodeOp::Conv(_) => "conv",
            NodeOp::Act { kind: Activation::Sigmoid, .. } => "sigmoid",
            NodeOp::Act { kind: Activation::Silu, .. } => "silu",
            NodeOp::Affine { .. } => "affine",
            NodeOp::Binary { op: BinaryOp::Add, .. } => "add",
            NodeOp::Binary { op: BinaryOp::Mul, .. } => "mul",
            NodeOp::AvgPool { .. } => "avg_pool",
            NodeOp::MaxPool { .. } => "max_pool",
            NodeOp::ResizeLike { .. } => "resize",
            NodeOp::Slice { .. } => "slice",
            NodeOp::Concat { .. } => "concat",
            NodeOp::SoftmaxBlocks { .. } => "softmax",
            NodeOp::Sru(_) => "sru_gate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub channels: usize,
    pub op: NodeOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    ConvBlock,
    Bottleneck,
    Akdc,
    Makdf,
    C3k2,
    C3k2Makdf,
    Sppf,
    Rau,
    Sba,
    Rcfpn,
    ConcatFpn,
    Sru,
    Cru,
    ScConv,
    ScDetect,
    PlainHead,
}

/// A block instance recorded by the builder, for structural walks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTag {
    pub path: String,
    pub kind: BlockKind,
}

/// Reference to a node's output while building.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Port {
    pub id: NodeId,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub num_inputs: usize,
    pub outputs: Vec<NodeId>,
    pub blocks: Vec<BlockTag>,
    #[serde(skip)]
    pub params: IndexMap<String, Tensor>,
}

/// Result of [`Graph::forward`]: tape handles for inputs, params and outputs.
#[derive(Debug)]
pub struct ForwardPass {
    pub inputs: Vec<Var>,
    pub params: IndexMap<String, Var>,
    pub outputs: Vec<Var>,
    /// One handle per graph node, in node order.
    pub nodes: Vec<Var>,
}

impl Graph {
    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn input_channels(&self) -> Vec<usize> {
        let mut ch = vec![0; self.num_inputs];
        for n in &self.nodes {
            if let NodeOp::Input { index } = n.op {
                ch[index] = n.channels;
            }
        }
        ch
    }

    pub fn output_channels(&self) -> Vec<usize> {
        self.outputs.iter().map(|&o| self.nodes[o].channels).collect()
    }

    pub fn count_blocks(&self, kind: BlockKind) -> usize {
        self.blocks.iter().filter(|b| b.kind == kind).count()
    }

    pub fn num_param_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn convs(&self) -> impl Iterator<Item = (NodeId, &Node, &ConvNode)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            NodeOp::Conv(c) => Some((i, n, c)),
            _ => None,
        })
    }

    /// Records one pass on `sess`, returning handles for gradients.
    pub fn forward(&self, sess: &mut Session, inputs: &[Tensor]) -> Result<ForwardPass> {
        if inputs.len() != self.num_inputs {
            return Err(Error::invalid(
                "forward",
                format!("graph takes {} inputs, got {}", self.num_inputs, inputs.len()),
            ));
        }
        let in_vars: Vec<Var> = inputs.iter().map(|t| sess.tape.leaf(t.clone())).collect();
        let mut pvars = IndexMap::with_capacity(self.params.len());
        for (name, t) in &self.params {
            pvars.insert(name.clone(), sess.tape.leaf(t.clone()));
        }
        let mut vals: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = self.eval_node(sess, node, &vals, &in_vars, &pvars)?;
            let got = sess.tape.value(v).c();
            if got != node.channels {
                return Err(Error::shape(
                    "forward",
                    format!("node `{}` produced {} channels, expected {}", node.name, got, node.channels),
                ));
            }
            vals.push(v);
        }
        Ok(ForwardPass {
            inputs: in_vars,
            params: pvars,
            outputs: self.outputs.iter().map(|&o| vals[o]).collect(),
            nodes: vals,
        })
    }

    /// Forward pass without keeping the tape.
    pub fn run(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut sess = Session::new();
        let pass = self.forward(&mut sess, inputs)?;
        Ok(pass.outputs.iter().map(|&v| sess.tape.value(v).clone()).collect())
    }

    fn pvar(pvars: &IndexMap<String, Var>, name: &str) -> Result<Var> {
        pvars.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    fn eval_node(
        &self,
        sess: &mut Session,
        node: &Node,
        vals: &[Var],
        in_vars: &[Var],
        pvars: &IndexMap<String, Var>,
    ) -> Result<Var> {
        let tape = &mut sess.tape;
        match &node.op {
            NodeOp::Input { index } => {
                let v = in_vars[*index];
                if tape.value(v).c() != node.channels {
                    return Err(Error::shape(
                        "forward",
                        format!("input {} has {} channels, expected {}", index, tape.value(v).c(), node.channels),
                    ));
                }
                Ok(v)
            }
            NodeOp::Conv(c) => {
                let w = Self::pvar(pvars, &c.weight)?;
                let b = c.bias.as_deref().map(|b| Self::pvar(pvars, b)).transpose()?;
                tape.conv2d(vals[c.input], w, b, c.geom)
            }
            NodeOp::Act { input, kind } => tape.activation(vals[*input], *kind),
            NodeOp::Affine { input, scale, shift } => tape.affine(vals[*input], *scale, *shift),
            NodeOp::Binary { a, b, op } => tape.binary(vals[*a], vals[*b], *op),
            NodeOp::AvgPool { input } => tape.avg_pool_1x1(vals[*input]),
            NodeOp::MaxPool {
                input,
                kernel,
                stride,
                padding,
            } => tape.max_pool2d(vals[*input], *kernel, *stride, *padding),
            NodeOp::ResizeLike { input, like } => {
                let t = tape.value(vals[*like]);
                let (h, w) = (t.h(), t.w());
                tape.resize_nearest(vals[*input], h, w)
            }
            NodeOp::Slice { input, start, len } => tape.slice_channels(vals[*input], *start, *len),
            NodeOp::Concat { inputs } => {
                let parts: Vec<Var> = inputs.iter().map(|&i| vals[i]).collect();
                tape.concat_channels(&parts)
            }
            NodeOp::SoftmaxBlocks { input, blocks } => tape.softmax_blocks(vals[*input], *blocks),
            NodeOp::Sru(s) => {
                let x = vals[s.input];
                let gamma = Self::pvar(pvars, &s.gamma)?;
                let beta = Self::pvar(pvars, &s.beta)?;
                let mask = {
                    let (xv, gv, bv) = (tape.value(x), tape.value(gamma), tape.value(beta));
                    sess.masks
                        .resolve(|| crate::head::sru_gate_mask(xv, gv.data(), bv.data(), s.threshold, s.eps))?
                };
                crate::head::sru_apply(&mut sess.tape, x, mask)
            }
        }
    }

    /// Value of every node, in node order.
    pub fn run_all(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut sess = Session::new();
        let pass = self.forward(&mut sess, inputs)?;
        Ok(pass.nodes.iter().map(|&v| sess.tape.value(v).clone()).collect())
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Output shape of every node for the given input shapes, without computing values.
    pub fn infer_shapes(&self, inputs: &[Shape]) -> Result<Vec<Shape>> {
        if inputs.len() != self.num_inputs {
            return Err(Error::invalid("infer_shapes", "wrong number of inputs"));
        }
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let s = match &node.op {
                NodeOp::Input { index } => inputs[*index],
                NodeOp::Conv(c) => {
                    let [n, _, h, w] = shapes[c.input];
                    let (ho, wo) = c.geom.output_hw(h, w, c.kernel.0, c.kernel.1).ok_or_else(|| {
                        Error::shape("infer_shapes", format!("conv `{}` does not fit {}x{}", node.name, h, w))
                    })?;
                    [n, c.c_out, ho, wo]
                }
                NodeOp::AvgPool { input } => {
                    let [n, c, _, _] = shapes[*input];
                    [n, c, 1, 1]
                }
                NodeOp::MaxPool {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let [n, c, h, w] = shapes[*input];
                    let g = ConvGeometry::new(*stride, (*padding, *padding), 1);
                    let (ho, wo) = g
                        .output_hw(h, w, *kernel, *kernel)
                        .ok_or_else(|| Error::shape("infer_shapes", "pool window too large"))?;
                    [n, c, ho, wo]
                }
                NodeOp::ResizeLike { input, like } => {
                    let [n, c, _, _] = shapes[*input];
                    let [_, _, h, w] = shapes[*like];
                    [n, c, h, w]
                }
                NodeOp::Slice { input, len, .. } => {
                    let [n, _, h, w] = shapes[*input];
                    [n, *len, h, w]
                }
                NodeOp::Concat { inputs } => {
                    let [n, _, h, w] = shapes[inputs[0]];
                    [n, inputs.iter().map(|&i| shapes[i][1]).sum(), h, w]
                }
                NodeOp::Binary { a, .. } => shapes[*a],
                NodeOp::Act { input, .. }
                | NodeOp::Affine { input, .. }
                | NodeOp::SoftmaxBlocks { input, .. }
                | NodeOp::Sru(SruNode { input, .. }) => shapes[*input],
            };
            shapes.push(s);
        }
        Ok(shapes)
    }
}

/// Emits nodes and parameters under a dotted scope path.
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: IndexMap<String, Tensor>,
    blocks: Vec<BlockTag>,
    scope: Vec<String>,
    rng: SplitMix64,
    num_inputs: usize,
    names: std::collections::HashMap<String, usize>,
}

impl GraphBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            blocks: Vec::new(),
            scope: Vec::new(),
            rng: SplitMix64::new(seed),
            num_inputs: 0,
            names: Default::default(),
        }
    }

    pub fn rng(&mut self) -> &mut SplitMix64 {
        &mut self.rng
    }

    fn path(&self, local: &str) -> String {
        if self.scope.is_empty() {
            local.to_string()
        } else {
            format!("{}.{}", self.scope.join("."), local)
        }
    }

    fn unique_name(&mut self, local: &str) -> String {
        let base = self.path(local);
        let count = self.names.entry(base.clone()).or_insert(0);
        *count += 1;
        if *count == 1 {
            base
        } else {
            format!("{}_{}", base, *count - 1)
        }
    }

    /// Runs `f` inside a child scope; `kind` tags the scope as a block instance.
    pub fn scoped<T>(
        &mut self,
        name: &str,
        kind: Option<BlockKind>,
        f: impl FnOnce(&mut Self) -> Result<T>,
    ) -> Result<T> {
        self.scope.push(name.to_string());
        if let Some(kind) = kind {
            let path = self.scope.join(".");
            self.blocks.push(BlockTag { path, kind });
        }
        let out = f(self);
        self.scope.pop();
        out
    }

    fn push(&mut self, local: &str, channels: usize, op: NodeOp) -> Port {
        let name = self.unique_name(local);
        self.nodes.push(Node { name, channels, op });
        Port {
            id: self.nodes.len() - 1,
            channels,
        }
    }

    fn add_param(&mut self, name: String, t: Tensor) -> Result<String> {
        if self.params.contains_key(&name) {
            return Err(Error::invalid("graph builder", format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name.clone(), t);
        Ok(name)
    }

    pub fn input(&mut self, channels: usize) -> Port {
        let index = self.num_inputs;
        self.num_inputs += 1;
        self.push(&format!("input{index}"), channels, NodeOp::Input { index })
    }

    /// Adds a convolution. Weights are uniform in `±1/sqrt(fan_in)`;
    /// `WeightGen` convolutions start at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        local: &str,
        x: Port,
        c_out: usize,
        kernel: (usize, usize),
        geom: ConvGeometry,
        bias: bool,
        role: ConvRole,
    ) -> Result<Port> {
        let g = geom.groups;
        if g == 0 || x.channels % g != 0 || c_out % g != 0 {
            return Err(Error::invalid(
                "conv",
                format!("groups {} incompatible with {} -> {} channels", g, x.channels, c_out),
            ));
        }
        if role == ConvRole::Depthwise && !(g == x.channels && c_out == x.channels) {
            return Err(Error::invalid("conv", "depthwise conv needs groups == c_in == c_out"));
        }
        let name = self.unique_name(local);
        let cig = x.channels / g;
        let fan_in = (cig * kernel.0 * kernel.1) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let wshape = [c_out, cig, kernel.0, kernel.1];
        let zero = role == ConvRole::WeightGen;
        let weight = if zero {
            Tensor::zeros(wshape)
        } else {
            Tensor::rand_uniform(wshape, &mut self.rng, -bound, bound)
        };
        let weight = self.add_param(format!("{name}.weight"), weight)?;
        let bias = if bias {
            let b = if zero {
                Tensor::zeros([1, c_out, 1, 1])
            } else {
                Tensor::rand_uniform([1, c_out, 1, 1], &mut self.rng, -bound, bound)
            };
            Some(self.add_param(format!("{name}.bias"), b)?)
        } else {
            None
        };
        self.nodes.push(Node {
            name,
            channels: c_out,
            op: NodeOp::Conv(ConvNode {
                input: x.id,
                weight,
                bias,
                c_in: x.channels,
                c_out,
                kernel,
                geom,
                role,
            }),
        });
        Ok(Port {
            id: self.nodes.len() - 1,
            channels: c_out,
        })
    }

    pub fn act(&mut self, x: Port, kind: Activation) -> Port {
        let local = match kind {
            Activation::Sigmoid => "sigmoid",
            Activation::Silu => "silu",
        };
        self.push(local, x.channels, NodeOp::Act { input: x.id, kind })
    }

    pub fn affine(&mut self, x: Port, scale: f64, shift: f64) -> Port {
        self.push(
            "affine",
            x.channels,
            NodeOp::Affine {
                input: x.id,
                scale,
                shift,
            },
        )
    }

    fn binary(&mut self, a: Port, b: Port, op: BinaryOp) -> Result<Port> {
        if a.channels != b.channels {
            return Err(Error::shape(
                "elementwise",
                format!("{} vs {} channels", a.channels, b.channels),
            ));
        }
        let local = match op {
            BinaryOp::Add => "add",
            BinaryOp::Mul => "mul",
        };
        Ok(self.push(local, a.channels, NodeOp::Binary { a: a.id, b: b.id, op }))
    }

    pub fn add(&mut self, a: Port, b: Port) -> Result<Port> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn mul(&mut self, a: Port, b: Port) -> Result<Port> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn avg_pool(&mut self, x: Port) -> Port {
        self.push("gap", x.channels, NodeOp::AvgPool { input: x.id })
    }

    pub fn max_pool(&mut self, x: Port, kernel: usize, stride: usize, padding: usize) -> Port {
        self.push(
            "maxpool",
            x.channels,
            NodeOp::MaxPool {
                input: x.id,
                kernel,
                stride,
                padding,
            },
        )
    }

    pub fn resize_like(&mut self, x: Port, like: Port) -> Port {
        self.push("resize", x.channels, NodeOp::ResizeLike { input: x.id, like: like.id })
    }

    pub fn slice(&mut self, x: Port, start: usize, len: usize) -> Result<Port> {
        if len == 0 || start + len > x.channels {
            return Err(Error::shape(
                "split_channels",
                format!("slice {}..{} of {} channels", start, start + len, x.channels),
            ));
        }
        Ok(self.push("slice", len, NodeOp::Slice { input: x.id, start, len }))
    }

    pub fn split(&mut self, x: Port, sizes: &[usize]) -> Result<Vec<Port>> {
        if sizes.iter().sum::<usize>() != x.channels {
            return Err(Error::shape(
                "split_channels",
                format!("sizes {:?} do not sum to {}", sizes, x.channels),
            ));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let p = self.slice(x, start, s);
                start += s;
                p
            })
            .collect()
    }

    pub fn concat(&mut self, parts: &[Port]) -> Result<Port> {
        if parts.is_empty() {
            return Err(Error::shape("concat_channels", "nothing to concatenate"));
        }
        let c = parts.iter().map(|p| p.channels).sum();
        Ok(self.push(
            "concat",
            c,
            NodeOp::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
            },
        ))
    }

    pub fn softmax_blocks(&mut self, x: Port, blocks: usize) -> Result<Port> {
        if blocks == 0 || x.channels % blocks != 0 {
            return Err(Error::invalid("softmax_blocks", "channels not divisible into blocks"));
        }
        Ok(self.push("softmax", x.channels, NodeOp::SoftmaxBlocks { input: x.id, blocks }))
    }

    /// Per-channel affine vectors `gamma = 1`, `beta = 0` plus the gate node.
    pub fn sru_gate(&mut self, x: Port, threshold: f64, eps: f64) -> Result<Port> {
        let name = self.unique_name("gate");
        let gamma = self.add_param(format!("{name}.gamma"), Tensor::full([1, x.channels, 1, 1], 1.0))?;
        let beta = self.add_param(format!("{name}.beta"), Tensor::zeros([1, x.channels, 1, 1]))?;
        self.nodes.push(Node {
            name,
            channels: x.channels,
            op: NodeOp::Sru(SruNode {
                input: x.id,
                gamma,
                beta,
                threshold,
                eps,
            }),
        });
        Ok(Port {
            id: self.nodes.len() - 1,
            channels: x.channels,
        })
    }

    pub fn finish(self, outputs: &[Port]) -> Graph {
        Graph {
            nodes: self.nodes,
            num_inputs: self.num_inputs,
            outputs: outputs.iter().map(|p| p.id).collect(),
            blocks: self.blocks,
            params: self.params,
        }
    }
}

/// Sets every parameter to seeded normal noise (`std`), keeping GN scales positive.
pub fn randomize_params(graph: &mut Graph, seed: u64, std: f64) {
    let mut rng = SplitMix64::new(seed);
    for (name, t) in graph.params.iter_mut() {
        let positive = name.ends_with(".gamma");
        for v in t.data_mut() {
            *v = if positive {
                rng.uniform(0.5, 1.5)
            } else {
                rng.normal() * std
            };
        }
    }
}

/// Random inputs matching the graph's input channels.
pub fn random_inputs(graph: &Graph, n: usize, hw: &[(usize, usize)], rng: &mut SplitMix64) -> Vec<Tensor> {
    graph
        .input_channels()
        .iter()
        .zip(hw)
        .map(|(&c, &(h, w))| Tensor::randn([n, c, h, w], rng, 1.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Graph {
        let mut b = GraphBuilder::new(1);
        let x = b.input(4);
        let y = b
            .scoped("blk", Some(BlockKind::ConvBlock), |b| {
                let c = b.conv("conv", x, 6, (3, 3), ConvGeometry::same(3, 3), true, ConvRole::Free)?;
                Ok(b.act(c, Activation::Silu))
            })
            .unwrap();
        let parts = b.split(y, &[2, 4]).unwrap();
        let z = b.concat(&[parts[1], parts[0]]).unwrap();
        b.finish(&[z])
    }

    #[test]
    fn names_are_scoped_and_unique() {
        let g = tiny();
        assert!(g.params.contains_key("blk.conv.weight"));
        assert!(g.params.contains_key("blk.conv.bias"));
        let mut names: Vec<_> = g.nodes.iter().map(|n| n.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), g.nodes.len());
        assert_eq!(g.count_blocks(BlockKind::ConvBlock), 1);
    }

    #[test]
    fn forward_and_shape_inference_agree() {
        let g = tiny();
        let mut rng = SplitMix64::new(2);
        let x = Tensor::randn([2, 4, 5, 3], &mut rng, 1.0);
        let out = g.run(&[x]).unwrap();
        let shapes = g.infer_shapes(&[[2, 4, 5, 3]]).unwrap();
        assert_eq!(out[0].shape(), shapes[g.outputs[0]]);
        assert_eq!(out[0].shape(), [2, 6, 5, 3]);
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let g = tiny();
        assert!(g.run(&[Tensor::zeros([1, 3, 4, 4])]).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        assert_eq!(tiny().params, tiny().params);
    }

    #[test]
    fn topology_serializes() {
        let g = tiny();
        let s = serde_json::to_string(&g).unwrap();
        let back: Graph = serde_json::from_str(&s).unwrap();
        assert_eq!(back.nodes, g.nodes);
        assert!(back.params.is_empty());
    }
}
