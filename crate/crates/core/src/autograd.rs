//! Recorded-composition reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Each op
//! appends a node holding its output and enough saved state to run the
//! matching backward kernel. [`Tape::backward`] walks the nodes in reverse,
//! accumulating gradients into each node's [`Tensor::grad`].

use crate::error::{Error, Result};
use crate::ops::{self, Activation, BinaryOp, ConvGeometry, GroupNormStats};
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupNormStats,
    },
    AvgPool {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Resize {
        x: Var,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Binary {
        a: Var,
        b: Var,
        op: BinaryOp,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    SoftmaxBlocks {
        x: Var,
        blocks: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A single-writer recording context.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.take_grad();
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient after [`Tape::backward`]; zeros for nodes the seed never reached.
    pub fn grad(&self, v: Var) -> Tensor {
        let t = &self.nodes[v.0].value;
        t.grad_tensor().unwrap_or_else(|| Tensor::zeros(t.shape()))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data().to_vec());
        let y = ops::conv2d_raw(self.value(x), self.value(w), bias.as_deref(), &geom)?;
        Ok(self.push(y, Op::Conv { x, w, b, geom }))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (y, stats) = ops::group_norm_with_stats(
            self.value(x),
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        Ok(self.push(
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
        ))
    }

    pub fn avg_pool_1x1(&mut self, x: Var) -> Result<Var> {
        let y = ops::adaptive_avg_pool_1x1(self.value(x))?;
        Ok(self.push(y, Op::AvgPool { x }))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let (y, argmax) = ops::max_pool2d(self.value(x), k, stride, padding)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn resize_nearest(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        if self.value(x).h() == h && self.value(x).w() == w {
            return Ok(x);
        }
        let y = ops::resize_nearest(self.value(x), h, w)?;
        Ok(self.push(y, Op::Resize { x }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = ops::slice_channels(self.value(x), start, len)?;
        Ok(self.push(y, Op::Slice { x, start }))
    }

    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        if sizes.iter().sum::<usize>() != self.value(x).c() {
            return Err(Error::shape("split_channels", "sizes do not sum to channel count"));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice_channels(x, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_channels(&refs)?;
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let y = ops::activation(self.value(x), kind).ensure_finite("activation")?;
        Ok(self.push(y, Op::Act { x, kind }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Silu)
    }

    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let y = ops::elementwise(self.value(a), self.value(b), op)?;
        Ok(self.push(y, Op::Binary { a, b, op }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let y = ops::affine(self.value(x), scale, shift).ensure_finite("affine")?;
        Ok(self.push(y, Op::Affine { x, scale }))
    }

    pub fn softmax_blocks(&mut self, x: Var, blocks: usize) -> Result<Var> {
        let y = ops::softmax_blocks(self.value(x), blocks)?;
        Ok(self.push(y, Op::SoftmaxBlocks { x, blocks }))
    }

    /// Reverse sweep from one output.
    pub fn backward(&mut self, output: Var, seed: &Tensor) -> Result<()> {
        self.backward_many(&[(output, seed.clone())])
    }

    /// Reverse sweep seeded at several outputs at once; gradients of the
    /// implied scalar `sum_k <seed_k, output_k>` land on every node.
    pub fn backward_many(&mut self, seeds: &[(Var, Tensor)]) -> Result<()> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, seed) in seeds {
            if seed.shape() != self.value(*v).shape() {
                return Err(Error::shape(
                    "backward",
                    format!("seed {:?} vs output {:?}", seed.shape(), self.value(*v).shape()),
                ));
            }
            accumulate(&mut grads[v.0], seed.clone());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let contributions = self.local_backward(i, &gy);
            for (v, g) in contributions {
                accumulate(&mut grads[v.0], g);
            }
            grads[i] = Some(gy);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let g = g.map(Tensor::into_data).unwrap_or_else(|| vec![0.0; node.value.len()]);
            node.value.set_grad(g)?;
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, gy: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = ops::conv2d_backward(self.value(*x), self.value(*w), b.is_some(), geom, gy);
                let mut out = vec![(*x, dx), (*w, dw)];
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, vector_like(self.value(*b).shape(), db)));
                }
                out
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (dx, dg, db) =
                    ops::group_norm_backward(self.value(*x), *groups, self.value(*gamma).data(), stats, gy);
                vec![
                    (*x, dx),
                    (*gamma, vector_like(self.value(*gamma).shape(), dg)),
                    (*beta, vector_like(self.value(*beta).shape(), db)),
                ]
            }
            Op::AvgPool { x } => {
                vec![(*x, ops::adaptive_avg_pool_1x1_backward(self.value(*x).shape(), gy))]
            }
            Op::MaxPool { x, argmax } => {
                vec![(*x, ops::max_pool2d_backward(self.value(*x).shape(), argmax, gy))]
            }
            Op::Resize { x } => vec![(*x, ops::resize_nearest_backward(self.value(*x).shape(), gy))],
            Op::Slice { x, start } => vec![(*x, scatter_slice(self.value(*x).shape(), *start, gy))],
            Op::Concat { parts } => {
                let sizes: Vec<usize> = parts.iter().map(|p| self.value(*p).c()).collect();
                let pieces = ops::split_channels(gy, &sizes).expect("concat grad splits");
                parts.iter().copied().zip(pieces).collect()
            }
            Op::Act { x, kind } => vec![(*x, ops::activation_backward(self.value(*x), *kind, gy))],
            Op::Binary { a, b, op } => {
                let (da, db) = ops::elementwise_backward(self.value(*a), self.value(*b), *op, gy);
                vec![(*a, da), (*b, db)]
            }
            Op::Affine { x, scale } => vec![(*x, gy.map(|g| g * scale))],
            Op::SoftmaxBlocks { x, blocks } => {
                vec![(*x, ops::softmax_blocks_backward(&node.value, *blocks, gy))]
            }
        }
    }
}

fn vector_like(shape: Shape, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("vector gradient length")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn scatter_slice(shape: Shape, start: usize, gy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(shape);
    let p = gy.plane();
    let len = gy.c();
    for b in 0..gy.n() {
        let src = &gy.data()[b * len * p..(b + 1) * len * p];
        let dst = (b * shape[1] + start) * p;
        dx.data_mut()[dst..dst + len * p].copy_from_slice(src);
    }
    dx
}

/// Hard-gate masks produced during a pass, optionally frozen for replay.
///
/// The spatial gate is a step function, so its derivative is zero almost
/// everywhere; gradient checks record the masks once and replay them while
/// perturbing inputs so the finite differences see the same piecewise branch.
#[derive(Debug, Clone, Default)]
pub enum MaskCache {
    #[default]
    Live,
    Record(Vec<Tensor>),
    Replay { masks: Vec<Tensor>, cursor: usize },
}

impl MaskCache {
    /// Returns the mask to use, computing it with `compute` unless replaying.
    pub fn resolve(&mut self, compute: impl FnOnce() -> Result<Tensor>) -> Result<Tensor> {
        match self {
            MaskCache::Live => compute(),
            MaskCache::Record(list) => {
                let m = compute()?;
                list.push(m.clone());
                Ok(m)
            }
            MaskCache::Replay { masks, cursor } => {
                let m = masks
                    .get(*cursor)
                    .cloned()
                    .ok_or_else(|| Error::invalid("mask replay", "more gates than recorded masks"))?;
                *cursor += 1;
                Ok(m)
            }
        }
    }

    pub fn recorded(self) -> Vec<Tensor> {
        match self {
            MaskCache::Record(list) | MaskCache::Replay { masks: list, .. } => list,
            MaskCache::Live => Vec::new(),
        }
    }
}

/// A tape plus gate-mask policy: everything one forward pass needs.
#[derive(Debug, Default)]
pub struct Session {
    pub tape: Tape,
    pub masks: MaskCache,
}

impl Session {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn recording() -> Self {
        Self {
            tape: Tape::new(),
            masks: MaskCache::Record(Vec::new()),
        }
    }

    pub fn replaying(masks: Vec<Tensor>) -> Self {
        Self {
            tape: Tape::new(),
            masks: MaskCache::Replay { masks, cursor: 0 },
        }
    }
}
