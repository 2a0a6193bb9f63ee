//! Channel-dependency analysis over the graph IR.
//!
//! Every channel of every node is traced back to a position in a *space*:
//! the output channels of one free convolution (or a graph input). Adds,
//! muls and block softmaxes force positions to be equal, merging spaces in a
//! union-find whose links carry an offset, so a smaller space may embed into
//! a larger one. Slices, grouped convolutions and half-split pairings impose
//! boundaries inside a space; the removal unit of a space is the set of
//! positions congruent modulo the gcd of its size and all boundaries.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{ConvRole, Graph, NodeId, NodeOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Chan {
    space: usize,
    pos: usize,
}

#[derive(Debug, Clone)]
struct Spaces {
    /// `(parent, offset)`: position `p` here is `p + offset` in the parent.
    parent: Vec<(usize, usize)>,
    size: Vec<usize>,
    producer: Vec<Option<NodeId>>,
    protect: Vec<Option<String>>,
}

impl Spaces {
    fn fresh(&mut self, size: usize, producer: Option<NodeId>, protect: Option<String>) -> usize {
        let id = self.size.len();
        self.parent.push((id, 0));
        self.size.push(size);
        self.producer.push(producer);
        self.protect.push(protect);
        id
    }

    fn find(&mut self, s: usize) -> (usize, usize) {
        let (p, off) = self.parent[s];
        if p == s {
            return (s, 0);
        }
        let (root, poff) = self.find(p);
        self.parent[s] = (root, off + poff);
        (root, off + poff)
    }

    fn resolve(&mut self, c: Chan) -> (usize, usize) {
        let (r, off) = self.find(c.space);
        (r, off + c.pos)
    }

    fn mark(&mut self, s: usize, reason: &str) {
        let (r, _) = self.find(s);
        if self.protect[r].is_none() {
            self.protect[r] = Some(reason.to_string());
        }
    }

    /// Attaches root `child` into root `parent` at `offset`.
    fn attach(&mut self, child: usize, parent: usize, offset: usize, bounds: &mut Vec<(usize, usize)>) {
        self.parent[child] = (parent, offset);
        if self.protect[parent].is_none() {
            self.protect[parent] = self.protect[child].take();
        }
        bounds.push((parent, offset));
        bounds.push((parent, offset + self.size[child]));
    }

    fn unify(&mut self, a: Chan, b: Chan, bounds: &mut Vec<(usize, usize)>) {
        let (ra, qa) = self.resolve(a);
        let (rb, qb) = self.resolve(b);
        if ra == rb {
            if qa != qb {
                self.mark(ra, "channel coupled to a shifted copy of itself");
            }
            return;
        }
        let (sa, sb) = (self.size[ra], self.size[rb]);
        if qa >= qb && qa - qb + sb <= sa {
            self.attach(rb, ra, qa - qb, bounds);
        } else if qb >= qa && qb - qa + sa <= sb {
            self.attach(ra, rb, qb - qa, bounds);
        } else {
            self.mark(ra, "partially overlapping channel coupling");
            self.mark(rb, "partially overlapping channel coupling");
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProducerSlot {
    pub node: String,
    /// First group position fed by this producer's rows.
    pub offset: usize,
    pub len: usize,
}

/// A set of channels that must be pruned together.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DependencyGroup {
    pub id: usize,
    pub channels: usize,
    /// Channels removed per unit.
    pub granularity: usize,
    /// Independently removable units (`channels / granularity`).
    pub units: usize,
    pub producers: Vec<ProducerSlot>,
    /// Convolutions and gates that read these channels.
    pub consumers: Vec<String>,
    /// Why the group is never pruned, when it isn't.
    pub protected: Option<String>,
}

impl DependencyGroup {
    /// Group positions forming unit `j`.
    pub fn unit_positions(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.granularity).map(move |l| l * self.units + j)
    }
}

/// Result of [`analyze`]: dependency groups plus, for every node, the
/// `(group, position)` of each of its output channels.
#[derive(Debug, Clone)]
pub struct ChannelAnalysis {
    pub groups: Vec<DependencyGroup>,
    pub layouts: Vec<Vec<(usize, usize)>>,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

struct Walker {
    spaces: Spaces,
    layouts: Vec<Vec<Chan>>,
    bounds: Vec<(usize, usize)>,
    pairs: Vec<(Chan, Chan)>,
}

impl Walker {
    /// Boundary between channels `t - 1` and `t` of a layout, if they are adjacent positions of one space.
    fn cut(&mut self, layout: &[Chan], t: usize) {
        if t == 0 || t >= layout.len() {
            return;
        }
        let (ra, qa) = self.spaces.resolve(layout[t - 1]);
        let (rb, qb) = self.spaces.resolve(layout[t]);
        if ra == rb && qb == qa + 1 {
            self.bounds.push((layout[t].space, layout[t].pos));
        }
    }

    /// Requires `layout[j]` and `layout[j + stride * k]` to fall in the same unit.
    fn pair_blocks(&mut self, layout: &[Chan], blocks: usize) {
        let len = layout.len() / blocks;
        for k in 1..blocks {
            for j in 0..len {
                self.pairs.push((layout[j], layout[k * len + j]));
            }
        }
    }

    fn fresh_layout(&mut self, size: usize, producer: Option<NodeId>, protect: Option<&str>) -> Vec<Chan> {
        let space = self.spaces.fresh(size, producer, protect.map(str::to_string));
        (0..size).map(|pos| Chan { space, pos }).collect()
    }
}

/// Builds dependency groups for every channel space of the graph.
pub fn analyze(graph: &Graph) -> Result<ChannelAnalysis> {
    let mut w = Walker {
        spaces: Spaces {
            parent: Vec::new(),
            size: Vec::new(),
            producer: Vec::new(),
            protect: Vec::new(),
        },
        layouts: Vec::with_capacity(graph.nodes.len()),
        bounds: Vec::new(),
        pairs: Vec::new(),
    };
    let mut consumers: Vec<(NodeId, NodeId)> = Vec::new();

    for (id, node) in graph.nodes.iter().enumerate() {
        let layout = match &node.op {
            NodeOp::Input { .. } => w.fresh_layout(node.channels, None, Some("graph input")),
            NodeOp::Conv(c) => {
                consumers.push((id, c.input));
                let input = w.layouts[c.input].clone();
                let g = c.geom.groups;
                match c.role {
                    ConvRole::Depthwise => input,
                    ConvRole::WeightGen => {
                        if c.c_out % c.c_in != 0 || g != 1 {
                            return Err(Error::invalid("analyze", format!("weight generator `{}` is malformed", node.name)));
                        }
                        input.iter().copied().cycle().take(c.c_out).collect()
                    }
                    ConvRole::Free | ConvRole::Output => {
                        let protect = (c.role == ConvRole::Output).then_some("network output");
                        let out = w.fresh_layout(c.c_out, Some(id), protect);
                        if g > 1 {
                            w.pair_blocks(&input, g);
                            w.pair_blocks(&out, g);
                        }
                        out
                    }
                }
            }
            NodeOp::Act { input, .. }
            | NodeOp::Affine { input, .. }
            | NodeOp::AvgPool { input }
            | NodeOp::MaxPool { input, .. }
            | NodeOp::ResizeLike { input, .. } => w.layouts[*input].clone(),
            NodeOp::Binary { a, b, .. } => {
                let (la, lb) = (w.layouts[*a].clone(), w.layouts[*b].clone());
                for (&x, &y) in la.iter().zip(&lb) {
                    w.spaces.unify(x, y, &mut w.bounds);
                }
                la
            }
            NodeOp::Slice { input, start, len } => {
                let l = w.layouts[*input].clone();
                w.cut(&l, *start);
                w.cut(&l, start + len);
                l[*start..start + len].to_vec()
            }
            NodeOp::Concat { inputs } => inputs.iter().flat_map(|&i| w.layouts[i].clone()).collect(),
            NodeOp::SoftmaxBlocks { input, blocks } => {
                let l = w.layouts[*input].clone();
                let len = l.len() / blocks;
                for k in 1..*blocks {
                    for j in 0..len {
                        w.spaces.unify(l[j], l[k * len + j], &mut w.bounds);
                    }
                }
                l
            }
            NodeOp::Sru(s) => {
                consumers.push((id, s.input));
                let l = w.layouts[s.input].clone();
                w.pair_blocks(&l, 2);
                l
            }
        };
        w.layouts.push(layout);
    }

    // Pairings become boundaries at their distance, or protect when they span spaces.
    let pairs = std::mem::take(&mut w.pairs);
    let mut extra = Vec::new();
    for (a, b) in pairs {
        let (ra, qa) = w.spaces.resolve(a);
        let (rb, qb) = w.spaces.resolve(b);
        if ra != rb {
            w.spaces.mark(ra, "paired channels lie in different groups");
            w.spaces.mark(rb, "paired channels lie in different groups");
        } else {
            extra.push((ra, qa.abs_diff(qb)));
        }
    }

    let n_spaces = w.spaces.size.len();
    let roots: Vec<usize> = (0..n_spaces).filter(|&s| w.spaces.find(s).0 == s).collect();
    let mut group_of_root = vec![usize::MAX; n_spaces];
    for (gi, &r) in roots.iter().enumerate() {
        group_of_root[r] = gi;
    }
    let mut block = roots.iter().map(|&r| w.spaces.size[r]).collect::<Vec<_>>();
    let raw_bounds = std::mem::take(&mut w.bounds);
    for (s, p) in raw_bounds {
        let (r, off) = w.spaces.find(s);
        let gi = group_of_root[r];
        block[gi] = gcd(block[gi], off + p);
    }
    for (r, d) in extra {
        let gi = group_of_root[r];
        block[gi] = gcd(block[gi], d);
    }

    let mut groups: Vec<DependencyGroup> = roots
        .iter()
        .enumerate()
        .map(|(gi, &r)| {
            let size = w.spaces.size[r];
            let units = block[gi].max(1);
            DependencyGroup {
                id: gi,
                channels: size,
                granularity: size / units,
                units,
                producers: Vec::new(),
                consumers: Vec::new(),
                protected: w.spaces.protect[r].clone(),
            }
        })
        .collect();
    for s in 0..n_spaces {
        if let Some(node) = w.spaces.producer[s] {
            let (r, off) = w.spaces.find(s);
            groups[group_of_root[r]].producers.push(ProducerSlot {
                node: graph.nodes[node].name.clone(),
                offset: off,
                len: w.spaces.size[s],
            });
        }
    }
    let mut layouts: Vec<Vec<(usize, usize)>> = Vec::with_capacity(w.layouts.len());
    for l in std::mem::take(&mut w.layouts) {
        layouts.push(
            l.into_iter()
                .map(|c| {
                    let (r, q) = w.spaces.resolve(c);
                    (group_of_root[r], q)
                })
                .collect(),
        );
    }
    for (node, input) in consumers {
        let mut seen: Vec<usize> = layouts[input].iter().map(|&(g, _)| g).collect();
        seen.sort_unstable();
        seen.dedup();
        for g in seen {
            let name = &graph.nodes[node].name;
            if !groups[g].consumers.contains(name) {
                groups[g].consumers.push(name.clone());
            }
        }
    }
    Ok(ChannelAnalysis { groups, layouts })
}
