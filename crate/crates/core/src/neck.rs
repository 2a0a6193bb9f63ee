//! RAU / SBA fusion units and the three-level necks built from them.

use serde::{Deserialize, Serialize};

use crate::blocks::{conv_block, C3k2Config};
use crate::error::{Error, Result};
use crate::graph::{BlockKind, ConvRole, Graph, GraphBuilder, Port};
use crate::ops::{Activation, ConvGeometry};

fn pointwise(b: &mut GraphBuilder, name: &str, x: Port, c_out: usize) -> Result<Port> {
    b.conv(name, x, c_out, (1, 1), ConvGeometry::same(1, 1), true, ConvRole::Free)
}

/// Re-calibration unit `R(f1, f2)`.
///
/// With `P1`, `P2` the 1x1 projections to `d` channels and
/// `F1' = sigmoid(S_theta f1)`, `F2' = sigmoid(S_delta f2)`, the output is
/// `F1' * P1 + F2' * P2 * (1 - F1') + P1` at `f1`'s resolution; `f2`-side
/// maps are nearest-resized to it first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RauConfig {
    pub c1: usize,
    pub c2: usize,
    pub d: usize,
}

impl RauConfig {
    pub fn build(&self, b: &mut GraphBuilder, name: &str, f1: Port, f2: Port) -> Result<Port> {
        if f1.channels != self.c1 || f2.channels != self.c2 {
            return Err(Error::shape(
                "rau",
                format!("inputs have ({}, {}) channels, config ({}, {})", f1.channels, f2.channels, self.c1, self.c2),
            ));
        }
        b.scoped(name, Some(BlockKind::Rau), |b| {
            let p1 = pointwise(b, "proj1", f1, self.d)?;
            let theta = pointwise(b, "s_theta", f1, self.d)?;
            let g1 = b.act(theta, Activation::Sigmoid);
            let p2 = pointwise(b, "proj2", f2, self.d)?;
            let delta = pointwise(b, "s_delta", f2, self.d)?;
            let g2 = b.act(delta, Activation::Sigmoid);
            let p2 = b.resize_like(p2, f1);
            let g2 = b.resize_like(g2, f1);
            let gated_shallow = b.mul(g1, p1)?;
            let complement = b.affine(g1, -1.0, 1.0);
            let deep = b.mul(g2, p2)?;
            let gated_deep = b.mul(deep, complement)?;
            let sum = b.add(gated_shallow, gated_deep)?;
            b.add(sum, p1)
        })
    }

    pub fn graph(&self, seed: u64) -> Result<Graph> {
        let mut b = GraphBuilder::new(seed);
        let f1 = b.input(self.c1);
        let f2 = b.input(self.c2);
        let y = self.build(&mut b, "rau", f1, f2)?;
        Ok(b.finish(&[y]))
    }
}

/// Selective boundary aggregation of a deep map `f_h` and shallow map `f_l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SbaConfig {
    pub c_high: usize,
    pub c_low: usize,
    pub d: usize,
    pub d_out: usize,
}

impl SbaConfig {
    pub fn build(&self, b: &mut GraphBuilder, name: &str, f_h: Port, f_l: Port) -> Result<Port> {
        b.scoped(name, Some(BlockKind::Sba), |b| {
            let shallow = RauConfig { c1: self.c_low, c2: self.c_high, d: self.d }.build(b, "rau_low", f_l, f_h)?;
            let deep = RauConfig { c1: self.c_high, c2: self.c_low, d: self.d }.build(b, "rau_high", f_h, f_l)?;
            let deep = b.resize_like(deep, f_l);
            let cat = b.concat(&[shallow, deep])?;
            conv_block(b, "out", cat, self.d_out, 3, 1)
        })
    }

    pub fn graph(&self, seed: u64) -> Result<Graph> {
        let mut b = GraphBuilder::new(seed);
        let f_h = b.input(self.c_high);
        let f_l = b.input(self.c_low);
        let y = self.build(&mut b, "sba", f_h, f_l)?;
        Ok(b.finish(&[y]))
    }
}

/// Three-level neck over backbone taps at strides 8/16/32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeckConfig {
    /// Input widths `(c3, c4, c5)`.
    pub c_in: [usize; 3],
    /// Output widths `(n3, n4, n5)`.
    pub c_out: [usize; 3],
    pub depth: usize,
    /// SBA fusion and C3k2_MAKDF stages when set; plain upsample+concat and C3k2 otherwise.
    pub recalibrate: bool,
}

impl NeckConfig {
    pub fn build(&self, b: &mut GraphBuilder, name: &str, taps: [Port; 3]) -> Result<[Port; 3]> {
        for (p, &c) in taps.iter().zip(&self.c_in) {
            if p.channels != c {
                return Err(Error::shape("neck", format!("tap has {} channels, expected {}", p.channels, c)));
            }
        }
        let kind = if self.recalibrate { BlockKind::Rcfpn } else { BlockKind::ConcatFpn };
        let [o3, o4, o5] = self.c_out;
        let [c3, c4, c5] = taps;
        let stage = |c_in, c_out| C3k2Config { c_in, c_out, n: self.depth, makdf: self.recalibrate };
        b.scoped(name, Some(kind), |b| {
            let d5 = stage(c5.channels, o5).build(b, "d5", c5)?;
            let m4 = if self.recalibrate {
                let sba = SbaConfig { c_high: o5, c_low: c4.channels, d: o4, d_out: o4 };
                sba.build(b, "sba4", d5, c4)?
            } else {
                let up = b.resize_like(d5, c4);
                b.concat(&[up, c4])?
            };
            let d4 = stage(m4.channels, o4).build(b, "d4", m4)?;
            let m3 = if self.recalibrate {
                let sba = SbaConfig { c_high: o4, c_low: c3.channels, d: o3, d_out: o3 };
                sba.build(b, "sba3", d4, c3)?
            } else {
                let up = b.resize_like(d4, c3);
                b.concat(&[up, c3])?
            };
            let n3 = stage(m3.channels, o3).build(b, "n3", m3)?;
            let down3 = conv_block(b, "down3", n3, o3, 3, 2)?;
            let cat4 = b.concat(&[down3, d4])?;
            let n4 = stage(cat4.channels, o4).build(b, "n4", cat4)?;
            let down4 = conv_block(b, "down4", n4, o4, 3, 2)?;
            let cat5 = b.concat(&[down4, d5])?;
            let n5 = stage(cat5.channels, o5).build(b, "n5", cat5)?;
            Ok([n3, n4, n5])
        })
    }

    pub fn graph(&self, seed: u64) -> Result<Graph> {
        let mut b = GraphBuilder::new(seed);
        let taps = [b.input(self.c_in[0]), b.input(self.c_in[1]), b.input(self.c_in[2])];
        let outs = self.build(&mut b, "neck", taps)?;
        Ok(b.finish(&outs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::Tensor;

    #[test]
    fn rau_output_follows_first_input() {
        let g = RauConfig { c1: 8, c2: 16, d: 8 }.graph(0).unwrap();
        let mut rng = SplitMix64::new(1);
        let f1 = Tensor::randn([1, 8, 16, 16], &mut rng, 1.0);
        let f2 = Tensor::randn([1, 16, 8, 8], &mut rng, 1.0);
        assert_eq!(g.run(&[f1, f2]).unwrap()[0].shape(), [1, 8, 16, 16]);
    }

    #[test]
    fn rau_batch_mismatch() {
        let g = RauConfig { c1: 2, c2: 2, d: 2 }.graph(0).unwrap();
        let f1 = Tensor::zeros([1, 2, 4, 4]);
        let f2 = Tensor::zeros([2, 2, 2, 2]);
        assert!(g.run(&[f1, f2]).is_err());
    }

    #[test]
    fn neck_strides() {
        for recalibrate in [true, false] {
            let cfg = NeckConfig { c_in: [12, 24, 24], c_out: [12, 24, 24], depth: 1, recalibrate };
            let g = cfg.graph(0).unwrap();
            let mut rng = SplitMix64::new(2);
            let ins = vec![
                Tensor::randn([1, 12, 16, 16], &mut rng, 1.0),
                Tensor::randn([1, 24, 8, 8], &mut rng, 1.0),
                Tensor::randn([1, 24, 4, 4], &mut rng, 1.0),
            ];
            let out = g.run(&ins).unwrap();
            let shapes: Vec<_> = out.iter().map(|t| t.shape()).collect();
            assert_eq!(shapes, vec![[1, 12, 16, 16], [1, 24, 8, 8], [1, 24, 4, 4]]);
        }
    }
}
