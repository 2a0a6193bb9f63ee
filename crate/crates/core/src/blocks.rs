//! Backbone blocks: Conv, Bottleneck, AKDC, MAKDF, C3k2[_MAKDF] and SPPF.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BlockKind, ConvRole, Graph, GraphBuilder, Port};
use crate::ops::{Activation, ConvGeometry};

/// Conv + bias + SiLU with "same" padding for odd `k`.
pub fn conv_block(b: &mut GraphBuilder, name: &str, x: Port, c_out: usize, k: usize, stride: usize) -> Result<Port> {
    b.scoped(name, Some(BlockKind::ConvBlock), |b| {
        let geom = ConvGeometry::new(stride, (k / 2, k / 2), 1);
        let y = b.conv("conv", x, c_out, (k, k), geom, true, ConvRole::Free)?;
        Ok(b.act(y, Activation::Silu))
    })
}

/// Adaptive kernel depthwise convolution: square, horizontal-band and
/// vertical-band depthwise branches blended by per-channel softmax weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AkdcConfig {
    pub channels: usize,
    pub k: usize,
}

impl AkdcConfig {
    pub fn new(channels: usize, k: usize) -> Result<Self> {
        let cfg = Self { channels, k };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Band length `3K + 2`.
    pub fn m(&self) -> usize {
        3 * self.k + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::invalid("akdc", format!("kernel size K must be odd and positive, got {}", self.k)));
        }
        if self.channels == 0 {
            return Err(Error::invalid("akdc", "no channels"));
        }
        Ok(())
    }

    pub fn build(&self, b: &mut GraphBuilder, name: &str, x: Port) -> Result<Port> {
        self.validate()?;
        if x.channels != self.channels {
            return Err(Error::shape(
                "akdc",
                format!("input has {} channels, block expects {}", x.channels, self.channels),
            ));
        }
        let (c, k, m) = (self.channels, self.k, self.m());
        b.scoped(name, Some(BlockKind::Akdc), |b| {
            let pooled = b.avg_pool(x);
            let logits = b.conv("weight_gen", pooled, 3 * c, (1, 1), ConvGeometry::same(1, 1), true, ConvRole::WeightGen)?;
            let weights = b.softmax_blocks(logits, 3)?;
            let dw = |kh: usize, kw: usize| ConvGeometry::new(1, ((kh - 1) / 2, (kw - 1) / 2), c);
            let square = b.conv("square", x, c, (k, k), dw(k, k), false, ConvRole::Depthwise)?;
            let horiz = b.conv("horizontal", x, c, (1, m), dw(1, m), false, ConvRole::Depthwise)?;
            let vert = b.conv("vertical", x, c, (m, 1), dw(m, 1), false, ConvRole::Depthwise)?;
            let mut acc: Option<Port> = None;
            for (i, branch) in [square, horiz, vert].into_iter().enumerate() {
                let w = b.slice(weights, i * c, c)?;
                let term = b.mul(branch, w)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => b.add(a, term)?,
                });
            }
            Ok(acc.expect("three branches"))
        })
    }

    pub fn graph(&self, seed: u64) -> Result<Graph> {
        let mut b = GraphBuilder::new(seed);
        let x = b.input(self.channels);
        let y = self.build(&mut b, "akdc", x)?;
        Ok(b.finish(&[y]))
    }
}

/// Multi-scale fusion: channel 3-split into AKDC(K=1/3/5), concat, 1x1 fuse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MakdfConfig {
    pub channels: usize,
}

pub const MAKDF_KERNELS: [usize; 3] = [1, 3, 5];

/// Balanced 3-way partition with the remainder going to the leading groups.
pub fn balanced_split(c: usize) -> [usize; 3] {
    let (q, r) = (c / 3, c % 3);
    [q + usize::from(r > 0), q + usize::from(r > 1), q]
}

impl MakdfConfig {
    pub fn groups(&self) -> [usize; 3] {
        balanced_split(self.channels)
    }

    pub fn build(&self, b: &mut GraphBuilder, name: &str, x: Port) -> Result<Port> {
        if self.channels < 3 {
            return Err(Error::invalid("makdf", format!("needs at least 3 channels, got {}", self.channels)));
        }
        if x.channels != self.channels {
            return Err(Error::shape("makdf", format!("{} vs {} channels", x.channels, self.channels)));
        }
        b.scoped(name, Some(BlockKind::Makdf), |b| {
            let parts = b.split(x, &self.groups())?;
            let mut fused = Vec::with_capacity(3);
            for (i, (&p, &k)) in parts.iter().zip(&MAKDF_KERNELS).enumerate() {
                let cfg = AkdcConfig::new(p.channels, k)?;
                fused.push(cfg.build(b, &format!("akdc{}", i + 1), p)?);
            }
            let cat = b.concat(&fused)?;
            b.conv("fuse", cat, self.channels, (1, 1), ConvGeometry::same(1, 1), true, ConvRole::Free)
        })
    }

    pub fn graph(&self, seed: u64) -> Result<Graph> {
        let mut b = GraphBuilder::new(seed);
        let x = b.input(self.channels);
        let y = self.build(&mut b, "makdf", x)?;
        Ok(b.finish(&[y]))
    }
}

/// Bottleneck: 3x3 Conv block, then either a second 3x3 Conv block (plain)
/// or MAKDF; residual add around both.
pub fn bottleneck(b: &mut GraphBuilder, name: &str, x: Port, makdf: bool) -> Result<Port> {
    b.scoped(name, Some(BlockKind::Bottleneck), |b| {
        let h = x.channels;
        let t = conv_block(b, "cv1", x, h, 3, 1)?;
        let u = if makdf {
            MakdfConfig { channels: h }.build(b, "makdf", t)?
        } else {
            conv_block(b, "cv2", t, h, 3, 1)?
        };
        b.add(x, u)
    })
}

/// CSP stage: 1x1 to `2h`, split, `n` chained bottlenecks whose outputs are
/// all kept, concat of `2 + n` pieces, 1x1 to `c_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct C3k2Config {
    pub c_in: usize,
    pub c_out: usize,
    pub n: usize,
    pub makdf: bool,
}

impl C3k2Config {
    pub fn hidden(&self) -> usize {
        self.c_out / 2
    }

    pub fn build(&self, b: &mut GraphBuilder, name: &str, x: Port) -> Result<Port> {
        if self.c_out % 2 != 0 || self.c_out == 0 {
            return Err(Error::invalid("c3k2", format!("output channels must be even, got {}", self.c_out)));
        }
        if x.channels != self.c_in {
            return Err(Error::shape("c3k2", format!("{} vs {} channels", x.channels, self.c_in)));
        }
        let kind = if self.makdf { BlockKind::C3k2Makdf } else { BlockKind::C3k2 };
        let h = self.hidden();
        b.scoped(name, Some(kind), |b| {
            let y = conv_block(b, "cv1", x, 2 * h, 1, 1)?;
            let halves = b.split(y, &[h, h])?;
            let mut pieces = halves.clone();
            let mut cur = halves[1];
            for i in 0..self.n {
                cur = bottleneck(b, &format!("m{i}"), cur, self.makdf)?;
                pieces.push(cur);
            }
            let cat = b.concat(&pieces)?;
            conv_block(b, "cv2", cat, self.c_out, 1, 1)
        })
    }

    pub fn graph(&self, seed: u64) -> Result<Graph> {
        let mut b = GraphBuilder::new(seed);
        let x = b.input(self.c_in);
        let y = self.build(&mut b, "c3k2", x)?;
        Ok(b.finish(&[y]))
    }
}

/// Fast spatial pyramid pooling: 1x1 reduce, three chained `k` max-pools,
/// concat of four, 1x1 expand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SppfConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl SppfConfig {
    pub fn build(&self, b: &mut GraphBuilder, name: &str, x: Port) -> Result<Port> {
        if self.k % 2 == 0 {
            return Err(Error::invalid("sppf", "pool kernel must be odd"));
        }
        let hidden = (self.c_in / 2).max(1);
        b.scoped(name, Some(BlockKind::Sppf), |b| {
            let y = conv_block(b, "cv1", x, hidden, 1, 1)?;
            let p1 = b.max_pool(y, self.k, 1, self.k / 2);
            let p2 = b.max_pool(p1, self.k, 1, self.k / 2);
            let p3 = b.max_pool(p2, self.k, 1, self.k / 2);
            let cat = b.concat(&[y, p1, p2, p3])?;
            conv_block(b, "cv2", cat, self.c_out, 1, 1)
        })
    }

    pub fn graph(&self, seed: u64) -> Result<Graph> {
        let mut b = GraphBuilder::new(seed);
        let x = b.input(self.c_in);
        let y = self.build(&mut b, "sppf", x)?;
        Ok(b.finish(&[y]))
    }
}
