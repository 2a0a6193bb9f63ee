//! ScConv preprocessing (SRU + CRU), the detection heads and box decoding.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::blocks::conv_block;
use crate::error::{Error, Result};
use crate::evalkit::{iou, DetectionRecord};
use crate::graph::{BlockKind, ConvRole, Graph, GraphBuilder, Port};
use crate::ops::{self, sigmoid, softplus, ConvGeometry};
use crate::tensor::Tensor;

pub const DEFAULT_GATE_THRESHOLD: f64 = 0.4;
pub const DEFAULT_GN_EPS: f64 = 1e-5;

/// Spatial reconstruction unit settings. Group norm runs with one group per
/// channel so every channel owns one scale `lambda_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SruConfig {
    pub channels: usize,
    pub threshold: f64,
    pub eps: f64,
}

impl SruConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            threshold: DEFAULT_GATE_THRESHOLD,
            eps: DEFAULT_GN_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::invalid("sru", format!("channel count must be even, got {}", self.channels)));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::invalid("sru", format!("threshold {} outside [0, 1)", self.threshold)));
        }
        Ok(())
    }

    pub fn build(&self, b: &mut GraphBuilder, name: &str, x: Port) -> Result<Port> {
        self.validate()?;
        if x.channels != self.channels {
            return Err(Error::shape("sru", format!("{} vs {} channels", x.channels, self.channels)));
        }
        b.scoped(name, Some(BlockKind::Sru), |b| b.sru_gate(x, self.threshold, self.eps))
    }

    pub fn graph(&self, seed: u64) -> Result<Graph> {
        let mut b = GraphBuilder::new(seed);
        let x = b.input(self.channels);
        let y = self.build(&mut b, "sru", x)?;
        Ok(b.finish(&[y]))
    }
}

/// Informative-feature mask `W1`: `sigmoid(w_c * GN(x)) >= t` with
/// `w_c = lambda_c / sum(lambda)`. `W2` is its complement.
pub fn sru_gate_mask(x: &Tensor, gamma: &[f64], beta: &[f64], threshold: f64, eps: f64) -> Result<Tensor> {
    let c = x.c();
    if c % 2 != 0 {
        return Err(Error::invalid("sru", "odd channel count"));
    }
    let total: f64 = gamma.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("sru", format!("GN scales must have a positive sum, got {total}")));
    }
    let gn = ops::group_norm(x, c, gamma, beta, eps)?;
    let p = x.plane();
    let mut mask = gn;
    for (i, v) in mask.data_mut().iter_mut().enumerate() {
        let ch = (i / p) % c;
        let reweight = sigmoid(gamma[ch] / total * *v);
        *v = if reweight >= threshold { 1.0 } else { 0.0 };
    }
    Ok(mask)
}

/// Applies a gate mask and cross-reconstructs:
/// `[X11 + X22, X21 + X12]` with `X1 = W1 * x`, `X2 = (1 - W1) * x`.
pub fn sru_apply(tape: &mut Tape, x: Var, mask: Tensor) -> Result<Var> {
    let c = tape.value(x).c();
    let half = c / 2;
    let inv = mask.map(|m| 1.0 - m);
    let w1 = tape.leaf(mask);
    let w2 = tape.leaf(inv);
    let x1 = tape.mul(x, w1)?;
    let x2 = tape.mul(x, w2)?;
    let x11 = tape.slice_channels(x1, 0, half)?;
    let x12 = tape.slice_channels(x1, half, half)?;
    let x21 = tape.slice_channels(x2, 0, half)?;
    let x22 = tape.slice_channels(x2, half, half)?;
    let top = tape.add(x11, x22)?;
    let bottom = tape.add(x21, x12)?;
    tape.concat_channels(&[top, bottom])
}

/// Channel reconstruction unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CruConfig {
    pub channels: usize,
    /// Fraction of channels routed to the upper (GWC) path.
    pub alpha: f64,
    pub squeeze: usize,
    pub gwc_groups: usize,
    pub gwc_kernel: usize,
    /// Apply the first PWC to the squeezed upper half instead of the lower
    /// half (the original ScConv form). Off by default.
    #[serde(default)]
    pub pwc_on_upper: bool,
}

/// Derived widths of a CRU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CruWidths {
    pub upper: usize,
    pub lower: usize,
    pub upper_sq: usize,
    pub lower_sq: usize,
    /// Output of the second PWC, concatenated with the squeezed lower half.
    pub pwc2_out: usize,
}

impl CruConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            alpha: 0.5,
            squeeze: 2,
            gwc_groups: 2,
            gwc_kernel: 3,
            pwc_on_upper: false,
        }
    }

    pub fn widths(&self) -> Result<CruWidths> {
        let c = self.channels;
        let upper_f = self.alpha * c as f64;
        let upper = upper_f.round() as usize;
        let err = |m: String| Err(Error::invalid("cru", m));
        if (upper_f - upper as f64).abs() > 1e-9 || upper == 0 || upper >= c {
            return err(format!("alpha * C = {upper_f} is not an integer in (0, C)"));
        }
        let lower = c - upper;
        let r = self.squeeze;
        if r == 0 || upper % r != 0 || lower % r != 0 {
            return err(format!("squeeze {r} does not divide split ({upper}, {lower})"));
        }
        let (upper_sq, lower_sq) = (upper / r, lower / r);
        let g = self.gwc_groups;
        if g == 0 || upper_sq % g != 0 || c % g != 0 {
            return err(format!("GWC groups {g} must divide {upper_sq} and {c}"));
        }
        if self.gwc_kernel % 2 == 0 {
            return err("GWC kernel must be odd".into());
        }
        Ok(CruWidths {
            upper,
            lower,
            upper_sq,
            lower_sq,
            pwc2_out: c - lower_sq,
        })
    }

    pub fn build(&self, b: &mut GraphBuilder, name: &str, x: Port) -> Result<Port> {
        let w = self.widths()?;
        let c = self.channels;
        if x.channels != c {
            return Err(Error::shape("cru", format!("{} vs {} channels", x.channels, c)));
        }
        let pw = ConvGeometry::same(1, 1);
        b.scoped(name, Some(BlockKind::Cru), |b| {
            let parts = b.split(x, &[w.upper, w.lower])?;
            let up = b.conv("squeeze_upper", parts[0], w.upper_sq, (1, 1), pw, false, ConvRole::Free)?;
            let low = b.conv("squeeze_lower", parts[1], w.lower_sq, (1, 1), pw, false, ConvRole::Free)?;
            let k = self.gwc_kernel;
            let gwc_geom = ConvGeometry::new(1, (k / 2, k / 2), self.gwc_groups);
            let gwc = b.conv("gwc", up, c, (k, k), gwc_geom, true, ConvRole::Free)?;
            let pwc1_src = if self.pwc_on_upper { up } else { low };
            let pwc1 = b.conv("pwc1", pwc1_src, c, (1, 1), pw, false, ConvRole::Free)?;
            let y1 = b.add(gwc, pwc1)?;
            let pwc2 = b.conv("pwc2", low, w.pwc2_out, (1, 1), pw, false, ConvRole::Free)?;
            let y2 = b.concat(&[pwc2, low])?;
            let s1 = b.avg_pool(y1);
            let s2 = b.avg_pool(y2);
            let s = b.concat(&[s1, s2])?;
            let eta = b.softmax_blocks(s, 2)?;
            let eta1 = b.slice(eta, 0, c)?;
            let eta2 = b.slice(eta, c, c)?;
            let a = b.mul(y1, eta1)?;
            let bb = b.mul(y2, eta2)?;
            b.add(a, bb)
        })
    }

    pub fn graph(&self, seed: u64) -> Result<Graph> {
        let mut b = GraphBuilder::new(seed);
        let x = b.input(self.channels);
        let y = self.build(&mut b, "cru", x)?;
        Ok(b.finish(&[y]))
    }
}

/// SRU followed by CRU.
pub fn scconv(b: &mut GraphBuilder, name: &str, x: Port, threshold: f64) -> Result<Port> {
    b.scoped(name, Some(BlockKind::ScConv), |b| {
        let sru = SruConfig {
            threshold,
            ..SruConfig::new(x.channels)
        };
        let y = sru.build(b, "sru", x)?;
        CruConfig::new(x.channels).build(b, "cru", y)
    })
}

pub fn scconv_graph(channels: usize, threshold: f64, seed: u64) -> Result<Graph> {
    let mut b = GraphBuilder::new(seed);
    let x = b.input(channels);
    let y = scconv(&mut b, "scconv", x, threshold)?;
    Ok(b.finish(&[y]))
}

pub const LEVEL_STRIDES: [usize; 3] = [8, 16, 32];

/// Per-level detection head. With `scconv` set this is SC_Detect; without it,
/// the plain two-branch head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectHeadConfig {
    pub channels: [usize; 3],
    pub num_classes: usize,
    pub scconv: bool,
    pub threshold: f64,
}

impl DetectHeadConfig {
    /// Emits outputs in order `box3, cls3, box4, cls4, box5, cls5`.
    pub fn build(&self, b: &mut GraphBuilder, name: &str, levels: [Port; 3]) -> Result<Vec<Port>> {
        if self.num_classes == 0 {
            return Err(Error::invalid("head", "need at least one class"));
        }
        for (p, &c) in levels.iter().zip(&self.channels) {
            if p.channels != c {
                return Err(Error::shape("head", format!("level has {} channels, expected {}", p.channels, c)));
            }
        }
        let kind = if self.scconv { BlockKind::ScDetect } else { BlockKind::PlainHead };
        b.scoped(name, Some(kind), |b| {
            let mut outs = Vec::with_capacity(6);
            for (i, &x) in levels.iter().enumerate() {
                let c = x.channels;
                b.scoped(&format!("p{}", i + 3), None, |b| {
                    let feat = if self.scconv { scconv(b, "scconv", x, self.threshold)? } else { x };
                    let bx = b.scoped("box", None, |b| {
                        let h = conv_block(b, "0", feat, c, 3, 1)?;
                        b.conv("pred", h, 4, (1, 1), ConvGeometry::same(1, 1), true, ConvRole::Output)
                    })?;
                    let cl = b.scoped("cls", None, |b| {
                        let h = conv_block(b, "0", feat, c, 3, 1)?;
                        b.conv("pred", h, self.num_classes, (1, 1), ConvGeometry::same(1, 1), true, ConvRole::Output)
                    })?;
                    outs.push(bx);
                    outs.push(cl);
                    Ok(())
                })?;
            }
            Ok(outs)
        })
    }

    pub fn graph(&self, seed: u64) -> Result<Graph> {
        let mut b = GraphBuilder::new(seed);
        let levels = [b.input(self.channels[0]), b.input(self.channels[1]), b.input(self.channels[2])];
        let outs = self.build(&mut b, "head", levels)?;
        Ok(b.finish(&outs))
    }
}

/// One pyramid level's raw maps.
#[derive(Debug, Clone)]
pub struct LevelOutput {
    pub box_map: Tensor,
    pub cls_map: Tensor,
    pub stride: usize,
}

/// Pairs `[box3, cls3, box4, ...]` into levels, deriving strides from the input height.
pub fn group_levels(outputs: Vec<Tensor>, input_h: usize) -> Result<Vec<LevelOutput>> {
    if outputs.len() % 2 != 0 {
        return Err(Error::invalid("decode", "head outputs must come in box/cls pairs"));
    }
    let mut it = outputs.into_iter();
    let mut levels = Vec::new();
    while let (Some(box_map), Some(cls_map)) = (it.next(), it.next()) {
        if box_map.c() != 4 || box_map.h() == 0 {
            return Err(Error::shape("decode", "box map must have 4 channels"));
        }
        let stride = input_h / box_map.h();
        levels.push(LevelOutput { box_map, cls_map, stride });
    }
    Ok(levels)
}

/// Box from a cell centre and positive `(l, t, r, b)` distances in stride units.
pub fn decode_box(cx: f64, cy: f64, stride: f64, dist: [f64; 4]) -> [f64; 4] {
    [
        cx - dist[0] * stride,
        cy - dist[1] * stride,
        cx + dist[2] * stride,
        cy + dist[3] * stride,
    ]
}

/// Greedy per-class NMS; keeps the higher-scoring box when IoU exceeds `iou_thresh`.
pub fn nms(mut dets: Vec<DetectionRecord>, iou_thresh: f64) -> Vec<DetectionRecord> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<DetectionRecord> = Vec::new();
    for d in dets {
        let suppressed = keep
            .iter()
            .any(|k| k.image_id == d.image_id && k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}

/// Thresholds sigmoid class scores, decodes softplus distances into boxes and
/// runs per-class NMS. `image_ids[n]` names batch item `n`.
pub fn decode_detections(
    levels: &[LevelOutput],
    image_ids: &[String],
    conf_thresh: f64,
    nms_iou: f64,
) -> Vec<DetectionRecord> {
    let mut all = Vec::new();
    for lv in levels {
        let [n, nc, h, w] = lv.cls_map.shape();
        let s = lv.stride as f64;
        for b in 0..n.min(image_ids.len()) {
            for y in 0..h {
                for x in 0..w {
                    let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                    let mut boxed = None;
                    for k in 0..nc {
                        let score = sigmoid(lv.cls_map.at(b, k, y, x));
                        if score < conf_thresh || score <= 0.0 {
                            continue;
                        }
                        let bbox = *boxed.get_or_insert_with(|| {
                            let d = [0, 1, 2, 3].map(|j| softplus(lv.box_map.at(b, j, y, x)));
                            decode_box(cx, cy, s, d)
                        });
                        all.push(DetectionRecord {
                            image_id: image_ids[b].clone(),
                            class_id: k,
                            score,
                            bbox,
                        });
                    }
                }
            }
        }
    }
    nms(all, nms_iou)
}
