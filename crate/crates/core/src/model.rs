//! Toy-scale detector assembly and parameter/FLOP accounting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blocks::{conv_block, C3k2Config, SppfConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder, NodeOp};
use crate::head::{CruConfig, DetectHeadConfig, DEFAULT_GATE_THRESHOLD};
use crate::neck::NeckConfig;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Mrs,
}

fn default_threshold() -> f64 {
    DEFAULT_GATE_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Stage widths `w1..w4`; `w2..w4` are the P3/P4/P5 widths.
    pub widths: [usize; 4],
    /// Bottlenecks per C3k2 stage.
    pub depth: usize,
    pub num_classes: usize,
    /// `(h, w)`.
    pub input_size: (usize, usize),
    pub variant: Variant,
    /// SRU gate threshold.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

impl ModelConfig {
    /// Reference toy configuration: widths (24, 48, 96, 192), one bottleneck, four classes, 64x64.
    pub fn reference(variant: Variant) -> Self {
        Self {
            widths: [24, 48, 96, 192],
            depth: 1,
            num_classes: 4,
            input_size: (64, 64),
            variant,
            threshold: DEFAULT_GATE_THRESHOLD,
        }
    }

    /// Every violated invariant, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (i, &w) in self.widths.iter().enumerate() {
            if w == 0 || w % 12 != 0 {
                errs.push(format!("widths[{i}] = {w} must be a positive multiple of 12"));
            }
        }
        if self.depth == 0 {
            errs.push("depth must be at least 1".into());
        }
        if self.num_classes == 0 {
            errs.push("num_classes must be at least 1".into());
        }
        let (h, w) = self.input_size;
        if h == 0 || h % 32 != 0 {
            errs.push(format!("input height {h} must be a positive multiple of 32"));
        }
        if w == 0 || w % 32 != 0 {
            errs.push(format!("input width {w} must be a positive multiple of 32"));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            errs.push(format!("threshold {} must lie in [0, 1)", self.threshold));
        }
        if self.variant == Variant::Mrs {
            for (i, &c) in self.widths[1..].iter().enumerate() {
                if c % 12 == 0 {
                    if let Err(e) = CruConfig::new(c).widths() {
                        errs.push(format!("widths[{}] = {c} does not fit the CRU channel split: {e}", i + 1));
                    }
                }
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn level_widths(&self) -> [usize; 3] {
        [self.widths[1], self.widths[2], self.widths[3]]
    }
}

/// A configured detector. `graph` is the source of truth after pruning;
/// `config` records how it was first built.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub graph: Graph,
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mrs = config.variant == Variant::Mrs;
        let [w1, w2, w3, w4] = config.widths;
        let n = config.depth;
        let stage = |c| C3k2Config { c_in: c, c_out: c, n, makdf: mrs };

        let mut b = GraphBuilder::new(seed);
        let x = b.input(3);
        let taps = b.scoped("backbone", None, |b| {
            let y = conv_block(b, "stem", x, w1 / 2, 3, 2)?;
            let y = conv_block(b, "down1", y, w1, 3, 2)?;
            let y = stage(w1).build(b, "stage1", y)?;
            let y = conv_block(b, "down2", y, w2, 3, 2)?;
            let p3 = stage(w2).build(b, "stage2", y)?;
            let y = conv_block(b, "down3", p3, w3, 3, 2)?;
            let p4 = stage(w3).build(b, "stage3", y)?;
            let y = conv_block(b, "down4", p4, w4, 3, 2)?;
            let y = stage(w4).build(b, "stage4", y)?;
            let p5 = SppfConfig { c_in: w4, c_out: w4, k: 5 }.build(b, "sppf", y)?;
            Ok([p3, p4, p5])
        })?;
        let levels = config.level_widths();
        let neck = NeckConfig { c_in: levels, c_out: levels, depth: n, recalibrate: mrs };
        let feats = neck.build(&mut b, "neck", taps)?;
        let head = DetectHeadConfig {
            channels: levels,
            num_classes: config.num_classes,
            scconv: mrs,
            threshold: config.threshold,
        };
        let outs = head.build(&mut b, "head", feats)?;
        Ok(Self {
            config: config.clone(),
            graph: b.finish(&outs),
        })
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        let (h, w) = self.config.input_size;
        [batch, 3, h, w]
    }

    /// Head maps in order `box3, cls3, box4, cls4, box5, cls5`.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let [_, c, h, w] = x.shape();
        if c != 3 || h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "model",
                format!("input must be (n, 3, 32a, 32b), got {:?}", x.shape()),
            ));
        }
        self.graph.run(std::slice::from_ref(x))
    }
}

/// Elementwise work charged per output element of the SRU gate node:
/// normalise, scale, sigmoid, threshold, two masked products.
pub const SRU_FLOPS_PER_ELEMENT: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub op: String,
    /// Output `(c, h, w)` for a single image.
    pub shape: [usize; 3],
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_size: (usize, usize),
    pub flop_convention: String,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
    pub gflops: f64,
}

fn node_params(graph: &Graph, op: &NodeOp) -> u64 {
    let names: Vec<&str> = match op {
        NodeOp::Conv(c) => std::iter::once(c.weight.as_str()).chain(c.bias.as_deref()).collect(),
        NodeOp::Sru(s) => vec![s.gamma.as_str(), s.beta.as_str()],
        _ => vec![],
    };
    names.iter().filter_map(|n| graph.params.get(*n)).map(|t| t.len() as u64).sum()
}

fn node_flops(op: &NodeOp, shapes: &[Shape], out: Shape) -> u64 {
    let elems = (out[1] * out[2] * out[3]) as u64;
    match op {
        NodeOp::Conv(c) => {
            let per_out = (c.c_in / c.geom.groups) * c.kernel.0 * c.kernel.1;
            2 * (c.c_out * per_out * out[2] * out[3]) as u64
        }
        NodeOp::Act { .. }
        | NodeOp::Affine { .. }
        | NodeOp::Binary { .. }
        | NodeOp::AvgPool { .. }
        | NodeOp::MaxPool { .. }
        | NodeOp::SoftmaxBlocks { .. } => elems,
        NodeOp::Sru(s) => {
            debug_assert_eq!(shapes[s.input][1], out[1]);
            SRU_FLOPS_PER_ELEMENT * elems
        }
        NodeOp::Input { .. } | NodeOp::ResizeLike { .. } | NodeOp::Slice { .. } | NodeOp::Concat { .. } => 0,
    }
}

/// Per-node parameter and FLOP counts for one image of `input_size`.
pub fn cost_report(graph: &Graph, input_size: (usize, usize)) -> Result<CostReport> {
    let (h, w) = input_size;
    let ins: Vec<Shape> = graph.input_channels().iter().map(|&c| [1, c, h, w]).collect();
    let shapes = graph.infer_shapes(&ins)?;
    let rows: Vec<CostRow> = graph
        .nodes
        .iter()
        .zip(&shapes)
        .map(|(node, &s)| CostRow {
            name: node.name.clone(),
            op: node.op.kind().to_string(),
            shape: [s[1], s[2], s[3]],
            params: node_params(graph, &node.op),
            flops: node_flops(&node.op, &shapes, s),
        })
        .collect();
    let total_params = rows.iter().map(|r| r.params).sum();
    let total_flops = rows.iter().map(|r| r.flops).sum();
    Ok(CostReport {
        input_size,
        flop_convention: "multiply-accumulate counted as 2 FLOPs; pooling and elementwise ops 1 per output element"
            .into(),
        rows,
        total_params,
        total_flops,
        gflops: total_flops as f64 / 1e9,
    })
}

/// Parameter count of the graph.
pub fn count_params(graph: &Graph) -> u64 {
    graph.nodes.iter().map(|n| node_params(graph, &n.op)).sum()
}

/// Total forward FLOPs for one image.
pub fn count_flops(graph: &Graph, input_size: (usize, usize)) -> Result<u64> {
    Ok(cost_report(graph, input_size)?.total_flops)
}

impl CostReport {
    /// Fixed-width table; layers without parameters or FLOPs are omitted.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "input {}x{}; {}", self.input_size.0, self.input_size.1, self.flop_convention);
        let _ = writeln!(s, "{:<width$}  {:<10}  {:>16}  {:>10}  {:>14}", "layer", "op", "shape", "params", "flops");
        for r in self.rows.iter().filter(|r| r.params > 0 || r.flops > 0) {
            let shape = format!("{}x{}x{}", r.shape[0], r.shape[1], r.shape[2]);
            let _ = writeln!(s, "{:<width$}  {:<10}  {:>16}  {:>10}  {:>14}", r.name, r.op, shape, r.params, r.flops);
        }
        let _ = writeln!(s, "{:<width$}  {:<10}  {:>16}  {:>10}  {:>14}", "total", "", "", self.total_params, self.total_flops);
        let _ = writeln!(s, "GFLOPs: {:.6}", self.gflops);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BlockKind, ConvRole};
    use crate::ops::ConvGeometry;

    #[test]
    fn single_conv_costs() {
        let mut b = GraphBuilder::new(0);
        let x = b.input(8);
        let y = b.conv("c", x, 8, (1, 1), ConvGeometry::same(1, 1), false, ConvRole::Free).unwrap();
        let g = b.finish(&[y]);
        assert_eq!(count_flops(&g, (4, 4)).unwrap(), 2048);

        let mut b = GraphBuilder::new(0);
        let x = b.input(16);
        let y = b.conv("c", x, 32, (3, 3), ConvGeometry::same(3, 3), true, ConvRole::Free).unwrap();
        let g = b.finish(&[y]);
        assert_eq!(count_params(&g), 4640);
        assert_eq!(count_flops(&g, (8, 8)).unwrap() * 4, count_flops(&g, (16, 16)).unwrap());
    }

    #[test]
    fn config_violations_are_listed() {
        let cfg = ModelConfig {
            widths: [24, 50, 96, 10],
            depth: 0,
            num_classes: 0,
            input_size: (60, 64),
            variant: Variant::Mrs,
            threshold: 0.4,
        };
        match cfg.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 5, "{v:?}"),
            other => panic!("{other:?}"),
        }
        let mut odd_cru = ModelConfig::reference(Variant::Mrs);
        odd_cru.widths = [12, 36, 48, 96];
        assert!(odd_cru.validate().is_err());
        odd_cru.variant = Variant::Baseline;
        assert!(odd_cru.validate().is_ok());
    }

    #[test]
    fn reference_model_runs() {
        let m = Model::build(&ModelConfig::reference(Variant::Mrs), 3).unwrap();
        let mut rng = crate::rng::SplitMix64::new(0);
        let x = Tensor::randn(m.input_shape(1), &mut rng, 1.0);
        let out = m.forward(&x).unwrap();
        let shapes: Vec<Shape> = out.iter().map(|t| t.shape()).collect();
        assert_eq!(
            shapes,
            vec![[1, 4, 8, 8], [1, 4, 8, 8], [1, 4, 4, 4], [1, 4, 4, 4], [1, 4, 2, 2], [1, 4, 2, 2]]
        );
        assert!(out.iter().all(Tensor::is_finite));
        assert!(m.graph.count_blocks(BlockKind::Akdc) >= 1);
        assert!(m.graph.count_blocks(BlockKind::Sba) >= 2);
        assert_eq!(m.graph.count_blocks(BlockKind::ScConv), 3);
    }

    #[test]
    fn totals_match_parts_and_storage() {
        let m = Model::build(&ModelConfig::reference(Variant::Baseline), 0).unwrap();
        let r = cost_report(&m.graph, (64, 64)).unwrap();
        assert_eq!(r.total_params, r.rows.iter().map(|r| r.params).sum::<u64>());
        assert_eq!(r.total_params as usize, m.graph.num_param_elements());
        let json = serde_json::to_string(&r).unwrap();
        let back: CostReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert!(r.to_text().contains("GFLOPs"));
    }
}
