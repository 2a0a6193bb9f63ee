//! Central finite differences: the independent oracle for every analytic gradient.

use serde::Serialize;

use crate::autograd::Session;
use crate::error::Result;
use crate::graph::Graph;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Step used by every gradient check.
pub const FD_STEP: f64 = 1e-4;

/// Lower bound on the denominator of [`relative_error`]. Gradients smaller
/// than this are compared on an absolute scale of `tol * REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Full central-difference gradient of `f` at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    let idx: Vec<usize> = (0..x.len()).collect();
    let vals = finite_diff_at(&mut f, x, &idx, h)?;
    Tensor::new(x.shape(), vals)
}

/// Central differences at selected flat indices only.
pub fn finite_diff_at(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    indices: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let fp = f(&probe)?;
            probe.data_mut()[i] = orig - h;
            let fm = f(&probe)?;
            probe.data_mut()[i] = orig;
            Ok((fp - fm) / (2.0 * h))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct GradSample {
    /// `input{k}` or a parameter name.
    pub target: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub tol: f64,
    pub step: f64,
    /// Probed coordinates per input tensor.
    pub input_samples: usize,
    /// Probed parameter coordinates in total.
    pub param_samples: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            tol: 1e-4,
            step: FD_STEP,
            input_samples: 24,
            param_samples: 48,
        }
    }
}

fn probe_loss(graph: &Graph, inputs: &[Tensor], seeds: &[Tensor], masks: &[Tensor]) -> Result<f64> {
    let mut sess = Session::replaying(masks.to_vec());
    let pass = graph.forward(&mut sess, inputs)?;
    Ok(pass
        .outputs
        .iter()
        .zip(seeds)
        .map(|(&v, r)| sess.tape.value(v).data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>())
        .sum())
}

/// Compares tape gradients of `L = sum_k <R_k, y_k>` (random `R_k`) against
/// central differences at sampled input and parameter coordinates.
///
/// Hard gate masks are recorded on the analytic pass and replayed for every
/// probe, so the gate is treated as a constant.
pub fn check_graph(graph: &Graph, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::new(opts.seed ^ 0x5EED);
    let mut sess = Session::recording();
    let pass = graph.forward(&mut sess, inputs)?;
    let seeds: Vec<Tensor> = pass
        .outputs
        .iter()
        .map(|&v| Tensor::randn(sess.tape.value(v).shape(), &mut rng, 1.0))
        .collect();
    let pairs: Vec<_> = pass.outputs.iter().copied().zip(seeds.iter().cloned()).collect();
    sess.tape.backward_many(&pairs)?;
    let Session { tape, masks } = sess;
    let masks = masks.recorded();

    let mut samples = Vec::new();
    for (k, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(pass.inputs[k]);
        let idx: Vec<usize> = (0..opts.input_samples.min(x.len())).map(|_| rng.below(x.len())).collect();
        let numeric = finite_diff_at(
            |probe| {
                let mut ins = inputs.to_vec();
                ins[k] = probe.clone();
                probe_loss(graph, &ins, &seeds, &masks)
            },
            x,
            &idx,
            opts.step,
        )?;
        for (&i, n) in idx.iter().zip(numeric) {
            let a = analytic.data()[i];
            samples.push(GradSample {
                target: format!("input{k}"),
                index: i,
                analytic: a,
                numeric: n,
                rel_err: relative_error(a, n),
            });
        }
    }

    let names: Vec<String> = graph.params.keys().cloned().collect();
    if !names.is_empty() {
        let mut probe_graph = graph.clone();
        for _ in 0..opts.param_samples {
            let name = &names[rng.below(names.len())];
            let len = graph.params[name].len();
            let i = rng.below(len);
            let a = tape.grad(pass.params[name]).data()[i];
            let orig = graph.params[name].data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                probe_graph.param_mut(name)?.data_mut()[i] = v;
                probe_loss(&probe_graph, inputs, &seeds, &masks)
            };
            let fp = eval(orig + opts.step)?;
            let fm = eval(orig - opts.step)?;
            eval(orig)?;
            let n = (fp - fm) / (2.0 * opts.step);
            samples.push(GradSample {
                target: name.clone(),
                index: i,
                analytic: a,
                numeric: n,
                rel_err: relative_error(a, n),
            });
        }
    }

    let max_rel_err = samples.iter().map(|s| s.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err <= opts.tol,
        max_rel_err,
        tol: opts.tol,
        samples,
    })
}

/// Blocks with a ready-made gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradCase {
    Akdc,
    Makdf,
    C3k2,
    Rau,
    Sba,
    Sru,
    Cru,
    Head,
    Full,
}

impl GradCase {
    pub const ALL: [GradCase; 9] = [
        GradCase::Akdc,
        GradCase::Makdf,
        GradCase::C3k2,
        GradCase::Rau,
        GradCase::Sba,
        GradCase::Sru,
        GradCase::Cru,
        GradCase::Head,
        GradCase::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradCase::Akdc => "akdc",
            GradCase::Makdf => "makdf",
            GradCase::C3k2 => "c3k2",
            GradCase::Rau => "rau",
            GradCase::Sba => "sba",
            GradCase::Sru => "sru",
            GradCase::Cru => "cru",
            GradCase::Head => "head",
            GradCase::Full => "full",
        }
    }

    /// Graph with seeded random parameters and matching batch-2 inputs.
    ///
    /// Block inputs are `(2, 12k, 8, 8)`, with deeper operands at half
    /// resolution; the full model takes `(2, 3, 32, 32)`.
    pub fn instance(self, seed: u64) -> Result<(Graph, Vec<Tensor>)> {
        use crate::blocks::{AkdcConfig, C3k2Config, MakdfConfig};
        use crate::head::{CruConfig, DetectHeadConfig, SruConfig};
        use crate::model::{Model, ModelConfig, Variant};
        use crate::neck::{RauConfig, SbaConfig};

        let mut graph = match self {
            GradCase::Akdc => AkdcConfig::new(12, 3)?.graph(seed)?,
            GradCase::Makdf => MakdfConfig { channels: 12 }.graph(seed)?,
            GradCase::C3k2 => C3k2Config { c_in: 12, c_out: 24, n: 1, makdf: true }.graph(seed)?,
            GradCase::Rau => RauConfig { c1: 12, c2: 24, d: 12 }.graph(seed)?,
            GradCase::Sba => SbaConfig { c_high: 24, c_low: 12, d: 12, d_out: 12 }.graph(seed)?,
            GradCase::Sru => SruConfig::new(12).graph(seed)?,
            GradCase::Cru => CruConfig::new(24).graph(seed)?,
            GradCase::Head => DetectHeadConfig {
                channels: [24, 24, 24],
                num_classes: 2,
                scconv: true,
                threshold: crate::head::DEFAULT_GATE_THRESHOLD,
            }
            .graph(seed)?,
            GradCase::Full => {
                let cfg = ModelConfig {
                    widths: [24, 24, 48, 48],
                    depth: 1,
                    num_classes: 2,
                    input_size: (32, 32),
                    variant: Variant::Mrs,
                    threshold: crate::head::DEFAULT_GATE_THRESHOLD,
                };
                Model::build(&cfg, seed)?.graph
            }
        };
        if self != GradCase::Full {
            crate::graph::randomize_params(&mut graph, seed.wrapping_add(100), 0.3);
        }
        let hw: Vec<(usize, usize)> = match self {
            GradCase::Rau => vec![(8, 8), (4, 4)],
            GradCase::Sba => vec![(4, 4), (8, 8)],
            GradCase::Head => vec![(8, 8), (4, 4), (2, 2)],
            GradCase::Full => vec![(32, 32)],
            _ => vec![(8, 8)],
        };
        let mut rng = SplitMix64::new(seed.wrapping_mul(0x9E37_79B9).wrapping_add(7));
        let inputs = crate::graph::random_inputs(&graph, 2, &hw, &mut rng);
        Ok((graph, inputs))
    }

    pub fn run(self, seed: u64, tol: f64) -> Result<GradCheckReport> {
        let (graph, inputs) = self.instance(seed)?;
        check_graph(&graph, &inputs, &GradCheckOptions { seed, tol, ..Default::default() })
    }
}

impl std::str::FromStr for GradCase {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        GradCase::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| crate::error::Error::invalid("gradcheck", format!("unknown block `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::new([1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, FD_STEP).unwrap();
        for (a, b) in g.data().iter().zip(x.data()) {
            assert!((a - 2.0 * b).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let x = Tensor::zeros([1, 1, 1, 1]);
        let g = finite_diff_grad(|t| Ok(crate::ops::sigmoid(t.data()[0])), &x, FD_STEP).unwrap();
        assert!((g.data()[0] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 2.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-7) - 1e-4).abs() < 1e-15);
    }
}
