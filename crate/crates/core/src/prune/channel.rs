use serde::{Deserialize, Serialize};

use super::deps::{analyze, ChannelAnalysis};
use super::lamp::lamp_scores;
use super::{PruneMode, PrunePlan};
use crate::error::{Error, Result};
use crate::graph::{ConvRole, Graph, NodeOp};
use crate::model::count_params;
use crate::tensor::Tensor;

/// Surviving channels of one dependency group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPlan {
    pub id: usize,
    pub producers: Vec<String>,
    pub channels: usize,
    pub granularity: usize,
    #[serde(default)]
    pub protected: Option<String>,
    pub kept: Vec<usize>,
}

/// Removable units ranked from least to most important.
#[derive(Debug, Clone)]
pub struct ChannelSelection {
    pub analysis: ChannelAnalysis,
    /// `(score, group, unit)`, ascending.
    pub ranked: Vec<(f64, usize, usize)>,
}

impl ChannelSelection {
    pub fn new(graph: &Graph) -> Result<Self> {
        let analysis = analyze(graph)?;
        let mut sq: Vec<Vec<f64>> = analysis.groups.iter().map(|g| vec![0.0; g.channels]).collect();
        for (id, node, conv) in graph.convs() {
            if conv.role != ConvRole::Free {
                continue;
            }
            let w = graph.param(&conv.weight)?.data();
            let bias = conv.bias.as_deref().map(|b| graph.param(b)).transpose()?;
            let per = w.len() / conv.c_out;
            for (row, &(g, q)) in analysis.layouts[id].iter().enumerate() {
                let mut s: f64 = w[row * per..(row + 1) * per].iter().map(|v| v * v).sum();
                if let Some(b) = bias {
                    s += b.data()[row] * b.data()[row];
                }
                sq[g][q] += s;
            }
            debug_assert_eq!(analysis.layouts[id].len(), conv.c_out, "{}", node.name);
        }
        let mut ranked = Vec::new();
        for (gi, g) in analysis.groups.iter().enumerate() {
            if g.protected.is_some() || g.units < 2 {
                continue;
            }
            let mags: Vec<f64> = (0..g.units)
                .map(|j| g.unit_positions(j).map(|q| sq[gi][q]).sum::<f64>().sqrt())
                .collect();
            let scores = lamp_scores(&mags)?;
            // The top unit of every group always survives.
            let n = scores.entries.len();
            for e in &scores.entries[..n - 1] {
                ranked.push((e.score, gi, e.index));
            }
        }
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        Ok(Self { analysis, ranked })
    }

    /// Keep-masks per group after removing the first `k` ranked units.
    pub fn keep_masks(&self, k: usize) -> Vec<Vec<bool>> {
        let mut keep: Vec<Vec<bool>> = self.analysis.groups.iter().map(|g| vec![true; g.channels]).collect();
        for &(_, gi, j) in &self.ranked[..k] {
            for q in self.analysis.groups[gi].unit_positions(j) {
                keep[gi][q] = false;
            }
        }
        keep
    }
}

fn filter_vec(t: &Tensor, keep: &[bool]) -> Result<Tensor> {
    let data: Vec<f64> = t.data().iter().zip(keep).filter(|(_, &k)| k).map(|(v, _)| *v).collect();
    Tensor::new([1, data.len(), 1, 1], data)
}

/// Rebuilds `graph` keeping only the channels whose group position is set in `keep`.
pub fn rebuild(graph: &Graph, analysis: &ChannelAnalysis, keep: &[Vec<bool>]) -> Result<Graph> {
    let km: Vec<Vec<bool>> = analysis
        .layouts
        .iter()
        .map(|l| l.iter().map(|&(g, q)| keep[g][q]).collect())
        .collect();
    let count = |id: usize| km[id].iter().filter(|&&k| k).count();
    let mut out = graph.clone();
    for (id, node) in out.nodes.iter_mut().enumerate() {
        let c = count(id);
        if c == 0 {
            return Err(Error::invalid("channel_prune", format!("node `{}` would lose every channel", node.name)));
        }
        node.channels = c;
        match &mut node.op {
            NodeOp::Conv(conv) => {
                let (kin, kout) = (&km[conv.input], &km[id]);
                let w = graph.param(&conv.weight)?;
                let [co, cig, kh, kw] = w.shape();
                let taps = kh * kw;
                let cog = co / conv.geom.groups;
                let mut data = Vec::new();
                let mut row_width = None;
                for o in (0..co).filter(|&o| kout[o]) {
                    let gi = o / cog;
                    let mut width = 0;
                    for i in (0..cig).filter(|&i| kin[gi * cig + i]) {
                        let base = (o * cig + i) * taps;
                        data.extend_from_slice(&w.data()[base..base + taps]);
                        width += 1;
                    }
                    if *row_width.get_or_insert(width) != width {
                        return Err(Error::invalid("channel_prune", format!("uneven group pruning in `{}`", node.name)));
                    }
                }
                let new_cin = count(conv.input);
                let new_cig = row_width.unwrap_or(0);
                let groups = if conv.role == ConvRole::Depthwise { c } else { conv.geom.groups };
                if new_cig * groups != new_cin || c % groups != 0 {
                    return Err(Error::invalid("channel_prune", format!("grouping broken in `{}`", node.name)));
                }
                out.params.insert(conv.weight.clone(), Tensor::new([c, new_cig, kh, kw], data)?);
                if let Some(b) = &conv.bias {
                    let t = filter_vec(graph.param(b)?, kout)?;
                    out.params.insert(b.clone(), t);
                }
                conv.c_in = new_cin;
                conv.c_out = c;
                conv.geom.groups = groups;
            }
            NodeOp::Sru(s) => {
                let t = filter_vec(graph.param(&s.gamma)?, &km[id])?;
                out.params.insert(s.gamma.clone(), t);
                let t = filter_vec(graph.param(&s.beta)?, &km[id])?;
                out.params.insert(s.beta.clone(), t);
                if c % 2 != 0 {
                    return Err(Error::invalid("channel_prune", format!("gate `{}` left with odd width", node.name)));
                }
            }
            NodeOp::Slice { input, start, len } => {
                let kin = &km[*input];
                let new_start = kin[..*start].iter().filter(|&&k| k).count();
                *start = new_start;
                *len = c;
            }
            NodeOp::SoftmaxBlocks { blocks, .. } => {
                if c % *blocks != 0 {
                    return Err(Error::invalid("channel_prune", format!("`{}` no longer splits into blocks", node.name)));
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

fn removed_fraction(graph: &Graph, sel: &ChannelSelection, k: usize, total: u64) -> Result<(Graph, f64)> {
    let g = rebuild(graph, &sel.analysis, &sel.keep_masks(k))?;
    let after = count_params(&g);
    Ok((g, (total - after) as f64 / total as f64))
}

/// Removes the lowest-ranked units until the removed share of all
/// parameters is as close to `rate` as the unit sizes allow.
pub fn channel_prune(graph: &Graph, rate: f64) -> Result<(Graph, PrunePlan)> {
    if !(0.0..0.95).contains(&rate) {
        return Err(Error::invalid("channel_prune", format!("rate {rate} outside [0, 0.95)")));
    }
    let sel = ChannelSelection::new(graph)?;
    let total = count_params(graph);
    // Removed parameters grow with k because removal sets are nested.
    let (mut lo, mut hi) = (0, sel.ranked.len());
    if rate > 0.0 {
        if removed_fraction(graph, &sel, hi, total)?.1 < rate {
            lo = hi;
        } else {
            while lo < hi {
                let mid = (lo + hi) / 2;
                if removed_fraction(graph, &sel, mid, total)?.1 >= rate {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
        }
    }
    let mut k = lo;
    let (mut pruned, mut achieved) = removed_fraction(graph, &sel, k, total)?;
    if k > 0 {
        let (g_prev, a_prev) = removed_fraction(graph, &sel, k - 1, total)?;
        if (rate - a_prev).abs() <= (achieved - rate).abs() {
            k -= 1;
            pruned = g_prev;
            achieved = a_prev;
        }
    }
    let note = (k == sel.ranked.len() && achieved < rate).then(|| {
        format!("rate {rate} is unreachable under the grouping constraints; closest achievable is {achieved:.4}")
    });
    let keep = sel.keep_masks(k);
    let groups = sel
        .analysis
        .groups
        .iter()
        .zip(&keep)
        .map(|(g, m)| GroupPlan {
            id: g.id,
            producers: g.producers.iter().map(|p| p.node.clone()).collect(),
            channels: g.channels,
            granularity: g.granularity,
            protected: g.protected.clone(),
            kept: (0..g.channels).filter(|&q| m[q]).collect(),
        })
        .collect();
    Ok((
        pruned.clone(),
        PrunePlan {
            mode: PruneMode::Channel,
            rate,
            achieved_rate: achieved,
            threshold: k.checked_sub(1).map(|i| sel.ranked[i].0),
            params_before: total,
            params_after: count_params(&pruned),
            flops_before: None,
            flops_after: None,
            note,
            layers: Vec::new(),
            groups,
        },
    ))
}
