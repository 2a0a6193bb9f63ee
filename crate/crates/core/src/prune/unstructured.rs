use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::lamp::lamp_scores;
use super::{PruneMode, PrunePlan};
use crate::error::{Error, Result};
use crate::graph::{ConvRole, Graph};
use crate::model::count_params;

/// Keep-mask of one weight tensor, serialized as a string of `0`/`1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    /// Parameter name of the weight tensor.
    pub param: String,
    pub total: usize,
    pub kept: usize,
    #[serde(serialize_with = "mask_to_str", deserialize_with = "mask_from_str")]
    pub mask: Vec<bool>,
}

fn mask_to_str<S: Serializer>(mask: &[bool], s: S) -> std::result::Result<S::Ok, S::Error> {
    let text: String = mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
    s.serialize_str(&text)
}

fn mask_from_str<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<bool>, D::Error> {
    let text = String::deserialize(d)?;
    text.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            other => Err(serde::de::Error::custom(format!("mask character `{other}`"))),
        })
        .collect()
}

/// Conv weights eligible for unstructured pruning (everything but branch-weight generators).
pub fn prunable_layers(graph: &Graph) -> Vec<String> {
    graph
        .convs()
        .filter(|(_, _, c)| c.role != ConvRole::WeightGen)
        .map(|(_, _, c)| c.weight.clone())
        .collect()
}

/// Global LAMP ranking: the `floor(rate * total)` lowest-scoring weights are
/// masked, ordered by `(score, layer, index)`, never emptying a layer.
pub fn unstructured_plan(graph: &Graph, rate: f64) -> Result<PrunePlan> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("unstructured_prune", format!("rate {rate} outside [0, 1)")));
    }
    let names = prunable_layers(graph);
    let mut pool: Vec<(f64, usize, usize)> = Vec::new();
    let mut sizes = Vec::with_capacity(names.len());
    for (l, name) in names.iter().enumerate() {
        let w = graph.param(name)?;
        sizes.push(w.len());
        for e in lamp_scores(w.data())?.entries {
            pool.push((e.score, l, e.index));
        }
    }
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let total = pool.len();
    let target = (rate * total as f64).floor() as usize;
    let mut masks: Vec<Vec<bool>> = sizes.iter().map(|&n| vec![true; n]).collect();
    let mut kept = sizes.clone();
    let mut removed = 0;
    let mut threshold = None;
    for &(score, l, i) in &pool {
        if removed == target {
            break;
        }
        if kept[l] <= 1 {
            continue;
        }
        masks[l][i] = false;
        kept[l] -= 1;
        removed += 1;
        threshold = Some(score);
    }
    let params_before = count_params(graph);
    let note = (removed < target).then(|| format!("only {removed} of {target} weights could be masked"));
    Ok(PrunePlan {
        mode: PruneMode::Unstructured,
        rate,
        achieved_rate: if total == 0 { 0.0 } else { removed as f64 / total as f64 },
        threshold,
        params_before,
        params_after: params_before - removed as u64,
        flops_before: None,
        flops_after: None,
        note,
        layers: names
            .into_iter()
            .zip(masks)
            .zip(kept)
            .map(|((param, mask), kept)| LayerMask {
                param,
                total: mask.len(),
                kept,
                mask,
            })
            .collect(),
        groups: Vec::new(),
    })
}

/// Zeroes every masked weight.
pub fn apply_masks(graph: &mut Graph, plan: &PrunePlan) -> Result<()> {
    for layer in &plan.layers {
        let w = graph.param_mut(&layer.param)?;
        if w.len() != layer.mask.len() {
            return Err(Error::shape("apply_masks", format!("mask for `{}` has wrong length", layer.param)));
        }
        for (v, &keep) in w.data_mut().iter_mut().zip(&layer.mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

pub fn unstructured_prune(graph: &Graph, rate: f64) -> Result<(Graph, PrunePlan)> {
    let plan = unstructured_plan(graph, rate)?;
    let mut out = graph.clone();
    apply_masks(&mut out, &plan)?;
    Ok((out, plan))
}
