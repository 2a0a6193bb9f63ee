//! LAMP scoring, global unstructured pruning and structured channel pruning.

mod channel;
mod deps;
mod lamp;
mod unstructured;

use serde::{Deserialize, Serialize};

pub use channel::{channel_prune, rebuild, ChannelSelection, GroupPlan};
pub use deps::{analyze, ChannelAnalysis, DependencyGroup, ProducerSlot};
pub use lamp::{channel_importance, lamp_scores, LampEntry, LampScores};
pub use unstructured::{apply_masks, prunable_layers, unstructured_plan, unstructured_prune, LayerMask};

use crate::error::{Error, Result};
use crate::model::{cost_report, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMode {
    Unstructured,
    Channel,
}

impl std::str::FromStr for PruneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unstructured" => Ok(Self::Unstructured),
            "channel" => Ok(Self::Channel),
            other => Err(Error::invalid("prune", format!("unknown mode `{other}`"))),
        }
    }
}

/// Audit record of one pruning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub mode: PruneMode,
    /// Requested rate.
    pub rate: f64,
    /// Unstructured: masked fraction of prunable weights.
    /// Channel: removed fraction of all parameters.
    pub achieved_rate: f64,
    /// Highest score among removed weights or units.
    pub threshold: Option<f64>,
    pub params_before: u64,
    pub params_after: u64,
    #[serde(default)]
    pub flops_before: Option<u64>,
    #[serde(default)]
    pub flops_after: Option<u64>,
    /// Set when the requested rate could not be met.
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerMask>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupPlan>,
}

/// Prunes a model and fills in FLOPs at its configured input size.
pub fn prune_model(model: &Model, rate: f64, mode: PruneMode) -> Result<(Model, PrunePlan)> {
    let (graph, mut plan) = match mode {
        PruneMode::Unstructured => unstructured_prune(&model.graph, rate)?,
        PruneMode::Channel => channel_prune(&model.graph, rate)?,
    };
    let size = model.config.input_size;
    plan.flops_before = Some(cost_report(&model.graph, size)?.total_flops);
    plan.flops_after = Some(cost_report(&graph, size)?.total_flops);
    Ok((
        Model {
            config: model.config.clone(),
            graph,
        },
        plan,
    ))
}
