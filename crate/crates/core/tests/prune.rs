use mrs_core::graph::BlockKind;
use mrs_core::prune::{analyze, channel_prune, prune_model, unstructured_prune, PruneMode, PrunePlan};
use mrs_core::{Model, ModelConfig, SplitMix64, Tensor, Variant};

fn reference() -> Model {
    Model::build(&ModelConfig::reference(Variant::Mrs), 0).unwrap()
}

#[test]
fn zero_rate_is_identity() {
    let m = reference();
    let x = Tensor::randn(m.input_shape(1), &mut SplitMix64::new(0), 1.0);
    let want = m.forward(&x).unwrap();
    for mode in [PruneMode::Channel, PruneMode::Unstructured] {
        let (p, plan) = prune_model(&m, 0.0, mode).unwrap();
        assert_eq!(plan.params_after, plan.params_before);
        assert_eq!(p.graph, m.graph);
        assert_eq!(p.forward(&x).unwrap(), want);
    }
}

#[test]
fn unstructured_masks_exact_count() {
    let m = reference();
    let (g, plan) = unstructured_prune(&m.graph, 0.5).unwrap();
    let total: usize = plan.layers.iter().map(|l| l.total).sum();
    let masked: usize = plan.layers.iter().map(|l| l.total - l.kept).sum();
    assert_eq!(masked, total / 2);
    assert!(plan.layers.iter().all(|l| l.kept >= 1));
    let zeros: usize = plan
        .layers
        .iter()
        .map(|l| g.param(&l.param).unwrap().data().iter().filter(|v| **v == 0.0).count())
        .sum();
    assert!(zeros >= masked);
    assert!(!plan.layers.iter().any(|l| l.param.contains("weight_gen")));
}

#[test]
fn out_of_range_rates_fail() {
    let m = reference();
    assert!(channel_prune(&m.graph, 0.95).is_err());
    assert!(channel_prune(&m.graph, -0.1).is_err());
    assert!(unstructured_prune(&m.graph, 1.0).is_err());
}

#[test]
fn groups_cover_makdf_and_protect_outputs() {
    let m = reference();
    let a = analyze(&m.graph).unwrap();
    for blk in m.graph.blocks.iter().filter(|b| b.kind == BlockKind::Makdf) {
        let split = m.graph.nodes.iter().position(|n| n.name == format!("{}.slice", blk.path)).unwrap();
        let input = match &m.graph.nodes[split].op {
            mrs_core::graph::NodeOp::Slice { input, .. } => *input,
            _ => unreachable!(),
        };
        let g = &a.groups[a.layouts[input][0].0];
        assert_eq!(g.granularity % 3, 0, "{}", blk.path);
    }
    let preds: Vec<_> = a.groups.iter().filter(|g| g.producers.iter().any(|p| p.node.ends_with(".pred"))).collect();
    assert_eq!(preds.len(), 6);
    assert!(preds.iter().all(|g| g.protected.is_some()));
    assert!(a.groups.iter().all(|g| g.granularity * g.units == g.channels));
}

#[test]
fn plan_json_round_trip_and_units_removed_whole() {
    let m = reference();
    let (pruned, plan) = prune_model(&m, 0.3, PruneMode::Channel).unwrap();
    let back: PrunePlan = serde_json::from_str(&serde_json::to_string(&plan).unwrap()).unwrap();
    assert_eq!(back, plan);
    let a = analyze(&m.graph).unwrap();
    for (g, gp) in a.groups.iter().zip(&plan.groups) {
        let removed = g.channels - gp.kept.len();
        assert_eq!(removed % g.granularity, 0);
        assert!(!gp.kept.is_empty());
    }
    assert!(plan.flops_after.unwrap() < plan.flops_before.unwrap());
    assert_eq!(mrs_core::model::count_params(&pruned.graph), plan.params_after);
}

#[test]
fn baseline_also_prunes() {
    let m = Model::build(&ModelConfig::reference(Variant::Baseline), 0).unwrap();
    let (p, plan) = prune_model(&m, 0.5, PruneMode::Channel).unwrap();
    assert!((plan.achieved_rate - 0.5).abs() < 0.1);
    let x = Tensor::randn(m.input_shape(1), &mut SplitMix64::new(0), 1.0);
    assert!(p.forward(&x).unwrap().iter().all(Tensor::is_finite));
}
