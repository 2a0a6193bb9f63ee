mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{ap_all_cuts, global_ranking_oracle, rel_diff, sru_oracle};
use mrs_core::blocks::{AkdcConfig, MakdfConfig};
use mrs_core::evalkit::{
    average_precision, coco_thresholds, iou, mean_ap, pr_curve, DetectionRecord, GroundTruthRecord,
};
use mrs_core::gradcheck::GradCase;
use mrs_core::graph::{randomize_params, BlockKind, ConvRole, GraphBuilder};
use mrs_core::head::{sru_gate_mask, CruConfig, SruConfig};
use mrs_core::io::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, load_tensor, parse_records, save_checkpoint,
    save_tensor, tensor_from_bytes, tensor_to_bytes,
};
use mrs_core::ops::ConvGeometry;
use mrs_core::prune::{lamp_scores, prune_model, unstructured_prune, PruneMode};
use mrs_core::{Model, ModelConfig, SplitMix64, Tensor, Variant};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for case in GradCase::ALL {
        for seed in [1, 2, 3] {
            let r = case.run(seed, 1e-4).map_err(|e| e.to_string())?;
            ensure(r.passed, format!("{} seed {} max rel err {:.3e}", case.name(), seed, r.max_rel_err))?;
            worst = worst.max(r.max_rel_err);
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(120), format!("took {took:?}"))?;
    Ok(format!("9 cases x 3 seeds, worst rel err {worst:.2e}, {:.1}s", took.as_secs_f64()))
}

fn akdc_geometry() -> Outcome {
    for k in [1, 3, 5] {
        ensure(AkdcConfig::new(6, k).unwrap().m() == 3 * k + 2, "M formula")?;
    }
    let g = MakdfConfig { channels: 12 }.graph(0).map_err(|e| e.to_string())?;
    let mut ms = Vec::new();
    for (i, k) in [1usize, 3, 5].into_iter().enumerate() {
        let h = g.param(&format!("makdf.akdc{}.horizontal.weight", i + 1)).unwrap().shape();
        let v = g.param(&format!("makdf.akdc{}.vertical.weight", i + 1)).unwrap().shape();
        let s = g.param(&format!("makdf.akdc{}.square.weight", i + 1)).unwrap().shape();
        ensure(s[2..] == [k, k], "square kernel")?;
        ensure(h[2] == 1 && v[3] == 1 && h[3] == v[2], "band kernels")?;
        ms.push(h[3]);
    }
    ensure(ms == [5, 11, 17], format!("band lengths {ms:?}"))?;

    let mut worst: f64 = 0.0;
    let mut rng = SplitMix64::new(9);
    for seed in 0..5 {
        let c = 12;
        let mut g = AkdcConfig::new(c, 3).unwrap().graph(seed).unwrap();
        randomize_params(&mut g, seed + 50, 1.0);
        let x = Tensor::randn([2, c, 6, 6], &mut rng, 1.0);
        let vals = g.run_all(&[x]).unwrap();
        let w = &vals[g.node_id("akdc.softmax").unwrap()];
        for n in 0..2 {
            for ch in 0..c {
                let s: f64 = (0..3).map(|b| w.at(n, b * c + ch, 0, 0)).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    ensure(worst <= 1e-12, format!("branch weights deviate by {worst:e}"))?;
    Ok(format!("M = {ms:?}, max |sum w - 1| = {worst:.1e}"))
}

fn sru_conservation() -> Outcome {
    let mut rng = SplitMix64::new(31);
    let mut worst_oracle: f64 = 0.0;
    for t in [0.0, 0.4, 0.99] {
        for _ in 0..5 {
            let c = 12;
            let x = Tensor::randn([2, c, 5, 4], &mut rng, 2.0);
            let gamma: Vec<f64> = (0..c).map(|_| rng.uniform(0.1, 2.0)).collect();
            let beta: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
            let cfg = SruConfig { threshold: t, ..SruConfig::new(c) };
            let mut g = cfg.graph(0).unwrap();
            g.param_mut("sru.gate.gamma").unwrap().data_mut().copy_from_slice(&gamma);
            g.param_mut("sru.gate.beta").unwrap().data_mut().copy_from_slice(&beta);
            let y = g.run(std::slice::from_ref(&x)).unwrap().remove(0);

            let w1 = sru_gate_mask(&x, &gamma, &beta, t, cfg.eps).unwrap();
            let w2 = w1.map(|m| 1.0 - m);
            ensure(
                w1.data().iter().zip(w2.data()).all(|(a, b)| a + b == 1.0),
                "W1 + W2 != 1",
            )?;
            let drift = (y.sum() - x.sum()).abs();
            ensure(drift <= 1e-9 * x.len() as f64, format!("sum drift {drift:e} at t={t}"))?;
            if t == 0.0 {
                ensure(y == x, "t = 0 does not reproduce the input")?;
            }
            let (want, w1_oracle) = sru_oracle(&x, &gamma, &beta, t, cfg.eps);
            ensure(w1 == w1_oracle, "mask differs from oracle")?;
            worst_oracle = worst_oracle.max(y.max_abs_diff(&want));
        }
    }
    ensure(worst_oracle <= 1e-9, format!("oracle gap {worst_oracle:e}"))?;
    Ok(format!("t in {{0, 0.4, 0.99}}, oracle gap {worst_oracle:.1e}"))
}

fn cru_fusion() -> Outcome {
    let cfg = CruConfig::new(16);
    let w = cfg.widths().map_err(|e| e.to_string())?;
    let mut g = cfg.graph(3).unwrap();
    randomize_params(&mut g, 4, 0.5);
    let x = Tensor::randn([2, 16, 6, 6], &mut SplitMix64::new(5), 1.0);
    let vals = g.run_all(&[x]).unwrap();
    let y1 = &vals[g.node_id("cru.add").unwrap()];
    let y2 = &vals[g.node_id("cru.concat").unwrap()];
    ensure(y1.c() == 16 && y2.c() == 16, format!("Y1 {} / Y2 {} channels", y1.c(), y2.c()))?;
    let eta = &vals[g.node_id("cru.softmax").unwrap()];
    let mut worst: f64 = 0.0;
    for n in 0..2 {
        for c in 0..16 {
            worst = worst.max((eta.at(n, c, 0, 0) + eta.at(n, 16 + c, 0, 0) - 1.0).abs());
        }
    }
    ensure(worst <= 1e-12, format!("eta sum off by {worst:e}"))?;
    Ok(format!(
        "C=16: upper/lower squeezed {}/{}, Y1=Y2=16 channels, max |eta1+eta2-1| = {worst:.1e}",
        w.upper_sq, w.lower_sq
    ))
}

fn three_layer_net(seed: u64) -> mrs_core::Graph {
    let mut b = GraphBuilder::new(seed);
    let x = b.input(3);
    let a = b.conv("l1", x, 16, (3, 3), ConvGeometry::same(3, 3), true, ConvRole::Free).unwrap();
    let a = b.conv("l2", a, 32, (3, 3), ConvGeometry::same(3, 3), true, ConvRole::Free).unwrap();
    let a = b.conv("l3", a, 8, (1, 1), ConvGeometry::same(1, 1), true, ConvRole::Free).unwrap();
    b.finish(&[a])
}

fn lamp_correctness() -> Outcome {
    let s = lamp_scores(&[3.0, 1.0, 2.0]).unwrap().by_index();
    ensure(s == vec![1.0, 1.0 / 14.0, 4.0 / 13.0], format!("scores {s:?}"))?;

    let net = three_layer_net(11);
    let names = ["l1.weight", "l2.weight", "l3.weight"];
    let layers: Vec<Vec<f64>> = names.iter().map(|n| net.param(n).unwrap().data().to_vec()).collect();
    let total: usize = layers.iter().map(Vec::len).sum();
    ensure(total <= 10_000, "toy net too large")?;
    for w in &layers {
        let sc = lamp_scores(w).unwrap();
        ensure(sc.entries.last().unwrap().score == 1.0, "max score != 1")?;
        ensure(sc.entries.windows(2).all(|p| p[0].magnitude <= p[1].magnitude), "not sorted")?;
    }
    for rate in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let (_, plan) = unstructured_prune(&net, rate).unwrap();
        let oracle = global_ranking_oracle(&layers, rate);
        for (layer, want) in plan.layers.iter().zip(&oracle) {
            ensure(&layer.mask == want, format!("rate {rate}: `{}` differs from oracle", layer.param))?;
        }
        let masked: usize = plan.layers.iter().map(|l| l.total - l.kept).sum();
        ensure(masked == (rate * total as f64).floor() as usize, "masked count")?;

        let mut scaled = net.clone();
        for (n, k) in names.iter().zip([3.0, 0.25, 7.5]) {
            for v in scaled.param_mut(n).unwrap().data_mut() {
                *v *= k;
            }
        }
        let (_, plan_scaled) = unstructured_prune(&scaled, rate).unwrap();
        for (a, b) in plan.layers.iter().zip(&plan_scaled.layers) {
            ensure(a.mask == b.mask, format!("rate {rate}: scaling changed `{}`", a.param))?;
        }
    }
    Ok(format!("{total}-weight toy net matches the global-ranking oracle at 5 rates"))
}

fn pruning_sweep() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ref.mrsw");
    save_checkpoint(&path, &Model::build(&ModelConfig::reference(Variant::Mrs), 0).unwrap()).unwrap();
    let model = load_checkpoint(&path).unwrap();
    let x = Tensor::randn(model.input_shape(1), &mut SplitMix64::new(1), 1.0);
    let ref_shapes: Vec<_> = model.forward(&x).unwrap().iter().map(Tensor::shape).collect();
    let mut prev = (u64::MAX, u64::MAX);
    let mut at_half = 0.0;
    for i in 1..=9 {
        let rate = i as f64 / 10.0;
        let (pruned, plan) = prune_model(&model, rate, PruneMode::Channel).map_err(|e| e.to_string())?;
        let flops = plan.flops_after.unwrap();
        ensure(plan.params_after <= prev.0 && flops <= prev.1, format!("not monotone at {rate}"))?;
        prev = (plan.params_after, flops);
        let out = pruned.forward(&x).map_err(|e| e.to_string())?;
        ensure(out.iter().all(Tensor::is_finite), format!("non-finite output at {rate}"))?;
        let shapes: Vec<_> = out.iter().map(Tensor::shape).collect();
        ensure(shapes == ref_shapes, "head shapes changed")?;
        if i == 5 {
            at_half = 1.0 - plan.params_after as f64 / plan.params_before as f64;
        }
    }
    ensure((at_half - 0.5).abs() <= 0.10, format!("rate 0.5 removed {at_half:.3}"))?;
    let took = start.elapsed();
    ensure(took < Duration::from_secs(300), format!("took {took:?}"))?;
    Ok(format!("monotone over 0.1..0.9, rate 0.5 removes {:.1}% of params, {:.1}s", 100.0 * at_half, took.as_secs_f64()))
}

fn fixture_gt() -> Vec<GroundTruthRecord> {
    vec![
        GroundTruthRecord { image_id: "img".into(), class_id: 0, bbox: [0.0, 0.0, 10.0, 10.0] },
        GroundTruthRecord { image_id: "img".into(), class_id: 0, bbox: [20.0, 20.0, 30.0, 30.0] },
    ]
}

fn fixture_preds() -> Vec<DetectionRecord> {
    let d = |s: f64, b: [f64; 4]| DetectionRecord { image_id: "img".into(), class_id: 0, score: s, bbox: b };
    vec![d(0.9, [0.0, 0.0, 10.0, 10.0]), d(0.8, [50.0, 50.0, 60.0, 60.0]), d(0.7, [20.0, 20.0, 30.0, 30.0])]
}

fn random_case(rng: &mut SplitMix64) -> (Vec<DetectionRecord>, Vec<GroundTruthRecord>) {
    let rand_box = |rng: &mut SplitMix64| {
        let (x, y) = (rng.uniform(0.0, 20.0), rng.uniform(0.0, 20.0));
        [x, y, x + rng.uniform(2.0, 8.0), y + rng.uniform(2.0, 8.0)]
    };
    let images = ["a", "b"];
    let mut gts = Vec::new();
    for _ in 0..1 + rng.below(6) {
        gts.push(GroundTruthRecord {
            image_id: images[rng.below(2)].into(),
            class_id: rng.below(2),
            bbox: rand_box(rng),
        });
    }
    let mut preds = Vec::new();
    for _ in 0..rng.below(10) {
        let bbox = if rng.next_f64() < 0.5 && !gts.is_empty() {
            let g = &gts[rng.below(gts.len())];
            let j = rng.uniform(-1.0, 1.0);
            [g.bbox[0] + j, g.bbox[1], g.bbox[2] + j, g.bbox[3]]
        } else {
            rand_box(rng)
        };
        preds.push(DetectionRecord {
            image_id: images[rng.below(2)].into(),
            class_id: rng.below(2),
            score: (rng.below(1000) as f64 + 1.0) / 1001.0,
            bbox,
        });
    }
    (preds, gts)
}

fn metrics() -> Outcome {
    let (preds, gts) = (fixture_preds(), fixture_gt());
    let p: Vec<_> = preds.iter().collect();
    let g: Vec<_> = gts.iter().collect();
    let ap = average_precision(&pr_curve(&p, &g, 0.5)).unwrap();
    ensure((ap - 0.8333).abs() <= 1e-4, format!("fixture AP {ap}"))?;

    let a = [0.0, 0.0, 2.0, 2.0];
    ensure(iou(&a, &a) == 1.0, "identical boxes")?;
    ensure(iou(&a, &[3.0, 3.0, 4.0, 4.0]) == 0.0, "disjoint boxes")?;
    ensure(iou(&a, &[1.0, 0.0, 3.0, 2.0]) == 1.0 / 3.0, "half overlap")?;

    let th = coco_thresholds();
    ensure(th.len() == 10 && th[0] == 0.5 && (th[9] - 0.95).abs() < 1e-12, "threshold grid")?;
    let report = mean_ap(&preds, &gts, &th).unwrap();
    ensure(report.map_per_threshold.len() == 10, "mAP50:95 must average 10 thresholds")?;

    let mut rng = SplitMix64::new(2024);
    for case in 0..20 {
        let (preds, gts) = random_case(&mut rng);
        for thr in [0.5, 0.75] {
            let r = mean_ap(&preds, &gts, &[thr]).unwrap();
            for cm in &r.classes {
                let want = ap_all_cuts(&preds, &gts, cm.class_id, thr).unwrap();
                ensure(
                    (cm.ap[0] - want).abs() <= 1e-12,
                    format!("case {case} class {} thr {thr}: {} vs oracle {want}", cm.class_id, cm.ap[0]),
                )?;
            }
        }
    }
    Ok(format!("fixture AP {ap:.4}; 20 random cases match the all-cuts oracle"))
}

fn structural_walk() -> Outcome {
    let mrs = Model::build(&ModelConfig::reference(Variant::Mrs), 0).unwrap().graph;
    let base = Model::build(&ModelConfig::reference(Variant::Baseline), 0).unwrap().graph;
    let backbone = |g: &mrs_core::Graph, k: BlockKind| {
        g.blocks.iter().filter(|b| b.kind == k && b.path.starts_with("backbone.")).count()
    };
    ensure(backbone(&mrs, BlockKind::C3k2Makdf) == 4, "backbone C3k2_MAKDF stages")?;
    ensure(backbone(&mrs, BlockKind::C3k2) == 0, "plain C3k2 left in mrs backbone")?;
    ensure(backbone(&base, BlockKind::C3k2) == 4 && backbone(&base, BlockKind::C3k2Makdf) == 0, "baseline backbone")?;
    ensure(mrs.count_blocks(BlockKind::Rcfpn) == 1 && mrs.count_blocks(BlockKind::ConcatFpn) == 0, "RCFPN neck")?;
    ensure(base.count_blocks(BlockKind::ConcatFpn) == 1, "baseline neck")?;
    ensure(mrs.count_blocks(BlockKind::Sba) >= 2, "SBA units")?;
    ensure(mrs.count_blocks(BlockKind::ScDetect) == 1 && mrs.count_blocks(BlockKind::ScConv) == 3, "SC_Detect heads")?;
    ensure(base.count_blocks(BlockKind::ScConv) == 0 && base.count_blocks(BlockKind::PlainHead) == 1, "baseline head")?;
    ensure(mrs.count_blocks(BlockKind::Akdc) >= 1, "AKDC present")?;
    Ok(format!(
        "mrs: {} C3k2_MAKDF, {} SBA, {} AKDC, {} ScConv",
        mrs.count_blocks(BlockKind::C3k2Makdf),
        mrs.count_blocks(BlockKind::Sba),
        mrs.count_blocks(BlockKind::Akdc),
        mrs.count_blocks(BlockKind::ScConv)
    ))
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::build(&ModelConfig::reference(Variant::Mrs), 8).unwrap();
    let x = Tensor::randn(model.input_shape(2), &mut SplitMix64::new(3), 1.0);
    save_tensor(dir.path().join("x.mrst"), &x).unwrap();
    let x_back = load_tensor(dir.path().join("x.mrst")).unwrap();
    ensure(rel_diff(&x, &x_back) <= 1e-6, "tensor file")?;
    save_checkpoint(dir.path().join("m.mrsw"), &model).unwrap();
    let loaded = load_checkpoint(dir.path().join("m.mrsw")).unwrap();
    let a = model.forward(&x).unwrap();
    let b = loaded.forward(&x_back).unwrap();
    let worst = a.iter().zip(&b).map(|(a, b)| rel_diff(a, b)).fold(0.0, f64::max);
    ensure(worst <= 1e-6, format!("forward drift {worst:e}"))?;

    let bytes = checkpoint_to_bytes(&model).unwrap();
    let diag = |b: &[u8]| checkpoint_from_bytes(b).unwrap_err().to_string();
    ensure(diag(&bytes[..bytes.len() - 1]).contains("blob length"), "truncated blob")?;
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    ensure(diag(&bad).contains("magic"), "bad magic")?;
    let mut bad = bytes;
    bad[4] = 7;
    ensure(diag(&bad).contains("version"), "bad version")?;
    let t = tensor_to_bytes(&x);
    ensure(
        tensor_from_bytes(&t[..t.len() - 2]).unwrap_err().to_string().contains("payload length"),
        "truncated tensor",
    )?;
    let text = "{\"image_id\":\"a\",\"class_id\":0,\"score\":0.5,\"box\":[0,0,1,1]}\n{\"image_id\":\n{\"image_id\":\"a\",\"class_id\":0,\"score\":0.5,\"box\":[0,0,1,1]}\n";
    let err = parse_records::<DetectionRecord>(text, DetectionRecord::validate).unwrap_err().to_string();
    ensure(err.contains("line 2"), format!("record diagnostic: {err}"))?;
    Ok(format!("forward drift after f32 round trip {worst:.1e}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("AKDC geometry", akdc_geometry),
        ("SRU conservation", sru_conservation),
        ("CRU fusion", cru_fusion),
        ("LAMP correctness", lamp_correctness),
        ("pruning sweep", pruning_sweep),
        ("metrics", metrics),
        ("structural walk", structural_walk),
        ("round-trips", round_trips),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(why) => {
                println!("criterion {}: FAIL {name}: {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
