//! Detection metrics: IoU, greedy matching, PR curves, AP and mAP.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type BBox = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_id: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthRecord {
    pub image_id: String,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

fn check_box(b: &BBox) -> std::result::Result<(), String> {
    if b.iter().any(|v| !v.is_finite()) {
        return Err("box has non-finite coordinates".into());
    }
    if !(b[0] < b[2] && b[1] < b[3]) {
        return Err(format!("box {:?} is not ordered as x1<x2, y1<y2", b));
    }
    Ok(())
}

impl DetectionRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        check_box(&self.bbox)
    }
}

impl GroundTruthRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        check_box(&self.bbox)
    }
}

fn area(b: &BBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection over union; zero whenever either box has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (aa, ab) = (area(a), area(b));
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    inter / (aa + ab - inter)
}

/// Prediction indices sorted by descending score; equal scores keep input order.
fn score_order(preds: &[&DetectionRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| preds[j].score.total_cmp(&preds[i].score));
    order
}

/// Greedy matching within one class. Returns `(order, is_tp)` where
/// `is_tp[k]` labels prediction `order[k]`.
///
/// Each prediction, in descending score order, takes the unmatched
/// ground truth of the same image with the highest IoU (lowest index on
/// ties) if that IoU reaches `iou_thresh`.
pub fn match_predictions(
    preds: &[&DetectionRecord],
    gts: &[&GroundTruthRecord],
    iou_thresh: f64,
) -> (Vec<usize>, Vec<bool>) {
    let order = score_order(preds);
    let mut used = vec![false; gts.len()];
    let labels = order
        .iter()
        .map(|&pi| {
            let p = preds[pi];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] || g.image_id != p.image_id || g.class_id != p.class_id {
                    continue;
                }
                let v = iou(&p.bbox, &g.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, v)) if v >= iou_thresh => {
                    used[gi] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    (order, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub score: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Cumulative precision/recall at every score cut, highest score first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub num_gt: usize,
    pub points: Vec<PrPoint>,
}

pub fn pr_curve(preds: &[&DetectionRecord], gts: &[&GroundTruthRecord], iou_thresh: f64) -> PrCurve {
    let (order, labels) = match_predictions(preds, gts, iou_thresh);
    let num_gt = gts.len();
    let (mut tp, mut fp) = (0, 0);
    let points = order
        .iter()
        .zip(labels)
        .map(|(&pi, is_tp)| {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                score: preds[pi].score,
                tp,
                fp,
                fn_: num_gt - tp,
                precision: tp as f64 / (tp + fp) as f64,
                recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
            }
        })
        .collect();
    PrCurve { num_gt, points }
}

/// Precision envelope: `env[k] = max_{j >= k} precision[j]`.
pub fn precision_envelope(curve: &PrCurve) -> Vec<f64> {
    let mut env: Vec<f64> = curve.points.iter().map(|p| p.precision).collect();
    for k in (0..env.len().saturating_sub(1)).rev() {
        env[k] = env[k].max(env[k + 1]);
    }
    env
}

/// All-point interpolated AP: exact area under the precision envelope.
/// `None` when the class has no ground truth.
pub fn average_precision(curve: &PrCurve) -> Option<f64> {
    if curve.num_gt == 0 {
        return None;
    }
    let env = precision_envelope(curve);
    let mut prev_r = 0.0;
    let mut ap = 0.0;
    for (p, e) in curve.points.iter().zip(env) {
        ap += (p.recall - prev_r) * e;
        prev_r = p.recall;
    }
    Some(ap)
}

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub num_gt: usize,
    pub num_pred: usize,
    /// Precision and recall over all predictions at the first threshold.
    pub precision: f64,
    pub recall: f64,
    /// AP at each threshold, in threshold order.
    pub ap: Vec<f64>,
    /// Mean of `ap`.
    pub ap_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassMetrics>,
    /// Classes with predictions but no ground truth; left out of every mean.
    pub excluded_classes: Vec<usize>,
    /// mAP at each threshold.
    pub map_per_threshold: Vec<f64>,
    /// Mean over thresholds of `map_per_threshold`.
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Per-class AP over `thresholds` and the class-mean mAP.
pub fn mean_ap(preds: &[DetectionRecord], gts: &[GroundTruthRecord], thresholds: &[f64]) -> Result<MapReport> {
    if thresholds.is_empty() {
        return Err(Error::invalid("mean_ap", "no IoU thresholds"));
    }
    if gts.is_empty() {
        return Err(Error::invalid("mean_ap", "no ground truth records"));
    }
    let gt_classes: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
    let pred_classes: BTreeSet<usize> = preds.iter().map(|p| p.class_id).collect();
    let excluded_classes: Vec<usize> = pred_classes.difference(&gt_classes).copied().collect();

    let mut by_class_p: BTreeMap<usize, Vec<&DetectionRecord>> = BTreeMap::new();
    for p in preds {
        by_class_p.entry(p.class_id).or_default().push(p);
    }
    let mut by_class_g: BTreeMap<usize, Vec<&GroundTruthRecord>> = BTreeMap::new();
    for g in gts {
        by_class_g.entry(g.class_id).or_default().push(g);
    }

    let mut classes = Vec::new();
    for &c in &gt_classes {
        let ps = by_class_p.remove(&c).unwrap_or_default();
        let gs = &by_class_g[&c];
        let curves: Vec<PrCurve> = thresholds.iter().map(|&t| pr_curve(&ps, gs, t)).collect();
        let ap: Vec<f64> = curves.iter().map(|cv| average_precision(cv).expect("class has ground truth")).collect();
        let (precision, recall) = curves[0]
            .points
            .last()
            .map(|p| (p.precision, p.recall))
            .unwrap_or((0.0, 0.0));
        classes.push(ClassMetrics {
            class_id: c,
            num_gt: gs.len(),
            num_pred: ps.len(),
            precision,
            recall,
            ap_mean: ap.iter().sum::<f64>() / ap.len() as f64,
            ap,
        });
    }
    let n = classes.len() as f64;
    let map_per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|t| classes.iter().map(|c| c.ap[t]).sum::<f64>() / n)
        .collect();
    Ok(MapReport {
        thresholds: thresholds.to_vec(),
        map: map_per_threshold.iter().sum::<f64>() / map_per_threshold.len() as f64,
        map_per_threshold,
        precision: classes.iter().map(|c| c.precision).sum::<f64>() / n,
        recall: classes.iter().map(|c| c.recall).sum::<f64>() / n,
        excluded_classes,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(img: &str, c: usize, b: BBox) -> GroundTruthRecord {
        GroundTruthRecord { image_id: img.into(), class_id: c, bbox: b }
    }
    fn det(img: &str, c: usize, s: f64, b: BBox) -> DetectionRecord {
        DetectionRecord { image_id: img.into(), class_id: c, score: s, bbox: b }
    }

    #[test]
    fn iou_fixtures() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[5.0, 5.0, 6.0, 6.0]), 0.0);
        assert_eq!(iou(&a, &[1.0, 0.0, 3.0, 2.0]), 1.0 / 3.0);
        assert_eq!(iou(&a, &[1.0, 1.0, 1.0, 3.0]), 0.0);
    }

    #[test]
    fn two_preds_one_gt() {
        let g = gt("i", 0, [0.0, 0.0, 4.0, 4.0]);
        let p1 = det("i", 0, 0.6, [0.0, 0.0, 4.0, 4.0]);
        let p2 = det("i", 0, 0.9, [0.0, 0.0, 4.0, 4.2]);
        let (order, labels) = match_predictions(&[&p1, &p2], &[&g], 0.5);
        assert_eq!(order, vec![1, 0]);
        assert_eq!(labels, vec![true, false]);
    }

    #[test]
    fn three_pred_fixture() {
        let gts = [gt("i", 0, [0.0, 0.0, 10.0, 10.0]), gt("i", 0, [20.0, 20.0, 30.0, 30.0])];
        let preds = [
            det("i", 0, 0.9, [0.0, 0.0, 10.0, 10.0]),
            det("i", 0, 0.8, [50.0, 50.0, 60.0, 60.0]),
            det("i", 0, 0.7, [20.0, 20.0, 30.0, 30.0]),
        ];
        let p: Vec<_> = preds.iter().collect();
        let g: Vec<_> = gts.iter().collect();
        let (_, labels) = match_predictions(&p, &g, 0.5);
        assert_eq!(labels, vec![true, false, true]);
        let ap = average_precision(&pr_curve(&p, &g, 0.5)).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_ap_cases() {
        let g = gt("i", 0, [0.0, 0.0, 1.0, 1.0]);
        let perfect = det("i", 0, 0.5, [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(average_precision(&pr_curve(&[&perfect], &[&g], 0.5)), Some(1.0));
        let miss = det("i", 0, 0.5, [3.0, 3.0, 4.0, 4.0]);
        assert_eq!(average_precision(&pr_curve(&[&miss], &[&g], 0.5)), Some(0.0));
        assert_eq!(average_precision(&pr_curve(&[&miss], &[], 0.5)), None);
    }

    #[test]
    fn map_over_classes() {
        let gts = vec![gt("i", 0, [0.0, 0.0, 1.0, 1.0]), gt("i", 1, [0.0, 0.0, 1.0, 1.0]), gt("i", 1, [5.0, 5.0, 6.0, 6.0])];
        let preds = vec![
            det("i", 0, 0.9, [0.0, 0.0, 1.0, 1.0]),
            det("i", 1, 0.9, [0.0, 0.0, 1.0, 1.0]),
            det("i", 7, 0.9, [0.0, 0.0, 1.0, 1.0]),
        ];
        let r = mean_ap(&preds, &gts, &[0.5]).unwrap();
        assert_eq!(r.classes[0].ap, vec![1.0]);
        assert_eq!(r.classes[1].ap, vec![0.5]);
        assert!((r.map - 0.75).abs() < 1e-15);
        assert_eq!(r.excluded_classes, vec![7]);
        assert!(mean_ap(&preds, &[], &[0.5]).is_err());
        assert!(mean_ap(&preds, &gts, &[]).is_err());
    }

    #[test]
    fn ten_coco_thresholds() {
        let t = coco_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[9], 0.95);
    }
}
