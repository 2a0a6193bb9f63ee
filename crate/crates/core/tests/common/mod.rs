//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use mrs_core::evalkit::{DetectionRecord, GroundTruthRecord};
use mrs_core::Tensor;

/// LAMP score by direct definition: the denominator sums every weight that
/// sorts at or after `u` under (|w|, index).
pub fn lamp_brute(w: &[f64]) -> Vec<f64> {
    let key = |i: usize| (w[i].abs(), i);
    let n = w.len();
    let top = (0..n).max_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap()).unwrap();
    (0..n)
        .map(|u| {
            if u == top {
                return 1.0;
            }
            let den: f64 = (0..n).filter(|&v| key(v) >= key(u)).map(|v| w[v] * w[v]).sum();
            if den == 0.0 {
                0.0
            } else {
                w[u] * w[u] / den
            }
        })
        .collect()
}

/// Keep-masks from one global sort of all LAMP scores.
pub fn global_ranking_oracle(layers: &[Vec<f64>], rate: f64) -> Vec<Vec<bool>> {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (l, w) in layers.iter().enumerate() {
        for (i, s) in lamp_brute(w).into_iter().enumerate() {
            all.push((s, l, i));
        }
    }
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cut = (rate * all.len() as f64).floor() as usize;
    let mut keep: Vec<Vec<bool>> = layers.iter().map(|w| vec![true; w.len()]).collect();
    for &(_, l, i) in &all[..cut] {
        keep[l][i] = false;
    }
    keep
}

pub fn iou_brute(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    if area(a) == 0.0 || area(b) == 0.0 {
        return 0.0;
    }
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    ix * iy / (area(a) + area(b) - ix * iy)
}

/// AP of one class from every score cut: matches the top-k predictions
/// afresh for each k, then integrates the best precision reachable at or
/// beyond each recall step.
pub fn ap_all_cuts(preds: &[DetectionRecord], gts: &[GroundTruthRecord], class: usize, thr: f64) -> Option<f64> {
    let gts: Vec<&GroundTruthRecord> = gts.iter().filter(|g| g.class_id == class).collect();
    if gts.is_empty() {
        return None;
    }
    let mut ps: Vec<&DetectionRecord> = preds.iter().filter(|p| p.class_id == class).collect();
    ps.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut pr = Vec::new();
    for k in 1..=ps.len() {
        let mut used = vec![false; gts.len()];
        let mut tp = 0;
        for p in &ps[..k] {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] || g.image_id != p.image_id {
                    continue;
                }
                let v = iou_brute(&p.bbox, &g.bbox);
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, v)) = best {
                if v >= thr {
                    used[gi] = true;
                    tp += 1;
                }
            }
        }
        pr.push((tp as f64 / k as f64, tp as f64 / gts.len() as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &(_, r) in &pr {
        if r > prev {
            let best = pr.iter().filter(|&&(_, r2)| r2 >= r).map(|&(p, _)| p).fold(0.0, f64::max);
            ap += (r - prev) * best;
            prev = r;
        }
    }
    Some(ap)
}

/// Spatial reconstruction by scalar loops: per-channel normalisation,
/// scale-weighted sigmoid gate, threshold, cross-add of halves.
/// Returns `(output, w1)`.
pub fn sru_oracle(x: &Tensor, gamma: &[f64], beta: &[f64], t: f64, eps: f64) -> (Tensor, Tensor) {
    let [n, c, h, w] = x.shape();
    let sum_g: f64 = gamma.iter().sum();
    let mut w1 = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let mut mean = 0.0;
            for yy in 0..h {
                for xx in 0..w {
                    mean += x.at(b, ch, yy, xx);
                }
            }
            mean /= (h * w) as f64;
            let mut var = 0.0;
            for yy in 0..h {
                for xx in 0..w {
                    var += (x.at(b, ch, yy, xx) - mean).powi(2);
                }
            }
            var /= (h * w) as f64;
            for yy in 0..h {
                for xx in 0..w {
                    let norm = (x.at(b, ch, yy, xx) - mean) / (var + eps).sqrt();
                    let gn = gamma[ch] * norm + beta[ch];
                    let weight = gamma[ch] / sum_g;
                    let s = 1.0 / (1.0 + (-weight * gn).exp());
                    let i = x.index(b, ch, yy, xx);
                    w1.data_mut()[i] = if s >= t { 1.0 } else { 0.0 };
                }
            }
        }
    }
    let half = c / 2;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..half {
            for yy in 0..h {
                for xx in 0..w {
                    let (i, j) = (x.index(b, ch, yy, xx), x.index(b, ch + half, yy, xx));
                    let (a1, a2) = (w1.data()[i], w1.data()[j]);
                    let (xi, xj) = (x.data()[i], x.data()[j]);
                    out.data_mut()[i] = a1 * xi + (1.0 - a2) * xj;
                    out.data_mut()[j] = (1.0 - a1) * xi + a2 * xj;
                }
            }
        }
    }
    (out, w1)
}

pub fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.max_abs_diff(b) / scale
}
