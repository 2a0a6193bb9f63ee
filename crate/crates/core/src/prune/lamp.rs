//! Layer-adaptive magnitude scores.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LampEntry {
    /// Position in the original weight array.
    pub index: usize,
    pub magnitude: f64,
    pub score: f64,
}

/// Scores of one layer, sorted ascending by magnitude (ties by index).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LampScores {
    pub entries: Vec<LampEntry>,
}

impl LampScores {
    /// Scores laid out in original weight order.
    pub fn by_index(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.entries.len()];
        for e in &self.entries {
            out[e.index] = e.score;
        }
        out
    }
}

/// `score(u) = w_u^2 / sum_{v >= u} w_v^2` over the ascending-magnitude order.
///
/// The largest weight scores exactly 1. Entries whose remaining suffix is all
/// zeros score 0, apart from the last one.
pub fn lamp_scores(weights: &[f64]) -> Result<LampScores> {
    if weights.is_empty() {
        return Err(Error::invalid("lamp_scores", "empty layer"));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite { op: "lamp_scores" });
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[a].abs().total_cmp(&weights[b].abs()).then(a.cmp(&b)));
    let sq: Vec<f64> = order.iter().map(|&i| weights[i] * weights[i]).collect();
    let mut suffix = vec![0.0; sq.len()];
    let mut acc = 0.0;
    for k in (0..sq.len()).rev() {
        acc += sq[k];
        suffix[k] = acc;
    }
    let last = sq.len() - 1;
    let entries = order
        .iter()
        .enumerate()
        .map(|(k, &i)| LampEntry {
            index: i,
            magnitude: weights[i].abs(),
            score: if k == last {
                1.0
            } else if suffix[k] > 0.0 {
                sq[k] / suffix[k]
            } else {
                0.0
            },
        })
        .collect();
    Ok(LampScores { entries })
}

/// Per-output-channel magnitude `sqrt(sum w^2 + b^2)` of a conv weight
/// `(c_out, ...)`, then LAMP over those magnitudes; returned in channel order.
pub fn channel_importance(weight: &[f64], bias: Option<&[f64]>, c_out: usize) -> Result<Vec<f64>> {
    if c_out == 0 || weight.len() % c_out != 0 {
        return Err(Error::invalid("channel_importance", "weight length is not a multiple of c_out"));
    }
    let per = weight.len() / c_out;
    let mags: Vec<f64> = (0..c_out)
        .map(|c| {
            let w: f64 = weight[c * per..(c + 1) * per].iter().map(|v| v * v).sum();
            let b = bias.map_or(0.0, |b| b[c] * b[c]);
            (w + b).sqrt()
        })
        .collect();
    Ok(lamp_scores(&mags)?.by_index())
}
