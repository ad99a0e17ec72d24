//! Detector metrics over labeled scores: minimum detection error, ROC,
//! AUC and TPR-weighted AUC.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores are stego-class probabilities; label 1 is stego, 0 is cover.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Metrics(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Metrics("labels must be 0 or 1".into()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Metrics("NaN score".into()));
        }
        Ok(ScoreSet { scores, labels })
    }

    pub fn push(&mut self, score: f64, label: u8) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `(covers, stegos)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (self.labels.len() - pos, pos)
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let (neg, pos) = self.class_counts();
        if neg == 0 || pos == 0 {
            return Err(Error::Metrics(format!(
                "need both classes, got {neg} covers and {pos} stegos"
            )));
        }
        Ok((neg, pos))
    }

    /// Groups of tied scores in descending score order, as
    /// `(covers, stegos)` counts per group.
    fn descending_groups(&self) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].partial_cmp(&self.scores[a]).unwrap_or(Ordering::Equal));
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut last = f64::NAN;
        for i in idx {
            let s = self.scores[i];
            if groups.is_empty() || s != last {
                groups.push((0, 0));
                last = s;
            }
            let g = groups.last_mut().unwrap();
            if self.labels[i] == 1 {
                g.1 += 1;
            } else {
                g.0 += 1;
            }
        }
        groups
    }
}

/// `min over tau of (P_FA + P_MD) / 2`, deciding "stego" when `score > tau`
/// and sweeping tau over the midpoints between distinct scores plus both
/// infinities.
pub fn pe_min(s: &ScoreSet) -> Result<f64> {
    let (neg, pos) = s.require_both()?;
    // tau above every score: no alarms, every stego missed
    let (mut fa, mut md) = (0usize, pos);
    // scaled error 2 * neg * pos * P_E = fa * pos + md * neg
    let mut best = fa * pos + md * neg;
    for (c, st) in s.descending_groups() {
        fa += c;
        md -= st;
        best = best.min(fa * pos + md * neg);
    }
    Ok(best as f64 / (2 * neg * pos) as f64)
}

/// ROC points from the (0, 0) corner to (1, 1). Tied scores move both
/// coordinates at once, giving a diagonal segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

pub fn roc(s: &ScoreSet) -> Result<RocCurve> {
    let (neg, pos) = s.require_both()?;
    let mut points = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0, 0);
    for (c, st) in s.descending_groups() {
        fp += c;
        tp += st;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Exact area (Mann-Whitney form) straight from the scores.
pub fn auc_scores(s: &ScoreSet) -> Result<f64> {
    let (neg, pos) = s.require_both()?;
    // twice the area in units of 1 / (neg * pos)
    let (mut tp, mut twice) = (0usize, 0usize);
    for (c, st) in s.descending_groups() {
        twice += c * (2 * tp + st);
        tp += st;
    }
    Ok(twice as f64 / (2 * neg * pos) as f64)
}

/// Which TPR band gets the double weight.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaucOrientation {
    /// Weight 2 below TPR 0.4, weight 1 above.
    #[default]
    LowTpr,
    /// Weight 1 below TPR 0.4, weight 2 above.
    HighTpr,
}

pub const WAUC_SPLIT: f64 = 0.4;

/// Integral over FPR of `clamp(tpr - lo, 0, hi - lo)` for one straight
/// segment, split where it crosses `lo` or `hi`.
fn band_area(a: (f64, f64), b: (f64, f64), lo: f64, hi: f64) -> f64 {
    let dx = b.0 - a.0;
    if dx <= 0.0 {
        return 0.0;
    }
    let f = |y: f64| (y - lo).clamp(0.0, hi - lo);
    let mut ts = vec![0.0, 1.0];
    let dy = b.1 - a.1;
    if dy != 0.0 {
        for level in [lo, hi] {
            let t = (level - a.1) / dy;
            if t > 0.0 && t < 1.0 {
                ts.push(t);
            }
        }
    }
    ts.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ts.windows(2)
        .map(|w| {
            let (y0, y1) = (a.1 + dy * w[0], a.1 + dy * w[1]);
            dx * (w[1] - w[0]) * (f(y0) + f(y1)) / 2.0
        })
        .sum()
}

/// Area under the ROC curve with TPR bands `[0, 0.4]` and `[0.4, 1]`
/// weighted 2:1 (or 1:2), normalized so a perfect detector scores 1.
pub fn wauc(curve: &RocCurve, orientation: WaucOrientation) -> f64 {
    let bands = match orientation {
        WaucOrientation::LowTpr => [(0.0, WAUC_SPLIT, 2.0), (WAUC_SPLIT, 1.0, 1.0)],
        WaucOrientation::HighTpr => [(0.0, WAUC_SPLIT, 1.0), (WAUC_SPLIT, 1.0, 2.0)],
    };
    let norm: f64 = bands.iter().map(|&(lo, hi, w)| (hi - lo) * w).sum();
    let total: f64 = bands
        .iter()
        .map(|&(lo, hi, w)| {
            w * curve
                .points
                .windows(2)
                .map(|p| band_area(p[0], p[1], lo, hi))
                .sum::<f64>()
        })
        .sum();
    total / norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub pe: f64,
    pub auc: f64,
    pub wauc: f64,
    pub samples: usize,
    pub roc: RocCurve,
}

pub fn report(s: &ScoreSet, orientation: WaucOrientation) -> Result<Report> {
    let curve = roc(s)?;
    Ok(Report {
        pe: pe_min(s)?,
        auc: auc(&curve),
        wauc: wauc(&curve, orientation),
        samples: s.len(),
        roc: curve,
    })
}

impl Report {
    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\npe,{}\nauc,{}\nwauc,{}\nsamples,{}\n",
            self.pe, self.auc, self.wauc, self.samples
        )
    }

    /// `fpr,tpr` rows.
    pub fn roc_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for (x, y) in &self.roc.points {
            writeln!(s, "{x},{y}").unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_area_of_flat_and_crossing_segments() {
        assert!((band_area((0.0, 0.2), (1.0, 0.2), 0.0, 0.4) - 0.2).abs() < 1e-15);
        assert!((band_area((0.0, 0.0), (1.0, 1.0), 0.0, 0.4) - 0.32).abs() < 1e-15);
        assert_eq!(band_area((0.5, 0.0), (0.5, 1.0), 0.0, 0.4), 0.0);
    }
}
