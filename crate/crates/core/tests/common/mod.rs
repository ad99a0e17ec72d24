//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use mcnet_core::metrics::RocCurve;

/// Exact-partials summation (Shewchuk), the reference for entropy sums.
pub fn fsum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    partials.iter().sum()
}

pub fn h(b: f64) -> f64 {
    if b > 0.0 {
        -b * b.log2()
    } else {
        0.0
    }
}

/// Per-pixel entropy for symmetric change probability `b`.
pub fn sym_entropy(b: f64) -> f64 {
    2.0 * h(b) + h(1.0 - 2.0 * b)
}

/// Closed-form inversion for a constant cost: find the per-direction
/// change probability with the requested entropy, then invert the Gibbs
/// form `b = e / (1 + 2e)`, `e = exp(-lambda c)`.
pub fn constant_cost_lambda(c: f64, payload: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0 / 3.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sym_entropy(mid) < payload {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let b = 0.5 * (lo + hi);
    -(b / (1.0 - 2.0 * b)).ln() / c
}

/// `min over tau of (FA * pos + MD * neg)` by trying every midpoint
/// threshold and both infinities, returned as the exact fraction
/// `(numerator, 2 * neg * pos)`.
pub fn pe_bruteforce(scores: &[f64], labels: &[u8]) -> (usize, usize) {
    let neg = labels.iter().filter(|&&l| l == 0).count();
    let pos = labels.len() - neg;
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut taus = vec![f64::NEG_INFINITY, f64::INFINITY];
    taus.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    let mut best = usize::MAX;
    for tau in taus {
        let mut fa = 0;
        let mut md = 0;
        for (&s, &l) in scores.iter().zip(labels) {
            if l == 0 && s > tau {
                fa += 1;
            }
            if l == 1 && s <= tau {
                md += 1;
            }
        }
        best = best.min(fa * pos + md * neg);
    }
    (best, 2 * neg * pos)
}

/// Mann-Whitney statistic normalized to [0, 1], ties counting one half.
pub fn auc_mann_whitney(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut np, mut nn) = (0.0, 0usize, 0usize);
    for (i, (&sp, &lp)) in scores.iter().zip(labels).enumerate() {
        if lp != 1 {
            nn += 1;
            continue;
        }
        np += 1;
        for (j, (&sn, &ln)) in scores.iter().zip(labels).enumerate() {
            if ln == 0 && i != j {
                wins += if sp > sn {
                    1.0
                } else if sp == sn {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / (np * nn) as f64
}

/// Weighted ROC area by composite Simpson integration of
/// `W(tpr(fpr))`, with `W(t) = w_low * min(t, 0.4) + w_high * max(t - 0.4, 0)`,
/// normalized by `W(1)`.
pub fn wauc_numeric(curve: &RocCurve, w_low: f64, w_high: f64) -> f64 {
    let weight = |t: f64| w_low * t.min(0.4) + w_high * (t - 0.4).max(0.0);
    let n = 2000;
    let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let mut total = 0.0;
    for seg in curve.points.windows(2) {
        let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
        let dx = x1 - x0;
        if dx <= 0.0 {
            continue;
        }
        let y = |t: f64| y0 + (y1 - y0) * t;
        let f = |t: f64| weight(y(t));
        // split where the weight has its kink so each panel is smooth
        let mut cuts = vec![0.0, 1.0];
        if y1 != y0 {
            let t = (0.4 - y0) / (y1 - y0);
            if t > 0.0 && t < 1.0 {
                cuts.insert(1, t);
            }
        }
        total += dx * cuts.windows(2).map(|c| simpson(&f, c[0], c[1])).sum::<f64>();
    }
    total / weight(1.0)
}
