//! Brute-force metric references shared by the test targets.

use fasq_core::evalkit::ScoreSet;

pub fn auc_oracle(s: &ScoreSet) -> f64 {
    let mut credit = 0.0;
    let mut pairs = 0.0;
    for (i, &a) in s.scores.iter().enumerate() {
        for (j, &b) in s.scores.iter().enumerate() {
            if s.labels[i] && !s.labels[j] {
                pairs += 1.0;
                credit += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    credit / pairs
}

pub fn rates(s: &ScoreSet, t: f64) -> (usize, usize, usize, usize) {
    let p = s.labels.iter().filter(|&&l| l).count();
    let n = s.labels.len() - p;
    let fa = s.scores.iter().zip(&s.labels).filter(|(&x, &l)| l && x < t).count();
    let fr = s.scores.iter().zip(&s.labels).filter(|(&x, &l)| !l && x >= t).count();
    (fa, fr, p, n)
}

/// Exhaustive EER sweep: every observed score and every midpoint of two distinct scores.
pub fn eer_oracle(s: &ScoreSet) -> (f64, f64) {
    let mut cands: Vec<f64> = s.scores.clone();
    for &a in &s.scores {
        for &b in &s.scores {
            if a < b && !s.scores.iter().any(|&c| a < c && c < b) {
                cands.push(a + (b - a) / 2.0);
            }
        }
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for t in cands {
        let (fa, fr, p, n) = rates(s, t);
        // exact rational comparison via cross-multiplication
        let gap = (fa as i64 * n as i64 - fr as i64 * p as i64).abs() as f64;
        let sum = (fa * n + fr * p) as f64;
        let key = (gap, sum, t);
        let replace = match best {
            None => true,
            Some((g, su, bt)) => key.0 < g || (key.0 == g && (key.1 < su || (key.1 == su && t < bt))),
        };
        if replace {
            best = Some(key);
        }
    }
    let t = best.unwrap().2;
    let (fa, fr, p, n) = rates(s, t);
    (t, (fa as f64 / p as f64 + fr as f64 / n as f64) / 2.0)
}

pub fn fixed_oracle(s: &ScoreSet, t: f64) -> f64 {
    let (fa, fr, p, n) = rates(s, t);
    (fa as f64 / p as f64 + fr as f64 / n as f64) / 2.0
}

/// Step-mode TPR: best TPR over every threshold (observed scores and +inf) with FPR ≤ target.
pub fn tpr_oracle(s: &ScoreSet, target: f64) -> f64 {
    let p = s.labels.iter().filter(|&&l| l).count();
    let n = s.labels.len() - p;
    let mut best = 0.0f64;
    for t in s.scores.iter().copied().chain([f64::INFINITY]) {
        let tp = s.scores.iter().zip(&s.labels).filter(|(&x, &l)| l && x >= t).count();
        let fp = s.scores.iter().zip(&s.labels).filter(|(&x, &l)| !l && x >= t).count();
        if fp as f64 / n as f64 <= target {
            best = best.max(tp as f64 / p as f64);
        }
    }
    best
}
