//! Anti-spoofing metrics (spoof is the positive class) and the multi-domain protocol.

use serde::{Deserialize, Serialize};

use crate::error::{reject, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::synthdata::Sample;
use crate::textproto::QuestionType;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    /// `true` = spoof.
    pub labels: Vec<bool>,
    pub domain_id: String,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>, domain_id: impl Into<String>) -> Result<Self> {
        if scores.len() != labels.len() {
            return reject(format!("{} scores but {} labels", scores.len(), labels.len()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return reject("scores must be finite");
        }
        Ok(Self { scores, labels, domain_id: domain_id.into() })
    }

    pub fn counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (pos, self.labels.len() - pos)
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let (p, n) = self.counts();
        if p == 0 || n == 0 {
            return reject(format!("domain `{}` needs both live and spoof samples ({p} spoof, {n} live)", self.domain_id));
        }
        Ok((p, n))
    }

    /// Sorted (score, is_spoof) pairs, ascending by score.
    fn sorted(&self) -> Vec<(f64, bool)> {
        let mut v: Vec<(f64, bool)> = self.scores.iter().copied().zip(self.labels.iter().copied()).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }
}

/// Area under the ROC curve; equal scores earn half credit.
pub fn auc(set: &ScoreSet) -> Result<f64> {
    let (p, n) = set.require_both()?;
    let v = set.sorted();
    // twice the concordance count, so half credits stay integral
    let mut twice: u128 = 0;
    let mut live_below: u128 = 0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        let (mut sp, mut lv) = (0u128, 0u128);
        while j < v.len() && v[j].0 == v[i].0 {
            if v[j].1 {
                sp += 1;
            } else {
                lv += 1;
            }
            j += 1;
        }
        twice += sp * (2 * live_below + lv);
        live_below += lv;
        i = j;
    }
    Ok(twice as f64 / (2.0 * p as f64 * n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "tau")]
pub enum HterPolicy {
    EerThreshold,
    Fixed(f64),
}

impl Default for HterPolicy {
    fn default() -> Self {
        Self::EerThreshold
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
}

/// Error counts at threshold `t` (spoof iff score ≥ t): spoof accepted as live, live rejected.
pub fn error_counts(set: &ScoreSet, t: f64) -> (usize, usize) {
    let mut fa = 0;
    let mut fr = 0;
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        if l && s < t {
            fa += 1;
        }
        if !l && s >= t {
            fr += 1;
        }
    }
    (fa, fr)
}

pub fn operating_point(fa: usize, fr: usize, p: usize, n: usize, threshold: f64) -> OperatingPoint {
    let far = fa as f64 / p as f64;
    let frr = fr as f64 / n as f64;
    OperatingPoint { threshold, far, frr, hter: (far + frr) / 2.0 }
}

/// Candidate thresholds: each distinct observed score and the midpoints between
/// neighbouring distinct scores, ascending.
pub fn candidate_thresholds(set: &ScoreSet) -> Vec<f64> {
    let mut s = set.scores.clone();
    s.sort_by(|a, b| a.total_cmp(b));
    s.dedup();
    let mut out = Vec::with_capacity(2 * s.len());
    for (i, &v) in s.iter().enumerate() {
        out.push(v);
        if let Some(&next) = s.get(i + 1) {
            out.push(v + (next - v) / 2.0);
        }
    }
    out
}

/// Operating point under the given policy. The EER policy minimises |FAR − FRR| over
/// the candidate thresholds, breaking ties by lower HTER and then lower threshold.
pub fn hter_point(set: &ScoreSet, policy: HterPolicy) -> Result<OperatingPoint> {
    let (p, n) = set.require_both()?;
    match policy {
        HterPolicy::Fixed(t) => {
            let (fa, fr) = error_counts(set, t);
            Ok(operating_point(fa, fr, p, n, t))
        }
        HterPolicy::EerThreshold => {
            let v = set.sorted();
            let cands = candidate_thresholds(set);
            // sweep: below threshold t are the first `k` sorted samples
            let mut best: Option<(u128, u128, f64, usize, usize)> = None;
            let mut k = 0;
            let (mut spoof_below, mut live_below) = (0usize, 0usize);
            for &t in &cands {
                while k < v.len() && v[k].0 < t {
                    if v[k].1 {
                        spoof_below += 1;
                    } else {
                        live_below += 1;
                    }
                    k += 1;
                }
                let (fa, fr) = (spoof_below, n - live_below);
                // compare |fa/p − fr/n| and fa/p + fr/n exactly
                let gap = (fa as i128 * n as i128 - fr as i128 * p as i128).unsigned_abs();
                let sum = fa as u128 * n as u128 + fr as u128 * p as u128;
                let better = match best {
                    None => true,
                    Some((bg, bs, bt, _, _)) => gap < bg || (gap == bg && (sum < bs || (sum == bs && t < bt))),
                };
                if better {
                    best = Some((gap, sum, t, fa, fr));
                }
            }
            let (_, _, t, fa, fr) = best.expect("at least one candidate");
            Ok(operating_point(fa, fr, p, n, t))
        }
    }
}

pub fn hter(set: &ScoreSet, policy: HterPolicy) -> Result<f64> {
    Ok(hter_point(set, policy)?.hter)
}

/// ROC vertices `(fpr, tpr)` from the strictest threshold down, starting at `(0, 0)`.
pub fn roc_points(set: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    let (p, n) = set.require_both()?;
    let mut v = set.sorted();
    v.reverse();
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < v.len() {
        let s = v[i].0;
        while i < v.len() && v[i].0 == s {
            if v[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(pts)
}

/// Highest TPR with FPR at most `target_fpr`; with `interpolate`, the segment crossing
/// the target contributes its linearly interpolated TPR.
pub fn tpr_at_fpr(set: &ScoreSet, target_fpr: f64, interpolate: bool) -> Result<f64> {
    let pts = roc_points(set)?;
    let mut best = 0.0f64;
    for (i, &(f, t)) in pts.iter().enumerate() {
        if f <= target_fpr {
            best = best.max(t);
            if interpolate {
                if let Some(&(f2, t2)) = pts.get(i + 1) {
                    if f2 > target_fpr && f2 > f {
                        best = best.max(t + (t2 - t) * (target_fpr - f) / (f2 - f));
                    }
                }
            }
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub hter_policy: HterPolicy,
    pub target_fpr: f64,
    pub tpr_interpolate: bool,
    /// Samples per timing measurement in the inference-timing ablation.
    pub timing_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { hter_policy: HterPolicy::EerThreshold, target_fpr: 0.01, tpr_interpolate: true, timing_samples: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub domain: String,
    pub hter: f64,
    pub auc: f64,
    pub tpr_at_fpr: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
    pub warnings: Vec<String>,
}

pub fn metric_row(set: &ScoreSet, cfg: &EvalConfig) -> Result<MetricRow> {
    Ok(MetricRow {
        domain: set.domain_id.clone(),
        hter: hter(set, cfg.hter_policy)?,
        auc: auc(set)?,
        tpr_at_fpr: tpr_at_fpr(set, cfg.target_fpr, cfg.tpr_interpolate)?,
        samples: set.scores.len(),
    })
}

pub fn mean_row(rows: &[MetricRow], name: &str) -> MetricRow {
    let n = rows.len().max(1) as f64;
    MetricRow {
        domain: name.into(),
        hter: rows.iter().map(|r| r.hter).sum::<f64>() / n,
        auc: rows.iter().map(|r| r.auc).sum::<f64>() / n,
        tpr_at_fpr: rows.iter().map(|r| r.tpr_at_fpr).sum::<f64>() / n,
        samples: rows.iter().map(|r| r.samples).sum(),
    }
}

impl MetricReport {
    pub fn from_sets(sets: &[ScoreSet], cfg: &EvalConfig) -> Result<Self> {
        let mut rows = Vec::new();
        let mut warnings = Vec::new();
        for s in sets {
            if s.scores.is_empty() {
                warnings.push(format!("domain `{}` is empty; skipped", s.domain_id));
                continue;
            }
            rows.push(metric_row(s, cfg)?);
        }
        if rows.is_empty() {
            return reject("no non-empty domains to evaluate");
        }
        let mean = mean_row(&rows, "mean");
        Ok(Self { rows, mean, warnings })
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<18} {:>8} {:>8} {:>12} {:>8}\n", "domain", "HTER%", "AUC%", "TPR@FPR%", "n");
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            s += &format!(
                "{:<18} {:>8.2} {:>8.2} {:>12.2} {:>8}\n",
                r.domain,
                100.0 * r.hter,
                100.0 * r.auc,
                100.0 * r.tpr_at_fpr,
                r.samples
            );
        }
        s
    }
}

/// Per-seed reports and their element-wise mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricReport>,
    pub seed_mean: MetricReport,
}

/// Scores every sample of a domain with the language-model-free path.
pub fn score_domain<T: Scalar>(model: &Model<T>, samples: &[Sample], domain: &str) -> Result<ScoreSet> {
    let scores = samples.iter().map(|s| model.score(&s.image)).collect::<Result<Vec<_>>>()?;
    ScoreSet::new(scores, samples.iter().map(Sample::is_spoof).collect(), domain)
}

/// Evaluates every model (one per seed) on every domain; rows follow domain order.
pub fn run_protocol<T: Scalar>(
    models: &[(u64, &Model<T>)],
    domains: &[(String, &[Sample])],
    cfg: &EvalConfig,
) -> Result<ProtocolReport> {
    if domains.is_empty() || models.is_empty() {
        return reject("protocol needs at least one domain and one model");
    }
    let mut per_seed = Vec::with_capacity(models.len());
    for (_, m) in models {
        let sets = domains.iter().map(|(name, s)| score_domain(*m, s, name)).collect::<Result<Vec<_>>>()?;
        per_seed.push(MetricReport::from_sets(&sets, cfg)?);
    }
    Ok(ProtocolReport { seeds: models.iter().map(|(s, _)| *s).collect(), seed_mean: seed_mean(&per_seed), per_seed })
}

/// Element-wise mean of reports that share their row layout.
pub fn seed_mean(reports: &[MetricReport]) -> MetricReport {
    let first = &reports[0];
    let rows: Vec<MetricRow> = (0..first.rows.len())
        .map(|i| {
            let col: Vec<MetricRow> = reports.iter().map(|r| r.rows[i].clone()).collect();
            let mut m = mean_row(&col, &first.rows[i].domain);
            m.samples = first.rows[i].samples;
            m
        })
        .collect();
    let mean = mean_row(&rows, "mean");
    MetricReport { rows, mean, warnings: first.warnings.clone() }
}

/// Fraction of samples whose decoded answer to `q` is the gold option. Malformed
/// answers count as wrong.
pub fn answer_accuracy<T: Scalar>(model: &Model<T>, samples: &[Sample], q: QuestionType) -> Result<f64> {
    if samples.is_empty() {
        return reject("answer accuracy needs samples");
    }
    let gran = model.cfg.granularity;
    let mut correct = 0usize;
    for s in samples {
        let p = model.predict(&s.image, true)?;
        let (_, a) = p
            .answers
            .iter()
            .find(|(qq, _)| *qq == q)
            .ok_or_else(|| crate::Error::Rejected(format!("model does not answer the {} question", q.short_name())))?;
        correct += usize::from(a.option == Some(q.label_of(s, gran)));
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(live: &[f64], spoof: &[f64]) -> ScoreSet {
        let mut s = live.to_vec();
        s.extend_from_slice(spoof);
        let mut l = vec![false; live.len()];
        l.extend(vec![true; spoof.len()]);
        ScoreSet::new(s, l, "d").unwrap()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&set(&[0.1, 0.2], &[0.8, 0.9])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[0.2, 0.4], &[0.3, 0.9])).unwrap(), 0.75);
        assert_eq!(auc(&set(&[0.5, 0.5], &[0.5, 0.5])).unwrap(), 0.5);
        assert!(auc(&set(&[0.1], &[])).is_err());
    }

    #[test]
    fn hter_examples() {
        let s = set(&[0.1, 0.2], &[0.8, 0.9]);
        assert_eq!(hter(&s, HterPolicy::EerThreshold).unwrap(), 0.0);
        assert_eq!(hter(&s, HterPolicy::Fixed(0.5)).unwrap(), 0.0);
        let inv = set(&[0.6], &[0.4]);
        let p = hter_point(&inv, HterPolicy::Fixed(0.5)).unwrap();
        assert_eq!((p.far, p.frr, p.hter), (1.0, 1.0, 1.0));
    }

    #[test]
    fn tpr_examples() {
        assert_eq!(tpr_at_fpr(&set(&[0.1, 0.2], &[0.8, 0.9]), 0.01, false).unwrap(), 1.0);
        assert_eq!(tpr_at_fpr(&set(&[0.8, 0.9], &[0.1, 0.2]), 0.01, false).unwrap(), 0.0);
    }

    #[test]
    fn mean_row_of_one() {
        let r = MetricReport::from_sets(&[set(&[0.2, 0.4], &[0.3, 0.9])], &EvalConfig::default()).unwrap();
        assert_eq!(r.mean.hter, r.rows[0].hter);
        assert_eq!(r.mean.auc, r.rows[0].auc);
    }
}
