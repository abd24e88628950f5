//! Detection error trade-off sweep, equal error rate and minimum normalized
//! detection cost.
//!
//! A trial is accepted when its score is at or above the threshold. The sweep
//! visits every distinct score plus an accept-all point at `-∞` and a
//! reject-all point at `+∞`; both error rates are piecewise constant between
//! consecutive scores, so no other threshold can do better.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores with target (`true`) / nontarget (`false`) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pairs: Vec<(f64, bool)>,
    targets: usize,
}

impl ScoreSet {
    pub fn new(pairs: Vec<(f64, bool)>) -> Result<Self> {
        if let Some(i) = pairs.iter().position(|(s, _)| !s.is_finite()) {
            return Err(Error::InvalidConfig(format!("score {i} is not finite")));
        }
        let targets = pairs.iter().filter(|(_, t)| *t).count();
        if targets == 0 || targets == pairs.len() {
            return Err(Error::SingleClassInput);
        }
        Ok(Self { pairs, targets })
    }

    pub fn from_parts(target_scores: &[f64], nontarget_scores: &[f64]) -> Result<Self> {
        let pairs = target_scores
            .iter()
            .map(|&s| (s, true))
            .chain(nontarget_scores.iter().map(|&s| (s, false)))
            .collect();
        Self::new(pairs)
    }

    pub fn pairs(&self) -> &[(f64, bool)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn targets(&self) -> usize {
        self.targets
    }

    pub fn nontargets(&self) -> usize {
        self.pairs.len() - self.targets
    }

    /// Applies `f` to every score, keeping labels.
    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.pairs.iter().map(|&(s, t)| (f(s), t)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points in ascending threshold order.
pub fn det_sweep(scores: &ScoreSet) -> Vec<DetPoint> {
    let (nt, nn) = (scores.targets() as f64, scores.nontargets() as f64);
    let mut sorted = scores.pairs.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::with_capacity(sorted.len() + 2);
    points.push(DetPoint {
        threshold: f64::NEG_INFINITY,
        p_miss: 0.0,
        p_fa: 1.0,
    });
    let (mut misses, mut rejected_nontargets) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        points.push(DetPoint {
            threshold,
            p_miss: misses as f64 / nt,
            p_fa: (scores.nontargets() - rejected_nontargets) as f64 / nn,
        });
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                misses += 1;
            } else {
                rejected_nontargets += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    points
}

/// Rate and threshold where the miss and false-alarm curves cross, linearly
/// interpolated between the two sweep points bracketing the crossing.
pub fn eer(scores: &ScoreSet) -> (f64, f64) {
    eer_from_points(&det_sweep(scores))
}

/// [`eer`] on a precomputed, threshold-ascending sweep.
pub fn eer_from_points(points: &[DetPoint]) -> (f64, f64) {
    let gap = |p: &DetPoint| p.p_miss - p.p_fa;
    let i = points
        .iter()
        .position(|p| gap(p) >= 0.0)
        .expect("sweep ends at the reject-all point");
    if i == 0 {
        return (points[0].p_miss, points[0].threshold);
    }
    let (a, b) = (&points[i - 1], &points[i]);
    let (ga, gb) = (gap(a), gap(b));
    let alpha = -ga / (gb - ga);
    let rate = a.p_miss + alpha * (b.p_miss - a.p_miss);
    let threshold = match (a.threshold.is_finite(), b.threshold.is_finite()) {
        (true, true) => a.threshold + alpha * (b.threshold - a.threshold),
        (true, false) => a.threshold,
        _ => b.threshold,
    };
    (rate, threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.05,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "p_target must lie in (0, 1), got {}",
                self.p_target
            )));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::InvalidConfig("detection costs must be positive".into()));
        }
        Ok(())
    }

    /// Cost of one operating point divided by the cost of the best trivial
    /// system.
    pub fn normalized_cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        let raw = self.c_miss * p_miss * self.p_target + self.c_fa * p_fa * (1.0 - self.p_target);
        raw / (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

/// Minimum normalized detection cost and the first threshold attaining it.
pub fn min_dcf(scores: &ScoreSet, params: &DcfParams) -> Result<(f64, f64)> {
    params.validate()?;
    Ok(min_dcf_from_points(&det_sweep(scores), params))
}

pub fn min_dcf_from_points(points: &[DetPoint], params: &DcfParams) -> (f64, f64) {
    let mut best = (f64::INFINITY, f64::INFINITY);
    for p in points {
        let c = params.normalized_cost(p.p_miss, p.p_fa);
        if c < best.0 {
            best = (c, p.threshold);
        }
    }
    best
}

/// Evaluation summary. Infinite thresholds serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trials: usize,
    pub targets: usize,
    pub nontargets: usize,
    pub eer: f64,
    pub eer_threshold: Option<f64>,
    pub min_dcf: f64,
    pub dcf_threshold: Option<f64>,
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

pub fn evaluate(scores: &ScoreSet, params: &DcfParams) -> Result<EvalReport> {
    params.validate()?;
    let points = det_sweep(scores);
    let (eer, eer_threshold) = eer_from_points(&points);
    let (min_dcf, dcf_threshold) = min_dcf_from_points(&points, params);
    let finite = |t: f64| t.is_finite().then_some(t);
    Ok(EvalReport {
        trials: scores.len(),
        targets: scores.targets(),
        nontargets: scores.nontargets(),
        eer,
        eer_threshold: finite(eer_threshold),
        min_dcf,
        dcf_threshold: finite(dcf_threshold),
        p_target: params.p_target,
        c_miss: params.c_miss,
        c_fa: params.c_fa,
    })
}

/// Independent O(n²) enumeration used to cross-check the sweep.
pub mod brute_force {
    use super::{DcfParams, DetPoint, ScoreSet};

    fn rates_at(scores: &ScoreSet, threshold: f64) -> DetPoint {
        let (mut miss, mut fa) = (0usize, 0usize);
        for &(s, target) in scores.pairs() {
            let accept = s >= threshold;
            if target && !accept {
                miss += 1;
            }
            if !target && accept {
                fa += 1;
            }
        }
        DetPoint {
            threshold,
            p_miss: miss as f64 / scores.targets() as f64,
            p_fa: fa as f64 / scores.nontargets() as f64,
        }
    }

    /// Every score, every midpoint between neighbouring scores, and both
    /// infinities.
    pub fn candidate_thresholds(scores: &ScoreSet) -> Vec<f64> {
        let mut values: Vec<f64> = scores.pairs().iter().map(|p| p.0).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let mut out = vec![f64::NEG_INFINITY];
        for (i, &v) in values.iter().enumerate() {
            out.push(v);
            if let Some(&next) = values.get(i + 1) {
                out.push(v + (next - v) / 2.0);
            }
        }
        out.push(f64::INFINITY);
        out
    }

    pub fn min_dcf(scores: &ScoreSet, params: &DcfParams) -> f64 {
        candidate_thresholds(scores)
            .into_iter()
            .map(|t| {
                let p = rates_at(scores, t);
                params.normalized_cost(p.p_miss, p.p_fa)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Crossing of the counted rate curves, interpolated between the last
    /// threshold with `p_miss < p_fa` and the first with `p_miss ≥ p_fa`.
    pub fn eer(scores: &ScoreSet) -> f64 {
        let points: Vec<DetPoint> = candidate_thresholds(scores)
            .into_iter()
            .map(|t| rates_at(scores, t))
            .collect();
        let below = points
            .iter()
            .filter(|p| p.p_miss < p.p_fa)
            .last()
            .expect("accept-all has p_miss < p_fa");
        let above = points
            .iter()
            .find(|p| p.p_miss >= p.p_fa)
            .expect("reject-all has p_miss > p_fa");
        let (ga, gb) = (below.p_miss - below.p_fa, above.p_miss - above.p_fa);
        let alpha = -ga / (gb - ga);
        below.p_miss + alpha * (above.p_miss - below.p_miss)
    }
}
