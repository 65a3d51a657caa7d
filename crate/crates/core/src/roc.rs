//! ROC machinery over labeled decision statistics (timing deltas, embedding
//! similarities): threshold sweep, trapezoidal AUC, operating-point lookup.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    /// Decision rule: positive when the statistic is >= this threshold.
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RocCurve {
    /// Descending thresholds: (fpr, tpr) walks (0,0) -> (1,1).
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// The point whose threshold equals `threshold` under the >= rule, i.e.
    /// the rates a cache configured with that cutoff actually exhibits.
    pub fn at_threshold(&self, threshold: f64) -> RocPoint {
        let mut out = RocPoint { threshold, tpr: 0.0, fpr: 0.0 };
        for p in &self.points {
            if p.threshold >= threshold {
                out.tpr = p.tpr;
                out.fpr = p.fpr;
            } else {
                break;
            }
        }
        out
    }

    /// Highest TPR available while keeping FPR at or under `fpr_cap`.
    pub fn best_tpr_at_fpr(&self, fpr_cap: f64) -> RocPoint {
        let mut best = RocPoint { threshold: f64::INFINITY, tpr: 0.0, fpr: 0.0 };
        for p in &self.points {
            if p.fpr <= fpr_cap && p.tpr >= best.tpr {
                best = *p;
            }
        }
        best
    }
}

/// Threshold sweep over `(statistic, is_positive)` samples. One point per
/// distinct statistic value plus the all-negative origin; ties share a
/// point, so the trapezoid sum equals the tie-corrected rank statistic.
pub fn roc(samples: &[(f64, bool)]) -> Result<RocCurve> {
    let pos = samples.iter().filter(|(_, l)| *l).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels(format!(
            "need both labels, got {pos} positive / {neg} negative"
        )));
    }
    if let Some((s, _)) = samples.iter().find(|(s, _)| s.is_nan()) {
        return Err(Error::DegenerateLabels(format!("non-finite statistic {s}")));
    }

    let mut sorted: Vec<(f64, bool)> = samples.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut points = Vec::with_capacity(sorted.len() + 1);
    points.push(RocPoint { threshold: f64::INFINITY, tpr: 0.0, fpr: 0.0 });
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        // Consume the whole tie group before emitting a point.
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
    }

    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latency::gaussian_roc_auc;
    use crate::rng::rng_from;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn perfectly_separated_samples_score_one() {
        let samples: Vec<(f64, bool)> =
            (0..50).map(|i| (i as f64, i >= 25)).collect();
        let curve = roc(&samples).unwrap();
        assert_eq!(curve.auc, 1.0);
        assert_eq!(curve.best_tpr_at_fpr(0.0).tpr, 1.0);
    }

    #[test]
    fn identical_distributions_score_half() {
        // Every positive ties a negative: one diagonal step, area 1/2.
        let samples: Vec<(f64, bool)> =
            (0..100).flat_map(|i| [(i as f64, true), (i as f64, false)]).collect();
        let curve = roc(&samples).unwrap();
        assert!((curve.auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_overlap_matches_the_analytic_area() {
        let mut rng = rng_from(7, "roc.gaussian");
        for (gap, sigma) in [(0.45, 0.2), (0.45, 0.45), (1.0, 0.25)] {
            let hit = Normal::new(gap, sigma * std::f64::consts::SQRT_2).unwrap();
            let miss = Normal::new(0.0, sigma * std::f64::consts::SQRT_2).unwrap();
            let mut samples = Vec::with_capacity(20_000);
            for _ in 0..10_000 {
                samples.push((hit.sample(&mut rng), true));
                samples.push((miss.sample(&mut rng), false));
            }
            let curve = roc(&samples).unwrap();
            let oracle = gaussian_roc_auc(gap, sigma);
            assert!(
                (curve.auc - oracle).abs() < 0.02,
                "gap {gap} sigma {sigma}: {} vs {oracle}",
                curve.auc
            );
        }
    }

    #[test]
    fn single_label_class_is_rejected() {
        let all_pos = [(1.0, true), (2.0, true)];
        assert!(matches!(roc(&all_pos), Err(Error::DegenerateLabels(_))));
        let all_neg = [(1.0, false)];
        assert!(matches!(roc(&all_neg), Err(Error::DegenerateLabels(_))));
    }

    #[test]
    fn threshold_lookup_uses_the_geq_rule() {
        let samples = [(0.9, true), (0.7, true), (0.6, false), (0.3, false)];
        let curve = roc(&samples).unwrap();
        let p = curve.at_threshold(0.65);
        assert_eq!((p.tpr, p.fpr), (1.0, 0.0));
        let p = curve.at_threshold(0.6);
        assert_eq!((p.tpr, p.fpr), (1.0, 0.5));
        // Above every sample nothing fires.
        let p = curve.at_threshold(2.0);
        assert_eq!((p.tpr, p.fpr), (0.0, 0.0));
    }

    proptest! {
        #[test]
        fn curve_walks_monotonically_to_one_one(
            scores in proptest::collection::vec((-50i32..50, any::<bool>()), 2..400)
        ) {
            prop_assume!(scores.iter().any(|(_, l)| *l));
            prop_assume!(scores.iter().any(|(_, l)| !*l));
            let samples: Vec<(f64, bool)> =
                scores.iter().map(|&(s, l)| (s as f64 / 8.0, l)).collect();
            let curve = roc(&samples).unwrap();
            for w in curve.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr);
                prop_assert!(w[1].tpr >= w[0].tpr);
                prop_assert!(w[1].threshold < w[0].threshold);
            }
            let last = curve.points.last().unwrap();
            prop_assert_eq!((last.tpr, last.fpr), (1.0, 1.0));
            prop_assert!((0.0..=1.0).contains(&curve.auc));
        }

        #[test]
        fn flipping_labels_mirrors_the_area(
            scores in proptest::collection::vec((-50i32..50, any::<bool>()), 2..200)
        ) {
            prop_assume!(scores.iter().any(|(_, l)| *l));
            prop_assume!(scores.iter().any(|(_, l)| !*l));
            let samples: Vec<(f64, bool)> =
                scores.iter().map(|&(s, l)| (s as f64, l)).collect();
            let flipped: Vec<(f64, bool)> =
                samples.iter().map(|&(s, l)| (-s, !l)).collect();
            let a = roc(&samples).unwrap().auc;
            let b = roc(&flipped).unwrap().auc;
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
