//! Grounding metrics over ranked span predictions.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::model::Span;

/// Intersection over union of two intervals. Two identical zero-length
/// spans have IoU 1; any other empty union gives 0.
pub fn iou(a: &Span, b: &Span) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = (a.end - a.start) + (b.end - b.start) - inter;
    if union > 0.0 {
        inter / union
    } else if a.start == b.start && a.end == b.end {
        1.0
    } else {
        0.0
    }
}

/// Fraction of samples with some prediction among the first `k` whose IoU
/// with some groundtruth exceeds `mu`. Predictions must already be ranked.
pub fn rank_k_at_mu(preds: &[Vec<Span>], gts: &[Vec<Span>], k: usize, mu: f64) -> f64 {
    assert_eq!(preds.len(), gts.len(), "one prediction list per sample");
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| p.iter().take(k).any(|ps| g.iter().any(|gs| iou(ps, gs) > mu)))
        .count();
    hits as f64 / preds.len() as f64
}

/// Per-sample true-positive flags: each prediction in rank order claims the
/// unclaimed groundtruth with the highest IoU above `mu`.
fn greedy_matches(preds: &[Span], gts: &[Span], mu: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, g)| !taken[*j] && iou(p, g) > mu)
                .max_by(|a, b| iou(p, a.1).total_cmp(&iou(p, b.1)).then(b.0.cmp(&a.0)));
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point average precision of one ranked list: the sum over true
/// positives of precision at that rank, divided by the groundtruth count.
pub fn average_precision(preds: &[Span], gts: &[Span], mu: f64) -> f64 {
    assert!(!gts.is_empty(), "AP needs at least one groundtruth");
    let tp = greedy_matches(preds, gts, mu);
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    ap / gts.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapResult {
    pub map: f64,
    /// Samples left out because they had no groundtruth.
    pub skipped: usize,
}

/// Mean of [`average_precision`] over samples that have groundtruth.
pub fn map_at_mu(preds: &[Vec<Span>], gts: &[Vec<Span>], mu: f64) -> MapResult {
    assert_eq!(preds.len(), gts.len(), "one prediction list per sample");
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        if g.is_empty() {
            continue;
        }
        sum += average_precision(p, g, mu);
        n += 1;
    }
    MapResult { map: if n > 0 { sum / n as f64 } else { 0.0 }, skipped: preds.len() - n }
}

/// Index of the largest value; ties resolve to the earliest index.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// 1 if the groundtruth salience at the top-predicted moment is at least `tau`.
pub fn hit_at_1_single(pred: &[f64], gt: &[f64], tau: f64) -> f64 {
    assert_eq!(pred.len(), gt.len(), "salience vectors differ in length");
    match argmax_first(pred) {
        Some(i) if gt[i] >= tau => 1.0,
        _ => 0.0,
    }
}

/// Mean of [`hit_at_1_single`] over samples.
pub fn hit_at_1(preds: &[Vec<f64>], gts: &[Vec<f64>], tau: f64) -> f64 {
    assert_eq!(preds.len(), gts.len());
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(gts).map(|(p, g)| hit_at_1_single(p, g, tau)).sum::<f64>() / preds.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub mus: Vec<f64>,
    /// Hit@1 salience threshold.
    pub tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![1, 5], mus: vec![0.5, 0.7, 0.75], tau: 4.0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.ks.iter().any(|&k| k == 0) {
            return Err("eval.ks must be >= 1".into());
        }
        if self.mus.iter().any(|&m| !(m > 0.0 && m <= 1.0)) {
            return Err("eval.mus must lie in (0, 1]".into());
        }
        Ok(())
    }
}

/// Everything needed to score one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub ranked: Vec<Span>,
    pub gt: Vec<Span>,
    pub pred_salience: Vec<f64>,
    pub gt_salience: Vec<f64>,
}

/// Flat metric set, serialized as a JSON object such as
/// `{"rank1@0.5": …, "map@0.5": …, "map_avg": …, "hit@1": …}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub entries: Vec<(String, f64)>,
    pub skipped_without_gt: usize,
}

impl MetricsReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).map(|e| e.1)
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for (k, v) in &self.entries {
            m.insert(k.clone(), Value::from(*v));
        }
        Value::Object(m)
    }
}

fn mu_key(mu: f64) -> String {
    format!("{mu}")
}

pub fn evaluate(samples: &[SampleEval], cfg: &EvalConfig) -> MetricsReport {
    let preds: Vec<Vec<Span>> = samples.iter().map(|s| s.ranked.clone()).collect();
    let gts: Vec<Vec<Span>> = samples.iter().map(|s| s.gt.clone()).collect();
    let mut entries = Vec::new();
    for &k in &cfg.ks {
        for &mu in &cfg.mus {
            entries.push((format!("rank{k}@{}", mu_key(mu)), rank_k_at_mu(&preds, &gts, k, mu)));
        }
    }
    let mut skipped = 0;
    let mut maps = Vec::new();
    for &mu in &cfg.mus {
        let r = map_at_mu(&preds, &gts, mu);
        skipped = r.skipped;
        maps.push(r.map);
        entries.push((format!("map@{}", mu_key(mu)), r.map));
    }
    if !maps.is_empty() {
        entries.push(("map_avg".into(), maps.iter().sum::<f64>() / maps.len() as f64));
    }
    let ps: Vec<Vec<f64>> = samples.iter().map(|s| s.pred_salience.clone()).collect();
    let gs: Vec<Vec<f64>> = samples.iter().map(|s| s.gt_salience.clone()).collect();
    entries.push(("hit@1".into(), hit_at_1(&ps, &gs, cfg.tau)));
    MetricsReport { entries, skipped_without_gt: skipped }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sp(a: f64, b: f64) -> Span {
        Span::new(a, b, 0.0)
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&sp(0.2, 0.6), &sp(0.2, 0.6)), 1.0);
        assert_eq!(iou(&sp(0.0, 0.3), &sp(0.5, 0.9)), 0.0);
        assert!((iou(&sp(0.0, 2.0), &sp(1.0, 3.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&sp(0.4, 0.4), &sp(0.4, 0.4)), 1.0);
        assert_eq!(iou(&sp(0.4, 0.4), &sp(0.5, 0.5)), 0.0);
    }

    #[test]
    fn iou_grows_as_gap_shrinks() {
        let a = sp(0.0, 0.4);
        let mut last = -1.0;
        for step in 0..=40 {
            let shift = 0.8 - step as f64 * 0.02;
            let v = iou(&a, &sp(shift, shift + 0.4));
            assert!(v >= last - 1e-15);
            last = v;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn rank_examples() {
        let g = vec![vec![sp(0.2, 0.5)]];
        assert_eq!(rank_k_at_mu(&[vec![sp(0.2, 0.5)]], &g, 1, 0.99), 1.0);
        assert_eq!(rank_k_at_mu(&[vec![sp(0.6, 0.9), sp(0.0, 0.1)]], &g, 5, 0.1), 0.0);
        assert_eq!(rank_k_at_mu(&[vec![]], &g, 1, 0.5), 0.0);
    }

    #[test]
    fn ap_examples() {
        let g = [sp(0.2, 0.5)];
        assert_eq!(average_precision(&[sp(0.2, 0.5), sp(0.7, 0.8)], &g, 0.5), 1.0);
        assert_eq!(average_precision(&[sp(0.7, 0.8), sp(0.2, 0.5)], &g, 0.5), 0.5);
        let r = map_at_mu(&[vec![sp(0.2, 0.5)], vec![sp(0.1, 0.2)]], &[g.to_vec(), vec![]], 0.5);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.skipped, 1);
    }

    #[test]
    fn ap_is_one_for_exact_predictions_in_any_order() {
        let g = vec![sp(0.0, 0.1), sp(0.3, 0.5), sp(0.6, 0.9)];
        let p = vec![Span::new(0.6, 0.9, 3.0), Span::new(0.0, 0.1, 2.0), Span::new(0.3, 0.5, 1.0)];
        assert_eq!(average_precision(&p, &g, 0.75), 1.0);
    }

    #[test]
    fn hit_examples() {
        assert_eq!(hit_at_1_single(&[0.1, 0.9, 0.3], &[0.0, 4.0, 5.0], 4.0), 1.0);
        assert_eq!(hit_at_1_single(&[0.1, 0.9, 0.3], &[0.0, 3.9, 5.0], 4.0), 0.0);
        assert_eq!(hit_at_1_single(&[1.0, 1.0, 1.0], &[4.0, 0.0, 0.0], 4.0), 1.0);
        assert_eq!(hit_at_1_single(&[1.0, 1.0, 1.0], &[0.0, 9.0, 9.0], 4.0), 0.0);
    }

    #[test]
    fn report_keys() {
        let s = SampleEval {
            ranked: vec![Span::new(0.2, 0.5, 1.0)],
            gt: vec![sp(0.2, 0.5)],
            pred_salience: vec![1.0, 0.0],
            gt_salience: vec![4.0, 0.0],
        };
        let r = evaluate(&[s], &EvalConfig::default());
        let json = r.to_json();
        for key in ["rank1@0.5", "rank1@0.7", "rank5@0.5", "map@0.5", "map@0.75", "map_avg", "hit@1"] {
            assert_eq!(json[key].as_f64(), Some(1.0), "{key}");
        }
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in 0.0f64..1.0, la in 0.0f64..1.0, b in 0.0f64..1.0, lb in 0.0f64..1.0) {
            let (x, y) = (sp(a, a + la), sp(b, b + lb));
            let v = iou(&x, &y);
            prop_assert_eq!(v, iou(&y, &x));
            prop_assert!((0.0..=1.0).contains(&v));
            if la > 0.0 {
                prop_assert_eq!(iou(&x, &x), 1.0);
            }
        }
    }
}
