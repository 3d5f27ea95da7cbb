//! Heatmap evaluation: AUC, aIOU, SIM and MAE, with per-sample,
//! per-affordance and overall aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{AFFORDANCE_NAMES, NUM_AFFORDANCES};

/// Positive iff the label is strictly above zero.
pub fn binarize_gt(labels: &[f64]) -> Vec<bool> {
    labels.iter().map(|&l| l > 0.0).collect()
}

/// Area under the ROC curve via the trapezoid rule over every distinct
/// threshold. `None` when only one class is present.
pub fn auc(pred: &[f64], gt: &[bool]) -> Option<f64> {
    assert_eq!(pred.len(), gt.len());
    let pos = gt.iter().filter(|&&b| b).count();
    let neg = gt.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].total_cmp(&pred[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let t = pred[order[i]];
        while i < order.len() && pred[order[i]] == t {
            if gt[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64;
    }
    Some(area / (2.0 * pos as f64 * neg as f64))
}

/// Mean IOU of `pred > t` against `gt` for `t = 0.00, 0.01, …, 0.99`, with
/// an empty-vs-empty threshold scoring 1. In `[0, 1]`.
pub fn aiou(pred: &[f64], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len());
    let mut all: Vec<f64> = pred.to_vec();
    all.sort_by(f64::total_cmp);
    let mut positives: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g).map(|(&p, _)| p).collect();
    positives.sort_by(f64::total_cmp);
    let gt_count = positives.len();
    let above = |v: &[f64], t: f64| v.len() - v.partition_point(|&x| x <= t);
    let mut sum = 0.0;
    for k in 0..100 {
        let t = k as f64 / 100.0;
        let inter = above(&positives, t);
        let union = gt_count + above(&all, t) - inter;
        sum += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    sum / 100.0
}

/// Histogram intersection of the two maps after each is normalised to sum
/// to one. Zero (with a warning) if either map sums to zero.
pub fn sim_metric(pred: &[f64], gt: &[f64]) -> f64 {
    let (sp, sg) = (pred.iter().sum::<f64>(), gt.iter().sum::<f64>());
    if sp <= 0.0 || sg <= 0.0 {
        log::warn!("SIM undefined for a zero-sum map; reporting 0");
        return 0.0;
    }
    pred.iter().zip(gt).map(|(p, g)| (p / sp).min(g / sg)).sum()
}

/// Sum of elementwise minima after dividing each map by its maximum. Not
/// bounded by one.
pub fn sim_max_normalized(pred: &[f64], gt: &[f64]) -> f64 {
    let mp = pred.iter().copied().fold(0.0, f64::max);
    let mg = gt.iter().copied().fold(0.0, f64::max);
    if mp <= 0.0 || mg <= 0.0 {
        log::warn!("SIM undefined for an all-zero map; reporting 0");
        return 0.0;
    }
    pred.iter().zip(gt).map(|(p, g)| (p / mp).min(g / mg)).sum()
}

pub fn mae(pred: &[f64], gt: &[f64]) -> f64 {
    assert_eq!(pred.len(), gt.len());
    pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub affordance: usize,
    pub auc: Option<f64>,
    /// Percentage.
    pub aiou: f64,
    pub sim: f64,
    pub mae: f64,
}

impl SampleMetrics {
    pub fn compute(sample_id: &str, affordance: usize, pred: &[f64], labels: &[f64], max_normalized_sim: bool) -> Self {
        let gt = binarize_gt(labels);
        let auc = auc(pred, &gt);
        if auc.is_none() {
            log::warn!("sample {sample_id}: single-class ground truth, AUC excluded");
        }
        Self {
            sample_id: sample_id.to_string(),
            affordance,
            auc,
            aiou: 100.0 * aiou(pred, &gt),
            sim: if max_normalized_sim {
                sim_max_normalized(pred, labels)
            } else {
                sim_metric(pred, labels)
            },
            mae: mae(pred, labels),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub samples: usize,
    pub auc_samples: usize,
    pub auc: Option<f64>,
    pub aiou: Option<f64>,
    pub sim: Option<f64>,
    pub mae: Option<f64>,
}

impl MetricMeans {
    fn from_samples<'a>(items: impl Iterator<Item = &'a SampleMetrics>) -> Self {
        let items: Vec<&SampleMetrics> = items.collect();
        let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let aucs: Vec<f64> = items.iter().filter_map(|s| s.auc).collect();
        Self {
            samples: items.len(),
            auc_samples: aucs.len(),
            auc: mean(aucs),
            aiou: mean(items.iter().map(|s| s.aiou).collect()),
            sim: mean(items.iter().map(|s| s.sim).collect()),
            mae: mean(items.iter().map(|s| s.mae).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffordanceRow {
    pub affordance: usize,
    pub name: String,
    #[serde(flatten)]
    pub means: MetricMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub per_sample: Vec<SampleMetrics>,
    /// One row per affordance id; metrics are null when no sample has it.
    pub per_affordance: Vec<AffordanceRow>,
    pub overall: MetricMeans,
}

impl MetricsReport {
    pub fn from_samples(label: &str, per_sample: Vec<SampleMetrics>) -> Self {
        let per_affordance = (0..NUM_AFFORDANCES)
            .map(|a| AffordanceRow {
                affordance: a,
                name: AFFORDANCE_NAMES[a].to_string(),
                means: MetricMeans::from_samples(per_sample.iter().filter(|s| s.affordance == a)),
            })
            .collect();
        let overall = MetricMeans::from_samples(per_sample.iter());
        Self {
            label: label.to_string(),
            per_sample,
            per_affordance,
            overall,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Affordances as rows, metrics as columns.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>, digits: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"));
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.label);
        let _ = writeln!(s, "{:<10} {:>6} {:>8} {:>8} {:>7} {:>7}", "affordance", "count", "AUC", "aIOU", "SIM", "MAE");
        let mut row = |name: &str, m: &MetricMeans| {
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>8} {:>8} {:>7} {:>7}",
                name,
                m.samples,
                cell(m.auc.map(|a| 100.0 * a), 2),
                cell(m.aiou, 2),
                cell(m.sim, 3),
                cell(m.mae, 3)
            );
        };
        for r in &self.per_affordance {
            row(&r.name, &r.means);
        }
        row("overall", &self.overall);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,affordance,auc,aiou,sim,mae\n");
        for m in &self.per_sample {
            let auc = m.auc.map_or_else(String::new, |a| a.to_string());
            let _ = writeln!(s, "{},{},{},{},{},{}", m.sample_id, m.affordance, auc, m.aiou, m.sim, m.mae);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_rule() {
        assert_eq!(binarize_gt(&[0.0, 0.3, 1.0]), vec![false, true, true]);
        assert_eq!(auc(&[0.1, 0.2], &binarize_gt(&[0.0, 0.0])), None);
        assert_eq!(auc(&[0.1, 0.2], &binarize_gt(&[1.0, 1.0])), None);
    }

    #[test]
    fn auc_perfect_and_inverted() {
        let gt = [true, false, true, false];
        let p: Vec<f64> = gt.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        assert_eq!(auc(&p, &gt), Some(1.0));
        let q: Vec<f64> = p.iter().map(|x| 1.0 - x).collect();
        assert_eq!(auc(&q, &gt), Some(0.0));
        assert_eq!(auc(&[0.5; 4], &gt), Some(0.5));
    }

    #[test]
    fn aiou_binary_identity() {
        let gt = [true, false, false, true, true];
        let p: Vec<f64> = gt.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        assert_eq!(aiou(&p, &gt), 1.0);
        assert_eq!(aiou(&[0.0; 3], &[false; 3]), 1.0);
    }

    #[test]
    fn sim_bounds() {
        assert!((sim_metric(&[0.2, 0.4, 0.1], &[0.2, 0.4, 0.1]) - 1.0).abs() < 1e-12);
        assert_eq!(sim_metric(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(sim_metric(&[0.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!(sim_max_normalized(&[1.0, 1.0], &[1.0, 1.0]) > 1.0);
    }

    #[test]
    fn report_has_all_affordance_rows() {
        let s = SampleMetrics::compute("a", 3, &[0.9, 0.1, 0.8], &[1.0, 0.0, 0.5], false);
        let r = MetricsReport::from_samples("seen", vec![s.clone()]);
        assert_eq!(r.per_affordance.len(), NUM_AFFORDANCES);
        assert_eq!(r.overall.aiou, Some(s.aiou));
        assert!(r.per_affordance[0].means.auc.is_none());
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert!(json["per_affordance"][0]["auc"].is_null());
        assert_eq!(r.to_csv().lines().count(), 2);
        assert_eq!(r.to_table().lines().count(), NUM_AFFORDANCES + 3);
    }
}
