//! Evaluation suite: per-class average precision, mAP, and micro-aggregated
//! overall precision / recall / F1 over all label slots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// AP summation convention recorded in every report so numbers stay
/// comparable: all-points summation, no interpolation.
pub const AP_CONVENTION: &str = "all-points";

/// Scores, truths and thresholded predictions for N samples over C classes,
/// row-major.
#[derive(Debug, Clone)]
pub struct EvaluationBatch {
    pub n: usize,
    pub c: usize,
    pub scores: Vec<f64>,
    pub truths: Vec<u8>,
    pub predictions: Vec<u8>,
}

impl EvaluationBatch {
    pub fn new(n: usize, c: usize, scores: Vec<f64>, truths: Vec<f64>, predictions: Vec<f64>) -> Result<Self> {
        if scores.len() != n * c || truths.len() != n * c || predictions.len() != n * c {
            return Err(Error::invalid(format!(
                "evaluation batch arrays must all have {n}x{c} entries"
            )));
        }
        Ok(EvaluationBatch {
            n,
            c,
            scores,
            truths: to_binary(&truths, "truths")?,
            predictions: to_binary(&predictions, "predictions")?,
        })
    }
}

pub fn to_binary(values: &[f64], what: &str) -> Result<Vec<u8>> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v == 0.0 {
                Ok(0)
            } else if v == 1.0 {
                Ok(1)
            } else {
                Err(Error::Data(format!(
                    "{what} must be strictly binary; entry {i} is {v}"
                )))
            }
        })
        .collect()
}

/// All-points average precision: stable descending sort by score (ties keep
/// original order), then the mean of precision-at-rank over positive ranks.
/// Undefined when the class has no positives.
pub fn average_precision(scores: &[f64], truths: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), truths.len());
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score in average_precision".into()));
    }
    let total_pos = truths.iter().filter(|&&t| t == 1).count();
    if total_pos == 0 {
        return Err(Error::Data(
            "average precision undefined: class has no positive samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if truths[idx] == 1 {
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / total_pos as f64)
}

/// Unweighted mean of defined per-class APs; classes without positives are
/// excluded and returned as `None`.
pub fn mean_average_precision(batch: &EvaluationBatch) -> Result<(f64, Vec<Option<f64>>)> {
    let (n, c) = (batch.n, batch.c);
    let mut per_class = Vec::with_capacity(c);
    for j in 0..c {
        let scores: Vec<f64> = (0..n).map(|i| batch.scores[i * c + j]).collect();
        let truths: Vec<u8> = (0..n).map(|i| batch.truths[i * c + j]).collect();
        per_class.push(average_precision(&scores, &truths).ok());
    }
    let defined: Vec<f64> = per_class.iter().filter_map(|&a| a).collect();
    if defined.is_empty() {
        return Err(Error::Data(
            "mAP undefined: no class has a positive sample".into(),
        ));
    }
    Ok((defined.iter().sum::<f64>() / defined.len() as f64, per_class))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub op: f64,
    pub or_: f64,
    pub of1: f64,
    pub tp: usize,
    pub predicted_positives: usize,
    pub truth_positives: usize,
    /// Set when a zero denominator forced a metric to 0 by convention.
    pub zero_denominator: bool,
}

/// Micro-aggregated precision, recall and F1 over all N*C label slots.
pub fn overall_metrics(predictions: &[u8], truths: &[u8]) -> Result<OverallMetrics> {
    if predictions.len() != truths.len() {
        return Err(Error::invalid(
            "predictions and truths must have the same length",
        ));
    }
    if predictions.iter().chain(truths).any(|&v| v > 1) {
        return Err(Error::Data("overall_metrics entries must be binary".into()));
    }
    let tp = predictions
        .iter()
        .zip(truths)
        .filter(|(&p, &t)| p == 1 && t == 1)
        .count();
    let pred_pos = predictions.iter().filter(|&&p| p == 1).count();
    let truth_pos = truths.iter().filter(|&&t| t == 1).count();
    let mut zero_denominator = false;
    let op = if pred_pos > 0 {
        tp as f64 / pred_pos as f64
    } else {
        zero_denominator = true;
        0.0
    };
    let or_ = if truth_pos > 0 {
        tp as f64 / truth_pos as f64
    } else {
        zero_denominator = true;
        0.0
    };
    let of1 = if op + or_ > 0.0 {
        2.0 * op * or_ / (op + or_)
    } else {
        zero_denominator = true;
        0.0
    };
    Ok(OverallMetrics {
        op,
        or_,
        of1,
        tp,
        predicted_positives: pred_pos,
        truth_positives: truth_pos,
        zero_denominator,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub overall: OverallMetrics,
    pub ap_convention: String,
}

impl MetricsReport {
    pub fn compute(batch: &EvaluationBatch) -> Result<MetricsReport> {
        let (map, per_class_ap) = mean_average_precision(batch)?;
        let overall = overall_metrics(&batch.predictions, &batch.truths)?;
        Ok(MetricsReport {
            per_class_ap,
            map,
            overall,
            ap_convention: AP_CONVENTION.to_string(),
        })
    }

    /// Key-value text rendering plus the per-class AP table.
    pub fn to_text(&self, class_names: Option<&[String]>) -> String {
        let mut out = String::new();
        out.push_str(&format!("ap_convention: {}\n", self.ap_convention));
        out.push_str(&format!("mAP: {:.6}\n", self.map));
        out.push_str(&format!("OP: {:.6}\n", self.overall.op));
        out.push_str(&format!("OR: {:.6}\n", self.overall.or_));
        out.push_str(&format!("OF1: {:.6}\n", self.overall.of1));
        out.push_str(&format!(
            "counts: tp={} predicted_positives={} truth_positives={}\n",
            self.overall.tp, self.overall.predicted_positives, self.overall.truth_positives
        ));
        if self.overall.zero_denominator {
            out.push_str("warning: zero denominator, affected metrics set to 0\n");
        }
        out.push_str("per_class_ap:\n");
        for (j, ap) in self.per_class_ap.iter().enumerate() {
            let name = class_names
                .and_then(|ns| ns.get(j).cloned())
                .unwrap_or_else(|| format!("class_{j}"));
            match ap {
                Some(v) => out.push_str(&format!("  {name}: {v:.6}\n")),
                None => out.push_str(&format!("  {name}: undefined (no positives)\n")),
            }
        }
        out
    }

    /// Machine-readable CSV: one row per class plus summary rows.
    pub fn to_csv(&self, class_names: Option<&[String]>) -> String {
        let mut out = String::from("key,value,note\n");
        out.push_str(&format!("ap_convention,{},\n", self.ap_convention));
        out.push_str(&format!("mAP,{},\n", self.map));
        out.push_str(&format!("OP,{},\n", self.overall.op));
        out.push_str(&format!("OR,{},\n", self.overall.or_));
        out.push_str(&format!("OF1,{},\n", self.overall.of1));
        for (j, ap) in self.per_class_ap.iter().enumerate() {
            let name = class_names
                .and_then(|ns| ns.get(j).cloned())
                .unwrap_or_else(|| format!("class_{j}"));
            match ap {
                Some(v) => out.push_str(&format!("AP[{name}],{v},\n")),
                None => out.push_str(&format!("AP[{name}],,no positives\n")),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent AP oracle: O(n^2) precision-at-rank counting, no running
    /// true-positive counter.
    fn brute_force_ap(scores: &[f64], truths: &[u8]) -> Option<f64> {
        let n = scores.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let positives: Vec<usize> = (0..n)
            .filter(|&r| truths[order[r]] == 1)
            .collect();
        if positives.is_empty() {
            return None;
        }
        let ap: f64 = positives
            .iter()
            .map(|&r| {
                let hits = (0..=r).filter(|&q| truths[order[q]] == 1).count();
                hits as f64 / (r + 1) as f64
            })
            .sum();
        Some(ap / positives.len() as f64)
    }

    #[test]
    fn ap_hand_examples() {
        // perfect ranking
        assert_eq!(average_precision(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        // positive ranked last of three
        assert!((average_precision(&[3.0, 2.0, 1.0], &[0, 0, 1]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // positives at ranks 1 and 3: (1/1 + 2/3)/2 = 5/6
        let ap = average_precision(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        // tie broken by original order: negative at index 0 ranks first
        let ap = average_precision(&[0.5, 0.5], &[0, 1]).unwrap();
        assert!((ap - 0.5).abs() < 1e-15);
        // no positives: undefined
        assert!(average_precision(&[0.1, 0.2], &[0, 0]).is_err());
        assert!(average_precision(&[f64::NAN], &[1]).is_err());
    }

    #[test]
    fn ap_invariant_under_monotone_score_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(2..15);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut truths: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            truths[0] = 1;
            let base = average_precision(&scores, &truths).unwrap();
            let warped: Vec<f64> = scores.iter().map(|&s| (2.0 * s).tanh() * 5.0 + 1.0).collect();
            let after = average_precision(&warped, &truths).unwrap();
            assert!((base - after).abs() < 1e-12);
        }
    }

    #[test]
    fn map_excludes_zero_positive_classes() {
        // class 0 has positives, class 1 has none
        let batch = EvaluationBatch::new(
            2,
            2,
            vec![0.9, 0.2, 0.1, 0.3],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let (map, per_class) = mean_average_precision(&batch).unwrap();
        assert_eq!(map, 1.0);
        assert_eq!(per_class, vec![Some(1.0), None]);
        // all-empty truth: mAP undefined
        let empty = EvaluationBatch::new(1, 2, vec![0.5, 0.5], vec![0.0, 0.0], vec![0.0, 0.0])
            .unwrap();
        assert!(mean_average_precision(&empty).is_err());
    }

    #[test]
    fn overall_two_thirds_fixture() {
        // tp=2, predicted=3, truth=3 -> OP = OR = OF1 = 2/3
        let truths = [1, 1, 1, 0];
        let preds = [1, 1, 0, 1];
        let m = overall_metrics(&preds, &truths).unwrap();
        assert!((m.op - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.or_ - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.of1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(!m.zero_denominator);
    }

    #[test]
    fn overall_zero_denominator_convention() {
        let m = overall_metrics(&[0, 0], &[1, 0]).unwrap();
        assert_eq!((m.op, m.or_, m.of1), (0.0, 0.0, 0.0));
        assert!(m.zero_denominator);
        let m = overall_metrics(&[0, 0], &[0, 0]).unwrap();
        assert_eq!((m.op, m.or_, m.of1), (0.0, 0.0, 0.0));
        assert!(m.zero_denominator);
        // perfect empty-free agreement
        let m = overall_metrics(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((m.op, m.or_, m.of1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn random_batches_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let n = rng.gen_range(1..=8);
            let c = rng.gen_range(1..=6);
            let scores: Vec<f64> = (0..n * c).map(|_| rng.gen_range(0.0..1.0)).collect();
            let truths: Vec<f64> = (0..n * c).map(|_| f64::from(rng.gen_range(0u8..2))).collect();
            let preds: Vec<f64> = (0..n * c).map(|_| f64::from(rng.gen_range(0u8..2))).collect();
            let batch = EvaluationBatch::new(n, c, scores.clone(), truths.clone(), preds.clone())
                .unwrap();
            // per-class AP and exclusion rule
            let mut defined = Vec::new();
            for j in 0..c {
                let s: Vec<f64> = (0..n).map(|i| scores[i * c + j]).collect();
                let t: Vec<u8> = (0..n).map(|i| truths[i * c + j] as u8).collect();
                if let Some(ap) = brute_force_ap(&s, &t) {
                    defined.push(ap);
                }
            }
            match mean_average_precision(&batch) {
                Ok((map, _)) => {
                    let want = defined.iter().sum::<f64>() / defined.len() as f64;
                    assert!((map - want).abs() < 1e-9);
                }
                Err(_) => assert!(defined.is_empty()),
            }
            // micro metrics against direct counting over all slots
            let pb: Vec<u8> = preds.iter().map(|&p| p as u8).collect();
            let tb: Vec<u8> = truths.iter().map(|&t| t as u8).collect();
            let tp = pb.iter().zip(&tb).filter(|(&p, &t)| p == 1 && t == 1).count() as f64;
            let pp = pb.iter().filter(|&&p| p == 1).count() as f64;
            let tpos = tb.iter().filter(|&&t| t == 1).count() as f64;
            let m = overall_metrics(&pb, &tb).unwrap();
            let op = if pp > 0.0 { tp / pp } else { 0.0 };
            let or_ = if tpos > 0.0 { tp / tpos } else { 0.0 };
            let of1 = if op + or_ > 0.0 { 2.0 * op * or_ / (op + or_) } else { 0.0 };
            assert!((m.op - op).abs() < 1e-12);
            assert!((m.or_ - or_).abs() < 1e-12);
            assert!((m.of1 - of1).abs() < 1e-12);
        }
    }

    #[test]
    fn report_serializes_and_prints() {
        let batch = EvaluationBatch::new(
            2,
            2,
            vec![0.9, 0.2, 0.1, 0.3],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let report = MetricsReport::compute(&batch).unwrap();
        assert_eq!(report.ap_convention, AP_CONVENTION);
        let names = vec!["alpha".to_string(), "beta".to_string()];
        let text = report.to_text(Some(&names));
        assert!(text.contains("alpha") && text.contains("mAP"));
        let csv = report.to_csv(Some(&names));
        assert!(csv.lines().count() >= 4);
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
