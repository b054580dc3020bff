use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::MetricsError;

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }

    /// `2tp / (2tp + fp + fn)`, zero when the denominator is zero.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<ClassScore>,
    /// Unweighted mean over all classes.
    pub macro_f1: f64,
    /// Support-weighted mean; zero-support classes carry no weight.
    pub weighted_f1: f64,
}

fn as_sets(rows: &[Vec<String>], classes: &[String]) -> Result<Vec<BTreeSet<usize>>, MetricsError> {
    rows.iter()
        .map(|labels| {
            labels
                .iter()
                .map(|l| classes.iter().position(|c| c == l).ok_or_else(|| MetricsError::UnknownClass(l.clone())))
                .collect()
        })
        .collect()
}

fn report_from_sets(truth: &[BTreeSet<usize>], pred: &[BTreeSet<usize>], classes: &[String]) -> F1Report {
    let mut counts = vec![ConfusionCounts::default(); classes.len()];
    for (t, p) in truth.iter().zip(pred) {
        for (c, cc) in counts.iter_mut().enumerate() {
            match (t.contains(&c), p.contains(&c)) {
                (true, true) => cc.tp += 1,
                (false, true) => cc.fp += 1,
                (true, false) => cc.fn_ += 1,
                (false, false) => cc.tn += 1,
            }
        }
    }
    let per_class: Vec<ClassScore> = classes
        .iter()
        .zip(&counts)
        .map(|(name, cc)| ClassScore {
            class: name.clone(),
            f1: cc.f1(),
            precision: cc.precision(),
            recall: cc.recall(),
            support: cc.support(),
            counts: *cc,
        })
        .collect();
    let macro_f1 = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64
    };
    let total: usize = per_class.iter().map(|c| c.support).sum();
    let weighted_f1 = if total == 0 {
        0.0
    } else {
        per_class.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / total as f64
    };
    F1Report { per_class, macro_f1, weighted_f1 }
}

/// Per-class, macro and weighted F1 for single- or multi-label data. Each row
/// lists the labels of one sample.
pub fn f1_scores(truth: &[Vec<String>], pred: &[Vec<String>], classes: &[String]) -> Result<F1Report, MetricsError> {
    if truth.len() != pred.len() {
        return Err(MetricsError::LengthMismatch(truth.len(), pred.len()));
    }
    Ok(report_from_sets(&as_sets(truth, classes)?, &as_sets(pred, classes)?, classes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_samples: usize,
    pub threshold: f64,
    #[serde(flatten)]
    pub scores: F1Report,
}

/// Thresholds probability rows (`p >= threshold` predicts the class) and scores them.
pub fn evaluate_dataset(
    truth: &[Vec<String>],
    prob_rows: &[Vec<f64>],
    classes: &[String],
    threshold: f64,
) -> Result<EvaluationReport, MetricsError> {
    if truth.len() != prob_rows.len() {
        return Err(MetricsError::LengthMismatch(truth.len(), prob_rows.len()));
    }
    if let Some(row) = prob_rows.iter().find(|r| r.len() != classes.len()) {
        return Err(MetricsError::LengthMismatch(row.len(), classes.len()));
    }
    if prob_rows.iter().flatten().any(|p| !p.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let pred: Vec<BTreeSet<usize>> = prob_rows
        .iter()
        .map(|row| row.iter().enumerate().filter(|(_, &p)| p >= threshold).map(|(i, _)| i).collect())
        .collect();
    let scores = report_from_sets(&as_sets(truth, classes)?, &pred, classes);
    Ok(EvaluationReport { n_samples: truth.len(), threshold, scores })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(xs: &[&str]) -> Vec<Vec<String>> {
        xs.iter().map(|x| vec![x.to_string()]).collect()
    }

    fn classes(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn hand_example() {
        let r = f1_scores(&labels(&["A", "A", "B", "B"]), &labels(&["A", "B", "B", "B"]), &classes(&["A", "B"])).unwrap();
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[1].f1 - 0.8).abs() < 1e-12);
        assert!((r.macro_f1 - 0.733_333_333_333_333_3).abs() < 1e-12);
        assert!((r.weighted_f1 - 0.733_333_333_333_333_3).abs() < 1e-12);
    }

    #[test]
    fn absent_class_has_no_weight() {
        let r = f1_scores(&labels(&["A", "A"]), &labels(&["A", "A"]), &classes(&["A", "C"])).unwrap();
        assert_eq!(r.per_class[1].f1, 0.0);
        assert_eq!(r.weighted_f1, 1.0);
        assert_eq!(r.macro_f1, 0.5);
    }

    #[test]
    fn errors() {
        let c = classes(&["A"]);
        assert_eq!(f1_scores(&labels(&["A"]), &[], &c), Err(MetricsError::LengthMismatch(1, 0)));
        assert_eq!(f1_scores(&labels(&["Z"]), &labels(&["A"]), &c), Err(MetricsError::UnknownClass("Z".into())));
    }

    #[test]
    fn thresholded_evaluation() {
        let c = classes(&["A", "B"]);
        let truth = vec![vec!["A".to_string()], vec!["A".to_string(), "B".to_string()]];
        let perfect = evaluate_dataset(&truth, &[vec![1.0, 0.0], vec![1.0, 1.0]], &c, 0.5).unwrap();
        assert_eq!(perfect.scores.weighted_f1, 1.0);
        let zeros = evaluate_dataset(&truth, &[vec![0.0, 0.0], vec![0.0, 0.0]], &c, 0.5).unwrap();
        assert!(zeros.scores.per_class.iter().all(|s| s.f1 == 0.0));
    }
}
