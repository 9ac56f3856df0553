//! Clip-level tagging metrics and weighted-majority late fusion.

use std::io::Write;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One clip's thresholded prediction against its weak reference labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagResult {
    pub id: String,
    pub predicted: Vec<bool>,
    pub reference: Vec<bool>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Precision and recall are 0 when their denominators are 0; F1 is 0
    /// when `P + R = 0`.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counts {
    tp: u64,
    fp: u64,
    fn_: u64,
}

fn check_results(results: &[TagResult]) -> Result<usize> {
    let n = results.first().ok_or(Error::EmptyResults)?.reference.len();
    for r in results {
        if r.predicted.len() != n || r.reference.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "clip `{}`: {} predicted / {} reference labels, expected {n}",
                r.id,
                r.predicted.len(),
                r.reference.len()
            )));
        }
    }
    Ok(n)
}

fn class_counts(results: &[TagResult], n_classes: usize) -> Vec<Counts> {
    let mut counts = vec![Counts::default(); n_classes];
    for r in results {
        for (c, (&p, &y)) in counts.iter_mut().zip(r.predicted.iter().zip(&r.reference)) {
            match (p, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    counts
}

/// Micro-averaged precision, recall and F1 over all (clip, class) pairs.
pub fn micro_prf(results: &[TagResult]) -> Result<Prf> {
    let n = check_results(results)?;
    let total = class_counts(results, n)
        .into_iter()
        .fold(Counts::default(), |a, c| Counts {
            tp: a.tp + c.tp,
            fp: a.fp + c.fp,
            fn_: a.fn_ + c.fn_,
        });
    Ok(Prf::from_counts(total.tp, total.fp, total.fn_))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of clips whose reference includes the class.
    pub support: u64,
}

/// The JSON metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: IndexMap<String, ClassMetrics>,
}

pub fn metrics_report(results: &[TagResult], class_names: &[String]) -> Result<MetricsReport> {
    let n = check_results(results)?;
    if class_names.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} class names for {n} classes",
            class_names.len()
        )));
    }
    let micro = micro_prf(results)?;
    let per_class = class_names
        .iter()
        .cloned()
        .zip(class_counts(results, n))
        .map(|(name, c)| {
            let p = Prf::from_counts(c.tp, c.fp, c.fn_);
            (
                name,
                ClassMetrics {
                    precision: p.precision,
                    recall: p.recall,
                    f1: p.f1,
                    support: c.tp + c.fn_,
                },
            )
        })
        .collect();
    Ok(MetricsReport {
        precision: micro.precision,
        recall: micro.recall,
        f1: micro.f1,
        per_class,
    })
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Single-label confusion counts: row = first reference label, column =
/// top-scoring class (lowest index on ties).
pub fn confusion_matrix(results: &[TagResult]) -> Result<Vec<Vec<u64>>> {
    let n = check_results(results)?;
    let mut m = vec![vec![0u64; n]; n];
    for r in results {
        let truth = r
            .reference
            .iter()
            .position(|&y| y)
            .ok_or_else(|| Error::NoReferenceLabel(r.id.clone()))?;
        if r.scores.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "clip `{}` has {} scores, expected {n}",
                r.id,
                r.scores.len()
            )));
        }
        m[truth][argmax(&r.scores)] += 1;
    }
    Ok(m)
}

/// Writes the matrix as CSV with class names heading both rows and columns.
pub fn write_confusion_csv<W: Write>(matrix: &[Vec<u64>], class_names: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::InvalidConfig(format!("writing CSV: {e}"));
    let mut header = vec![String::new()];
    header.extend(class_names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (name, row) in class_names.iter().zip(matrix) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("confusion matrix", e))
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidWeights(format!(
            "weights must be finite and non-negative: {weights:?}"
        )));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::AllZeroWeights);
    }
    Ok(())
}

/// Weighted majority vote over binary decision matrices (clips × classes).
/// A cell is positive when the weight voting for it is at least half of the
/// total weight.
pub fn fuse(decisions: &[Vec<Vec<bool>>], weights: &[f64]) -> Result<Vec<Vec<bool>>> {
    if decisions.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} decision matrices", weights.len()),
            got: format!("{}", decisions.len()),
        });
    }
    check_weights(weights)?;
    let first = &decisions[0];
    for d in decisions {
        if d.len() != first.len() || d.iter().zip(first).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::ShapeMismatch {
                expected: "identically shaped decision matrices".into(),
                got: format!("{} vs {} clips", d.len(), first.len()),
            });
        }
    }
    Ok((0..first.len())
        .map(|c| {
            (0..first[c].len())
                .map(|n| {
                    // yes >= total/2  <=>  yes >= no
                    let (mut yes, mut no) = (0.0, 0.0);
                    for (d, &w) in decisions.iter().zip(weights) {
                        if d[c][n] {
                            yes += w;
                        } else {
                            no += w;
                        }
                    }
                    yes >= no
                })
                .collect()
        })
        .collect())
}

/// Voting weights proportional to each member's validation score.
pub fn validation_weights(val_scores: &[f64]) -> Result<Vec<f64>> {
    if val_scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidWeights(format!(
            "validation scores must be finite and non-negative: {val_scores:?}"
        )));
    }
    let total: f64 = val_scores.iter().sum();
    if total == 0.0 {
        return Err(Error::AllZeroScores);
    }
    Ok(val_scores.iter().map(|s| s / total).collect())
}

/// Late-fusion ensemble over member decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionEnsemble {
    weights: Vec<f64>,
}

impl FusionEnsemble {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_weights(&weights)?;
        let total: f64 = weights.iter().sum();
        Ok(Self {
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn from_validation(val_scores: &[f64]) -> Result<Self> {
        Ok(Self {
            weights: validation_weights(val_scores)?,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn fuse(&self, decisions: &[Vec<Vec<bool>>]) -> Result<Vec<Vec<bool>>> {
        fuse(decisions, &self.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(pred: &[bool], reference: &[bool]) -> TagResult {
        TagResult {
            id: "c".into(),
            predicted: pred.to_vec(),
            reference: reference.to_vec(),
            scores: pred.iter().map(|&p| if p { 0.9 } else { 0.1 }).collect(),
        }
    }

    #[test]
    fn over_prediction() {
        let p = micro_prf(&[result(&[true, true], &[true, false])]).unwrap();
        assert_eq!(p.precision, 0.5);
        assert_eq!(p.recall, 1.0);
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_silent() {
        let p = micro_prf(&[result(&[true, false], &[true, false])]).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = micro_prf(&[result(&[false, false], &[true, false])]).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        assert!(matches!(micro_prf(&[]), Err(Error::EmptyResults)));
    }

    #[test]
    fn confusion_examples() {
        let mk = |r: usize, s: usize| TagResult {
            id: format!("{r}{s}"),
            predicted: vec![false; 3],
            reference: (0..3).map(|i| i == r).collect(),
            scores: (0..3).map(|i| if i == s { 0.9 } else { 0.1 }).collect(),
        };
        let perfect = confusion_matrix(&[mk(0, 0), mk(1, 1), mk(2, 2), mk(1, 1)]).unwrap();
        assert_eq!(perfect, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let all_last = confusion_matrix(&[mk(0, 2), mk(1, 2), mk(2, 2)]).unwrap();
        assert!(all_last.iter().all(|row| row[0] == 0 && row[1] == 0 && row[2] == 1));
        let total: u64 = all_last.iter().flatten().sum();
        assert_eq!(total, 3);

        let mut none = mk(0, 0);
        none.reference = vec![false; 3];
        assert!(matches!(confusion_matrix(&[none]), Err(Error::NoReferenceLabel(_))));
    }

    #[test]
    fn confusion_csv_layout() {
        let names = vec!["Car alarm".to_string(), "Car".to_string()];
        let mut buf = Vec::new();
        write_confusion_csv(&[vec![2, 1], vec![0, 3]], &names, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), ",Car alarm,Car\nCar alarm,2,1\nCar,0,3\n");
    }

    #[test]
    fn fusion_examples() {
        let d = |v: bool| vec![vec![v]];
        let fused = fuse(&[d(true), d(false), d(true)], &[0.5, 0.3, 0.2]).unwrap();
        assert!(fused[0][0]);
        let fused = fuse(&[d(false), d(true), d(true)], &[0.6, 0.2, 0.1]).unwrap();
        assert!(!fused[0][0]);
        // exact tie goes positive
        let fused = fuse(&[d(true), d(false)], &[1.0, 1.0]).unwrap();
        assert!(fused[0][0]);
        let m = vec![vec![true, false], vec![false, true]];
        assert_eq!(fuse(std::slice::from_ref(&m), &[0.01]).unwrap(), m);
        assert!(matches!(fuse(std::slice::from_ref(&m), &[0.0]), Err(Error::AllZeroWeights)));
        assert!(matches!(
            fuse(&[m.clone(), vec![vec![true]]], &[1.0, 1.0]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn validation_weight_examples() {
        assert_eq!(validation_weights(&[0.3, 0.3]).unwrap(), vec![0.5, 0.5]);
        let w = validation_weights(&[0.6, 0.2, 0.2]).unwrap();
        for (a, b) in w.iter().zip([0.6, 0.2, 0.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        let scaled = validation_weights(&[1.8, 0.6, 0.6]).unwrap();
        for (a, b) in w.iter().zip(&scaled) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(validation_weights(&[0.0, 0.0]), Err(Error::AllZeroScores)));
    }

    #[test]
    fn report_keeps_class_order() {
        let names: Vec<String> = ["b", "a"].iter().map(|s| s.to_string()).collect();
        let r = metrics_report(&[result(&[true, false], &[true, true])], &names).unwrap();
        let keys: Vec<_> = r.per_class.keys().cloned().collect();
        assert_eq!(keys, names);
        assert_eq!(r.per_class["a"].support, 1);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.starts_with("{\"precision\":1.0,\"recall\":0.5"));
    }
}
