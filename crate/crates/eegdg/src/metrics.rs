//! Scoring: accuracy, chance-corrected kappa, and confusion matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of exact matches.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::contract("accuracy of an empty prediction set"));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Chance-corrected agreement (acc - r) / (1 - r) with r = 1/class_count,
/// the balanced-class chance rate.
pub fn kappa(acc: f64, class_count: usize) -> Result<f64> {
    if class_count < 2 {
        return Err(Error::contract(format!(
            "kappa needs at least 2 classes, got {class_count}"
        )));
    }
    if !(0.0..=1.0).contains(&acc) {
        return Err(Error::contract(format!("accuracy {acc} outside [0, 1]")));
    }
    let r = 1.0 / class_count as f64;
    Ok((acc - r) / (1.0 - r))
}

/// confusion[truth][pred] counts.
pub fn confusion(pred: &[usize], truth: &[usize], class_count: usize) -> Result<Vec<Vec<usize>>> {
    if pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut m = vec![vec![0usize; class_count]; class_count];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= class_count || t >= class_count {
            return Err(Error::contract(format!(
                "label pair ({t}, {p}) outside {class_count} classes"
            )));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// One evaluation's scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub kappa: f64,
    pub confusion: Vec<Vec<usize>>,
    pub n_samples: usize,
}

pub fn report(pred: &[usize], truth: &[usize], class_count: usize) -> Result<MetricsReport> {
    let acc = accuracy(pred, truth)?;
    Ok(MetricsReport {
        accuracy: acc,
        kappa: kappa(acc, class_count)?,
        confusion: confusion(pred, truth, class_count)?,
        n_samples: pred.len(),
    })
}
