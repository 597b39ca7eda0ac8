use thiserror::Error;

use crate::lvlm_client::Verdict;
use crate::Label;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{preds} predictions for {golds} labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("no predictions to score")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 of one class; every `0/0` (precision, recall or F1) is taken as 0.
/// Abstentions count as misses for the gold class and never as a prediction.
pub fn class_f1(preds: &[Verdict], golds: &[Label], class: Label) -> f64 {
    let target = Verdict::from(class);
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in preds.iter().zip(golds) {
        match (*p == target, *g == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Accuracy and macro-F1 over {real, fake}.
pub fn compute_metrics(preds: &[Verdict], golds: &[Label]) -> Result<Metrics, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let correct = preds.iter().zip(golds).filter(|(p, g)| p.label() == Some(**g)).count();
    let macro_f1 = Label::ALL.iter().map(|&c| class_f1(preds, golds, c)).sum::<f64>() / 2.0;
    Ok(Metrics {
        accuracy: correct as f64 / preds.len() as f64,
        macro_f1,
    })
}

/// Mean and population standard deviation. Empty input gives `(0, 0)`.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
