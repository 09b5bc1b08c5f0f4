//! Regression and polarity metrics for sentiment scores in `[-3, 3]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which samples count for binary accuracy and F1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Acc2Convention {
    /// Negative vs positive over samples with a nonzero label.
    #[default]
    NonZero,
    /// `< 0` vs `>= 0` over all samples.
    NonNegative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc2: f64,
    pub f1: f64,
    pub mae: f64,
    pub corr: f64,
    pub acc7: f64,
    pub n_eval: usize,
    pub n_excluded_zero: usize,
    /// Set when either vector was constant and `corr` was defined as 0.
    pub corr_degenerate: bool,
}

pub fn evaluate(predictions: &[f64], labels: &[f64]) -> Result<EvalReport> {
    evaluate_with(predictions, labels, Acc2Convention::NonZero)
}

pub fn evaluate_with(predictions: &[f64], labels: &[f64], convention: Acc2Convention) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Input("cannot evaluate zero samples".into()));
    }
    let n = predictions.len();

    let mut considered = 0usize;
    let (mut correct, mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in predictions.iter().zip(labels) {
        let truth = match convention {
            Acc2Convention::NonZero if y == 0.0 => continue,
            Acc2Convention::NonZero => y > 0.0,
            Acc2Convention::NonNegative => y >= 0.0,
        };
        considered += 1;
        let predicted = p >= 0.0;
        if predicted == truth {
            correct += 1;
        }
        match (predicted, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let acc2 = ratio(correct, considered);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };

    let mae = predictions.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / n as f64;
    let (corr, corr_degenerate) = pearson(predictions, labels);
    let acc7 = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| acc7_class(**p) == acc7_class(**y))
        .count() as f64
        / n as f64;

    Ok(EvalReport {
        acc2,
        f1,
        mae,
        corr,
        acc7,
        n_eval: n,
        n_excluded_zero: n - considered,
        corr_degenerate,
    })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Seven-way class: round half away from zero, clamped to `-3..=3`.
pub fn acc7_class(score: f64) -> i32 {
    score.round().clamp(-3.0, 3.0) as i32
}

/// Pearson correlation; `(0, true)` when either side has zero variance or
/// fewer than two samples.
pub fn pearson(x: &[f64], y: &[f64]) -> (f64, bool) {
    let n = x.len();
    if n < 2 {
        return (0.0, true);
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return (0.0, true);
    }
    ((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0), false)
}
