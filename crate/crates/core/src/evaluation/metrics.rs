use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Error metrics of one fold (or their fold average). `mape` is a fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub mape: f64,
    pub training_time_seconds: f64,
}

pub fn compute_metrics(y_true: &[f64], y_pred: &[f64], training_time_seconds: f64) -> Result<FoldMetrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::invalid(format!(
            "{} targets but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    if let Some(y) = y_true.iter().find(|&&y| !(y > 0.0) || !y.is_finite()) {
        return Err(Error::invalid(format!("target {y} is not strictly positive; MAPE undefined")));
    }
    if let Some(p) = y_pred.iter().find(|p| !p.is_finite()) {
        return Err(Error::invalid(format!("non-finite prediction {p}")));
    }
    let n = y_true.len() as f64;
    let (mut se, mut ae, mut pe) = (0.0, 0.0, 0.0);
    for (&y, &p) in y_true.iter().zip(y_pred) {
        let e = (y - p).abs();
        se += e * e;
        ae += e;
        pe += e / y;
    }
    let mse = se / n;
    Ok(FoldMetrics {
        mse,
        rmse: mse.sqrt(),
        mae: ae / n,
        mape: pe / n,
        training_time_seconds,
    })
}

/// Order-independent mean: summing in sorted order makes the result
/// bitwise identical under any permutation of the rows.
fn mean_of(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Field-wise arithmetic mean. The aggregate `rmse` is the mean of the
/// per-fold values, not the root of the aggregate `mse`.
pub fn aggregate_folds(rows: &[FoldMetrics]) -> Result<FoldMetrics> {
    if rows.is_empty() {
        return Err(Error::invalid("cannot aggregate zero folds"));
    }
    let field = |f: fn(&FoldMetrics) -> f64| mean_of(rows.iter().map(f).collect());
    Ok(FoldMetrics {
        mse: field(|m| m.mse),
        rmse: field(|m| m.rmse),
        mae: field(|m| m.mae),
        mape: field(|m| m.mape),
        training_time_seconds: field(|m| m.training_time_seconds),
    })
}
