use serde::{Deserialize, Serialize};

/// Regression quality over the labeled molecules of one task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub rmse: f64,
    /// `1 − SS_res / SS_tot`; `None` when the labels have no spread.
    pub r2: Option<f64>,
    pub n: usize,
}

/// Metrics of `pred` against `truth`; `None` when there are no pairs.
pub fn regression_metrics(pred: &[f64], truth: &[f64]) -> Option<TaskMetrics> {
    assert_eq!(pred.len(), truth.len(), "one prediction per label");
    let n = truth.len();
    if n == 0 {
        return None;
    }
    let mean = truth.iter().sum::<f64>() / n as f64;
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, y)| (p - y).powi(2)).sum();
    let ss_tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Some(TaskMetrics { rmse: (ss_res / n as f64).sqrt(), r2, n })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let m = regression_metrics(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!((m.rmse, m.r2, m.n), (0.0, Some(1.0), 3));
    }

    #[test]
    fn mean_prediction_scores_zero() {
        let m = regression_metrics(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.r2, Some(0.0));
    }

    #[test]
    fn hand_example() {
        let m = regression_metrics(&[2.0, 4.0], &[1.0, 3.0]).unwrap();
        assert_eq!(m.rmse, 1.0);
        assert_eq!(m.r2, Some(0.0));
    }

    #[test]
    fn degenerate_inputs() {
        assert!(regression_metrics(&[], &[]).is_none());
        assert_eq!(regression_metrics(&[1.0], &[5.0]).unwrap().r2, None);
    }
}
