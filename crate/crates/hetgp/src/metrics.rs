//! Standardized mean square error and standardized mean log loss.
//!
//! Both criteria are anchored to the trivial predictor that outputs the
//! training mean and variance: SMSE equals one for it, SMLL equals zero.
//! Lower is better for both.

use crate::error::{Error, Result};

/// Predictions on one task's test set, together with the training-output
/// statistics used for standardization.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub y_true: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Mean of the task's training observations.
    pub train_mean: f64,
    /// Variance of the task's training observations.
    pub train_var: f64,
}

impl PredictionSet {
    fn validate(&self) -> Result<()> {
        if self.y_true.is_empty() {
            return Err(Error::contract("empty prediction set"));
        }
        if self.y_true.len() != self.mean.len() || self.y_true.len() != self.var.len() {
            return Err(Error::contract("prediction set lengths disagree"));
        }
        if self.train_var <= 0.0 {
            return Err(Error::contract("training variance must be positive"));
        }
        Ok(())
    }
}

/// Standardized mean square error:
/// `sum_i (y_i - mean_i)^2 / (N * train_var)`.
pub fn smse(p: &PredictionSet) -> Result<f64> {
    p.validate()?;
    let n = p.y_true.len() as f64;
    let sse: f64 = p
        .y_true
        .iter()
        .zip(&p.mean)
        .map(|(y, m)| (y - m) * (y - m))
        .sum();
    Ok(sse / (n * p.train_var))
}

/// Standardized mean log loss: the mean difference between the log density
/// of the trivial train-statistics predictor and the model's log density at
/// the observed test values. Negative values mean the model beats the
/// trivial predictor.
pub fn smll(p: &PredictionSet) -> Result<f64> {
    p.validate()?;
    if p.var.iter().any(|&v| v <= 0.0) {
        return Err(Error::contract("predictive variances must be positive"));
    }
    let log_n = |y: f64, mean: f64, var: f64| {
        let r = y - mean;
        -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + r * r / var)
    };
    let n = p.y_true.len() as f64;
    let total: f64 = (0..p.y_true.len())
        .map(|i| {
            log_n(p.y_true[i], p.train_mean, p.train_var) - log_n(p.y_true[i], p.mean[i], p.var[i])
        })
        .sum();
    Ok(total / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn trivial_set(y: &[f64], train_mean: f64, train_var: f64) -> PredictionSet {
        PredictionSet {
            y_true: y.to_vec(),
            mean: vec![train_mean; y.len()],
            var: vec![train_var; y.len()],
            train_mean,
            train_var,
        }
    }

    #[test]
    fn perfect_prediction_has_zero_smse() {
        let y = vec![0.3, -0.7, 1.2];
        let p = PredictionSet {
            y_true: y.clone(),
            mean: y,
            var: vec![0.1; 3],
            train_mean: 0.0,
            train_var: 1.0,
        };
        assert_relative_eq!(smse(&p).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn train_mean_predictor_scores_one_when_spread_matches() {
        // construct test values whose spread around the training mean equals
        // the training variance exactly
        let y = vec![1.0, -1.0, 1.0, -1.0];
        let p = trivial_set(&y, 0.0, 1.0);
        assert_relative_eq!(smse(&p).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn smse_matches_scalar_formula() {
        let mut rng = StdRng::seed_from_u64(2);
        let n = 40;
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = PredictionSet {
            y_true: y.clone(),
            mean: m.clone(),
            var: vec![0.2; n],
            train_mean: 0.4,
            train_var: 1.7,
        };
        let mut sse = 0.0;
        for i in 0..n {
            sse += (y[i] - m[i]).powi(2);
        }
        assert_relative_eq!(smse(&p).unwrap(), sse / (n as f64 * 1.7), epsilon = 1e-13);
    }

    #[test]
    fn smse_depends_only_on_residuals_and_train_var() {
        let y = vec![0.5, 1.5, -0.4];
        let m = vec![0.4, 1.8, -0.2];
        let base = PredictionSet {
            y_true: y.clone(),
            mean: m.clone(),
            var: vec![0.1; 3],
            train_mean: 0.0,
            train_var: 0.9,
        };
        let shifted = PredictionSet {
            y_true: y.iter().map(|v| v + 10.0).collect(),
            mean: m.iter().map(|v| v + 10.0).collect(),
            var: vec![0.1; 3],
            train_mean: 10.0,
            train_var: 0.9,
        };
        assert_relative_eq!(smse(&base).unwrap(), smse(&shifted).unwrap(), epsilon = 1e-13);
    }

    #[test]
    fn train_statistics_predictor_has_zero_smll() {
        let y = vec![0.2, -0.5, 0.9, 1.4];
        let p = trivial_set(&y, 0.3, 0.8);
        assert_relative_eq!(smll(&p).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn sharp_correct_predictions_have_negative_smll() {
        let y = vec![0.2, -0.5, 0.9];
        let p = PredictionSet {
            y_true: y.clone(),
            mean: y.clone(),
            var: vec![1e-3; 3],
            train_mean: 0.0,
            train_var: 1.0,
        };
        assert!(smll(&p).unwrap() < 0.0);

        // shrinking the variance further at exactly-correct points improves it
        let sharper = PredictionSet {
            var: vec![1e-5; 3],
            ..p.clone()
        };
        assert!(smll(&sharper).unwrap() < smll(&p).unwrap());
    }

    #[test]
    fn smll_matches_scalar_formula() {
        let mut rng = StdRng::seed_from_u64(5);
        let n = 25;
        let p = PredictionSet {
            y_true: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
            mean: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
            var: (0..n).map(|_| rng.random_range(0.01..2.0)).collect(),
            train_mean: 0.1,
            train_var: 1.3,
        };
        let log_n = |y: f64, m: f64, v: f64| {
            -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (y - m) * (y - m) / v)
        };
        let mut total = 0.0;
        for i in 0..n {
            total += log_n(p.y_true[i], 0.1, 1.3) - log_n(p.y_true[i], p.mean[i], p.var[i]);
        }
        assert_relative_eq!(smll(&p).unwrap(), total / n as f64, epsilon = 1e-13);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let empty = PredictionSet {
            y_true: vec![],
            mean: vec![],
            var: vec![],
            train_mean: 0.0,
            train_var: 1.0,
        };
        assert!(smse(&empty).is_err());
        let bad_var = PredictionSet {
            y_true: vec![0.0],
            mean: vec![0.0],
            var: vec![0.0],
            train_mean: 0.0,
            train_var: 1.0,
        };
        assert!(smll(&bad_var).is_err());
        let bad_train = PredictionSet {
            y_true: vec![0.0],
            mean: vec![0.0],
            var: vec![1.0],
            train_mean: 0.0,
            train_var: 0.0,
        };
        assert!(smse(&bad_train).is_err());
    }
}
