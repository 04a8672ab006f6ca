//! Evaluation quantities for fitted predictors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{ComposedPredictor, LinearPredictor, Predictor};
use crate::linalg::{shape, Matrix};
use crate::synth::TrajectoryDataset;

fn same_dim(a: &LinearPredictor, b: &LinearPredictor, context: &'static str) -> Result<()> {
    if a.theta.shape() != b.theta.shape() {
        return Err(Error::DimensionMismatch {
            context,
            expected: shape(&a.theta),
            found: shape(&b.theta),
        });
    }
    Ok(())
}

/// `‖θ − θ̂‖² / ‖θ‖²`.
pub fn relative_parameter_mse(estimate: &LinearPredictor, truth: &LinearPredictor) -> Result<f64> {
    same_dim(truth, estimate, "relative mse")?;
    let denom = truth.theta.norm_squared();
    if denom == 0.0 {
        return Err(Error::invalid("truth", "true parameter has zero norm"));
    }
    Ok((&estimate.theta - &truth.theta).norm_squared() / denom)
}

/// `‖θ − θ̂‖²`.
pub fn parameter_sq_error(estimate: &LinearPredictor, truth: &LinearPredictor) -> Result<f64> {
    same_dim(truth, estimate, "parameter error")?;
    Ok((&estimate.theta - &truth.theta).norm_squared())
}

/// Coefficient of determination against the mean of `actuals`.
pub fn r_squared(predictions: &Matrix, actuals: &Matrix) -> Result<f64> {
    if predictions.shape() != actuals.shape() || actuals.ncols() != 1 {
        return Err(Error::DimensionMismatch {
            context: "r-squared",
            expected: shape(actuals),
            found: shape(predictions),
        });
    }
    if actuals.nrows() < 2 {
        return Err(Error::invalid("actuals", "r-squared needs at least two rows"));
    }
    let mean = actuals.mean();
    let total: f64 = actuals.iter().map(|a| (a - mean).powi(2)).sum();
    if total == 0.0 {
        return Err(Error::ConstantActuals);
    }
    let residual = (predictions - actuals).norm_squared();
    Ok(1.0 - residual / total)
}

/// Mean squared error of `predictor` on the held-out baseline rows.
pub fn empirical_risk(predictor: &dyn Predictor, test: &TrajectoryDataset) -> Result<f64> {
    let pred = predictor.predict(test.baseline())?;
    Ok((pred - test.outcomes()).norm_squared() / test.len() as f64)
}

/// Per-dataset MSE-gap term `‖θ̂_OLS − θ̂_LuPTS‖²`.
pub fn mse_gap(theta_ols: &LinearPredictor, theta_lupts: &LinearPredictor) -> Result<f64> {
    same_dim(theta_ols, theta_lupts, "mse gap")?;
    Ok((&theta_ols.theta - &theta_lupts.theta).norm_squared())
}

/// Held-out estimates of the three risks in the composed-predictor bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskTerms {
    /// mean `(Y − ĝ(f̂(X₁)))²`
    pub total: f64,
    /// mean `(ĝ(f̂(X₁)) − ĝ(X_T))²`
    pub dynamics: f64,
    /// mean `(Y − ĝ(X_T))²`
    pub outcome: f64,
    /// Monte Carlo standard error of `total`.
    pub total_stderr: f64,
}

impl RiskTerms {
    /// `R_dyn + R_out + 2√(R_dyn·R_out)`.
    pub fn bound(&self) -> f64 {
        self.dynamics + self.outcome + 2.0 * (self.dynamics * self.outcome).sqrt()
    }
}

pub fn risk_expansion_terms(
    composed: &ComposedPredictor,
    test: &TrajectoryDataset,
) -> Result<RiskTerms> {
    if test.horizon() != composed.step_models.len() + 1 {
        return Err(Error::DimensionMismatch {
            context: "risk expansion horizon",
            expected: format!("{} state blocks", composed.step_models.len() + 1),
            found: format!("{}", test.horizon()),
        });
    }
    let simulated = composed.predict(test.baseline())?;
    let from_last = composed.outcome(test.last_state())?;
    let y = test.outcomes();
    let m = test.len() as f64;

    let total_sq: Vec<f64> = (y - &simulated).iter().map(|r| r * r).collect();
    let total = total_sq.iter().sum::<f64>() / m;
    let dynamics = (&simulated - &from_last).norm_squared() / m;
    let outcome = (y - &from_last).norm_squared() / m;
    let total_stderr = Summary::of(&total_sq).stderr;
    Ok(RiskTerms {
        total,
        dynamics,
        outcome,
        total_stderr,
    })
}

/// Mean, sample standard deviation and standard error of a set of values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
}

impl Summary {
    /// Empty input gives NaN statistics with count 0; a single value has std 0.
    pub fn of(values: &[f64]) -> Self {
        let count = values.len();
        if count == 0 {
            return Self {
                count,
                mean: f64::NAN,
                std: f64::NAN,
                stderr: f64::NAN,
            };
        }
        let n = count as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if count > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            count,
            mean,
            std,
            stderr: std / n.sqrt(),
        }
    }
}

/// Standard error of a difference of two independent means.
pub fn combined_stderr(a: &Summary, b: &Summary) -> f64 {
    (a.stderr.powi(2) + b.stderr.powi(2)).sqrt()
}

/// One replicate's evaluation of one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub estimator: String,
    pub seed: u64,
    pub replicate: usize,
    pub axis_name: String,
    pub axis_value: f64,
    pub n: usize,
    pub horizon: usize,
    pub dim: usize,
    /// Absent when no ground truth exists (ingested data).
    pub relative_mse: Option<f64>,
    pub r_squared: Option<f64>,
    pub empirical_risk: Option<f64>,
    /// `‖θ̂_OLS − θ̂‖²` against the baseline fit on the same data.
    pub gap: Option<f64>,
    pub extra: BTreeMap<String, f64>,
    /// Set when the fit or evaluation failed; such rows are excluded from aggregates.
    pub error: Option<String>,
}

impl MetricRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "relative_mse" => self.relative_mse,
            "r_squared" => self.r_squared,
            "empirical_risk" => self.empirical_risk,
            "gap" => self.gap,
            other => self.extra.get(other).copied(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{fit_composed, fit_lupts, RegressorSpec};
    use crate::synth::{generate_system, sample_trajectories, RngStream, SystemParams};
    use approx::assert_abs_diff_eq;

    fn lp(v: &[f64]) -> LinearPredictor {
        LinearPredictor::new(Matrix::from_column_slice(v.len(), 1, v), 0.0).unwrap()
    }

    fn col(v: &[f64]) -> Matrix {
        Matrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn relative_mse_examples() {
        let truth = lp(&[3.0, 4.0]);
        assert_eq!(relative_parameter_mse(&truth, &truth).unwrap(), 0.0);
        assert_eq!(relative_parameter_mse(&lp(&[0.0, 0.0]), &truth).unwrap(), 1.0);
        assert_abs_diff_eq!(
            relative_parameter_mse(&lp(&[0.0, 4.0]), &truth).unwrap(),
            0.36,
            epsilon = 1e-15
        );
        assert!(relative_parameter_mse(&truth, &lp(&[0.0, 0.0])).is_err());
        assert!(relative_parameter_mse(&lp(&[1.0]), &truth).is_err());
    }

    #[test]
    fn relative_mse_is_scale_free() {
        let truth = lp(&[1.5, -2.0, 0.3]);
        let est = lp(&[1.0, -1.0, 0.0]);
        let base = relative_parameter_mse(&est, &truth).unwrap();
        for c in [-3.0, 0.01, 7.5] {
            let scaled = relative_parameter_mse(
                &LinearPredictor::new(&est.theta * c, 0.0).unwrap(),
                &LinearPredictor::new(&truth.theta * c, 0.0).unwrap(),
            )
            .unwrap();
            assert_abs_diff_eq!(scaled, base, epsilon = 1e-12);
        }
    }

    #[test]
    fn r_squared_examples() {
        let a = col(&[1.0, 3.0, 2.0, 7.0]);
        assert_eq!(r_squared(&a, &a).unwrap(), 1.0);
        let mean = Matrix::from_element(4, 1, a.mean());
        assert_abs_diff_eq!(r_squared(&mean, &a).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            r_squared(&col(&[1.0, 1.0]), &col(&[0.0, 2.0])).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        assert!(matches!(
            r_squared(&col(&[1.0, 2.0]), &col(&[5.0, 5.0])),
            Err(Error::ConstantActuals)
        ));
        assert!(r_squared(&col(&[1.0]), &col(&[1.0])).is_err());
    }

    #[test]
    fn r_squared_shift_invariance() {
        let p = col(&[0.5, 1.0, 2.5, 2.0]);
        let a = col(&[1.0, 0.0, 3.0, 2.0]);
        let base = r_squared(&p, &a).unwrap();
        for c in [-10.0, 0.5, 100.0] {
            let shifted = r_squared(&p.add_scalar(c), &a.add_scalar(c)).unwrap();
            assert_abs_diff_eq!(shifted, base, epsilon = 1e-10);
        }
    }

    #[test]
    fn empirical_risk_examples() {
        let x1 = col(&[1.0, -2.0, 0.5]);
        let y = &x1 * 2.0;
        let test = TrajectoryDataset::new(vec![x1.clone(), x1], y.clone()).unwrap();
        assert_eq!(empirical_risk(&lp(&[2.0]), &test).unwrap(), 0.0);
        // zero predictor: mean of Y²
        let expected = y.norm_squared() / 3.0;
        assert_abs_diff_eq!(empirical_risk(&lp(&[0.0]), &test).unwrap(), expected, epsilon = 1e-15);
        assert!(empirical_risk(&lp(&[0.0, 1.0]), &test).is_err());
    }

    #[test]
    fn gap_examples() {
        assert_eq!(mse_gap(&lp(&[1.0, 2.0]), &lp(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(mse_gap(&lp(&[1.0, 0.0]), &lp(&[0.0, 1.0])).unwrap(), 2.0);
        assert!(mse_gap(&lp(&[1.0]), &lp(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn risk_terms_vanish_for_exact_noiseless_fit() {
        let params = SystemParams::with_defaults(3, 4).with_noise(0.0, 0.0);
        let spec = generate_system(&params, &mut RngStream::new(1, 0)).unwrap();
        let train = sample_trajectories(&spec, 30, &mut RngStream::new(1, 1)).unwrap();
        let test = sample_trajectories(&spec, 50, &mut RngStream::new(1, 2)).unwrap();
        let composed = fit_lupts(&train).unwrap().to_composed();
        let terms = risk_expansion_terms(&composed, &test).unwrap();
        let scale = test.outcomes().norm_squared() / 50.0;
        let tol = 1e-10 * scale.max(1.0);
        assert!(terms.total <= tol);
        assert!(terms.dynamics <= tol);
        assert!(terms.outcome <= tol);
    }

    #[test]
    fn exact_dynamics_collapse_total_to_outcome_risk() {
        // dynamics noiseless so exact step maps; outcome map arbitrary
        let params = SystemParams::with_defaults(2, 3).with_noise(0.0, 1.0);
        let spec = generate_system(&params, &mut RngStream::new(2, 0)).unwrap();
        let test = sample_trajectories(&spec, 200, &mut RngStream::new(2, 2)).unwrap();
        let composed = ComposedPredictor {
            step_spec: RegressorSpec::LeastSquares,
            outcome_spec: RegressorSpec::LeastSquares,
            step_models: spec.transitions.clone(),
            outcome_model: col(&[0.3, -7.0]),
            state_offsets: vec![nalgebra::DVector::zeros(2); 3],
            outcome_offset: 0.0,
        };
        let terms = risk_expansion_terms(&composed, &test).unwrap();
        assert!(terms.dynamics <= 1e-20 * (1.0 + terms.outcome) + 1e-18);
        assert_abs_diff_eq!(terms.total, terms.outcome, epsilon = 1e-9 * terms.outcome);
    }

    #[test]
    fn bound_holds_on_a_misfit_model() {
        let spec = generate_system(&SystemParams::with_defaults(3, 4), &mut RngStream::new(3, 0))
            .unwrap();
        let train = sample_trajectories(&spec, 8, &mut RngStream::new(3, 1)).unwrap();
        let test = sample_trajectories(&spec, 5000, &mut RngStream::new(3, 2)).unwrap();
        let composed = fit_composed(
            &train,
            RegressorSpec::Ridge { lambda_reg: 50.0 },
            RegressorSpec::LeastSquares,
        )
        .unwrap();
        let terms = risk_expansion_terms(&composed, &test).unwrap();
        // Cauchy–Schwarz holds exactly for the empirical measure too
        assert!(terms.total <= terms.bound() * (1.0 + 1e-12));
        assert!(terms.total_stderr > 0.0);
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_abs_diff_eq!(s.std, 2.0_f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(s.stderr, 1.0, epsilon = 1e-15);
        let one = Summary::of(&[4.0]);
        assert_eq!((one.mean, one.std, one.stderr), (4.0, 0.0, 0.0));
        assert_eq!(Summary::of(&[]).count, 0);
    }
}
