//! Ground-truth Gaussian-linear systems and trajectory sampling.
//!
//! Row convention: the state block `X_t` is `m × d`, one series per row, and
//! a step is `X_t = X_{t-1} A_{t-1} + E_t`. The outcome is
//! `Y = X_T β + X_1 δ + ε_Y` with the `δ` term present only for
//! Markov-violation studies.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::LinearPredictor;
use crate::linalg::{
    ensure_finite, matrix_chain_product, serde_rows, shape, spectral_radius, Matrix,
};

/// A reproducible random stream keyed by `(master_seed, stream_index)`.
///
/// Backed by ChaCha20 with the stream index as the cipher stream id, so two
/// different indices under one seed never share output.
#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_index: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_index);
        Self {
            master_seed,
            stream_index,
            rng,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_index(&self) -> u64 {
        self.stream_index
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    /// `rows × cols` matrix of i.i.d. `N(mean, std²)` draws, filled row by row.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
        let flat: Vec<f64> = (0..rows * cols)
            .map(|_| mean + std * self.standard_normal())
            .collect();
        Matrix::from_row_slice(rows, cols, &flat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    pub mean: f64,
    pub std: f64,
}

impl Default for InitialState {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 5.0_f64.sqrt(),
        }
    }
}

/// Parameters for [`generate_system`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub dim: usize,
    pub horizon: usize,
    pub kappa: f64,
    pub entry_std: f64,
    /// σ₂..σ_T, one per transition.
    pub noise_scales: Vec<f64>,
    pub outcome_noise: f64,
    pub initial_state: InitialState,
    pub stationary: bool,
}

impl SystemParams {
    /// κ = 1.5, entry std 0.2, unit noise everywhere, `X₁ ~ N(0, 5)`.
    pub fn with_defaults(dim: usize, horizon: usize) -> Self {
        Self {
            dim,
            horizon,
            kappa: 1.5,
            entry_std: 0.2,
            noise_scales: vec![1.0; horizon.saturating_sub(1)],
            outcome_noise: 1.0,
            initial_state: InitialState::default(),
            stationary: false,
        }
    }

    pub fn with_noise(mut self, step_noise: f64, outcome_noise: f64) -> Self {
        self.noise_scales = vec![step_noise; self.horizon.saturating_sub(1)];
        self.outcome_noise = outcome_noise;
        self
    }

    pub fn stationary(mut self, stationary: bool) -> Self {
        self.stationary = stationary;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub dim: usize,
    pub horizon: usize,
    /// A₁..A_{T−1}, each `d × d`.
    #[serde(with = "serde_rows::vec")]
    pub transitions: Vec<Matrix>,
    /// β, `d × 1`.
    #[serde(with = "serde_rows")]
    pub outcome_weights: Matrix,
    pub noise_scales: Vec<f64>,
    pub outcome_noise: f64,
    pub initial_state: InitialState,
    /// Active direct `X₁ → Y` coefficient δ.
    #[serde(with = "serde_rows::option", default)]
    pub markov_violation: Option<Matrix>,
    /// Raw δ draw, frozen at generation time and only ever rescaled.
    #[serde(with = "serde_rows::option", default)]
    pub violation_direction: Option<Matrix>,
    pub stationary: bool,
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        if self.horizon < 2 {
            return Err(Error::invalid("horizon", "must be at least 2"));
        }
        if self.transitions.len() != self.horizon - 1 {
            return Err(Error::DimensionMismatch {
                context: "transition count",
                expected: format!("{}", self.horizon - 1),
                found: format!("{}", self.transitions.len()),
            });
        }
        let dd = (self.dim, self.dim);
        for a in &self.transitions {
            if a.shape() != dd {
                return Err(Error::DimensionMismatch {
                    context: "transition shape",
                    expected: format!("{}x{}", self.dim, self.dim),
                    found: shape(a),
                });
            }
            ensure_finite(a, "transition")?;
        }
        if self.stationary && self.transitions.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::invalid(
                "stationary",
                "stationary spec with differing transitions",
            ));
        }
        for (name, v) in [
            ("outcome_weights", Some(&self.outcome_weights)),
            ("markov_violation", self.markov_violation.as_ref()),
            ("violation_direction", self.violation_direction.as_ref()),
        ] {
            if let Some(v) = v {
                if v.shape() != (self.dim, 1) {
                    return Err(Error::DimensionMismatch {
                        context: name_context(name),
                        expected: format!("{}x1", self.dim),
                        found: shape(v),
                    });
                }
                ensure_finite(v, name_context(name))?;
            }
        }
        if self.noise_scales.len() != self.horizon - 1 {
            return Err(Error::DimensionMismatch {
                context: "noise scale count",
                expected: format!("{}", self.horizon - 1),
                found: format!("{}", self.noise_scales.len()),
            });
        }
        let scales_ok = self
            .noise_scales
            .iter()
            .chain(std::iter::once(&self.outcome_noise))
            .all(|s| s.is_finite() && *s >= 0.0);
        if !scales_ok {
            return Err(Error::invalid("noise_scales", "must be finite and >= 0"));
        }
        let init = self.initial_state;
        if !(init.mean.is_finite() && init.std.is_finite() && init.std >= 0.0) {
            return Err(Error::invalid("initial_state", "mean/std must be finite, std >= 0"));
        }
        Ok(())
    }
}

fn name_context(name: &str) -> &'static str {
    match name {
        "outcome_weights" => "outcome weights",
        "markov_violation" => "markov violation",
        _ => "violation direction",
    }
}

/// Draws a system: off-diagonal transition entries `N(0, entry_std²)`, unit
/// diagonal, then each transition is scaled by `kappa / ρ(A)`. β and a raw
/// δ direction are drawn from the same distribution as the off-diagonals.
///
/// Scaling the whole matrix is the same as scaling its eigenvalues in an
/// eigendecomposition, without rebuilding from complex factors.
pub fn generate_system(params: &SystemParams, rng: &mut RngStream) -> Result<SystemSpec> {
    let d = params.dim;
    let horizon = params.horizon;
    if d == 0 {
        return Err(Error::invalid("dim", "must be at least 1"));
    }
    if horizon < 2 {
        return Err(Error::invalid("horizon", "must be at least 2"));
    }
    if !(params.kappa.is_finite() && params.kappa > 0.0) {
        return Err(Error::invalid("kappa", "must be finite and > 0"));
    }
    if !(params.entry_std.is_finite() && params.entry_std >= 0.0) {
        return Err(Error::invalid("entry_std", "must be finite and >= 0"));
    }
    if params.noise_scales.len() != horizon - 1 {
        return Err(Error::DimensionMismatch {
            context: "noise scale count",
            expected: format!("{}", horizon - 1),
            found: format!("{}", params.noise_scales.len()),
        });
    }

    let draw_transition = |rng: &mut RngStream| -> Result<Matrix> {
        let mut a = Matrix::identity(d, d);
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    a[(i, j)] = params.entry_std * rng.standard_normal();
                }
            }
        }
        let rho = spectral_radius(&a)?;
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::Degenerate(format!(
                "transition has spectral radius {rho}; cannot rescale to kappa"
            )));
        }
        Ok(a * (params.kappa / rho))
    };

    let transitions = if params.stationary {
        let a = draw_transition(rng)?;
        vec![a; horizon - 1]
    } else {
        (0..horizon - 1)
            .map(|_| draw_transition(rng))
            .collect::<Result<Vec<_>>>()?
    };
    let outcome_weights = rng.normal_matrix(d, 1, 0.0, params.entry_std);
    let violation_direction = rng.normal_matrix(d, 1, 0.0, params.entry_std);

    let spec = SystemSpec {
        dim: d,
        horizon,
        transitions,
        outcome_weights,
        noise_scales: params.noise_scales.clone(),
        outcome_noise: params.outcome_noise,
        initial_state: params.initial_state,
        markov_violation: None,
        violation_direction: Some(violation_direction),
        stationary: params.stationary,
    };
    spec.validate()?;
    Ok(spec)
}

/// `m` series `X₁..X_T` plus outcomes `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    states: Vec<Matrix>,
    outcomes: Matrix,
}

impl TrajectoryDataset {
    pub fn new(states: Vec<Matrix>, outcomes: Matrix) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::invalid("states", "at least one state block is required"))?;
        let (m, d) = first.shape();
        if m == 0 || d == 0 {
            return Err(Error::EmptyMatrix {
                context: "state block",
            });
        }
        for x in &states {
            if x.shape() != (m, d) {
                return Err(Error::DimensionMismatch {
                    context: "state block",
                    expected: format!("{m}x{d}"),
                    found: shape(x),
                });
            }
            ensure_finite(x, "state block")?;
        }
        if outcomes.shape() != (m, 1) {
            return Err(Error::DimensionMismatch {
                context: "outcomes",
                expected: format!("{m}x1"),
                found: shape(&outcomes),
            });
        }
        ensure_finite(&outcomes, "outcomes")?;
        Ok(Self { states, outcomes })
    }

    pub fn states(&self) -> &[Matrix] {
        &self.states
    }

    pub fn baseline(&self) -> &Matrix {
        &self.states[0]
    }

    pub fn last_state(&self) -> &Matrix {
        self.states.last().expect("non-empty by construction")
    }

    pub fn outcomes(&self) -> &Matrix {
        &self.outcomes
    }

    pub fn len(&self) -> usize {
        self.outcomes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.states[0].ncols()
    }

    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("rows", "row selection is empty"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::invalid(
                "rows",
                format!("row {bad} out of range for {} rows", self.len()),
            ));
        }
        Ok(Self {
            states: self.states.iter().map(|x| x.select_rows(rows)).collect(),
            outcomes: self.outcomes.select_rows(rows),
        })
    }

    /// Per-column means of every state block and of `Y`.
    pub fn column_means(&self) -> (Vec<DVector<f64>>, f64) {
        let xs = self
            .states
            .iter()
            .map(|x| x.row_mean().transpose())
            .collect();
        (xs, self.outcomes.mean())
    }

    /// Copy with every column shifted to zero mean.
    pub fn centered(&self) -> Self {
        let (means, y_mean) = self.column_means();
        let states = self
            .states
            .iter()
            .zip(&means)
            .map(|(x, mu)| {
                let mut x = x.clone();
                for mut row in x.row_iter_mut() {
                    row -= mu.transpose();
                }
                x
            })
            .collect();
        let outcomes = self.outcomes.map(|v| v - y_mean);
        Self { states, outcomes }
    }
}

/// One Markov step: depends on the trajectory only through `previous`.
pub fn advance_state(
    previous: &Matrix,
    transition: &Matrix,
    noise_scale: f64,
    rng: &mut RngStream,
) -> Matrix {
    let noise = rng.normal_matrix(previous.nrows(), previous.ncols(), 0.0, noise_scale);
    previous * transition + noise
}

pub fn sample_trajectories(
    spec: &SystemSpec,
    m: usize,
    rng: &mut RngStream,
) -> Result<TrajectoryDataset> {
    if m == 0 {
        return Err(Error::invalid("m", "sample size must be at least 1"));
    }
    spec.validate()?;
    let init = spec.initial_state;
    let mut states = Vec::with_capacity(spec.horizon);
    states.push(rng.normal_matrix(m, spec.dim, init.mean, init.std));
    for (a, &sigma) in spec.transitions.iter().zip(&spec.noise_scales) {
        let next = advance_state(states.last().expect("seeded with X1"), a, sigma, rng);
        states.push(next);
    }
    let outcome_noise = rng.normal_matrix(m, 1, 0.0, spec.outcome_noise);
    let mut outcomes = states.last().expect("T >= 2") * &spec.outcome_weights + outcome_noise;
    if let Some(delta) = &spec.markov_violation {
        outcomes += &states[0] * delta;
    }
    TrajectoryDataset::new(states, outcomes)
}

/// Coefficient of `E[Y | X₁]`: `A₁⋯A_{T−1} β`, plus δ when a violation is active.
pub fn true_theta(spec: &SystemSpec) -> Result<LinearPredictor> {
    spec.validate()?;
    let mut theta = matrix_chain_product(&spec.transitions)? * &spec.outcome_weights;
    if let Some(delta) = &spec.markov_violation {
        theta += delta;
    }
    LinearPredictor::new(theta, 0.0)
}

/// Variance of the effective noise in `Y = θᵀX₁ + ε̃` for a Markov system.
pub fn irreducible_risk(spec: &SystemSpec) -> Result<f64> {
    spec.validate()?;
    if spec.markov_violation.is_some() {
        return Err(Error::MarkovViolationPresent);
    }
    // walk backwards: propagated = A_{k+1}⋯A_{T−1} β for the noise injected at X_{k+2}
    let mut propagated = spec.outcome_weights.clone();
    let mut risk = spec.outcome_noise.powi(2);
    for k in (0..spec.horizon - 1).rev() {
        risk += spec.noise_scales[k].powi(2) * propagated.norm_squared();
        propagated = &spec.transitions[k] * propagated;
    }
    Ok(risk)
}

/// Rescales the frozen δ direction so that `‖δ‖ = ratio · ‖β‖`.
pub fn scale_markov_violation(spec: &SystemSpec, ratio: f64) -> Result<SystemSpec> {
    if !(ratio.is_finite() && ratio >= 0.0) {
        return Err(Error::invalid("ratio", "must be finite and >= 0"));
    }
    let direction = spec.violation_direction.as_ref().ok_or_else(|| {
        Error::invalid("violation_direction", "spec carries no raw δ draw to rescale")
    })?;
    let delta = if ratio == 0.0 {
        Matrix::zeros(spec.dim, 1)
    } else {
        let raw_norm = direction.norm();
        if raw_norm == 0.0 {
            return Err(Error::Degenerate(
                "raw δ draw is the zero vector; cannot reach a positive ratio".into(),
            ));
        }
        direction * (ratio * spec.outcome_weights.norm() / raw_norm)
    };
    let mut out = spec.clone();
    out.markov_violation = Some(delta);
    Ok(out)
}
