//! Seeded, config-driven experiment sweeps.
//!
//! Every (sweep value, replicate) cell derives its own random streams from
//! the master seed, so a run is a pure function of its config and the
//! parallel and serial runners produce identical tables.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    apply_preprocess, fit_preprocess, load_trajectory_csv, split_rows, subsample_rows,
    SplitFractions, TrajectorySchema,
};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorSpec, FitOptions, LambdaChoice, LinearPredictor};
use crate::metrics::{
    mse_gap, parameter_sq_error, r_squared, relative_parameter_mse, risk_expansion_terms,
    MetricRecord, Summary,
};
use crate::synth::{
    generate_system, sample_trajectories, scale_markov_violation, true_theta, InitialState,
    RngStream, SystemParams, SystemSpec, TrajectoryDataset,
};

const PURPOSE_SYSTEM: u64 = 0;
const PURPOSE_TRAIN: u64 = 1;
const PURPOSE_TEST: u64 = 2;
const PURPOSE_SPLIT: u64 = 3;
const PURPOSE_TUNE: u64 = 16;

const MAX_SWEEP_VALUES: usize = 1 << 24;
const MAX_REPLICATES: usize = 1 << 32;
const MAX_ESTIMATORS: usize = 240;

/// Stream index for one purpose within one cell. Sweep index, replicate and
/// purpose occupy disjoint bit ranges, so distinct cells never share a stream.
pub fn stream_index(sweep_index: usize, replicate: usize, purpose: u64) -> u64 {
    ((sweep_index as u64) << 40) | ((replicate as u64) << 8) | purpose
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "n")]
    SampleSize,
    #[serde(rename = "T")]
    Horizon,
    #[serde(rename = "sigma")]
    Noise,
    #[serde(rename = "delta_ratio")]
    DeltaRatio,
    #[serde(rename = "lambda")]
    Lambda,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::SampleSize => "n",
            Axis::Horizon => "T",
            Axis::Noise => "sigma",
            Axis::DeltaRatio => "delta_ratio",
            Axis::Lambda => "lambda",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub axis: Axis,
    pub values: Vec<f64>,
}

/// One experiment: a system family, one swept axis, estimators and seeding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub kappa: f64,
    pub entry_std: f64,
    /// Common step-noise scale σ for every transition.
    pub sigma: f64,
    /// Per-transition scales σ₂..σ_T; overrides `sigma` when set.
    pub noise_scales: Option<Vec<f64>>,
    pub sigma_y: f64,
    pub initial_state: InitialState,
    pub stationary: bool,
    pub sweep: SweepAxis,
    pub n: usize,
    pub m_test: usize,
    pub replicates: usize,
    pub estimators: Vec<String>,
    pub master_seed: u64,
    pub output: Option<PathBuf>,
    /// Reuse one system per sweep value instead of redrawing per replicate.
    pub fix_system: bool,
    /// `‖δ‖/‖β‖` when the ratio is not the swept axis.
    pub delta_ratio: f64,
    /// λ for distillation labels without an explicit value.
    pub lambda: f64,
    pub lambda_grid: Vec<f64>,
    pub validation_fraction: f64,
    pub intercept: bool,
    /// Record held-out risk-expansion terms for recursive estimators.
    pub risk_terms: bool,
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fit = FitOptions::default();
        Self {
            d: 25,
            horizon: 10,
            kappa: 1.5,
            entry_std: 0.2,
            sigma: 1.0,
            noise_scales: None,
            sigma_y: 1.0,
            initial_state: InitialState::default(),
            stationary: false,
            sweep: SweepAxis {
                axis: Axis::SampleSize,
                values: vec![1000.0],
            },
            n: 1000,
            m_test: 1000,
            replicates: 200,
            estimators: vec!["baseline".into(), "lupts".into()],
            master_seed: 0,
            output: None,
            fix_system: false,
            delta_ratio: 0.0,
            lambda: fit.default_lambda,
            lambda_grid: fit.lambda_grid,
            validation_fraction: fit.validation_fraction,
            intercept: false,
            risk_terms: false,
            parallel: true,
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn as_count(value: f64, what: &str, min: usize) -> Result<usize> {
    if value.fract() != 0.0 || !value.is_finite() || value < min as f64 {
        return Err(config_err(format!(
            "{what} sweep value {value} must be an integer >= {min}"
        )));
    }
    Ok(value as usize)
}

fn check_unit_interval(value: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&value) {
        return Err(config_err(format!("{what} {value} must lie in [0, 1]")));
    }
    Ok(())
}

fn check_nonneg(value: f64, what: &str) -> Result<()> {
    if !(value.is_finite() && value >= 0.0) {
        return Err(config_err(format!("{what} {value} must be finite and >= 0")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Parsed estimator labels, in config order.
    pub fn estimator_specs(&self) -> Result<Vec<EstimatorSpec>> {
        self.estimators.iter().map(|l| l.parse()).collect()
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            intercept: self.intercept,
            default_lambda: self.lambda,
            lambda_grid: self.lambda_grid.clone(),
            validation_fraction: self.validation_fraction,
        }
    }

    /// Checks every invariant so that a bad config fails before any work.
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 || self.replicates > MAX_REPLICATES {
            return Err(config_err("replicates must be between 1 and 2^32"));
        }
        if self.m_test == 0 {
            return Err(config_err("m_test must be at least 1"));
        }
        if self.n == 0 {
            return Err(config_err("n must be at least 1"));
        }
        if self.d == 0 {
            return Err(config_err("d must be at least 1"));
        }
        if self.horizon < 2 {
            return Err(config_err("T must be at least 2"));
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(config_err("kappa must be finite and > 0"));
        }
        check_nonneg(self.entry_std, "entry_std")?;
        check_nonneg(self.sigma, "sigma")?;
        check_nonneg(self.sigma_y, "sigma_y")?;
        check_nonneg(self.delta_ratio, "delta_ratio")?;
        check_unit_interval(self.lambda, "lambda")?;
        check_nonneg(self.initial_state.std, "initial_state.std")?;
        if !self.initial_state.mean.is_finite() {
            return Err(config_err("initial_state.mean must be finite"));
        }
        if let Some(scales) = &self.noise_scales {
            if self.sweep.axis == Axis::Horizon || self.sweep.axis == Axis::Noise {
                return Err(config_err(
                    "noise_scales cannot be combined with a T or sigma sweep",
                ));
            }
            if scales.len() != self.horizon - 1 {
                return Err(config_err(format!(
                    "noise_scales has {} entries, T-1 = {}",
                    scales.len(),
                    self.horizon - 1
                )));
            }
            for &s in scales {
                check_nonneg(s, "noise scale")?;
            }
        }
        for &l in &self.lambda_grid {
            check_unit_interval(l, "lambda_grid entry")?;
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(config_err("validation_fraction must lie in (0, 1)"));
        }

        let values = &self.sweep.values;
        if values.is_empty() || values.len() > MAX_SWEEP_VALUES {
            return Err(config_err("sweep needs between 1 and 2^24 values"));
        }
        for &v in values {
            match self.sweep.axis {
                Axis::SampleSize => {
                    as_count(v, "n", 1)?;
                }
                Axis::Horizon => {
                    as_count(v, "T", 2)?;
                }
                Axis::Noise => check_nonneg(v, "sigma")?,
                Axis::DeltaRatio => check_nonneg(v, "delta_ratio")?,
                Axis::Lambda => check_unit_interval(v, "lambda")?,
            }
        }

        if self.estimators.is_empty() || self.estimators.len() > MAX_ESTIMATORS {
            return Err(config_err("estimator list must have between 1 and 240 labels"));
        }
        self.estimator_specs()?;
        Ok(())
    }

    /// System parameters at one sweep value.
    pub fn system_params(&self, axis_value: f64) -> SystemParams {
        let horizon = match self.sweep.axis {
            Axis::Horizon => axis_value as usize,
            _ => self.horizon,
        };
        let noise_scales = match (self.sweep.axis, &self.noise_scales) {
            (Axis::Noise, _) => vec![axis_value; horizon - 1],
            (_, Some(scales)) => scales.clone(),
            (_, None) => vec![self.sigma; horizon - 1],
        };
        SystemParams {
            dim: self.d,
            horizon,
            kappa: self.kappa,
            entry_std: self.entry_std,
            noise_scales,
            outcome_noise: self.sigma_y,
            initial_state: self.initial_state,
            stationary: self.stationary,
        }
    }

    fn cell_settings(&self, axis_value: f64) -> (usize, f64, FitOptions) {
        let mut options = self.fit_options();
        let mut n = self.n;
        let mut ratio = self.delta_ratio;
        match self.sweep.axis {
            Axis::SampleSize => n = axis_value as usize,
            Axis::DeltaRatio => ratio = axis_value,
            Axis::Lambda => options.default_lambda = axis_value,
            Axis::Horizon | Axis::Noise => {}
        }
        (n, ratio, options)
    }
}

/// Aggregate of one metric over the successful replicates of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub axis_name: String,
    pub axis_value: f64,
    pub estimator: String,
    pub metric: String,
    pub count: usize,
    pub failures: usize,
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    /// The resolved configuration that produced the records.
    pub config: serde_json::Value,
    /// Canonical order: sweep value, replicate, estimator.
    pub records: Vec<MetricRecord>,
    pub aggregates: Vec<AggregateRow>,
}

impl ResultTable {
    pub fn new(config: serde_json::Value, records: Vec<MetricRecord>) -> Self {
        let aggregates = aggregate(&records);
        Self {
            config,
            records,
            aggregates,
        }
    }

    /// Successful values of `metric` for one cell, in replicate order.
    pub fn values(&self, axis_value: f64, estimator: &str, metric: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| {
                r.axis_value.to_bits() == axis_value.to_bits()
                    && r.estimator == estimator
                    && r.error.is_none()
            })
            .filter_map(|r| r.metric(metric))
            .collect()
    }

    pub fn summary(&self, axis_value: f64, estimator: &str, metric: &str) -> Summary {
        Summary::of(&self.values(axis_value, estimator, metric))
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }
}

const CORE_METRICS: [&str; 4] = ["relative_mse", "r_squared", "empirical_risk", "gap"];

fn extra_columns(records: &[MetricRecord]) -> Vec<String> {
    records
        .iter()
        .flat_map(|r| r.extra.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Per-(sweep value, estimator, metric) summaries. Cells keep first-seen
/// order; metrics follow the row-file column order. Failed records count
/// toward `failures` only.
pub fn aggregate(records: &[MetricRecord]) -> Vec<AggregateRow> {
    let metrics: Vec<String> = CORE_METRICS
        .iter()
        .filter(|m| records.iter().any(|r| r.metric(m).is_some()))
        .map(|m| m.to_string())
        .chain(extra_columns(records))
        .collect();

    let mut cells: Vec<(String, u64, String)> = Vec::new();
    let mut members: HashMap<(u64, String), Vec<&MetricRecord>> = HashMap::new();
    for r in records {
        let key = (r.axis_value.to_bits(), r.estimator.clone());
        let entry = members.entry(key).or_default();
        if entry.is_empty() {
            cells.push((r.axis_name.clone(), r.axis_value.to_bits(), r.estimator.clone()));
        }
        entry.push(r);
    }

    let mut rows = Vec::new();
    for (axis_name, bits, estimator) in cells {
        let group = &members[&(bits, estimator.clone())];
        let failures = group.iter().filter(|r| r.error.is_some()).count();
        for metric in &metrics {
            let values: Vec<f64> = group
                .iter()
                .filter(|r| r.error.is_none())
                .filter_map(|r| r.metric(metric))
                .collect();
            let s = Summary::of(&values);
            rows.push(AggregateRow {
                axis_name: axis_name.clone(),
                axis_value: f64::from_bits(bits),
                estimator: estimator.clone(),
                metric: metric.clone(),
                count: s.count,
                failures,
                mean: s.mean,
                std: s.std,
                stderr: s.stderr,
            });
        }
    }
    rows
}

struct CellContext<'a> {
    config: &'a ExperimentConfig,
    specs: &'a [EstimatorSpec],
}

fn failed_record(template: &MetricRecord, estimator: String, err: &Error) -> MetricRecord {
    MetricRecord {
        estimator,
        error: Some(format!("{}: {err}", err.kind())),
        ..template.clone()
    }
}

struct CellData {
    train: TrajectoryDataset,
    test: TrajectoryDataset,
    truth: Option<LinearPredictor>,
}

fn simulate_cell(
    config: &ExperimentConfig,
    sweep_index: usize,
    replicate: usize,
    axis_value: f64,
    n: usize,
    ratio: f64,
) -> Result<CellData> {
    let seed = config.master_seed;
    let system_replicate = if config.fix_system { 0 } else { replicate };
    let mut system_rng = RngStream::new(seed, stream_index(sweep_index, system_replicate, PURPOSE_SYSTEM));
    let mut spec: SystemSpec = generate_system(&config.system_params(axis_value), &mut system_rng)?;
    if ratio > 0.0 {
        spec = scale_markov_violation(&spec, ratio)?;
    }
    let mut train_rng = RngStream::new(seed, stream_index(sweep_index, replicate, PURPOSE_TRAIN));
    let mut test_rng = RngStream::new(seed, stream_index(sweep_index, replicate, PURPOSE_TEST));
    Ok(CellData {
        train: sample_trajectories(&spec, n, &mut train_rng)?,
        test: sample_trajectories(&spec, config.m_test, &mut test_rng)?,
        truth: Some(true_theta(&spec)?),
    })
}

/// Fits one estimator and evaluates it on the held-out rows.
fn evaluate(
    spec: &EstimatorSpec,
    data: &CellData,
    ols: Option<&LinearPredictor>,
    options: &FitOptions,
    risk_terms: bool,
    rng: &mut RngStream,
    record: &mut MetricRecord,
) -> Result<()> {
    let model = spec.fit(&data.train, options, rng)?;
    let linear = model.model.linear()?;
    if let Some(truth) = &data.truth {
        record.relative_mse = Some(relative_parameter_mse(&linear, truth)?);
        record
            .extra
            .insert("mse".into(), parameter_sq_error(&linear, truth)?);
    }
    let pred = model.predict(data.test.baseline())?;
    let residual = (&pred - data.test.outcomes()).norm_squared();
    record.empirical_risk = Some(residual / data.test.len() as f64);
    if data.test.len() >= 2 {
        record.r_squared = Some(r_squared(&pred, data.test.outcomes())?);
    }
    if let Some(ols) = ols {
        record.gap = Some(mse_gap(ols, &linear)?);
    }
    if let Some(LambdaChoice::Fixed(l)) = model.estimator.lambda() {
        record.extra.insert("lambda".into(), l);
    }
    if risk_terms {
        if let Some(composed) = model.model.composed() {
            let terms = risk_expansion_terms(&composed, &data.test)?;
            record.extra.insert("r_total".into(), terms.total);
            record.extra.insert("r_dynamics".into(), terms.dynamics);
            record.extra.insert("r_outcome".into(), terms.outcome);
            record.extra.insert("r_bound".into(), terms.bound());
            record.extra.insert("r_total_stderr".into(), terms.total_stderr);
        }
    }
    Ok(())
}

fn fit_all(
    ctx: &CellContext,
    sweep_index: usize,
    replicate: usize,
    data: Result<CellData>,
    options: &FitOptions,
    template: MetricRecord,
) -> Vec<MetricRecord> {
    let labels = ctx.specs.iter().map(|s| s.to_string());
    let data = match data {
        Ok(d) => d,
        Err(err) => return labels.map(|l| failed_record(&template, l, &err)).collect(),
    };
    let seed = ctx.config.master_seed;
    // the reference OLS fit draws no randomness
    let ols = EstimatorSpec::Baseline
        .fit(&data.train, options, &mut RngStream::new(seed, 0))
        .and_then(|m| m.model.linear())
        .ok();
    ctx.specs
        .iter()
        .enumerate()
        .map(|(e, spec)| {
            let mut record = MetricRecord {
                estimator: spec.to_string(),
                ..template.clone()
            };
            let mut rng = RngStream::new(
                seed,
                stream_index(sweep_index, replicate, PURPOSE_TUNE + e as u64),
            );
            match evaluate(spec, &data, ols.as_ref(), options, ctx.config.risk_terms, &mut rng, &mut record) {
                Ok(()) => record,
                Err(err) => failed_record(&template, spec.to_string(), &err),
            }
        })
        .collect()
}

fn run_cell(ctx: &CellContext, sweep_index: usize, replicate: usize) -> Vec<MetricRecord> {
    let config = ctx.config;
    let axis_value = config.sweep.values[sweep_index];
    let (n, ratio, options) = config.cell_settings(axis_value);
    let params = config.system_params(axis_value);
    let template = MetricRecord {
        estimator: String::new(),
        seed: config.master_seed,
        replicate,
        axis_name: config.sweep.axis.name().into(),
        axis_value,
        n,
        horizon: params.horizon,
        dim: params.dim,
        relative_mse: None,
        r_squared: None,
        empirical_risk: None,
        gap: None,
        extra: Default::default(),
        error: None,
    };
    let data = simulate_cell(config, sweep_index, replicate, axis_value, n, ratio);
    fit_all(ctx, sweep_index, replicate, data, &options, template)
}

fn collect_cells<F>(cells: usize, parallel: bool, f: F) -> Vec<MetricRecord>
where
    F: Fn(usize) -> Vec<MetricRecord> + Sync,
{
    let nested: Vec<Vec<MetricRecord>> = if parallel {
        (0..cells).into_par_iter().map(&f).collect()
    } else {
        (0..cells).map(&f).collect()
    };
    nested.into_iter().flatten().collect()
}

/// Runs every (sweep value, replicate) cell. Output order does not depend
/// on `config.parallel`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultTable> {
    config.validate()?;
    let specs = config.estimator_specs()?;
    let ctx = CellContext {
        config,
        specs: &specs,
    };
    let reps = config.replicates;
    let cells = config.sweep.values.len() * reps;
    let records = collect_cells(cells, config.parallel, |c| run_cell(&ctx, c / reps, c % reps));
    Ok(ResultTable::new(serde_json::to_value(config)?, records))
}

pub const PRESET_NAMES: [&str; 7] = [
    "fig2a_samples",
    "fig2b_length",
    "fig2c_noise",
    "fig2d_markov",
    "fig6_stationary",
    "distill_sandwich",
    "riskbound_check",
];

/// Canonical sweep configs. Defaults: d = 25, T = 10, κ = 1.5, σ = σ_Y = 1,
/// n = 1000, `X₁ ~ N(0, 5)`, 200 replicates, 1000 test rows. Grids are round
/// values chosen to show the trends:
///
/// | preset | axis | values | estimators |
/// |---|---|---|---|
/// | fig2a_samples | n | 100, 200, 500, 1000, 2000 | baseline, lupts |
/// | fig2b_length | T | 2, 4, 6, 8, 10, 12 | baseline, lupts |
/// | fig2c_noise | sigma (σ_Y stays 1) | 0, 0.5, 1, 1.5, 2 | baseline, lupts |
/// | fig2d_markov | delta_ratio | 0, 0.05, 0.1, 0.2, 0.4 | baseline, lupts |
/// | fig6_stationary | n (stationary) | 50, 100, 200, 500, 1000 | baseline, lupts, stat_lupts |
/// | distill_sandwich | lambda | 0, 0.25, 0.5, 0.75, 1 | baseline, lupts, distill_seq |
/// | riskbound_check | T | 2, 5, 10 | composed (20 replicates, 10⁵ test rows) |
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base = ExperimentConfig::default();
    let sweep = |axis, values: &[f64]| SweepAxis {
        axis,
        values: values.to_vec(),
    };
    let labels = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let config = match name {
        "fig2a_samples" => ExperimentConfig {
            sweep: sweep(Axis::SampleSize, &[100.0, 200.0, 500.0, 1000.0, 2000.0]),
            ..base
        },
        "fig2b_length" => ExperimentConfig {
            sweep: sweep(Axis::Horizon, &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]),
            ..base
        },
        "fig2c_noise" => ExperimentConfig {
            sweep: sweep(Axis::Noise, &[0.0, 0.5, 1.0, 1.5, 2.0]),
            ..base
        },
        "fig2d_markov" => ExperimentConfig {
            sweep: sweep(Axis::DeltaRatio, &[0.0, 0.05, 0.1, 0.2, 0.4]),
            ..base
        },
        "fig6_stationary" => ExperimentConfig {
            stationary: true,
            sweep: sweep(Axis::SampleSize, &[50.0, 100.0, 200.0, 500.0, 1000.0]),
            estimators: labels(&["baseline", "lupts", "stat_lupts"]),
            ..base
        },
        "distill_sandwich" => ExperimentConfig {
            sweep: sweep(Axis::Lambda, &[0.0, 0.25, 0.5, 0.75, 1.0]),
            estimators: labels(&["baseline", "lupts", "distill_seq"]),
            ..base
        },
        "riskbound_check" => ExperimentConfig {
            sweep: sweep(Axis::Horizon, &[2.0, 5.0, 10.0]),
            estimators: labels(&["composed"]),
            replicates: 20,
            m_test: 100_000,
            risk_terms: true,
            ..base
        },
        other => {
            return Err(Error::UnknownPreset {
                name: other.to_string(),
                available: PRESET_NAMES.join(", "),
            })
        }
    };
    Ok(config)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

/// `<prefix>.<suffix>`, keeping any dots already in the prefix.
pub fn output_path(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

const ROW_COLUMNS: [&str; 13] = [
    "estimator",
    "seed",
    "axis_name",
    "axis_value",
    "n",
    "T",
    "d",
    "relative_mse",
    "r_squared",
    "empirical_risk",
    "gap",
    "replicate",
    "error",
];

const AGG_COLUMNS: [&str; 9] = [
    "axis_name",
    "axis_value",
    "estimator",
    "metric",
    "count",
    "failures",
    "mean",
    "std",
    "stderr",
];

pub fn write_rows_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    let extras = extra_columns(records);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ROW_COLUMNS.iter().copied().chain(extras.iter().map(String::as_str)))?;
    for r in records {
        let mut row = vec![
            r.estimator.clone(),
            r.seed.to_string(),
            r.axis_name.clone(),
            r.axis_value.to_string(),
            r.n.to_string(),
            r.horizon.to_string(),
            r.dim.to_string(),
            fmt_opt(r.relative_mse),
            fmt_opt(r.r_squared),
            fmt_opt(r.empirical_risk),
            fmt_opt(r.gap),
            r.replicate.to_string(),
            r.error.clone().unwrap_or_default(),
        ];
        row.extend(extras.iter().map(|k| fmt_opt(r.extra.get(k).copied())));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_agg_csv(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(AGG_COLUMNS)?;
    for a in rows {
        let finite = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
        w.write_record([
            a.axis_name.clone(),
            a.axis_value.to_string(),
            a.estimator.clone(),
            a.metric.clone(),
            a.count.to_string(),
            a.failures.to_string(),
            finite(a.mean),
            finite(a.std),
            finite(a.stderr),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `<prefix>.rows.csv`, `<prefix>.agg.csv` and `<prefix>.config.json`.
pub fn write_results(table: &ResultTable, prefix: &Path) -> Result<()> {
    create_parent(prefix)?;
    write_rows_csv(&table.records, &output_path(prefix, "rows.csv"))?;
    write_agg_csv(&table.aggregates, &output_path(prefix, "agg.csv"))?;
    let config_path = output_path(prefix, "config.json");
    let text = serde_json::to_string_pretty(&table.config)?;
    fs::write(&config_path, text + "\n").map_err(|e| Error::io(&config_path, e))
}

fn parse_cell<T: std::str::FromStr>(path: &Path, row: usize, column: &str, cell: &str) -> Result<T> {
    cell.parse().map_err(|_| Error::Csv {
        path: path.display().to_string(),
        row,
        column: column.to_string(),
        reason: format!("cannot parse `{cell}`"),
    })
}

fn parse_opt(path: &Path, row: usize, column: &str, cell: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        Ok(None)
    } else {
        parse_cell(path, row, column, cell).map(Some)
    }
}

/// Reads a rows file written by [`write_rows_csv`].
pub fn read_rows_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.len() < ROW_COLUMNS.len() || header[..ROW_COLUMNS.len()] != ROW_COLUMNS {
        return Err(Error::Schema(format!(
            "{}: unexpected rows header",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let mut extra = std::collections::BTreeMap::new();
        for (c, name) in header.iter().enumerate().skip(ROW_COLUMNS.len()) {
            if let Some(v) = parse_opt(path, row, name, get(c))? {
                extra.insert(name.clone(), v);
            }
        }
        out.push(MetricRecord {
            estimator: get(0).to_string(),
            seed: parse_cell(path, row, "seed", get(1))?,
            axis_name: get(2).to_string(),
            axis_value: parse_cell(path, row, "axis_value", get(3))?,
            n: parse_cell(path, row, "n", get(4))?,
            horizon: parse_cell(path, row, "T", get(5))?,
            dim: parse_cell(path, row, "d", get(6))?,
            relative_mse: parse_opt(path, row, "relative_mse", get(7))?,
            r_squared: parse_opt(path, row, "r_squared", get(8))?,
            empirical_risk: parse_opt(path, row, "empirical_risk", get(9))?,
            gap: parse_opt(path, row, "gap", get(10))?,
            replicate: parse_cell(path, row, "replicate", get(11))?,
            error: Some(get(12).to_string()).filter(|e| !e.is_empty()),
            extra,
        });
    }
    Ok(out)
}

/// Reads an aggregate file written by [`write_agg_csv`].
pub fn read_agg_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let num = |c: usize, name: &str| -> Result<f64> {
            Ok(parse_opt(path, row, name, &rec[c])?.unwrap_or(f64::NAN))
        };
        out.push(AggregateRow {
            axis_name: rec[0].to_string(),
            axis_value: parse_cell(path, row, "axis_value", &rec[1])?,
            estimator: rec[2].to_string(),
            metric: rec[3].to_string(),
            count: parse_cell(path, row, "count", &rec[4])?,
            failures: parse_cell(path, row, "failures", &rec[5])?,
            mean: num(6, "mean")?,
            std: num(7, "std")?,
            stderr: num(8, "stderr")?,
        });
    }
    Ok(out)
}

/// Repeated evaluation on a wide trajectory CSV without ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub csv: PathBuf,
    pub schema: TrajectorySchema,
    pub estimators: Vec<String>,
    pub train_sizes: Vec<usize>,
    pub replicates: usize,
    pub master_seed: u64,
    pub test_fraction: f64,
    pub intercept: bool,
    pub lambda: f64,
    pub lambda_grid: Vec<f64>,
    pub validation_fraction: f64,
    pub parallel: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        let fit = FitOptions::default();
        Self {
            csv: PathBuf::new(),
            schema: TrajectorySchema::new(2, 1),
            estimators: vec!["baseline".into(), "lupts".into()],
            train_sizes: Vec::new(),
            replicates: 20,
            master_seed: 0,
            test_fraction: 0.2,
            intercept: true,
            lambda: fit.default_lambda,
            lambda_grid: fit.lambda_grid,
            validation_fraction: fit.validation_fraction,
            parallel: true,
        }
    }
}

/// Per replicate: a seeded train/test split of the file, preprocessing fit
/// on the training part only, then for each training size a subsample of
/// the training part. Metrics are reported in standardized units.
pub fn run_ingest(config: &IngestConfig) -> Result<ResultTable> {
    if config.replicates == 0 || config.replicates > MAX_REPLICATES {
        return Err(config_err("replicates must be between 1 and 2^32"));
    }
    if config.train_sizes.is_empty() || config.train_sizes.len() > MAX_SWEEP_VALUES {
        return Err(config_err("train_sizes must list at least one size"));
    }
    if config.estimators.is_empty() || config.estimators.len() > MAX_ESTIMATORS {
        return Err(config_err("estimator list must have between 1 and 240 labels"));
    }
    let specs: Vec<EstimatorSpec> = config
        .estimators
        .iter()
        .map(|l| l.parse())
        .collect::<Result<_>>()?;
    let fractions = SplitFractions {
        train: 1.0 - config.test_fraction,
        test: config.test_fraction,
    };
    let options = FitOptions {
        intercept: config.intercept,
        default_lambda: config.lambda,
        lambda_grid: config.lambda_grid.clone(),
        validation_fraction: config.validation_fraction,
    };

    let table = load_trajectory_csv(&config.csv, &config.schema)?;
    if table.horizon < 2 {
        return Err(config_err("T must be at least 2"));
    }
    let m = table.len();
    let n_train = (fractions.train * m as f64).round() as usize;
    if let Some(&too_big) = config.train_sizes.iter().find(|&&n| n == 0 || n > n_train) {
        return Err(config_err(format!(
            "train size {too_big} is outside 1..={n_train} (training part of {m} rows)"
        )));
    }

    let experiment = ExperimentConfig {
        estimators: config.estimators.clone(),
        master_seed: config.master_seed,
        ..ExperimentConfig::default()
    };
    let ctx = CellContext {
        config: &experiment,
        specs: &specs,
    };

    let reps = config.replicates;
    let sizes = &config.train_sizes;
    let prepared: Vec<Result<(TrajectoryDataset, TrajectoryDataset)>> = {
        let prepare = |r: usize| -> Result<_> {
            let mut rng = RngStream::new(config.master_seed, stream_index(0, r, PURPOSE_SPLIT));
            let (train, test) = split_rows(&table, fractions, &mut rng)?;
            let stats = fit_preprocess(&train)?;
            Ok((apply_preprocess(&train, &stats)?, apply_preprocess(&test, &stats)?))
        };
        if config.parallel {
            (0..reps).into_par_iter().map(prepare).collect()
        } else {
            (0..reps).map(prepare).collect()
        }
    };
    if let Some(Err(_)) = prepared.first() {
        // a split that cannot be fit is a property of the file, not a draw
        return Err(prepared.into_iter().next().unwrap().unwrap_err());
    }

    let records = collect_cells(sizes.len() * reps, config.parallel, |c| {
        let (s, r) = (c / reps, c % reps);
        let n = sizes[s];
        let template = MetricRecord {
            estimator: String::new(),
            seed: config.master_seed,
            replicate: r,
            axis_name: "n".into(),
            axis_value: n as f64,
            n,
            horizon: table.horizon,
            dim: table.dim,
            relative_mse: None,
            r_squared: None,
            empirical_risk: None,
            gap: None,
            extra: Default::default(),
            error: None,
        };
        let data = match &prepared[r] {
            Ok((train, test)) => {
                let mut rng = RngStream::new(config.master_seed, stream_index(s, r, PURPOSE_TRAIN));
                subsample_rows(train.len(), n, &mut rng)
                    .and_then(|rows| train.select_rows(&rows))
                    .map(|sub| CellData {
                        train: sub,
                        test: test.clone(),
                        truth: None,
                    })
            }
            Err(e) => Err(Error::Degenerate(e.to_string())),
        };
        let template = MetricRecord {
            dim: data.as_ref().map_or(table.dim, |d| d.train.dim()),
            ..template
        };
        fit_all(&ctx, s, r, data, &options, template)
    });

    let echo = serde_json::json!({ "ingest": config, "fit_options": options });
    Ok(ResultTable::new(echo, records))
}
