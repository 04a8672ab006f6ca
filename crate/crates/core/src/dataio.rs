//! Wide-format trajectory CSVs and the train-only preprocessing pipeline
//! (mean imputation, then zero-mean unit-variance scaling).
//!
//! Layout: one row per series, state columns `x{t}_{j}` for `t` in `1..=T`
//! and `j` in `1..=d`, one outcome column, optionally one ignored id column.
//! Inputs must already be numeric; categorical encoding is the caller's job.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::synth::{RngStream, TrajectoryDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySchema {
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "d")]
    pub dim: usize,
    #[serde(default = "default_outcome_column")]
    pub outcome_column: String,
    #[serde(default)]
    pub missing_marker: String,
    #[serde(default)]
    pub id_column: Option<String>,
}

fn default_outcome_column() -> String {
    "y".into()
}

impl TrajectorySchema {
    pub fn new(horizon: usize, dim: usize) -> Self {
        Self {
            horizon,
            dim,
            outcome_column: default_outcome_column(),
            missing_marker: String::new(),
            id_column: None,
        }
    }

    pub fn state_column(t: usize, j: usize) -> String {
        format!("x{}_{}", t + 1, j + 1)
    }

    pub fn state_columns(&self) -> Vec<String> {
        (0..self.horizon)
            .flat_map(|t| (0..self.dim).map(move |j| Self::state_column(t, j)))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.dim == 0 {
            return Err(Error::Schema("T and d must both be at least 1".into()));
        }
        if self.outcome_column.is_empty() {
            return Err(Error::Schema("outcome column name is empty".into()));
        }
        Ok(())
    }
}

/// Parsed rows; state cells may be missing, outcomes may not.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub column_names: Vec<String>,
    pub horizon: usize,
    pub dim: usize,
    /// Row-major cells, `T·d` per row, block `t` at `t·d .. (t+1)·d`.
    pub states: Vec<Vec<Option<f64>>>,
    pub outcomes: Vec<f64>,
}

impl TrajectoryTable {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn width(&self) -> usize {
        self.horizon * self.dim
    }

    pub fn missing_cells(&self) -> usize {
        self.states.iter().flatten().filter(|c| c.is_none()).count()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            column_names: self.column_names.clone(),
            horizon: self.horizon,
            dim: self.dim,
            states: rows.iter().map(|&r| self.states[r].clone()).collect(),
            outcomes: rows.iter().map(|&r| self.outcomes[r]).collect(),
        }
    }

    pub fn from_dataset(dataset: &TrajectoryDataset, outcome_column: &str) -> Self {
        let (horizon, dim) = (dataset.horizon(), dataset.dim());
        let schema = TrajectorySchema::new(horizon, dim);
        let mut column_names = schema.state_columns();
        column_names.push(outcome_column.to_string());
        let states = (0..dataset.len())
            .map(|i| {
                dataset
                    .states()
                    .iter()
                    .flat_map(|x| x.row(i).iter().map(|&v| Some(v)).collect::<Vec<_>>())
                    .collect()
            })
            .collect();
        Self {
            column_names,
            horizon,
            dim,
            states,
            outcomes: dataset.outcomes().iter().copied().collect(),
        }
    }

    /// Exact conversion for tables without missing cells.
    pub fn to_dataset(&self) -> Result<TrajectoryDataset> {
        if self.missing_cells() > 0 {
            return Err(Error::Schema(format!(
                "{} missing cells; run the preprocessing pipeline first",
                self.missing_cells()
            )));
        }
        let m = self.len();
        let blocks = (0..self.horizon)
            .map(|t| {
                let flat: Vec<f64> = self
                    .states
                    .iter()
                    .flat_map(|row| row[t * self.dim..(t + 1) * self.dim].iter().map(|c| c.unwrap()))
                    .collect();
                Matrix::from_row_slice(m, self.dim, &flat)
            })
            .collect();
        TrajectoryDataset::new(blocks, Matrix::from_column_slice(m, 1, &self.outcomes))
    }

    /// Writes the wide CSV layout; missing cells become `missing_marker`.
    pub fn write_csv(&self, path: &Path, missing_marker: &str) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(file, missing_marker)
    }

    pub fn write_to<W: Write>(&self, out: W, missing_marker: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.column_names)?;
        for (row, y) in self.states.iter().zip(&self.outcomes) {
            let mut record: Vec<String> = row
                .iter()
                .map(|c| c.map_or_else(|| missing_marker.to_string(), |v| v.to_string()))
                .collect();
            record.push(y.to_string());
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io("csv output", e))?;
        Ok(())
    }
}

pub fn load_trajectory_csv(path: &Path, schema: &TrajectorySchema) -> Result<TrajectoryTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trajectory_csv(file, schema, &path.display().to_string())
}

/// Parses a trajectory CSV from any reader; `source` names it in errors.
pub fn read_trajectory_csv<R: Read>(
    input: R,
    schema: &TrajectorySchema,
    source: &str,
) -> Result<TrajectoryTable> {
    schema.validate()?;
    let csv_err = |row: usize, column: &str, reason: String| Error::Csv {
        path: source.to_string(),
        row,
        column: column.to_string(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();

    let state_names = schema.state_columns();
    let has_id = schema
        .id_column
        .as_ref()
        .is_some_and(|id| header.contains(id));
    let expected_cols = state_names.len() + 1 + usize::from(has_id);
    if header.len() != expected_cols {
        return Err(Error::Schema(format!(
            "{source}: header has {} columns, expected {} (T·d = {} states + outcome{})",
            header.len(),
            expected_cols,
            state_names.len(),
            if has_id { " + id" } else { "" }
        )));
    }
    let position = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{source}: missing column `{name}`")))
    };
    let state_pos = state_names
        .iter()
        .map(|n| position(n))
        .collect::<Result<Vec<_>>>()?;
    let outcome_pos = position(&schema.outcome_column)?;

    let mut states = Vec::new();
    let mut outcomes = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != header.len() {
            return Err(csv_err(
                row,
                "*",
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let parse = |pos: usize| -> Result<Option<f64>> {
            let cell = &record[pos];
            if cell == schema.missing_marker {
                return Ok(None);
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(csv_err(row, &header[pos], format!("cannot parse `{cell}` as a finite number"))),
            }
        };
        let cells = state_pos.iter().map(|&p| parse(p)).collect::<Result<Vec<_>>>()?;
        let y = parse(outcome_pos)?.ok_or_else(|| {
            csv_err(row, &schema.outcome_column, "outcome is missing; outcomes are never imputed".into())
        })?;
        states.push(cells);
        outcomes.push(y);
    }

    let mut column_names = state_names;
    column_names.push(schema.outcome_column.clone());
    Ok(TrajectoryTable {
        column_names,
        horizon: schema.horizon,
        dim: schema.dim,
        states,
        outcomes,
    })
}

/// Training-split statistics for imputation and standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub horizon: usize,
    pub dim: usize,
    /// Per state column (`T·d`, block-major).
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Missing training cells per state column.
    pub imputed: Vec<usize>,
    /// Feature indices (0-based `j`) removed from every block because some
    /// block had zero variance.
    pub dropped_features: Vec<usize>,
    pub outcome_mean: f64,
    pub outcome_std: f64,
}

impl PreprocessStats {
    pub fn retained_features(&self) -> Vec<usize> {
        (0..self.dim)
            .filter(|j| !self.dropped_features.contains(j))
            .collect()
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn is_constant(mean: f64, std: f64) -> bool {
    std <= 1e-12 * (1.0 + mean.abs())
}

/// Column means and population standard deviations over present cells.
pub fn fit_preprocess(train: &TrajectoryTable) -> Result<PreprocessStats> {
    if train.len() < 2 {
        return Err(Error::invalid("train", "preprocessing needs at least two rows"));
    }
    let width = train.width();
    let mut means = Vec::with_capacity(width);
    let mut stds = Vec::with_capacity(width);
    let mut imputed = Vec::with_capacity(width);
    for c in 0..width {
        let present: Vec<f64> = train.states.iter().filter_map(|row| row[c]).collect();
        if present.is_empty() {
            return Err(Error::Schema(format!(
                "column `{}` has no observed training values",
                train.column_names[c]
            )));
        }
        let (mean, std) = mean_std(&present);
        means.push(mean);
        stds.push(std);
        imputed.push(train.len() - present.len());
    }
    let dropped_features = (0..train.dim)
        .filter(|&j| (0..train.horizon).any(|t| is_constant(means[t * train.dim + j], stds[t * train.dim + j])))
        .collect::<Vec<_>>();
    if dropped_features.len() == train.dim {
        return Err(Error::Schema("every feature has zero variance in some block".into()));
    }
    let (outcome_mean, outcome_std) = mean_std(&train.outcomes);
    if is_constant(outcome_mean, outcome_std) {
        return Err(Error::ConstantActuals);
    }
    Ok(PreprocessStats {
        horizon: train.horizon,
        dim: train.dim,
        means,
        stds,
        imputed,
        dropped_features,
        outcome_mean,
        outcome_std,
    })
}

/// Imputes with training means, standardizes with training statistics,
/// and removes dropped features from every block. The outcome is scaled
/// with the training outcome statistics as well.
pub fn apply_preprocess(table: &TrajectoryTable, stats: &PreprocessStats) -> Result<TrajectoryDataset> {
    if table.horizon != stats.horizon || table.dim != stats.dim {
        return Err(Error::Schema(format!(
            "table is T={} d={}, statistics were fit on T={} d={}",
            table.horizon, table.dim, stats.horizon, stats.dim
        )));
    }
    if table.is_empty() {
        return Err(Error::invalid("table", "no rows to transform"));
    }
    let keep = stats.retained_features();
    let m = table.len();
    let blocks = (0..table.horizon)
        .map(|t| {
            let flat: Vec<f64> = table
                .states
                .iter()
                .flat_map(|row| {
                    keep.iter().map(move |&j| {
                        let c = t * table.dim + j;
                        let v = row[c].unwrap_or(stats.means[c]);
                        (v - stats.means[c]) / stats.stds[c]
                    })
                })
                .collect();
            Matrix::from_row_slice(m, keep.len(), &flat)
        })
        .collect();
    let y: Vec<f64> = table
        .outcomes
        .iter()
        .map(|v| (v - stats.outcome_mean) / stats.outcome_std)
        .collect();
    TrajectoryDataset::new(blocks, Matrix::from_column_slice(m, 1, &y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            test: 0.2,
        }
    }
}

/// Seeded disjoint train/test partition; each part keeps file order.
pub fn split_rows(
    table: &TrajectoryTable,
    fractions: SplitFractions,
    rng: &mut RngStream,
) -> Result<(TrajectoryTable, TrajectoryTable)> {
    let SplitFractions { train, test } = fractions;
    if !(train > 0.0 && test > 0.0 && ((train + test) - 1.0).abs() < 1e-9) {
        return Err(Error::invalid(
            "fractions",
            format!("train {train} and test {test} must be positive and sum to 1"),
        ));
    }
    let m = table.len();
    let n_train = (train * m as f64).round() as usize;
    if n_train == 0 || n_train >= m {
        return Err(Error::invalid(
            "fractions",
            format!("a split of {m} rows at {train}/{test} leaves an empty part"),
        ));
    }
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(rng.rng());
    let (a, b) = idx.split_at_mut(n_train);
    a.sort_unstable();
    b.sort_unstable();
    Ok((table.select_rows(a), table.select_rows(b)))
}

/// `n` distinct row indices out of `m`, drawn without replacement, sorted.
pub fn subsample_rows(m: usize, n: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if n == 0 || n > m {
        return Err(Error::invalid(
            "n",
            format!("cannot draw {n} distinct rows from {m}"),
        ));
    }
    let mut rows = rand::seq::index::sample(rng.rng(), m, n).into_vec();
    rows.sort_unstable();
    Ok(rows)
}
