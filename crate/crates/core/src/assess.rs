//! Scoring of fitted log rates against truth: MAE, MSE, interval score,
//! mean width and empirical coverage per estimation/prediction window.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ApcDataset, DatasetError};
use crate::design::Window;
use crate::fit::FitResult;

#[derive(Debug, Error)]
pub enum AssessError {
    #[error("shape mismatch: expected {expected} cells, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("inverted interval at cell {index}: lower {lower} > upper {upper}")]
    InvertedInterval {
        index: usize,
        lower: f64,
        upper: f64,
    },
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("no cells to score")]
    Empty,
    #[error("no truth value for age {age:?}, period {period}")]
    MissingTruth { age: String, period: i32 },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn check_len(expected: usize, got: usize) -> Result<(), AssessError> {
    if expected != got {
        return Err(AssessError::ShapeMismatch { expected, got });
    }
    if expected == 0 {
        return Err(AssessError::Empty);
    }
    Ok(())
}

fn check_intervals(lower: &[f64], upper: &[f64]) -> Result<(), AssessError> {
    for (index, (&l, &u)) in lower.iter().zip(upper).enumerate() {
        if l > u {
            return Err(AssessError::InvertedInterval {
                index,
                lower: l,
                upper: u,
            });
        }
    }
    Ok(())
}

/// Mean absolute and mean squared error.
pub fn mae_mse(eta_hat: &[f64], eta_true: &[f64]) -> Result<(f64, f64), AssessError> {
    check_len(eta_true.len(), eta_hat.len())?;
    let n = eta_true.len() as f64;
    let (abs, sq) = eta_hat
        .iter()
        .zip(eta_true)
        .fold((0.0, 0.0), |(a, s), (h, t)| {
            (a + (h - t).abs(), s + (h - t).powi(2))
        });
    Ok((abs / n, sq / n))
}

/// Interval score of one cell; endpoints count as covered.
pub fn interval_score_cell(eta: f64, lower: f64, upper: f64, alpha: f64) -> f64 {
    let mut s = upper - lower;
    if eta < lower {
        s += 2.0 / alpha * (lower - eta);
    }
    if eta > upper {
        s += 2.0 / alpha * (eta - upper);
    }
    s
}

#[derive(Debug, Clone)]
pub struct IntervalScores {
    pub per_cell: Vec<f64>,
    pub mean: f64,
}

pub fn interval_score(
    eta_true: &[f64],
    lower: &[f64],
    upper: &[f64],
    alpha: f64,
) -> Result<IntervalScores, AssessError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AssessError::InvalidAlpha(alpha));
    }
    check_len(eta_true.len(), lower.len())?;
    check_len(eta_true.len(), upper.len())?;
    check_intervals(lower, upper)?;
    let per_cell: Vec<f64> = (0..eta_true.len())
        .map(|i| interval_score_cell(eta_true[i], lower[i], upper[i], alpha))
        .collect();
    let mean = per_cell.iter().sum::<f64>() / per_cell.len() as f64;
    Ok(IntervalScores { per_cell, mean })
}

/// Fraction of cells with `l ≤ η ≤ u`, and the mean width.
pub fn coverage_width(
    eta_true: &[f64],
    lower: &[f64],
    upper: &[f64],
) -> Result<(f64, f64), AssessError> {
    check_len(eta_true.len(), lower.len())?;
    check_len(eta_true.len(), upper.len())?;
    check_intervals(lower, upper)?;
    let n = eta_true.len() as f64;
    let covered = (0..eta_true.len())
        .filter(|&i| lower[i] <= eta_true[i] && eta_true[i] <= upper[i])
        .count();
    let width = lower.iter().zip(upper).map(|(l, u)| u - l).sum::<f64>() / n;
    Ok((covered as f64 / n, width))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub window: Window,
    pub mae: f64,
    pub mse: f64,
    pub interval_score: f64,
    pub mean_width: f64,
    pub coverage: f64,
    pub n_cells: usize,
}

impl ScoreReport {
    pub fn compute(
        window: Window,
        eta_hat: &[f64],
        lower: &[f64],
        upper: &[f64],
        eta_true: &[f64],
        alpha: f64,
    ) -> Result<Self, AssessError> {
        let (mae, mse) = mae_mse(eta_hat, eta_true)?;
        let is = interval_score(eta_true, lower, upper, alpha)?;
        let (coverage, mean_width) = coverage_width(eta_true, lower, upper)?;
        Ok(ScoreReport {
            window,
            mae,
            mse,
            interval_score: is.mean,
            mean_width,
            coverage,
            n_cells: eta_true.len(),
        })
    }
}

/// Scale on which scores are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Log,
    /// Exponentiated values; exploratory only.
    Rate,
}

impl Scale {
    fn apply(self, v: f64) -> f64 {
        match self {
            Scale::Log => v,
            Scale::Rate => v.exp(),
        }
    }
}

/// True log rates keyed by age label and period.
#[derive(Debug, Clone, Default)]
pub struct TruthTable {
    values: HashMap<(String, i32), f64>,
}

#[derive(Debug, Deserialize)]
struct TruthRecord {
    age: String,
    period: i32,
    eta: f64,
}

impl TruthTable {
    pub fn insert(&mut self, age: impl Into<String>, period: i32, eta: f64) {
        self.values.insert((age.into(), period), eta);
    }

    pub fn get(&self, age: &str, period: i32) -> Option<f64> {
        self.values.get(&(age.to_string(), period)).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Observed log rates `ln((y + correction) / N)`, the stand-in for truth
    /// on real data.
    pub fn from_observed(data: &ApcDataset, correction: f64) -> Result<Self, AssessError> {
        let surface = data.log_rates(correction)?;
        let mut t = TruthTable::default();
        for (a, g) in data.age_groups().iter().enumerate() {
            for (p, &year) in data.periods().iter().enumerate() {
                t.insert(g.label.clone(), year, surface.get(a, p));
            }
        }
        Ok(t)
    }

    /// Reads columns `age, period, eta`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, AssessError> {
        let mut t = TruthTable::default();
        for rec in csv::Reader::from_reader(r).deserialize::<TruthRecord>() {
            let rec = rec?;
            t.insert(rec.age, rec.period, rec.eta);
        }
        Ok(t)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self, AssessError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Writes `age, period, eta` sorted by age label then period.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), AssessError> {
        let mut keys: Vec<&(String, i32)> = self.values.keys().collect();
        keys.sort();
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["age", "period", "eta"])?;
        for k in keys {
            out.write_record([
                k.0.clone(),
                k.1.to_string(),
                format!("{:.16e}", self.values[k]),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Scores a fit per window. With `split_year`, rows are re-partitioned:
/// periods before it are estimation, the rest prediction. Windows with no
/// rows are omitted.
pub fn score_fit(
    fit: &FitResult,
    truth: &TruthTable,
    split_year: Option<i32>,
    alpha: f64,
    scale: Scale,
) -> Result<Vec<ScoreReport>, AssessError> {
    let mut out = Vec::new();
    for window in [Window::Estimation, Window::Prediction] {
        let mut cols: [Vec<f64>; 4] = Default::default();
        for r in &fit.rows {
            let w = match split_year {
                Some(y) if r.period < y => Window::Estimation,
                Some(_) => Window::Prediction,
                None => r.window,
            };
            if w != window {
                continue;
            }
            let t = truth
                .get(&r.age, r.period)
                .ok_or_else(|| AssessError::MissingTruth {
                    age: r.age.clone(),
                    period: r.period,
                })?;
            for (col, v) in cols.iter_mut().zip([r.eta_hat, r.lower, r.upper, t]) {
                col.push(scale.apply(v));
            }
        }
        if cols[0].is_empty() {
            continue;
        }
        out.push(ScoreReport::compute(
            window, &cols[0], &cols[1], &cols[2], &cols[3], alpha,
        )?);
    }
    Ok(out)
}
