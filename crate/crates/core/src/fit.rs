//! Fitted linear predictor with interval bounds on the observed and forecast
//! grid. Both engines emit this shape.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::Window;

#[derive(Debug, Error)]
pub enum FitIoError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("fit file has no rows")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub age: String,
    pub period: i32,
    pub eta_hat: f64,
    pub lower: f64,
    pub upper: f64,
    pub window: Window,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitResult {
    pub rows: Vec<FitRow>,
}

impl FitResult {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn in_window(&self, window: Window) -> impl Iterator<Item = &FitRow> {
        self.rows.iter().filter(move |r| r.window == window)
    }

    /// Writes the rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), FitIoError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["age", "period", "eta_hat", "lower", "upper", "window"])?;
        for r in &self.rows {
            out.write_record([
                r.age.clone(),
                r.period.to_string(),
                format!("{:.16e}", r.eta_hat),
                format!("{:.16e}", r.lower),
                format!("{:.16e}", r.upper),
                r.window.as_str().to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), FitIoError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, FitIoError> {
        let mut rdr = csv::Reader::from_reader(r);
        let rows = rdr.deserialize().collect::<Result<Vec<FitRow>, _>>()?;
        if rows.is_empty() {
            return Err(FitIoError::Empty);
        }
        Ok(FitResult { rows })
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self, FitIoError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("fit grids differ: {0}")]
pub struct GridMismatch(pub String);

/// One cell of a paired comparison between two fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub age: String,
    pub period: i32,
    pub window: Window,
    pub eta_a: f64,
    pub eta_b: f64,
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<PairedRow>,
    pub correlation: f64,
    pub max_abs_diff: f64,
    pub median_abs_diff: f64,
}

/// Pairs point estimates of two fits on the same grid, matched by age and period.
pub fn compare(a: &FitResult, b: &FitResult) -> Result<Comparison, GridMismatch> {
    if a.len() != b.len() {
        return Err(GridMismatch(format!(
            "{} rows vs {} rows",
            a.len(),
            b.len()
        )));
    }
    let index: std::collections::HashMap<(&str, i32), &FitRow> = b
        .rows
        .iter()
        .map(|r| ((r.age.as_str(), r.period), r))
        .collect();
    let mut rows = Vec::with_capacity(a.len());
    for ra in &a.rows {
        let rb = index.get(&(ra.age.as_str(), ra.period)).ok_or_else(|| {
            GridMismatch(format!(
                "cell ({}, {}) missing from second fit",
                ra.age, ra.period
            ))
        })?;
        if ra.window != rb.window {
            return Err(GridMismatch(format!(
                "cell ({}, {}) is in different windows",
                ra.age, ra.period
            )));
        }
        rows.push(PairedRow {
            age: ra.age.clone(),
            period: ra.period,
            window: ra.window,
            eta_a: ra.eta_hat,
            eta_b: rb.eta_hat,
            diff: rb.eta_hat - ra.eta_hat,
        });
    }
    let n = rows.len() as f64;
    let (ma, mb) = (
        rows.iter().map(|r| r.eta_a).sum::<f64>() / n,
        rows.iter().map(|r| r.eta_b).sum::<f64>() / n,
    );
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for r in &rows {
        sab += (r.eta_a - ma) * (r.eta_b - mb);
        saa += (r.eta_a - ma).powi(2);
        sbb += (r.eta_b - mb).powi(2);
    }
    let correlation = if saa == 0.0 && sbb == 0.0 {
        1.0
    } else {
        sab / (saa * sbb).sqrt()
    };
    let mut abs: Vec<f64> = rows.iter().map(|r| r.diff.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let max_abs_diff = abs.last().copied().unwrap_or(0.0);
    let median_abs_diff = match abs.len() {
        0 => 0.0,
        k if k % 2 == 1 => abs[k / 2],
        k => 0.5 * (abs[k / 2 - 1] + abs[k / 2]),
    };
    Ok(Comparison {
        rows,
        correlation,
        max_abs_diff,
        median_abs_diff,
    })
}
