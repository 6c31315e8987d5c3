//! Simulation study: Poisson data from a known smooth APC truth, fitted by
//! each engine and scored against the truth.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assess::{score_fit, AssessError, Scale, ScoreReport, TruthTable};
use crate::dataset::{AgeGroup, ApcDataset, DatasetError};
use crate::design::{SlopePair, Window};
use crate::engine::{fit_engine, Engine};
use crate::fit::FitResult;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Assess(#[from] AssessError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A named curve on one timescale, evaluated at ages, years or birth years.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Zero,
    /// Gaussian bump with different spreads left and right of the peak.
    Bump {
        peak: f64,
        left: f64,
        right: f64,
        height: f64,
    },
    Sigmoid {
        centre: f64,
        width: f64,
        height: f64,
    },
    Sine {
        period: f64,
        phase: f64,
        amplitude: f64,
    },
    /// Coefficients in powers of `(x - origin) / unit`.
    Polynomial {
        origin: f64,
        unit: f64,
        coefs: Vec<f64>,
    },
    Sum {
        terms: Vec<Shape>,
    },
}

impl Shape {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Shape::Zero => 0.0,
            Shape::Bump {
                peak,
                left,
                right,
                height,
            } => {
                let s = if x < *peak { left } else { right };
                height * (-0.5 * ((x - peak) / s).powi(2)).exp()
            }
            Shape::Sigmoid {
                centre,
                width,
                height,
            } => height / (1.0 + (-(x - centre) / width).exp()),
            Shape::Sine {
                period,
                phase,
                amplitude,
            } => amplitude * (std::f64::consts::TAU * x / period + phase).sin(),
            Shape::Polynomial {
                origin,
                unit,
                coefs,
            } => {
                let t = (x - origin) / unit;
                coefs.iter().rev().fold(0.0, |acc, c| acc * t + c)
            }
            Shape::Sum { terms } => terms.iter().map(|t| t.eval(x)).sum(),
        }
    }
}

/// Removes the least-squares line from `values` taken at `xs`.
pub fn detrend(xs: &[f64], values: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = values.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(values)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    xs.iter()
        .zip(values)
        .map(|(x, y)| y - my - b * (x - mx))
        .collect()
}

/// Truth on the single-year grid:
/// `eta = shift + intercept + slope_age * (age - mean age) + slope_period * (year - mean year)
///  + scale * (fA + fP + fC)`, each curvature detrended over its grid levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub f_age: Shape,
    pub f_period: Shape,
    pub f_cohort: Shape,
    pub intercept: f64,
    pub slope_age: f64,
    pub slope_period: f64,
    pub scale: f64,
    pub shift: f64,
}

impl Default for TruthSpec {
    fn default() -> Self {
        let spec = TruthSpec {
            f_age: Shape::Bump {
                peak: 57.0,
                left: 14.0,
                right: 9.0,
                height: 2.2,
            },
            f_period: Shape::Sigmoid {
                centre: 2015.0,
                width: 2.2,
                height: 0.45,
            },
            f_cohort: Shape::Sine {
                period: 15.0,
                phase: 0.0,
                amplitude: 0.1,
            },
            intercept: 0.0,
            slope_age: 0.03,
            slope_period: 0.01,
            scale: 1.0,
            shift: 0.0,
        };
        spec.calibrated(&SimConfig::default(), DEFAULT_MEAN_COUNT)
    }
}

/// Mean aggregated count the default truth is calibrated to.
pub const DEFAULT_MEAN_COUNT: f64 = 45.0;

impl TruthSpec {
    /// Linear predictor on the single-year grid, row-major age x period.
    pub fn eta_grid(&self, config: &SimConfig) -> Vec<f64> {
        let ages: Vec<f64> = config.ages().map(f64::from).collect();
        let years: Vec<f64> = config.periods().map(f64::from).collect();
        let first_cohort = config.first_period - config.last_age;
        let cohorts: Vec<f64> = (first_cohort..=config.last_period - config.first_age)
            .map(f64::from)
            .collect();
        let curve = |shape: &Shape, xs: &[f64]| {
            detrend(xs, &xs.iter().map(|&x| shape.eval(x)).collect::<Vec<_>>())
        };
        let fa = curve(&self.f_age, &ages);
        let fp = curve(&self.f_period, &years);
        let fc = curve(&self.f_cohort, &cohorts);
        let mean_age = ages.iter().sum::<f64>() / ages.len() as f64;
        let mean_year = years.iter().sum::<f64>() / years.len() as f64;
        let mut eta = Vec::with_capacity(ages.len() * years.len());
        for (a, &age) in ages.iter().enumerate() {
            for (p, &year) in years.iter().enumerate() {
                let c =
                    (config.first_period + p as i32 - config.first_age - a as i32 - first_cohort)
                        as usize;
                eta.push(
                    self.shift
                        + self.intercept
                        + self.slope_age * (age - mean_age)
                        + self.slope_period * (year - mean_year)
                        + self.scale * (fa[a] + fp[p] + fc[c]),
                );
            }
        }
        eta
    }

    /// Copy with `shift` set so the expected aggregated count averages `mean_count`.
    pub fn calibrated(&self, config: &SimConfig, mean_count: f64) -> Self {
        let mut out = self.clone();
        out.shift = 0.0;
        let eta = out.eta_grid(config);
        let j = config.n_periods();
        let n_groups = config.n_ages() / config.agg_width;
        let total: f64 = eta.iter().map(|e| config.exposure * e.exp()).sum();
        out.shift = (mean_count * (n_groups * j) as f64 / total).ln();
        out
    }

    /// True aggregated log rates `ln(sum N exp(eta) / sum N)` per age block.
    pub fn aggregated_truth(&self, config: &SimConfig) -> Result<TruthTable, SimError> {
        config.validate()?;
        let eta = self.eta_grid(config);
        let j = config.n_periods();
        let w = config.agg_width;
        let mut table = TruthTable::default();
        for g in 0..config.n_ages() / w {
            let lower = config.first_age + (g * w) as i32;
            let label = AgeGroup::new(lower, lower + w as i32 - 1).label;
            for (p, year) in config.periods().enumerate() {
                // Exposure is equal across single years, so it cancels.
                let mass: f64 =
                    (0..w).map(|k| eta[(g * w + k) * j + p].exp()).sum::<f64>() / w as f64;
                table.insert(label.clone(), year, mass.ln());
            }
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub first_age: i32,
    pub last_age: i32,
    pub first_period: i32,
    pub last_period: i32,
    pub exposure: f64,
    pub agg_width: usize,
    pub train_through: i32,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            first_age: 10,
            last_age: 84,
            first_period: 2000,
            last_period: 2020,
            exposure: 750_000.0,
            agg_width: 5,
            train_through: 2017,
            replicates: 20,
            seed: 42,
        }
    }
}

impl SimConfig {
    pub fn ages(&self) -> std::ops::RangeInclusive<i32> {
        self.first_age..=self.last_age
    }

    pub fn periods(&self) -> std::ops::RangeInclusive<i32> {
        self.first_period..=self.last_period
    }

    pub fn n_ages(&self) -> usize {
        (self.last_age - self.first_age + 1).max(0) as usize
    }

    pub fn n_periods(&self) -> usize {
        (self.last_period - self.first_period + 1).max(0) as usize
    }

    pub fn n_train(&self) -> usize {
        (self.train_through - self.first_period + 1) as usize
    }

    pub fn horizon(&self) -> usize {
        (self.last_period - self.train_through) as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if self.n_ages() == 0 || self.n_periods() == 0 {
            return bad("empty age or period range");
        }
        if self.agg_width == 0 || self.n_ages() % self.agg_width != 0 {
            return bad("age span must be a multiple of agg_width");
        }
        if self.train_through < self.first_period || self.train_through >= self.last_period {
            return bad("train_through must lie in [first_period, last_period)");
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if !(self.exposure > 0.0) || !self.exposure.is_finite() {
            return bad("exposure must be positive");
        }
        Ok(())
    }
}

/// Generator for one cell's draws, keyed by (seed, replicate, cell).
fn cell_rng(seed: u64, replicate: usize, cell: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(replicate as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(cell as u64);
    rng
}

/// Single-year Poisson counts aggregated into `agg_width`-year groups.
pub fn generate_replicate(
    spec: &TruthSpec,
    config: &SimConfig,
    replicate: usize,
) -> Result<ApcDataset, SimError> {
    config.validate()?;
    let eta = spec.eta_grid(config);
    let counts = eta
        .iter()
        .enumerate()
        .map(|(cell, e)| {
            let mean = config.exposure * e.exp();
            if mean > 0.0 && mean.is_finite() {
                let draw: f64 = Poisson::new(mean)
                    .expect("positive mean")
                    .sample(&mut cell_rng(config.seed, replicate, cell));
                draw as u64
            } else {
                0
            }
        })
        .collect();
    let groups = config.ages().map(|a| AgeGroup::new(a, a)).collect();
    let single = ApcDataset::new(
        groups,
        config.periods().collect(),
        counts,
        vec![config.exposure; eta.len()],
    )?;
    Ok(single.aggregate_ages(config.agg_width)?)
}

/// One engine's scores on one replicate and window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub engine: String,
    pub window: Window,
    pub mae: f64,
    pub mse: f64,
    pub interval_score: f64,
    pub mean_width: f64,
    pub coverage: f64,
    pub n_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub replicate: usize,
    pub engine: String,
    pub error: String,
}

/// Cross-replicate means for one engine and window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub engine: String,
    pub window: Window,
    pub mae: f64,
    pub mse: f64,
    pub interval_score: f64,
    pub mean_width: f64,
    pub coverage: f64,
    pub n_replicates: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, Default)]
pub struct StudyOutput {
    pub rows: Vec<ReplicateRow>,
    pub failures: Vec<FailureRow>,
    pub summary: Vec<SummaryRow>,
    /// Fits per (replicate, engine name), kept when requested.
    pub fits: Vec<(usize, String, FitResult)>,
}

impl StudyOutput {
    pub fn summary_for(&self, engine: &str, window: Window) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.engine == engine && s.window == window)
    }

    pub fn row(&self, replicate: usize, engine: &str, window: Window) -> Option<&ReplicateRow> {
        self.rows
            .iter()
            .find(|r| r.replicate == replicate && r.engine == engine && r.window == window)
    }

    pub fn fit(&self, replicate: usize, engine: &str) -> Option<&FitResult> {
        self.fits
            .iter()
            .find(|(r, e, _)| *r == replicate && e == engine)
            .map(|(_, _, f)| f)
    }

    pub fn failure_rate(&self) -> f64 {
        let jobs = self.failures.len() + self.rows.len() / 2;
        if jobs == 0 {
            0.0
        } else {
            self.failures.len() as f64 / jobs as f64
        }
    }

    pub fn write_rows<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.summary {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_failures<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.failures {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes scores.csv, summary.csv, failures.csv under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), SimError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.write_rows(std::fs::File::create(dir.join("scores.csv"))?)?;
        self.write_summary(std::fs::File::create(dir.join("summary.csv"))?)?;
        self.write_failures(std::fs::File::create(dir.join("failures.csv"))?)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StudyOptions {
    pub alpha: f64,
    pub slopes: SlopePair,
    pub keep_fits: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            alpha: 0.05,
            slopes: SlopePair::default(),
            keep_fits: false,
        }
    }
}

enum JobOutcome {
    Scored(Vec<ReplicateRow>, Option<FitResult>),
    Failed(String),
}

fn run_job(
    replicate: usize,
    engine: &Engine,
    data: &ApcDataset,
    truth: &TruthTable,
    config: &SimConfig,
    opts: &StudyOptions,
) -> JobOutcome {
    let fit = match fit_engine(
        engine,
        data,
        config.n_train(),
        config.horizon(),
        opts.slopes,
    ) {
        Ok(f) => f.result,
        Err(e) => return JobOutcome::Failed(e.to_string()),
    };
    let reports: Vec<ScoreReport> = match score_fit(&fit, truth, None, opts.alpha, Scale::Log) {
        Ok(r) => r,
        Err(e) => return JobOutcome::Failed(e.to_string()),
    };
    let rows = reports
        .into_iter()
        .map(|r| ReplicateRow {
            replicate,
            engine: engine.name(),
            window: r.window,
            mae: r.mae,
            mse: r.mse,
            interval_score: r.interval_score,
            mean_width: r.mean_width,
            coverage: r.coverage,
            n_cells: r.n_cells,
        })
        .collect();
    JobOutcome::Scored(rows, opts.keep_fits.then_some(fit))
}

/// Fits every engine on every replicate. Failed jobs are recorded and the
/// study carries on.
pub fn run_study(
    spec: &TruthSpec,
    config: &SimConfig,
    engines: &[Engine],
    opts: &StudyOptions,
) -> Result<StudyOutput, SimError> {
    config.validate()?;
    let truth = spec.aggregated_truth(config)?;
    let datasets = (0..config.replicates)
        .map(|r| generate_replicate(spec, config, r))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..config.replicates)
        .flat_map(|r| (0..engines.len()).map(move |e| (r, e)))
        .collect();
    let outcomes: Vec<(usize, usize, JobOutcome)> = jobs
        .par_iter()
        .map(|&(r, e)| {
            (
                r,
                e,
                run_job(r, &engines[e], &datasets[r], &truth, config, opts),
            )
        })
        .collect();

    let mut out = StudyOutput::default();
    for (r, e, outcome) in outcomes {
        match outcome {
            JobOutcome::Scored(rows, fit) => {
                out.rows.extend(rows);
                if let Some(f) = fit {
                    out.fits.push((r, engines[e].name(), f));
                }
            }
            JobOutcome::Failed(error) => out.failures.push(FailureRow {
                replicate: r,
                engine: engines[e].name(),
                error,
            }),
        }
    }
    out.summary = summarize(&out, engines);
    Ok(out)
}

fn summarize(out: &StudyOutput, engines: &[Engine]) -> Vec<SummaryRow> {
    let mut summary = Vec::new();
    for engine in engines {
        let name = engine.name();
        let n_failed = out.failures.iter().filter(|f| f.engine == name).count();
        for window in [Window::Estimation, Window::Prediction] {
            let rows: Vec<&ReplicateRow> = out
                .rows
                .iter()
                .filter(|r| r.engine == name && r.window == window)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            let mean = |f: fn(&ReplicateRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            summary.push(SummaryRow {
                engine: name.clone(),
                window,
                mae: mean(|r| r.mae),
                mse: mean(|r| r.mse),
                interval_score: mean(|r| r.interval_score),
                mean_width: mean(|r| r.mean_width),
                coverage: mean(|r| r.coverage),
                n_replicates: rows.len(),
                n_failed,
            });
        }
    }
    summary
}
