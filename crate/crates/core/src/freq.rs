//! Penalised IRLS for the spline-mode APC model, GCV smoothing-parameter
//! selection, Bayesian-covariance intervals and forecasting.
//!
//! The penalised log-likelihood is `l(β) - ½ Σ λ_b βᵀ S_b β`, so that the
//! posterior covariance is `(XᵀWX + Σ λ_b S_b)⁻¹`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::dataset::ApcDataset;
use crate::design::{ApcDesign, DesignMode, Window};
use crate::fit::{FitResult, FitRow};
use crate::optim::{self, SimplexOptions, FAILED_COST};

pub const MAX_ITERATIONS: usize = 200;
pub const MAX_HALVINGS: usize = 30;
pub const DEVIANCE_TOL: f64 = 1e-9;
/// Normal quantile used for 95% intervals.
pub const Z95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum FreqError {
    #[error("PIRLS diverged after {iterations} iterations (penalised deviance {deviance})")]
    Diverged { iterations: usize, deviance: f64 },
    #[error("penalised normal equations are singular at iteration {iteration}")]
    SingularSystem { iteration: usize },
    #[error("smoothing-parameter search failed from every start")]
    OptimFailed,
    #[error("design is not in spline mode")]
    NotSpline,
    #[error("smoothing parameters must be positive and finite, got {0:?}")]
    InvalidLambda(Vec<f64>),
    #[error("dataset has {data} cells but the design expects {design}")]
    NotConformable { data: usize, design: usize },
    #[error("no exposure for forecast period {offset} beyond the training window ({available} available)")]
    MissingExposure { offset: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Poisson,
    /// Identity link with unit working weights.
    Gaussian,
}

/// Penalised GLM with log (Poisson) or identity (Gaussian) link.
#[derive(Debug, Clone)]
pub struct PenalizedProblem {
    pub family: Family,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub offset: DVector<f64>,
    /// One `p x p` penalty per smoothing parameter.
    pub penalties: Vec<DMatrix<f64>>,
}

/// Rescales each penalty so its max-abs row sum matches that of the
/// matching diagonal block of `XᵀW₀X`, with `W₀` the starting PIRLS
/// weights. Smoothing parameters are then on a data-relative scale and the
/// default simplex starts land where the criterion varies. Returns the
/// factors applied.
pub fn normalize_penalties(problem: &mut PenalizedProblem) -> Vec<f64> {
    let w0 = match problem.family {
        Family::Poisson => problem.y.map(|y| y + 0.1),
        Family::Gaussian => DVector::from_element(problem.n_obs(), 1.0),
    };
    let info = xtwx(&problem.x, &w0);
    problem
        .penalties
        .iter_mut()
        .map(|s| {
            let cols: Vec<usize> = (0..s.ncols())
                .filter(|&j| s.column(j).amax() > 0.0)
                .collect();
            let sub = DMatrix::from_fn(cols.len(), cols.len(), |i, j| info[(cols[i], cols[j])]);
            let n = inf_norm(s);
            let f = if n > 0.0 { inf_norm(&sub) / n } else { 1.0 };
            *s *= f;
            f
        })
        .collect()
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

impl PenalizedProblem {
    /// Poisson problem on the estimation cells of a spline-mode design, with
    /// penalties normalised by [`normalize_penalties`].
    pub fn from_design(design: &ApcDesign, data: &ApcDataset) -> Result<Self, FreqError> {
        if !matches!(design.mode, DesignMode::Spline(_)) {
            return Err(FreqError::NotSpline);
        }
        if data.n_cells() != design.cells.len() {
            return Err(FreqError::NotConformable {
                data: data.n_cells(),
                design: design.cells.len(),
            });
        }
        let cells = design.cells_in(Window::Estimation);
        let x = design.model_matrix(&cells);
        let y = DVector::from_iterator(cells.len(), cells.iter().map(|&i| data.counts()[i] as f64));
        let offset =
            DVector::from_iterator(cells.len(), cells.iter().map(|&i| data.exposures()[i].ln()));
        let mut problem = PenalizedProblem {
            family: Family::Poisson,
            x,
            y,
            offset,
            penalties: design.penalties(),
        };
        normalize_penalties(&mut problem);
        Ok(problem)
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_coef(&self) -> usize {
        self.x.ncols()
    }

    pub fn penalty_matrix(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let p = self.n_coef();
        let mut s = DMatrix::zeros(p, p);
        for (pen, &l) in self.penalties.iter().zip(lambdas) {
            s += pen * l;
        }
        s
    }

    fn mean(&self, beta: &DVector<f64>) -> DVector<f64> {
        let eta = &self.x * beta + &self.offset;
        match self.family {
            Family::Poisson => eta.map(f64::exp),
            Family::Gaussian => eta,
        }
    }

    pub fn loglik(&self, beta: &DVector<f64>) -> f64 {
        let mu = self.mean(beta);
        match self.family {
            Family::Poisson => self
                .y
                .iter()
                .zip(mu.iter())
                .map(|(&y, &m)| y * m.ln() - m - ln_gamma(y + 1.0))
                .sum(),
            Family::Gaussian => -0.5 * (&self.y - mu).norm_squared(),
        }
    }

    pub fn deviance(&self, beta: &DVector<f64>) -> f64 {
        let mu = self.mean(beta);
        match self.family {
            Family::Poisson => {
                2.0 * self
                    .y
                    .iter()
                    .zip(mu.iter())
                    .map(|(&y, &m)| {
                        if y > 0.0 {
                            y * (y / m).ln() - (y - m)
                        } else {
                            m
                        }
                    })
                    .sum::<f64>()
            }
            Family::Gaussian => (&self.y - mu).norm_squared(),
        }
    }

    pub fn penalized_loglik(&self, beta: &DVector<f64>, lambdas: &[f64]) -> f64 {
        let s = self.penalty_matrix(lambdas);
        self.loglik(beta) - 0.5 * beta.dot(&(&s * beta))
    }

    pub fn gradient(&self, beta: &DVector<f64>, lambdas: &[f64]) -> DVector<f64> {
        let s = self.penalty_matrix(lambdas);
        self.x.transpose() * (&self.y - self.mean(beta)) - s * beta
    }

    fn weights(&self, mu: &DVector<f64>) -> DVector<f64> {
        match self.family {
            Family::Poisson => mu.clone(),
            Family::Gaussian => DVector::from_element(mu.len(), 1.0),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PenalizedFit {
    pub family: Family,
    #[serde(skip)]
    pub beta_hat: DVector<f64>,
    pub lambdas: Vec<f64>,
    #[serde(skip)]
    pub vb: DMatrix<f64>,
    pub edf: f64,
    /// Effective degrees of freedom attributed to each penalty's columns.
    pub block_edf: Vec<f64>,
    pub converged: bool,
    pub deviance: f64,
    pub iterations: usize,
    pub n_obs: usize,
    /// Penalised deviance after each accepted iteration.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl PenalizedFit {
    pub fn gcv(&self) -> f64 {
        let n = self.n_obs as f64;
        n * self.deviance / (n - self.edf).powi(2)
    }
}

fn xtwx(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (i, &wi) in w.iter().enumerate() {
        xw.row_mut(i).scale_mut(wi);
    }
    x.transpose() * xw
}

/// Maximises the penalised log-likelihood at fixed smoothing parameters.
pub fn pirls_problem(
    problem: &PenalizedProblem,
    lambdas: &[f64],
) -> Result<PenalizedFit, FreqError> {
    if lambdas.len() != problem.penalties.len()
        || lambdas.iter().any(|&l| !(l.is_finite() && l > 0.0))
    {
        return Err(FreqError::InvalidLambda(lambdas.to_vec()));
    }
    let s = problem.penalty_matrix(lambdas);
    let xt = problem.x.transpose();
    let pen_dev = |b: &DVector<f64>| problem.deviance(b) + b.dot(&(&s * b));

    // Start from the saturated-ish working response, as a GLM would.
    let (mut w, mut z) = match problem.family {
        Family::Poisson => {
            let mu0 = problem.y.map(|y| y + 0.1);
            let z = mu0.map(f64::ln) - &problem.offset + (&problem.y - &mu0).component_div(&mu0);
            (mu0, z)
        }
        Family::Gaussian => (
            DVector::from_element(problem.n_obs(), 1.0),
            &problem.y - &problem.offset,
        ),
    };
    let mut beta: Option<DVector<f64>> = None;
    let mut dev_old = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut trace = Vec::new();

    for it in 0..MAX_ITERATIONS {
        iterations = it + 1;
        let a = xtwx(&problem.x, &w) + &s;
        let rhs = &xt * w.component_mul(&z);
        let chol = a
            .cholesky()
            .ok_or(FreqError::SingularSystem { iteration: it })?;
        let mut candidate = chol.solve(&rhs);
        let mut dev_new = pen_dev(&candidate);
        if let Some(old) = &beta {
            let mut halvings = 0;
            while !(dev_new.is_finite() && dev_new <= dev_old) && halvings < MAX_HALVINGS {
                candidate = (&candidate + old) * 0.5;
                dev_new = pen_dev(&candidate);
                halvings += 1;
            }
            if !(dev_new.is_finite() && dev_new <= dev_old) {
                // No improving step exists: at the optimum up to rounding.
                if (dev_new - dev_old).abs() <= 1e-10 * (dev_old.abs() + 0.1) {
                    converged = true;
                    break;
                }
                return Err(FreqError::Diverged {
                    iterations,
                    deviance: dev_new,
                });
            }
        } else if !dev_new.is_finite() {
            return Err(FreqError::Diverged {
                iterations,
                deviance: dev_new,
            });
        }
        let change = (dev_old - dev_new).abs() / (dev_new.abs() + 0.1);
        beta = Some(candidate);
        let b = beta.as_ref().unwrap();
        let mu = problem.mean(b);
        w = problem.weights(&mu);
        z = match problem.family {
            Family::Poisson => &problem.x * b + (&problem.y - &mu).component_div(&mu),
            Family::Gaussian => &problem.y - &problem.offset,
        };
        dev_old = dev_new;
        trace.push(dev_new);
        if change < DEVIANCE_TOL {
            let g = problem.gradient(b, lambdas);
            let scale = problem.y.amax().max(1.0);
            if g.amax() < 1e-9 * scale || problem.family == Family::Gaussian {
                converged = true;
                break;
            }
        }
    }

    let beta_hat = beta.ok_or(FreqError::SingularSystem { iteration: 0 })?;
    let mu = problem.mean(&beta_hat);
    let h = xtwx(&problem.x, &problem.weights(&mu));
    let chol = (&h + &s).cholesky().ok_or(FreqError::SingularSystem {
        iteration: iterations,
    })?;
    let mut vb = chol.inverse();
    crate::linalg::symmetrize(&mut vb);
    let f = &vb * &h;
    let edf = f.trace();
    let mut block_edf = Vec::with_capacity(problem.penalties.len());
    for pen in &problem.penalties {
        let cols: Vec<usize> = (0..pen.ncols())
            .filter(|&j| pen.column(j).amax() > 0.0)
            .collect();
        block_edf.push(cols.iter().map(|&j| f[(j, j)]).sum());
    }
    let deviance = problem.deviance(&beta_hat);
    if problem.family == Family::Gaussian {
        let n = problem.n_obs() as f64;
        vb *= deviance / (n - edf).max(1.0);
    }
    Ok(PenalizedFit {
        family: problem.family,
        beta_hat,
        lambdas: lambdas.to_vec(),
        vb,
        edf,
        block_edf,
        converged,
        deviance,
        iterations,
        n_obs: problem.n_obs(),
        trace,
    })
}

/// PIRLS on the estimation cells of `design`.
pub fn pirls(
    design: &ApcDesign,
    data: &ApcDataset,
    lambdas: &[f64],
) -> Result<PenalizedFit, FreqError> {
    pirls_problem(&PenalizedProblem::from_design(design, data)?, lambdas)
}

/// Default simplex starts: every log λ at -2, 0 and 2.
pub fn default_starts(n: usize) -> Vec<Vec<f64>> {
    [-2.0, 0.0, 2.0].iter().map(|&v| vec![v; n]).collect()
}

/// GCV over log λ with a multi-start simplex.
pub fn select_lambda_problem(
    problem: &PenalizedProblem,
) -> Result<(Vec<f64>, PenalizedFit), FreqError> {
    let k = problem.penalties.len();
    let objective = |rho: &[f64]| {
        let lambdas: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
        match pirls_problem(problem, &lambdas) {
            Ok(fit) if fit.n_obs as f64 > fit.edf => fit.gcv(),
            _ => FAILED_COST,
        }
    };
    let opts = SimplexOptions {
        step: 1.0,
        cost_tol: 1e-10,
        max_iters: 500,
        bounds: (-20.0, 25.0),
        restarts: 6,
    };
    let best = optim::minimize_multistart(&objective, &default_starts(k), &opts)
        .ok_or(FreqError::OptimFailed)?;
    let lambdas: Vec<f64> = best.x.iter().map(|r| r.exp()).collect();
    let fit = pirls_problem(problem, &lambdas)?;
    Ok((lambdas, fit))
}

pub fn select_lambda(
    design: &ApcDesign,
    data: &ApcDataset,
) -> Result<(Vec<f64>, PenalizedFit), FreqError> {
    select_lambda_problem(&PenalizedProblem::from_design(design, data)?)
}

#[derive(Debug, Clone)]
pub struct Intervals {
    pub eta_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Linear predictor (log rate, no offset) and 95% bounds for `cells`.
pub fn intervals(fit: &PenalizedFit, design: &ApcDesign, cells: &[usize]) -> Intervals {
    let x = design.model_matrix(cells);
    let eta = &x * &fit.beta_hat;
    let var = crate::linalg::quad_diag(&x, &fit.vb);
    let se: Vec<f64> = var.iter().map(|v| v.max(0.0).sqrt()).collect();
    Intervals {
        lower: eta.iter().zip(&se).map(|(e, s)| e - Z95 * s).collect(),
        upper: eta.iter().zip(&se).map(|(e, s)| e + Z95 * s).collect(),
        eta_hat: eta.iter().copied().collect(),
        se,
    }
}

fn rows_for(design: &ApcDesign, data: &ApcDataset, cells: &[usize], iv: &Intervals) -> Vec<FitRow> {
    cells
        .iter()
        .enumerate()
        .map(|(k, &ci)| {
            let cell = &design.cells[ci];
            FitRow {
                age: data.age_groups()[cell.age].label.clone(),
                period: design.periods[cell.period],
                eta_hat: iv.eta_hat[k],
                lower: iv.lower[k],
                upper: iv.upper[k],
                window: cell.window,
            }
        })
        .collect()
}

/// Rows for the first `horizon` periods after the training window.
pub fn forecast(
    fit: &PenalizedFit,
    design: &ApcDesign,
    data: &ApcDataset,
    horizon: usize,
) -> Result<FitResult, FreqError> {
    let available = design.n_periods() - design.n_train_periods;
    if horizon > available {
        return Err(FreqError::MissingExposure {
            offset: available + 1,
            available,
        });
    }
    let cells = design.forecast_cells(horizon);
    let iv = intervals(fit, design, &cells);
    Ok(FitResult {
        rows: rows_for(design, data, &cells, &iv),
    })
}

/// In-sample rows followed by `horizon` forecast periods.
pub fn fit_result(
    fit: &PenalizedFit,
    design: &ApcDesign,
    data: &ApcDataset,
    horizon: usize,
) -> Result<FitResult, FreqError> {
    let cells = design.cells_in(Window::Estimation);
    let iv = intervals(fit, design, &cells);
    let mut out = FitResult {
        rows: rows_for(design, data, &cells, &iv),
    };
    out.rows.extend(forecast(fit, design, data, horizon)?.rows);
    out.rows.sort_by(|a, b| {
        let ka = data.age_groups().iter().position(|g| g.label == a.age);
        let kb = data.age_groups().iter().position(|g| g.label == b.age);
        ka.cmp(&kb).then(a.period.cmp(&b.period))
    });
    Ok(out)
}
