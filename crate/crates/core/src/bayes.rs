//! Latent-Gaussian APC model with RW2 curvature fields and PC hyperpriors.
//!
//! For fixed precisions the latent posterior is approximated by a Gaussian
//! at its constrained mode (Newton iterations with conditioning by kriging).
//! Hyperparameters are handled empirically: the Laplace marginal plus PC
//! log prior is maximised over `θ = ln τ`, then integrated on a 5-point
//! per-dimension grid around the mode.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::dataset::ApcDataset;
use crate::design::{n_cohorts, ApcDesign, DesignMode, Timescale, Window};
use crate::fit::{FitResult, FitRow};
use crate::gmrf::{trend_constraints, GmrfError, Kriging, PcPrior, StructureMatrix};
use crate::linalg;
use crate::optim::{self, SimplexOptions, FAILED_COST};

/// Prior precision of each fixed effect (sd 1000).
pub const FIXED_PRECISION: f64 = 1e-6;
pub const GRADIENT_TOL: f64 = 1e-8;
pub const MAX_NEWTON: usize = 100;
/// Offsets in `ln τ` of the integration grid, per dimension.
pub const GRID_OFFSETS: [f64; 5] = [-0.75, -0.375, 0.0, 0.375, 0.75];
pub const QUANTILE_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum BayesError {
    #[error("Newton iterations diverged at τ = {tau:?} (projected gradient {gradient:e})")]
    Diverged { tau: [f64; 3], gradient: f64 },
    #[error("hyperparameter search failed")]
    OptimFailed,
    #[error("precisions must be positive, got {0:?}")]
    InvalidPrecision([f64; 3]),
    #[error("design is not in GMRF mode")]
    NotGmrf,
    #[error("dataset has {data} cells but the design expects {design}")]
    NotConformable { data: usize, design: usize },
    #[error("horizon {horizon} exceeds the {available} forecast periods in the data")]
    HorizonTooLong { horizon: usize, available: usize },
    #[error(transparent)]
    Gmrf(#[from] GmrfError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Likelihood {
    /// Counts with log link and `ln N` offset.
    Poisson,
    /// Identity link with known noise precision.
    Gaussian { precision: f64 },
}

/// One row of the latent-to-predictor map: `η = fixedᵀβ + Σ_b f_b[levels_b]`.
#[derive(Debug, Clone)]
pub struct Row {
    pub fixed: [f64; 3],
    pub levels: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct Observation {
    pub row: Row,
    pub y: f64,
    pub offset: f64,
}

#[derive(Debug, Clone)]
pub struct Target {
    pub row: Row,
    /// Index into the design's cells.
    pub cell: usize,
    pub window: Window,
}

#[derive(Debug, Clone)]
pub struct Field {
    pub scale: Timescale,
    /// Level positions; the constraint's linear row is centred on these.
    pub levels: Vec<f64>,
    pub structure: StructureMatrix,
    pub prior: PcPrior,
}

impl Field {
    pub fn dim(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Debug, Clone)]
pub struct LatentModel {
    pub fields: [Field; 3],
    pub observations: Vec<Observation>,
    pub targets: Vec<Target>,
    pub likelihood: Likelihood,
    /// Number of forecast periods the fields have been extended by.
    pub horizon: usize,
    design: Option<ApcDesign>,
}

fn field_offsets(fields: &[Field; 3]) -> [usize; 3] {
    let a = 3;
    let p = a + fields[0].dim();
    let c = p + fields[1].dim();
    [a, p, c]
}

impl LatentModel {
    /// Model over the estimation cells of a GMRF-mode design.
    pub fn from_design(
        design: &ApcDesign,
        data: &ApcDataset,
        priors: [PcPrior; 3],
        likelihood: Likelihood,
    ) -> Result<Self, BayesError> {
        if design.mode != DesignMode::Gmrf {
            return Err(BayesError::NotGmrf);
        }
        if data.n_cells() != design.cells.len() {
            return Err(BayesError::NotConformable {
                data: data.n_cells(),
                design: design.cells.len(),
            });
        }
        let values: Vec<f64> = match likelihood {
            Likelihood::Poisson => data.counts().iter().map(|&c| c as f64).collect(),
            // The Gaussian variant reads the log rate as its response.
            Likelihood::Gaussian { .. } => (0..data.n_cells())
                .map(|i| (data.counts()[i] as f64 + 0.5).ln() - data.exposures()[i].ln())
                .collect(),
        };
        let offsets: Vec<f64> = match likelihood {
            Likelihood::Poisson => data.exposures().iter().map(|n| n.ln()).collect(),
            Likelihood::Gaussian { .. } => vec![0.0; data.n_cells()],
        };
        Self::from_design_values(design, &values, &offsets, priors, likelihood)
    }

    /// Model with explicit responses and offsets per design cell.
    pub fn from_design_values(
        design: &ApcDesign,
        values: &[f64],
        offsets: &[f64],
        priors: [PcPrior; 3],
        likelihood: Likelihood,
    ) -> Result<Self, BayesError> {
        if design.mode != DesignMode::Gmrf {
            return Err(BayesError::NotGmrf);
        }
        let mut model = LatentModel {
            fields: Self::fields_for(design, 0, priors)?,
            observations: Vec::new(),
            targets: Vec::new(),
            likelihood,
            horizon: 0,
            design: Some(design.clone()),
        };
        model.observations = design
            .cells_in(Window::Estimation)
            .into_iter()
            .map(|i| Observation {
                row: row_of(design, i),
                y: values[i],
                offset: offsets[i],
            })
            .collect();
        model.targets = model.targets_for(design, 0);
        Ok(model)
    }

    fn fields_for(
        design: &ApcDesign,
        horizon: usize,
        priors: [PcPrior; 3],
    ) -> Result<[Field; 3], BayesError> {
        let n_periods = design.n_train_periods + horizon;
        let sizes = [
            design.n_ages,
            n_periods,
            n_cohorts(design.n_ages, n_periods, design.ratio),
        ];
        let mut out = Vec::with_capacity(3);
        for (k, scale) in Timescale::ALL.into_iter().enumerate() {
            let levels = design.block(scale).levels[..sizes[k]].to_vec();
            out.push(Field {
                scale,
                structure: StructureMatrix::rw2(levels.len())?,
                levels,
                prior: priors[k],
            });
        }
        Ok(out.try_into().expect("three fields"))
    }

    fn targets_for(&self, design: &ApcDesign, horizon: usize) -> Vec<Target> {
        let last = design.n_train_periods + horizon;
        (0..design.cells.len())
            .filter(|&i| design.cells[i].period < last)
            .map(|i| Target {
                row: row_of(design, i),
                cell: i,
                window: design.cells[i].window,
            })
            .collect()
    }

    /// Extends the period and cohort fields by `horizon` further periods.
    /// New levels carry prior only; constraints cover the extended sets.
    pub fn forecast_extend(&self, horizon: usize) -> Result<Self, BayesError> {
        if horizon == 0 {
            return Ok(self.clone());
        }
        let design = self.design.as_ref().ok_or(BayesError::NotGmrf)?;
        let total = self.horizon + horizon;
        let available = design.n_periods() - design.n_train_periods;
        if total > available {
            return Err(BayesError::HorizonTooLong {
                horizon: total,
                available,
            });
        }
        let priors = [
            self.fields[0].prior,
            self.fields[1].prior,
            self.fields[2].prior,
        ];
        let mut out = self.clone();
        out.fields = Self::fields_for(design, total, priors)?;
        out.targets = self.targets_for(design, total);
        out.horizon = total;
        Ok(out)
    }

    pub fn with_priors(&self, priors: [PcPrior; 3]) -> Self {
        let mut out = self.clone();
        for (f, p) in out.fields.iter_mut().zip(priors) {
            f.prior = p;
        }
        out
    }

    /// Latent dimension `3 + I + J' + K'`.
    pub fn dim(&self) -> usize {
        3 + self.fields.iter().map(Field::dim).sum::<usize>()
    }

    pub fn field_offsets(&self) -> [usize; 3] {
        field_offsets(&self.fields)
    }

    /// Dense map from latent vector to the given rows' linear predictors.
    pub fn row_matrix<'a>(&self, rows: impl ExactSizeIterator<Item = &'a Row>) -> DMatrix<f64> {
        let off = self.field_offsets();
        let mut a = DMatrix::zeros(rows.len(), self.dim());
        for (r, row) in rows.enumerate() {
            for k in 0..3 {
                a[(r, k)] = row.fixed[k];
                a[(r, off[k] + row.levels[k])] += 1.0;
            }
        }
        a
    }

    /// Block-diagonal prior precision `diag(1e-6 I₃, τ_b R_b)`.
    pub fn prior_precision(&self, tau: &[f64; 3]) -> DMatrix<f64> {
        let n = self.dim();
        let mut q = DMatrix::zeros(n, n);
        for k in 0..3 {
            q[(k, k)] = FIXED_PRECISION;
        }
        for (b, off) in self.field_offsets().into_iter().enumerate() {
            for (i, j, v) in self.fields[b].structure.triplets() {
                q[(off + i, off + j)] += tau[b] * v as f64;
            }
        }
        q
    }

    /// Stacked `[1ᵀ; tᵀ]` rows for every field (6 x n).
    pub fn constraints(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(6, self.dim());
        for (b, off) in self.field_offsets().into_iter().enumerate() {
            let cb = trend_constraints(&self.fields[b].levels);
            c.view_mut((2 * b, off), (2, cb.ncols())).copy_from(&cb);
        }
        c
    }
}

fn row_of(design: &ApcDesign, i: usize) -> Row {
    let cell = &design.cells[i];
    Row {
        fixed: cell.fixed,
        levels: [cell.age, cell.period, cell.cohort],
    }
}

/// Gaussian approximation to the latent posterior at fixed precisions.
#[derive(Debug, Clone)]
pub struct GaussianApprox {
    pub tau: [f64; 3],
    pub mode: DVector<f64>,
    /// `Q_prior + Aᵀ W A` at the mode.
    pub precision: DMatrix<f64>,
    /// Laplace approximation to `ln π(y | τ)` up to a τ-free constant.
    pub log_marginal: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    chol: Cholesky<f64, Dyn>,
    kriging: Kriging,
}

impl GaussianApprox {
    /// Posterior covariance restricted to the constraint subspace.
    pub fn constrained_covariance(&self) -> DMatrix<f64> {
        self.kriging.constrained_covariance(&self.chol.inverse())
    }
}

/// Precomputed pieces shared by every τ for one model.
pub struct Workspace {
    a_obs: DMatrix<f64>,
    y: DVector<f64>,
    offset: DVector<f64>,
    c: DMatrix<f64>,
    ctc: DMatrix<f64>,
    projector: DMatrix<f64>,
    log_det_cct: f64,
    log_fact: f64,
}

impl Workspace {
    pub fn new(model: &LatentModel) -> Result<Self, BayesError> {
        let a_obs = model.row_matrix(model.observations.iter().map(|o| &o.row));
        let y = DVector::from_iterator(
            model.observations.len(),
            model.observations.iter().map(|o| o.y),
        );
        let offset = DVector::from_iterator(
            model.observations.len(),
            model.observations.iter().map(|o| o.offset),
        );
        let c = model.constraints();
        let cct = (&c * c.transpose()).cholesky().ok_or(GmrfError::RankLoss)?;
        let projector = DMatrix::identity(model.dim(), model.dim()) - c.transpose() * cct.solve(&c);
        let log_fact = match model.likelihood {
            Likelihood::Poisson => y
                .iter()
                .map(|&v| statrs::function::gamma::ln_gamma(v + 1.0))
                .sum(),
            Likelihood::Gaussian { .. } => 0.0,
        };
        Ok(Workspace {
            ctc: c.transpose() * &c,
            log_det_cct: linalg::log_det_cholesky(&cct),
            a_obs,
            y,
            offset,
            c,
            projector,
            log_fact,
        })
    }

    fn eta(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a_obs * x + &self.offset
    }

    fn loglik(&self, lik: Likelihood, x: &DVector<f64>) -> f64 {
        let eta = self.eta(x);
        match lik {
            Likelihood::Poisson => {
                self.y
                    .iter()
                    .zip(eta.iter())
                    .map(|(y, e)| y * e - e.exp())
                    .sum::<f64>()
                    - self.log_fact
            }
            Likelihood::Gaussian { precision } => -0.5 * precision * (&self.y - eta).norm_squared(),
        }
    }

    /// Likelihood score in η and the working weights.
    fn score(&self, lik: Likelihood, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let eta = self.eta(x);
        match lik {
            Likelihood::Poisson => {
                let mu = eta.map(f64::exp);
                (&self.y - &mu, mu)
            }
            Likelihood::Gaussian { precision } => (
                (&self.y - eta) * precision,
                DVector::from_element(self.y.len(), precision),
            ),
        }
    }
}

fn weighted_gram(a: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut aw = a.clone();
    for (i, &wi) in w.iter().enumerate() {
        aw.row_mut(i).scale_mut(wi);
    }
    a.transpose() * aw
}

/// Constrained Newton iterations for the latent mode at precisions `tau`.
///
/// Each step solves with `Q̃ = H + CᵀC`, which is positive definite and
/// agrees with `H` on the constraint subspace, then conditions on `Cx = 0`.
pub fn gaussian_approx(
    model: &LatentModel,
    ws: &Workspace,
    tau: [f64; 3],
    start: Option<&DVector<f64>>,
) -> Result<GaussianApprox, BayesError> {
    if tau.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(BayesError::InvalidPrecision(tau));
    }
    let lik = model.likelihood;
    let q = model.prior_precision(&tau);
    let n = model.dim();
    let zero6 = DVector::zeros(6);
    let log_post = |x: &DVector<f64>| ws.loglik(lik, x) - 0.5 * x.dot(&(&q * x));

    let mut x = match start {
        Some(s) if s.len() == n => &ws.projector * s,
        _ => DVector::zeros(n),
    };
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    let mut factor = None;
    for it in 0..MAX_NEWTON {
        iterations = it;
        let (r, w) = ws.score(lik, &x);
        let g = ws.a_obs.transpose() * r - &q * &x;
        grad_norm = (&ws.projector * &g).amax();
        let h = &q + weighted_gram(&ws.a_obs, &w);
        let chol = Cholesky::new(&h + &ws.ctc).ok_or(BayesError::Diverged {
            tau,
            gradient: grad_norm,
        })?;
        if grad_norm < GRADIENT_TOL {
            converged = true;
            factor = Some((h, chol));
            break;
        }
        let kriging = Kriging::new(&chol, &ws.c)?;
        let target = kriging.correct(&(&x + chol.solve(&g)), &zero6);
        let d = target - &x;
        let f0 = log_post(&x);
        let mut step = 1.0;
        let mut next = &x + &d;
        let mut f1 = log_post(&next);
        let mut halvings = 0;
        while !(f1.is_finite() && f1 >= f0) && halvings < 30 {
            step *= 0.5;
            next = &x + &d * step;
            f1 = log_post(&next);
            halvings += 1;
        }
        if !(f1.is_finite() && f1 >= f0) || d.amax() * step < 1e-15 * (1.0 + x.amax()) {
            // No further progress is representable; accept if already tight.
            converged =
                grad_norm < 1e-5 * (1.0 + ws.y.iter().fold(0.0, |m: f64, v| m.max(v.abs())));
            factor = Some((h, chol));
            break;
        }
        x = next;
    }
    if !converged {
        return Err(BayesError::Diverged {
            tau,
            gradient: grad_norm,
        });
    }
    let (h, chol) = factor.expect("factor set on convergence");
    let kriging = Kriging::new(&chol, &ws.c)?;

    // log det(Zᵀ H Z) = log det Q̃ + log det(C Q̃⁻¹ Cᵀ) − log det(C Cᵀ)
    let log_det_zhz = linalg::log_det_cholesky(&chol) + kriging.log_det_w() - ws.log_det_cct;
    let off = model.field_offsets();
    let mut log_prior = -0.5 * FIXED_PRECISION * x.rows(0, 3).norm_squared();
    for b in 0..3 {
        let f: Vec<f64> = x
            .rows(off[b], model.fields[b].dim())
            .iter()
            .copied()
            .collect();
        let rank = model.fields[b].structure.rank() as f64;
        log_prior +=
            0.5 * rank * tau[b].ln() - 0.5 * tau[b] * model.fields[b].structure.quad_form(&f);
    }
    let log_marginal = ws.loglik(lik, &x) + log_prior - 0.5 * log_det_zhz;
    Ok(GaussianApprox {
        tau,
        mode: x,
        precision: h,
        log_marginal,
        gradient_norm: grad_norm,
        iterations,
        chol,
        kriging,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    /// `ln τ` for age, period, cohort.
    pub theta: [f64; 3],
    pub log_posterior: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HyperPosterior {
    pub mode_theta: [f64; 3],
    pub mode_tau: [f64; 3],
    /// `τ^{-1/2}` at the mode.
    pub mode_sigma: [f64; 3],
    pub grid: Vec<GridPoint>,
    pub evaluations: u64,
}

/// Unnormalised log posterior of `θ = ln τ`: Laplace marginal plus PC priors.
pub fn log_hyper_posterior(model: &LatentModel, approx: &GaussianApprox) -> f64 {
    approx.log_marginal
        + (0..3)
            .map(|b| {
                model.fields[b]
                    .prior
                    .log_density_log_precision(approx.tau[b].ln())
            })
            .sum::<f64>()
}

fn theta_tau(theta: &[f64]) -> [f64; 3] {
    [theta[0].exp(), theta[1].exp(), theta[2].exp()]
}

/// Hyperparameter posterior mode and integration grid.
pub fn hyper_posterior(model: &LatentModel, ws: &Workspace) -> Result<HyperPosterior, BayesError> {
    let warm = std::sync::Mutex::new(None::<DVector<f64>>);
    let count = std::sync::atomic::AtomicU64::new(0);
    let objective = |theta: &[f64]| {
        count.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let start = warm.lock().unwrap().clone();
        match gaussian_approx(model, ws, theta_tau(theta), start.as_ref()) {
            Ok(g) => {
                let v = -log_hyper_posterior(model, &g);
                *warm.lock().unwrap() = Some(g.mode);
                v
            }
            Err(_) => FAILED_COST,
        }
    };
    let opts = SimplexOptions {
        step: 1.0,
        cost_tol: 1e-9,
        max_iters: 600,
        bounds: (-8.0, 22.0),
        restarts: 4,
    };
    let starts = vec![vec![4.0; 3], vec![9.0; 3]];
    let best =
        optim::minimize_multistart(&objective, &starts, &opts).ok_or(BayesError::OptimFailed)?;
    let mode_theta = [best.x[0], best.x[1], best.x[2]];
    let mode_start = warm.lock().unwrap().clone();

    let mut thetas = Vec::with_capacity(125);
    for &da in &GRID_OFFSETS {
        for &dp in &GRID_OFFSETS {
            for &dc in &GRID_OFFSETS {
                thetas.push([mode_theta[0] + da, mode_theta[1] + dp, mode_theta[2] + dc]);
            }
        }
    }
    let logs: Vec<f64> = thetas
        .par_iter()
        .map(|th| {
            gaussian_approx(model, ws, theta_tau(th), mode_start.as_ref())
                .map(|g| log_hyper_posterior(model, &g))
                .unwrap_or(f64::NEG_INFINITY)
        })
        .collect();
    let grid = normalize_grid(thetas, logs).ok_or(BayesError::OptimFailed)?;
    Ok(HyperPosterior {
        mode_theta,
        mode_tau: theta_tau(&mode_theta),
        mode_sigma: mode_theta.map(|t| (-0.5 * t).exp()),
        grid,
        evaluations: count.into_inner(),
    })
}

fn normalize_grid(thetas: Vec<[f64; 3]>, logs: Vec<f64>) -> Option<Vec<GridPoint>> {
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    Some(
        thetas
            .into_iter()
            .zip(logs)
            .map(|(theta, l)| GridPoint {
                theta,
                log_posterior: l,
                weight: (l - max).exp() / total,
            })
            .collect(),
    )
}

/// One-component-per-grid-point Gaussian mixture for a scalar.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Mixture {
    pub fn cdf(&self, x: f64) -> f64 {
        let std = Normal::standard();
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.sds)
            .map(|((w, m), s)| {
                if *s > 0.0 {
                    w * std.cdf((x - m) / s)
                } else if x >= *m {
                    *w
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// Inverts the CDF by bisection until the probability is within
    /// [`QUANTILE_TOL`] of `p`.
    pub fn quantile(&self, p: f64) -> f64 {
        let spread = self.sds.iter().cloned().fold(0.0, f64::max).max(1e-300);
        let mut lo = self.means.iter().cloned().fold(f64::INFINITY, f64::min) - 40.0 * spread;
        let mut hi = self.means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 40.0 * spread;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let f = self.cdf(mid);
            if (f - p).abs() < QUANTILE_TOL || hi - lo <= f64::EPSILON * mid.abs().max(1.0) {
                return mid;
            }
            if f < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub cell: usize,
    pub window: Window,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PosteriorSummary {
    pub cells: Vec<CellSummary>,
    pub hyper: HyperPosterior,
}

/// Per-target mixture moments over the grid: `(weights, means, variances)`
/// with one column per grid point.
pub fn target_moments(
    model: &LatentModel,
    ws: &Workspace,
    hyper: &HyperPosterior,
    min_weight: f64,
) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>), BayesError> {
    let a = model.row_matrix(model.targets.iter().map(|t| &t.row));
    let kept: Vec<&GridPoint> = hyper
        .grid
        .iter()
        .filter(|g| g.weight >= min_weight)
        .collect();
    let start = gaussian_approx(model, ws, hyper.mode_tau, None)?.mode;
    let cols: Vec<(DVector<f64>, DVector<f64>)> = kept
        .par_iter()
        .map(|g| {
            let ga = gaussian_approx(model, ws, theta_tau(&g.theta), Some(&start))?;
            let cov = ga.constrained_covariance();
            Ok((&a * &ga.mode, linalg::quad_diag(&a, &cov)))
        })
        .collect::<Result<_, BayesError>>()?;
    let total: f64 = kept.iter().map(|g| g.weight).sum();
    let weights = kept.iter().map(|g| g.weight / total).collect();
    let means = DMatrix::from_fn(a.nrows(), cols.len(), |i, k| cols[k].0[i]);
    let vars = DMatrix::from_fn(a.nrows(), cols.len(), |i, k| cols[k].1[i].max(0.0));
    Ok((weights, means, vars))
}

/// Posterior median and 95% bounds of η for every target cell.
pub fn posterior_eta(
    model: &LatentModel,
    ws: &Workspace,
    hyper: HyperPosterior,
) -> Result<PosteriorSummary, BayesError> {
    let (weights, means, vars) = target_moments(model, ws, &hyper, 1e-10)?;
    let cells = model
        .targets
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let mix = Mixture {
                weights: weights.clone(),
                means: means.row(i).iter().copied().collect(),
                sds: vars.row(i).iter().map(|v| v.sqrt()).collect(),
            };
            CellSummary {
                cell: t.cell,
                window: t.window,
                median: mix.quantile(0.5),
                q025: mix.quantile(0.025),
                q975: mix.quantile(0.975),
            }
        })
        .collect();
    Ok(PosteriorSummary { cells, hyper })
}

/// Full RW2 fit: hyperparameters on the training data, then posterior
/// summaries on the training grid extended by `horizon` periods.
pub fn fit(model: &LatentModel, horizon: usize) -> Result<PosteriorSummary, BayesError> {
    let extended = model.forecast_extend(horizon)?;
    let ws = Workspace::new(&extended)?;
    let hyper = hyper_posterior(&extended, &ws)?;
    posterior_eta(&extended, &ws, hyper)
}

/// Converts a summary into FitResult rows (median and 2.5%/97.5% bounds).
pub fn to_fit_result(
    summary: &PosteriorSummary,
    design: &ApcDesign,
    data: &ApcDataset,
) -> FitResult {
    let rows = summary
        .cells
        .iter()
        .map(|c| {
            let cell = &design.cells[c.cell];
            FitRow {
                age: data.age_groups()[cell.age].label.clone(),
                period: design.periods[cell.period],
                eta_hat: c.median,
                lower: c.q025,
                upper: c.q975,
                window: c.window,
            }
        })
        .collect();
    FitResult { rows }
}
