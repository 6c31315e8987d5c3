mod common;

use apcsmooth::basis::BasisFamily;
use apcsmooth::design::{ApcDesign, DesignMode, SlopePair, SplineSpec, Window};
use apcsmooth::freq::{self, PenalizedProblem};
use argmin::core::{CostFunction, Executor, Gradient};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn wiggly(a: usize, p: usize, c: usize) -> f64 {
    -7.0 + 0.04 * a as f64 - 0.02 * p as f64
        + 0.35 * (a as f64 / 1.8).sin()
        + 0.25 * (p as f64 / 1.6).sin()
        + 0.2 * (c as f64 / 3.0).cos()
}

fn linear(a: usize, p: usize, _c: usize) -> f64 {
    -7.0 + 0.04 * a as f64 - 0.02 * p as f64
}

fn spline(family: BasisFamily, knots: [usize; 3]) -> DesignMode {
    DesignMode::Spline(SplineSpec { family, knots })
}

#[test]
fn infinite_penalty_matches_fixed_effect_glm() {
    let data = common::poisson_grid(10, 14, 5, 2e5, 1, wiggly);
    let design = ApcDesign::build(
        &data,
        14,
        spline(BasisFamily::Tprs, [8, 8, 10]),
        SlopePair::default(),
    )
    .unwrap();
    let fit = freq::pirls(&design, &data, &[1e12; 3]).unwrap();
    assert!(fit.converged);

    let cells = design.cells_in(Window::Estimation);
    let x0 = DMatrix::from_fn(cells.len(), 3, |r, k| design.cells[cells[r]].fixed[k]);
    let y: Vec<f64> = cells.iter().map(|&i| data.counts()[i] as f64).collect();
    let off: Vec<f64> = cells.iter().map(|&i| data.exposures()[i].ln()).collect();
    let (beta, cov) = common::poisson_glm(&x0, &y, &off);
    let glm_eta = &x0 * beta;
    let glm_se: Vec<f64> = (0..cells.len())
        .map(|r| {
            let row = x0.row(r);
            (row * &cov * row.transpose())[(0, 0)].sqrt()
        })
        .collect();

    let iv = freq::intervals(&fit, &design, &cells);
    for r in 0..cells.len() {
        assert!((iv.eta_hat[r] - glm_eta[r]).abs() < 1e-4, "eta at {r}");
        assert!((iv.se[r] - glm_se[r]).abs() < 1e-3, "se at {r}");
        assert!((iv.upper[r] - iv.lower[r] - 2.0 * 1.96 * iv.se[r]).abs() < 1e-12);
    }
}

struct Oracle<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    off: &'a DVector<f64>,
    s: DMatrix<f64>,
}

impl CostFunction for Oracle<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, b: &Vec<f64>) -> Result<f64, argmin::core::Error> {
        let b = DVector::from_column_slice(b);
        let eta = self.x * &b + self.off;
        let ll: f64 = eta
            .iter()
            .zip(self.y.iter())
            .map(|(e, y)| y * e - e.exp())
            .sum();
        Ok(-(ll - 0.5 * b.dot(&(&self.s * &b))))
    }
}

impl Gradient for Oracle<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, b: &Vec<f64>) -> Result<Vec<f64>, argmin::core::Error> {
        let b = DVector::from_column_slice(b);
        let mu = (self.x * &b + self.off).map(f64::exp);
        let g = -(self.x.transpose() * (self.y - mu) - &self.s * &b);
        Ok(g.iter().copied().collect())
    }
}

fn six_by_six() -> (ApcDesign, PenalizedProblem) {
    let data = common::poisson_grid(6, 6, 1, 1e4, 7, wiggly);
    let design = ApcDesign::build(
        &data,
        6,
        spline(BasisFamily::Crs, [4, 4, 5]),
        SlopePair::default(),
    )
    .unwrap();
    let problem = PenalizedProblem::from_design(&design, &data).unwrap();
    (design, problem)
}

#[test]
fn pirls_matches_general_purpose_optimizer() {
    let (_, problem) = six_by_six();
    let lambdas = [1.0; 3];
    let fit = freq::pirls_problem(&problem, &lambdas).unwrap();
    assert!(fit.converged);
    assert!(fit.trace.windows(2).all(|w| w[1] <= w[0]));

    let oracle = Oracle {
        x: &problem.x,
        y: &problem.y,
        off: &problem.offset,
        s: problem.penalty_matrix(&lambdas),
    };
    let mut start = vec![0.0; problem.n_coef()];
    start[0] = (problem.y.mean() / 1e4).ln();
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 20)
        .with_tolerance_grad(1e-13)
        .unwrap()
        .with_tolerance_cost(1e-15)
        .unwrap();
    let res = Executor::new(oracle, solver)
        .configure(|s| s.param(start).max_iters(2000))
        .run()
        .unwrap();
    let best = res.state().best_param.clone().unwrap();
    for (k, (a, b)) in fit.beta_hat.iter().zip(&best).enumerate() {
        assert!(
            (a - b).abs() < 1e-6,
            "coordinate {k}: pirls {a} vs oracle {b}"
        );
    }
    assert!(fit.gradient_ok(&problem));
}

trait GradientCheck {
    fn gradient_ok(&self, problem: &PenalizedProblem) -> bool;
}

impl GradientCheck for freq::PenalizedFit {
    fn gradient_ok(&self, problem: &PenalizedProblem) -> bool {
        problem.gradient(&self.beta_hat, &self.lambdas).amax() < 1e-6
    }
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let (_, problem) = six_by_six();
    let lambdas = [0.7, 2.0, 5.0];
    let fit = freq::pirls_problem(&problem, &lambdas).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    for _ in 0..10 {
        let beta = DVector::from_fn(problem.n_coef(), |k, _| {
            fit.beta_hat[k] + rng.random_range(-0.3..0.3)
        });
        let g = problem.gradient(&beta, &lambdas);
        for k in 0..beta.len() {
            let mut up = beta.clone();
            let mut dn = beta.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (problem.penalized_loglik(&up, &lambdas)
                - problem.penalized_loglik(&dn, &lambdas))
                / (2.0 * h);
            let rel = (fd - g[k]).abs() / g[k].abs().max(1.0);
            assert!(rel < 1e-5, "coordinate {k}: analytic {} fd {fd}", g[k]);
        }
    }
}

#[test]
fn linear_truth_selects_heavy_smoothing() {
    // GCV undersmooths the odd replicate, so the claim is checked on the
    // typical (median) replicate for each block.
    let mut edf: [Vec<f64>; 3] = Default::default();
    for seed in 100..111 {
        let data = common::poisson_grid(12, 16, 5, 1e6, seed, linear);
        let design = ApcDesign::build(
            &data,
            16,
            spline(BasisFamily::Tprs, [10, 10, 12]),
            SlopePair::default(),
        )
        .unwrap();
        let (_, fit) = freq::select_lambda(&design, &data).unwrap();
        for b in 0..3 {
            edf[b].push(fit.block_edf[b]);
        }
    }
    for (b, v) in edf.iter_mut().enumerate() {
        v.sort_by(f64::total_cmp);
        let median = v[v.len() / 2];
        assert!(median < 1.5, "block {b}: median edf {median}, all {v:?}");
    }
}

#[test]
fn wiggly_truth_keeps_flexibility() {
    let data = common::poisson_grid(15, 21, 1, 1e6, 4, wiggly);
    let design = ApcDesign::build(
        &data,
        21,
        spline(BasisFamily::Tprs, [10, 10, 12]),
        SlopePair::default(),
    )
    .unwrap();
    let (_, fit) = freq::select_lambda(&design, &data).unwrap();
    for (b, e) in fit.block_edf.iter().enumerate() {
        assert!(*e > 3.0, "block {b}: edf {e}");
    }
    let total = fit.edf;
    assert!(total >= 3.0 && total <= design.n_coef() as f64);
}

#[test]
fn gcv_optimum_beats_validation_grid() {
    let data = common::poisson_grid(10, 14, 5, 3e5, 5, wiggly);
    let design = ApcDesign::build(
        &data,
        14,
        spline(BasisFamily::Crs, [8, 8, 10]),
        SlopePair::default(),
    )
    .unwrap();
    let problem = PenalizedProblem::from_design(&design, &data).unwrap();
    let (_, best) = freq::select_lambda_problem(&problem).unwrap();
    let best_gcv = best.gcv();
    let axis = [-4.0, -1.0, 2.0, 5.0, 8.0];
    for &a in &axis {
        for &p in &axis {
            for &c in &axis {
                let fit = freq::pirls_problem(&problem, &[f64::exp(a), f64::exp(p), f64::exp(c)])
                    .unwrap();
                assert!(
                    best_gcv <= fit.gcv() + 1e-12,
                    "grid ({a},{p},{c}) gcv {} < {best_gcv}",
                    fit.gcv()
                );
            }
        }
    }
    // More smoothing never improves the fit.
    let lambdas: Vec<f64> = best.lambdas.iter().map(|l| 10.0 * l).collect();
    let smoother = freq::pirls_problem(&problem, &lambdas).unwrap();
    assert!(best.deviance <= smoother.deviance + 1e-9);
}

#[test]
fn slope_choice_does_not_change_fit() {
    let data = common::poisson_grid(10, 14, 5, 3e5, 6, wiggly);
    let mode = spline(BasisFamily::Bs, [8, 8, 10]);
    let mut etas = Vec::new();
    for slopes in [
        SlopePair::AgePeriod,
        SlopePair::PeriodCohort,
        SlopePair::AgeCohort,
    ] {
        let design = ApcDesign::build(&data, 12, mode, slopes).unwrap();
        let fit = freq::pirls(&design, &data, &[3.0, 0.5, 8.0]).unwrap();
        let all: Vec<usize> = (0..design.cells.len()).collect();
        etas.push(freq::intervals(&fit, &design, &all).eta_hat);
    }
    for other in &etas[1..] {
        for (a, b) in etas[0].iter().zip(other) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn forecast_widths_grow_with_horizon() {
    let data = common::poisson_grid(15, 21, 5, 7.5e5 * 5.0, 8, wiggly);
    let design = ApcDesign::build(
        &data,
        18,
        spline(BasisFamily::Tprs, [10, 10, 12]),
        SlopePair::default(),
    )
    .unwrap();
    let (_, fit) = freq::select_lambda(&design, &data).unwrap();
    let fc = freq::forecast(&fit, &design, &data, 3).unwrap();
    assert_eq!(fc.len(), 15 * 3);
    let mean_width = |year: i32| {
        let rows: Vec<_> = fc.rows.iter().filter(|r| r.period == year).collect();
        rows.iter().map(|r| r.upper - r.lower).sum::<f64>() / rows.len() as f64
    };
    assert!(mean_width(2018) < mean_width(2019));
    assert!(mean_width(2019) < mean_width(2020));

    // Same age: last training year vs three years ahead.
    let last = design
        .cells_in(Window::Estimation)
        .into_iter()
        .filter(|&i| design.cells[i].period == 17)
        .collect::<Vec<_>>();
    let ahead = design
        .forecast_cells(3)
        .into_iter()
        .filter(|&i| design.cells[i].period == 20)
        .collect::<Vec<_>>();
    let se_last = freq::intervals(&fit, &design, &last).se;
    let se_ahead = freq::intervals(&fit, &design, &ahead).se;
    for (a, b) in se_last.iter().zip(&se_ahead) {
        assert!(a <= b);
    }

    assert!(freq::forecast(&fit, &design, &data, 0).unwrap().is_empty());
    let full = freq::fit_result(&fit, &design, &data, 0).unwrap();
    assert!(full.rows.iter().all(|r| r.window == Window::Estimation));
    assert!(matches!(
        freq::forecast(&fit, &design, &data, 4),
        Err(freq::FreqError::MissingExposure { .. })
    ));
}

#[test]
fn linear_truth_forecast_extends_the_line() {
    let data = common::poisson_grid(12, 19, 5, 1e6, 9, linear);
    let design = ApcDesign::build(
        &data,
        16,
        spline(BasisFamily::Crs, [8, 8, 10]),
        SlopePair::default(),
    )
    .unwrap();
    let fit = freq::pirls(&design, &data, &[1e10; 3]).unwrap();
    let fixed: Vec<f64> = fit.beta_hat.iter().take(3).copied().collect();
    let cells = design.forecast_cells(3);
    let iv = freq::intervals(&fit, &design, &cells);
    for (k, &ci) in cells.iter().enumerate() {
        let line: f64 = design.cells[ci]
            .fixed
            .iter()
            .zip(&fixed)
            .map(|(x, b)| x * b)
            .sum();
        assert!((iv.eta_hat[k] - line).abs() < 1e-3);
    }
}

#[test]
fn rejects_bad_inputs() {
    let (design, problem) = six_by_six();
    assert!(matches!(
        freq::pirls_problem(&problem, &[1.0, 0.0, 1.0]),
        Err(freq::FreqError::InvalidLambda(_))
    ));
    assert!(matches!(
        freq::pirls_problem(&problem, &[1.0]),
        Err(freq::FreqError::InvalidLambda(_))
    ));
    let data = common::poisson_grid(6, 6, 1, 1e4, 7, wiggly);
    let gmrf = ApcDesign::build(&data, 6, DesignMode::Gmrf, SlopePair::default()).unwrap();
    assert!(matches!(
        freq::pirls(&gmrf, &data, &[1.0; 3]),
        Err(freq::FreqError::NotSpline)
    ));
    assert_eq!(design.cells.len(), 36);
}
