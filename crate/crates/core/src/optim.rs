//! Derivative-free minimisation used for smoothing-parameter and
//! hyperparameter searches.

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;

/// Value substituted for non-finite objective evaluations.
pub const FAILED_COST: f64 = 1e300;

#[derive(Debug, Clone)]
pub struct SimplexOptions {
    /// Edge length of the initial simplex in every coordinate.
    pub step: f64,
    /// Stop when the standard deviation of simplex costs falls below this.
    pub cost_tol: f64,
    pub max_iters: u64,
    /// Box in which each coordinate is clamped before evaluation.
    pub bounds: (f64, f64),
    /// Fresh simplices built around the incumbent after convergence, to
    /// escape premature collapse on flat regions.
    pub restarts: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            step: 1.0,
            cost_tol: 1e-9,
            max_iters: 400,
            bounds: (-30.0, 30.0),
            restarts: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: u64,
}

struct Objective<'a, F> {
    f: &'a F,
    bounds: (f64, f64),
}

impl<F: Fn(&[f64]) -> f64> CostFunction for Objective<'_, F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> Result<f64, argmin::core::Error> {
        let clamped: Vec<f64> = p
            .iter()
            .map(|v| v.clamp(self.bounds.0, self.bounds.1))
            .collect();
        let v = (self.f)(&clamped);
        Ok(if v.is_finite() { v } else { FAILED_COST })
    }
}

/// Nelder-Mead minimisation of `f` from `start`, restarted up to
/// `opts.restarts` times while the restart improves the value.
pub fn minimize(
    f: &impl Fn(&[f64]) -> f64,
    start: &[f64],
    opts: &SimplexOptions,
) -> Option<SimplexResult> {
    let mut best = simplex_run(f, start, opts)?;
    for _ in 0..opts.restarts {
        let next = simplex_run(f, &best.x, opts)?;
        let gain = best.value - next.value;
        let iterations = best.iterations + next.iterations;
        if next.value < best.value {
            best = SimplexResult { iterations, ..next };
        } else {
            best.iterations = iterations;
        }
        if !(gain > opts.cost_tol) {
            break;
        }
    }
    Some(best)
}

fn simplex_run(
    f: &impl Fn(&[f64]) -> f64,
    start: &[f64],
    opts: &SimplexOptions,
) -> Option<SimplexResult> {
    let mut simplex = vec![start.to_vec()];
    for i in 0..start.len() {
        let mut v = start.to_vec();
        v[i] += opts.step;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(opts.cost_tol)
        .ok()?;
    let problem = Objective {
        f,
        bounds: opts.bounds,
    };
    let res = Executor::new(problem, solver)
        .configure(|state| state.max_iters(opts.max_iters))
        .run()
        .ok()?;
    let state = res.state();
    let x: Vec<f64> = state
        .best_param
        .as_ref()?
        .iter()
        .map(|v| v.clamp(opts.bounds.0, opts.bounds.1))
        .collect();
    Some(SimplexResult {
        value: state.best_cost,
        x,
        iterations: state.iter,
    })
}

/// Runs [`minimize`] from each start and keeps the best finite result.
pub fn minimize_multistart(
    f: &impl Fn(&[f64]) -> f64,
    starts: &[Vec<f64>],
    opts: &SimplexOptions,
) -> Option<SimplexResult> {
    starts
        .iter()
        .filter_map(|s| minimize(f, s, opts))
        .filter(|r| r.value < FAILED_COST)
        .min_by(|a, b| a.value.total_cmp(&b.value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_quadratic_minimum() {
        let f = |x: &[f64]| (x[0] - 1.5).powi(2) + 3.0 * (x[1] + 0.5).powi(2) + 2.0;
        let r = minimize(
            &f,
            &[0.0, 0.0],
            &SimplexOptions {
                cost_tol: 1e-14,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            (r.x[0] - 1.5).abs() < 1e-5 && (r.x[1] + 0.5).abs() < 1e-5,
            "{:?}",
            r.x
        );
        assert!((r.value - 2.0).abs() < 1e-10);
    }

    #[test]
    fn multistart_escapes_local_minimum() {
        let f = |x: &[f64]| (x[0] * x[0] - 4.0).powi(2) + x[0];
        let r =
            minimize_multistart(&f, &[vec![3.0], vec![-3.0]], &SimplexOptions::default()).unwrap();
        assert!(r.x[0] < 0.0);
    }

    #[test]
    fn bounds_are_respected() {
        let f = |x: &[f64]| x[0];
        let opts = SimplexOptions {
            bounds: (-2.0, 2.0),
            ..Default::default()
        };
        let r = minimize(&f, &[0.0], &opts).unwrap();
        assert!(r.x[0] >= -2.0);
    }
}
