//! Univariate penalised regression spline bases.
//!
//! Three families are supported:
//!
//! * `Crs`: cubic regression spline parameterised by its values at the
//!   knots, natural boundary conditions, exact `∫ f''²` penalty.
//! * `Bs`: cubic B-splines on equally spaced knots with an order-2
//!   difference penalty (a P-spline approximation of `∫ f''²`, scaled by
//!   `1/h³` so it is on the same footing as the derivative penalties).
//! * `Tprs`: thin plate regression spline: the thin plate kernel matrix
//!   over the distinct values, truncated to its leading eigenvectors, with
//!   the linear null space carried as explicit columns.
//!
//! Every penalty has a two-dimensional null space (constants and linears).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

/// Eigenvalues of the thin plate kernel below this (relative) are dropped.
pub const TPRS_EIGEN_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum BasisError {
    #[error("{family:?} basis needs at least {min} knots, got {requested}")]
    TooFewKnots {
        family: BasisFamily,
        requested: usize,
        min: usize,
    },
    #[error("basis with {needed} knots needs at least {needed} distinct values, got {got}")]
    TooFewValues { needed: usize, got: usize },
    #[error("values must be strictly increasing (duplicate or unsorted at position {0})")]
    DuplicateValues(usize),
    #[error("non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisFamily {
    Crs,
    Bs,
    Tprs,
}

impl BasisFamily {
    pub fn min_knots(self) -> usize {
        match self {
            BasisFamily::Crs | BasisFamily::Bs => 4,
            BasisFamily::Tprs => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BasisFamily::Crs => "crs",
            BasisFamily::Bs => "bs",
            BasisFamily::Tprs => "tprs",
        }
    }
}

impl std::str::FromStr for BasisFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "crs" | "cr" => Ok(BasisFamily::Crs),
            "bs" => Ok(BasisFamily::Bs),
            "tprs" | "tp" => Ok(BasisFamily::Tprs),
            other => Err(format!(
                "unknown basis {other:?} (expected crs, bs or tprs)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extrapolation {
    /// Linear continuation past the boundary (CRS, TPRS).
    Linear,
    /// Polynomial continuation of the outermost piece (BS).
    Polynomial,
}

#[derive(Debug, Clone)]
enum Evaluator {
    Crs {
        knots: Vec<f64>,
        /// Maps knot values to second derivatives at the knots (k x k).
        second_deriv: DMatrix<f64>,
    },
    Bs {
        knots: Vec<f64>,
        n_basis: usize,
    },
    Tprs {
        centers: Vec<f64>,
        shift: f64,
        /// `U_k Z`: kernel coefficients of the wiggly columns.
        kernel_coef: DMatrix<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct SplineBasis {
    family: BasisFamily,
    knots: Vec<f64>,
    values: Vec<f64>,
    x: DMatrix<f64>,
    s: DMatrix<f64>,
    evaluator: Evaluator,
}

#[derive(Debug, Clone)]
pub struct BasisEval {
    pub matrix: DMatrix<f64>,
    /// True for rows outside the range of the training values.
    pub extrapolated: Vec<bool>,
    pub mode: Extrapolation,
}

impl SplineBasis {
    /// Builds a basis of dimension `n_knots` over strictly increasing `values`.
    pub fn new(family: BasisFamily, values: &[f64], n_knots: usize) -> Result<Self, BasisError> {
        if n_knots < family.min_knots() {
            return Err(BasisError::TooFewKnots {
                family,
                requested: n_knots,
                min: family.min_knots(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BasisError::NonFinite);
        }
        if let Some(i) = values.windows(2).position(|w| w[1] <= w[0]) {
            return Err(BasisError::DuplicateValues(i + 1));
        }
        if values.len() < n_knots {
            return Err(BasisError::TooFewValues {
                needed: n_knots,
                got: values.len(),
            });
        }
        let (knots, s, evaluator) = match family {
            BasisFamily::Crs => build_crs(values, n_knots),
            BasisFamily::Bs => build_bs(values, n_knots),
            BasisFamily::Tprs => build_tprs(values, n_knots),
        };
        let mut basis = SplineBasis {
            family,
            knots,
            values: values.to_vec(),
            x: DMatrix::zeros(0, 0),
            s,
            evaluator,
        };
        basis.x = basis.evaluate(values).matrix;
        Ok(basis)
    }

    pub fn family(&self) -> BasisFamily {
        self.family
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Basis evaluated at the training values (n x T).
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Penalty matrix (T x T).
    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn dim(&self) -> usize {
        self.s.nrows()
    }

    /// Dimension of the penalty null space.
    pub fn null_dim(&self) -> usize {
        2
    }

    pub fn extrapolation(&self) -> Extrapolation {
        match self.family {
            BasisFamily::Bs => Extrapolation::Polynomial,
            _ => Extrapolation::Linear,
        }
    }

    pub fn evaluate(&self, new_values: &[f64]) -> BasisEval {
        let (lo, hi) = (self.values[0], *self.values.last().unwrap());
        let t = self.dim();
        let mut m = DMatrix::zeros(new_values.len(), t);
        for (r, &v) in new_values.iter().enumerate() {
            let row = match &self.evaluator {
                Evaluator::Crs {
                    knots,
                    second_deriv,
                } => crs_row(knots, second_deriv, v),
                Evaluator::Bs { knots, n_basis } => bs_row(knots, *n_basis, v),
                Evaluator::Tprs {
                    centers,
                    shift,
                    kernel_coef,
                } => tprs_row(centers, *shift, kernel_coef, v),
            };
            m.set_row(r, &row.transpose());
        }
        BasisEval {
            matrix: m,
            extrapolated: new_values.iter().map(|&v| v < lo || v > hi).collect(),
            mode: self.extrapolation(),
        }
    }
}

/// Knots at evenly spaced quantiles of the (sorted, distinct) values.
pub fn quantile_knots(values: &[f64], k: usize) -> Vec<f64> {
    let n = values.len();
    (0..k)
        .map(|j| {
            let pos = j as f64 * (n - 1) as f64 / (k - 1) as f64;
            let i = pos.floor() as usize;
            if i + 1 >= n {
                values[n - 1]
            } else {
                let frac = pos - i as f64;
                values[i] + frac * (values[i + 1] - values[i])
            }
        })
        .collect()
}

/// Dense `Dᵀ D` for the order-`order` difference operator on `m` coefficients.
pub fn difference_penalty(m: usize, order: usize) -> DMatrix<f64> {
    let mut d = DMatrix::<f64>::identity(m, m);
    for _ in 0..order {
        let rows = d.nrows() - 1;
        d = DMatrix::from_fn(rows, m, |i, j| d[(i + 1, j)] - d[(i, j)]);
    }
    d.transpose() * d
}

fn build_crs(values: &[f64], k: usize) -> (Vec<f64>, DMatrix<f64>, Evaluator) {
    let knots = quantile_knots(values, k);
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let mut d = DMatrix::zeros(k - 2, k);
    let mut b = DMatrix::zeros(k - 2, k - 2);
    for i in 0..k - 2 {
        d[(i, i)] = 1.0 / h[i];
        d[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
        d[(i, i + 2)] = 1.0 / h[i + 1];
        b[(i, i)] = (h[i] + h[i + 1]) / 3.0;
        if i + 1 < k - 2 {
            b[(i, i + 1)] = h[i + 1] / 6.0;
            b[(i + 1, i)] = h[i + 1] / 6.0;
        }
    }
    let b_chol = b.cholesky().expect("CRS band matrix is positive definite");
    let f = b_chol.solve(&d);
    let mut s = d.transpose() * &f;
    linalg::symmetrize(&mut s);
    let mut second_deriv = DMatrix::zeros(k, k);
    second_deriv.view_mut((1, 0), (k - 2, k)).copy_from(&f);
    (
        knots.clone(),
        s,
        Evaluator::Crs {
            knots,
            second_deriv,
        },
    )
}

fn crs_row(knots: &[f64], f: &DMatrix<f64>, x: f64) -> DVector<f64> {
    let k = knots.len();
    let mut row = DVector::zeros(k);
    if x < knots[0] {
        let h = knots[1] - knots[0];
        let dx = x - knots[0];
        row[0] += 1.0 - dx / h;
        row[1] += dx / h;
        row += f.row(0).transpose() * (-dx * h / 3.0);
        row += f.row(1).transpose() * (-dx * h / 6.0);
        return row;
    }
    if x > knots[k - 1] {
        let h = knots[k - 1] - knots[k - 2];
        let dx = x - knots[k - 1];
        row[k - 1] += 1.0 + dx / h;
        row[k - 2] -= dx / h;
        row += f.row(k - 2).transpose() * (dx * h / 6.0);
        row += f.row(k - 1).transpose() * (dx * h / 3.0);
        return row;
    }
    let j = match knots.iter().rposition(|&kn| kn <= x) {
        Some(j) if j + 1 < k => j,
        _ => k - 2,
    };
    let h = knots[j + 1] - knots[j];
    let am = (knots[j + 1] - x) / h;
    let ap = (x - knots[j]) / h;
    let cm = ((knots[j + 1] - x).powi(3) / h - h * (knots[j + 1] - x)) / 6.0;
    let cp = ((x - knots[j]).powi(3) / h - h * (x - knots[j])) / 6.0;
    row[j] += am;
    row[j + 1] += ap;
    row += f.row(j).transpose() * cm;
    row += f.row(j + 1).transpose() * cp;
    row
}

fn build_bs(values: &[f64], n_basis: usize) -> (Vec<f64>, DMatrix<f64>, Evaluator) {
    let (lo, hi) = (values[0], *values.last().unwrap());
    let n_int = n_basis - 3;
    let dx = (hi - lo) / n_int as f64;
    let knots: Vec<f64> = (0..n_basis + 4)
        .map(|i| lo + (i as f64 - 3.0) * dx)
        .collect();
    let s = difference_penalty(n_basis, 2) / dx.powi(3);
    (knots.clone(), s, Evaluator::Bs { knots, n_basis })
}

fn bs_row(knots: &[f64], n_basis: usize, x: f64) -> DVector<f64> {
    // Valid spans are 3..=n_basis-1; points outside use the edge span's polynomial.
    let mut span = 3;
    while span < n_basis - 1 && x >= knots[span + 1] {
        span += 1;
    }
    let mut n = [0.0; 4];
    let mut left = [0.0; 4];
    let mut right = [0.0; 4];
    n[0] = 1.0;
    for j in 1..=3 {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    let mut row = DVector::zeros(n_basis);
    for (r, v) in n.iter().enumerate() {
        row[span - 3 + r] = *v;
    }
    row
}

fn tp_kernel(r: f64) -> f64 {
    r.abs().powi(3) / 12.0
}

fn build_tprs(values: &[f64], k: usize) -> (Vec<f64>, DMatrix<f64>, Evaluator) {
    let n = values.len();
    let shift = values.iter().sum::<f64>() / n as f64;
    let e = DMatrix::from_fn(n, n, |i, j| tp_kernel(values[i] - values[j]));
    let eig = SymmetricEigen::new(e);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .total_cmp(&eig.eigenvalues[a].abs())
    });
    let max_abs = eig.eigenvalues[order[0]].abs();
    let keep: Vec<usize> = order
        .into_iter()
        .take(k)
        .filter(|&i| eig.eigenvalues[i].abs() > TPRS_EIGEN_TOL * max_abs)
        .collect();
    let kk = keep.len();
    let u = DMatrix::from_fn(n, kk, |r, c| eig.eigenvectors[(r, keep[c])]);
    let dvals = DVector::from_iterator(kk, keep.iter().map(|&i| eig.eigenvalues[i]));

    let poly = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { values[r] - shift });
    let tu = poly.transpose() * &u;
    let z = linalg::null_space(&tu, 1e-12).expect("thin plate constraint has full rank");
    let kernel_coef = &u * &z;
    let mut wiggly_pen = z.transpose() * DMatrix::from_diagonal(&dvals) * &z;
    linalg::symmetrize(&mut wiggly_pen);

    let dim = z.ncols() + 2;
    let mut s = DMatrix::zeros(dim, dim);
    s.view_mut((0, 0), (z.ncols(), z.ncols()))
        .copy_from(&wiggly_pen);
    let knots = quantile_knots(values, k);
    (
        knots,
        s,
        Evaluator::Tprs {
            centers: values.to_vec(),
            shift,
            kernel_coef,
        },
    )
}

fn tprs_row(centers: &[f64], shift: f64, coef: &DMatrix<f64>, x: f64) -> DVector<f64> {
    let e = DVector::from_iterator(centers.len(), centers.iter().map(|c| tp_kernel(x - c)));
    let w = coef.transpose() * e;
    let mut row = DVector::zeros(w.len() + 2);
    row.rows_mut(0, w.len()).copy_from(&w);
    row[w.len()] = 1.0;
    row[w.len() + 1] = x - shift;
    row
}
