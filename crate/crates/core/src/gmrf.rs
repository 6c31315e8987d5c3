//! Random-walk structure matrices, intrinsic GMRF densities, PC priors on
//! precisions, and conditioning by kriging on linear constraints.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error, PartialEq)]
pub enum GmrfError {
    #[error("random walk of order {order} needs at least {} levels, got {m}", order + 1)]
    TooSmall { order: usize, m: usize },
    #[error("unsupported random walk order {0}")]
    UnsupportedOrder(usize),
    #[error("precision must be positive, got {0}")]
    NonpositivePrecision(f64),
    #[error("invalid PC prior: {0}")]
    InvalidPrior(String),
    #[error("constraint matrix is not of full row rank")]
    RankLoss,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Integer structure matrix `R` of an RW1 or RW2 model, stored by diagonals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureMatrix {
    order: usize,
    m: usize,
    /// `bands[d][i] = R[i][i + d]`.
    bands: Vec<Vec<i64>>,
}

impl StructureMatrix {
    pub fn new(order: usize, m: usize) -> Result<Self, GmrfError> {
        let stencil: &[i64] = match order {
            1 => &[-1, 1],
            2 => &[1, -2, 1],
            _ => return Err(GmrfError::UnsupportedOrder(order)),
        };
        if m < order + 1 {
            return Err(GmrfError::TooSmall { order, m });
        }
        let mut bands: Vec<Vec<i64>> = (0..=order).map(|d| vec![0; m - d]).collect();
        // Every difference window k..=k+order contributes stencil[i]*stencil[j].
        for k in 0..m - order {
            for i in 0..=order {
                for j in i..=order {
                    bands[j - i][k + i] += stencil[i] * stencil[j];
                }
            }
        }
        Ok(StructureMatrix { order, m, bands })
    }

    pub fn rw1(m: usize) -> Result<Self, GmrfError> {
        Self::new(1, m)
    }

    pub fn rw2(m: usize) -> Result<Self, GmrfError> {
        Self::new(2, m)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    /// Rank of `R` implied by the model (`m - order`).
    pub fn rank(&self) -> usize {
        self.m - self.order
    }

    pub fn get(&self, i: usize, j: usize) -> i64 {
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        let d = hi - lo;
        if d > self.order {
            0
        } else {
            self.bands[d][lo]
        }
    }

    pub fn row(&self, i: usize) -> Vec<i64> {
        (0..self.m).map(|j| self.get(i, j)).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.m, |i, j| self.get(i, j) as f64)
    }

    /// Nonzero entries as `(row, col, value)`, upper and lower triangle.
    pub fn triplets(&self) -> Vec<(usize, usize, i64)> {
        let mut out = Vec::new();
        for i in 0..self.m {
            let lo = i.saturating_sub(self.order);
            let hi = (i + self.order).min(self.m - 1);
            for j in lo..=hi {
                let v = self.get(i, j);
                if v != 0 {
                    out.push((i, j, v));
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, f: &[f64]) -> Vec<f64> {
        (0..self.m)
            .map(|i| {
                let lo = i.saturating_sub(self.order);
                let hi = (i + self.order).min(self.m - 1);
                (lo..=hi).map(|j| self.get(i, j) as f64 * f[j]).sum()
            })
            .collect()
    }

    /// `fᵀ R f`.
    pub fn quad_form(&self, f: &[f64]) -> f64 {
        self.mul_vec(f).iter().zip(f).map(|(a, b)| a * b).sum()
    }

    /// Rank by eigenvalue thresholding of the dense matrix.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        linalg::symmetric_rank(&self.to_dense(), rel_tol)
    }
}

/// Log density of an intrinsic random walk, up to an additive constant:
/// `((m - order)/2) ln tau - (tau/2) fᵀ R f`.
pub fn intrinsic_logdensity(
    f: &[f64],
    tau: f64,
    structure: &StructureMatrix,
) -> Result<f64, GmrfError> {
    if !(tau > 0.0) {
        return Err(GmrfError::NonpositivePrecision(tau));
    }
    if f.len() != structure.dim() {
        return Err(GmrfError::LengthMismatch {
            expected: structure.dim(),
            got: f.len(),
        });
    }
    Ok(0.5 * structure.rank() as f64 * tau.ln() - 0.5 * tau * structure.quad_form(f))
}

/// RW2 log density, `((m-2)/2) ln tau - (tau/2) sum (Δ²f)²`.
pub fn rw2_logdensity(f: &[f64], tau: f64) -> Result<f64, GmrfError> {
    if !(tau > 0.0) {
        return Err(GmrfError::NonpositivePrecision(tau));
    }
    if f.len() < 3 {
        return Err(GmrfError::TooSmall {
            order: 2,
            m: f.len(),
        });
    }
    let ss: f64 = f
        .windows(3)
        .map(|w| (w[0] - 2.0 * w[1] + w[2]).powi(2))
        .sum();
    Ok(0.5 * (f.len() - 2) as f64 * tau.ln() - 0.5 * tau * ss)
}

/// Penalised-complexity prior on a precision, calibrated by
/// `P(sigma > u) = alpha` with `sigma = tau^{-1/2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcPrior {
    pub u: f64,
    pub alpha: f64,
}

impl PcPrior {
    pub fn new(u: f64, alpha: f64) -> Result<Self, GmrfError> {
        if !(u > 0.0) || !u.is_finite() {
            return Err(GmrfError::InvalidPrior(format!(
                "U must be positive, got {u}"
            )));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(GmrfError::InvalidPrior(format!(
                "alpha must be in (0,1), got {alpha}"
            )));
        }
        Ok(PcPrior { u, alpha })
    }

    /// Rate of the exponential law on sigma.
    pub fn kappa(&self) -> f64 {
        -self.alpha.ln() / self.u
    }

    /// `ln[(κ/2) τ^{-3/2} exp(-κ τ^{-1/2})]`.
    pub fn log_density(&self, tau: f64) -> Result<f64, GmrfError> {
        if !(tau > 0.0) {
            return Err(GmrfError::NonpositivePrecision(tau));
        }
        let k = self.kappa();
        Ok((0.5 * k).ln() - 1.5 * tau.ln() - k / tau.sqrt())
    }

    /// Density of `theta = ln tau` (includes the Jacobian).
    pub fn log_density_log_precision(&self, theta: f64) -> f64 {
        let k = self.kappa();
        (0.5 * k).ln() - 0.5 * theta - k * (-0.5 * theta).exp()
    }

    /// `P(sigma > s)` under the prior.
    pub fn sigma_exceedance(&self, s: f64) -> f64 {
        (-self.kappa() * s).exp()
    }
}

/// Constraint rows `[1ᵀ; tᵀ]` over the given level positions.
pub fn trend_constraints(levels: &[f64]) -> DMatrix<f64> {
    let m = levels.len();
    let mean = levels.iter().sum::<f64>() / m as f64;
    DMatrix::from_fn(2, m, |r, j| if r == 0 { 1.0 } else { levels[j] - mean })
}

/// Conditioning by kriging for `x ~ N(Q⁻¹b, Q⁻¹)` on `A x = e`.
///
/// Precomputes `V = Q⁻¹Aᵀ` and the Cholesky factor of `W = A V`.
#[derive(Debug, Clone)]
pub struct Kriging {
    v: DMatrix<f64>,
    a: DMatrix<f64>,
    w_chol: Cholesky<f64, Dyn>,
}

impl Kriging {
    pub fn new(q_chol: &Cholesky<f64, Dyn>, a: &DMatrix<f64>) -> Result<Self, GmrfError> {
        let v = q_chol.solve(&a.transpose());
        let w = a * &v;
        let w_chol = Cholesky::new(w).ok_or(GmrfError::RankLoss)?;
        Ok(Kriging {
            v,
            a: a.clone(),
            w_chol,
        })
    }

    /// `x - V W⁻¹ (A x - e)`.
    pub fn correct(&self, x: &DVector<f64>, e: &DVector<f64>) -> DVector<f64> {
        let resid = &self.a * x - e;
        x - &self.v * self.w_chol.solve(&resid)
    }

    /// `Σ - V W⁻¹ Vᵀ` for `Σ = Q⁻¹`.
    pub fn constrained_covariance(&self, sigma: &DMatrix<f64>) -> DMatrix<f64> {
        let wv = self.w_chol.solve(&self.v.transpose());
        let mut out = sigma - &self.v * wv;
        linalg::symmetrize(&mut out);
        out
    }

    /// `ln det(A Q⁻¹ Aᵀ)`.
    pub fn log_det_w(&self) -> f64 {
        linalg::log_det_cholesky(&self.w_chol)
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }
}
