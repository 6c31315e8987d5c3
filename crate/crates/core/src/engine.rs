//! Model configurations shared by the simulation study and the CLI.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::BasisFamily;
use crate::bayes::{self, BayesError, LatentModel, Likelihood};
use crate::dataset::ApcDataset;
use crate::design::{ApcDesign, DesignError, DesignMode, SlopePair, SplineSpec};
use crate::fit::FitResult;
use crate::freq::{self, FreqError};
use crate::gmrf::{GmrfError, PcPrior};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Freq(#[from] FreqError),
    #[error(transparent)]
    Bayes(#[from] BayesError),
    #[error(transparent)]
    Gmrf(#[from] GmrfError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "engine", rename_all = "lowercase")]
pub enum Engine {
    Spline {
        family: BasisFamily,
        knots: [usize; 3],
    },
    Rw2 {
        u: f64,
        alpha: f64,
    },
}

impl Engine {
    /// CRS, BS and TPRS with knots 10/10/12, then RW2 with U = 1, 3, 6.
    pub fn study_set() -> Vec<Engine> {
        let mut out: Vec<Engine> = [BasisFamily::Crs, BasisFamily::Bs, BasisFamily::Tprs]
            .into_iter()
            .map(|family| Engine::Spline {
                family,
                knots: [10, 10, 12],
            })
            .collect();
        out.extend([1.0, 3.0, 6.0].map(|u| Engine::Rw2 { u, alpha: 0.01 }));
        out
    }

    pub fn name(&self) -> String {
        self.to_string()
    }

    pub fn is_rw2(&self) -> bool {
        matches!(self, Engine::Rw2 { .. })
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Engine::Spline { family, .. } => write!(f, "{}", family.name().to_uppercase()),
            Engine::Rw2 { u, .. } => write!(f, "RW2-U{u}"),
        }
    }
}

/// Fit output plus engine-specific diagnostics for the run manifest.
#[derive(Debug, Clone)]
pub struct EngineFit {
    pub result: FitResult,
    pub diagnostics: serde_json::Value,
}

/// Fits `engine` on the first `n_train` periods of `data` and forecasts the
/// next `horizon` periods.
pub fn fit_engine(
    engine: &Engine,
    data: &ApcDataset,
    n_train: usize,
    horizon: usize,
    slopes: SlopePair,
) -> Result<EngineFit, EngineError> {
    match *engine {
        Engine::Spline { family, knots } => {
            let design = ApcDesign::build(
                data,
                n_train,
                DesignMode::Spline(SplineSpec { family, knots }),
                slopes,
            )?;
            let (_, fit) = freq::select_lambda(&design, data)?;
            let result = freq::fit_result(&fit, &design, data, horizon)?;
            let diagnostics = serde_json::json!({
                "selection": "gcv",
                "lambdas": fit.lambdas,
                "edf": fit.edf,
                "block_edf": fit.block_edf,
                "deviance": fit.deviance,
                "gcv": fit.gcv(),
                "converged": fit.converged,
                "iterations": fit.iterations,
            });
            Ok(EngineFit {
                result,
                diagnostics,
            })
        }
        Engine::Rw2 { u, alpha } => {
            let prior = PcPrior::new(u, alpha)?;
            let design = ApcDesign::build(data, n_train, DesignMode::Gmrf, slopes)?;
            let model = LatentModel::from_design(&design, data, [prior; 3], Likelihood::Poisson)?;
            let summary = bayes::fit(&model, horizon)?;
            let result = bayes::to_fit_result(&summary, &design, data);
            let diagnostics = serde_json::json!({
                "approximation": "gaussian-laplace, empirical Bayes mode with 5x5x5 grid in log precision",
                "hyper": summary.hyper,
            });
            Ok(EngineFit {
                result,
                diagnostics,
            })
        }
    }
}
