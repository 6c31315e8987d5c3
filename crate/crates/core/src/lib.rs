//! Identifiable age-period-cohort models for count data, fitted either with
//! penalised regression splines or with RW2 random-walk priors, plus
//! forecasting and interval-score assessment.

pub mod assess;
pub mod basis;
pub mod bayes;
pub mod cli;
pub mod dataset;
pub mod design;
pub mod engine;
pub mod fit;
pub mod freq;
pub mod gmrf;
pub mod linalg;
pub mod optim;
pub mod sim;
