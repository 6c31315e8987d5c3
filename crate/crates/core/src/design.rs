//! Identifiable APC design: intercept, two linear slopes and three curvature
//! blocks constrained orthogonal to a constant and a linear trend.
//!
//! Cells are indexed row-major over the full dataset grid (training periods
//! followed by any forecast periods). Curvature blocks are indexed on their
//! distinct levels: age midpoints, period years and cohort indices
//! `c = R (I - a) + p` (1-based).

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisError, BasisFamily, SplineBasis};
use crate::dataset::ApcDataset;
use crate::gmrf::{trend_constraints, GmrfError, StructureMatrix};
use crate::linalg;

/// Smallest number of distinct levels a curvature block can carry.
pub const MIN_LEVELS: usize = 4;

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error(
        "{scale:?} has {levels} distinct training levels; a curvature block needs at least {min}"
    )]
    TooFewLevels {
        scale: Timescale,
        levels: usize,
        min: usize,
    },
    #[error("constraint matrix for {0:?} block is rank deficient")]
    RankLoss(Timescale),
    #[error("{scale:?} block: {source}")]
    Basis {
        scale: Timescale,
        #[source]
        source: BasisError,
    },
    #[error(transparent)]
    Gmrf(#[from] GmrfError),
    #[error("training window must contain between 1 and {max} periods, got {got}")]
    BadTrainingWindow { got: usize, max: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timescale {
    Age,
    Period,
    Cohort,
}

impl Timescale {
    pub const ALL: [Timescale; 3] = [Timescale::Age, Timescale::Period, Timescale::Cohort];

    pub fn index(self) -> usize {
        match self {
            Timescale::Age => 0,
            Timescale::Period => 1,
            Timescale::Cohort => 2,
        }
    }
}

/// Which two linear slopes enter the fixed block; the third is implicitly zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlopePair {
    #[default]
    AgePeriod,
    PeriodCohort,
    AgeCohort,
}

impl SlopePair {
    pub fn dropped(self) -> Timescale {
        match self {
            SlopePair::AgePeriod => Timescale::Cohort,
            SlopePair::PeriodCohort => Timescale::Age,
            SlopePair::AgeCohort => Timescale::Period,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Estimation,
    Prediction,
}

impl Window {
    pub fn as_str(self) -> &'static str {
        match self {
            Window::Estimation => "estimation",
            Window::Prediction => "prediction",
        }
    }
}

impl std::str::FromStr for Window {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "estimation" => Ok(Window::Estimation),
            "prediction" => Ok(Window::Prediction),
            other => Err(format!("unknown window {other:?}")),
        }
    }
}

/// Spline settings for the three curvature blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub family: BasisFamily,
    /// Basis dimensions for age, period and cohort.
    pub knots: [usize; 3],
}

impl Default for SplineSpec {
    fn default() -> Self {
        SplineSpec {
            family: BasisFamily::Tprs,
            knots: [10, 10, 12],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DesignMode {
    Spline(SplineSpec),
    Gmrf,
}

/// Row-major position on an I x J grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridIndex {
    /// Age index, 1..=I.
    pub a: usize,
    /// Period index, 1..=J.
    pub p: usize,
    pub flat: usize,
}

impl GridIndex {
    pub fn from_ap(a: usize, p: usize, n_periods: usize) -> Self {
        GridIndex {
            a,
            p,
            flat: (a - 1) * n_periods + (p - 1),
        }
    }

    pub fn from_flat(flat: usize, n_periods: usize) -> Self {
        GridIndex {
            a: flat / n_periods + 1,
            p: flat % n_periods + 1,
            flat,
        }
    }
}

/// Cohort index `R (I - a) + p` for 1-based `a` and `p`.
pub fn cohort_of(a: usize, p: usize, n_ages: usize, ratio: usize) -> Result<usize, DesignError> {
    if a < 1 || a > n_ages {
        return Err(DesignError::OutOfRange(format!(
            "age index {a} not in 1..={n_ages}"
        )));
    }
    if p < 1 {
        return Err(DesignError::OutOfRange(format!("period index {p} < 1")));
    }
    if ratio < 1 {
        return Err(DesignError::OutOfRange("ratio must be at least 1".into()));
    }
    Ok(ratio * (n_ages - a) + p)
}

/// Number of cohorts `R (I - 1) + J`.
pub fn n_cohorts(n_ages: usize, n_periods: usize, ratio: usize) -> usize {
    ratio * (n_ages - 1) + n_periods
}

#[derive(Debug, Clone)]
pub struct Cell {
    /// 0-based age index.
    pub age: usize,
    /// 0-based period index into the full period list.
    pub period: usize,
    /// 0-based cohort level (cohort index minus one).
    pub cohort: usize,
    pub window: Window,
    /// Covariates of the fixed block: intercept and the two retained slopes.
    pub fixed: [f64; 3],
}

impl Cell {
    pub fn level(&self, scale: Timescale) -> usize {
        match scale {
            Timescale::Age => self.age,
            Timescale::Period => self.period,
            Timescale::Cohort => self.cohort,
        }
    }
}

#[derive(Debug, Clone)]
pub enum BlockRepr {
    Spline {
        basis: SplineBasis,
        /// Null-space reparameterisation `Z` (T x (T-2)).
        projection: DMatrix<f64>,
        /// Constrained basis at every level, training and future (m x (T-2)).
        level_matrix: DMatrix<f64>,
        /// `Zᵀ S Z`.
        penalty: DMatrix<f64>,
        extrapolated: Vec<bool>,
    },
    Field {
        structure: StructureMatrix,
    },
}

#[derive(Debug, Clone)]
pub struct CurvatureBlock {
    pub scale: Timescale,
    /// Level positions for all levels on the grid (training levels first).
    pub levels: Vec<f64>,
    pub n_train_levels: usize,
    /// `[1ᵀ; tᵀ]` over the training levels.
    pub constraint: DMatrix<f64>,
    pub repr: BlockRepr,
}

impl CurvatureBlock {
    /// Number of free coefficients the block contributes.
    pub fn n_coef(&self) -> usize {
        match &self.repr {
            BlockRepr::Spline { level_matrix, .. } => level_matrix.ncols(),
            BlockRepr::Field { structure } => structure.dim(),
        }
    }

    /// Curvature values at the training levels for block coefficients `coef`.
    pub fn training_values(&self, coef: &DVector<f64>) -> DVector<f64> {
        match &self.repr {
            BlockRepr::Spline { level_matrix, .. } => {
                level_matrix.rows(0, self.n_train_levels) * coef
            }
            BlockRepr::Field { .. } => coef.rows(0, self.n_train_levels).into_owned(),
        }
    }
}

/// Projector onto the orthogonal complement of `span{1, t}` over `levels`.
pub fn constraint_projector(levels: &[f64]) -> Result<DMatrix<f64>, GmrfError> {
    let c = trend_constraints(levels);
    let cct = (&c * c.transpose()).cholesky().ok_or(GmrfError::RankLoss)?;
    let m = levels.len();
    Ok(DMatrix::identity(m, m) - c.transpose() * cct.solve(&c))
}

/// Reparameterises a spline basis so every coefficient vector yields values
/// orthogonal to a constant and a linear trend over the first
/// `n_train` levels. Returns `(Z, constrained level matrix, Zᵀ S Z)`.
pub fn apply_spline_constraints(
    basis: &SplineBasis,
    all_levels: &[f64],
    n_train: usize,
    scale: Timescale,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, Vec<bool>), DesignError> {
    let train = &all_levels[..n_train];
    if n_train < MIN_LEVELS {
        return Err(DesignError::TooFewLevels {
            scale,
            levels: n_train,
            min: MIN_LEVELS,
        });
    }
    let c = trend_constraints(train);
    if linalg::null_space(&c, 1e-12).is_none() {
        return Err(DesignError::RankLoss(scale));
    }
    let cx = &c * basis.matrix();
    let z = linalg::null_space(&cx, 1e-12).ok_or(DesignError::RankLoss(scale))?;
    let eval = basis.evaluate(all_levels);
    let level_matrix = &eval.matrix * &z;
    let mut penalty = z.transpose() * basis.penalty() * &z;
    linalg::symmetrize(&mut penalty);
    Ok((z, level_matrix, penalty, eval.extrapolated))
}

#[derive(Debug, Clone)]
pub struct ApcDesign {
    pub mode: DesignMode,
    pub slopes: SlopePair,
    pub n_ages: usize,
    pub periods: Vec<i32>,
    pub n_train_periods: usize,
    pub ratio: usize,
    pub cells: Vec<Cell>,
    pub blocks: [CurvatureBlock; 3],
}

impl ApcDesign {
    /// Builds the design over the full grid of `data`, fitting on the first
    /// `n_train_periods` periods.
    pub fn build(
        data: &ApcDataset,
        n_train_periods: usize,
        mode: DesignMode,
        slopes: SlopePair,
    ) -> Result<Self, DesignError> {
        let (n_ages, n_periods, ratio) = (data.n_ages(), data.n_periods(), data.ratio());
        if n_train_periods == 0 || n_train_periods > n_periods {
            return Err(DesignError::BadTrainingWindow {
                got: n_train_periods,
                max: n_periods,
            });
        }
        let k_train = n_cohorts(n_ages, n_train_periods, ratio);
        let k_all = n_cohorts(n_ages, n_periods, ratio);

        let age_levels: Vec<f64> = data.age_groups().iter().map(|g| g.midpoint).collect();
        let period_levels: Vec<f64> = data.periods().iter().map(|&p| p as f64).collect();
        let cohort_levels: Vec<f64> = (1..=k_all).map(|c| c as f64).collect();
        let level_sets = [
            (Timescale::Age, age_levels, n_ages),
            (Timescale::Period, period_levels, n_train_periods),
            (Timescale::Cohort, cohort_levels, k_train),
        ];
        for (scale, _, n_train) in &level_sets {
            if *n_train < MIN_LEVELS {
                return Err(DesignError::TooFewLevels {
                    scale: *scale,
                    levels: *n_train,
                    min: MIN_LEVELS,
                });
            }
        }

        let mut blocks = Vec::with_capacity(3);
        for (scale, levels, n_train) in level_sets {
            let constraint = trend_constraints(&levels[..n_train]);
            let repr = match mode {
                DesignMode::Spline(spec) => {
                    let basis = SplineBasis::new(
                        spec.family,
                        &levels[..n_train],
                        spec.knots[scale.index()],
                    )
                    .map_err(|source| DesignError::Basis { scale, source })?;
                    let (projection, level_matrix, penalty, extrapolated) =
                        apply_spline_constraints(&basis, &levels, n_train, scale)?;
                    BlockRepr::Spline {
                        basis,
                        projection,
                        level_matrix,
                        penalty,
                        extrapolated,
                    }
                }
                DesignMode::Gmrf => {
                    if linalg::null_space(&constraint, 1e-12).is_none() {
                        return Err(DesignError::RankLoss(scale));
                    }
                    BlockRepr::Field {
                        structure: StructureMatrix::rw2(n_train)?,
                    }
                }
            };
            blocks.push(CurvatureBlock {
                scale,
                levels,
                n_train_levels: n_train,
                constraint,
                repr,
            });
        }

        // Slopes are centred on the training grid and have unit step per level.
        let mean_a = (n_ages - 1) as f64 / 2.0;
        let mean_p = (n_train_periods - 1) as f64 / 2.0;
        let mean_c = (k_train - 1) as f64 / 2.0;
        let mut cells = Vec::with_capacity(n_ages * n_periods);
        for a in 0..n_ages {
            for p in 0..n_periods {
                let c = cohort_of(a + 1, p + 1, n_ages, ratio)? - 1;
                let (sa, sp, sc) = (a as f64 - mean_a, p as f64 - mean_p, c as f64 - mean_c);
                let fixed = match slopes {
                    SlopePair::AgePeriod => [1.0, sa, sp],
                    SlopePair::PeriodCohort => [1.0, sp, sc],
                    SlopePair::AgeCohort => [1.0, sa, sc],
                };
                cells.push(Cell {
                    age: a,
                    period: p,
                    cohort: c,
                    window: if p < n_train_periods {
                        Window::Estimation
                    } else {
                        Window::Prediction
                    },
                    fixed,
                });
            }
        }

        let blocks: [CurvatureBlock; 3] = blocks.try_into().expect("three blocks");
        Ok(ApcDesign {
            mode,
            slopes,
            n_ages,
            periods: data.periods().to_vec(),
            n_train_periods,
            ratio,
            cells,
            blocks,
        })
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn block(&self, scale: Timescale) -> &CurvatureBlock {
        &self.blocks[scale.index()]
    }

    /// Indices of cells in `window`.
    pub fn cells_in(&self, window: Window) -> Vec<usize> {
        (0..self.cells.len())
            .filter(|&i| self.cells[i].window == window)
            .collect()
    }

    /// Indices of the first `horizon` forecast periods' cells.
    pub fn forecast_cells(&self, horizon: usize) -> Vec<usize> {
        let last = self.n_train_periods + horizon;
        (0..self.cells.len())
            .filter(|&i| {
                let p = self.cells[i].period;
                p >= self.n_train_periods && p < last
            })
            .collect()
    }

    /// Column offsets of each curvature block in the spline model matrix.
    pub fn block_offsets(&self) -> [usize; 3] {
        let mut off = [0; 3];
        let mut at = 3;
        for (i, b) in self.blocks.iter().enumerate() {
            off[i] = at;
            at += b.n_coef();
        }
        off
    }

    pub fn n_coef(&self) -> usize {
        3 + self.blocks.iter().map(|b| b.n_coef()).sum::<usize>()
    }

    /// Spline-mode model matrix rows for the given cells.
    ///
    /// # Panics
    /// Panics in GMRF mode.
    pub fn model_matrix(&self, cells: &[usize]) -> DMatrix<f64> {
        let offsets = self.block_offsets();
        let mut x = DMatrix::zeros(cells.len(), self.n_coef());
        for (r, &ci) in cells.iter().enumerate() {
            let cell = &self.cells[ci];
            for k in 0..3 {
                x[(r, k)] = cell.fixed[k];
            }
            for (b, block) in self.blocks.iter().enumerate() {
                let BlockRepr::Spline { level_matrix, .. } = &block.repr else {
                    panic!("model_matrix needs a spline-mode design");
                };
                let lvl = cell.level(block.scale);
                for j in 0..level_matrix.ncols() {
                    x[(r, offsets[b] + j)] = level_matrix[(lvl, j)];
                }
            }
        }
        x
    }

    /// Block penalty matrices embedded at full coefficient size.
    pub fn penalties(&self) -> Vec<DMatrix<f64>> {
        let offsets = self.block_offsets();
        let p = self.n_coef();
        self.blocks
            .iter()
            .zip(offsets)
            .map(|(b, off)| {
                let mut s = DMatrix::zeros(p, p);
                if let BlockRepr::Spline { penalty, .. } = &b.repr {
                    linalg::add_block(&mut s, off, penalty, 1.0);
                }
                s
            })
            .collect()
    }

    /// Writes the spline model matrix (all cells) as CSV.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), DesignError> {
        let cells: Vec<usize> = (0..self.cells.len()).collect();
        let x = self.model_matrix(&cells);
        let mut header = vec![
            "age".to_string(),
            "period".to_string(),
            "cohort".to_string(),
            "window".to_string(),
        ];
        header.extend(["intercept", "slope1", "slope2"].map(String::from));
        for b in &self.blocks {
            for j in 0..b.n_coef() {
                header.push(format!("{:?}_{j}", b.scale).to_lowercase());
            }
        }
        writeln!(w, "{}", header.join(","))?;
        for (r, cell) in self.cells.iter().enumerate() {
            let mut row = vec![
                (cell.age + 1).to_string(),
                self.periods[cell.period].to_string(),
                (cell.cohort + 1).to_string(),
                cell.window.as_str().to_string(),
            ];
            row.extend(x.row(r).iter().map(|v| format!("{v:.16e}")));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::AgeGroup;

    pub(crate) fn toy(n_ages: usize, n_periods: usize, width: i32) -> ApcDataset {
        let groups = (0..n_ages as i32)
            .map(|k| AgeGroup::new(25 + k * width, 25 + k * width + width - 1))
            .collect();
        let n = n_ages * n_periods;
        ApcDataset::new(
            groups,
            (2006..2006 + n_periods as i32).collect(),
            (0..n as u64).map(|k| 20 + k % 7).collect(),
            vec![1e5; n],
        )
        .unwrap()
    }

    #[test]
    fn cohort_index_examples() {
        assert_eq!(cohort_of(12, 16, 12, 5).unwrap(), 16);
        assert_eq!(cohort_of(1, 1, 12, 5).unwrap(), 56);
        assert_eq!(cohort_of(1, 16, 12, 5).unwrap(), 71);
        assert_eq!(n_cohorts(12, 16, 5), 71);
        assert!(cohort_of(0, 1, 12, 5).is_err());
        assert!(cohort_of(13, 1, 12, 5).is_err());
        assert!(cohort_of(1, 0, 12, 5).is_err());
    }

    #[test]
    fn cohort_constant_along_diagonals() {
        let (n_ages, ratio) = (12, 5);
        for a in 1..n_ages {
            for p in 1..=16 {
                assert_eq!(
                    cohort_of(a, p, n_ages, ratio).unwrap(),
                    cohort_of(a + 1, p + ratio, n_ages, ratio).unwrap()
                );
            }
        }
    }

    #[test]
    fn grid_index_bijection() {
        for flat in 0..12 * 16 {
            let g = GridIndex::from_flat(flat, 16);
            assert_eq!(GridIndex::from_ap(g.a, g.p, 16), g);
        }
    }

    #[test]
    fn study_grid_dimensions() {
        let d = toy(12, 16, 5);
        let design = ApcDesign::build(
            &d,
            16,
            DesignMode::Spline(SplineSpec::default()),
            SlopePair::default(),
        )
        .unwrap();
        assert_eq!(design.cells.len(), 192);
        assert_eq!(design.block(Timescale::Cohort).levels.len(), 71);
        let g = ApcDesign::build(&d, 16, DesignMode::Gmrf, SlopePair::default()).unwrap();
        assert_eq!(g.block(Timescale::Cohort).n_coef(), 71);
    }

    #[test]
    fn tiny_grid_has_too_few_levels() {
        let d = toy(3, 3, 1);
        for mode in [
            DesignMode::Gmrf,
            DesignMode::Spline(SplineSpec {
                family: BasisFamily::Crs,
                knots: [4, 4, 4],
            }),
        ] {
            let err = ApcDesign::build(&d, 3, mode, SlopePair::default()).unwrap_err();
            assert!(matches!(err, DesignError::TooFewLevels { .. }), "{err}");
        }
    }

    #[test]
    fn spline_blocks_satisfy_constraints() {
        let d = toy(15, 21, 5);
        for family in [BasisFamily::Crs, BasisFamily::Bs, BasisFamily::Tprs] {
            let design = ApcDesign::build(
                &d,
                18,
                DesignMode::Spline(SplineSpec {
                    family,
                    knots: [10, 10, 12],
                }),
                SlopePair::default(),
            )
            .unwrap();
            for b in &design.blocks {
                let BlockRepr::Spline { level_matrix, .. } = &b.repr else {
                    unreachable!()
                };
                let train = level_matrix.rows(0, b.n_train_levels);
                let resid = &b.constraint * train;
                assert!(
                    resid.amax() < 1e-10 * train.amax().max(1.0),
                    "{family:?} {:?}",
                    b.scale
                );
                let proj = constraint_projector(&b.levels[..b.n_train_levels]).unwrap();
                assert!((&proj * train - train).amax() < 1e-10 * train.amax().max(1.0));
                assert!((&proj * &proj - &proj).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn assembled_design_is_full_rank() {
        for (i, j, w) in [(15, 18, 5), (12, 12, 5), (8, 10, 1), (6, 6, 1)] {
            let d = toy(i, j, w);
            for family in [BasisFamily::Crs, BasisFamily::Bs, BasisFamily::Tprs] {
                let knots = [4.max(i.min(10)), 4.max(j.min(10)), 5];
                let design = ApcDesign::build(
                    &d,
                    j,
                    DesignMode::Spline(SplineSpec { family, knots }),
                    SlopePair::default(),
                )
                .unwrap();
                let cells: Vec<usize> = (0..design.cells.len()).collect();
                let x = design.model_matrix(&cells);
                let expected: usize = 3 + design.blocks.iter().map(|b| b.n_coef()).sum::<usize>();
                assert_eq!(x.ncols(), expected);
                let sv = x.singular_values();
                let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
                assert!(
                    smin > 1e-8,
                    "{family:?} {i}x{j}: smallest singular value {smin}"
                );
            }
        }
    }

    #[test]
    fn rw2_block_effective_dimension() {
        let levels: Vec<f64> = (1..=4).map(f64::from).collect();
        let c = trend_constraints(&levels);
        let z = linalg::null_space(&c, 1e-12).unwrap();
        assert_eq!(z.ncols(), 2);
    }

    #[test]
    fn constant_levels_lose_rank() {
        let c = trend_constraints(&[3.0; 5]);
        assert!(linalg::null_space(&c, 1e-12).is_none());
        assert!(constraint_projector(&[3.0; 5]).is_err());
    }

    #[test]
    fn slope_pairs_span_the_same_space() {
        let d = toy(10, 12, 5);
        let spec = DesignMode::Spline(SplineSpec {
            family: BasisFamily::Crs,
            knots: [6, 6, 8],
        });
        let a = ApcDesign::build(&d, 10, spec, SlopePair::AgePeriod).unwrap();
        let b = ApcDesign::build(&d, 10, spec, SlopePair::PeriodCohort).unwrap();
        let fa = DMatrix::from_fn(a.cells.len(), 3, |r, c| a.cells[r].fixed[c]);
        let fb = DMatrix::from_fn(b.cells.len(), 3, |r, c| b.cells[r].fixed[c]);
        let coef = fa.clone().svd(true, true).solve(&fb, 1e-12).unwrap();
        assert!((&fa * coef - &fb).amax() < 1e-10);
        assert_eq!(a.slopes.dropped(), Timescale::Cohort);
    }

    #[test]
    fn windows_and_forecast_cells() {
        let d = toy(5, 8, 1);
        let design = ApcDesign::build(&d, 6, DesignMode::Gmrf, SlopePair::default()).unwrap();
        assert_eq!(design.cells_in(Window::Estimation).len(), 30);
        assert_eq!(design.cells_in(Window::Prediction).len(), 10);
        assert_eq!(design.forecast_cells(1).len(), 5);
        assert!(design.forecast_cells(0).is_empty());
    }

    #[test]
    fn dump_design_csv() {
        let d = toy(6, 6, 1);
        let design = ApcDesign::build(
            &d,
            6,
            DesignMode::Spline(SplineSpec {
                family: BasisFamily::Crs,
                knots: [4, 4, 5],
            }),
            SlopePair::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        design.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 37);
        assert!(text.starts_with("age,period,cohort,window,intercept"));
    }
}
