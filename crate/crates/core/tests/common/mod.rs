#![allow(dead_code)]

use apcsmooth::dataset::{AgeGroup, ApcDataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

/// Poisson counts on an `n_ages x n_periods` grid with age groups of
/// `width` years starting at 20. `eta(a, p, c)` gets 0-based age, period
/// and cohort indices.
pub fn poisson_grid(
    n_ages: usize,
    n_periods: usize,
    width: i32,
    exposure: f64,
    seed: u64,
    eta: impl Fn(usize, usize, usize) -> f64,
) -> ApcDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = (0..n_ages as i32)
        .map(|k| AgeGroup::new(20 + k * width, 20 + k * width + width - 1))
        .collect();
    let mut counts = Vec::with_capacity(n_ages * n_periods);
    for a in 0..n_ages {
        for p in 0..n_periods {
            let c = width as usize * (n_ages - 1 - a) + p;
            let mean = exposure * eta(a, p, c).exp();
            counts.push(Poisson::new(mean).unwrap().sample(&mut rng) as u64);
        }
    }
    ApcDataset::new(
        groups,
        (2000..2000 + n_periods as i32).collect(),
        counts,
        vec![exposure; n_ages * n_periods],
    )
    .unwrap()
}

/// Independent 3-parameter Poisson GLM by Newton iterations on the fixed
/// columns. Returns `(beta, covariance)`.
pub fn poisson_glm(
    x: &nalgebra::DMatrix<f64>,
    y: &[f64],
    offset: &[f64],
) -> (nalgebra::DVector<f64>, nalgebra::DMatrix<f64>) {
    let p = x.ncols();
    let mut beta = nalgebra::DVector::zeros(p);
    beta[0] = (y.iter().sum::<f64>() / offset.iter().map(|o| o.exp()).sum::<f64>()).ln();
    let mut info = nalgebra::DMatrix::zeros(p, p);
    for _ in 0..100 {
        let mut grad = nalgebra::DVector::zeros(p);
        info = nalgebra::DMatrix::zeros(p, p);
        for i in 0..x.nrows() {
            let row = x.row(i);
            let mu = (row.dot(&beta.transpose()) + offset[i]).exp();
            grad += row.transpose() * (y[i] - mu);
            info += row.transpose() * row * mu;
        }
        let step = info.clone().lu().solve(&grad).unwrap();
        beta += &step;
        if step.amax() < 1e-14 {
            break;
        }
    }
    (beta, info.try_inverse().unwrap())
}
