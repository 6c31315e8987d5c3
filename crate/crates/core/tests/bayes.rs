mod common;

use apcsmooth::bayes::{self, LatentModel, Likelihood, Mixture, Workspace};
use apcsmooth::design::{ApcDesign, DesignMode, SlopePair, Timescale};
use apcsmooth::gmrf::PcPrior;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

fn pc(u: f64) -> [PcPrior; 3] {
    [PcPrior::new(u, 0.01).unwrap(); 3]
}

fn smooth(a: usize, p: usize, c: usize) -> f64 {
    -6.5 + 0.03 * a as f64 - 0.01 * p as f64
        + 0.3 * (a as f64 / 2.5).sin()
        + 0.15 * (p as f64 / 3.0).cos()
        + 0.1 * (c as f64 / 6.0).sin()
}

fn gaussian_model(
    n_ages: usize,
    n_periods: usize,
    width: i32,
    train: usize,
    seed: u64,
) -> LatentModel {
    let data = common::poisson_grid(n_ages, n_periods, width, 5e4, seed, smooth);
    let design = ApcDesign::build(&data, train, DesignMode::Gmrf, SlopePair::default()).unwrap();
    LatentModel::from_design(
        &design,
        &data,
        pc(1.0),
        Likelihood::Gaussian { precision: 40.0 },
    )
    .unwrap()
}

/// Constrained Gaussian conditional by an independent route: explicit
/// null-space parameterisation `x = Z u`, with `Z` the leading left singular
/// vectors of the projector onto the orthogonal complement of `range(Cᵀ)`.
fn null_space_oracle(
    model: &LatentModel,
    tau: [f64; 3],
    noise: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = model.dim();
    let c = model.constraints();
    let q = c.transpose().qr().q();
    let proj = DMatrix::identity(n, n) - &q * q.transpose();
    let z = proj
        .svd(true, false)
        .u
        .unwrap()
        .columns(0, n - c.nrows())
        .into_owned();
    let a = model.row_matrix(model.observations.iter().map(|o| &o.row));
    let y = DVector::from_iterator(
        model.observations.len(),
        model.observations.iter().map(|o| o.y - o.offset),
    );
    let h = model.prior_precision(&tau) + a.transpose() * &a * noise;
    let b = a.transpose() * y * noise;
    let reduced = z.transpose() * &h * &z;
    let inv = reduced.clone().try_inverse().unwrap();
    let mean = &z * (&inv * (z.transpose() * b));
    let cov = &z * inv * z.transpose();
    (mean, cov)
}

#[test]
fn gaussian_likelihood_matches_exact_conditioning() {
    let cases = [(6, 8, 1, 8), (10, 12, 5, 10), (20, 30, 2, 30)];
    for (i, j, w, train) in cases {
        let model = gaussian_model(i, j, w, train, 3);
        assert!(model.dim() <= 200, "{} latent nodes", model.dim());
        let ws = Workspace::new(&model).unwrap();
        for tau in [[3.0, 50.0, 400.0], [1e3, 1.0, 20.0]] {
            let ga = bayes::gaussian_approx(&model, &ws, tau, None).unwrap();
            let (mean, cov) = null_space_oracle(&model, tau, 40.0);
            let got_cov = ga.constrained_covariance();
            for k in 0..model.dim() {
                let tol = 1e-10 * mean[k].abs().max(1.0);
                assert!(
                    (ga.mode[k] - mean[k]).abs() < tol,
                    "{i}x{j} mean[{k}]: {} vs {}",
                    ga.mode[k],
                    mean[k]
                );
                let tol = 1e-10 * cov[(k, k)].abs().max(1.0);
                assert!(
                    (got_cov[(k, k)] - cov[(k, k)]).abs() < tol,
                    "{i}x{j} var[{k}]"
                );
            }
        }
    }
}

#[test]
fn no_data_gives_zero_mode_and_prior_hyper_posterior() {
    let mut model = gaussian_model(8, 9, 1, 9, 1);
    model.observations.clear();
    let ws = Workspace::new(&model).unwrap();
    let ga = bayes::gaussian_approx(&model, &ws, [5.0, 5.0, 5.0], None).unwrap();
    assert!(ga.mode.amax() < 1e-12);

    // Laplace marginal is flat in τ, so the posterior is the prior.
    let ref_lm = ga.log_marginal;
    for tau in [[0.1, 1.0, 10.0], [100.0, 3.0, 7e3]] {
        let lm = bayes::gaussian_approx(&model, &ws, tau, None)
            .unwrap()
            .log_marginal;
        assert!((lm - ref_lm).abs() < 1e-8, "{lm} vs {ref_lm}");
    }
    let hyper = bayes::hyper_posterior(&model, &ws).unwrap();
    let total: f64 = hyper.grid.iter().map(|g| g.weight).sum();
    assert!((total - 1.0).abs() < 1e-12);

    // Prior-sampling oracle for the mode of ln τ.
    let kappa = model.fields[0].prior.kappa();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let exp = Exp::new(kappa).unwrap();
    let (lo, hi, bins) = (-5.0, 20.0, 250);
    let mut hist = vec![0usize; bins];
    for _ in 0..1_000_000 {
        let sigma: f64 = exp.sample(&mut rng);
        let theta = -2.0 * sigma.ln();
        if theta > lo && theta < hi {
            hist[((theta - lo) / (hi - lo) * bins as f64) as usize] += 1;
        }
    }
    let peak = (0..bins).max_by_key(|&k| hist[k]).unwrap();
    let mc_mode = lo + (peak as f64 + 0.5) * (hi - lo) / bins as f64;
    for t in hyper.mode_theta {
        assert!(
            (t - mc_mode).abs() < 0.3,
            "posterior mode {t} vs sampled prior mode {mc_mode}"
        );
    }
}

#[test]
fn poisson_mode_is_stationary_and_constrained() {
    let data = common::poisson_grid(10, 12, 5, 2e5, 2, smooth);
    let design = ApcDesign::build(&data, 10, DesignMode::Gmrf, SlopePair::default()).unwrap();
    let model = LatentModel::from_design(&design, &data, pc(1.0), Likelihood::Poisson).unwrap();
    assert_eq!(model.dim(), 3 + 10 + 10 + (5 * 9 + 10));
    let ws = Workspace::new(&model).unwrap();
    let ga = bayes::gaussian_approx(&model, &ws, [50.0, 200.0, 800.0], None).unwrap();
    assert!(ga.gradient_norm < 1e-8, "gradient {}", ga.gradient_norm);
    let cx = model.constraints() * &ga.mode;
    assert!(cx.amax() < 1e-8, "{cx}");
    // Positive definite on the constraint subspace.
    let c = model.constraints();
    assert!((&ga.precision + c.transpose() * &c).cholesky().is_some());

    // Prior block of each field equals τ R.
    let q = model.prior_precision(&[2.0, 3.0, 5.0]);
    let off = model.field_offsets();
    for (b, tau) in [2.0, 3.0, 5.0].into_iter().enumerate() {
        let r = model.fields[b].structure.to_dense();
        let m = r.nrows();
        assert_eq!(q.view((off[b], off[b]), (m, m)).into_owned(), r * tau);
    }
}

#[test]
fn mixture_quantiles() {
    let single = Mixture {
        weights: vec![1.0],
        means: vec![0.3],
        sds: vec![2.0],
    };
    assert!((single.quantile(0.975) - (0.3 + 1.959964 * 2.0)).abs() < 1e-5);
    assert!((single.quantile(0.025) - (0.3 - 1.959964 * 2.0)).abs() < 1e-5);
    assert!((single.quantile(0.5) - 0.3).abs() < 1e-7);

    let two = Mixture {
        weights: vec![0.5, 0.5],
        means: vec![-1.0, 1.0],
        sds: vec![1.0, 1.0],
    };
    assert!(two.quantile(0.5).abs() < 1e-7);

    let mix = Mixture {
        weights: vec![0.2, 0.5, 0.3],
        means: vec![-1.0, 0.4, 2.0],
        sds: vec![0.5, 1.2, 0.3],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let u = rand_distr::Uniform::new(0.0, 1.0).unwrap();
    let mut draws: Vec<f64> = (0..1_000_000)
        .map(|_| {
            let r: f64 = u.sample(&mut rng);
            let k = if r < 0.2 {
                0
            } else if r < 0.7 {
                1
            } else {
                2
            };
            Normal::new(mix.means[k], mix.sds[k])
                .unwrap()
                .sample(&mut rng)
        })
        .collect();
    draws.sort_by(f64::total_cmp);
    for p in [0.025, 0.5, 0.975] {
        let mc = draws[(p * draws.len() as f64) as usize];
        let q = mix.quantile(p);
        assert!((q - mc).abs() < 0.002, "p={p}: {q} vs {mc}");
        assert!((mix.cdf(q) - p).abs() < 1e-8);
    }
}

#[test]
fn forecast_variance_grows_with_horizon() {
    let data = common::poisson_grid(10, 16, 5, 2e5, 4, smooth);
    let design = ApcDesign::build(&data, 12, DesignMode::Gmrf, SlopePair::default()).unwrap();
    let model = LatentModel::from_design(&design, &data, pc(1.0), Likelihood::Poisson).unwrap();
    assert_eq!(model.forecast_extend(0).unwrap().dim(), model.dim());
    let ext = model.forecast_extend(4).unwrap();
    assert_eq!(ext.dim(), model.dim() + 8);
    assert_eq!(ext.fields[1].dim(), 16);
    assert!(model.forecast_extend(5).is_err());

    let ws = Workspace::new(&ext).unwrap();
    let ga = bayes::gaussian_approx(&ext, &ws, [50.0, 300.0, 900.0], None).unwrap();
    let cov = ga.constrained_covariance();
    let off = ext.field_offsets()[1];

    // The constraints span all 16 period levels, so raw f_P variances mix in
    // the re-centring. Measure each future level against the line fitted on
    // the 12 training levels instead: that deviation is what RW2
    // extrapolation adds and does not depend on the constraint set.
    let t: Vec<f64> = (0..12).map(f64::from).collect();
    let tbar = t.iter().sum::<f64>() / 12.0;
    let stt: f64 = t.iter().map(|v| (v - tbar).powi(2)).sum();
    let mut vars = Vec::new();
    for k in 12..16 {
        let mut l = DVector::zeros(ext.dim());
        l[off + k] = 1.0;
        for (j, tj) in t.iter().enumerate() {
            l[off + j] -= 1.0 / 12.0 + (k as f64 - tbar) * (tj - tbar) / stt;
        }
        vars.push((l.transpose() * &cov * &l)[(0, 0)]);
    }
    assert!(vars.windows(2).all(|w| w[1] >= w[0]), "{vars:?}");

    // Predictive variance of η at a fixed age grows with the horizon.
    let a = ext.row_matrix(ext.targets.iter().map(|t| &t.row));
    let var_eta = apcsmooth::linalg::quad_diag(&a, &cov);
    for age in 0..10 {
        let v: Vec<f64> = ext
            .targets
            .iter()
            .enumerate()
            .filter(|(_, t)| t.row.levels[0] == age && t.row.levels[1] >= 11)
            .map(|(i, _)| var_eta[i])
            .collect();
        assert_eq!(v.len(), 5);
        assert!(v.windows(2).all(|w| w[1] >= w[0]), "age {age}: {v:?}");
    }
    assert_eq!(ext.fields[1].scale, Timescale::Period);
}

#[test]
fn curvature_raises_posterior_sigma() {
    let fit_sigma = |eta: fn(usize, usize, usize) -> f64| {
        let data = common::poisson_grid(12, 14, 5, 3e5, 9, eta);
        let design = ApcDesign::build(&data, 14, DesignMode::Gmrf, SlopePair::default()).unwrap();
        let model = LatentModel::from_design(&design, &data, pc(1.0), Likelihood::Poisson).unwrap();
        let ws = Workspace::new(&model).unwrap();
        bayes::hyper_posterior(&model, &ws).unwrap().mode_sigma[0]
    };
    let curved = fit_sigma(|a, p, _| -6.5 + 0.8 * (a as f64 / 1.5).sin() - 0.01 * p as f64);
    let flat = fit_sigma(|a, p, _| -6.5 + 0.05 * a as f64 - 0.01 * p as f64);
    assert!(curved > flat, "curved σ_A {curved} vs near-linear {flat}");
}
