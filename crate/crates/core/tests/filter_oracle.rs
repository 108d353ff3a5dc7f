mod common;

use cgssm::kalman::{filter, filter_loglik, joint_state_beta_draw, simulation_smoother, smooth, CoefPrior, RegressionDesign};
use cgssm::linalg::min_eigenvalue;
use cgssm::ssm::{simulate, CgssModel, Dims, Indicators, StateSpace, SystemMatrices};
use common::{joint_loglik, random_data, random_model, smoothed, TableModel};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn loglik_matches_joint_density_n10_p3_m2() {
    let model = random_model(11, Dims { n: 10, p: 3, m: 2, r: 2 }, 1);
    let (ind, obs) = random_data(&model, 11);
    let got = filter_loglik(&model, &ind, &obs).unwrap();
    let want = joint_loglik(&model, ind.labels(), &obs);
    assert!((got - want).abs() < 1e-8, "{got} vs {want}");
}

#[test]
fn indicator_dependent_noise_matches_joint_density() {
    let model = random_model(12, Dims { n: 10, p: 3, m: 2, r: 2 }, 3);
    let (_, obs) = random_data(&model, 12);
    // label 0 zeroes one disturbance column
    let ind = Indicators::new(vec![0, 1, 0, 0, 2, 0, 1, 0, 0, 2], 3).unwrap();
    let got = filter_loglik(&model, &ind, &obs).unwrap();
    let want = joint_loglik(&model, ind.labels(), &obs);
    assert!((got - want).abs() < 1e-8, "{got} vs {want}");
}

#[test]
fn loglik_invariant_to_rotating_observation_noise() {
    let model = random_model(13, Dims { n: 9, p: 3, m: 2, r: 2 }, 2);
    let (ind, obs) = random_data(&model, 13);
    let angle: f64 = 0.7;
    let mut q = DMatrix::identity(3, 3);
    q[(0, 0)] = angle.cos();
    q[(0, 1)] = -angle.sin();
    q[(1, 0)] = angle.sin();
    q[(1, 1)] = angle.cos();
    let mut rotated = model.clone();
    for row in rotated.table.iter_mut() {
        for mats in row.iter_mut() {
            mats.obs_noise = &mats.obs_noise * &q;
        }
    }
    let a = filter_loglik(&model, &ind, &obs).unwrap();
    let b = filter_loglik(&rotated, &ind, &obs).unwrap();
    assert!((a - b).abs() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn loglik_matches_joint_density_on_random_models(
        seed in any::<u64>(), n in 1usize..=12, p in 1usize..=4, m in 1usize..=4, r in 1usize..=4, s in 1usize..=3,
    ) {
        let model = random_model(seed, Dims { n, p, m, r }, s);
        let (ind, obs) = random_data(&model, seed);
        let got = filter_loglik(&model, &ind, &obs).unwrap();
        let want = joint_loglik(&model, ind.labels(), &obs);
        prop_assert!((got - want).abs() < 1e-8, "{} vs {}", got, want);
        for fs in filter(&model, &ind, &obs).unwrap() {
            let scale = 1.0 + fs.pred_cov.amax();
            prop_assert!(min_eigenvalue(&fs.pred_cov) >= -1e-9 * scale);
            prop_assert!(min_eigenvalue(&fs.filt_cov) >= -1e-9 * scale);
            prop_assert!(min_eigenvalue(&fs.innovation_cov) >= -1e-9 * (1.0 + fs.innovation_cov.amax()));
        }
    }
}

#[test]
fn smoother_matches_conditional_moments() {
    let model = random_model(21, Dims { n: 8, p: 2, m: 3, r: 2 }, 2);
    let (ind, obs) = random_data(&model, 21);
    let got = smooth(&model, &ind, &obs, true).unwrap();
    let (mean, cov) = smoothed(&model, ind.labels(), &obs);
    assert!((&got.mean - &mean).amax() < 1e-8);
    for (a, b) in got.cov.iter().zip(&cov) {
        assert!((a - b).amax() < 1e-8);
    }
}

#[test]
fn observed_state_is_recovered_exactly() {
    let dims = Dims { n: 5, p: 2, m: 2, r: 2 };
    let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]);
    let model = CgssModel::new(dims, 1, DVector::zeros(2), DMatrix::identity(2, 2), move |_, _| SystemMatrices {
        obs_offset: DVector::from_vec(vec![0.1, -0.2]),
        obs_loading: h.clone(),
        obs_noise: DMatrix::zeros(2, 2),
        state_offset: DVector::zeros(2),
        transition: DMatrix::identity(2, 2) * 0.5,
        state_noise: DMatrix::identity(2, 2),
    })
    .unwrap();
    let ind = Indicators::null(5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (obs, states) = simulate(&model, &ind, &mut rng).unwrap();
    let draw = simulation_smoother(&model, &ind, &obs, &mut rng).unwrap();
    assert!((draw - states).amax() < 1e-7);
}

#[test]
fn simulation_smoother_moments() {
    let model = random_model(31, Dims { n: 6, p: 2, m: 2, r: 2 }, 2);
    let (ind, obs) = random_data(&model, 31);
    let (mean, cov) = smoothed(&model, ind.labels(), &obs);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let draws = 10_000;
    let mut sum = DMatrix::zeros(6, 2);
    let mut last = Vec::with_capacity(draws);
    for _ in 0..draws {
        let x = simulation_smoother(&model, &ind, &obs, &mut rng).unwrap();
        sum += &x;
        last.push(x.row(5).transpose());
    }
    let avg = sum / draws as f64;
    for t in 0..6 {
        for i in 0..2 {
            let se = (cov[t][(i, i)] / draws as f64).sqrt();
            assert!((avg[(t, i)] - mean[(t, i)]).abs() < 3.0 * se + 1e-12, "t={t} i={i}");
        }
    }
    // covariance of x_n: compare each entry with its sampling standard error
    let mbar: DVector<f64> = last.iter().fold(DVector::zeros(2), |a, x| a + x) / draws as f64;
    let mut emp = DMatrix::zeros(2, 2);
    for x in &last {
        let d = x - &mbar;
        emp += &d * d.transpose();
    }
    emp /= (draws - 1) as f64;
    let c = &cov[5];
    for i in 0..2 {
        for j in 0..2 {
            let se = ((c[(i, i)] * c[(j, j)] + c[(i, j)] * c[(i, j)]) / draws as f64).sqrt();
            assert!((emp[(i, j)] - c[(i, j)]).abs() < 3.0 * se, "({i},{j}) {} vs {}", emp[(i, j)], c[(i, j)]);
        }
    }
}

/// Scalar local level with a constant drift coefficient in the state offset
/// and in the initial mean.
struct DriftModel {
    inner: TableModel,
}

impl StateSpace for DriftModel {
    fn dims(&self) -> Dims {
        self.inner.dims()
    }
    fn support_size(&self) -> usize {
        1
    }
    fn initial_mean(&self) -> DVector<f64> {
        self.inner.initial_mean()
    }
    fn initial_cov(&self) -> DMatrix<f64> {
        self.inner.initial_cov()
    }
    fn system(&self, t: usize, label: usize) -> SystemMatrices {
        self.inner.system(t, label)
    }
}

impl RegressionDesign for DriftModel {
    fn n_coef(&self) -> usize {
        1
    }
    fn design(&self, t: usize) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, if t == 0 { 2.0 } else { 1.0 })
    }
}

fn drift_model() -> DriftModel {
    let n = 7;
    let mats = SystemMatrices {
        obs_offset: DVector::zeros(1),
        obs_loading: DMatrix::identity(1, 1),
        obs_noise: DMatrix::from_element(1, 1, 0.8),
        state_offset: DVector::from_element(1, 0.2),
        transition: DMatrix::from_element(1, 1, 0.9),
        state_noise: DMatrix::from_element(1, 1, 0.5),
    };
    DriftModel {
        inner: TableModel {
            dims: Dims { n, p: 1, m: 1, r: 1 },
            init_mean: DVector::from_element(1, 0.3),
            init_cov: DMatrix::from_element(1, 1, 1.5),
            table: vec![vec![mats]; n],
        },
    }
}

/// GLS posterior of the drift: y = mu0 + c beta + noise with Cov(noise) from
/// the joint normal at beta = 0, and c the response of E(y) to beta.
fn gls_posterior(model: &DriftModel, obs: &DMatrix<f64>, prior_mean: f64, prior_var: f64) -> (f64, f64) {
    let n = model.dims().n;
    let base = common::joint(&model.inner, &vec![0; n]);
    let mut c = DVector::zeros(n);
    let mut x = 0.0;
    for t in 0..n {
        x = model.design(t)[(0, 0)] + if t == 0 { 0.0 } else { 0.9 * x };
        c[t] = x;
    }
    let yy_inv = base.yy.clone().try_inverse().unwrap();
    let resid = common::stack_rows(obs) - &base.y_mean;
    let prec = 1.0 / prior_var + c.dot(&(&yy_inv * &c));
    let mean = (prior_mean / prior_var + c.dot(&(&yy_inv * resid))) / prec;
    (mean, 1.0 / prec)
}

#[test]
fn coefficient_posterior_matches_gls() {
    let model = drift_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ind = Indicators::null(7, 1);
    let (obs, _) = simulate(&model.inner, &ind, &mut rng).unwrap();
    let prior = CoefPrior {
        mean: DVector::from_element(1, 0.5),
        var: DVector::from_element(1, 2.0),
    };
    let stats = cgssm::kalman::augmented_filter(&model, &ind, &obs).unwrap();
    let post = stats.posterior(&prior).unwrap();
    let (mean, var) = gls_posterior(&model, &obs, 0.5, 2.0);
    assert!((post.mean[0] - mean).abs() < 1e-8);
    assert!((post.covariance()[(0, 0)] - var).abs() < 1e-8);

    // marginal likelihood with the coefficient integrated out
    let base = common::joint(&model.inner, &[0; 7]);
    let mut c = DVector::zeros(7);
    let mut x = 0.0;
    for t in 0..7 {
        x = model.design(t)[(0, 0)] + if t == 0 { 0.0 } else { 0.9 * x };
        c[t] = x;
    }
    let marg_cov = &base.yy + &c * c.transpose() * 2.0;
    let marg_mean = &base.y_mean + &c * 0.5;
    let want = common::log_normal(&common::stack_rows(&obs), &marg_mean, &marg_cov);
    assert!((stats.log_marginal(&prior).unwrap() - want).abs() < 1e-8);

    let draws = 10_000;
    let mut sum = 0.0;
    for _ in 0..draws {
        let (_, beta) = joint_state_beta_draw(&model, &ind, &obs, &prior, &mut rng).unwrap();
        sum += beta[0];
    }
    let se = (var / draws as f64).sqrt();
    assert!((sum / draws as f64 - mean).abs() < 3.0 * se);
}

#[test]
fn pinned_coefficient_stays_at_prior_mean() {
    let model = drift_model();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ind = Indicators::null(7, 1);
    let (obs, _) = simulate(&model.inner, &ind, &mut rng).unwrap();
    let prior = CoefPrior {
        mean: DVector::zeros(1),
        var: DVector::zeros(1),
    };
    let (_, beta) = joint_state_beta_draw(&model, &ind, &obs, &prior, &mut rng).unwrap();
    assert_eq!(beta[0], 0.0);
    let stats = cgssm::kalman::augmented_filter(&model, &ind, &obs).unwrap();
    let ll = filter_loglik(&model.inner, &ind, &obs).unwrap();
    assert!((stats.log_marginal(&prior).unwrap() - ll).abs() < 1e-10);
}
