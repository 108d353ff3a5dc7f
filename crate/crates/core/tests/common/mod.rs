//! Brute-force Gaussian oracles for small models.
//!
//! Everything here stacks the whole sample into one multivariate normal by
//! propagating moments through the state equation, then conditions or
//! evaluates densities directly. Nothing is shared with the filter code.

#![allow(dead_code)]

use cgssm::ssm::{Dims, Indicators, StateSpace, SystemMatrices};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stacked moments of `(x_from..x_{n-1}, y_from..y_{n-1})`.
pub struct Joint {
    pub x_mean: DVector<f64>,
    pub y_mean: DVector<f64>,
    pub xx: DMatrix<f64>,
    pub xy: DMatrix<f64>,
    pub yy: DMatrix<f64>,
}

/// Moments of everything from time `from` on, starting from
/// `x_from ~ N(init_mean, init_cov)`.
pub fn propagate<M: StateSpace>(
    model: &M,
    labels: &[usize],
    from: usize,
    init_mean: &DVector<f64>,
    init_cov: &DMatrix<f64>,
) -> Joint {
    let Dims { n, p, m, r } = model.dims();
    let len = n - from;
    let nxi = m + len.saturating_sub(1) * r;
    // noise covariance: initial state block, then unit disturbances
    let mut dcov = DMatrix::zeros(nxi, nxi);
    dcov.view_mut((0, 0), (m, m)).copy_from(init_cov);
    for i in m..nxi {
        dcov[(i, i)] = 1.0;
    }
    let mut s_all = DMatrix::zeros(len * m, nxi);
    let mut x_mean = DVector::zeros(len * m);
    let mut h_blk = DMatrix::zeros(len * p, len * m);
    let mut gg = DMatrix::zeros(len * p, len * p);
    let mut y_off = DVector::zeros(len * p);
    let mut s_prev = DMatrix::zeros(m, nxi);
    let mut mean_prev = DVector::zeros(m);
    for (k, t) in (from..n).enumerate() {
        let mats = model.system(t, labels[t]);
        let (s_t, mean_t) = if k == 0 {
            let mut s = DMatrix::zeros(m, nxi);
            s.view_mut((0, 0), (m, m)).fill_with_identity();
            (s, init_mean.clone())
        } else {
            let mut s = &mats.transition * &s_prev;
            let col = m + (k - 1) * r;
            s.view_mut((0, col), (m, r)).copy_from(&mats.state_noise);
            (s, &mats.state_offset + &mats.transition * &mean_prev)
        };
        s_all.view_mut((k * m, 0), (m, nxi)).copy_from(&s_t);
        x_mean.rows_mut(k * m, m).copy_from(&mean_t);
        h_blk.view_mut((k * p, k * m), (p, m)).copy_from(&mats.obs_loading);
        gg.view_mut((k * p, k * p), (p, p))
            .copy_from(&(&mats.obs_noise * mats.obs_noise.transpose()));
        y_off.rows_mut(k * p, p).copy_from(&mats.obs_offset);
        s_prev = s_t;
        mean_prev = mean_t;
    }
    let xx = &s_all * &dcov * s_all.transpose();
    let xy = &xx * h_blk.transpose();
    let yy = &h_blk * &xy + gg;
    let y_mean = y_off + &h_blk * &x_mean;
    Joint {
        x_mean,
        y_mean,
        xx,
        xy,
        yy,
    }
}

pub fn joint<M: StateSpace>(model: &M, labels: &[usize]) -> Joint {
    propagate(model, labels, 0, &model.initial_mean(), &model.initial_cov())
}

pub fn stack_rows(obs: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(obs.len(), (0..obs.nrows()).flat_map(|t| (0..obs.ncols()).map(move |j| obs[(t, j)])))
}

pub fn log_normal(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let k = x.len();
    if k == 0 {
        return 0.0;
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let c = sym.cholesky().expect("oracle covariance positive definite");
    let d = x - mean;
    let logdet: f64 = 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + d.dot(&c.solve(&d)))
}

/// `log p(y | K)` from the stacked joint normal.
pub fn joint_loglik<M: StateSpace>(model: &M, labels: &[usize], obs: &DMatrix<f64>) -> f64 {
    let j = joint(model, labels);
    log_normal(&stack_rows(obs), &j.y_mean, &j.yy)
}

/// `log p(y_{t+1:n} | x_t = x, K)`.
pub fn future_loglik<M: StateSpace>(model: &M, labels: &[usize], t: usize, x: &DVector<f64>, obs: &DMatrix<f64>) -> f64 {
    let Dims { n, p, m, .. } = model.dims();
    let j = propagate(model, labels, t, x, &DMatrix::zeros(m, m));
    let k = (n - t - 1) * p;
    let y = stack_rows(&obs.rows(t + 1, n - t - 1).into_owned());
    log_normal(&y, &j.y_mean.rows(p, k).into_owned(), &j.yy.view((p, p), (k, k)).into_owned())
}

/// Smoothed state means (n x m) and covariances from Gaussian conditioning.
pub fn smoothed<M: StateSpace>(model: &M, labels: &[usize], obs: &DMatrix<f64>) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let Dims { n, m, .. } = model.dims();
    let j = joint(model, labels);
    let yy_inv = j.yy.clone().try_inverse().expect("invertible");
    let mean = &j.x_mean + &j.xy * &yy_inv * (stack_rows(obs) - &j.y_mean);
    let cov = &j.xx - &j.xy * &yy_inv * j.xy.transpose();
    let mut out = DMatrix::zeros(n, m);
    let mut covs = Vec::new();
    for t in 0..n {
        for i in 0..m {
            out[(t, i)] = mean[t * m + i];
        }
        covs.push(cov.view((t * m, t * m), (m, m)).into_owned());
    }
    (out, covs)
}

/// Candidate masses `p(K_t = s | y, K_{-t})` by full-likelihood enumeration.
pub fn brute_force_pmfs<M: StateSpace>(model: &M, log_prior: &[f64], labels: &[usize], obs: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let n = labels.len();
    let mut out = Vec::new();
    for t in 0..n {
        let mut lw = Vec::new();
        for (s, lp) in log_prior.iter().enumerate() {
            let mut k = labels.to_vec();
            k[t] = s;
            lw.push(joint_loglik(model, &k, obs) + lp);
        }
        let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lw.iter().map(|l| (l - max).exp()).collect();
        let tot: f64 = w.iter().sum();
        out.push(w.into_iter().map(|v| v / tot).collect());
    }
    out
}

/// A model given by an explicit table of matrices per `(t, label)`.
#[derive(Clone, Debug)]
pub struct TableModel {
    pub dims: Dims,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    pub table: Vec<Vec<SystemMatrices>>,
}

impl StateSpace for TableModel {
    fn dims(&self) -> Dims {
        self.dims
    }
    fn support_size(&self) -> usize {
        self.table[0].len()
    }
    fn initial_mean(&self) -> DVector<f64> {
        self.init_mean.clone()
    }
    fn initial_cov(&self) -> DMatrix<f64> {
        self.init_cov.clone()
    }
    fn system(&self, t: usize, label: usize) -> SystemMatrices {
        self.table[t][label].clone()
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn normal_vector(rng: &mut ChaCha8Rng, r: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(r, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Random model whose indicator scales columns of `Gamma`; label 0 switches
/// some disturbance directions off, which makes `Gamma Gamma'` singular.
pub fn random_model(seed: u64, dims: Dims, support: usize) -> TableModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Dims { n, p, m, r } = dims;
    let a = normal_matrix(&mut rng, m, m, 1.0);
    let init_cov = &a * a.transpose() * 0.5 + DMatrix::identity(m, m) * 0.1;
    let init_mean = normal_vector(&mut rng, m, 1.0);
    let time_varying = rng.random_bool(0.5);
    let mut base = None;
    let mut table = Vec::with_capacity(n);
    for _ in 0..n {
        let mats = match (&base, time_varying) {
            (Some(b), false) => Clone::clone(b),
            _ => {
                let f = normal_matrix(&mut rng, m, m, 0.8 / (m as f64).sqrt());
                let g = normal_matrix(&mut rng, p, p, 0.4) + DMatrix::identity(p, p) * 0.6;
                let mats = SystemMatrices {
                    obs_offset: normal_vector(&mut rng, p, 0.5),
                    obs_loading: normal_matrix(&mut rng, p, m, 1.0),
                    obs_noise: g,
                    state_offset: normal_vector(&mut rng, m, 0.3),
                    transition: f,
                    state_noise: normal_matrix(&mut rng, m, r, 0.5),
                };
                base = Some(mats.clone());
                mats
            }
        };
        let mut row = Vec::with_capacity(support);
        for s in 0..support {
            let mut ms = mats.clone();
            for c in 0..r {
                let scale = if s == 0 { if c % 2 == 0 { 1.0 } else { 0.0 } } else { 1.0 + 1.5 * ((s + c) % support) as f64 };
                for i in 0..m {
                    ms.state_noise[(i, c)] *= scale;
                }
            }
            row.push(ms);
        }
        table.push(row);
    }
    TableModel {
        dims,
        init_mean,
        init_cov,
        table,
    }
}

/// Random labels and observations drawn from the model.
pub fn random_data(model: &TableModel, seed: u64) -> (Indicators, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let support = model.support_size();
    let labels: Vec<usize> = (0..model.dims.n).map(|_| rng.random_range(0..support)).collect();
    let ind = Indicators::new(labels, support).unwrap();
    let (obs, _) = cgssm::ssm::simulate(model, &ind, &mut rng).unwrap();
    (ind, obs)
}

/// A two-component factor model with moderate parameter values and data
/// drawn from it.
pub struct FactorFixture {
    pub spec: cgssm::dfm::DfmSpec,
    pub comps: Vec<cgssm::dfm::ComponentParams>,
    pub beta: DVector<f64>,
    pub theta: DMatrix<f64>,
    pub sigma_sd: DVector<f64>,
    pub obs: DMatrix<f64>,
    pub ind: Indicators,
}

pub fn factor_fixture(seed: u64, n: usize, p: usize) -> FactorFixture {
    use cgssm::dfm::{ComponentParams, DfmSpec, DfmStates, Priors, ThetaMode};
    use cgssm::kalman::WithCoefficients;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 2;
    let regressors = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let spec = DfmSpec {
        k,
        regressors,
        priors: Priors { diffuse: 100.0, ..Priors::default() },
        theta_mode: ThetaMode::Unknown,
    };
    let comps: Vec<ComponentParams> = (0..k)
        .map(|i| ComponentParams {
            rho: 0.8 + 0.05 * i as f64,
            lambda: 0.27 + 0.02 * i as f64,
            sigma_f: 0.5,
            eta: [3.0, 8.0, 0.3, 0.6],
        })
        .collect();
    let beta = DVector::from_fn(spec.n_coef(), |_, _| rng.random_range(-1.0..1.0));
    let theta = DMatrix::from_fn(p, k, |j, i| {
        if j == i {
            1.0
        } else if j < i {
            0.0
        } else {
            rng.sample::<f64, _>(StandardNormal)
        }
    });
    let sigma_sd = DVector::from_fn(p, |_, _| rng.random_range(0.2..0.6));
    let labels: Vec<usize> = (0..n).map(|_| if rng.random::<f64>() < 0.15 { rng.random_range(1..9) } else { 0 }).collect();
    let ind = Indicators::new(labels, spec.support_size()).unwrap();
    let states = DfmStates::new(&spec, &comps).unwrap();
    let with_beta = WithCoefficients { model: &states, beta: &beta };
    let (_, x) = cgssm::ssm::simulate(&with_beta, &ind, &mut rng).unwrap();
    let f = &x * spec.phi().transpose();
    let obs = DMatrix::from_fn(n, p, |t, j| {
        (0..k).map(|i| theta[(j, i)] * f[(t, i)]).sum::<f64>() + sigma_sd[j] * rng.sample::<f64, _>(StandardNormal)
    });
    FactorFixture { spec, comps, beta, theta, sigma_sd, obs, ind }
}

/// Posterior of one loading row from the stacked regression design rather
/// than cross-products: `(mean, precision)` over the free entries.
pub fn theta_row_by_design(j: usize, f: &DMatrix<f64>, y: &DVector<f64>, sigma2: f64, kappa: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let k = f.ncols();
    let free: Vec<usize> = (0..k).filter(|&l| j > l).collect();
    let mut target = y.clone();
    if j < k {
        target -= f.column(j);
    }
    let x = DMatrix::from_fn(f.nrows(), free.len(), |t, a| f[(t, free[a])]);
    let prior = DMatrix::from_fn(free.len(), free.len(), |a, b| if a == b { kappa[free[a]] } else { 0.0 });
    let prec = x.transpose() * &x / sigma2 + prior;
    let mean = prec.clone().try_inverse().unwrap() * (x.transpose() * target / sigma2);
    (mean, prec)
}

/// Largest gap between the sampler's inclusion probabilities and those from
/// Gaussian marginals with the coefficients integrated out by hand, on a
/// one-component model with two regressors.
pub fn inclusion_oracle_gap(seed: u64) -> f64 {
    use cgssm::dfm::{ComponentParams, DfmSpec, DfmStates, Priors, ThetaMode};
    use cgssm::kalman::{augmented_filter, WithCoefficients};
    use cgssm::mcmc::inclusion_probability;
    use cgssm::reduction::{reduce, ReducedModel};

    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regressors = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let spec = DfmSpec {
        k: 1,
        regressors,
        priors: Priors { diffuse: 10.0, ..Priors::default() },
        theta_mode: ThetaMode::Unknown,
    };
    let comps = [ComponentParams { rho: 0.7, lambda: 0.3, sigma_f: 0.6, eta: [2.0, 5.0, 0.3, 0.5] }];
    let theta = DMatrix::from_column_slice(3, 1, &[1.0, 0.6, -0.9]);
    let sigma2 = DVector::from_vec(vec![0.2, 0.3, 0.25]);
    let obs = DMatrix::from_fn(n, 3, |t, j| (t as f64 * 0.5).sin() * theta[(j, 0)] + 0.4 * rng.sample::<f64, _>(StandardNormal) + 0.8);
    let ind = Indicators::new(vec![0, 0, 0, 1, 0, 0, 0, 0], spec.support_size()).unwrap();
    let states = DfmStates::new(&spec, &comps).unwrap();
    let phi = spec.phi();
    let red = reduce(&theta, &sigma2, &obs).unwrap();
    let model = ReducedModel { states: &states, phi: &phi, reduced: &red };
    let stats = augmented_filter(&model, &ind, &red.y).unwrap();

    // reduced data are Gaussian with mean affine in the coefficients
    let q = spec.n_coef();
    let at = |beta: &DVector<f64>| {
        let with = WithCoefficients { model: &states, beta };
        joint(&ReducedModel { states: &with, phi: &phi, reduced: &red }, ind.labels())
    };
    let base = at(&DVector::zeros(q));
    let mut design = DMatrix::zeros(base.y_mean.len(), q);
    for c in 0..q {
        let mut e = DVector::zeros(q);
        e[c] = 1.0;
        design.set_column(c, &(at(&e).y_mean - &base.y_mean));
    }
    let y = stack_rows(&red.y);
    let marginal = |flags: &[bool]| {
        let prior = spec.coef_prior(flags);
        let cov = &base.yy + &design * DMatrix::from_diagonal(&prior.var) * design.transpose();
        log_normal(&y, &(&base.y_mean + &design * &prior.mean), &cov)
    };
    let mut gap: f64 = 0.0;
    for current in [[true, false], [false, true], [true, true]] {
        for idx in 0..2 {
            let mut with = current;
            with[idx] = true;
            let mut without = current;
            without[idx] = false;
            let got = inclusion_probability(
                stats.log_marginal(&spec.coef_prior(&with)).unwrap(),
                stats.log_marginal(&spec.coef_prior(&without)).unwrap(),
                0.5,
            );
            let want = inclusion_probability(marginal(&with), marginal(&without), 0.5);
            gap = gap.max((got - want).abs());
        }
    }
    gap
}
