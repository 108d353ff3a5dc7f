//! Collapsing a factor model's p-dimensional observations to k dimensions.
//!
//! With `y_t = Theta Phi x_t + e_t`, `e_t ~ N(0, Sigma_t)` and diagonal
//! `Sigma_t`, the GLS projection
//! `y^L_t = (Theta' Sigma_t^{-1} Theta)^{-1} Theta' Sigma_t^{-1} y_t` satisfies
//! `y^L_t = Phi x_t + e^L_t` with `e^L_t ~ N(0, Sigma^L_t)`,
//! `Sigma^L_t = (Theta' Sigma_t^{-1} Theta)^{-1}`, and the likelihood of
//! anything in the state equation depends on `y` only through `y^L`.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::k_sampler::{sample_indicators, IidPrior};
use crate::kalman::{filter_loglik, RegressionDesign};
use crate::ssm::{check_observations, simulate, CgssModel, Dims, Indicators, StateSpace, SystemMatrices};

/// Transformed observations and their noise covariance.
#[derive(Clone, Debug)]
pub struct ReducedObservations {
    /// n x k.
    pub y: DMatrix<f64>,
    /// One k x k covariance, or one per time point when `time_varying`.
    pub sigma: Vec<DMatrix<f64>>,
    /// Lower Cholesky factors of `sigma`.
    pub sigma_chol: Vec<DMatrix<f64>>,
    pub time_varying: bool,
}

impl ReducedObservations {
    pub fn k(&self) -> usize {
        self.y.ncols()
    }

    pub fn sigma_at(&self, t: usize) -> &DMatrix<f64> {
        &self.sigma[if self.time_varying { t } else { 0 }]
    }

    pub fn sigma_chol_at(&self, t: usize) -> &DMatrix<f64> {
        &self.sigma_chol[if self.time_varying { t } else { 0 }]
    }
}

/// `(Sigma^L, P)` with `P = Sigma^L Theta' Sigma^{-1}` (k x p).
fn projector(theta: &DMatrix<f64>, sigma: impl Fn(usize) -> f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (p, k) = theta.shape();
    let mut weighted = DMatrix::zeros(k, p);
    for j in 0..p {
        let s = sigma(j);
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InvalidParameter(format!("noise variance {s} of series {j} is not positive")));
        }
        for i in 0..k {
            weighted[(i, j)] = theta[(j, i)] / s;
        }
    }
    let mut info = &weighted * theta;
    crate::linalg::symmetrize(&mut info);
    let max_diag = info.diagonal().amax();
    let chol = info.clone().cholesky().ok_or(Error::ReductionRank)?;
    let l = chol.l_dirty();
    let min_pivot = (0..k).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if k > 0 && !(min_pivot > 1e-12 * max_diag) {
        return Err(Error::ReductionRank);
    }
    let sigma_l = chol.inverse();
    let proj = chol.solve(&weighted);
    Ok((crate::linalg::symmetrized(sigma_l), proj))
}

fn lower_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(m.clone().cholesky().ok_or(Error::ReductionRank)?.l())
}

/// Reduce with a time-invariant diagonal noise covariance given by its
/// variances (length p).
pub fn reduce(theta: &DMatrix<f64>, sigma: &DVector<f64>, obs: &DMatrix<f64>) -> Result<ReducedObservations> {
    let p = theta.nrows();
    if sigma.len() != p {
        return Err(Error::dim("noise variances", p, sigma.len()));
    }
    if obs.ncols() != p {
        return Err(Error::dim("observation columns", p, obs.ncols()));
    }
    let (sigma_l, proj) = projector(theta, |j| sigma[j])?;
    let y = obs * proj.transpose();
    Ok(ReducedObservations {
        y,
        sigma_chol: vec![lower_factor(&sigma_l)?],
        sigma: vec![sigma_l],
        time_varying: false,
    })
}

/// Reduce with time-varying diagonal noise, variances given as an n x p matrix.
pub fn reduce_time_varying(theta: &DMatrix<f64>, sigma: &DMatrix<f64>, obs: &DMatrix<f64>) -> Result<ReducedObservations> {
    let (n, p) = obs.shape();
    if theta.nrows() != p || sigma.shape() != (n, p) {
        return Err(Error::dim(
            "time-varying noise variances",
            format!("{n}x{p}"),
            format!("{}x{}", sigma.nrows(), sigma.ncols()),
        ));
    }
    let k = theta.ncols();
    let mut y = DMatrix::zeros(n, k);
    let mut covs = Vec::with_capacity(n);
    let mut chols = Vec::with_capacity(n);
    for t in 0..n {
        let (sigma_l, proj) = projector(theta, |j| sigma[(t, j)])?;
        let yt = &proj * obs.row(t).transpose();
        y.set_row(t, &yt.transpose());
        chols.push(lower_factor(&sigma_l)?);
        covs.push(sigma_l);
    }
    Ok(ReducedObservations {
        y,
        sigma: covs,
        sigma_chol: chols,
        time_varying: true,
    })
}

/// The k-dimensional model: state equation of `states`, observation
/// `y^L_t = Phi x_t + e^L_t`.
pub struct ReducedModel<'a, M: ?Sized> {
    pub states: &'a M,
    pub phi: &'a DMatrix<f64>,
    pub reduced: &'a ReducedObservations,
}

impl<M: StateSpace + ?Sized> StateSpace for ReducedModel<'_, M> {
    fn dims(&self) -> Dims {
        Dims {
            p: self.phi.nrows(),
            ..self.states.dims()
        }
    }
    fn support_size(&self) -> usize {
        self.states.support_size()
    }
    fn initial_mean(&self) -> DVector<f64> {
        self.states.initial_mean()
    }
    fn initial_cov(&self) -> DMatrix<f64> {
        self.states.initial_cov()
    }
    fn system(&self, t: usize, label: usize) -> SystemMatrices {
        let s = self.states.system(t, label);
        SystemMatrices {
            obs_offset: DVector::zeros(self.phi.nrows()),
            obs_loading: self.phi.clone(),
            obs_noise: self.reduced.sigma_chol_at(t).clone(),
            ..s
        }
    }
}

impl<M: RegressionDesign + ?Sized> RegressionDesign for ReducedModel<'_, M> {
    fn n_coef(&self) -> usize {
        self.states.n_coef()
    }
    fn design(&self, t: usize) -> DMatrix<f64> {
        self.states.design(t)
    }
}

/// The full p-dimensional model `y_t = Theta Phi x_t + e_t` with diagonal
/// noise standard deviations `sigma_sd`.
pub struct FactorModel<'a, M: ?Sized> {
    pub states: &'a M,
    loading: DMatrix<f64>,
    noise: DMatrix<f64>,
}

impl<'a, M: StateSpace + ?Sized> FactorModel<'a, M> {
    pub fn new(states: &'a M, phi: &DMatrix<f64>, theta: &DMatrix<f64>, sigma_sd: &DVector<f64>) -> Result<Self> {
        if theta.ncols() != phi.nrows() {
            return Err(Error::dim("loading columns", phi.nrows(), theta.ncols()));
        }
        if sigma_sd.len() != theta.nrows() {
            return Err(Error::dim("noise scales", theta.nrows(), sigma_sd.len()));
        }
        Ok(Self {
            states,
            loading: theta * phi,
            noise: DMatrix::from_diagonal(sigma_sd),
        })
    }
}

impl<M: StateSpace + ?Sized> StateSpace for FactorModel<'_, M> {
    fn dims(&self) -> Dims {
        Dims {
            p: self.loading.nrows(),
            ..self.states.dims()
        }
    }
    fn support_size(&self) -> usize {
        self.states.support_size()
    }
    fn initial_mean(&self) -> DVector<f64> {
        self.states.initial_mean()
    }
    fn initial_cov(&self) -> DMatrix<f64> {
        self.states.initial_cov()
    }
    fn system(&self, t: usize, label: usize) -> SystemMatrices {
        let s = self.states.system(t, label);
        SystemMatrices {
            obs_offset: DVector::zeros(self.loading.nrows()),
            obs_loading: self.loading.clone(),
            obs_noise: self.noise.clone(),
            ..s
        }
    }
}

impl<M: RegressionDesign + ?Sized> RegressionDesign for FactorModel<'_, M> {
    fn n_coef(&self) -> usize {
        self.states.n_coef()
    }
    fn design(&self, t: usize) -> DMatrix<f64> {
        self.states.design(t)
    }
}

/// `log p(y^L | K, Sigma^L, omega_s)`: the hyperparameter likelihood of the
/// state equation with the state integrated out.
pub fn marginal_state_loglik<M: StateSpace + ?Sized>(
    states: &M,
    phi: &DMatrix<f64>,
    reduced: &ReducedObservations,
    ind: &Indicators,
) -> Result<f64> {
    let model = ReducedModel { states, phi, reduced };
    check_observations(&model, &reduced.y)?;
    filter_loglik(&model, ind, &reduced.y)
}

/// `log p(y | y^L)` for time-invariant diagonal noise: the part of the full
/// likelihood lost by the projection. Adding it to
/// [`marginal_state_loglik`] gives `log p(y | K, Theta, Sigma, omega_s)`.
pub fn projection_loglik(theta: &DMatrix<f64>, sigma: &DVector<f64>, obs: &DMatrix<f64>, reduced: &ReducedObservations) -> Result<f64> {
    let (n, p) = obs.shape();
    let k = theta.ncols();
    if reduced.time_varying || reduced.y.nrows() != n {
        return Err(Error::dim("reduced observations", format!("{n} rows, time invariant"), reduced.y.nrows()));
    }
    let resid = obs - &reduced.y * theta.transpose();
    let mut quad = 0.0;
    let mut log_det = 0.0;
    for j in 0..p {
        quad += resid.column(j).norm_squared() / sigma[j];
        log_det += sigma[j].ln();
    }
    let log_det_l: f64 = 2.0 * reduced.sigma_chol[0].diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (n * (p - k)) as f64 * crate::kalman::LN_2PI - 0.5 * n as f64 * (log_det - log_det_l) - 0.5 * quad)
}

/// Settings for [`bench_reduction`].
#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub p_grid: Vec<usize>,
    pub n: usize,
    pub k: usize,
    /// Indicator sweeps each timing refers to.
    pub sweeps: usize,
    /// Wall-clock allowance per grid point and path before extrapolating.
    pub budget: Duration,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            p_grid: vec![5, 50, 100, 500],
            n: 200,
            k: 2,
            sweeps: 1000,
            budget: Duration::from_secs(60),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub p: usize,
    pub naive_seconds: f64,
    pub naive_estimated: bool,
    pub reduced_seconds: f64,
    pub reduced_estimated: bool,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.naive_seconds / self.reduced_seconds
    }
}

/// Two-state-per-component benchmark dynamics: an AR(1) deviation
/// `psi_{t+1} = rho psi_t + sigma zeta` and a level
/// `mu_{t+1} = mu_t + sigma K xi` with two break sizes per component.
pub fn bench_states(n: usize, k: usize) -> CgssModel<impl Fn(usize, usize) -> SystemMatrices + Clone> {
    let m = 2 * k;
    let rho = 0.8;
    let sigma = 0.5;
    let sizes = [3.0, 10.0];
    let mut init_cov = DMatrix::zeros(m, m);
    for i in 0..k {
        init_cov[(2 * i, 2 * i)] = sigma * sigma / (1.0 - rho * rho);
        init_cov[(2 * i + 1, 2 * i + 1)] = 10.0;
    }
    CgssModel::new(
        Dims { n, p: k, m, r: m },
        1 + 2 * k,
        DVector::zeros(m),
        init_cov,
        move |_, label| {
            let mut f = DMatrix::zeros(m, m);
            let mut gam = DMatrix::zeros(m, m);
            for i in 0..k {
                f[(2 * i, 2 * i)] = rho;
                f[(2 * i + 1, 2 * i + 1)] = 1.0;
                gam[(2 * i, 2 * i)] = sigma;
                if label > 0 && (label - 1) / 2 == i {
                    gam[(2 * i + 1, 2 * i + 1)] = sigma * sizes[(label - 1) % 2];
                }
            }
            let mut h = DMatrix::zeros(k, m);
            for i in 0..k {
                h[(i, 2 * i)] = 1.0;
                h[(i, 2 * i + 1)] = 1.0;
            }
            SystemMatrices {
                obs_offset: DVector::zeros(k),
                obs_loading: h,
                obs_noise: DMatrix::identity(k, k),
                state_offset: DVector::zeros(m),
                transition: f,
                state_noise: gam,
            }
        },
    )
    .expect("benchmark model is well formed")
}

/// Time `sweeps` indicator sweeps, extrapolating from a shorter run when the
/// full run would exceed `budget`. Returns (seconds, estimated).
fn timed(sweeps: usize, n: usize, budget: Duration, mut run: impl FnMut(usize) -> Result<()>) -> Result<(f64, bool)> {
    if sweeps == 0 {
        return Ok((0.0, false));
    }
    let probe_n = n.min(10).max(1);
    let start = Instant::now();
    run(probe_n)?;
    let per_sweep = start.elapsed().as_secs_f64() * n as f64 / probe_n as f64;
    let budget = budget.as_secs_f64();
    if per_sweep * sweeps as f64 <= budget {
        let start = Instant::now();
        for _ in 0..sweeps {
            run(n)?;
        }
        return Ok((start.elapsed().as_secs_f64(), false));
    }
    if per_sweep <= budget {
        let reps = ((budget / per_sweep).floor() as usize).clamp(1, sweeps);
        let start = Instant::now();
        for _ in 0..reps {
            run(n)?;
        }
        return Ok((start.elapsed().as_secs_f64() * sweeps as f64 / reps as f64, true));
    }
    // even one sweep is too long: time truncated sweeps and scale by length
    let mut sub = probe_n;
    while sub * 2 <= n && per_sweep * (sub * 2) as f64 / n as f64 <= budget / 2.0 {
        sub *= 2;
    }
    let start = Instant::now();
    run(sub)?;
    Ok((start.elapsed().as_secs_f64() * (n as f64 / sub as f64) * sweeps as f64, true))
}

/// Time indicator sweeps with and without the reduction over a grid of
/// series counts.
pub fn bench_reduction(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let BenchConfig { n, k, sweeps, budget, seed, .. } = *cfg;
    let states = bench_states(n, k);
    let support = states.support_size();
    let mut mass = vec![0.05 / (support - 1) as f64; support];
    mass[0] = 0.95;
    let prior = IidPrior::new(&mass)?;
    let mut phi = DMatrix::zeros(k, 2 * k);
    for i in 0..k {
        phi[(i, 2 * i)] = 1.0;
        phi[(i, 2 * i + 1)] = 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = Indicators::new(
        (0..n).map(|t| if t > 0 && t % 50 == 0 { 1 + (t / 50) % (support - 1) } else { 0 }).collect(),
        support,
    )?;
    let (factors, _) = simulate(&states, &truth, &mut rng)?;
    let mut rows = Vec::new();
    for &p in &cfg.p_grid {
        let theta = DMatrix::from_fn(p, k, |j, i| if j == i { 1.0 } else if j < i { 0.0 } else { rng.random_range(-1.0..1.0) });
        let sigma_sd = DVector::from_fn(p, |_, _| rng.random_range(0.5..1.5));
        let noise = DMatrix::from_fn(n, p, |_, j| sigma_sd[j] * rng.sample::<f64, _>(rand_distr::StandardNormal));
        let obs = &factors * theta.transpose() + noise;
        let sigma2 = sigma_sd.map(|s| s * s);

        let sub_states = |len: usize| bench_states(len, k);
        let mut draw_rng = ChaCha8Rng::seed_from_u64(seed ^ p as u64);
        let (naive, naive_est) = timed(sweeps, n, budget, |len| {
            let st = sub_states(len);
            let full = FactorModel::new(&st, &phi, &theta, &sigma_sd)?;
            let y = obs.rows(0, len).into_owned();
            let cur = Indicators::null(len, support);
            sample_indicators(&full, &prior, &y, &cur, &mut draw_rng).map(|_| ())
        })?;
        let (reduced, reduced_est) = timed(sweeps, n, budget, |len| {
            let st = sub_states(len);
            let y = obs.rows(0, len).into_owned();
            let red = reduce(&theta, &sigma2, &y)?;
            let model = ReducedModel {
                states: &st,
                phi: &phi,
                reduced: &red,
            };
            let cur = Indicators::null(len, support);
            sample_indicators(&model, &prior, &red.y, &cur, &mut draw_rng).map(|_| ())
        })?;
        rows.push(BenchRow {
            p,
            naive_seconds: naive,
            naive_estimated: naive_est,
            reduced_seconds: reduced,
            reduced_estimated: reduced_est,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `log y` on `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
