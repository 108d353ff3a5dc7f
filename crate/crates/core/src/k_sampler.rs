//! Sampling the indicator sequence with the states integrated out.
//!
//! A backward pass summarizes the future observations as a Gaussian
//! quadratic form in the state,
//! `p(y_{t+1:n} | x_t, K) ∝ exp{-(x' Omega_t x - 2 mu_t' x) / 2}`. A forward
//! sweep then evaluates, for each candidate `K_t`, one filter step plus the
//! integral of that quadratic form against the filtered state, and draws
//! `K_t` from the normalized weights.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kalman::{filter_first, filter_step, obs_row, FilterState};
use crate::linalg::{chol_log_det, psd_sqrt, spd_factor, symmetrize};
use crate::ssm::{check_indicators, check_observations, Dims, Indicators, StateSpace};

/// `(Omega_t, mu_t)` for every time point, computed with the indicators fixed.
#[derive(Clone, Debug)]
pub struct BackwardCache {
    pub omega: Vec<DMatrix<f64>>,
    pub mu: Vec<DVector<f64>>,
}

/// Prior on one indicator given all the others.
pub trait IndicatorPrior {
    fn support_size(&self) -> usize;
    fn log_prior(&self, t: usize, label: usize, current: &Indicators) -> f64;
}

/// Indicators independent across time with a fixed categorical mass.
#[derive(Clone, Debug, PartialEq)]
pub struct IidPrior {
    log_mass: Vec<f64>,
}

impl IidPrior {
    pub fn new(mass: &[f64]) -> Result<Self> {
        if mass.is_empty() || mass.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("indicator prior masses must be finite and non-negative".into()));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("indicator prior masses sum to {total}, not 1")));
        }
        Ok(Self {
            log_mass: mass.iter().map(|w| w.ln()).collect(),
        })
    }

    pub fn mass(&self) -> Vec<f64> {
        self.log_mass.iter().map(|l| l.exp()).collect()
    }
}

impl IndicatorPrior for IidPrior {
    fn support_size(&self) -> usize {
        self.log_mass.len()
    }
    fn log_prior(&self, _t: usize, label: usize, _current: &Indicators) -> f64 {
        self.log_mass[label]
    }
}

/// Backward recursion for `(Omega_t, mu_t)`, starting from zero at the last
/// time point.
pub fn backward_pass<M: StateSpace + ?Sized>(model: &M, ind: &Indicators, obs: &DMatrix<f64>) -> Result<BackwardCache> {
    check_indicators(model, ind)?;
    check_observations(model, obs)?;
    let dims = model.dims();
    let Dims { n, m, .. } = dims;
    let mut omega = vec![DMatrix::zeros(m, m); n];
    let mut mu = vec![DVector::zeros(m); n];
    let eye = DMatrix::<f64>::identity(m, m);
    for t in (0..n.saturating_sub(1)).rev() {
        let s = t + 1;
        let mats = model.system(s, ind.get(s));
        mats.check(dims, s)?;
        let (h_mat, f, gam) = (&mats.obs_loading, &mats.transition, &mats.state_noise);
        let y = obs_row(obs, s);
        let resid = &y - &mats.obs_offset;

        let j = h_mat * gam;
        let mut r = &j * j.transpose() + &mats.obs_noise * mats.obs_noise.transpose();
        symmetrize(&mut r);
        let r_chol = spd_factor(&r).ok_or(Error::SingularInnovation { t: s })?;
        let hf = h_mat * f;
        let mmat = r_chol.solve(&hf);
        let r_inv_j = r_chol.solve(&j);
        let b = &r_inv_j * gam.transpose();
        let e = &eye - b.transpose() * h_mat;
        let a = &e * f;
        let mut nmat = gam * (DMatrix::identity(gam.ncols(), gam.ncols()) - j.transpose() * &r_inv_j) * gam.transpose();
        symmetrize(&mut nmat);
        let c = psd_sqrt(&nmat);

        let om_next = &omega[s];
        let om_c = om_next * &c;
        let mut dmat = DMatrix::identity(c.ncols(), c.ncols()) + c.transpose() * &om_c;
        symmetrize(&mut dmat);
        let kmat = if c.ncols() == 0 {
            eye.clone()
        } else {
            let d_chol = dmat
                .cholesky()
                .ok_or_else(|| Error::Numerical(format!("I + C' Omega C not positive definite at t={s}")))?;
            // L = Omega C D^{-1} C'
            let l = &om_c * d_chol.solve(&c.transpose());
            &eye - l
        };
        let mut smat = &kmat * om_next;
        symmetrize(&mut smat);

        let d = &e * &mats.state_offset + b.transpose() * &resid;
        let q = om_next * d;
        let eps0 = &resid - h_mat * &mats.state_offset;

        let mut om = a.transpose() * &smat * &a + mmat.transpose() * &hf;
        symmetrize(&mut om);
        let mu_t = a.transpose() * (&kmat * (&mu[s] - q)) + mmat.transpose() * eps0;
        omega[t] = om;
        mu[t] = mu_t;
    }
    Ok(BackwardCache { omega, mu })
}

/// `log p(y_{t+1:n} | y_{1:t}, K)` up to a constant that does not depend on
/// `K_{1:t}`, given the cache entry and the filtered moments at t.
pub fn combine(omega: &DMatrix<f64>, mu: &DVector<f64>, filt_mean: &DVector<f64>, filt_cov: &DMatrix<f64>) -> Result<f64> {
    let m = filt_mean;
    let om_m = omega * m;
    let base = m.dot(&(&om_m - 2.0 * mu));
    let tmat = psd_sqrt(filt_cov);
    if tmat.ncols() == 0 {
        return Ok(-0.5 * base);
    }
    let o = mu - om_m;
    let mut z = tmat.transpose() * omega * &tmat;
    for i in 0..z.nrows() {
        z[(i, i)] += 1.0;
    }
    symmetrize(&mut z);
    let z_chol = z
        .cholesky()
        .ok_or_else(|| Error::Numerical("T' Omega T + I not positive definite".into()))?;
    let to = tmat.transpose() * o;
    let quad = to.dot(&z_chol.solve(&to));
    Ok(-0.5 * chol_log_det(&z_chol) - 0.5 * (base - quad))
}

/// Result of one forward sweep over the indicators.
#[derive(Clone, Debug)]
pub struct IndicatorSweep {
    pub indicators: Indicators,
    /// Normalized candidate masses per time point, when requested.
    pub pmfs: Option<Vec<Vec<f64>>>,
    /// Number of filter steps executed.
    pub filter_steps: usize,
}

fn candidate_logweights<M, P>(
    model: &M,
    prior: &P,
    obs: &DMatrix<f64>,
    cache: &BackwardCache,
    current: &Indicators,
    t: usize,
    prev: Option<&FilterState>,
) -> Result<(Vec<f64>, Vec<Option<FilterState>>)>
where
    M: StateSpace + ?Sized,
    P: IndicatorPrior + ?Sized,
{
    let dims = model.dims();
    let y = obs_row(obs, t);
    let support = model.support_size();
    let mut logw = Vec::with_capacity(support);
    let mut states = Vec::with_capacity(support);
    for s in 0..support {
        let lp = prior.log_prior(t, s, current);
        if lp == f64::NEG_INFINITY {
            logw.push(f64::NEG_INFINITY);
            states.push(None);
            continue;
        }
        let mats = model.system(t, s);
        mats.check(dims, t)?;
        let fs = match prev {
            None => filter_first(model, &mats, &y)?,
            Some(p) => filter_step(t, p, &mats, &y)?,
        };
        let future = combine(&cache.omega[t], &cache.mu[t], &fs.filt_mean, &fs.filt_cov)?;
        logw.push(fs.loglik + future + lp);
        states.push(Some(fs));
    }
    Ok((logw, states))
}

/// Normalize log weights with max subtraction.
pub fn normalize_log_weights(logw: &[f64]) -> Option<Vec<f64>> {
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let w: Vec<f64> = logw.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Some(w.into_iter().map(|v| v / total).collect())
}

fn draw_categorical<R: Rng + ?Sized>(pmf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    pmf.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn sweep<M, P, R>(
    model: &M,
    prior: &P,
    obs: &DMatrix<f64>,
    current: &Indicators,
    mut rng: Option<&mut R>,
    record: bool,
) -> Result<IndicatorSweep>
where
    M: StateSpace + ?Sized,
    P: IndicatorPrior + ?Sized,
    R: Rng + ?Sized,
{
    check_indicators(model, current)?;
    if prior.support_size() != model.support_size() {
        return Err(Error::dim("indicator prior support", model.support_size(), prior.support_size()));
    }
    let cache = backward_pass(model, current, obs)?;
    let n = model.dims().n;
    let mut ind = current.clone();
    let mut pmfs = record.then(Vec::new);
    let mut prev: Option<FilterState> = None;
    let mut steps = 0;
    for t in 0..n {
        let (logw, mut states) = candidate_logweights(model, prior, obs, &cache, &ind, t, prev.as_ref())?;
        steps += states.iter().filter(|s| s.is_some()).count();
        let pmf = normalize_log_weights(&logw).ok_or(Error::ImpossibleState { t })?;
        let chosen = match rng.as_deref_mut() {
            Some(r) => draw_categorical(&pmf, r),
            None => ind.get(t),
        };
        ind.set(t, chosen);
        prev = match states[chosen].take() {
            Some(fs) => Some(fs),
            None => return Err(Error::ImpossibleState { t }),
        };
        if let Some(p) = pmfs.as_mut() {
            p.push(pmf);
        }
    }
    Ok(IndicatorSweep {
        indicators: ind,
        pmfs,
        filter_steps: steps,
    })
}

/// One forward sweep drawing every `K_t` from `p(K_t | y, K_{s != t})`.
pub fn sample_indicators<M, P, R>(
    model: &M,
    prior: &P,
    obs: &DMatrix<f64>,
    current: &Indicators,
    rng: &mut R,
) -> Result<Indicators>
where
    M: StateSpace + ?Sized,
    P: IndicatorPrior + ?Sized,
    R: Rng + ?Sized,
{
    Ok(sweep(model, prior, obs, current, Some(rng), false)?.indicators)
}

/// Like [`sample_indicators`], also returning the per-t candidate masses
/// and the filter-step count.
pub fn sample_indicators_traced<M, P, R>(
    model: &M,
    prior: &P,
    obs: &DMatrix<f64>,
    current: &Indicators,
    rng: &mut R,
) -> Result<IndicatorSweep>
where
    M: StateSpace + ?Sized,
    P: IndicatorPrior + ?Sized,
    R: Rng + ?Sized,
{
    sweep(model, prior, obs, current, Some(rng), true)
}

/// Conditional masses `p(K_t | y, K_{s != t})` for every t with all other
/// indicators held at `current`.
pub fn candidate_pmfs<M, P>(model: &M, prior: &P, obs: &DMatrix<f64>, current: &Indicators) -> Result<Vec<Vec<f64>>>
where
    M: StateSpace + ?Sized,
    P: IndicatorPrior + ?Sized,
{
    let out = sweep::<M, P, rand_chacha::ChaCha8Rng>(model, prior, obs, current, None, true)?;
    Ok(out.pmfs.unwrap_or_default())
}
