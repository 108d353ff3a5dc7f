//! Forward filtering, state smoothing and posterior state simulation.
//!
//! The filter is the standard prediction/update recursion. The state
//! sampler uses the mean-correction scheme: draw a synthetic path from the
//! model, smooth both real and synthetic data, and shift the synthetic path
//! by the difference of the two smoothed means. Regression coefficients
//! entering the state offsets are handled by an augmented filter that
//! tracks how the predicted state mean moves with each coefficient.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{chol_log_det, sample_from_precision, spd_factor, standard_normal_vec, symmetrize};
use crate::ssm::{check_indicators, check_observations, simulate, Dims, Indicators, StateSpace, SystemMatrices};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Predicted state moments `(m_t, V_t)` or filtered moments `(m_{t|t}, V_{t|t})`.
#[derive(Clone, Debug)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Everything one filter step produces at time t.
#[derive(Clone, Debug)]
pub struct FilterState {
    /// `m_t`, predicted state mean.
    pub pred_mean: DVector<f64>,
    /// `V_t`, predicted state covariance.
    pub pred_cov: DMatrix<f64>,
    /// `eta_t = y_t - g_t - H_t m_t`.
    pub innovation: DVector<f64>,
    /// `R_t = H_t V_t H_t' + G_t G_t'`.
    pub innovation_cov: DMatrix<f64>,
    /// `m_{t|t}`.
    pub filt_mean: DVector<f64>,
    /// `V_{t|t}`.
    pub filt_cov: DMatrix<f64>,
    /// `log p(y_t | y_{1:t-1}, K_{1:t})`.
    pub loglik: f64,
    /// `J_t = R_t^{-1} H_t V_t`.
    pub gain: DMatrix<f64>,
    /// `R_t^{-1} H_t`.
    pub r_inv_h: DMatrix<f64>,
    /// `R_t^{-1} eta_t`.
    pub r_inv_eta: DVector<f64>,
}

impl FilterState {
    pub fn filtered(&self) -> Moments {
        Moments {
            mean: self.filt_mean.clone(),
            cov: self.filt_cov.clone(),
        }
    }
}

/// Propagate filtered moments at t-1 through the transition into t.
pub fn predict(prev_mean: &DVector<f64>, prev_cov: &DMatrix<f64>, mats: &SystemMatrices) -> Moments {
    let f = &mats.transition;
    let gamma = &mats.state_noise;
    let mean = &mats.state_offset + f * prev_mean;
    let mut cov = f * prev_cov * f.transpose() + gamma * gamma.transpose();
    symmetrize(&mut cov);
    Moments { mean, cov }
}

/// Measurement update of predicted moments with observation `y`.
pub fn update(t: usize, pred: Moments, mats: &SystemMatrices, y: &DVector<f64>) -> Result<FilterState> {
    let h = &mats.obs_loading;
    let g = &mats.obs_noise;
    let innovation = y - &mats.obs_offset - h * &pred.mean;
    let hv = h * &pred.cov;
    let mut r = &hv * h.transpose() + g * g.transpose();
    symmetrize(&mut r);
    let chol = spd_factor(&r).ok_or(Error::SingularInnovation { t })?;
    let r_inv_h = chol.solve(h);
    let r_inv_eta = chol.solve(&innovation);
    let gain = &r_inv_h * &pred.cov;
    let filt_mean = &pred.mean + hv.transpose() * &r_inv_eta;
    let mut filt_cov = &pred.cov - hv.transpose() * &gain;
    symmetrize(&mut filt_cov);
    let p = y.len() as f64;
    let loglik = -0.5 * (p * LN_2PI + chol_log_det(&chol) + innovation.dot(&r_inv_eta));
    Ok(FilterState {
        pred_mean: pred.mean,
        pred_cov: pred.cov,
        innovation,
        innovation_cov: r,
        filt_mean,
        filt_cov,
        loglik,
        gain,
        r_inv_h,
        r_inv_eta,
    })
}

/// One full filter step from the filtered state at t-1 to time t.
pub fn filter_step(t: usize, prev: &FilterState, mats: &SystemMatrices, y: &DVector<f64>) -> Result<FilterState> {
    update(t, predict(&prev.filt_mean, &prev.filt_cov, mats), mats, y)
}

/// First step: the prior `(m_1, V_1)` plays the role of the prediction.
pub fn filter_first<M: StateSpace + ?Sized>(model: &M, mats: &SystemMatrices, y: &DVector<f64>) -> Result<FilterState> {
    let pred = Moments {
        mean: model.initial_mean(),
        cov: model.initial_cov(),
    };
    update(0, pred, mats, y)
}

pub(crate) fn obs_row(obs: &DMatrix<f64>, t: usize) -> DVector<f64> {
    obs.row(t).transpose()
}

/// Run the filter over all time points.
pub fn filter<M: StateSpace + ?Sized>(model: &M, ind: &Indicators, obs: &DMatrix<f64>) -> Result<Vec<FilterState>> {
    check_indicators(model, ind)?;
    check_observations(model, obs)?;
    let dims = model.dims();
    let mut out: Vec<FilterState> = Vec::with_capacity(dims.n);
    for t in 0..dims.n {
        let mats = model.system(t, ind.get(t));
        mats.check(dims, t)?;
        let y = obs_row(obs, t);
        let fs = match out.last() {
            None => filter_first(model, &mats, &y)?,
            Some(prev) => filter_step(t, prev, &mats, &y)?,
        };
        out.push(fs);
    }
    Ok(out)
}

/// `log p(y | K, omega)`, the sum of one-step predictive log densities.
pub fn filter_loglik<M: StateSpace + ?Sized>(model: &M, ind: &Indicators, obs: &DMatrix<f64>) -> Result<f64> {
    check_indicators(model, ind)?;
    check_observations(model, obs)?;
    let dims = model.dims();
    let mut total = 0.0;
    let mut prev: Option<FilterState> = None;
    for t in 0..dims.n {
        let mats = model.system(t, ind.get(t));
        mats.check(dims, t)?;
        let y = obs_row(obs, t);
        let fs = match &prev {
            None => filter_first(model, &mats, &y)?,
            Some(p) => filter_step(t, p, &mats, &y)?,
        };
        total += fs.loglik;
        prev = Some(fs);
    }
    Ok(total)
}

/// Smoothed state moments `E(x_t | y)` and `Var(x_t | y)`.
#[derive(Clone, Debug)]
pub struct Smoothed {
    pub mean: DMatrix<f64>,
    pub cov: Vec<DMatrix<f64>>,
}

/// Fixed-interval smoother in backward-information form; never inverts a
/// state covariance, so singular `V_t` are fine.
pub fn smooth<M: StateSpace + ?Sized>(model: &M, ind: &Indicators, obs: &DMatrix<f64>, with_cov: bool) -> Result<Smoothed> {
    let states = filter(model, ind, obs)?;
    Ok(smooth_from(model, ind, &states, with_cov))
}

fn smooth_from<M: StateSpace + ?Sized>(model: &M, ind: &Indicators, states: &[FilterState], with_cov: bool) -> Smoothed {
    let Dims { n, m, .. } = model.dims();
    let mut mean = DMatrix::zeros(n, m);
    let mut cov = Vec::new();
    let mut r = DVector::zeros(m);
    let mut nn = DMatrix::zeros(m, m);
    for t in (0..n).rev() {
        let fs = &states[t];
        let mats = model.system(t, ind.get(t));
        let h = &mats.obs_loading;
        // L_t = F_{t+1} (I - J_t' H_t)
        let mut r_prev = h.transpose() * &fs.r_inv_eta;
        let mut n_prev = if with_cov { h.transpose() * &fs.r_inv_h } else { DMatrix::zeros(0, 0) };
        if t + 1 < n {
            let f_next = model.system(t + 1, ind.get(t + 1)).transition;
            let l = &f_next - &f_next * fs.gain.transpose() * h;
            r_prev += l.transpose() * &r;
            if with_cov {
                n_prev += l.transpose() * &nn * &l;
            }
        }
        let xhat = &fs.pred_mean + &fs.pred_cov * &r_prev;
        mean.set_row(t, &xhat.transpose());
        if with_cov {
            let mut v = &fs.pred_cov - &fs.pred_cov * &n_prev * &fs.pred_cov;
            symmetrize(&mut v);
            cov.push(v);
            nn = n_prev;
        }
        r = r_prev;
    }
    cov.reverse();
    Smoothed { mean, cov }
}

/// Draw the whole state path from `p(x | y, K, omega)`. Rows are time points.
pub fn simulation_smoother<M, R>(model: &M, ind: &Indicators, obs: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>>
where
    M: StateSpace + ?Sized,
    R: Rng + ?Sized,
{
    check_observations(model, obs)?;
    let (synthetic_obs, synthetic_states) = simulate(model, ind, rng)?;
    let real = smooth(model, ind, obs, false)?;
    let synthetic = smooth(model, ind, &synthetic_obs, false)?;
    Ok(synthetic_states - synthetic.mean + real.mean)
}

/// How regression coefficients enter the state equation:
/// `m_1 = m_1^0 + W_0 beta` and `h_t = h_t^0 + W_t beta`.
pub trait RegressionDesign {
    fn n_coef(&self) -> usize;
    /// `W_t` (m x q); `t = 0` is the initial-mean loading.
    fn design(&self, t: usize) -> DMatrix<f64>;
}

impl<T: RegressionDesign + ?Sized> RegressionDesign for &T {
    fn n_coef(&self) -> usize {
        (**self).n_coef()
    }
    fn design(&self, t: usize) -> DMatrix<f64> {
        (**self).design(t)
    }
}

/// A model whose state offsets are shifted by `W_t beta`.
pub struct WithCoefficients<'a, M: ?Sized> {
    pub model: &'a M,
    pub beta: &'a DVector<f64>,
}

impl<M> StateSpace for WithCoefficients<'_, M>
where
    M: StateSpace + RegressionDesign + ?Sized,
{
    fn dims(&self) -> Dims {
        self.model.dims()
    }
    fn support_size(&self) -> usize {
        self.model.support_size()
    }
    fn initial_mean(&self) -> DVector<f64> {
        self.model.initial_mean() + self.model.design(0) * self.beta
    }
    fn initial_cov(&self) -> DMatrix<f64> {
        self.model.initial_cov()
    }
    fn system(&self, t: usize, label: usize) -> SystemMatrices {
        let mut mats = self.model.system(t, label);
        if t > 0 {
            mats.state_offset += self.model.design(t) * self.beta;
        }
        mats
    }
}

/// Independent Gaussian prior on the coefficients. A zero variance pins the
/// coefficient at its mean (the spike of a spike-and-slab prior).
#[derive(Clone, Debug, PartialEq)]
pub struct CoefPrior {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

impl CoefPrior {
    pub fn free(&self) -> Vec<usize> {
        (0..self.var.len()).filter(|&j| self.var[j] > 0.0).collect()
    }
}

/// Sufficient statistics of the coefficient likelihood with the state
/// integrated out: `log p(y | beta) = base_loglik + b' beta - beta' Q beta / 2`.
#[derive(Clone, Debug)]
pub struct AugmentedStats {
    pub base_loglik: f64,
    pub info: DMatrix<f64>,
    pub score: DVector<f64>,
}

/// One pass of the augmented filter: the data filtered with `beta = 0`
/// plus one mean track per coefficient direction sharing the covariances.
pub fn augmented_filter<M>(model: &M, ind: &Indicators, obs: &DMatrix<f64>) -> Result<AugmentedStats>
where
    M: StateSpace + RegressionDesign + ?Sized,
{
    check_indicators(model, ind)?;
    check_observations(model, obs)?;
    let dims = model.dims();
    let q = model.n_coef();
    let mut info = DMatrix::zeros(q, q);
    let mut score = DVector::zeros(q);
    let mut base = 0.0;
    let mut prev: Option<FilterState> = None;
    let mut a_filt = DMatrix::zeros(dims.m, q);
    for t in 0..dims.n {
        let mats = model.system(t, ind.get(t));
        mats.check(dims, t)?;
        let y = obs_row(obs, t);
        let (fs, a_pred) = match &prev {
            None => (filter_first(model, &mats, &y)?, model.design(0)),
            Some(p) => (
                filter_step(t, p, &mats, &y)?,
                model.design(t) + &mats.transition * &a_filt,
            ),
        };
        let h = &mats.obs_loading;
        // X_t = H A_t; eta(beta) = eta_0 - X_t beta
        let ht_rinv_h = h.transpose() * &fs.r_inv_h;
        info += a_pred.transpose() * &ht_rinv_h * &a_pred;
        score += a_pred.transpose() * (h.transpose() * &fs.r_inv_eta);
        let hv = h * &fs.pred_cov;
        a_filt = &a_pred - hv.transpose() * (&fs.r_inv_h * &a_pred);
        base += fs.loglik;
        prev = Some(fs);
    }
    symmetrize(&mut info);
    Ok(AugmentedStats {
        base_loglik: base,
        info,
        score,
    })
}

/// Gaussian posterior of the free coefficients.
pub struct CoefPosterior {
    pub free: Vec<usize>,
    pub mean: DVector<f64>,
    pub precision: Cholesky<f64, Dyn>,
    log_det_precision: f64,
    quad: f64,
}

impl AugmentedStats {
    pub fn posterior(&self, prior: &CoefPrior) -> Result<CoefPosterior> {
        let free = prior.free();
        let k = free.len();
        let mut prec = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        let fixed: DVector<f64> = DVector::from_iterator(
            prior.mean.len(),
            (0..prior.mean.len()).map(|j| if prior.var[j] > 0.0 { 0.0 } else { prior.mean[j] }),
        );
        // fixed coefficients shift the score: b - Q beta_fixed
        let shifted = &self.score - &self.info * &fixed;
        for (a, &i) in free.iter().enumerate() {
            rhs[a] = shifted[i] + prior.mean[i] / prior.var[i];
            for (b, &j) in free.iter().enumerate() {
                prec[(a, b)] = self.info[(i, j)];
            }
            prec[(a, a)] += 1.0 / prior.var[i];
        }
        let chol = prec.clone().cholesky().ok_or(Error::DegenerateRegression)?;
        let mean = chol.solve(&rhs);
        Ok(CoefPosterior {
            free,
            quad: rhs.dot(&mean),
            log_det_precision: chol_log_det(&chol),
            mean,
            precision: chol,
        })
    }

    /// `log p(y | K, omega)` with the coefficients integrated out under `prior`.
    pub fn log_marginal(&self, prior: &CoefPrior) -> Result<f64> {
        let post = self.posterior(prior)?;
        let fixed: DVector<f64> = DVector::from_iterator(
            prior.mean.len(),
            (0..prior.mean.len()).map(|j| if prior.var[j] > 0.0 { 0.0 } else { prior.mean[j] }),
        );
        let fixed_term = self.score.dot(&fixed) - 0.5 * fixed.dot(&(&self.info * &fixed));
        let mut prior_term = 0.0;
        for &j in &post.free {
            prior_term += -0.5 * prior.var[j].ln() - 0.5 * prior.mean[j] * prior.mean[j] / prior.var[j];
        }
        Ok(self.base_loglik + fixed_term + prior_term - 0.5 * post.log_det_precision + 0.5 * post.quad)
    }
}

impl CoefPosterior {
    /// Full coefficient vector: free entries drawn, pinned entries at their prior mean.
    pub fn draw<R: Rng + ?Sized>(&self, prior: &CoefPrior, rng: &mut R) -> DVector<f64> {
        let free_draw = sample_from_precision(rng, &self.mean, &self.precision);
        self.assemble(prior, &free_draw)
    }

    pub fn assemble(&self, prior: &CoefPrior, free_values: &DVector<f64>) -> DVector<f64> {
        let mut beta = prior.mean.clone();
        for (a, &j) in self.free.iter().enumerate() {
            beta[j] = free_values[a];
        }
        beta
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.precision.inverse()
    }
}

/// Joint draw of the state path and the regression coefficients:
/// `beta` from its posterior with the state integrated out, then the state
/// given `beta`. `model` must carry zero coefficient offsets.
pub fn joint_state_beta_draw<M, R>(
    model: &M,
    ind: &Indicators,
    obs: &DMatrix<f64>,
    prior: &CoefPrior,
    rng: &mut R,
) -> Result<(DMatrix<f64>, DVector<f64>)>
where
    M: StateSpace + RegressionDesign + ?Sized,
    R: Rng + ?Sized,
{
    if prior.mean.len() != model.n_coef() || prior.var.len() != model.n_coef() {
        return Err(Error::dim("coefficient prior", model.n_coef(), prior.mean.len()));
    }
    let stats = augmented_filter(model, ind, obs)?;
    let beta = stats.posterior(prior)?.draw(prior, rng);
    let x = simulation_smoother(&WithCoefficients { model, beta: &beta }, ind, obs, rng)?;
    Ok((x, beta))
}

/// Draw from the coefficient prior (used when the data carry no information).
pub fn draw_from_prior<R: Rng + ?Sized>(prior: &CoefPrior, rng: &mut R) -> DVector<f64> {
    let z = standard_normal_vec(rng, prior.mean.len());
    DVector::from_iterator(
        z.len(),
        (0..z.len()).map(|j| prior.mean[j] + prior.var[j].sqrt() * z[j]),
    )
}
