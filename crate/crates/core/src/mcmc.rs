//! The nine-step Gibbs/Metropolis sampler for the common-component model,
//! chain storage, proposal adaptation and inefficiency factors.
//!
//! Steps, in order: indicators on the reduced model; the state jointly with
//! the coefficients; break sizes; `rho`, `sigma_f` and `lambda` by
//! random-walk Metropolis with the state integrated out; inclusion flags
//! with state and coefficients integrated out (followed by a fresh draw of
//! both); `Theta` and `kappa`; idiosyncratic variances.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};

use crate::dfm::{
    decode_label, log_beta_density, log_stretched_beta_density, theta_fixed_value, theta_free, BreakKind,
    ComponentParams, DfmSpec, DfmStates, InvGamma, ThetaMode,
};
use crate::error::{Error, Result};
use crate::k_sampler::sample_indicators;
use crate::kalman::{augmented_filter, draw_from_prior, simulation_smoother, WithCoefficients};
use crate::linalg::sample_from_precision;
use crate::reduction::{marginal_state_loglik, reduce, ReducedModel, ReducedObservations};
use crate::ssm::{simulate, Indicators};

/// Target acceptance rate of the scalar random-walk proposals.
pub const TARGET_ACCEPTANCE: f64 = 0.44;
/// Robbins-Monro gain on the log proposal scale.
pub const ADAPT_GAIN: f64 = 3.0;

/// Robbins-Monro update of a random-walk scale toward the target acceptance
/// rate; the step on `log scale` shrinks like `1 / iteration`.
pub fn adapt_rwmh(scale: f64, accepted: bool, iteration: usize) -> f64 {
    let j = iteration.max(1) as f64;
    let hit = if accepted { 1.0 } else { 0.0 };
    scale * (ADAPT_GAIN * (hit - TARGET_ACCEPTANCE) / j).exp()
}

/// Inefficiency factor `1 + 2 sum_l w(l / L) rho_l` with Parzen weights and
/// bandwidth `L = floor(2 N^{1/3})`.
pub fn inefficiency_factor(chain: &[f64]) -> Result<f64> {
    let n = chain.len();
    if n < 100 {
        return Err(Error::UndefinedInefficiency(format!("chain of length {n} is shorter than 100")));
    }
    let mean = chain.iter().sum::<f64>() / n as f64;
    let c0 = chain.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if !(c0 > 0.0) {
        return Err(Error::UndefinedInefficiency("chain has zero variance".into()));
    }
    let bandwidth = (2.0 * (n as f64).cbrt()).floor() as usize;
    let mut total = 1.0;
    for l in 1..=bandwidth.min(n - 1) {
        let z = l as f64 / bandwidth as f64;
        let w = if z <= 0.5 { 1.0 - 6.0 * z * z + 6.0 * z * z * z } else { 2.0 * (1.0 - z).powi(3) };
        let cl = (0..n - l).map(|i| (chain[i] - mean) * (chain[i + l] - mean)).sum::<f64>() / n as f64;
        total += 2.0 * w * cl / c0;
    }
    Ok(total)
}

/// Shape and rate of an inverted-gamma posterior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IgPosterior {
    pub shape: f64,
    pub rate: f64,
}

impl IgPosterior {
    pub fn mean(&self) -> f64 {
        self.rate / (self.shape - 1.0)
    }
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let g = Gamma::new(self.shape, 1.0 / self.rate).map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(1.0 / g.sample(rng))
    }
}

/// Posterior of a squared break size given the standardized innovations at
/// the times that selected it.
pub fn eta_posterior(prior: InvGamma, residuals: &[f64]) -> IgPosterior {
    IgPosterior {
        shape: prior.shape() + residuals.len() as f64 / 2.0,
        rate: prior.rate() + residuals.iter().map(|r| r * r).sum::<f64>() / 2.0,
    }
}

/// Posterior of an idiosyncratic variance from its sum of squared residuals.
pub fn sigma_posterior(prior: InvGamma, ssr: f64, n: usize) -> IgPosterior {
    IgPosterior {
        shape: prior.shape() + n as f64 / 2.0,
        rate: prior.rate() + ssr / 2.0,
    }
}

/// Shape and rate of the Gamma posterior of a loading precision.
pub fn kappa_posterior(nu: f64, s: f64, free_loadings: &[f64]) -> (f64, f64) {
    (
        nu / 2.0 + free_loadings.len() as f64 / 2.0,
        s / 2.0 + free_loadings.iter().map(|v| v * v).sum::<f64>() / 2.0,
    )
}

/// `Pr(flag = 1)` from the two marginal log likelihoods and the prior.
pub fn inclusion_probability(loglik_in: f64, loglik_out: f64, prior: f64) -> f64 {
    let a = prior.ln() + loglik_in;
    let b = (1.0 - prior).ln() + loglik_out;
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    ea / (ea + eb)
}

/// Gaussian posterior of one row of `Theta` given the factors.
#[derive(Clone, Debug)]
pub struct ThetaRowPosterior {
    /// Columns of the row that are sampled.
    pub free: Vec<usize>,
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

/// Row `j` of `Theta`: regression of series j on the factors with noise
/// variance `sigma2`, prior precision `kappa[l]` on free entry l.
pub fn theta_row_posterior(
    j: usize,
    ftf: &DMatrix<f64>,
    fty: &DVector<f64>,
    sigma2: f64,
    kappa: &DVector<f64>,
) -> ThetaRowPosterior {
    let k = ftf.nrows();
    let free: Vec<usize> = (0..k).filter(|&l| theta_free(j, l)).collect();
    let fixed: Vec<usize> = (0..k).filter(|&l| !theta_free(j, l)).collect();
    let q = free.len();
    let mut prec = DMatrix::zeros(q, q);
    let mut rhs = DVector::zeros(q);
    for (a, &l) in free.iter().enumerate() {
        let mut v = fty[l];
        for &c in &fixed {
            v -= ftf[(l, c)] * theta_fixed_value(j, c);
        }
        rhs[a] = v / sigma2;
        for (b, &c) in free.iter().enumerate() {
            prec[(a, b)] = ftf[(l, c)] / sigma2;
        }
        prec[(a, a)] += kappa[l];
    }
    let mean = if q == 0 {
        DVector::zeros(0)
    } else {
        prec.clone().cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(|| DVector::zeros(q))
    };
    ThetaRowPosterior {
        free,
        mean,
        precision: prec,
    }
}

/// Which scalar a random-walk proposal moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Hyper {
    Rho,
    SigmaF,
    Lambda,
}

impl Hyper {
    pub const ALL: [Hyper; 3] = [Hyper::Rho, Hyper::SigmaF, Hyper::Lambda];

    pub fn name(&self) -> &'static str {
        match self {
            Hyper::Rho => "rho",
            Hyper::SigmaF => "sigma_f",
            Hyper::Lambda => "lambda",
        }
    }
}

/// Proposal scales and acceptance counts for one random-walk parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub scale: f64,
    pub accepted: usize,
    pub proposed: usize,
}

/// Current values of every unknown.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub indicators: Indicators,
    /// n x m.
    pub x: DMatrix<f64>,
    /// `(beta_1, mu_{1,1}, ..., beta_k, mu_{k,1})`.
    pub beta: DVector<f64>,
    /// `k * k_r` inclusion flags, component-major.
    pub inclusion: Vec<bool>,
    pub components: Vec<ComponentParams>,
    /// p x k.
    pub theta: DMatrix<f64>,
    pub kappa: DVector<f64>,
    /// Idiosyncratic variances.
    pub sigma2: DVector<f64>,
    /// Indexed `[hyper][component]`.
    pub proposals: Vec<Vec<Proposal>>,
    /// Loading shears, one per component pair `(i, l)` with `i < l`.
    pub shears: Vec<Proposal>,
    pub iteration: usize,
}

impl ChainState {
    /// Starting values: prior-centered component parameters, principal
    /// component loadings rotated to satisfy the identification restriction,
    /// and residual variances of the rank-k fit.
    pub fn initial(spec: &DfmSpec, obs: &DMatrix<f64>, theta: Option<&DMatrix<f64>>) -> Result<Self> {
        let (n, p) = obs.shape();
        let k = spec.k;
        if n != spec.n() {
            return Err(Error::dim("observation rows", spec.n(), n));
        }
        if p < k {
            return Err(Error::InvalidParameter(format!("{p} series cannot carry {k} components")));
        }
        let pr = &spec.priors;
        let comp = ComponentParams {
            rho: pr.rho_alpha / (pr.rho_alpha + pr.rho_beta),
            lambda: 0.5 * (pr.lambda_a + pr.lambda_b),
            sigma_f: pr.sigma_f.mean_of_scale(),
            eta: [0, 1, 2, 3].map(|w| pr.eta(w).mean_of_scale()),
        };
        let centered = center_columns(obs);
        let theta = match theta {
            Some(t) => t.clone(),
            None => identified_pca_loadings(&centered, k)?,
        };
        let fit = least_squares_factors(&centered, &theta)?;
        let resid = &centered - &fit * theta.transpose();
        let sigma2 = DVector::from_fn(p, |j, _| {
            let v = resid.column(j).norm_squared() / n as f64;
            v.max(1e-8)
        });
        Ok(Self {
            indicators: Indicators::null(n, spec.support_size()),
            x: DMatrix::zeros(n, spec.m()),
            beta: DVector::zeros(spec.n_coef()),
            inclusion: vec![true; k * spec.k_r()],
            components: vec![comp; k],
            theta,
            kappa: DVector::from_element(k, 1.0),
            sigma2,
            proposals: vec![
                vec![
                    Proposal {
                        scale: 0.5,
                        accepted: 0,
                        proposed: 0
                    };
                    k
                ];
                3
            ],
            shears: initial_shears(k),
            iteration: 0,
        })
    }

    /// Trend (level) of each component, n x k.
    pub fn trend(&self) -> DMatrix<f64> {
        let k = self.components.len();
        DMatrix::from_fn(self.x.nrows(), k, |t, i| self.x[(t, 4 * i + 2)])
    }

    /// Cycle plus regression of each component, n x k.
    pub fn seasonal(&self) -> DMatrix<f64> {
        let k = self.components.len();
        DMatrix::from_fn(self.x.nrows(), k, |t, i| self.x[(t, 4 * i)])
    }
}

fn initial_shears(k: usize) -> Vec<Proposal> {
    vec![
        Proposal {
            scale: 0.05,
            accepted: 0,
            proposed: 0
        };
        k * k.saturating_sub(1) / 2
    ]
}

fn center_columns(obs: &DMatrix<f64>) -> DMatrix<f64> {
    let n = obs.nrows() as f64;
    let mut out = obs.clone();
    for mut col in out.column_iter_mut() {
        let m = col.sum() / n;
        col.add_scalar_mut(-m);
    }
    out
}

/// Leading k principal directions `V`, rotated to `V (V_{1:k})^{-1}` so the
/// top k x k block is the identity.
fn identified_pca_loadings(centered: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let p = centered.ncols();
    let gram = centered.transpose() * centered;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let v = DMatrix::from_fn(p, k, |j, i| eig.eigenvectors[(j, order[i])]);
    let top = v.rows(0, k).into_owned();
    match top.try_inverse() {
        Some(inv) if inv.iter().all(|x| x.is_finite()) && inv.amax() < 1e6 => Ok(&v * inv),
        _ => Ok(DMatrix::from_fn(p, k, |j, i| if j == i { 1.0 } else if theta_free(j, i) { 0.0 } else { 0.0 })),
    }
}

fn least_squares_factors(obs: &DMatrix<f64>, theta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ttt = theta.transpose() * theta;
    let chol = ttt.cholesky().ok_or(Error::ReductionRank)?;
    Ok((chol.solve(&(theta.transpose() * obs.transpose()))).transpose())
}

/// Options that change the sampler's behavior rather than the model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepOptions {
    /// Adapt random-walk scales.
    pub adapt: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { adapt: true }
    }
}

fn tag<T>(step: usize, name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Sweep {
        step,
        name,
        source: Box::new(e),
    })
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(v: f64) -> f64 {
    (v / (1.0 - v)).ln()
}

/// Map a parameter to its unconstrained scale and back, with the log
/// Jacobian `log |dv/du|` up to a constant.
fn to_free(h: Hyper, v: f64, spec: &DfmSpec) -> f64 {
    let pr = &spec.priors;
    match h {
        Hyper::Rho => logit(v),
        Hyper::SigmaF => v.ln(),
        Hyper::Lambda => logit((v - pr.lambda_a) / (pr.lambda_b - pr.lambda_a)),
    }
}

fn from_free(h: Hyper, u: f64, spec: &DfmSpec) -> (f64, f64) {
    let pr = &spec.priors;
    match h {
        Hyper::Rho => {
            let v = logistic(u);
            (v, v.ln() + (1.0 - v).ln())
        }
        Hyper::SigmaF => (u.exp(), u),
        Hyper::Lambda => {
            let z = logistic(u);
            (pr.lambda_a + z * (pr.lambda_b - pr.lambda_a), z.ln() + (1.0 - z).ln())
        }
    }
}

fn component_log_prior(h: Hyper, c: &ComponentParams, spec: &DfmSpec) -> f64 {
    let pr = &spec.priors;
    match h {
        Hyper::Rho => log_beta_density(c.rho, pr.rho_alpha, pr.rho_beta),
        Hyper::SigmaF => pr.sigma_f.log_density_of_scale(c.sigma_f),
        Hyper::Lambda => log_stretched_beta_density(c.lambda, pr.lambda_alpha, pr.lambda_beta, pr.lambda_a, pr.lambda_b),
    }
}

fn get(h: Hyper, c: &ComponentParams) -> f64 {
    match h {
        Hyper::Rho => c.rho,
        Hyper::SigmaF => c.sigma_f,
        Hyper::Lambda => c.lambda,
    }
}

fn set(h: Hyper, c: &mut ComponentParams, v: f64) {
    match h {
        Hyper::Rho => c.rho = v,
        Hyper::SigmaF => c.sigma_f = v,
        Hyper::Lambda => c.lambda = v,
    }
}

fn state_loglik(spec: &DfmSpec, comps: &[ComponentParams], beta: &DVector<f64>, red: &ReducedObservations, phi: &DMatrix<f64>, ind: &Indicators) -> Result<f64> {
    let states = DfmStates::new(spec, comps)?;
    let with_beta = WithCoefficients { model: &states, beta };
    marginal_state_loglik(&with_beta, phi, red, ind)
}

/// One pass of the nine steps. `obs` is the n x p data matrix (centered in
/// fixed-basis mode).
pub fn gibbs_sweep<R: Rng + ?Sized>(
    state: &mut ChainState,
    obs: &DMatrix<f64>,
    spec: &DfmSpec,
    opts: SweepOptions,
    rng: &mut R,
) -> Result<()> {
    let k = spec.k;
    let kr = spec.k_r();
    let (n, p) = obs.shape();
    let phi = spec.phi();
    state.iteration += 1;

    // 1. indicators, state integrated out, on the reduced model
    let red = tag(1, "indicators", reduce(&state.theta, &state.sigma2, obs))?;
    {
        let states = tag(1, "indicators", DfmStates::new(spec, &state.components))?;
        let with_beta = WithCoefficients { model: &states, beta: &state.beta };
        let model = ReducedModel { states: &with_beta, phi: &phi, reduced: &red };
        let prior = spec.indicator_prior();
        state.indicators = tag(1, "indicators", sample_indicators(&model, &prior, &red.y, &state.indicators, rng))?;
    }

    // 2. state and coefficients jointly
    {
        let states = tag(2, "state", DfmStates::new(spec, &state.components))?;
        let model = ReducedModel { states: &states, phi: &phi, reduced: &red };
        let prior = spec.coef_prior(&state.inclusion);
        let (x, beta) = tag(2, "state", crate::kalman::joint_state_beta_draw(&model, &state.indicators, &red.y, &prior, rng))?;
        state.x = x;
        state.beta = beta;
    }

    // 3. break sizes
    {
        let mut resid: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); 4]; k];
        for t in 1..n {
            if let Some(b) = decode_label(state.indicators.get(t), k) {
                let i = b.component;
                let o = 4 * i;
                let sf = state.components[i].sigma_f;
                let r = match b.kind {
                    BreakKind::Level => (state.x[(t, o + 2)] - state.x[(t - 1, o + 2)] - state.x[(t - 1, o + 3)]) / sf,
                    BreakKind::Slope => (state.x[(t, o + 3)] - state.x[(t - 1, o + 3)]) / sf,
                };
                let which = if b.kind == BreakKind::Level { b.size } else { 2 + b.size };
                resid[i][which].push(r);
            }
        }
        for i in 0..k {
            for w in 0..4 {
                let post = eta_posterior(spec.priors.eta(w), &resid[i][w]);
                state.components[i].eta[w] = tag(3, "break sizes", post.draw(rng))?.sqrt();
            }
        }
    }

    // 4-6. rho, sigma_f, lambda by random walk, state integrated out
    let mut current = tag(4, "rho", state_loglik(spec, &state.components, &state.beta, &red, &phi, &state.indicators))?;
    for (hi, &h) in Hyper::ALL.iter().enumerate() {
        let step = 4 + hi;
        for i in 0..k {
            let old = state.components[i];
            let prop = &state.proposals[hi][i];
            let u = to_free(h, get(h, &old), spec);
            let (_, log_jac_old) = from_free(h, u, spec);
            let u_new = u + prop.scale * rng.sample::<f64, _>(StandardNormal);
            let (v_new, log_jac_new) = from_free(h, u_new, spec);
            let mut cand = state.components.clone();
            set(h, &mut cand[i], v_new);
            let lp_new = component_log_prior(h, &cand[i], spec);
            let accept = if lp_new.is_finite() && v_new.is_finite() {
                let ll_new = match state_loglik(spec, &cand, &state.beta, &red, &phi, &state.indicators) {
                    Ok(v) => v,
                    Err(e) if e.is_numerical() => f64::NEG_INFINITY,
                    Err(e) => return Err(tag::<()>(step, h.name(), Err(e)).unwrap_err()),
                };
                let log_ratio = ll_new + lp_new + log_jac_new - current - component_log_prior(h, &old, spec) - log_jac_old;
                let ok = rng.random::<f64>().ln() < log_ratio;
                if ok {
                    current = ll_new;
                }
                ok
            } else {
                false
            };
            if accept {
                state.components = cand;
            }
            let prop = &mut state.proposals[hi][i];
            prop.proposed += 1;
            if accept {
                prop.accepted += 1;
            }
            if opts.adapt {
                prop.scale = adapt_rwmh(prop.scale, accept, state.iteration);
            }
        }
    }

    // 7. inclusion flags with state and coefficients integrated out, then a
    // fresh draw of both given the new flags
    {
        let states = tag(7, "inclusion", DfmStates::new(spec, &state.components))?;
        let model = ReducedModel { states: &states, phi: &phi, reduced: &red };
        let stats = tag(7, "inclusion", augmented_filter(&model, &state.indicators, &red.y))?;
        for i in 0..k {
            for j in 0..kr {
                let idx = i * kr + j;
                let mut flags = state.inclusion.clone();
                flags[idx] = true;
                let l_in = tag(7, "inclusion", stats.log_marginal(&spec.coef_prior(&flags)))?;
                flags[idx] = false;
                let l_out = tag(7, "inclusion", stats.log_marginal(&spec.coef_prior(&flags)))?;
                let prob = inclusion_probability(l_in, l_out, spec.priors.inclusion_prob);
                state.inclusion[idx] = rng.random::<f64>() < prob;
            }
        }
        let prior = spec.coef_prior(&state.inclusion);
        let post = tag(7, "inclusion", stats.posterior(&prior))?;
        state.beta = post.draw(&prior, rng);
        let with_beta = WithCoefficients { model: &states, beta: &state.beta };
        let model = ReducedModel { states: &with_beta, phi: &phi, reduced: &red };
        state.x = tag(7, "inclusion", simulation_smoother(&model, &state.indicators, &red.y, rng))?;
    }

    // 8. loadings and their precisions. The identification restriction
    // leaves column i free to absorb multiples of column l > i (factor l then
    // sheds the matching multiple of factor i); moves along that direction
    // are made with the state and coefficients integrated out, since the
    // regression below barely moves along it.
    if spec.theta_mode == ThetaMode::Unknown && k > 1 {
        let states = tag(8, "loadings", DfmStates::new(spec, &state.components))?;
        let prior = spec.coef_prior(&state.inclusion);
        let full_loglik = |theta: &DMatrix<f64>| -> Result<f64> {
            let red = reduce(theta, &state.sigma2, obs)?;
            let model = ReducedModel { states: &states, phi: &phi, reduced: &red };
            let stats = augmented_filter(&model, &state.indicators, &red.y)?;
            Ok(stats.log_marginal(&prior)? + crate::reduction::projection_loglik(theta, &state.sigma2, obs, &red)?)
        };
        let mut current = tag(8, "loadings", full_loglik(&state.theta))?;
        let mut moved = false;
        let mut pair = 0;
        for i in 0..k {
            for l in i + 1..k {
                let c = state.shears[pair].scale * rng.sample::<f64, _>(StandardNormal);
                let mut cand = state.theta.clone();
                let shift = state.theta.column(l) * c;
                let mut col = cand.column_mut(i);
                col += shift;
                let log_prior_ratio: f64 = (0..p)
                    .filter(|&j| theta_free(j, i))
                    .map(|j| -0.5 * state.kappa[i] * (cand[(j, i)].powi(2) - state.theta[(j, i)].powi(2)))
                    .sum();
                let cand_loglik = match full_loglik(&cand) {
                    Ok(v) => v,
                    Err(e) if e.is_numerical() || matches!(e, Error::ReductionRank) => f64::NEG_INFINITY,
                    Err(e) => return Err(tag::<()>(8, "loadings", Err(e)).unwrap_err()),
                };
                let accept = rng.random::<f64>().ln() < cand_loglik - current + log_prior_ratio;
                if accept {
                    state.theta = cand;
                    current = cand_loglik;
                    moved = true;
                }
                let prop = &mut state.shears[pair];
                prop.proposed += 1;
                if accept {
                    prop.accepted += 1;
                }
                if opts.adapt {
                    prop.scale = adapt_rwmh(prop.scale, accept, state.iteration);
                }
                pair += 1;
            }
        }
        if moved {
            let red = tag(8, "loadings", reduce(&state.theta, &state.sigma2, obs))?;
            let model = ReducedModel { states: &states, phi: &phi, reduced: &red };
            let (x, beta) = tag(8, "loadings", crate::kalman::joint_state_beta_draw(&model, &state.indicators, &red.y, &prior, rng))?;
            state.x = x;
            state.beta = beta;
        }
    }

    let factors = &state.x * phi.transpose();
    let ftf = factors.transpose() * &factors;

    if spec.theta_mode == ThetaMode::Unknown {
        let fty = factors.transpose() * obs;
        for j in 0..p {
            let post = theta_row_posterior(j, &ftf, &fty.column(j).into_owned(), state.sigma2[j], &state.kappa);
            for (l, _) in (0..k).enumerate().filter(|&(l, _)| !theta_free(j, l)) {
                state.theta[(j, l)] = theta_fixed_value(j, l);
            }
            if post.free.is_empty() {
                continue;
            }
            let chol = tag(8, "loadings", post.precision.clone().cholesky().ok_or(Error::DegenerateRegression))?;
            let draw = sample_from_precision(rng, &post.mean, &chol);
            for (a, &l) in post.free.iter().enumerate() {
                state.theta[(j, l)] = draw[a];
            }
        }
        for l in 0..k {
            let free: Vec<f64> = (0..p).filter(|&j| theta_free(j, l)).map(|j| state.theta[(j, l)]).collect();
            let (shape, rate) = kappa_posterior(spec.priors.kappa_nu, spec.priors.kappa_s, &free);
            let g = tag(8, "loadings", Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Numerical(e.to_string())))?;
            state.kappa[l] = g.sample(rng);
        }
    }

    // 9. idiosyncratic variances
    let resid = obs - &factors * state.theta.transpose();
    for j in 0..p {
        let post = sigma_posterior(spec.priors.sigma_m, resid.column(j).norm_squared(), n);
        state.sigma2[j] = tag(9, "noise variances", post.draw(rng))?;
    }
    Ok(())
}

/// Length and thinning of a chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub adapt: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            burn_in: 1000,
            thin: 1,
            seed: 1,
            adapt: true,
        }
    }
}

/// Stored draws and running summaries of one chain.
#[derive(Clone, Debug)]
pub struct ChainOutput {
    /// Names of the scalar parameters, in column order of `draws`.
    pub names: Vec<String>,
    /// One row per kept iteration.
    pub draws: Vec<Vec<f64>>,
    /// Iteration number of each kept draw.
    pub kept_iterations: Vec<usize>,
    /// Label counts per time point over kept draws (n x support).
    pub label_counts: Vec<Vec<u32>>,
    /// Kept trend draws, each n x k.
    pub trend_draws: Vec<DMatrix<f64>>,
    /// Kept seasonal draws, each n x k.
    pub seasonal_draws: Vec<DMatrix<f64>>,
    /// Sum of kept loading draws (p x k).
    pub theta_sum: DMatrix<f64>,
    /// Accepted and proposed counts per random-walk parameter.
    pub acceptance: Vec<(String, usize, usize)>,
    pub k: usize,
}

impl ChainOutput {
    pub fn kept(&self) -> usize {
        self.draws.len()
    }

    /// Posterior mean of the loadings.
    pub fn theta_mean(&self) -> DMatrix<f64> {
        &self.theta_sum / self.kept().max(1) as f64
    }

    /// Inefficiency factor of every recorded parameter; `None` where it is
    /// undefined (short or constant chains).
    pub fn inefficiency_factors(&self) -> Vec<Option<f64>> {
        (0..self.names.len())
            .map(|c| {
                let chain: Vec<f64> = self.draws.iter().map(|r| r[c]).collect();
                inefficiency_factor(&chain).ok()
            })
            .collect()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.names.iter().position(|n| n == name)?;
        Some(self.draws.iter().map(|r| r[c]).collect())
    }

    /// `Pr(level break)` and `Pr(slope break)` for component i at each t.
    pub fn break_probabilities(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        break_probabilities(&self.label_counts, self.kept(), self.k, i)
    }

    /// `Pr(any break at t)`.
    pub fn any_break_probability(&self) -> Vec<f64> {
        any_break_probability(&self.label_counts, self.kept())
    }

    pub fn mean_path(draws: &[DMatrix<f64>]) -> Option<DMatrix<f64>> {
        let first = draws.first()?;
        let mut sum = DMatrix::zeros(first.nrows(), first.ncols());
        for d in draws {
            sum += d;
        }
        Some(sum / draws.len() as f64)
    }
}

/// Level and slope break probabilities of component i from label counts
/// over `kept` draws.
pub fn break_probabilities(counts: &[Vec<u32>], kept: usize, k: usize, i: usize) -> (Vec<f64>, Vec<f64>) {
    let kept = kept.max(1) as f64;
    let mut level = vec![0.0; counts.len()];
    let mut slope = vec![0.0; counts.len()];
    for (t, row) in counts.iter().enumerate() {
        for (label, &c) in row.iter().enumerate() {
            if let Some(b) = decode_label(label, k) {
                if b.component == i {
                    match b.kind {
                        BreakKind::Level => level[t] += c as f64 / kept,
                        BreakKind::Slope => slope[t] += c as f64 / kept,
                    }
                }
            }
        }
    }
    (level, slope)
}

/// Probability of a non-null label at each t.
pub fn any_break_probability(counts: &[Vec<u32>], kept: usize) -> Vec<f64> {
    let kept = kept.max(1) as f64;
    counts.iter().map(|c| c.iter().skip(1).map(|&v| v as f64).sum::<f64>() / kept).collect()
}

/// Names of the scalar parameters recorded per draw.
pub fn parameter_names(spec: &DfmSpec, p: usize) -> Vec<String> {
    let mut names = Vec::new();
    for i in 1..=spec.k {
        for base in ["rho", "sigma_f", "lambda", "eta_mu1", "eta_mu2", "eta_delta1", "eta_delta2"] {
            names.push(format!("{base}[{i}]"));
        }
        for j in 1..=spec.k_r() {
            names.push(format!("beta[{i},{j}]"));
        }
        for j in 1..=spec.k_r() {
            names.push(format!("inclusion[{i},{j}]"));
        }
        names.push(format!("mu_init[{i}]"));
        if spec.theta_mode == ThetaMode::Unknown {
            names.push(format!("kappa[{i}]"));
        }
    }
    for j in 1..=p {
        names.push(format!("sigma_m[{j}]"));
    }
    names
}

fn record(state: &ChainState, spec: &DfmSpec) -> Vec<f64> {
    let mut row = Vec::new();
    for (i, c) in state.components.iter().enumerate() {
        row.extend([c.rho, c.sigma_f, c.lambda]);
        row.extend(c.eta);
        for j in 0..spec.k_r() {
            row.push(state.beta[spec.beta_index(i, j)]);
        }
        for j in 0..spec.k_r() {
            row.push(if state.inclusion[i * spec.k_r() + j] { 1.0 } else { 0.0 });
        }
        row.push(state.beta[spec.level_index(i)]);
        if spec.theta_mode == ThetaMode::Unknown {
            row.push(state.kappa[i]);
        }
    }
    row.extend(state.sigma2.iter().map(|v| v.sqrt()));
    row
}

/// Run a chain from `state`, keeping every `thin`-th draw after burn-in.
pub fn run_chain_from(
    mut state: ChainState,
    obs: &DMatrix<f64>,
    spec: &DfmSpec,
    cfg: RunConfig,
) -> Result<(ChainOutput, ChainState)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, p) = obs.shape();
    let mut out = ChainOutput {
        names: parameter_names(spec, p),
        draws: Vec::new(),
        kept_iterations: Vec::new(),
        label_counts: vec![vec![0; spec.support_size()]; n],
        trend_draws: Vec::new(),
        seasonal_draws: Vec::new(),
        theta_sum: DMatrix::zeros(p, spec.k),
        acceptance: Vec::new(),
        k: spec.k,
    };
    let thin = cfg.thin.max(1);
    let opts = SweepOptions { adapt: cfg.adapt };
    for it in 0..cfg.iterations {
        gibbs_sweep(&mut state, obs, spec, opts, &mut rng).map_err(|e| Error::Chain {
            iteration: it + 1,
            source: Box::new(e),
        })?;
        if it >= cfg.burn_in && (it - cfg.burn_in) % thin == 0 {
            out.draws.push(record(&state, spec));
            out.kept_iterations.push(it + 1);
            for (t, &l) in state.indicators.labels().iter().enumerate() {
                out.label_counts[t][l] += 1;
            }
            out.trend_draws.push(state.trend());
            out.seasonal_draws.push(state.seasonal());
            out.theta_sum += &state.theta;
        }
    }
    for (hi, h) in Hyper::ALL.iter().enumerate() {
        for i in 0..spec.k {
            let pr = &state.proposals[hi][i];
            out.acceptance.push((format!("{}[{}]", h.name(), i + 1), pr.accepted, pr.proposed));
        }
    }
    let mut pair = 0;
    for i in 0..spec.k {
        for l in i + 1..spec.k {
            let pr = &state.shears[pair];
            out.acceptance.push((format!("shear[{},{}]", i + 1, l + 1), pr.accepted, pr.proposed));
            pair += 1;
        }
    }
    Ok((out, state))
}

/// Run a chain from the default starting values.
pub fn run_chain(obs: &DMatrix<f64>, spec: &DfmSpec, theta: Option<&DMatrix<f64>>, cfg: RunConfig) -> Result<ChainOutput> {
    let state = ChainState::initial(spec, obs, theta)?;
    Ok(run_chain_from(state, obs, spec, cfg)?.0)
}

/// Draw every unknown and a data set from the joint prior. Used for
/// simulation-based checks of the sampler.
pub fn draw_from_joint_prior<R: Rng + ?Sized>(spec: &DfmSpec, p: usize, rng: &mut R) -> Result<(ChainState, DMatrix<f64>)> {
    let pr = &spec.priors;
    let k = spec.k;
    let kr = spec.k_r();
    let n = spec.n();
    let beta_dist = |a: f64, b: f64| Beta::new(a, b).map_err(|e| Error::InvalidParameter(e.to_string()));
    let ig_scale = |ig: InvGamma, rng: &mut R| -> Result<f64> {
        Ok(IgPosterior { shape: ig.shape(), rate: ig.rate() }.draw(rng)?.sqrt())
    };
    let mut components = Vec::with_capacity(k);
    for _ in 0..k {
        let rho = beta_dist(pr.rho_alpha, pr.rho_beta)?.sample(rng);
        let z = beta_dist(pr.lambda_alpha, pr.lambda_beta)?.sample(rng);
        let lambda = pr.lambda_a + z * (pr.lambda_b - pr.lambda_a);
        let sigma_f = ig_scale(pr.sigma_f, rng)?;
        let mut eta = [0.0; 4];
        for (w, e) in eta.iter_mut().enumerate() {
            *e = ig_scale(pr.eta(w), rng)?;
        }
        components.push(ComponentParams { rho, lambda, sigma_f, eta });
    }
    let inclusion: Vec<bool> = (0..k * kr).map(|_| rng.random::<f64>() < pr.inclusion_prob).collect();
    let beta = draw_from_prior(&spec.coef_prior(&inclusion), rng);
    let kappa_dist = Gamma::new(pr.kappa_nu / 2.0, 2.0 / pr.kappa_s).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let kappa = DVector::from_fn(k, |_, _| kappa_dist.sample(rng));
    let mut theta = DMatrix::zeros(p, k);
    for j in 0..p {
        for l in 0..k {
            theta[(j, l)] = if theta_free(j, l) {
                rng.sample::<f64, _>(StandardNormal) / kappa[l].sqrt()
            } else {
                theta_fixed_value(j, l)
            };
        }
    }
    let sigma2 = DVector::from_fn(p, |_, _| 0.0);
    let mut sigma2 = sigma2;
    for j in 0..p {
        sigma2[j] = IgPosterior { shape: pr.sigma_m.shape(), rate: pr.sigma_m.rate() }.draw(rng)?;
    }
    let prior = spec.indicator_prior();
    let mass = prior.mass();
    let labels: Vec<usize> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (l, w) in mass.iter().enumerate() {
                acc += w;
                if u < acc {
                    return l;
                }
            }
            0
        })
        .collect();
    let indicators = Indicators::new(labels, spec.support_size())?;
    let states = DfmStates::new(spec, &components)?;
    let with_beta = WithCoefficients { model: &states, beta: &beta };
    let (_, x) = simulate(&with_beta, &indicators, rng)?;
    let state = ChainState {
        indicators,
        x,
        beta,
        inclusion,
        components,
        theta,
        kappa,
        sigma2,
        proposals: vec![
            vec![
                Proposal {
                    scale: 0.5,
                    accepted: 0,
                    proposed: 0
                };
                k
            ];
            3
        ],
        shears: initial_shears(k),
        iteration: 0,
    };
    let obs = resimulate_observations(&state, spec, rng);
    Ok((state, obs))
}

/// Draw `y` given the state, loadings and noise variances.
pub fn resimulate_observations<R: Rng + ?Sized>(state: &ChainState, spec: &DfmSpec, rng: &mut R) -> DMatrix<f64> {
    let factors = &state.x * spec.phi().transpose();
    let mean = factors * state.theta.transpose();
    DMatrix::from_fn(mean.nrows(), mean.ncols(), |t, j| {
        mean[(t, j)] + state.sigma2[j].sqrt() * rng.sample::<f64, _>(StandardNormal)
    })
}
