//! The common-component changepoint model.
//!
//! Each of the `k` common components is
//! `f_{i,t} = psi_{i,t} + mu_{i,t} + w_t' beta_i`, with a damped stochastic
//! cycle `(psi, psi*)`, a level `mu` and a slope `delta`. Level and slope
//! receive innovations only when the indicator at that time selects a break
//! for that component. The state block of component i is
//! `(psi~, psi*, mu, delta)` with `psi~ = psi + w' beta_i`, so the regression
//! enters through the state offsets and the initial mean.
//!
//! Row `t` of the regressor matrix is the regressor vector entering `f_t`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::k_sampler::IidPrior;
use crate::kalman::{CoefPrior, RegressionDesign};
use crate::ssm::{Dims, StateSpace, SystemMatrices};

/// Degrees of freedom and scale of an inverted-gamma prior on a squared
/// scale: `x^2 ~ IG(nu / 2, s / 2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InvGamma {
    pub nu: f64,
    pub s: f64,
}

impl InvGamma {
    pub fn shape(&self) -> f64 {
        self.nu / 2.0
    }
    pub fn rate(&self) -> f64 {
        self.s / 2.0
    }
    /// Log density of the scale `x > 0`, including the Jacobian of `x -> x^2`.
    pub fn log_density_of_scale(&self, x: f64) -> f64 {
        if !(x > 0.0) || !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        let (a, b) = (self.shape(), self.rate());
        let v = x * x;
        a * b.ln() - ln_gamma(a) - (a + 1.0) * v.ln() - b / v + (2.0 * x).ln()
    }
    /// `E[x]` when `x^2 ~ IG(a, b)`.
    pub fn mean_of_scale(&self) -> f64 {
        let (a, b) = (self.shape(), self.rate());
        (ln_gamma(a - 0.5) - ln_gamma(a)).exp() * b.sqrt()
    }
}

/// How `Theta` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThetaMode {
    /// Fixed basis (empirical orthogonal functions of the centered data).
    Eof,
    /// Sampled, with unit diagonal and zeros above it.
    Unknown,
}

/// Prior hyperparameters. Defaults are the values used in the simulation study.
#[derive(Clone, Debug, PartialEq)]
pub struct Priors {
    pub rho_alpha: f64,
    pub rho_beta: f64,
    pub sigma_f: InvGamma,
    pub eta_mu1: InvGamma,
    pub eta_mu2: InvGamma,
    pub eta_delta1: InvGamma,
    pub eta_delta2: InvGamma,
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub sigma_m: InvGamma,
    pub beta_sd: f64,
    pub inclusion_prob: f64,
    pub kappa_nu: f64,
    pub kappa_s: f64,
    /// Prior probability of a break at any time point.
    pub break_prob: f64,
    /// Prior variance of the initial slopes and the initial levels.
    pub diffuse: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            rho_alpha: 15.0,
            rho_beta: 1.5,
            sigma_f: InvGamma { nu: 10.0, s: 0.1 },
            eta_mu1: InvGamma { nu: 3.0, s: 30.0 },
            eta_mu2: InvGamma { nu: 3.0, s: 300.0 },
            eta_delta1: InvGamma { nu: 3.0, s: 0.1 },
            eta_delta2: InvGamma { nu: 3.0, s: 0.4 },
            lambda_alpha: 2.0,
            lambda_beta: 2.0,
            lambda_a: 0.0,
            lambda_b: 4.0 * PI / 23.0,
            sigma_m: InvGamma { nu: 10.0, s: 0.1 },
            beta_sd: 3.0,
            inclusion_prob: 0.5,
            kappa_nu: 10.0,
            kappa_s: 0.01,
            break_prob: 0.05,
            diffuse: 1e6,
        }
    }
}

impl Priors {
    pub fn eta(&self, which: usize) -> InvGamma {
        [self.eta_mu1, self.eta_mu2, self.eta_delta1, self.eta_delta2][which]
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v > 0.0) || !v.is_finite() {
                bad.push(format!("{name} must be positive, got {v}"));
            }
        };
        positive("rho_alpha", self.rho_alpha);
        positive("rho_beta", self.rho_beta);
        for (name, ig) in [
            ("sigma_f", self.sigma_f),
            ("eta_mu1", self.eta_mu1),
            ("eta_mu2", self.eta_mu2),
            ("eta_delta1", self.eta_delta1),
            ("eta_delta2", self.eta_delta2),
            ("sigma_m", self.sigma_m),
        ] {
            positive(&format!("{name} nu"), ig.nu);
            positive(&format!("{name} s"), ig.s);
        }
        positive("lambda_alpha", self.lambda_alpha);
        positive("lambda_beta", self.lambda_beta);
        positive("beta_sd", self.beta_sd);
        positive("kappa_nu", self.kappa_nu);
        positive("kappa_s", self.kappa_s);
        positive("diffuse", self.diffuse);
        if !(self.lambda_b > self.lambda_a) {
            bad.push(format!("lambda interval ({}, {}) is empty", self.lambda_a, self.lambda_b));
        }
        if !(self.break_prob > 0.0 && self.break_prob < 1.0) {
            bad.push(format!("break probability must lie in (0, 1), got {}", self.break_prob));
        }
        if !(self.inclusion_prob > 0.0 && self.inclusion_prob < 1.0) {
            bad.push(format!("inclusion probability must lie in (0, 1), got {}", self.inclusion_prob));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Model structure shared by every parameter value.
#[derive(Clone, Debug)]
pub struct DfmSpec {
    pub k: usize,
    /// n x k_r; row t enters the components at time t.
    pub regressors: DMatrix<f64>,
    pub priors: Priors,
    pub theta_mode: ThetaMode,
}

impl DfmSpec {
    pub fn n(&self) -> usize {
        self.regressors.nrows()
    }
    pub fn k_r(&self) -> usize {
        self.regressors.ncols()
    }
    pub fn m(&self) -> usize {
        4 * self.k
    }
    pub fn support_size(&self) -> usize {
        4 * self.k + 1
    }
    /// Length of the coefficient vector `(beta_1, mu_{1,1}, ..., beta_k, mu_{k,1})`.
    pub fn n_coef(&self) -> usize {
        self.k * (self.k_r() + 1)
    }
    pub fn beta_index(&self, i: usize, j: usize) -> usize {
        i * (self.k_r() + 1) + j
    }
    pub fn level_index(&self, i: usize) -> usize {
        i * (self.k_r() + 1) + self.k_r()
    }

    /// `Phi`: picks `psi~ + mu` of every component.
    pub fn phi(&self) -> DMatrix<f64> {
        let mut phi = DMatrix::zeros(self.k, self.m());
        for i in 0..self.k {
            phi[(i, 4 * i)] = 1.0;
            phi[(i, 4 * i + 2)] = 1.0;
        }
        phi
    }

    pub fn indicator_prior(&self) -> IidPrior {
        IidPrior::new(&break_prior_masses(self.k, self.priors.break_prob)).expect("masses sum to one")
    }

    /// Gaussian prior of the coefficients given inclusion flags
    /// (`k * k_r`, component-major). Excluded coefficients are pinned at zero.
    pub fn coef_prior(&self, inclusion: &[bool]) -> CoefPrior {
        let q = self.n_coef();
        let mut var = DVector::zeros(q);
        for i in 0..self.k {
            for j in 0..self.k_r() {
                if inclusion[i * self.k_r() + j] {
                    var[self.beta_index(i, j)] = self.priors.beta_sd * self.priors.beta_sd;
                }
            }
            var[self.level_index(i)] = self.priors.diffuse;
        }
        CoefPrior {
            mean: DVector::zeros(q),
            var,
        }
    }
}

/// Prior mass on the indicator support: null first, then `pi / (4k)` for
/// each of the `4k` break states.
pub fn break_prior_masses(k: usize, pi: f64) -> Vec<f64> {
    let mut w = vec![pi / (4 * k) as f64; 4 * k + 1];
    w[0] = 1.0 - pi;
    w
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BreakKind {
    Level,
    Slope,
}

/// What an indicator value means: which component, level or slope, and
/// which of the two sizes (0 or 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BreakLabel {
    pub component: usize,
    pub kind: BreakKind,
    pub size: usize,
}

pub fn decode_label(label: usize, k: usize) -> Option<BreakLabel> {
    if label == 0 || label > 4 * k {
        return None;
    }
    let l = label - 1;
    let (kind, rest) = if l < 2 * k { (BreakKind::Level, l) } else { (BreakKind::Slope, l - 2 * k) };
    Some(BreakLabel {
        component: rest / 2,
        kind,
        size: rest % 2,
    })
}

pub fn encode_label(b: BreakLabel, k: usize) -> usize {
    let base = match b.kind {
        BreakKind::Level => 1,
        BreakKind::Slope => 1 + 2 * k,
    };
    base + 2 * b.component + b.size
}

/// Parameters of one common component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComponentParams {
    pub rho: f64,
    pub lambda: f64,
    pub sigma_f: f64,
    /// Break sizes `(level 1, level 2, slope 1, slope 2)` in units of `sigma_f`.
    pub eta: [f64; 4],
}

impl ComponentParams {
    /// `K^mu` and `K^delta` for this component under `label`.
    pub fn break_scales(&self, label: usize, component: usize, k: usize) -> (f64, f64) {
        match decode_label(label, k) {
            Some(b) if b.component == component => match b.kind {
                BreakKind::Level => (self.eta[b.size], 0.0),
                BreakKind::Slope => (0.0, self.eta[2 + b.size]),
            },
            _ => (0.0, 0.0),
        }
    }

    pub fn cycle_block(&self) -> [[f64; 2]; 2] {
        let (c, s) = (self.rho * self.lambda.cos(), self.rho * self.lambda.sin());
        [[c, s], [-s, c]]
    }
}

/// State equation of the model for given component parameters, with the
/// observation equation `f_t = Phi x_t + e_t`, `e_t ~ N(0, I_k)`. The
/// observation part is replaced by the factor or reduced wrappers in
/// [`crate::reduction`].
#[derive(Clone, Debug)]
pub struct DfmStates<'a> {
    pub spec: &'a DfmSpec,
    pub params: &'a [ComponentParams],
    phi: DMatrix<f64>,
    transition: DMatrix<f64>,
}

impl<'a> DfmStates<'a> {
    pub fn new(spec: &'a DfmSpec, params: &'a [ComponentParams]) -> Result<Self> {
        if params.len() != spec.k {
            return Err(Error::dim("component parameters", spec.k, params.len()));
        }
        let m = spec.m();
        let mut f = DMatrix::zeros(m, m);
        for (i, c) in params.iter().enumerate() {
            let b = c.cycle_block();
            let o = 4 * i;
            f[(o, o)] = b[0][0];
            f[(o, o + 1)] = b[0][1];
            f[(o + 1, o)] = b[1][0];
            f[(o + 1, o + 1)] = b[1][1];
            f[(o + 2, o + 2)] = 1.0;
            f[(o + 2, o + 3)] = 1.0;
            f[(o + 3, o + 3)] = 1.0;
        }
        Ok(Self {
            spec,
            params,
            phi: spec.phi(),
            transition: f,
        })
    }

    /// `Lambda_t` under `label`.
    pub fn state_noise(&self, label: usize) -> DMatrix<f64> {
        let k = self.spec.k;
        let mut g = DMatrix::zeros(4 * k, 4 * k);
        for (i, c) in self.params.iter().enumerate() {
            let (km, kd) = c.break_scales(label, i, k);
            let o = 4 * i;
            g[(o, o)] = c.sigma_f;
            g[(o + 1, o + 1)] = c.sigma_f;
            g[(o + 2, o + 2)] = c.sigma_f * km;
            g[(o + 3, o + 3)] = c.sigma_f * kd;
        }
        g
    }
}

impl StateSpace for DfmStates<'_> {
    fn dims(&self) -> Dims {
        Dims {
            n: self.spec.n(),
            p: self.spec.k,
            m: self.spec.m(),
            r: self.spec.m(),
        }
    }
    fn support_size(&self) -> usize {
        self.spec.support_size()
    }
    fn initial_mean(&self) -> DVector<f64> {
        DVector::zeros(self.spec.m())
    }
    fn initial_cov(&self) -> DMatrix<f64> {
        let m = self.spec.m();
        let mut v = DMatrix::zeros(m, m);
        for (i, c) in self.params.iter().enumerate() {
            let stat = c.sigma_f * c.sigma_f / (1.0 - c.rho * c.rho);
            v[(4 * i, 4 * i)] = stat;
            v[(4 * i + 1, 4 * i + 1)] = stat;
            v[(4 * i + 3, 4 * i + 3)] = self.spec.priors.diffuse;
        }
        v
    }
    fn system(&self, _t: usize, label: usize) -> SystemMatrices {
        let k = self.spec.k;
        SystemMatrices {
            obs_offset: DVector::zeros(k),
            obs_loading: self.phi.clone(),
            obs_noise: DMatrix::identity(k, k),
            state_offset: DVector::zeros(self.spec.m()),
            transition: self.transition.clone(),
            state_noise: self.state_noise(label),
        }
    }
}

impl RegressionDesign for DfmStates<'_> {
    fn n_coef(&self) -> usize {
        self.spec.n_coef()
    }
    fn design(&self, t: usize) -> DMatrix<f64> {
        let spec = self.spec;
        let kr = spec.k_r();
        let w = &spec.regressors;
        let mut d = DMatrix::zeros(spec.m(), spec.n_coef());
        for (i, c) in self.params.iter().enumerate() {
            let o = 4 * i;
            if t == 0 {
                for j in 0..kr {
                    d[(o, spec.beta_index(i, j))] = w[(0, j)];
                }
                d[(o + 2, spec.level_index(i))] = 1.0;
            } else {
                let (rc, rs) = (c.rho * c.lambda.cos(), c.rho * c.lambda.sin());
                for j in 0..kr {
                    d[(o, spec.beta_index(i, j))] = w[(t, j)] - rc * w[(t - 1, j)];
                    d[(o + 1, spec.beta_index(i, j))] = rs * w[(t - 1, j)];
                }
            }
        }
        d
    }
}

fn ln_beta_fn(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Log Beta density on (0, 1).
pub fn log_beta_density(x: f64, a: f64, b: f64) -> f64 {
    if !(x > 0.0 && x < 1.0) {
        return f64::NEG_INFINITY;
    }
    (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta_fn(a, b)
}

/// Log density of a Beta(a, b) stretched over (lo, hi).
pub fn log_stretched_beta_density(x: f64, a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    log_beta_density((x - lo) / (hi - lo), a, b) - (hi - lo).ln()
}

/// Log Gamma density with shape/rate.
pub fn log_gamma_density(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

fn log_normal_density(x: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + x * x / var)
}

/// Everything `log_priors` looks at.
#[derive(Clone, Debug)]
pub struct ParamSet<'a> {
    pub components: &'a [ComponentParams],
    pub beta: &'a DVector<f64>,
    pub inclusion: &'a [bool],
    /// p x k. Only free entries enter the prior in `Unknown` mode.
    pub theta: &'a DMatrix<f64>,
    pub kappa: &'a DVector<f64>,
    /// Idiosyncratic noise variances (length p).
    pub sigma2: &'a DVector<f64>,
}

/// Whether `Theta[(j, i)]` is sampled under the identification restriction.
pub fn theta_free(j: usize, i: usize) -> bool {
    j > i
}

/// Value of a fixed `Theta` entry under the identification restriction.
pub fn theta_fixed_value(j: usize, i: usize) -> f64 {
    if j == i {
        1.0
    } else {
        0.0
    }
}

/// Sum of log prior densities of all parameters; `-inf` outside the support.
/// Scale parameters (`sigma_f`, break sizes, `sigma_m`) are valued as scales,
/// with their priors stated on squares.
pub fn log_priors(params: &ParamSet, spec: &DfmSpec) -> f64 {
    let pr = &spec.priors;
    let mut total = 0.0;
    for c in params.components {
        total += log_beta_density(c.rho, pr.rho_alpha, pr.rho_beta);
        total += log_stretched_beta_density(c.lambda, pr.lambda_alpha, pr.lambda_beta, pr.lambda_a, pr.lambda_b);
        total += pr.sigma_f.log_density_of_scale(c.sigma_f);
        for (w, e) in c.eta.iter().enumerate() {
            total += pr.eta(w).log_density_of_scale(*e);
        }
    }
    let kr = spec.k_r();
    for i in 0..spec.k {
        for j in 0..kr {
            let b = params.beta[spec.beta_index(i, j)];
            if params.inclusion[i * kr + j] {
                total += pr.inclusion_prob.ln() + log_normal_density(b, pr.beta_sd * pr.beta_sd);
            } else if b == 0.0 {
                total += (1.0 - pr.inclusion_prob).ln();
            } else {
                return f64::NEG_INFINITY;
            }
        }
        total += log_normal_density(params.beta[spec.level_index(i)], pr.diffuse);
    }
    if spec.theta_mode == ThetaMode::Unknown {
        let th = params.theta;
        for i in 0..spec.k {
            let kappa = params.kappa[i];
            total += log_gamma_density(kappa, pr.kappa_nu / 2.0, pr.kappa_s / 2.0);
            for j in 0..th.nrows() {
                if theta_free(j, i) {
                    total += log_normal_density(th[(j, i)], 1.0 / kappa);
                } else if th[(j, i)] != theta_fixed_value(j, i) {
                    return f64::NEG_INFINITY;
                }
            }
        }
    }
    for &s2 in params.sigma2.iter() {
        total += pr.sigma_m.log_density_of_scale(s2.sqrt()) - (2.0 * s2.sqrt()).ln();
    }
    if total.is_nan() {
        f64::NEG_INFINITY
    } else {
        total
    }
}

/// A deterministic break in the simulation design.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrueBreak {
    /// Zero-based time index at which the new level or slope first applies.
    pub t: usize,
    pub component: usize,
    pub kind: BreakKind,
    /// Jump in the level, or in the slope.
    pub magnitude: f64,
}

/// Settings for simulating data from the factor model with deterministic breaks.
#[derive(Clone, Debug)]
pub struct SimulationDesign {
    pub n: usize,
    pub p: usize,
    pub rho: Vec<f64>,
    pub lambda: Vec<f64>,
    pub sigma_f: Vec<f64>,
    /// Coefficients shared by every component.
    pub beta: Vec<f64>,
    pub initial_level: Vec<f64>,
    pub breaks: Vec<TrueBreak>,
    /// Idiosyncratic noise standard deviation.
    pub sigma_m: f64,
    pub seed: u64,
}

impl SimulationDesign {
    pub fn k(&self) -> usize {
        self.rho.len()
    }

    /// The two-factor design of the simulation study: 400 series of length
    /// 300, one level break in factor 1, four level breaks and a late slope
    /// break in factor 2.
    pub fn study() -> Self {
        let lam = 2.0 * PI / 23.0;
        let level = |t: usize, component: usize, magnitude: f64| TrueBreak {
            t: t - 1,
            component,
            kind: BreakKind::Level,
            magnitude,
        };
        Self {
            n: 300,
            p: 400,
            rho: vec![0.8, 0.9],
            lambda: vec![lam, lam],
            sigma_f: vec![0.5, 0.5],
            beta: vec![0.8, 0.9, 0.001],
            initial_level: vec![2.0, -1.0],
            breaks: vec![
                level(200, 0, 5.0),
                level(50, 1, 4.0),
                level(75, 1, -4.5),
                level(100, 1, 5.0),
                level(150, 1, -4.0),
                TrueBreak {
                    t: 239,
                    component: 1,
                    kind: BreakKind::Slope,
                    magnitude: 0.5,
                },
            ],
            sigma_m: 0.3,
            seed: 20_130_601,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let mut bad = Vec::new();
        if k == 0 {
            bad.push("at least one component is required".to_string());
        }
        for (name, len) in [("lambda", self.lambda.len()), ("sigma_f", self.sigma_f.len()), ("initial_level", self.initial_level.len())] {
            if len != k {
                bad.push(format!("{name} has {len} entries, expected {k}"));
            }
        }
        if self.n < 2 {
            bad.push("n must be at least 2".into());
        }
        if self.p < k {
            bad.push(format!("p = {} is smaller than the number of components {k}", self.p));
        }
        if self.rho.iter().any(|r| !(r.abs() < 1.0)) {
            bad.push("rho must lie in (-1, 1)".into());
        }
        if self.sigma_f.iter().any(|s| !(*s >= 0.0)) || !(self.sigma_m >= 0.0) {
            bad.push("noise scales must be non-negative".into());
        }
        for b in &self.breaks {
            if b.t == 0 || b.t >= self.n || b.component >= k {
                bad.push(format!("break at t={} for component {} is outside the design", b.t + 1, b.component + 1));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Simulated data set and the paths that generated it.
#[derive(Clone, Debug)]
pub struct SimulatedData {
    /// n x p.
    pub obs: DMatrix<f64>,
    /// n x k_r.
    pub regressors: DMatrix<f64>,
    /// p x k.
    pub theta: DMatrix<f64>,
    /// n x k: the level `mu`.
    pub trend: DMatrix<f64>,
    /// n x k: cycle plus regression, `psi + w' beta`.
    pub seasonal: DMatrix<f64>,
    /// n x k: the cycle `psi`.
    pub cycle: DMatrix<f64>,
    /// n x k: the slope `delta`.
    pub slope: DMatrix<f64>,
    pub breaks: Vec<TrueBreak>,
}

/// Draw a data set from the design using the component recursions directly.
pub fn simulate_design(design: &SimulationDesign) -> Result<SimulatedData> {
    design.validate()?;
    let SimulationDesign { n, p, .. } = *design;
    let k = design.k();
    let kr = design.beta.len();
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let regressors = DMatrix::from_fn(n, kr, |_, _| normal());
    let mut theta = DMatrix::zeros(p, k);
    for j in 0..p {
        for i in 0..k {
            theta[(j, i)] = if theta_free(j, i) { normal() } else { theta_fixed_value(j, i) };
        }
    }
    let mut cycle = DMatrix::zeros(n, k);
    let mut trend = DMatrix::zeros(n, k);
    let mut slope = DMatrix::zeros(n, k);
    let mut seasonal = DMatrix::zeros(n, k);
    for i in 0..k {
        let (rho, lam, sf) = (design.rho[i], design.lambda[i], design.sigma_f[i]);
        let stat = sf / (1.0 - rho * rho).sqrt();
        let (mut psi, mut psi_star) = (stat * normal(), stat * normal());
        let (mut mu, mut delta) = (design.initial_level[i], 0.0);
        for t in 0..n {
            if t > 0 {
                let (z, zs) = (normal(), normal());
                let next_psi = rho * (lam.cos() * psi + lam.sin() * psi_star) + sf * z;
                let next_star = rho * (lam.cos() * psi_star - lam.sin() * psi) + sf * zs;
                psi = next_psi;
                psi_star = next_star;
                mu += delta;
                for b in design.breaks.iter().filter(|b| b.t == t && b.component == i) {
                    match b.kind {
                        BreakKind::Level => mu += b.magnitude,
                        BreakKind::Slope => delta += b.magnitude,
                    }
                }
            }
            let reg: f64 = (0..kr).map(|j| regressors[(t, j)] * design.beta[j]).sum();
            cycle[(t, i)] = psi;
            trend[(t, i)] = mu;
            slope[(t, i)] = delta;
            seasonal[(t, i)] = psi + reg;
        }
    }
    let factors = &trend + &seasonal;
    let noise = DMatrix::from_fn(n, p, |_, _| design.sigma_m * normal());
    let obs = &factors * theta.transpose() + noise;
    Ok(SimulatedData {
        obs,
        regressors,
        theta,
        trend,
        seasonal,
        cycle,
        slope,
        breaks: design.breaks.clone(),
    })
}
