//! Conditionally Gaussian state space models.
//!
//! ```text
//! y_t     = g_t + H_t x_t + G_t e_t,           e_t ~ N(0, I_p)
//! x_t     = h_t + F_t x_{t-1} + Gamma_t u_t,   u_t ~ N(0, I_r)   (t >= 2)
//! x_1     ~ N(m_1, V_1)
//! ```
//!
//! All system matrices at time `t` are functions of the discrete indicator
//! `K_t` (and of the model parameters captured by the provider). The
//! transition matrices returned for time `t` describe the step *into* `t`,
//! so `K_t` drives both the measurement at `t` and the innovation that
//! moves the state from `t-1` to `t`. They are ignored at the first time
//! point, where the initial moments take over.
//!
//! Time indices in code are zero-based.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, standard_normal_vec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    /// Number of time points.
    pub n: usize,
    /// Observation dimension.
    pub p: usize,
    /// State dimension.
    pub m: usize,
    /// State disturbance dimension.
    pub r: usize,
}

/// System matrices at a single time point.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemMatrices {
    /// `g_t`, length p.
    pub obs_offset: DVector<f64>,
    /// `H_t`, p x m.
    pub obs_loading: DMatrix<f64>,
    /// `G_t`, p x p.
    pub obs_noise: DMatrix<f64>,
    /// `h`, length m, for the step into t.
    pub state_offset: DVector<f64>,
    /// `F`, m x m, for the step into t.
    pub transition: DMatrix<f64>,
    /// `Gamma`, m x r, for the step into t.
    pub state_noise: DMatrix<f64>,
}

impl SystemMatrices {
    pub fn check(&self, dims: Dims, t: usize) -> Result<()> {
        let Dims { p, m, r, .. } = dims;
        let check = |name: &str, got: (usize, usize), want: (usize, usize)| {
            if got != want {
                Err(Error::dim(
                    &format!("{name} at t={t}"),
                    format!("{}x{}", want.0, want.1),
                    format!("{}x{}", got.0, got.1),
                ))
            } else {
                Ok(())
            }
        };
        check("g", (self.obs_offset.len(), 1), (p, 1))?;
        check("H", self.obs_loading.shape(), (p, m))?;
        check("G", self.obs_noise.shape(), (p, p))?;
        check("h", (self.state_offset.len(), 1), (m, 1))?;
        check("F", self.transition.shape(), (m, m))?;
        check("Gamma", self.state_noise.shape(), (m, r))
    }
}

/// A conditionally Gaussian state space model: dimensions, initial state
/// moments, and a pure provider of system matrices indexed by `(t, K_t)`.
pub trait StateSpace {
    fn dims(&self) -> Dims;
    /// Number of values each indicator `K_t` can take.
    fn support_size(&self) -> usize;
    fn initial_mean(&self) -> DVector<f64>;
    fn initial_cov(&self) -> DMatrix<f64>;
    fn system(&self, t: usize, label: usize) -> SystemMatrices;
}

impl<T: StateSpace + ?Sized> StateSpace for &T {
    fn dims(&self) -> Dims {
        (**self).dims()
    }
    fn support_size(&self) -> usize {
        (**self).support_size()
    }
    fn initial_mean(&self) -> DVector<f64> {
        (**self).initial_mean()
    }
    fn initial_cov(&self) -> DMatrix<f64> {
        (**self).initial_cov()
    }
    fn system(&self, t: usize, label: usize) -> SystemMatrices {
        (**self).system(t, label)
    }
}

/// Closure-backed model. The provider closes over the parameter vector.
#[derive(Clone)]
pub struct CgssModel<P> {
    pub dims: Dims,
    pub support: usize,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    pub provider: P,
}

impl<P> CgssModel<P>
where
    P: Fn(usize, usize) -> SystemMatrices,
{
    pub fn new(
        dims: Dims,
        support: usize,
        init_mean: DVector<f64>,
        init_cov: DMatrix<f64>,
        provider: P,
    ) -> Result<Self> {
        if init_mean.len() != dims.m {
            return Err(Error::dim("m_1", dims.m, init_mean.len()));
        }
        if init_cov.shape() != (dims.m, dims.m) {
            return Err(Error::dim(
                "V_1",
                format!("{0}x{0}", dims.m),
                format!("{}x{}", init_cov.nrows(), init_cov.ncols()),
            ));
        }
        if (&init_cov - init_cov.transpose()).amax() > 1e-12 * (1.0 + init_cov.amax()) {
            return Err(Error::InvalidParameter("V_1 is not symmetric".into()));
        }
        if support == 0 {
            return Err(Error::InvalidParameter("indicator support is empty".into()));
        }
        Ok(Self {
            dims,
            support,
            init_mean,
            init_cov,
            provider,
        })
    }
}

impl<P> StateSpace for CgssModel<P>
where
    P: Fn(usize, usize) -> SystemMatrices,
{
    fn dims(&self) -> Dims {
        self.dims
    }
    fn support_size(&self) -> usize {
        self.support
    }
    fn initial_mean(&self) -> DVector<f64> {
        self.init_mean.clone()
    }
    fn initial_cov(&self) -> DMatrix<f64> {
        self.init_cov.clone()
    }
    fn system(&self, t: usize, label: usize) -> SystemMatrices {
        (self.provider)(t, label)
    }
}

/// The discrete indicators `K_1..K_n`. Label 0 is always the null state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Indicators {
    labels: Vec<usize>,
    support: usize,
}

impl Indicators {
    pub fn new(labels: Vec<usize>, support: usize) -> Result<Self> {
        if let Some((t, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= support) {
            return Err(Error::InvalidParameter(format!(
                "indicator {l} at t={t} outside support of size {support}"
            )));
        }
        Ok(Self { labels, support })
    }

    pub fn null(n: usize, support: usize) -> Self {
        Self {
            labels: vec![0; n],
            support,
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn support(&self) -> usize {
        self.support
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, t: usize) -> usize {
        self.labels[t]
    }

    pub fn set(&mut self, t: usize, label: usize) {
        assert!(label < self.support, "label outside support");
        self.labels[t] = label;
    }
}

pub(crate) fn check_indicators<M: StateSpace + ?Sized>(model: &M, ind: &Indicators) -> Result<()> {
    let dims = model.dims();
    if ind.len() != dims.n {
        return Err(Error::dim("indicator sequence", dims.n, ind.len()));
    }
    if ind.support() != model.support_size() {
        return Err(Error::dim(
            "indicator support",
            model.support_size(),
            ind.support(),
        ));
    }
    Ok(())
}

pub(crate) fn check_observations<M: StateSpace + ?Sized>(model: &M, obs: &DMatrix<f64>) -> Result<()> {
    let dims = model.dims();
    if obs.shape() != (dims.n, dims.p) {
        return Err(Error::dim(
            "observations",
            format!("{}x{}", dims.n, dims.p),
            format!("{}x{}", obs.nrows(), obs.ncols()),
        ));
    }
    Ok(())
}

/// Forward draw of states and observations. Rows of the returned matrices
/// are time points.
pub fn simulate<M, R>(model: &M, ind: &Indicators, rng: &mut R) -> Result<(DMatrix<f64>, DMatrix<f64>)>
where
    M: StateSpace + ?Sized,
    R: Rng + ?Sized,
{
    check_indicators(model, ind)?;
    let dims = model.dims();
    let Dims { n, p, m, r } = dims;
    let mut obs = DMatrix::zeros(n, p);
    let mut states = DMatrix::zeros(n, m);
    let mut x = DVector::zeros(m);
    for t in 0..n {
        let mats = model.system(t, ind.get(t));
        mats.check(dims, t)?;
        if t == 0 {
            let root = psd_sqrt(&model.initial_cov());
            x = model.initial_mean() + &root * standard_normal_vec(rng, root.ncols());
        } else {
            let u = standard_normal_vec(rng, r);
            x = &mats.state_offset + &mats.transition * &x + &mats.state_noise * u;
        }
        let e = standard_normal_vec(rng, p);
        let y = &mats.obs_offset + &mats.obs_loading * &x + &mats.obs_noise * e;
        states.set_row(t, &x.transpose());
        obs.set_row(t, &y.transpose());
    }
    Ok((obs, states))
}
