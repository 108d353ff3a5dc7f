//! TOML run configuration for `fit` and `simulate`.
//!
//! Every problem in a file (unknown sections or keys, wrong types, missing
//! required values, out-of-range values) is collected and reported at once.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::dfm::{BreakKind, InvGamma, Priors, SimulationDesign, ThetaMode, TrueBreak};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    /// CSV with a time column and one column per series.
    Series,
    /// `CGSG` binary grid.
    Grid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub path: PathBuf,
    pub format: DataFormat,
    /// CSV of regressors, one row per time point.
    pub regressors: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub theta_mode: ThetaMode,
    /// Number of components with unknown loadings; the cap on retained
    /// components with a fixed basis.
    pub k: usize,
    pub eof_threshold: f64,
    pub eof_standardize: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            theta_mode: ThetaMode::Unknown,
            k: 2,
            eof_threshold: crate::eof::DEFAULT_THRESHOLD,
            eof_standardize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McmcSection {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub chains: usize,
    pub adapt: bool,
}

impl Default for McmcSection {
    fn default() -> Self {
        Self {
            iterations: 5000,
            burn_in: 1000,
            thin: 1,
            seed: 1,
            chains: 1,
            adapt: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub priors: Priors,
    pub mcmc: McmcSection,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct SimulateConfig {
    pub design: SimulationDesign,
    pub output_dir: Option<PathBuf>,
}

const PRIOR_KEYS: &[&str] = &[
    "rho_alpha",
    "rho_beta",
    "sigma_f_nu",
    "sigma_f_s",
    "eta_mu1_nu",
    "eta_mu1_s",
    "eta_mu2_nu",
    "eta_mu2_s",
    "eta_delta1_nu",
    "eta_delta1_s",
    "eta_delta2_nu",
    "eta_delta2_s",
    "lambda_alpha",
    "lambda_beta",
    "lambda_a",
    "lambda_b",
    "sigma_m_nu",
    "sigma_m_s",
    "beta_sd",
    "inclusion_prob",
    "kappa_nu",
    "kappa_s",
    "break_prob",
    "diffuse",
];

/// Walks a parsed document, remembering which keys were read and every
/// problem met along the way.
struct Reader<'a> {
    doc: &'a toml::Table,
    base: PathBuf,
    errors: Vec<String>,
}

impl<'a> Reader<'a> {
    fn section(&mut self, name: &str, keys: &[&str]) -> Option<&'a toml::Table> {
        let table = match self.doc.get(name) {
            None => return None,
            Some(toml::Value::Table(t)) => t,
            Some(_) => {
                self.errors.push(format!("[{name}] must be a table"));
                return None;
            }
        };
        for key in table.keys() {
            if !keys.contains(&key.as_str()) {
                self.errors.push(format!("unknown key {name}.{key}"));
            }
        }
        Some(table)
    }

    fn check_sections(&mut self, allowed: &[&str]) {
        for key in self.doc.keys() {
            if !allowed.contains(&key.as_str()) {
                self.errors.push(format!("unknown section [{key}]"));
            }
        }
    }

    fn float(&mut self, t: Option<&toml::Table>, sec: &str, key: &str, default: f64) -> f64 {
        match t.and_then(|t| t.get(key)) {
            None => default,
            Some(toml::Value::Float(v)) => *v,
            Some(toml::Value::Integer(v)) => *v as f64,
            Some(other) => {
                self.errors.push(format!("{sec}.{key} must be a number, found {}", other.type_str()));
                default
            }
        }
    }

    fn uint(&mut self, t: Option<&toml::Table>, sec: &str, key: &str, default: u64) -> u64 {
        match t.and_then(|t| t.get(key)) {
            None => default,
            Some(toml::Value::Integer(v)) if *v >= 0 => *v as u64,
            Some(other) => {
                self.errors.push(format!("{sec}.{key} must be a non-negative integer, found {other}"));
                default
            }
        }
    }

    fn boolean(&mut self, t: Option<&toml::Table>, sec: &str, key: &str, default: bool) -> bool {
        match t.and_then(|t| t.get(key)) {
            None => default,
            Some(toml::Value::Boolean(v)) => *v,
            Some(other) => {
                self.errors.push(format!("{sec}.{key} must be true or false, found {other}"));
                default
            }
        }
    }

    fn string(&mut self, t: Option<&toml::Table>, sec: &str, key: &str) -> Option<String> {
        match t.and_then(|t| t.get(key)) {
            None => None,
            Some(toml::Value::String(s)) => Some(s.clone()),
            Some(other) => {
                self.errors.push(format!("{sec}.{key} must be a string, found {}", other.type_str()));
                None
            }
        }
    }

    fn path(&mut self, t: Option<&toml::Table>, sec: &str, key: &str) -> Option<PathBuf> {
        self.string(t, sec, key).map(|s| {
            let p = PathBuf::from(s);
            if p.is_absolute() {
                p
            } else {
                self.base.join(p)
            }
        })
    }

    fn floats(&mut self, t: Option<&toml::Table>, sec: &str, key: &str, default: Vec<f64>) -> Vec<f64> {
        match t.and_then(|t| t.get(key)) {
            None => default,
            Some(toml::Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for v in items {
                    match v {
                        toml::Value::Float(x) => out.push(*x),
                        toml::Value::Integer(x) => out.push(*x as f64),
                        other => {
                            self.errors.push(format!("{sec}.{key} must hold numbers, found {other}"));
                            return default;
                        }
                    }
                }
                out
            }
            Some(other) => {
                self.errors.push(format!("{sec}.{key} must be an array of numbers, found {}", other.type_str()));
                default
            }
        }
    }

    fn finish<T>(self, value: T) -> Result<T> {
        if self.errors.is_empty() {
            Ok(value)
        } else {
            Err(Error::Config(self.errors))
        }
    }
}

fn parse_doc(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| Error::Config(vec![format!("not valid TOML: {}", e.message())]))
}

fn read_priors(r: &mut Reader, t: Option<&toml::Table>) -> Priors {
    let d = Priors::default();
    let s = "priors";
    let ig = |r: &mut Reader, name: &str, def: InvGamma| InvGamma {
        nu: r.float(t, s, &format!("{name}_nu"), def.nu),
        s: r.float(t, s, &format!("{name}_s"), def.s),
    };
    let sigma_f = ig(r, "sigma_f", d.sigma_f);
    let eta_mu1 = ig(r, "eta_mu1", d.eta_mu1);
    let eta_mu2 = ig(r, "eta_mu2", d.eta_mu2);
    let eta_delta1 = ig(r, "eta_delta1", d.eta_delta1);
    let eta_delta2 = ig(r, "eta_delta2", d.eta_delta2);
    let sigma_m = ig(r, "sigma_m", d.sigma_m);
    let priors = Priors {
        rho_alpha: r.float(t, s, "rho_alpha", d.rho_alpha),
        rho_beta: r.float(t, s, "rho_beta", d.rho_beta),
        sigma_f,
        eta_mu1,
        eta_mu2,
        eta_delta1,
        eta_delta2,
        lambda_alpha: r.float(t, s, "lambda_alpha", d.lambda_alpha),
        lambda_beta: r.float(t, s, "lambda_beta", d.lambda_beta),
        lambda_a: r.float(t, s, "lambda_a", d.lambda_a),
        lambda_b: r.float(t, s, "lambda_b", d.lambda_b),
        sigma_m,
        beta_sd: r.float(t, s, "beta_sd", d.beta_sd),
        inclusion_prob: r.float(t, s, "inclusion_prob", d.inclusion_prob),
        kappa_nu: r.float(t, s, "kappa_nu", d.kappa_nu),
        kappa_s: r.float(t, s, "kappa_s", d.kappa_s),
        break_prob: r.float(t, s, "break_prob", d.break_prob),
        diffuse: r.float(t, s, "diffuse", d.diffuse),
    };
    if let Err(Error::Config(bad)) = priors.validate() {
        r.errors.extend(bad.into_iter().map(|m| format!("priors: {m}")));
    }
    priors
}

impl FitConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parse a configuration; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let doc = parse_doc(text)?;
        let mut r = Reader {
            doc: &doc,
            base: base.to_path_buf(),
            errors: Vec::new(),
        };
        r.check_sections(&["data", "model", "priors", "mcmc", "output"]);

        let t = r.section("data", &["path", "format", "regressors"]);
        let path = r.path(t, "data", "path");
        if path.is_none() {
            r.errors.push("data.path is required".into());
        }
        let format = match r.string(t, "data", "format").as_deref() {
            None | Some("series") => DataFormat::Series,
            Some("grid") => DataFormat::Grid,
            Some(other) => {
                r.errors.push(format!("data.format must be \"series\" or \"grid\", found {other:?}"));
                DataFormat::Series
            }
        };
        let regressors = r.path(t, "data", "regressors");

        let md = ModelSection::default();
        let t = r.section("model", &["theta_mode", "k", "eof_threshold", "eof_standardize"]);
        let theta_mode = match r.string(t, "model", "theta_mode").as_deref() {
            None | Some("unknown") => ThetaMode::Unknown,
            Some("eof") => ThetaMode::Eof,
            Some(other) => {
                r.errors.push(format!("model.theta_mode must be \"unknown\" or \"eof\", found {other:?}"));
                md.theta_mode
            }
        };
        let k = r.uint(t, "model", "k", md.k as u64) as usize;
        if k == 0 {
            r.errors.push("model.k must be at least 1".into());
        }
        let eof_threshold = r.float(t, "model", "eof_threshold", md.eof_threshold);
        if !(0.0..=1.0).contains(&eof_threshold) {
            r.errors.push(format!("model.eof_threshold must lie in [0, 1], found {eof_threshold}"));
        }
        let eof_standardize = r.boolean(t, "model", "eof_standardize", md.eof_standardize);

        let t = r.section("priors", PRIOR_KEYS);
        let priors = read_priors(&mut r, t);

        let mc = McmcSection::default();
        let t = r.section("mcmc", &["iterations", "burn_in", "thin", "seed", "chains", "adapt"]);
        let mcmc = McmcSection {
            iterations: r.uint(t, "mcmc", "iterations", mc.iterations as u64) as usize,
            burn_in: r.uint(t, "mcmc", "burn_in", mc.burn_in as u64) as usize,
            thin: r.uint(t, "mcmc", "thin", mc.thin as u64) as usize,
            seed: r.uint(t, "mcmc", "seed", mc.seed),
            chains: r.uint(t, "mcmc", "chains", mc.chains as u64) as usize,
            adapt: r.boolean(t, "mcmc", "adapt", mc.adapt),
        };
        if mcmc.thin == 0 {
            r.errors.push("mcmc.thin must be at least 1".into());
        }
        if mcmc.chains == 0 {
            r.errors.push("mcmc.chains must be at least 1".into());
        }
        if mcmc.burn_in > mcmc.iterations {
            r.errors.push(format!("mcmc.burn_in ({}) exceeds mcmc.iterations ({})", mcmc.burn_in, mcmc.iterations));
        }

        let t = r.section("output", &["dir"]);
        let output_dir = r.path(t, "output", "dir");

        let cfg = FitConfig {
            data: DataSection {
                path: path.unwrap_or_default(),
                format,
                regressors,
            },
            model: ModelSection {
                theta_mode,
                k,
                eof_threshold,
                eof_standardize,
            },
            priors,
            mcmc,
            output_dir,
        };
        r.finish(cfg)
    }
}

impl SimulateConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parse a `[simulation]` section over the defaults of the simulation
    /// study. Break times and components are 1-based.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let doc = parse_doc(text)?;
        let mut r = Reader {
            doc: &doc,
            base: base.to_path_buf(),
            errors: Vec::new(),
        };
        r.check_sections(&["simulation", "output"]);
        let d = SimulationDesign::study();
        let s = "simulation";
        let t = r.section(
            s,
            &["n", "p", "rho", "lambda", "sigma_f", "beta", "initial_level", "sigma_m", "seed", "breaks"],
        );
        let mut design = SimulationDesign {
            n: r.uint(t, s, "n", d.n as u64) as usize,
            p: r.uint(t, s, "p", d.p as u64) as usize,
            rho: r.floats(t, s, "rho", d.rho.clone()),
            lambda: r.floats(t, s, "lambda", d.lambda.clone()),
            sigma_f: r.floats(t, s, "sigma_f", d.sigma_f.clone()),
            beta: r.floats(t, s, "beta", d.beta.clone()),
            initial_level: r.floats(t, s, "initial_level", d.initial_level.clone()),
            breaks: d.breaks.clone(),
            sigma_m: r.float(t, s, "sigma_m", d.sigma_m),
            seed: r.uint(t, s, "seed", d.seed),
        };
        match t.and_then(|t| t.get("breaks")) {
            None => {}
            Some(toml::Value::Array(items)) => {
                design.breaks.clear();
                for (i, item) in items.iter().enumerate() {
                    let Some(b) = item.as_table() else {
                        r.errors.push(format!("simulation.breaks[{}] must be a table", i + 1));
                        continue;
                    };
                    let sec = format!("simulation.breaks[{}]", i + 1);
                    let allowed: BTreeSet<&str> = ["t", "component", "kind", "magnitude"].into();
                    for key in b.keys() {
                        if !allowed.contains(key.as_str()) {
                            r.errors.push(format!("unknown key {sec}.{key}"));
                        }
                    }
                    let when = r.uint(Some(b), &sec, "t", 0) as usize;
                    let comp = r.uint(Some(b), &sec, "component", 0) as usize;
                    let magnitude = r.float(Some(b), &sec, "magnitude", f64::NAN);
                    let kind = match r.string(Some(b), &sec, "kind").as_deref() {
                        Some("level") => Some(BreakKind::Level),
                        Some("slope") => Some(BreakKind::Slope),
                        other => {
                            r.errors.push(format!("{sec}.kind must be \"level\" or \"slope\", found {other:?}"));
                            None
                        }
                    };
                    if when < 2 || comp == 0 || !magnitude.is_finite() {
                        r.errors.push(format!("{sec} needs t >= 2, component >= 1 and a finite magnitude"));
                        continue;
                    }
                    if let Some(kind) = kind {
                        design.breaks.push(TrueBreak {
                            t: when - 1,
                            component: comp - 1,
                            kind,
                            magnitude,
                        });
                    }
                }
            }
            Some(other) => r.errors.push(format!("simulation.breaks must be an array of tables, found {}", other.type_str())),
        }
        let t = r.section("output", &["dir"]);
        let output_dir = r.path(t, "output", "dir");
        if r.errors.is_empty() {
            if let Err(Error::Config(bad)) = design.validate() {
                r.errors.extend(bad.into_iter().map(|m| format!("simulation: {m}")));
            }
        }
        r.finish(SimulateConfig { design, output_dir })
    }
}
