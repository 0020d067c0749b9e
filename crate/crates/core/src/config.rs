//! Run configuration: JSON-backed, unknown keys rejected, every field
//! defaulted to the reference chain setup.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::hdm::ChainProblem;
use crate::Result;

/// Reduced-model strategy for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Full-order evaluations only.
    Hdm,
    /// Single global basis from uniformly weighted snapshots.
    Global,
    /// Distance-weighted basis rebuilt per query.
    Weighted,
    /// Distance-weighted basis enhanced with mode derivatives.
    WeightedDeriv,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Hdm => "hdm",
            Method::Global => "global",
            Method::Weighted => "weighted",
            Method::WeightedDeriv => "weighted-deriv",
        }
    }

    /// Whether HDM evaluations under this method collect state
    /// sensitivities alongside the trajectory.
    pub fn needs_sensitivities(self) -> bool {
        matches!(self, Method::WeightedDeriv)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hdm" => Ok(Method::Hdm),
            "global" => Ok(Method::Global),
            "weighted" => Ok(Method::Weighted),
            "weighted-deriv" => Ok(Method::WeightedDeriv),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected hdm | global | weighted | weighted-deriv)"
            ))),
        }
    }
}

/// Chain-problem parameters, mirroring [`ChainProblem`] with the time
/// horizon given as a duration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub n_e: usize,
    pub length: f64,
    pub k0: f64,
    pub rho: f64,
    pub alpha: f64,
    pub beta: f64,
    pub force: f64,
    pub dt: f64,
    pub t_total: f64,
    pub mu_lo: f64,
    pub mu_hi: f64,
    pub mu0: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        let p = ChainProblem::default();
        Self {
            n_e: p.n_e,
            length: p.length,
            k0: p.k0,
            rho: p.rho,
            alpha: p.alpha,
            beta: p.beta,
            force: p.force,
            dt: p.dt,
            t_total: p.dt * p.n_t as f64,
            mu_lo: p.mu_lo,
            mu_hi: p.mu_hi,
            mu0: p.mu0_value,
        }
    }
}

impl ChainConfig {
    pub fn to_problem(&self) -> ChainProblem {
        ChainProblem {
            n_e: self.n_e,
            length: self.length,
            k0: self.k0,
            rho: self.rho,
            alpha: self.alpha,
            beta: self.beta,
            force: self.force,
            dt: self.dt,
            n_t: (self.t_total / self.dt).round() as usize,
            mu_lo: self.mu_lo,
            mu_hi: self.mu_hi,
            mu0_value: self.mu0,
        }
    }
}

/// Method/basis-size grid evaluated by the shadow comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShadowConfig {
    pub methods: Vec<Method>,
    pub nr_values: Vec<usize>,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Global, Method::Weighted, Method::WeightedDeriv],
            nr_values: vec![8, 12, 16],
        }
    }
}

/// Full run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub nr: usize,
    /// Cutoff blend parameter for the distance weighting.
    pub c: f64,
    pub eps_svd: f64,
    pub eps_orth: f64,
    pub eps_r0: f64,
    pub reinit_period: usize,
    pub min_halvings: usize,
    pub max_iters: usize,
    pub kkt_tol: f64,
    /// Unique queries served by the HDM before reduced models start.
    pub warmup_hdm_evals: usize,
    pub reorthonormalize: bool,
    pub seed: u64,
    pub chain: ChainConfig,
    pub shadow: ShadowConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Weighted,
            nr: 12,
            c: crate::weighting::DEFAULT_CUTOFF_FRACTION,
            eps_svd: 1e-8,
            eps_orth: 1e-2,
            eps_r0: 1e-1,
            reinit_period: 25,
            min_halvings: 2,
            max_iters: 300,
            kkt_tol: 1e-6,
            warmup_hdm_evals: 10,
            reorthonormalize: true,
            seed: 0,
            chain: ChainConfig::default(),
            shadow: ShadowConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("eps_svd", self.eps_svd),
            ("eps_orth", self.eps_orth),
            ("eps_r0", self.eps_r0),
            ("kkt_tol", self.kkt_tol),
        ] {
            if !(value > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {value}")));
            }
        }
        if !(self.c > 0.0 && self.c <= 1.0) {
            return Err(Error::InvalidCutoffFraction(self.c));
        }
        if self.nr == 0 {
            return Err(Error::Config("nr must be at least 1".into()));
        }
        if self.method == Method::WeightedDeriv && self.nr < 2 {
            return Err(Error::Config("weighted-deriv needs nr >= 2".into()));
        }
        if self.warmup_hdm_evals == 0 && self.method != Method::Hdm {
            return Err(Error::Config("warmup_hdm_evals must be at least 1".into()));
        }
        if self.reinit_period == 0 {
            return Err(Error::Config("reinit_period must be at least 1".into()));
        }
        if self.shadow.methods.contains(&Method::Hdm) {
            return Err(Error::Config(
                "shadow methods list the reduced models to compare; hdm is implicit".into(),
            ));
        }
        if self.chain.n_e == 0 || !(self.chain.dt > 0.0) || self.chain.t_total < 2.0 * self.chain.dt
        {
            return Err(Error::Config("chain discretization is degenerate".into()));
        }
        if !(self.chain.mu_lo < self.chain.mu_hi)
            || self.chain.mu0 < self.chain.mu_lo
            || self.chain.mu0 > self.chain.mu_hi
        {
            return Err(Error::Config("chain thickness bounds are inconsistent".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> crate::optimizer::Schedule {
        crate::optimizer::Schedule {
            reinit_period: self.reinit_period,
            min_halvings: self.min_halvings,
            eps_r0: self.eps_r0,
            max_iters: self.max_iters,
            kkt_tol: self.kkt_tol,
        }
    }
}
