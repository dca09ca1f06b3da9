//! Market parameters, effective LQ coefficients and the state-space matrices.
//!
//! The state vector is `(Q_1, ..., Q_n, X)`: market-maker inventories followed
//! by the trader's remaining position.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize};
use statrs::distribution::{Continuous, Gamma};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketMakerSpec {
    pub theta: f64,
    pub sigma_q: f64,
    pub qbar1: f64,
    pub qbar0: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaRule {
    /// θ_i = i.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QbarRule {
    /// q̄¹_i = qbar1_scale/θ_i, q̄⁰_i = qbar0_scale/θ_i.
    Feedback,
    /// q̄¹_i = 0, q̄⁰_i = qbar0_scale/θ_i.
    NoFeedback,
}

/// Compact description of a maker population, expanded by [`MakerGenerator::expand`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MakerGenerator {
    pub n: usize,
    #[serde(default = "default_theta_rule")]
    pub theta_rule: ThetaRule,
    #[serde(default = "default_weight_shape")]
    pub weight_shape: f64,
    #[serde(default = "default_qbar_rule")]
    pub qbar_rule: QbarRule,
    #[serde(default = "default_qbar1_scale")]
    pub qbar1_scale: f64,
    #[serde(default = "default_qbar0_scale")]
    pub qbar0_scale: f64,
    #[serde(default = "default_sigma_q")]
    pub sigma_q: f64,
}

fn default_theta_rule() -> ThetaRule {
    ThetaRule::Linear
}
fn default_weight_shape() -> f64 {
    3.0
}
fn default_qbar_rule() -> QbarRule {
    QbarRule::Feedback
}
fn default_qbar1_scale() -> f64 {
    0.01
}
fn default_qbar0_scale() -> f64 {
    0.1
}
fn default_sigma_q() -> f64 {
    0.1
}

impl MakerGenerator {
    pub fn new(n: usize, qbar_rule: QbarRule) -> Self {
        Self {
            n,
            theta_rule: ThetaRule::Linear,
            weight_shape: default_weight_shape(),
            qbar_rule,
            qbar1_scale: default_qbar1_scale(),
            qbar0_scale: default_qbar0_scale(),
            sigma_q: default_sigma_q(),
        }
    }

    pub fn expand(&self) -> Vec<MarketMakerSpec> {
        let weights = gamma_weights(self.n, self.weight_shape);
        (1..=self.n)
            .zip(weights)
            .map(|(i, weight)| {
                let theta = match self.theta_rule {
                    ThetaRule::Linear => i as f64,
                };
                let qbar1 = match self.qbar_rule {
                    QbarRule::Feedback => self.qbar1_scale / theta,
                    QbarRule::NoFeedback => 0.0,
                };
                MarketMakerSpec { theta, sigma_q: self.sigma_q, qbar1, qbar0: self.qbar0_scale / theta, weight }
            })
            .collect()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MakersInput {
    Explicit(Vec<MarketMakerSpec>),
    Generated(MakerGenerator),
}

fn deserialize_makers<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<MarketMakerSpec>, D::Error> {
    Ok(match MakersInput::deserialize(d)? {
        MakersInput::Explicit(v) => v,
        MakersInput::Generated(g) => g.expand(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    #[serde(deserialize_with = "deserialize_makers")]
    pub makers: Vec<MarketMakerSpec>,
    pub gamma: f64,
    pub eta: f64,
    pub phi: f64,
    pub mu: f64,
    pub sigma_s: f64,
    pub s0: f64,
    pub x0: f64,
    pub m: f64,
    pub horizon: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl MarketConfig {
    /// Ten makers with θ_i = i, gamma(3) weights and the reference
    /// calibration. `lambda` is usually 0 or 0.001.
    pub fn reference(lambda: f64, qbar_rule: QbarRule) -> Self {
        let eta = 2.5e-6;
        Self {
            makers: MakerGenerator::new(10, qbar_rule).expand(),
            gamma: 2.5e-7,
            eta,
            phi: 100.0 * eta,
            mu: 0.0,
            sigma_s: 0.5,
            s0: 50.0,
            x0: 200_000.0,
            m: 20_000.0,
            horizon: 1.0,
            beta: 100.0 * eta,
            lambda,
        }
    }

    pub fn n(&self) -> usize {
        self.makers.len()
    }

    pub fn weights(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.makers.iter().map(|mk| mk.weight))
    }

    pub fn thetas(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.makers.iter().map(|mk| mk.theta))
    }

    pub fn qbar0(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.makers.iter().map(|mk| mk.qbar0))
    }

    pub fn qbar1_is_zero(&self) -> bool {
        self.makers.iter().all(|mk| mk.qbar1 == 0.0)
    }

    /// σ_Q^M = Σ ν_i σ_Qi.
    pub fn sigma_qm(&self) -> f64 {
        self.makers.iter().map(|mk| mk.weight * mk.sigma_q).sum()
    }

    /// Initial state (0, ..., 0, x0).
    pub fn initial_state(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.n() + 1);
        x[self.n()] = self.x0;
        x
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveParams {
    pub eta_tilde: f64,
    pub xi_tilde: f64,
    pub psi: f64,
    pub sigma_qm: f64,
    /// √(ψ/η̃); `None` when λ = 0.
    pub zeta: Option<f64>,
}

pub fn derive_effective_params(cfg: &MarketConfig) -> EffectiveParams {
    let lm2eta = cfg.lambda * cfg.m * cfg.m * cfg.eta;
    let sigma_qm = cfg.sigma_qm();
    let eta_tilde = cfg.eta * (1.0 + lm2eta);
    let xi_tilde = 2.0 * cfg.gamma * lm2eta;
    let psi = cfg.lambda
        * (cfg.phi * cfg.phi * sigma_qm * sigma_qm + cfg.m * cfg.m * cfg.gamma * cfg.gamma + cfg.sigma_s * cfg.sigma_s);
    let zeta = if cfg.lambda > 0.0 { Some((psi / eta_tilde).sqrt()) } else { None };
    EffectiveParams { eta_tilde, xi_tilde, psi, sigma_qm, zeta }
}

/// Data of the controlled linear SDE dx = (Ax + av + b)dt + Σ dB and the
/// quadratic objective built from G and k. Dimension is n + 1.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrices {
    pub a_mat: DMatrix<f64>,
    pub a: DVector<f64>,
    pub b: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub k: DVector<f64>,
    /// Diagonal of Θ.
    pub theta: DVector<f64>,
    pub e_last: DVector<f64>,
}

impl StateMatrices {
    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn n_makers(&self) -> usize {
        self.a.len() - 1
    }
}

pub fn build_state_matrices(cfg: &MarketConfig, eff: &EffectiveParams) -> StateMatrices {
    let n = cfg.n();
    let d = n + 1;
    let mut a_mat = DMatrix::zeros(d, d);
    let mut a = DVector::zeros(d);
    let mut b = DVector::zeros(d);
    let mut sigma = DMatrix::zeros(d, 2);
    let mut g = DMatrix::zeros(d, d);
    let mut k = DVector::zeros(d);
    for (i, mk) in cfg.makers.iter().enumerate() {
        a_mat[(i, i)] = -mk.theta;
        a[i] = mk.theta * mk.qbar1;
        b[i] = mk.theta * mk.qbar0;
        sigma[(i, 0)] = mk.sigma_q;
        let off = -cfg.phi * mk.weight / 2.0;
        g[(i, n)] = off;
        g[(n, i)] = off;
        k[i] = off;
    }
    a[n] = -1.0;
    sigma[(n, 1)] = cfg.m;
    g[(n, n)] = cfg.gamma / 2.0 - cfg.beta;
    k[n] = -eff.xi_tilde / 2.0;
    let mut e_last = DVector::zeros(d);
    e_last[n] = 1.0;
    StateMatrices { a_mat, a, b, sigma, g, k, theta: cfg.thetas(), e_last }
}

/// Gamma(shape, scale 1) density at i = 1..n, normalized to sum to one.
pub fn gamma_weights(n: usize, shape: f64) -> Vec<f64> {
    let dist = Gamma::new(shape, 1.0).expect("gamma shape must be positive");
    let raw: Vec<f64> = (1..=n).map(|i| dist.pdf(i as f64)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of [`validate_config`]. `required` checks gate every solver;
/// `closed_form` checks gate only the closed-form rates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub required: Vec<Check>,
    pub closed_form: Vec<Check>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.required.iter().all(|c| c.passed)
    }

    pub fn closed_form_available(&self) -> bool {
        self.is_valid() && self.closed_form.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.required.iter().filter(|c| !c.passed)
    }

    /// Turns a report with failed required checks into an error.
    pub fn into_result(self) -> Result<Self> {
        if self.is_valid() {
            Ok(self)
        } else {
            Err(Error::Validation(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (group, checks) in [("required", &self.required), ("closed-form", &self.closed_form)] {
            for c in checks.iter() {
                let mark = if c.passed { "ok  " } else { "FAIL" };
                writeln!(f, "  [{mark}] {group}: {} ({})", c.name, c.detail)?;
            }
        }
        Ok(())
    }
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.to_string(), passed, detail }
}

pub fn validate_config(cfg: &MarketConfig) -> ValidationReport {
    let mut req = Vec::new();
    req.push(check("at least one market maker", cfg.n() >= 1, format!("n = {}", cfg.n())));
    req.push(check(
        "beta > gamma/2",
        cfg.beta > cfg.gamma / 2.0,
        format!("beta = {:e}, gamma/2 = {:e}", cfg.beta, cfg.gamma / 2.0),
    ));
    let wsum: f64 = cfg.makers.iter().map(|mk| mk.weight).sum();
    req.push(check("weights sum to 1", (wsum - 1.0).abs() <= 1e-12, format!("sum = {wsum:.15}")));
    for (i, mk) in cfg.makers.iter().enumerate() {
        let ok = mk.theta > 0.0 && mk.weight > 0.0 && mk.sigma_q >= 0.0 && mk.theta.is_finite();
        if !ok {
            req.push(check(
                &format!("maker {} parameters", i + 1),
                false,
                format!("theta = {}, weight = {}, sigma_q = {}", mk.theta, mk.weight, mk.sigma_q),
            ));
        }
    }
    let signs = [
        ("gamma >= 0", cfg.gamma >= 0.0, cfg.gamma),
        ("eta > 0", cfg.eta > 0.0, cfg.eta),
        ("phi >= 0", cfg.phi >= 0.0, cfg.phi),
        ("mu >= 0", cfg.mu >= 0.0, cfg.mu),
        ("sigma_s > 0", cfg.sigma_s > 0.0, cfg.sigma_s),
        ("s0 > 0", cfg.s0 > 0.0, cfg.s0),
        ("x0 > 0", cfg.x0 > 0.0, cfg.x0),
        ("m >= 0", cfg.m >= 0.0, cfg.m),
        ("horizon > 0", cfg.horizon > 0.0, cfg.horizon),
        ("lambda >= 0", cfg.lambda >= 0.0, cfg.lambda),
    ];
    for (name, ok, v) in signs {
        req.push(check(name, ok && v.is_finite(), format!("{v:e}")));
    }

    let eff = derive_effective_params(cfg);
    let mut cf = Vec::new();
    cf.push(check("all qbar1 = 0", cfg.qbar1_is_zero(), "closed forms need static long-term means".into()));
    let gap = cfg.beta - (cfg.gamma + eff.xi_tilde) / 2.0;
    cf.push(check("beta - (gamma + xi~)/2 > 0", gap > 0.0, format!("{gap:e}")));
    cf.push(check(
        "(beta - (gamma + xi~)/2)^2 > psi*eta~",
        gap * gap > eff.psi * eff.eta_tilde,
        format!("{:e} vs {:e}", gap * gap, eff.psi * eff.eta_tilde),
    ));
    ValidationReport { required: req, closed_form: cf }
}
