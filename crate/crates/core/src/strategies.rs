//! Trading rates: the Riccati feedback, the two closed forms for static
//! long-term means, and the TWAP, adapted TWAP and Almgren–Chriss benchmarks.
//!
//! Every rate here is affine in the state, v = g(t)'x + c(t), so strategies
//! expose that pair and `rate` is derived from it.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EffectiveParams, MarketConfig, StateMatrices};
use crate::riccati::RiccatiSolution;

fn coth(x: f64) -> f64 {
    1.0 / x.tanh()
}

/// sinh(a)/sinh(b) for 0 < a ≤ b without overflow.
fn sinh_ratio(a: f64, b: f64) -> f64 {
    (a - b).exp() * ((-2.0 * a).exp_m1() / (-2.0 * b).exp_m1())
}

/// cosh(a)/sinh(b) for 0 ≤ a ≤ b, b > 0, without overflow.
fn cosh_over_sinh(a: f64, b: f64) -> f64 {
    (a - b).exp() * ((1.0 + (-2.0 * a).exp()) / -(-2.0 * b).exp_m1())
}

/// α̃ with sinh(ζα̃) = √(ψη̃)/√(D² − ψη̃) and D = β − (γ + ξ̃)/2.
pub fn tilde_alpha(eff: &EffectiveParams, gamma: f64, beta: f64) -> Result<f64> {
    let zeta = eff.zeta.ok_or_else(|| Error::Precondition("risk-averse closed form needs lambda > 0".into()))?;
    let gap = beta - (gamma + eff.xi_tilde) / 2.0;
    let pe = eff.psi * eff.eta_tilde;
    if !(gap > 0.0) {
        return Err(Error::Precondition(format!("beta - (gamma + xi~)/2 = {gap:e} must be positive")));
    }
    if !(gap * gap > pe) {
        return Err(Error::Precondition(format!(
            "(beta - (gamma + xi~)/2)^2 = {:e} must exceed psi*eta~ = {pe:e}",
            gap * gap
        )));
    }
    Ok((pe.sqrt() / (gap * gap - pe).sqrt()).asinh() / zeta)
}

/// α = 2η/(2β − γ), the risk-neutral terminal offset.
pub fn risk_neutral_alpha(cfg: &MarketConfig) -> f64 {
    2.0 * cfg.eta / (2.0 * cfg.beta - cfg.gamma)
}

fn require_static_means(cfg: &MarketConfig) -> Result<()> {
    if cfg.qbar1_is_zero() {
        Ok(())
    } else {
        Err(Error::Precondition("closed-form rates need qbar1 = 0 for every maker".into()))
    }
}

/// Constants of the risk-averse closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormCoefficients {
    pub alpha_tilde: f64,
    pub zeta: f64,
    pub theta: Vec<f64>,
    /// Diagonal of (I − Θ²/ζ²)⁻¹.
    pub resolvent: Vec<f64>,
    pub weights: Vec<f64>,
    pub qbar0: Vec<f64>,
    pub eta_tilde: f64,
    pub psi: f64,
    pub phi: f64,
    pub mu: f64,
    pub horizon: f64,
}

/// θ_i closer than this (relative to ζ) make the resolvent singular.
const RESOLVENT_TOL: f64 = 1e-8;
const RESOLVENT_SHIFT: f64 = 1e-6;

impl ClosedFormCoefficients {
    pub fn new(cfg: &MarketConfig, eff: &EffectiveParams) -> Result<Self> {
        require_static_means(cfg)?;
        let alpha_tilde = tilde_alpha(eff, cfg.gamma, cfg.beta)?;
        let zeta = eff.zeta.unwrap();
        let theta: Vec<f64> = cfg
            .makers
            .iter()
            .enumerate()
            .map(|(i, mk)| {
                if (mk.theta - zeta).abs() < RESOLVENT_TOL * zeta {
                    let shifted = mk.theta + RESOLVENT_SHIFT * zeta;
                    log::warn!("maker {}: theta = {} equals zeta; shifted to {shifted}", i + 1, mk.theta);
                    shifted
                } else {
                    mk.theta
                }
            })
            .collect();
        let resolvent = theta.iter().map(|t| 1.0 / (1.0 - (t / zeta).powi(2))).collect();
        Ok(Self {
            alpha_tilde,
            zeta,
            theta,
            resolvent,
            weights: cfg.makers.iter().map(|m| m.weight).collect(),
            qbar0: cfg.qbar0().as_slice().to_vec(),
            eta_tilde: eff.eta_tilde,
            psi: eff.psi,
            phi: cfg.phi,
            mu: cfg.mu,
            horizon: cfg.horizon,
        })
    }

    fn check_time(&self, u: f64) -> Result<f64> {
        if (0.0..=self.horizon).contains(&u) {
            Ok(self.horizon - u)
        } else {
            Err(Error::OutOfRange { t: u, lo: 0.0, hi: self.horizon })
        }
    }

    /// Gains (Q part, X part) and offset of the risk-averse closed form.
    fn affine(&self, u: f64) -> Result<(Vec<f64>, f64, f64)> {
        let tau = self.check_time(u)?;
        let (lam, lam0) = lambda_matrices(u, self.horizon, self)?;
        let za = self.zeta * self.alpha_tilde;
        let zt = self.zeta * (tau + self.alpha_tilde);
        let c = self.phi / (2.0 * self.eta_tilde);
        let gq = self.weights.iter().zip(lam.iter()).map(|(w, l)| c * w * (l - 1.0)).collect();
        let inv: f64 = self.weights.iter().zip(lam0.iter()).zip(self.qbar0.iter()).map(|((w, l), q)| w * l * q).sum();
        let drift = self.mu / (2.0 * (self.psi * self.eta_tilde).sqrt()) * (cosh_over_sinh(za, zt) - coth(zt));
        Ok((gq, self.zeta * coth(zt), c * inv + drift))
    }
}

/// Diagonals of Λᵘ(T) and Λ₀ᵘ(T).
pub fn lambda_matrices(u: f64, horizon: f64, cf: &ClosedFormCoefficients) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(0.0..=horizon).contains(&u) {
        return Err(Error::OutOfRange { t: u, lo: 0.0, hi: horizon });
    }
    let tau = horizon - u;
    let z = cf.zeta;
    let za = z * cf.alpha_tilde;
    let zt = z * (tau + cf.alpha_tilde);
    let s = sinh_ratio(za, zt);
    let cr = cosh_over_sinh(za, zt);
    let (cth_a, cth) = (coth(za), coth(zt));
    let n = cf.theta.len();
    let mut lam = DVector::zeros(n);
    let mut lam0 = DVector::zeros(n);
    for i in 0..n {
        let res = cf.resolvent[i];
        let q = cf.theta[i] / z;
        let e = (-tau * cf.theta[i]).exp();
        let bracket = 1.0 - res + res * q * cth_a;
        lam[i] = s * e * bracket + res - res * q * cth;
        lam0[i] = s * (1.0 - e) * bracket + res * q * (cth - cr) - res * q * q * (1.0 - s);
    }
    Ok((lam, lam0))
}

pub fn closed_form_rate_risk_averse(u: f64, q: &[f64], x: f64, cf: &ClosedFormCoefficients) -> Result<f64> {
    let (gq, gx, c) = cf.affine(u)?;
    Ok(gq.iter().zip(q).map(|(g, qi)| g * qi).sum::<f64>() + gx * x + c)
}

/// Constants of the risk-neutral closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskNeutralCoefficients {
    pub alpha: f64,
    pub theta: Vec<f64>,
    pub weights: Vec<f64>,
    pub qbar0: Vec<f64>,
    pub eta: f64,
    pub phi: f64,
    pub mu: f64,
    pub horizon: f64,
}

impl RiskNeutralCoefficients {
    pub fn new(cfg: &MarketConfig) -> Result<Self> {
        require_static_means(cfg)?;
        if cfg.lambda != 0.0 {
            return Err(Error::Precondition(format!("risk-neutral closed form needs lambda = 0, got {}", cfg.lambda)));
        }
        if !(cfg.beta > cfg.gamma / 2.0) {
            return Err(Error::Precondition("beta > gamma/2 is required".into()));
        }
        if let Some(mk) = cfg.makers.iter().find(|m| !(m.theta > 0.0)) {
            return Err(Error::Precondition(format!("Theta must be invertible, found theta = {}", mk.theta)));
        }
        Ok(Self {
            alpha: risk_neutral_alpha(cfg),
            theta: cfg.makers.iter().map(|m| m.theta).collect(),
            weights: cfg.makers.iter().map(|m| m.weight).collect(),
            qbar0: cfg.qbar0().as_slice().to_vec(),
            eta: cfg.eta,
            phi: cfg.phi,
            mu: cfg.mu,
            horizon: cfg.horizon,
        })
    }

    /// Diagonal of (1/(τ + α))[α e^{−τΘ} + (I − e^{−τΘ})Θ⁻¹].
    pub fn lambda(&self, tau: f64) -> Vec<f64> {
        let d = tau + self.alpha;
        self.theta
            .iter()
            .map(|&t| {
                let e = (-tau * t).exp();
                (self.alpha * e - (-tau * t).exp_m1() / t) / d
            })
            .collect()
    }

    fn affine(&self, u: f64) -> Result<(Vec<f64>, f64, f64)> {
        if !(0.0..=self.horizon).contains(&u) {
            return Err(Error::OutOfRange { t: u, lo: 0.0, hi: self.horizon });
        }
        let tau = self.horizon - u;
        let d = tau + self.alpha;
        let c = self.phi / (2.0 * self.eta);
        let lam = self.lambda(tau);
        let gq: Vec<f64> = self.weights.iter().zip(&lam).map(|(w, l)| c * w * (l - 1.0)).collect();
        let off_q: f64 = gq.iter().zip(&self.qbar0).map(|(g, q)| -g * q).sum();
        let drift = -self.mu / (4.0 * self.eta) * (d - self.alpha * self.alpha / d);
        Ok((gq, 1.0 / d, off_q + drift))
    }
}

pub fn closed_form_rate_risk_neutral(u: f64, q: &[f64], x: f64, cf: &RiskNeutralCoefficients) -> Result<f64> {
    let (gq, gx, c) = cf.affine(u)?;
    Ok(gq.iter().zip(q).map(|(g, qi)| g * qi).sum::<f64>() + gx * x + c)
}

/// Feedback gains tabulated on the Riccati grid:
/// g = (k + R a)/η̃ and c = a'r/(2η̃), so v = g'x + c.
#[derive(Debug, Clone)]
pub struct FeedbackTable {
    times: Vec<f64>,
    gains: Vec<DVector<f64>>,
    offsets: Vec<f64>,
    sol: Arc<RiccatiSolution>,
}

impl FeedbackTable {
    pub fn new(sol: Arc<RiccatiSolution>, mats: &StateMatrices, eff: &EffectiveParams) -> Self {
        let et = eff.eta_tilde;
        let gains = sol.r_mat.iter().map(|r| (&mats.k + r * &mats.a) / et).collect();
        let offsets = sol.r_vec.iter().map(|r| mats.a.dot(r) / (2.0 * et)).collect();
        Self { times: sol.times().to_vec(), gains, offsets, sol }
    }

    pub fn solution(&self) -> &RiccatiSolution {
        &self.sol
    }

    fn affine(&self, t: f64) -> Result<(DVector<f64>, f64)> {
        let i = self.sol.grid.locate(t)?;
        let w = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        Ok((&self.gains[i] * (1.0 - w) + &self.gains[i + 1] * w, self.offsets[i] * (1.0 - w) + self.offsets[i + 1] * w))
    }
}

/// v = (2(k + R(u)a)'x + a'r(u))/(2η̃) with R, r interpolated linearly.
pub fn feedback_rate(
    u: f64,
    state: &DVector<f64>,
    sol: &RiccatiSolution,
    mats: &StateMatrices,
    eff: &EffectiveParams,
) -> Result<f64> {
    let r = sol.r_mat_at(u)?;
    let rv = sol.r_vec_at(u)?;
    Ok((2.0 * (&mats.k + r * &mats.a).dot(state) + mats.a.dot(&rv)) / (2.0 * eff.eta_tilde))
}

pub fn twap_rate(cfg: &MarketConfig) -> f64 {
    cfg.x0 / cfg.horizon
}

pub fn adapted_twap_rate(t: f64, x: f64, horizon: f64, alpha: f64) -> f64 {
    x / (horizon - t + alpha)
}

/// κ = √(λσ_S²/η).
pub fn ac_kappa(cfg: &MarketConfig) -> Result<f64> {
    if !(cfg.lambda > 0.0) {
        return Err(Error::Precondition("Almgren-Chriss schedule needs lambda > 0".into()));
    }
    Ok((cfg.lambda * cfg.sigma_s * cfg.sigma_s / cfg.eta).sqrt())
}

/// x₀ sinh(κ(T − t))/sinh(κT).
pub fn ac_position(t: f64, x0: f64, horizon: f64, kappa: f64) -> f64 {
    let tau = horizon - t;
    if tau <= 0.0 {
        return 0.0;
    }
    if kappa * horizon < 1e-12 {
        return x0 * tau / horizon;
    }
    x0 * sinh_ratio(kappa * tau, kappa * horizon)
}

/// x₀κ cosh(κ(T − t))/sinh(κT).
pub fn ac_rate(t: f64, x0: f64, horizon: f64, kappa: f64) -> f64 {
    if kappa * horizon < 1e-12 {
        return x0 / horizon;
    }
    x0 * kappa * cosh_over_sinh(kappa * (horizon - t).max(0.0), kappa * horizon)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[serde(alias = "optimal")]
    OptimalFeedback,
    ClosedFormRiskAverse,
    ClosedFormRiskNeutral,
    Twap,
    AdaptedTwap,
    AlmgrenChriss,
}

impl StrategyKind {
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::OptimalFeedback => "optimal",
            StrategyKind::ClosedFormRiskAverse => "closed_form_risk_averse",
            StrategyKind::ClosedFormRiskNeutral => "closed_form_risk_neutral",
            StrategyKind::Twap => "twap",
            StrategyKind::AdaptedTwap => "adapted_twap",
            StrategyKind::AlmgrenChriss => "almgren_chriss",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Strategy {
    OptimalFeedback(FeedbackTable),
    ClosedFormRiskAverse(ClosedFormCoefficients),
    ClosedFormRiskNeutral(RiskNeutralCoefficients),
    Twap {
        rate: f64,
    },
    AdaptedTwap {
        alpha: f64,
        horizon: f64,
    },
    AlmgrenChriss {
        kappa: f64,
        x0: f64,
        horizon: f64,
    },
    /// Fixed rate, including v ≡ 0.
    Constant {
        rate: f64,
    },
}

impl Strategy {
    /// Builds a strategy of the given kind. `sol` is required for the
    /// Riccati feedback.
    pub fn build(
        kind: StrategyKind,
        cfg: &MarketConfig,
        mats: &StateMatrices,
        eff: &EffectiveParams,
        sol: Option<Arc<RiccatiSolution>>,
    ) -> Result<Self> {
        Ok(match kind {
            StrategyKind::OptimalFeedback => {
                let sol =
                    sol.ok_or_else(|| Error::InvalidArgument("optimal feedback needs a Riccati solution".into()))?;
                Strategy::OptimalFeedback(FeedbackTable::new(sol, mats, eff))
            }
            StrategyKind::ClosedFormRiskAverse => {
                Strategy::ClosedFormRiskAverse(ClosedFormCoefficients::new(cfg, eff)?)
            }
            StrategyKind::ClosedFormRiskNeutral => Strategy::ClosedFormRiskNeutral(RiskNeutralCoefficients::new(cfg)?),
            StrategyKind::Twap => Strategy::Twap { rate: twap_rate(cfg) },
            StrategyKind::AdaptedTwap => Strategy::AdaptedTwap { alpha: risk_neutral_alpha(cfg), horizon: cfg.horizon },
            StrategyKind::AlmgrenChriss => {
                Strategy::AlmgrenChriss { kappa: ac_kappa(cfg)?, x0: cfg.x0, horizon: cfg.horizon }
            }
        })
    }

    pub fn name(&self) -> String {
        match self {
            Strategy::OptimalFeedback(_) => StrategyKind::OptimalFeedback.label().into(),
            Strategy::ClosedFormRiskAverse(_) => StrategyKind::ClosedFormRiskAverse.label().into(),
            Strategy::ClosedFormRiskNeutral(_) => StrategyKind::ClosedFormRiskNeutral.label().into(),
            Strategy::Twap { .. } => StrategyKind::Twap.label().into(),
            Strategy::AdaptedTwap { .. } => StrategyKind::AdaptedTwap.label().into(),
            Strategy::AlmgrenChriss { .. } => StrategyKind::AlmgrenChriss.label().into(),
            Strategy::Constant { rate } => format!("constant_{rate}"),
        }
    }

    /// (g, c) with v(t, x) = g'x + c. `dim` is n + 1.
    pub fn affine(&self, t: f64, dim: usize) -> Result<(Vec<f64>, f64)> {
        let mut g = vec![0.0; dim];
        let c = match self {
            Strategy::OptimalFeedback(tab) => {
                let (gv, c) = tab.affine(t)?;
                g.copy_from_slice(gv.as_slice());
                c
            }
            Strategy::ClosedFormRiskAverse(cf) => {
                let (gq, gx, c) = cf.affine(t)?;
                g[..dim - 1].copy_from_slice(&gq);
                g[dim - 1] = gx;
                c
            }
            Strategy::ClosedFormRiskNeutral(cf) => {
                let (gq, gx, c) = cf.affine(t)?;
                g[..dim - 1].copy_from_slice(&gq);
                g[dim - 1] = gx;
                c
            }
            Strategy::Twap { rate } | Strategy::Constant { rate } => *rate,
            Strategy::AdaptedTwap { alpha, horizon } => {
                g[dim - 1] = 1.0 / (horizon - t + alpha);
                0.0
            }
            Strategy::AlmgrenChriss { kappa, x0, horizon } => ac_rate(t, *x0, *horizon, *kappa),
        };
        Ok((g, c))
    }

    pub fn rate(&self, t: f64, x: &[f64]) -> Result<f64> {
        let (g, c) = self.affine(t, x.len())?;
        Ok(g.iter().zip(x).map(|(gi, xi)| gi * xi).sum::<f64>() + c)
    }
}
