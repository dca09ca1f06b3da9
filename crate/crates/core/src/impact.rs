//! Expected price impact of a meta-order: the noiseless state trajectory under
//! an exogenous rate schedule, the implied fair-price shift, and a
//! single-exponential fit of its relaxation.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{build_state_matrices, derive_effective_params, MarketConfig, StateMatrices};

/// Piecewise-constant trading rate; zero outside the pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    /// (start, end, rate) with start < end, non-overlapping, increasing.
    pub pieces: Vec<(f64, f64, f64)>,
    pub horizon: f64,
}

impl RateSchedule {
    /// Constant rate on [0, t_exec], nothing afterwards.
    pub fn block(rate: f64, t_exec: f64, horizon: f64) -> Result<Self> {
        Self::new(vec![(0.0, t_exec, rate)], horizon)
    }

    pub fn new(pieces: Vec<(f64, f64, f64)>, horizon: f64) -> Result<Self> {
        let ok = pieces.iter().all(|&(a, b, v)| a < b && b <= horizon && a >= 0.0 && v.is_finite())
            && pieces.windows(2).all(|w| w[0].1 <= w[1].0);
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid rate schedule on [0, {horizon}]: {pieces:?}")));
        }
        Ok(Self { pieces, horizon })
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        self.pieces.iter().find(|&&(a, b, _)| t >= a && t < b).map_or(0.0, |p| p.2)
    }

    /// Total quantity traded.
    pub fn volume(&self) -> f64 {
        self.pieces.iter().map(|&(a, b, v)| (b - a) * v).sum()
    }

    pub fn end_of_trading(&self) -> f64 {
        self.pieces.last().map_or(0.0, |p| p.1)
    }
}

/// RK4 for dx̄/dt = Ax̄ + a v(t) + b from `x_init`. The rate for each step is
/// read at the step midpoint, so pieces should end on grid nodes.
pub fn expected_state(
    schedule: &RateSchedule,
    mats: &StateMatrices,
    x_init: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<Vec<DVector<f64>>> {
    if grid.horizon() + 1e-12 < schedule.horizon {
        return Err(Error::InvalidArgument(format!(
            "grid ends at {} before the schedule horizon {}",
            grid.horizon(),
            schedule.horizon
        )));
    }
    let adiag = mats.a_mat.diagonal();
    let f = |x: &DVector<f64>, v: f64| adiag.component_mul(x) + &mats.a * v + &mats.b;
    let ts = grid.times();
    let mut out = Vec::with_capacity(ts.len());
    let mut x = x_init.clone();
    out.push(x.clone());
    for k in 0..ts.len() - 1 {
        let h = ts[k + 1] - ts[k];
        let v = schedule.rate_at(ts[k] + h / 2.0);
        let k1 = f(&x, v);
        let k2 = f(&(&x + &k1 * (h / 2.0)), v);
        let k3 = f(&(&x + &k2 * (h / 2.0)), v);
        let k4 = f(&(&x + &k3 * h), v);
        x += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        out.push(x.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImpactCurve {
    pub times: Vec<f64>,
    pub impact: Vec<f64>,
    /// t → ∞ limit once trading has stopped: γ(X_end − x₀) − φν'q̄⁰.
    pub asymptote: f64,
}

impl ImpactCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "impact"])?;
        for (t, v) in self.times.iter().zip(&self.impact) {
            w.write_record([format!("{t:e}"), format!("{v:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// E[S(t) − s₀] = γ(X̄(t) − x₀) − φν'Q̄(t) at zero drift.
pub fn impact_curve(schedule: &RateSchedule, cfg: &MarketConfig, grid: &TimeGrid) -> Result<ImpactCurve> {
    if cfg.mu != 0.0 {
        return Err(Error::InvalidArgument(format!("impact curves are defined at zero drift, got mu = {}", cfg.mu)));
    }
    let eff = derive_effective_params(cfg);
    let mats = build_state_matrices(cfg, &eff);
    let n = cfg.n();
    let nu = cfg.weights();
    let traj = expected_state(schedule, &mats, &cfg.initial_state(), grid)?;
    let impact = traj.iter().map(|x| cfg.gamma * (x[n] - cfg.x0) - cfg.phi * nu.dot(&x.rows(0, n))).collect();
    let x_end = cfg.x0 - schedule.volume();
    let asymptote = cfg.gamma * (x_end - cfg.x0) - cfg.phi * nu.dot(&cfg.qbar0());
    Ok(ImpactCurve { times: grid.times().to_vec(), impact, asymptote })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpFit {
    pub rate: f64,
    pub r_squared: f64,
}

/// Least-squares fit of ln|curve − asymptote| = c − rate·t over t ≥ t_start.
pub fn fit_exponential_decay(curve: &ImpactCurve, t_start: f64) -> Result<ExpFit> {
    let pts: Vec<(f64, f64)> = curve
        .times
        .iter()
        .zip(&curve.impact)
        .filter(|(t, _)| **t >= t_start)
        .map(|(&t, &v)| (t, v - curve.asymptote))
        .collect();
    if pts.len() < 3 {
        return Err(Error::FitInvalid(format!("only {} points after t = {t_start}", pts.len())));
    }
    let sign = pts[0].1.signum();
    if sign == 0.0 || pts.iter().any(|p| p.1.signum() != sign) {
        return Err(Error::FitInvalid("residual changes sign or vanishes".into()));
    }
    if pts.windows(2).any(|w| w[1].1.abs() >= w[0].1.abs()) {
        return Err(Error::FitInvalid("residual does not decay monotonically".into()));
    }
    let n = pts.len() as f64;
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.abs().ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(ExpFit { rate: -slope, r_squared })
}
