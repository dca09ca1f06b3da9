//! Euler–Maruyama Monte Carlo of the controlled state, with P&L, quadratic
//! variation and both objectives evaluated pathwise. All strategies in a batch
//! see the same Brownian increments.

use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{build_state_matrices, derive_effective_params, EffectiveParams, MarketConfig, StateMatrices};
use crate::strategies::Strategy;

/// Paths per deterministic reduction block.
const CHUNK: usize = 256;

/// Largest number of (path, strategy) outcomes kept in memory by one batch.
pub const MAX_OUTCOMES: usize = 50_000_000;

/// Shared read-only model data for simulation.
#[derive(Debug, Clone)]
pub struct SimContext {
    pub cfg: MarketConfig,
    pub eff: EffectiveParams,
    pub mats: StateMatrices,
}

impl SimContext {
    pub fn new(cfg: &MarketConfig) -> Self {
        let eff = derive_effective_params(cfg);
        let mats = build_state_matrices(cfg, &eff);
        Self { cfg: cfg.clone(), eff, mats }
    }

    pub fn dim(&self) -> usize {
        self.mats.dim()
    }
}

/// Per-step increments (ΔB_Q, ΔB_X, ΔB_S), each N(0, dt).
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianIncrements {
    pub dt: f64,
    pub d_bq: Vec<f64>,
    pub d_bx: Vec<f64>,
    pub d_bs: Vec<f64>,
}

impl BrownianIncrements {
    /// Stream `path_id` of the generator seeded with `seed`; independent of
    /// the order in which paths are drawn.
    pub fn draw(seed: u64, path_id: u64, steps: usize, dt: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path_id);
        let sd = dt.sqrt();
        let mut d_bq = Vec::with_capacity(steps);
        let mut d_bx = Vec::with_capacity(steps);
        let mut d_bs = Vec::with_capacity(steps);
        for _ in 0..steps {
            let z: [f64; 3] =
                [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            d_bq.push(z[0] * sd);
            d_bx.push(z[1] * sd);
            d_bs.push(z[2] * sd);
        }
        Self { dt, d_bq, d_bx, d_bs }
    }

    pub fn zeros(steps: usize, dt: f64) -> Self {
        Self { dt, d_bq: vec![0.0; steps], d_bx: vec![0.0; steps], d_bs: vec![0.0; steps] }
    }

    pub fn steps(&self) -> usize {
        self.d_bq.len()
    }

    /// Same Brownian path on a grid twice as coarse.
    pub fn coarsen(&self) -> Self {
        let pair = |v: &[f64]| v.chunks_exact(2).map(|c| c[0] + c[1]).collect();
        Self { dt: 2.0 * self.dt, d_bq: pair(&self.d_bq), d_bx: pair(&self.d_bx), d_bs: pair(&self.d_bs) }
    }
}

/// A strategy's affine rate v = g_k'x + c_k tabulated at the step start times.
#[derive(Debug, Clone)]
pub struct TabulatedPolicy {
    dim: usize,
    gains: Vec<f64>,
    offsets: Vec<f64>,
}

impl TabulatedPolicy {
    pub fn new(strategy: &Strategy, grid: &TimeGrid, dim: usize) -> Result<Self> {
        let ts = grid.times();
        let steps = ts.len() - 1;
        let mut gains = Vec::with_capacity(steps * dim);
        let mut offsets = Vec::with_capacity(steps);
        for k in 0..steps {
            if let Strategy::AlmgrenChriss { kappa, x0, horizon } = strategy {
                // Open-loop schedule: the applied rate is the step average, so
                // noiseless positions land on the schedule at every node.
                let x_a = crate::strategies::ac_position(ts[k], *x0, *horizon, *kappa);
                let x_b = crate::strategies::ac_position(ts[k + 1], *x0, *horizon, *kappa);
                gains.extend(std::iter::repeat_n(0.0, dim));
                offsets.push((x_a - x_b) / (ts[k + 1] - ts[k]));
            } else {
                let (g, c) = strategy.affine(ts[k], dim)?;
                gains.extend(g);
                offsets.push(c);
            }
        }
        Ok(Self { dim, gains, offsets })
    }

    #[inline]
    fn rate(&self, k: usize, x: &[f64]) -> f64 {
        let g = &self.gains[k * self.dim..(k + 1) * self.dim];
        g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.offsets[k]
    }
}

/// One simulated trajectory. `state` is row-major, one (Q_1..Q_n, X) row per node.
#[derive(Debug, Clone)]
pub struct SimPath {
    pub times: Vec<f64>,
    pub dim: usize,
    pub state: Vec<f64>,
    pub rate: Vec<f64>,
    pub price: Vec<f64>,
    pub traded_price: Vec<f64>,
    pub brownian: BrownianIncrements,
}

impl SimPath {
    pub fn state_at(&self, k: usize) -> &[f64] {
        &self.state[k * self.dim..(k + 1) * self.dim]
    }

    pub fn position(&self, k: usize) -> f64 {
        self.state[k * self.dim + self.dim - 1]
    }

    pub fn steps(&self) -> usize {
        self.rate.len()
    }

    pub fn terminal_position(&self) -> f64 {
        self.position(self.steps())
    }
}

fn simulate_tabulated(
    policy: &TabulatedPolicy,
    ctx: &SimContext,
    grid: &TimeGrid,
    inc: &BrownianIncrements,
) -> Result<SimPath> {
    let cfg = &ctx.cfg;
    let dim = ctx.dim();
    let n = dim - 1;
    let ts = grid.times();
    let steps = ts.len() - 1;
    if inc.steps() != steps {
        return Err(Error::InvalidArgument(format!("{} increments for {steps} steps", inc.steps())));
    }
    let mut state = Vec::with_capacity((steps + 1) * dim);
    state.extend(ctx.cfg.initial_state().iter());
    let mut rate = Vec::with_capacity(steps);
    let mut price = Vec::with_capacity(steps + 1);
    let mut traded = Vec::with_capacity(steps);
    let weights: Vec<f64> = cfg.makers.iter().map(|m| m.weight).collect();
    let fair = |t: f64, b_s: f64, x: &[f64]| {
        let qm: f64 = weights.iter().zip(&x[..n]).map(|(w, q)| w * q).sum();
        cfg.s0 + cfg.mu * t + cfg.sigma_s * b_s + cfg.gamma * (x[n] - cfg.x0) - cfg.phi * qm
    };
    let mut b_s = 0.0;
    price.push(fair(ts[0], 0.0, &state[..dim]));
    for k in 0..steps {
        let dt = ts[k + 1] - ts[k];
        let base = k * dim;
        let v = policy.rate(k, &state[base..base + dim]);
        rate.push(v);
        traded.push(price[k] - cfg.eta * v);
        for (i, mk) in cfg.makers.iter().enumerate() {
            let q = state[base + i];
            state.push(q + mk.theta * (mk.qbar1 * v + mk.qbar0 - q) * dt + mk.sigma_q * inc.d_bq[k]);
        }
        state.push(state[base + n] - v * dt + cfg.m * inc.d_bx[k]);
        b_s += inc.d_bs[k];
        let next = &state[base + dim..base + 2 * dim];
        if !next.iter().all(|x| x.is_finite()) || !v.is_finite() {
            return Err(Error::NonFinite { step: k });
        }
        price.push(fair(ts[k + 1], b_s, next));
    }
    Ok(SimPath { times: ts.to_vec(), dim, state, rate, price, traded_price: traded, brownian: inc.clone() })
}

/// Euler–Maruyama with v_k evaluated at (t_k, x_k).
pub fn simulate_path(
    strategy: &Strategy,
    ctx: &SimContext,
    grid: &TimeGrid,
    inc: &BrownianIncrements,
) -> Result<SimPath> {
    let policy = TabulatedPolicy::new(strategy, grid, ctx.dim())?;
    simulate_tabulated(&policy, ctx, grid, inc)
}

/// X(T)(S(T) − S(0)) + Σ (S(0) − S̃_k)(X_{k+1} − X_k).
pub fn pnl_definitional(path: &SimPath) -> f64 {
    let s0 = path.price[0];
    let steps = path.steps();
    let integral: f64 =
        (0..steps).map(|k| (s0 - path.traded_price[k]) * (path.position(k + 1) - path.position(k))).sum();
    path.terminal_position() * (path.price[steps] - s0) + integral
}

/// Integration-by-parts form of the P&L with left-point stochastic sums.
pub fn pnl_closed_form(path: &SimPath, cfg: &MarketConfig) -> f64 {
    let n = path.dim - 1;
    let sigma_qm = cfg.sigma_qm();
    let horizon = path.times[path.steps()] - path.times[0];
    let mut total = cfg.gamma * cfg.m * cfg.m * horizon;
    for k in 0..path.steps() {
        let dt = path.times[k + 1] - path.times[k];
        let x = path.state_at(k);
        let xk = x[n];
        let v = path.rate[k];
        let pull: f64 =
            cfg.makers.iter().zip(&x[..n]).map(|(mk, q)| mk.weight * mk.theta * (mk.qbar1 * v + mk.qbar0 - q)).sum();
        total += (-cfg.eta * v * v - cfg.gamma * v * xk + (cfg.mu - cfg.phi * pull) * xk) * dt;
        total += -cfg.phi * sigma_qm * xk * path.brownian.d_bq[k];
        total += cfg.m * (cfg.eta * v + cfg.gamma * xk) * path.brownian.d_bx[k];
        total += cfg.sigma_s * xk * path.brownian.d_bs[k];
    }
    total
}

/// Left-point sum of m²η²v² + 2m²ηγXv + (φ²σ_QM² + m²γ² + σ_S²)X².
pub fn quadratic_variation(path: &SimPath, cfg: &MarketConfig) -> f64 {
    let sigma_qm = cfg.sigma_qm();
    let m2 = cfg.m * cfg.m;
    let cx = cfg.phi * cfg.phi * sigma_qm * sigma_qm + m2 * cfg.gamma * cfg.gamma + cfg.sigma_s * cfg.sigma_s;
    (0..path.steps())
        .map(|k| {
            let dt = path.times[k + 1] - path.times[k];
            let (v, x) = (path.rate[k], path.position(k));
            (m2 * cfg.eta * cfg.eta * v * v + 2.0 * m2 * cfg.eta * cfg.gamma * x * v + cx * x * x) * dt
        })
        .sum()
}

/// P&L − βX(T)² − λ·QV.
pub fn objective_econ(path: &SimPath, cfg: &MarketConfig) -> f64 {
    let xt = path.terminal_position();
    pnl_definitional(path) - cfg.beta * xt * xt - cfg.lambda * quadratic_variation(path, cfg)
}

/// x(T)'Gx(T) + ∫(2v k'x − η̃v² − ψX² + μX)du along the piecewise-linear
/// interpolation of the Euler path, v constant on each step.
pub fn objective_lq(path: &SimPath, mats: &StateMatrices, eff: &EffectiveParams, mu: f64) -> f64 {
    let dim = path.dim;
    let n = dim - 1;
    let mut total = 0.0;
    for k in 0..path.steps() {
        let dt = path.times[k + 1] - path.times[k];
        let (a, b) = (path.state_at(k), path.state_at(k + 1));
        let kx: f64 = (0..dim).map(|i| mats.k[i] * (a[i] + b[i]) * 0.5).sum();
        let v = path.rate[k];
        let (x0, x1) = (a[n], b[n]);
        let x2 = (x0 * x0 + x0 * x1 + x1 * x1) / 3.0;
        total += (2.0 * v * kx - eff.eta_tilde * v * v - eff.psi * x2 + mu * (x0 + x1) * 0.5) * dt;
    }
    let xt = DVector::from_column_slice(path.state_at(path.steps()));
    total + xt.dot(&(&mats.g * &xt))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathOutcome {
    pub pnl_def: f64,
    pub pnl_cf: f64,
    pub qv: f64,
    pub terminal_position: f64,
    pub block_penalty: f64,
    pub objective_econ: f64,
    pub objective_lq: f64,
}

impl PathOutcome {
    pub fn from_path(path: &SimPath, ctx: &SimContext) -> Self {
        let cfg = &ctx.cfg;
        let pnl_def = pnl_definitional(path);
        let qv = quadratic_variation(path, cfg);
        let xt = path.terminal_position();
        let block_penalty = cfg.beta * xt * xt;
        Self {
            pnl_def,
            pnl_cf: pnl_closed_form(path, cfg),
            qv,
            terminal_position: xt,
            block_penalty,
            objective_econ: pnl_def - block_penalty - cfg.lambda * qv,
            objective_lq: objective_lq(path, &ctx.mats, &ctx.eff, cfg.mu),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub strategies: Vec<String>,
    /// outcomes[s][p]: strategy s on path p.
    pub outcomes: Vec<Vec<PathOutcome>>,
    /// Path-average position per strategy at every node.
    pub mean_position: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub seed: u64,
    pub n_paths: usize,
    pub dt: f64,
}

impl SimResult {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.strategies.iter().position(|s| s == name)
    }

    pub fn column(&self, s: usize, f: impl Fn(&PathOutcome) -> f64) -> Vec<f64> {
        self.outcomes[s].iter().map(f).collect()
    }

    /// One row per (strategy, path).
    pub fn write_outcomes_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "strategy",
            "path",
            "pnl_def",
            "pnl_cf",
            "qv",
            "terminal_position",
            "block_penalty",
            "objective_econ",
            "objective_lq",
        ])?;
        for (s, name) in self.strategies.iter().enumerate() {
            for (p, o) in self.outcomes[s].iter().enumerate() {
                w.write_record([
                    name.clone(),
                    p.to_string(),
                    format!("{:e}", o.pnl_def),
                    format!("{:e}", o.pnl_cf),
                    format!("{:e}", o.qv),
                    format!("{:e}", o.terminal_position),
                    format!("{:e}", o.block_penalty),
                    format!("{:e}", o.objective_econ),
                    format!("{:e}", o.objective_lq),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Columns t, then the mean position under each strategy.
    pub fn write_mean_positions_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend(self.strategies.iter().cloned());
        w.write_record(&header)?;
        for (k, t) in self.times.iter().enumerate() {
            let mut row = vec![format!("{t:e}")];
            row.extend(self.mean_position.iter().map(|m| format!("{:e}", m[k])));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

struct ChunkResult {
    outcomes: Vec<Vec<PathOutcome>>,
    position_sums: Vec<Vec<f64>>,
}

/// Runs every strategy on the same `n_paths` Brownian paths. The result is a
/// deterministic function of the inputs, independent of the thread count.
pub fn monte_carlo(strategies: &[Strategy], ctx: &SimContext, n_paths: usize, dt: f64, seed: u64) -> Result<SimResult> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    if strategies.is_empty() {
        return Err(Error::InvalidArgument("no strategies to simulate".into()));
    }
    if n_paths.saturating_mul(strategies.len()) > MAX_OUTCOMES {
        return Err(Error::InvalidArgument(format!(
            "{n_paths} paths x {} strategies exceeds the limit of {MAX_OUTCOMES} outcomes",
            strategies.len()
        )));
    }
    let grid = TimeGrid::with_step(ctx.cfg.horizon, dt)?;
    let steps = grid.len() - 1;
    let policies = strategies.iter().map(|s| TabulatedPolicy::new(s, &grid, ctx.dim())).collect::<Result<Vec<_>>>()?;
    let n_chunks = n_paths.div_ceil(CHUNK);
    let chunks: Vec<ChunkResult> = (0..n_chunks)
        .into_par_iter()
        .map(|c| -> Result<ChunkResult> {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n_paths);
            let mut outcomes = vec![Vec::with_capacity(hi - lo); policies.len()];
            let mut sums = vec![vec![0.0; steps + 1]; policies.len()];
            for p in lo..hi {
                let inc = BrownianIncrements::draw(seed, p as u64, steps, dt);
                for (s, pol) in policies.iter().enumerate() {
                    let path = simulate_tabulated(pol, ctx, &grid, &inc)?;
                    outcomes[s].push(PathOutcome::from_path(&path, ctx));
                    for (k, acc) in sums[s].iter_mut().enumerate() {
                        *acc += path.position(k);
                    }
                }
            }
            Ok(ChunkResult { outcomes, position_sums: sums })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut outcomes = vec![Vec::with_capacity(n_paths); strategies.len()];
    let mut mean_position = vec![vec![0.0; steps + 1]; strategies.len()];
    for ch in chunks {
        for s in 0..strategies.len() {
            outcomes[s].extend_from_slice(&ch.outcomes[s]);
            for (acc, v) in mean_position[s].iter_mut().zip(&ch.position_sums[s]) {
                *acc += v;
            }
        }
    }
    for m in mean_position.iter_mut() {
        for v in m.iter_mut() {
            *v /= n_paths as f64;
        }
    }
    Ok(SimResult {
        strategies: strategies.iter().map(|s| s.name()).collect(),
        outcomes,
        mean_position,
        times: grid.times().to_vec(),
        seed,
        n_paths,
        dt,
    })
}

/// E[x(t)] under an affine strategy: RK4 on dx̄/dt = Ax̄ + a(g'x̄ + c) + b.
pub fn expected_trajectory(strategy: &Strategy, ctx: &SimContext, grid: &TimeGrid) -> Result<Vec<DVector<f64>>> {
    let mats = &ctx.mats;
    let dim = ctx.dim();
    let f = |t: f64, x: &DVector<f64>| -> Result<DVector<f64>> {
        let (g, c) = strategy.affine(t, dim)?;
        let v = g.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() + c;
        Ok(&mats.a_mat * x + &mats.a * v + &mats.b)
    };
    let ts = grid.times();
    let mut out = Vec::with_capacity(ts.len());
    let mut x = ctx.cfg.initial_state();
    out.push(x.clone());
    for k in 0..ts.len() - 1 {
        let (t, h) = (ts[k], ts[k + 1] - ts[k]);
        let k1 = f(t, &x)?;
        let k2 = f(t + h / 2.0, &(&x + &k1 * (h / 2.0)))?;
        let k3 = f(t + h / 2.0, &(&x + &k2 * (h / 2.0)))?;
        let k4 = f(ts[k + 1], &(&x + &k3 * h))?;
        x += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        out.push(x.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MarketMakerSpec, QbarRule};
    use crate::strategies::{ac_kappa, ac_position, StrategyKind};

    fn quiet(cfg: &mut MarketConfig) {
        cfg.m = 0.0;
        cfg.sigma_s = 0.0;
        for mk in cfg.makers.iter_mut() {
            mk.sigma_q = 0.0;
        }
    }

    #[test]
    fn brownian_streams_are_reproducible_and_distinct() {
        let a = BrownianIncrements::draw(5, 3, 100, 0.01);
        assert_eq!(a, BrownianIncrements::draw(5, 3, 100, 0.01));
        assert_ne!(a.d_bq, BrownianIncrements::draw(5, 4, 100, 0.01).d_bq);
        let c = a.coarsen();
        assert_eq!(c.steps(), 50);
        assert_eq!(c.d_bx[1], a.d_bx[2] + a.d_bx[3]);
    }

    #[test]
    fn noiseless_twap_is_linear() {
        let mut cfg = MarketConfig::reference(0.0, QbarRule::Feedback);
        quiet(&mut cfg);
        let ctx = SimContext::new(&cfg);
        let grid = TimeGrid::with_step(1.0, 1e-3).unwrap();
        let s = Strategy::build(StrategyKind::Twap, &cfg, &ctx.mats, &ctx.eff, None).unwrap();
        let path = simulate_path(&s, &ctx, &grid, &BrownianIncrements::zeros(1000, 1e-3)).unwrap();
        for k in (0..=1000).step_by(100) {
            let want = cfg.x0 * (1.0 - path.times[k]);
            assert!((path.position(k) - want).abs() <= 1e-9 * cfg.x0);
        }
        assert_eq!(path.price[0], cfg.s0);
    }

    #[test]
    fn noiseless_ac_hits_schedule() {
        let mut cfg = MarketConfig::reference(0.001, QbarRule::Feedback);
        quiet(&mut cfg);
        cfg.sigma_s = 0.5;
        let ctx = SimContext::new(&cfg);
        let grid = TimeGrid::with_step(1.0, 1e-3).unwrap();
        let s = Strategy::build(StrategyKind::AlmgrenChriss, &cfg, &ctx.mats, &ctx.eff, None).unwrap();
        let path = simulate_path(&s, &ctx, &grid, &BrownianIncrements::zeros(1000, 1e-3)).unwrap();
        let kappa = ac_kappa(&cfg).unwrap();
        for k in [0, 250, 500, 1000] {
            let want = ac_position(path.times[k], cfg.x0, 1.0, kappa);
            assert!((path.position(k) - want).abs() <= 1e-9 * cfg.x0);
        }
    }

    #[test]
    fn inventories_stay_flat_without_forcing() {
        let mut cfg = MarketConfig::reference(0.0, QbarRule::NoFeedback);
        quiet(&mut cfg);
        for mk in cfg.makers.iter_mut() {
            mk.qbar0 = 0.0;
        }
        let ctx = SimContext::new(&cfg);
        let grid = TimeGrid::with_step(1.0, 1e-2).unwrap();
        let s = Strategy::build(StrategyKind::AdaptedTwap, &cfg, &ctx.mats, &ctx.eff, None).unwrap();
        let path = simulate_path(&s, &ctx, &grid, &BrownianIncrements::zeros(100, 1e-2)).unwrap();
        for k in 0..=100 {
            assert!(path.state_at(k)[..10].iter().all(|&q| q == 0.0));
        }
    }

    #[test]
    fn deterministic_twap_pnl_both_forms() {
        // −(γ/2)x₀² − ηx₀²/T for a linear schedule with no noise.
        let mut cfg = MarketConfig::reference(0.0, QbarRule::NoFeedback);
        quiet(&mut cfg);
        cfg.phi = 0.0;
        let ctx = SimContext::new(&cfg);
        let grid = TimeGrid::with_step(1.0, 1e-3).unwrap();
        let s = Strategy::build(StrategyKind::Twap, &cfg, &ctx.mats, &ctx.eff, None).unwrap();
        let path = simulate_path(&s, &ctx, &grid, &BrownianIncrements::zeros(1000, 1e-3)).unwrap();
        let want = -cfg.gamma / 2.0 * cfg.x0 * cfg.x0 - cfg.eta * cfg.x0 * cfg.x0;
        // The left-point sum of the permanent-impact term carries a γx₀²dt/2 bias.
        let def = pnl_definitional(&path);
        let cf = pnl_closed_form(&path, &cfg);
        let bias = cfg.gamma * cfg.x0 * cfg.x0 * 1e-3 / 2.0;
        assert!((def - (want + bias)).abs() < 1e-6 * want.abs(), "{def} vs {want}");
        assert!((cf - (want - bias)).abs() < 1e-6 * want.abs(), "{cf} vs {want}");
    }

    #[test]
    fn zero_trading_zero_noise_pnl_vanishes() {
        let mut cfg = MarketConfig::reference(0.0, QbarRule::NoFeedback);
        quiet(&mut cfg);
        for mk in cfg.makers.iter_mut() {
            mk.qbar0 = 0.0;
        }
        let ctx = SimContext::new(&cfg);
        let grid = TimeGrid::with_step(1.0, 1e-2).unwrap();
        let path = simulate_path(&Strategy::Constant { rate: 0.0 }, &ctx, &grid, &BrownianIncrements::zeros(100, 1e-2))
            .unwrap();
        assert_eq!(pnl_definitional(&path), 0.0);
        assert_eq!(pnl_closed_form(&path, &cfg), 0.0);
        let econ = objective_econ(&path, &cfg);
        assert!((econ + cfg.beta * cfg.x0 * cfg.x0).abs() < 1e-9);
    }

    #[test]
    fn quadratic_variation_special_cases() {
        let mut cfg = MarketConfig::reference(0.0, QbarRule::NoFeedback);
        quiet(&mut cfg);
        cfg.phi = 0.0;
        let ctx = SimContext::new(&cfg);
        let grid = TimeGrid::with_step(1.0, 1e-2).unwrap();
        let inc = BrownianIncrements::draw(1, 0, 100, 1e-2);
        let twap = Strategy::Twap { rate: cfg.x0 };
        let path = simulate_path(&twap, &ctx, &grid, &inc).unwrap();
        assert_eq!(quadratic_variation(&path, &cfg), 0.0);

        let mut cfg2 = MarketConfig::reference(0.0, QbarRule::NoFeedback);
        cfg2.m = 0.0;
        let ctx2 = SimContext::new(&cfg2);
        let hold = simulate_path(&Strategy::Constant { rate: 0.0 }, &ctx2, &grid, &inc).unwrap();
        let c = cfg2.phi.powi(2) * cfg2.sigma_qm().powi(2) + cfg2.sigma_s.powi(2);
        let want = c * cfg2.x0 * cfg2.x0;
        assert!((quadratic_variation(&hold, &cfg2) - want).abs() < 1e-12 * want);
    }

    #[test]
    fn lq_penalties_equal_scaled_quadratic_variation() {
        let cfg = MarketConfig::reference(0.001, QbarRule::Feedback);
        let ctx = SimContext::new(&cfg);
        let grid = TimeGrid::with_step(1.0, 1e-3).unwrap();
        let twap = Strategy::build(StrategyKind::Twap, &cfg, &ctx.mats, &ctx.eff, None).unwrap();
        for p in 0..5 {
            let path = simulate_path(&twap, &ctx, &grid, &BrownianIncrements::draw(9, p, 1000, 1e-3)).unwrap();
            let (et, xi, psi) = (ctx.eff.eta_tilde, ctx.eff.xi_tilde, ctx.eff.psi);
            for k in 0..path.steps() {
                let (v, x) = (path.rate[k], path.position(k));
                let lhs = (-et * v * v - psi * x * x - xi * x * v) - (-cfg.eta * v * v);
                let sigma_qm = cfg.sigma_qm();
                let integrand = cfg.m.powi(2) * cfg.eta.powi(2) * v * v
                    + 2.0 * cfg.m.powi(2) * cfg.eta * cfg.gamma * x * v
                    + (cfg.phi.powi(2) * sigma_qm.powi(2) + cfg.m.powi(2) * cfg.gamma.powi(2) + cfg.sigma_s.powi(2))
                        * x
                        * x;
                let rhs = -cfg.lambda * integrand;
                assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn mismatched_increments_rejected() {
        let cfg = MarketConfig::reference(0.0, QbarRule::Feedback);
        let ctx = SimContext::new(&cfg);
        let grid = TimeGrid::with_step(1.0, 1e-2).unwrap();
        let r = simulate_path(&Strategy::Constant { rate: 0.0 }, &ctx, &grid, &BrownianIncrements::zeros(10, 1e-2));
        assert!(r.is_err());
    }

    #[test]
    fn monte_carlo_is_deterministic_and_validates() {
        let cfg = MarketConfig::reference(0.0, QbarRule::Feedback);
        let ctx = SimContext::new(&cfg);
        let s = vec![Strategy::build(StrategyKind::Twap, &cfg, &ctx.mats, &ctx.eff, None).unwrap()];
        let a = monte_carlo(&s, &ctx, 300, 1e-2, 42).unwrap();
        let b = monte_carlo(&s, &ctx, 300, 1e-2, 42).unwrap();
        assert_eq!(a.outcomes, b.outcomes);
        assert_eq!(a.mean_position, b.mean_position);
        assert!(monte_carlo(&s, &ctx, 0, 1e-2, 42).is_err());
        assert!(monte_carlo(&[], &ctx, 10, 1e-2, 42).is_err());
    }

    #[test]
    fn single_maker_inventory_mean() {
        let cfg = MarketConfig {
            makers: vec![MarketMakerSpec { theta: 2.0, sigma_q: 0.5, qbar1: 0.0, qbar0: 1.0, weight: 1.0 }],
            gamma: 0.0,
            eta: 1.0,
            phi: 0.0,
            mu: 0.0,
            sigma_s: 1.0,
            s0: 1.0,
            x0: 1.0,
            m: 0.0,
            horizon: 1.0,
            beta: 1.0,
            lambda: 0.0,
        };
        let ctx = SimContext::new(&cfg);
        let grid = TimeGrid::with_step(1.0, 1e-3).unwrap();
        let hold = Strategy::Constant { rate: 0.0 };
        let pol = TabulatedPolicy::new(&hold, &grid, 2).unwrap();
        let n = 10_000;
        let finals: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|p| {
                let inc = BrownianIncrements::draw(3, p as u64, 1000, 1e-3);
                simulate_tabulated(&pol, &ctx, &grid, &inc).unwrap().state_at(1000)[0]
            })
            .collect();
        let mean = finals.iter().sum::<f64>() / n as f64;
        let var = finals.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let want = 1.0 - (-2.0f64).exp();
        assert!((mean - want).abs() < 3.0 * se, "{mean} vs {want} (se {se})");
    }
}
