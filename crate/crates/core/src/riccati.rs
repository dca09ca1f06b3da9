//! Backward Riccati system for the quadratic value function
//! w(t, x) = x'R(t)x + r(t)'x + φ(t).
//!
//! R solves Ṙ = ψee' − (1/η̃){Raa'R + B'R + RB + kk'} with B = η̃A + ak' and
//! R(T) = G. It is computed either from the doubled linear flow
//! [M; N](t) = exp(−(T − t)Ψ)[G; I], R = M N⁻¹, or by direct RK4.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expm::{expm, norm1};
use crate::grid::TimeGrid;
use crate::model::{EffectiveParams, MarketConfig, StateMatrices};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Linearized,
    Direct,
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub r_mat: Vec<DMatrix<f64>>,
    pub r_vec: Vec<DVector<f64>>,
    pub phi: Vec<f64>,
    pub method: Method,
}

/// Condition-number estimate of N(t) above which the linearized solve gives up.
pub const SINGULAR_THRESHOLD: f64 = 1e12;

/// Relative three-point derivative error targeted by [`default_grid`].
pub const DEFAULT_GRID_TOL: f64 = 2e-7;

/// Coarsest step of [`default_grid`], as a fraction of the horizon.
pub const DEFAULT_MAX_STEP_FRACTION: f64 = 1.0 / 2000.0;

/// Right-hand side data, written as Ṙ = Q₀ − R P R − C'R − RC with
/// C = A + ak'/η̃, P = aa'/η̃ and Q₀ = ψee' − kk'/η̃.
#[derive(Debug, Clone)]
pub struct RiccatiCoeffs {
    pub c: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub q0: DMatrix<f64>,
    a_scaled: DVector<f64>,
}

impl RiccatiCoeffs {
    pub fn new(mats: &StateMatrices, eff: &EffectiveParams) -> Self {
        let et = eff.eta_tilde;
        let c = &mats.a_mat + &mats.a * mats.k.transpose() / et;
        let p = &mats.a * mats.a.transpose() / et;
        let q0 = &mats.e_last * mats.e_last.transpose() * eff.psi - &mats.k * mats.k.transpose() / et;
        Self { c, p, q0, a_scaled: &mats.a / et.sqrt() }
    }

    /// dR/dt at R. Symmetric whenever R is.
    pub fn rhs(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        let u = r * &self.a_scaled;
        let rc = r * &self.c;
        &self.q0 - &u * u.transpose() - &rc - rc.transpose()
    }

    /// The 2(n+1) × 2(n+1) matrix Ψ of the doubled flow.
    pub fn psi_matrix(&self) -> DMatrix<f64> {
        self.balanced_psi(1.0)
    }

    /// Ψ conjugated by diag(I, dI): upper-right block times d, lower-left over d.
    fn balanced_psi(&self, d: f64) -> DMatrix<f64> {
        let n = self.c.nrows();
        let mut psi = DMatrix::zeros(2 * n, 2 * n);
        psi.view_mut((0, 0), (n, n)).copy_from(&(-self.c.transpose()));
        psi.view_mut((0, n), (n, n)).copy_from(&(&self.q0 * d));
        psi.view_mut((n, 0), (n, n)).copy_from(&(&self.p / d));
        psi.view_mut((n, n), (n, n)).copy_from(&self.c);
        psi
    }

    fn balance_factor(&self) -> f64 {
        let pn = norm1(&self.p);
        let qn = norm1(&self.q0);
        if pn > 0.0 && qn > 0.0 {
            (pn / qn).sqrt()
        } else {
            1.0
        }
    }
}

/// Boundary-layer length of the value function near T: η̃/(β − (γ + ξ̃)/2),
/// capped at the horizon.
pub fn terminal_layer(cfg: &MarketConfig, eff: &EffectiveParams) -> f64 {
    let gap = cfg.beta - (cfg.gamma + eff.xi_tilde) / 2.0;
    if gap > 0.0 {
        (eff.eta_tilde / gap).min(cfg.horizon)
    } else {
        cfg.horizon
    }
}

/// Graded grid resolving the terminal boundary layer.
pub fn default_grid(cfg: &MarketConfig, eff: &EffectiveParams) -> Result<TimeGrid> {
    TimeGrid::graded(cfg.horizon, terminal_layer(cfg, eff), DEFAULT_GRID_TOL, cfg.horizon * DEFAULT_MAX_STEP_FRACTION)
}

/// Hager's estimate of ‖B⁻¹‖₁ from solves with B and B'.
fn inverse_norm1_estimate(
    solve: impl Fn(&DVector<f64>) -> Option<DVector<f64>>,
    solve_t: impl Fn(&DVector<f64>) -> Option<DVector<f64>>,
    n: usize,
) -> f64 {
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut est = 0.0;
    for _ in 0..5 {
        let Some(y) = solve(&x) else { return f64::INFINITY };
        est = y.iter().map(|v| v.abs()).sum();
        let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let Some(z) = solve_t(&xi) else { return f64::INFINITY };
        let (j, zmax) =
            z.iter().enumerate().fold((0, 0.0), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        if zmax <= z.dot(&x) {
            break;
        }
        x = DVector::zeros(n);
        x[j] = 1.0;
    }
    est
}

/// 1-norm condition estimate of a square matrix.
pub fn condition_estimate(b: &DMatrix<f64>) -> f64 {
    let lu = b.clone().lu();
    let lu_t = b.transpose().lu();
    let inv = inverse_norm1_estimate(|v| lu.solve(v), |v| lu_t.solve(v), b.nrows());
    norm1(b) * inv
}

/// [M; N] at every grid node.
#[derive(Debug, Clone)]
pub struct DoubledFlow {
    pub psi: DMatrix<f64>,
    pub m: Vec<DMatrix<f64>>,
    pub n: Vec<DMatrix<f64>>,
}

/// Walks the doubled flow backward from T, calling `visit(index, M, N̂, d)`
/// where the true N is d·N̂.
fn walk_flow(
    coeffs: &RiccatiCoeffs,
    g: &DMatrix<f64>,
    grid: &TimeGrid,
    mut visit: impl FnMut(usize, &DMatrix<f64>, &DMatrix<f64>, f64) -> Result<()>,
) -> Result<()> {
    let dim = g.nrows();
    let d = coeffs.balance_factor();
    let psi = coeffs.balanced_psi(d);
    let mut state = DMatrix::zeros(2 * dim, dim);
    state.view_mut((0, 0), (dim, dim)).copy_from(g);
    state.view_mut((dim, 0), (dim, dim)).copy_from(&(DMatrix::<f64>::identity(dim, dim) / d));
    let mut idx = grid.len() - 1;
    visit(idx, &state.rows(0, dim).into_owned(), &state.rows(dim, dim).into_owned(), d)?;
    for seg in grid.segments() {
        let prop = expm(&(&psi * (-seg.h)))?;
        for _ in 0..seg.steps {
            state = &prop * &state;
            idx -= 1;
            visit(idx, &state.rows(0, dim).into_owned(), &state.rows(dim, dim).into_owned(), d)?;
        }
    }
    Ok(())
}

pub fn doubled_flow(mats: &StateMatrices, eff: &EffectiveParams, grid: &TimeGrid) -> Result<DoubledFlow> {
    let coeffs = RiccatiCoeffs::new(mats, eff);
    let mut m = vec![DMatrix::zeros(0, 0); grid.len()];
    let mut n = vec![DMatrix::zeros(0, 0); grid.len()];
    walk_flow(&coeffs, &mats.g, grid, |i, mm, nn, d| {
        m[i] = mm.clone();
        n[i] = nn * d;
        Ok(())
    })?;
    Ok(DoubledFlow { psi: coeffs.psi_matrix(), m, n })
}

fn symmetrize(r: &DMatrix<f64>) -> DMatrix<f64> {
    (r + r.transpose()) * 0.5
}

fn empty_solution(grid: &TimeGrid, dim: usize, r_mat: Vec<DMatrix<f64>>, method: Method) -> RiccatiSolution {
    RiccatiSolution {
        grid: grid.clone(),
        r_mat,
        r_vec: vec![DVector::zeros(dim); grid.len()],
        phi: vec![0.0; grid.len()],
        method,
    }
}

fn determinant_sign(lu: &nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> f64 {
    let u = lu.u();
    lu.p().determinant::<f64>() * u.diagonal().iter().map(|x| x.signum()).product::<f64>()
}

/// R from R·N = M at every node, solving N'R' = M' by LU with partial pivoting.
pub fn solve_riccati_linearized(
    mats: &StateMatrices,
    eff: &EffectiveParams,
    grid: &TimeGrid,
) -> Result<RiccatiSolution> {
    let coeffs = RiccatiCoeffs::new(mats, eff);
    let dim = mats.dim();
    let last = grid.len() - 1;
    let mut r_mat = vec![DMatrix::zeros(0, 0); grid.len()];
    walk_flow(&coeffs, &mats.g, grid, |i, m, n_hat, d| {
        if i == last {
            r_mat[i] = mats.g.clone();
            return Ok(());
        }
        let t = grid.times()[i];
        let cond = condition_estimate(n_hat);
        if !(cond <= SINGULAR_THRESHOLD) {
            return Err(Error::SingularFlow { t, condition: cond });
        }
        let lu = n_hat.transpose().lu();
        // det N(T) > 0; a sign change means R escaped to infinity between nodes.
        if determinant_sign(&lu) <= 0.0 {
            return Err(Error::SingularFlow { t, condition: f64::INFINITY });
        }
        let rt = lu.solve(&m.transpose()).ok_or(Error::SingularFlow { t, condition: f64::INFINITY })?;
        r_mat[i] = symmetrize(&(rt.transpose() / d));
        Ok(())
    })?;
    Ok(empty_solution(grid, dim, r_mat, Method::Linearized))
}

/// Default bound on |R| entries for [`integrate_riccati_direct`].
pub const DEFAULT_DIVERGENCE_BOUND: f64 = 1e12;

/// Backward RK4 on the grid from R(T) = G, symmetrized after each step.
pub fn integrate_riccati_direct(
    mats: &StateMatrices,
    eff: &EffectiveParams,
    grid: &TimeGrid,
    bound: f64,
) -> Result<RiccatiSolution> {
    let coeffs = RiccatiCoeffs::new(mats, eff);
    let k_last = grid.len() - 1;
    let mut r_mat = vec![DMatrix::zeros(0, 0); grid.len()];
    let mut r = mats.g.clone();
    r_mat[k_last] = r.clone();
    for (j, h) in grid.steps_backward().enumerate() {
        let k1 = coeffs.rhs(&r);
        let k2 = coeffs.rhs(&(&r - &k1 * (h / 2.0)));
        let k3 = coeffs.rhs(&(&r - &k2 * (h / 2.0)));
        let k4 = coeffs.rhs(&(&r - &k3 * h));
        r = symmetrize(&(&r - (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)));
        let idx = k_last - j - 1;
        let mag = r.amax();
        if !(mag <= bound) {
            return Err(Error::Divergence { t: grid.times()[idx], magnitude: mag });
        }
        r_mat[idx] = r.clone();
    }
    Ok(empty_solution(grid, mats.dim(), r_mat, Method::Direct))
}

/// Cubic Hermite midpoint value from endpoint values and derivatives.
fn hermite_mid(y0: &DMatrix<f64>, d0: &DMatrix<f64>, y1: &DMatrix<f64>, d1: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    (y0 + y1) * 0.5 + (d0 - d1) * (h / 8.0)
}

/// Backward RK4 for r and φ from r(T) = 0, φ(T) = 0, with R at step
/// midpoints from cubic Hermite interpolation. Fills `sol.r_vec`, `sol.phi`.
pub fn solve_linear_terms(sol: &mut RiccatiSolution, mats: &StateMatrices, eff: &EffectiveParams, mu: f64) {
    let coeffs = RiccatiCoeffs::new(mats, eff);
    let dim = mats.dim();
    let et = eff.eta_tilde;
    let ss = &mats.sigma * mats.sigma.transpose();
    let adiag = mats.a_mat.diagonal();
    let rhs = |rm: &DMatrix<f64>, r: &DVector<f64>| -> (DVector<f64>, f64) {
        let ar = mats.a.dot(r);
        let mut dr = adiag.component_mul(r) + rm * &mats.b * 2.0 + (rm * &mats.a + &mats.k) * (ar / et);
        dr[dim - 1] += mu;
        let dphi = ss.component_mul(rm).sum() + mats.b.dot(r) + ar * ar / (4.0 * et);
        (-dr, -dphi)
    };
    let k_last = sol.grid.len() - 1;
    let mut r = DVector::zeros(dim);
    let mut phi = 0.0;
    sol.r_vec[k_last] = r.clone();
    sol.phi[k_last] = 0.0;
    let mut d_hi = coeffs.rhs(&sol.r_mat[k_last]);
    let steps: Vec<f64> = sol.grid.steps_backward().collect();
    for (j, h) in steps.into_iter().enumerate() {
        let hi = k_last - j;
        let lo = hi - 1;
        let d_lo = coeffs.rhs(&sol.r_mat[lo]);
        let r_mid = hermite_mid(&sol.r_mat[lo], &d_lo, &sol.r_mat[hi], &d_hi, h);
        let (k1, p1) = rhs(&sol.r_mat[hi], &r);
        let (k2, p2) = rhs(&r_mid, &(&r - &k1 * (h / 2.0)));
        let (k3, p3) = rhs(&r_mid, &(&r - &k2 * (h / 2.0)));
        let (k4, p4) = rhs(&sol.r_mat[lo], &(&r - &k3 * h));
        r -= (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        phi -= (p1 + 2.0 * (p2 + p3) + p4) * (h / 6.0);
        sol.r_vec[lo] = r.clone();
        sol.phi[lo] = phi;
        d_hi = d_lo;
    }
}

/// Linearized solve with direct RK4 as fallback when N(t) is near singular,
/// followed by the linear and constant terms.
pub fn solve_full(
    cfg: &MarketConfig,
    mats: &StateMatrices,
    eff: &EffectiveParams,
    grid: &TimeGrid,
) -> Result<RiccatiSolution> {
    let mut sol = match solve_riccati_linearized(mats, eff, grid) {
        Ok(s) => s,
        Err(Error::SingularFlow { t, condition }) => {
            log::warn!("linearized solve singular at t = {t} (cond {condition:.2e}); using direct RK4");
            integrate_riccati_direct(mats, eff, grid, DEFAULT_DIVERGENCE_BOUND)?
        }
        Err(e) => return Err(e),
    };
    solve_linear_terms(&mut sol, mats, eff, cfg.mu);
    Ok(sol)
}

impl RiccatiSolution {
    pub fn times(&self) -> &[f64] {
        self.grid.times()
    }

    /// Linear interpolation weights (index, weight on index + 1).
    fn interp(&self, t: f64) -> Result<(usize, f64)> {
        let i = self.grid.locate(t)?;
        let ts = self.grid.times();
        Ok((i, (t - ts[i]) / (ts[i + 1] - ts[i])))
    }

    pub fn r_mat_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let (i, w) = self.interp(t)?;
        Ok(&self.r_mat[i] * (1.0 - w) + &self.r_mat[i + 1] * w)
    }

    pub fn r_vec_at(&self, t: f64) -> Result<DVector<f64>> {
        let (i, w) = self.interp(t)?;
        Ok(&self.r_vec[i] * (1.0 - w) + &self.r_vec[i + 1] * w)
    }

    pub fn phi_at(&self, t: f64) -> Result<f64> {
        let (i, w) = self.interp(t)?;
        Ok(self.phi[i] * (1.0 - w) + self.phi[i + 1] * w)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let dim = self.r_vec[0].len();
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        for i in 0..dim {
            for j in i..dim {
                header.push(format!("R_{i}_{j}"));
            }
        }
        header.extend((0..dim).map(|i| format!("r_{i}")));
        header.push("phi".into());
        wtr.write_record(&header)?;
        for (k, t) in self.times().iter().enumerate() {
            let mut row = vec![format!("{t:e}")];
            let rm = &self.r_mat[k];
            for i in 0..dim {
                for j in i..dim {
                    row.push(format!("{:e}", rm[(i, j)]));
                }
            }
            row.extend(self.r_vec[k].iter().map(|v| format!("{v:e}")));
            row.push(format!("{:e}", self.phi[k]));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_json_summary(&self, path: &Path, x: &DVector<f64>) -> Result<()> {
        let w0 = value_function(0.0, x, self)?;
        let body = serde_json::json!({
            "method": self.method,
            "grid_points": self.grid.len(),
            "state": x.as_slice(),
            "value_at_origin": w0,
        });
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &body)?;
        writeln!(f)?;
        Ok(())
    }
}

/// w(t, x) = x'R(t)x + r(t)'x + φ(t) with coefficients interpolated linearly.
pub fn value_function(t: f64, x: &DVector<f64>, sol: &RiccatiSolution) -> Result<f64> {
    let rm = sol.r_mat_at(t)?;
    Ok(x.dot(&(&rm * x)) + sol.r_vec_at(t)?.dot(x) + sol.phi_at(t)?)
}

/// ‖Ṙ − F(R)‖_F at an interior node, Ṙ from the three-point formula on the
/// (possibly non-uniform) grid.
pub fn riccati_residual_at(sol: &RiccatiSolution, coeffs: &RiccatiCoeffs, k: usize) -> Result<f64> {
    let ts = sol.times();
    if k == 0 || k + 1 >= ts.len() {
        return Err(Error::InvalidArgument(format!("residual needs an interior node, got index {k}")));
    }
    let h1 = ts[k] - ts[k - 1];
    let h2 = ts[k + 1] - ts[k];
    let deriv = &sol.r_mat[k - 1] * (-h2 / (h1 * (h1 + h2)))
        + &sol.r_mat[k] * ((h2 - h1) / (h1 * h2))
        + &sol.r_mat[k + 1] * (h1 / (h2 * (h1 + h2)));
    Ok((deriv - coeffs.rhs(&sol.r_mat[k])).norm())
}

/// Residual at the interior node equal to `t`.
pub fn riccati_residual(sol: &RiccatiSolution, mats: &StateMatrices, eff: &EffectiveParams, t: f64) -> Result<f64> {
    let ts = sol.times();
    let k = ts
        .binary_search_by(|s| s.total_cmp(&t))
        .map_err(|_| Error::InvalidArgument(format!("t = {t} is not a grid node")))?;
    riccati_residual_at(sol, &RiccatiCoeffs::new(mats, eff), k)
}

/// Largest residual over interior nodes, each divided by ‖R‖_F at that node.
pub fn max_scaled_residual(sol: &RiccatiSolution, mats: &StateMatrices, eff: &EffectiveParams) -> f64 {
    let coeffs = RiccatiCoeffs::new(mats, eff);
    (1..sol.times().len() - 1)
        .map(|k| riccati_residual_at(sol, &coeffs, k).unwrap() / sol.r_mat[k].norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_state_matrices, derive_effective_params, MarketMakerSpec, QbarRule};

    /// Single maker that does not enter the objective, so R_XX is scalar.
    fn scalar_cfg(lambda: f64, m: f64) -> MarketConfig {
        MarketConfig {
            makers: vec![MarketMakerSpec { theta: 2.0, sigma_q: 0.0, qbar1: 0.0, qbar0: 0.0, weight: 1.0 }],
            gamma: 0.2,
            eta: 0.5,
            phi: 0.0,
            mu: 0.0,
            sigma_s: 0.8,
            s0: 1.0,
            x0: 1.0,
            m,
            horizon: 1.0,
            beta: 1.5,
            lambda,
        }
    }

    fn setup(cfg: &MarketConfig) -> (StateMatrices, EffectiveParams) {
        let eff = derive_effective_params(cfg);
        (build_state_matrices(cfg, &eff), eff)
    }

    #[test]
    fn terminal_condition_is_exact() {
        let cfg = MarketConfig::reference(0.001, QbarRule::Feedback);
        let (mats, eff) = setup(&cfg);
        let grid = TimeGrid::uniform(1.0, 51).unwrap();
        let lin = solve_riccati_linearized(&mats, &eff, &grid).unwrap();
        let dir = integrate_riccati_direct(&mats, &eff, &grid, DEFAULT_DIVERGENCE_BOUND).unwrap();
        assert_eq!(lin.r_mat[50], mats.g);
        assert_eq!(dir.r_mat[50], mats.g);
    }

    #[test]
    fn risk_neutral_scalar_matches_closed_form() {
        // ψ = 0, k = 0: Ṙ = R²/η, R(t) = 1/(1/(γ/2 − β) − (T − t)/η).
        let cfg = scalar_cfg(0.0, 0.0);
        let (mats, eff) = setup(&cfg);
        let grid = TimeGrid::uniform(1.0, 201).unwrap();
        let g = cfg.gamma / 2.0 - cfg.beta;
        // RK4 at h = 0.005 is only good to about 1e-10 here
        for (sol, tol) in [
            (solve_riccati_linearized(&mats, &eff, &grid).unwrap(), 1e-10),
            (integrate_riccati_direct(&mats, &eff, &grid, 1e12).unwrap(), 1e-8),
        ] {
            for (k, t) in grid.times().iter().enumerate() {
                let exact = 1.0 / (1.0 / g - (1.0 - t) / cfg.eta);
                assert!((sol.r_mat[k][(1, 1)] - exact).abs() < tol * exact.abs(), "{:?}", sol.method);
                assert!(sol.r_mat[k][(0, 0)].abs() < 1e-18);
            }
        }
    }

    #[test]
    fn risk_averse_scalar_matches_coth_solution() {
        let cfg = scalar_cfg(0.7, 0.3);
        let (mats, eff) = setup(&cfg);
        let grid = TimeGrid::uniform(1.0, 401).unwrap();
        let sol = solve_riccati_linearized(&mats, &eff, &grid).unwrap();
        let zeta = eff.zeta.unwrap();
        let gap = cfg.beta - (cfg.gamma + eff.xi_tilde) / 2.0;
        let spe = (eff.psi * eff.eta_tilde).sqrt();
        let alpha = (spe / (gap * gap - spe * spe).sqrt()).asinh() / zeta;
        for (k, t) in grid.times().iter().enumerate() {
            let x = zeta * (1.0 - t + alpha);
            let exact = -eff.xi_tilde / 2.0 - spe / x.tanh();
            assert!((sol.r_mat[k][(1, 1)] - exact).abs() < 1e-11 * exact.abs());
        }
    }

    #[test]
    fn residual_is_second_order_on_scalar_solution() {
        let cfg = scalar_cfg(0.0, 0.0);
        let (mats, eff) = setup(&cfg);
        let mut prev = None;
        for pts in [101, 201, 401] {
            let grid = TimeGrid::uniform(1.0, pts).unwrap();
            let sol = solve_riccati_linearized(&mats, &eff, &grid).unwrap();
            let t = 0.5;
            let res = riccati_residual(&sol, &mats, &eff, t).unwrap();
            if let Some(p) = prev {
                let ratio: f64 = p / res;
                assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
            }
            prev = Some(res);
        }
    }

    #[test]
    fn residual_rejects_terminal_node() {
        let cfg = scalar_cfg(0.0, 0.0);
        let (mats, eff) = setup(&cfg);
        let grid = TimeGrid::uniform(1.0, 11).unwrap();
        let sol = solve_riccati_linearized(&mats, &eff, &grid).unwrap();
        assert!(riccati_residual(&sol, &mats, &eff, 1.0).is_err());
        assert!(riccati_residual(&sol, &mats, &eff, 0.0).is_err());
        assert!(riccati_residual(&sol, &mats, &eff, 0.55).is_err());
    }

    #[test]
    fn doubled_flow_invariants() {
        let cfg = MarketConfig::reference(0.001, QbarRule::Feedback);
        let (mats, eff) = setup(&cfg);
        let grid = TimeGrid::uniform(1.0, 21).unwrap();
        let flow = doubled_flow(&mats, &eff, &grid).unwrap();
        assert_eq!(flow.m[20], mats.g);
        let id = DMatrix::<f64>::identity(11, 11);
        assert!((&flow.n[20] - id).amax() < 1e-15);
        let sol = solve_riccati_linearized(&mats, &eff, &grid).unwrap();
        for k in 0..21 {
            let lhs = &sol.r_mat[k] * &flow.n[k];
            assert!((&lhs - &flow.m[k]).amax() <= 1e-10 * flow.m[k].amax());
        }
        assert_eq!(flow.psi.nrows(), 22);
    }

    #[test]
    fn singular_flow_is_reported_with_time() {
        // Very fast makers blow up the doubled flow's conditioning.
        let mut cfg = MarketConfig::reference(0.001, QbarRule::Feedback);
        for mk in cfg.makers.iter_mut() {
            mk.theta *= 8.0;
        }
        cfg.horizon = 2.0;
        let (mats, eff) = setup(&cfg);
        let grid = TimeGrid::uniform(2.0, 201).unwrap();
        match solve_riccati_linearized(&mats, &eff, &grid) {
            Err(Error::SingularFlow { t, condition }) => {
                assert!(t < 2.0 && condition > SINGULAR_THRESHOLD);
                // The fallback still produces a solution.
                let sol = solve_full(&cfg, &mats, &eff, &grid).unwrap();
                assert_eq!(sol.method, Method::Direct);
            }
            other => panic!("expected singular flow, got {:?}", other.map(|s| s.method)),
        }
    }

    #[test]
    fn escape_between_nodes_is_not_stepped_over() {
        // Strong inventory feedback with λ = 0: R blows up near t = 0.28
        // while N stays well conditioned at every node.
        let eta = 2.6e-6;
        let cfg = MarketConfig {
            makers: vec![MarketMakerSpec { theta: 8.43, sigma_q: 0.1, qbar1: 0.0405, qbar0: 0.1, weight: 1.0 }],
            gamma: 0.2756 * eta,
            eta,
            phi: 58.4 * eta,
            mu: 0.0,
            sigma_s: 0.5,
            s0: 50.0,
            x0: 2e5,
            m: 2e4,
            horizon: 1.0,
            beta: 1.8605 * eta,
            lambda: 0.0,
        };
        let (mats, eff) = setup(&cfg);
        let grid = TimeGrid::uniform(1.0, 1000).unwrap();
        let t_lin = match solve_riccati_linearized(&mats, &eff, &grid) {
            Err(Error::SingularFlow { t, .. }) => t,
            other => panic!("expected singular flow, got {:?}", other.map(|s| s.method)),
        };
        match solve_full(&cfg, &mats, &eff, &grid).unwrap_err() {
            Error::Divergence { t, .. } => assert!((t - t_lin).abs() < 0.01, "{t} vs {t_lin}"),
            e => panic!("expected divergence, got {e}"),
        }
    }

    #[test]
    fn direct_divergence_detected() {
        // β < γ/2 drives R to a finite-time blow-up.
        let mut cfg = scalar_cfg(0.0, 0.0);
        cfg.beta = -1.0;
        cfg.gamma = 0.0;
        let (mats, eff) = setup(&cfg);
        let grid = TimeGrid::uniform(1.0, 1001).unwrap();
        let err = integrate_riccati_direct(&mats, &eff, &grid, 1e6).unwrap_err();
        match err {
            Error::Divergence { t, .. } => assert!((t - 0.5).abs() < 0.01, "t = {t}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn linear_terms_vanish_without_sources() {
        let mut cfg = scalar_cfg(0.3, 0.0);
        cfg.sigma_s = 0.0;
        cfg.lambda = 0.0;
        let (mats, eff) = setup(&cfg);
        let grid = TimeGrid::uniform(1.0, 101).unwrap();
        let sol = solve_full(&cfg, &mats, &eff, &grid).unwrap();
        assert!(sol.r_vec.iter().all(|r| r.iter().all(|&v| v == 0.0)));
        assert!(sol.phi.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn value_function_terminal_and_range() {
        let cfg = MarketConfig::reference(0.001, QbarRule::Feedback);
        let (mats, eff) = setup(&cfg);
        let grid = TimeGrid::uniform(1.0, 101).unwrap();
        let sol = solve_full(&cfg, &mats, &eff, &grid).unwrap();
        let x = DVector::from_fn(11, |i, _| (i as f64 + 1.0) * 10.0);
        let w_t = value_function(1.0, &x, &sol).unwrap();
        assert!((w_t - x.dot(&(&mats.g * &x))).abs() <= 1e-15 * w_t.abs());
        assert!(matches!(value_function(1.1, &x, &sol), Err(Error::OutOfRange { .. })));
        assert!(matches!(value_function(-0.1, &x, &sol), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn constant_term_matches_scalar_quadrature() {
        // With b = 0 and μ = 0, r ≡ 0 and φ(t) = ∫_t^T m² R_XX ds.
        let cfg = scalar_cfg(0.4, 0.6);
        let (mats, eff) = setup(&cfg);
        let grid = TimeGrid::uniform(1.0, 401).unwrap();
        let sol = solve_full(&cfg, &mats, &eff, &grid).unwrap();
        let zeta = eff.zeta.unwrap();
        let gap = cfg.beta - (cfg.gamma + eff.xi_tilde) / 2.0;
        let spe = (eff.psi * eff.eta_tilde).sqrt();
        let alpha = (spe / (gap * gap - spe * spe).sqrt()).asinh() / zeta;
        // ∫_0^T coth(ζ(τ + α)) dτ = (1/ζ) ln(sinh(ζ(T + α))/sinh(ζα)).
        let integral =
            -eff.xi_tilde / 2.0 * 1.0 - spe / zeta * ((zeta * (1.0 + alpha)).sinh() / (zeta * alpha).sinh()).ln();
        let exact = cfg.m * cfg.m * integral;
        assert!((sol.phi[0] - exact).abs() < 1e-9 * exact.abs(), "{} vs {}", sol.phi[0], exact);
    }
}
