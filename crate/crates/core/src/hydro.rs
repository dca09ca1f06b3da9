//! Market-maker inventory as a jump process under the approximate optimal
//! quotes, and its convergence to an Ornstein–Uhlenbeck process when order
//! size h shrinks while arrival intensity grows like 1/h².

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuoteModelParams {
    /// Base arrival intensity A.
    pub a: f64,
    pub kappa: f64,
    pub nu_risk: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl QuoteModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.a > 0.0 && self.kappa > 0.0 && self.nu_risk > 0.0 && self.sigma > 0.0 && self.mu.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("quote model needs A, kappa, nu, sigma > 0: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LimitParams {
    pub theta: f64,
    pub qbar0: f64,
    pub sigma_q: f64,
    pub c1: f64,
    pub c2: f64,
}

impl LimitParams {
    pub fn ou_mean(&self, t: f64) -> f64 {
        self.qbar0 * -(-self.theta * t).exp_m1()
    }

    pub fn ou_variance(&self, t: f64) -> f64 {
        self.sigma_q * self.sigma_q / (2.0 * self.theta) * -(-2.0 * self.theta * t).exp_m1()
    }
}

/// Limit coefficients. The drift of the limiting generator is
/// 4c₁c₂κ(q̄⁰ − q), so θ = 4c₁c₂κ.
pub fn limit_params(p: &QuoteModelParams) -> LimitParams {
    let r = 1.0 + p.nu_risk / p.kappa;
    let c1 = p.a / 2.0 * r.powf(-p.kappa / p.nu_risk);
    let c2 = (p.sigma * p.sigma * p.nu_risk / (2.0 * p.kappa * p.a) * r.powf(1.0 + p.kappa / p.nu_risk)).sqrt();
    LimitParams {
        theta: 4.0 * c1 * c2 * p.kappa,
        qbar0: p.mu / (p.nu_risk * p.sigma * p.sigma),
        sigma_q: 2.0 * c1.sqrt(),
        c1,
        c2,
    }
}

/// Bid and ask spreads at inventory q for order size h.
pub fn quote_spreads(q: f64, p: &QuoteModelParams, h: f64) -> (f64, f64) {
    let base = (p.nu_risk / p.kappa).ln_1p() / p.nu_risk;
    let lp = limit_params(p);
    let slope = h * lp.c2;
    (base + (q + 0.5 - lp.qbar0) * slope, base + (-q + 0.5 + lp.qbar0) * slope)
}

/// Fill intensities (bid, ask) = (A/h²)e^{−κδ}.
pub fn intensities(q: f64, p: &QuoteModelParams, h: f64) -> (f64, f64) {
    let (db, da) = quote_spreads(q, p, h);
    let s = p.a / (h * h);
    (s * (-p.kappa * db).exp(), s * (-p.kappa * da).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpPath {
    pub times: Vec<f64>,
    /// Inventory after each event, starting with q(0) = 0.
    pub q: Vec<f64>,
    pub negative_spread_events: u64,
}

impl JumpPath {
    pub fn events(&self) -> usize {
        self.times.len() - 1
    }

    /// Inventory at time t (right-continuous).
    pub fn value_at(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|&s| s <= t);
        self.q[i.saturating_sub(1)]
    }
}

/// Waiting time to the next fill from inventory q, whether it is a bid fill
/// (inventory up), and whether either quoted spread is negative.
pub fn next_event<R: Rng + ?Sized>(q: f64, p: &QuoteModelParams, h: f64, rng: &mut R) -> (f64, bool, bool) {
    let (db, da) = quote_spreads(q, p, h);
    let s = p.a / (h * h);
    let (lb, la) = (s * (-p.kappa * db).exp(), s * (-p.kappa * da).exp());
    let total = lb + la;
    let wait: f64 = Exp1.sample(rng);
    let u: f64 = rng.random();
    (wait / total, u * total < lb, db < 0.0 || da < 0.0)
}

/// Event-driven simulation: exponential waiting times at the total rate, and
/// the jump direction drawn in proportion to the two intensities.
pub fn simulate_inventory_jump<R: Rng + ?Sized>(
    p: &QuoteModelParams,
    h: f64,
    horizon: f64,
    max_events: u64,
    rng: &mut R,
) -> Result<JumpPath> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("order size h must be positive, got {h}")));
    }
    let mut t = 0.0;
    let mut q = 0.0;
    let mut times = vec![0.0];
    let mut qs = vec![0.0];
    let mut negative = 0u64;
    loop {
        let (wait, up, neg) = next_event(q, p, h, rng);
        if neg {
            negative += 1;
        }
        t += wait;
        if t > horizon {
            break;
        }
        if times.len() as u64 > max_events {
            return Err(Error::EventCap { cap: max_events, t });
        }
        q += if up { h } else { -h };
        times.push(t);
        qs.push(q);
    }
    if negative > 0 {
        log::warn!("{negative} events quoted with a negative spread (h = {h})");
    }
    Ok(JumpPath { times, q: qs, negative_spread_events: negative })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub t: f64,
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub ou_mean: f64,
    pub ou_variance: f64,
    pub mean_error: f64,
    pub variance_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HLevel {
    pub h: f64,
    pub mean_events: f64,
    pub negative_spread_events: u64,
    pub moments: Vec<MomentEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub params: QuoteModelParams,
    pub limit: LimitParams,
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub levels: Vec<HLevel>,
    /// One entry per observation time and moment: errors non-increasing along
    /// the h list up to one combined standard error. Empty for a single h.
    pub monotone: Vec<MonotoneFlag>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotoneFlag {
    pub t: f64,
    pub moment: String,
    pub passed: bool,
}

/// Events allowed per path, relative to the expected count at the base rate.
const EVENT_CAP_FACTOR: f64 = 50.0;

fn moment_estimate(samples: &[f64], t: f64, lim: &LimitParams) -> MomentEstimate {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let m2 = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = samples.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let variance = m2 * n / (n - 1.0);
    let variance_se = ((m4 - m2 * m2).max(0.0) / n).sqrt();
    let (om, ov) = (lim.ou_mean(t), lim.ou_variance(t));
    MomentEstimate {
        t,
        mean,
        mean_se: (variance / n).sqrt(),
        variance,
        variance_se,
        ou_mean: om,
        ou_variance: ov,
        mean_error: (mean - om).abs(),
        variance_error: (variance - ov).abs(),
    }
}

/// Moments of q at T/2 and T for each h, compared with the OU limit.
pub fn convergence_check(
    p: &QuoteModelParams,
    h_list: &[f64],
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<ConvergenceReport> {
    p.validate()?;
    if h_list.is_empty() || n_paths < 2 {
        return Err(Error::InvalidArgument("need at least one h and two paths".into()));
    }
    if h_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidArgument(format!("h list must be strictly decreasing: {h_list:?}")));
    }
    let lim = limit_params(p);
    let obs = [horizon / 2.0, horizon];
    let mut levels = Vec::with_capacity(h_list.len());
    for (level, &h) in h_list.iter().enumerate() {
        let expected = 2.0 * p.a / (h * h) * horizon;
        let cap = (EVENT_CAP_FACTOR * expected).ceil().max(1000.0) as u64;
        let paths: Vec<(Vec<f64>, usize, u64)> = (0..n_paths)
            .into_par_iter()
            .map(|i| -> Result<(Vec<f64>, usize, u64)> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((level as u64) << 40) | i as u64);
                let path = simulate_inventory_jump(p, h, horizon, cap, &mut rng)?;
                Ok((obs.iter().map(|&t| path.value_at(t)).collect(), path.events(), path.negative_spread_events))
            })
            .collect::<Result<Vec<_>>>()?;
        let moments = obs
            .iter()
            .enumerate()
            .map(|(j, &t)| moment_estimate(&paths.iter().map(|p| p.0[j]).collect::<Vec<_>>(), t, &lim))
            .collect();
        levels.push(HLevel {
            h,
            mean_events: paths.iter().map(|p| p.1 as f64).sum::<f64>() / n_paths as f64,
            negative_spread_events: paths.iter().map(|p| p.2).sum(),
            moments,
        });
    }
    let mut monotone = Vec::new();
    for (j, &t) in obs.iter().enumerate() {
        for moment in ["mean", "variance"] {
            let pick = |l: &HLevel| {
                let m = &l.moments[j];
                if moment == "mean" {
                    (m.mean_error, m.mean_se)
                } else {
                    (m.variance_error, m.variance_se)
                }
            };
            if levels.len() > 1 {
                let passed = levels.windows(2).all(|w| {
                    let (e0, s0) = pick(&w[0]);
                    let (e1, s1) = pick(&w[1]);
                    e1 <= e0 + (s0 * s0 + s1 * s1).sqrt()
                });
                monotone.push(MonotoneFlag { t, moment: moment.into(), passed });
            }
        }
    }
    let converged = !monotone.is_empty() && monotone.iter().all(|m| m.passed);
    Ok(ConvergenceReport { params: *p, limit: lim, horizon, n_paths, seed, levels, monotone, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> QuoteModelParams {
        QuoteModelParams { a: 2.0, kappa: 1.0, nu_risk: 1.0, mu: 0.25, sigma: 0.5 }
    }

    #[test]
    fn independent_transcription_of_constants() {
        let p = QuoteModelParams { a: 140.0, kappa: 0.3, nu_risk: 0.01, mu: 0.0, sigma: 0.3 };
        let lim = limit_params(&p);
        let base = 1.0 + 0.01 / 0.3;
        let c1 = 70.0 * f64::powf(base, -30.0);
        let c2 = f64::sqrt(0.09 * 0.01 / (0.6 * 140.0) * f64::powf(base, 31.0));
        assert!((lim.c1 - c1).abs() < 1e-12 * c1);
        assert!((lim.c2 - c2).abs() < 1e-12 * c2);
        assert!((lim.theta - 4.0 * c1 * c2 * 0.3).abs() < 1e-12 * lim.theta);
        assert!((lim.sigma_q - 2.0 * c1.sqrt()).abs() < 1e-12);
        assert_eq!(lim.qbar0, 0.0);
    }

    #[test]
    fn c1_approaches_half_a_over_e() {
        // (1 + ν/κ)^{−κ/ν} decreases to e^{−1} as ν/κ → 0.
        let mut prev = f64::INFINITY;
        for nu in [1.0, 0.1, 0.01, 0.001] {
            let p = QuoteModelParams { a: 2.0, kappa: 1.0, nu_risk: nu, mu: 0.0, sigma: 1.0 };
            let c1 = limit_params(&p).c1;
            assert!(c1 < prev);
            prev = c1;
        }
        assert!((prev - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn spread_identities() {
        let p = params();
        let lim = limit_params(&p);
        let base = (2.0f64).ln();
        let (db, _) = quote_spreads(lim.qbar0 - 0.5, &p, 0.3);
        assert!((db - base).abs() < 1e-15);
        let sum0 = {
            let (b, a) = quote_spreads(0.0, &p, 0.3);
            b + a
        };
        for q in [-3.0, -0.7, 0.0, 1.1, 4.0] {
            let (b, a) = quote_spreads(q, &p, 0.3);
            assert!((b + a - sum0).abs() < 1e-14);
            let (b2, _) = quote_spreads(q, &p, 0.15);
            assert!(((b2 - base) - (b - base) / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn symmetric_intensities_at_long_term_mean() {
        let p = params();
        let lim = limit_params(&p);
        let (lb, la) = intensities(lim.qbar0, &p, 0.25);
        assert!((lb - la).abs() < 1e-12 * lb);
        let mut up = 0;
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..n {
            let q: f64 = rng.random();
            if q * (lb + la) < lb {
                up += 1;
            }
        }
        assert!((up as f64 / n as f64 - 0.5).abs() < 0.015);
    }

    #[test]
    fn event_counts_scale_with_inverse_square_h() {
        let p = QuoteModelParams { mu: 0.0, ..params() };
        let count = |h: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            (0..400).map(|_| simulate_inventory_jump(&p, h, 1.0, 1_000_000, &mut rng).unwrap().events()).sum::<usize>()
                as f64
        };
        let ratio = count(0.25) / count(0.5);
        assert!((ratio - 4.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn event_cap_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = simulate_inventory_jump(&params(), 0.05, 1.0, 10, &mut rng);
        assert!(matches!(r, Err(Error::EventCap { cap: 10, .. })));
    }

    #[test]
    fn first_event_time_is_exponential() {
        // One-sample Kolmogorov–Smirnov against 1 − e^{−λt} at the 1% level.
        let p = params();
        let h = 0.5;
        let (lb, la) = intensities(0.0, &p, h);
        let rate = lb + la;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut first: Vec<f64> = (0..n).map(|_| next_event(0.0, &p, h, &mut rng).0).collect();
        first.sort_by(f64::total_cmp);
        let d = first
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let f = 1.0 - (-rate * t).exp();
                ((i + 1) as f64 / n as f64 - f).abs().max((f - i as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn single_h_report_makes_no_claim() {
        let rep = convergence_check(&params(), &[1.0], 1.0, 200, 5).unwrap();
        assert!(rep.monotone.is_empty());
        assert!(!rep.converged);
        assert!(convergence_check(&params(), &[0.25, 0.5], 1.0, 200, 5).is_err());
    }

    #[test]
    fn zero_drift_means_are_centred() {
        let p = QuoteModelParams { mu: 0.0, ..params() };
        let rep = convergence_check(&p, &[0.5, 0.25], 1.0, 4000, 6).unwrap();
        for level in &rep.levels {
            for m in &level.moments {
                assert!(m.mean.abs() < 3.0 * m.mean_se, "{m:?}");
            }
        }
    }
}
