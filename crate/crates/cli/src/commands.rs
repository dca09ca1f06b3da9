use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use hybrid_lq::hydro::convergence_check;
use hybrid_lq::impact::{fit_exponential_decay, impact_curve, RateSchedule};
use hybrid_lq::riccati::{default_grid, solve_full, value_function};
use hybrid_lq::simulator::{expected_trajectory, monte_carlo, PathOutcome, SimContext, SimResult};
use hybrid_lq::stats::{self, summarize, SummaryStats};
use hybrid_lq::strategies::{Strategy, StrategyKind};
use hybrid_lq::{svg, validate_config, MarketConfig, RiccatiSolution, TimeGrid};
use serde_json::json;

use crate::config::{resolve_output_dir, RunConfig};
use crate::{CliError, Common};

const HIST_BINS: usize = 50;
const KDE_POINTS: usize = 400;

struct Prepared {
    cfg: RunConfig,
    out: PathBuf,
}

fn prepare(c: &Common) -> Result<Prepared, CliError> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.run.seed = s;
    }
    if let Some(p) = c.paths {
        cfg.run.n_paths = p;
    }
    if let Some(dt) = c.dt {
        cfg.run.dt = dt;
    }
    let out = resolve_output_dir(c.out.as_deref(), cfg.run.output_dir.as_deref());
    fs::create_dir_all(&out).map_err(|e| CliError::Io { path: out.clone(), source: e })?;
    Ok(Prepared { cfg, out })
}

fn validated_market(cfg: &RunConfig) -> Result<MarketConfig, CliError> {
    let market = cfg.market()?.clone();
    validate_config(&market).into_result()?;
    Ok(market)
}

fn solve_riccati(
    market: &MarketConfig,
    ctx: &SimContext,
    grid_points: Option<usize>,
) -> Result<RiccatiSolution, CliError> {
    let grid = match grid_points {
        Some(n) => TimeGrid::uniform(market.horizon, n)?,
        None => default_grid(market, &ctx.eff)?,
    };
    Ok(solve_full(market, &ctx.mats, &ctx.eff, &grid)?)
}

pub fn solve(c: &Common) -> Result<(), CliError> {
    let Prepared { cfg, out } = prepare(c)?;
    let market = validated_market(&cfg)?;
    let ctx = SimContext::new(&market);
    let sol = solve_riccati(&market, &ctx, cfg.run.grid_points)?;
    let x0 = market.initial_state();
    sol.write_csv(&out.join("riccati.csv"))?;
    sol.write_json_summary(&out.join("value.json"), &x0)?;
    let w0 = value_function(0.0, &x0, &sol)?;
    println!("method {:?}, {} grid points", sol.method, sol.grid.len());
    println!("w(0, x0) = {w0:.12e}");
    Ok(())
}

fn build_strategies(cfg: &RunConfig, ctx: &SimContext) -> Result<(Vec<Strategy>, Vec<String>), CliError> {
    cfg.check_strategies()?;
    let market = &ctx.cfg;
    let sol = if cfg.strategies.iter().any(|s| s.kind == StrategyKind::OptimalFeedback) {
        Some(Arc::new(solve_riccati(market, ctx, cfg.run.grid_points)?))
    } else {
        None
    };
    let mut strategies = Vec::new();
    let mut names = Vec::new();
    for spec in &cfg.strategies {
        let s = Strategy::build(spec.kind, market, &ctx.mats, &ctx.eff, sol.clone())?;
        strategies.push(spec.apply_overrides(s)?);
        names.push(spec.label());
    }
    Ok((strategies, names))
}

type Metric = (&'static str, fn(&PathOutcome) -> f64);

const METRICS: [Metric; 3] = [
    ("objective_econ", |o| o.objective_econ),
    ("objective_lq", |o| o.objective_lq),
    ("terminal_position", |o| o.terminal_position),
];

fn summaries(res: &SimResult) -> Result<Vec<(String, SummaryStats)>, CliError> {
    let mut rows = Vec::new();
    for (s, name) in res.strategies.iter().enumerate() {
        for (metric, f) in METRICS {
            rows.push((format!("{name}/{metric}"), summarize(&res.column(s, f))?));
        }
    }
    Ok(rows)
}

pub fn simulate(c: &Common, full: bool) -> Result<(), CliError> {
    let Prepared { cfg, out } = prepare(c)?;
    let market = validated_market(&cfg)?;
    let ctx = SimContext::new(&market);
    let (strategies, names) = build_strategies(&cfg, &ctx)?;
    let mut res = monte_carlo(&strategies, &ctx, cfg.run.n_paths, cfg.run.dt, cfg.run.seed)?;
    res.strategies = names;
    res.write_outcomes_csv(&out.join("outcomes.csv"))?;
    res.write_mean_positions_csv(&out.join("mean_positions.csv"))?;

    let rows = summaries(&res)?;
    stats::write_summaries_json(&rows, &out.join("summary.json"))?;
    stats::write_summaries_csv(&rows, &out.join("summary.csv"))?;
    println!("{} paths, dt = {}, seed = {}", res.n_paths, res.dt, res.seed);
    for (name, s) in &rows {
        println!("{name:<40} mean {:>14.6e}  sd {:>12.4e}  skew {:>8.3}", s.mean, s.std_dev(), s.skewness);
    }
    if full {
        write_distributions(&res, &out)?;
        write_expected_trajectories(&strategies, &res.strategies, &ctx, cfg.run.dt, &out)?;
        dominance_table(&cfg, &res, &out)?;
    }
    Ok(())
}

fn write_distributions(res: &SimResult, out: &Path) -> Result<(), CliError> {
    for (s, name) in res.strategies.iter().enumerate() {
        for (metric, f) in METRICS {
            let xs = res.column(s, f);
            let stem = format!("{name}_{metric}");
            let hist = stats::histogram(&xs, HIST_BINS)?;
            stats::write_histogram_csv(&hist, &out.join(format!("{stem}_hist.csv")))?;
            let density = match stats::kde_grid(&xs, KDE_POINTS, 3.0).and_then(|g| Ok((stats::kde(&xs, &g)?, g))) {
                Ok((ys, g)) => {
                    let mut w =
                        csv::Writer::from_path(out.join(format!("{stem}_kde.csv"))).map_err(hybrid_lq::Error::from)?;
                    w.write_record(["x", "density"]).map_err(hybrid_lq::Error::from)?;
                    for (x, y) in g.iter().zip(&ys) {
                        w.write_record([format!("{x:e}"), format!("{y:e}")]).map_err(hybrid_lq::Error::from)?;
                    }
                    w.flush().map_err(|e| CliError::Io { path: out.join(format!("{stem}_kde.csv")), source: e })?;
                    Some((g, ys))
                }
                Err(e) => {
                    log::warn!("{stem}: no density estimate ({e})");
                    None
                }
            };
            let doc = svg::histogram_svg(&hist, density.as_ref().map(|(g, y)| (g.as_slice(), y.as_slice())), &stem);
            svg::write(&out.join(format!("{stem}.svg")), &doc)?;
        }
    }
    Ok(())
}

fn write_expected_trajectories(
    strategies: &[Strategy],
    names: &[String],
    ctx: &SimContext,
    dt: f64,
    out: &Path,
) -> Result<(), CliError> {
    let grid = TimeGrid::with_step(ctx.cfg.horizon, dt)?;
    let n = ctx.cfg.n();
    let mut series = Vec::new();
    for (s, name) in strategies.iter().zip(names) {
        let traj = expected_trajectory(s, ctx, &grid)?;
        series.push((name.clone(), traj.iter().map(|x| x[n]).collect::<Vec<f64>>()));
    }
    let path = out.join("expected_position.csv");
    let mut w = csv::Writer::from_path(&path).map_err(hybrid_lq::Error::from)?;
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(hybrid_lq::Error::from)?;
    for (k, t) in grid.times().iter().enumerate() {
        let mut row = vec![format!("{t:e}")];
        row.extend(series.iter().map(|(_, v)| format!("{:e}", v[k])));
        w.write_record(&row).map_err(hybrid_lq::Error::from)?;
    }
    w.flush().map_err(|e| CliError::Io { path, source: e })?;
    let doc = svg::line_plot_svg(grid.times(), &series, "expected remaining position");
    svg::write(&out.join("expected_position.svg"), &doc)?;
    Ok(())
}

/// Paired differences of each objective, reference strategy minus the others.
fn dominance_table(cfg: &RunConfig, res: &SimResult, out: &Path) -> Result<(), CliError> {
    let Some(reference) = cfg.strategies.iter().position(|s| s.kind == StrategyKind::OptimalFeedback) else {
        println!("no optimal strategy configured; dominance table skipped");
        return Ok(());
    };
    let mut rows = Vec::new();
    println!("{:<24} {:<16} {:>14} {:>12} {:>8}", "vs", "objective", "mean diff", "se", "z");
    for s in (0..res.strategies.len()).filter(|&s| s != reference) {
        for (metric, f) in &METRICS[..2] {
            let a = res.column(reference, f);
            let b = res.column(s, f);
            let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let st = summarize(&d)?;
            let z = if st.std_error > 0.0 { st.mean / st.std_error } else { f64::INFINITY * st.mean.signum() };
            println!("{:<24} {:<16} {:>14.6e} {:>12.4e} {:>8.2}", res.strategies[s], metric, st.mean, st.std_error, z);
            rows.push(json!({
                "reference": res.strategies[reference],
                "other": res.strategies[s],
                "objective": metric,
                "mean_diff": st.mean,
                "std_error": st.std_error,
                "z": z,
            }));
        }
    }
    let path = out.join("dominance.json");
    let text = serde_json::to_string_pretty(&rows).map_err(hybrid_lq::Error::from)?;
    fs::write(&path, text + "\n").map_err(|e| CliError::Io { path, source: e })?;
    Ok(())
}

pub fn impact(c: &Common) -> Result<(), CliError> {
    let Prepared { cfg, out } = prepare(c)?;
    let market = validated_market(&cfg)?;
    let imp = cfg.impact.clone().ok_or_else(|| CliError::Usage("config has no 'impact' section".into()))?;
    let rate = imp.rate.unwrap_or(market.x0 / imp.t_exec);
    let sched = RateSchedule::block(rate, imp.t_exec, imp.horizon)?;
    let grid = TimeGrid::with_step(imp.horizon, c.dt.unwrap_or(imp.dt))?;
    let curve = impact_curve(&sched, &market, &grid)?;
    curve.write_csv(&out.join("impact.csv"))?;
    let doc = svg::line_plot_svg(
        &curve.times,
        &[("E[S(t) - s0]".to_string(), curve.impact.clone())],
        "expected price impact",
    );
    svg::write(&out.join("impact.svg"), &doc)?;
    let fit = match fit_exponential_decay(&curve, imp.t_exec) {
        Ok(f) => {
            println!("post-execution fit: rate {:.6e}, R2 {:.6}", f.rate, f.r_squared);
            json!({ "rate": f.rate, "r_squared": f.r_squared, "asymptote": curve.asymptote })
        }
        Err(e) => {
            println!("post-execution fit unavailable: {e}");
            json!({ "error": e.to_string(), "asymptote": curve.asymptote })
        }
    };
    let path = out.join("impact_fit.json");
    let text = serde_json::to_string_pretty(&fit).map_err(hybrid_lq::Error::from)?;
    fs::write(&path, text + "\n").map_err(|e| CliError::Io { path, source: e })?;
    Ok(())
}

pub fn hydro(c: &Common) -> Result<(), CliError> {
    let Prepared { cfg, out } = prepare(c)?;
    let h = cfg.hydro.clone().ok_or_else(|| CliError::Usage("config has no 'hydro' section".into()))?;
    let rep = convergence_check(&h.params, &h.h, h.horizon, cfg.run.n_paths, cfg.run.seed)?;
    println!("theta {:.6}, qbar0 {:.6}, sigma_q {:.6}", rep.limit.theta, rep.limit.qbar0, rep.limit.sigma_q);
    for l in &rep.levels {
        for m in &l.moments {
            println!(
                "h {:<8} t {:<6} mean err {:.4e} (se {:.1e})  var err {:.4e} (se {:.1e})",
                l.h, m.t, m.mean_error, m.mean_se, m.variance_error, m.variance_se
            );
        }
    }
    for f in &rep.monotone {
        println!("monotone {} at t = {}: {}", f.moment, f.t, f.passed);
    }
    println!("converged: {}", rep.converged);
    let path = out.join("hydro_report.json");
    let text = serde_json::to_string_pretty(&rep).map_err(hybrid_lq::Error::from)?;
    fs::write(&path, text + "\n").map_err(|e| CliError::Io { path, source: e })?;
    Ok(())
}
