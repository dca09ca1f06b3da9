//! Run configuration file: market, run settings, strategies, and optional
//! impact and hydrodynamic sections.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use hybrid_lq::hydro::QuoteModelParams;
use hybrid_lq::strategies::{Strategy, StrategyKind};
use hybrid_lq::MarketConfig;
use serde::Deserialize;

use crate::CliError;

pub const OUTPUT_DIR_ENV: &str = "HYBRID_LQ_OUTPUT_DIR";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub market: Option<MarketConfig>,
    #[serde(default)]
    pub run: RunSettings,
    #[serde(default)]
    pub strategies: Vec<StrategySpec>,
    pub impact: Option<ImpactSettings>,
    pub hydro: Option<HydroSettings>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    /// Uniform Riccati grid with this many points; graded grid when absent.
    pub grid_points: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self { n_paths: 10_000, dt: 1e-3, seed: 1, grid_points: None, output_dir: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    /// Label in outputs; defaults to the kind.
    pub name: Option<String>,
    /// Adapted TWAP terminal offset override.
    pub alpha: Option<f64>,
    /// Almgren–Chriss urgency override.
    pub kappa: Option<f64>,
}

impl StrategySpec {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.label().to_string())
    }

    pub fn apply_overrides(&self, s: Strategy) -> Result<Strategy, CliError> {
        Ok(match (s, self.alpha, self.kappa) {
            (s, None, None) => s,
            (Strategy::AdaptedTwap { horizon, .. }, Some(alpha), None) => Strategy::AdaptedTwap { alpha, horizon },
            (Strategy::AlmgrenChriss { x0, horizon, .. }, None, Some(kappa)) => {
                Strategy::AlmgrenChriss { kappa, x0, horizon }
            }
            _ => {
                return Err(CliError::Usage(format!(
                    "strategy '{}': alpha applies to adapted_twap and kappa to almgren_chriss only",
                    self.label()
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpactSettings {
    /// Trading rate while executing; x0 / t_exec when absent.
    pub rate: Option<f64>,
    pub t_exec: f64,
    pub horizon: f64,
    #[serde(default = "default_impact_dt")]
    pub dt: f64,
}

fn default_impact_dt() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HydroSettings {
    pub params: QuoteModelParams,
    pub h: Vec<f64>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
}

fn default_horizon() -> f64 {
    1.0
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn market(&self) -> Result<&MarketConfig, CliError> {
        self.market.as_ref().ok_or_else(|| CliError::Usage("config has no 'market' section".into()))
    }

    pub fn check_strategies(&self) -> Result<(), CliError> {
        if self.strategies.is_empty() {
            return Err(CliError::Usage("strategy list is empty".into()));
        }
        let mut seen = HashSet::new();
        for s in &self.strategies {
            if !seen.insert(s.label()) {
                return Err(CliError::Usage(format!("duplicate strategy name '{}'", s.label())));
            }
        }
        Ok(())
    }
}

/// Flag, then config file, then environment, then `./output`.
pub fn resolve_output_dir(flag: Option<&Path>, cfg: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("output"))
}
