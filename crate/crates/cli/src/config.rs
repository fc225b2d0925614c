//! Experiment configuration: the coefficient table, shared run settings and
//! one optional section per task.

use std::path::PathBuf;

use qpsde::coefficients::CoefficientSpec;
use qpsde::config::{apply_override, from_table, locate_error, parse_table};
use qpsde::fokker_planck::{InitialDensity, ResidualConfig};
use qpsde::{QpCoefficients, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub coefficients: CoefficientSpec,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub validate: ValidateConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub pullback: PullbackTask,
    #[serde(default)]
    pub measure: MeasureConfig,
    #[serde(default)]
    pub lift: LiftConfig,
    #[serde(default)]
    pub fokker_planck: ResidualTask,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub acceptance: AcceptanceConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dt: f64,
    /// First seed; tasks use consecutive seeds from here.
    pub seed: u64,
    pub n_samples: usize,
    /// Worker threads; 0 means one per core.
    pub threads: usize,
    pub pullback_tol: f64,
    pub max_levels: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dt: 1e-3,
            seed: 0,
            n_samples: 10_000,
            threads: 0,
            pullback_tol: 1e-6,
            max_levels: 30,
            output_dir: PathBuf::from("qpsde-out"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    pub n_samples: usize,
    pub box_radius: f64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        ValidateConfig {
            n_samples: 20_000,
            box_radius: 10.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub t_start: f64,
    pub t_end: f64,
    pub x0: Vec<f64>,
    pub n_paths: usize,
    /// Phases of the reparameterised flow; both zero gives the original
    /// equation.
    pub r1: f64,
    pub r2: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            t_start: 0.0,
            t_end: 10.0,
            x0: Vec::new(),
            n_paths: 1,
            r1: 0.0,
            r2: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PullbackTask {
    /// Target time of `φ(t)`.
    pub t: f64,
    /// When set, pull back the hull `φ̃(t_param, s_param)` instead.
    pub hull: Option<(f64, f64)>,
    pub x0: Vec<f64>,
    pub n_paths: usize,
}

impl Default for PullbackTask {
    fn default() -> Self {
        PullbackTask {
            t: 0.0,
            hull: None,
            x0: Vec::new(),
            n_paths: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureKind {
    Rho,
    RhoTilde,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureConfig {
    pub kind: MeasureKind,
    /// `t` for `rho`; the first hull argument for `rho_tilde`.
    pub times: Vec<f64>,
    /// Second hull argument for `rho_tilde`.
    pub s_param: f64,
    pub metric: String,
    pub n_relabel: usize,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig {
            kind: MeasureKind::Rho,
            times: vec![0.0, 0.5],
            s_param: 0.0,
            metric: "w1_sorted".into(),
            n_relabel: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiftConfig {
    pub cocycle_checks: usize,
    pub grid: (usize, usize),
    pub per_cell: usize,
    pub horizon: f64,
    pub invariance_times: Vec<f64>,
    pub birkhoff_horizon: f64,
    pub n_relabel: usize,
}

impl Default for LiftConfig {
    fn default() -> Self {
        LiftConfig {
            cocycle_checks: 20,
            grid: (8, 8),
            per_cell: 500,
            horizon: 50.0,
            invariance_times: vec![0.25, 1.0, std::f64::consts::E],
            birkhoff_horizon: 200.0,
            n_relabel: 40,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualTask {
    pub nodes: Vec<f64>,
    pub n_cells: usize,
    pub dt_pde: f64,
    /// Pull-back samples per node; `run.n_samples` when absent.
    pub n_samples: Option<usize>,
    pub initial: InitialDensity,
    pub domain_sds: f64,
    pub max_l1: f64,
    /// Shift used for the `q^r(t) = q(t + r)` check.
    pub shift: f64,
}

impl Default for ResidualTask {
    fn default() -> Self {
        let r = ResidualConfig::default();
        ResidualTask {
            nodes: r.nodes,
            n_cells: r.n_cells,
            dt_pde: r.dt_pde,
            n_samples: None,
            initial: r.initial,
            domain_sds: r.domain_sds,
            max_l1: 0.03,
            shift: 0.37,
        }
    }
}

impl ResidualTask {
    pub fn residual_config(&self, run: &RunConfig) -> ResidualConfig {
        ResidualConfig {
            nodes: self.nodes.clone(),
            n_cells: self.n_cells,
            dt_pde: self.dt_pde,
            n_samples: self.n_samples.unwrap_or(run.n_samples),
            seed0: run.seed,
            initial: self.initial,
            domain_sds: self.domain_sds,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub times: Vec<f64>,
    /// Hull table resolution per period.
    pub hull_grid: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            times: (0..=20).map(|i| i as f64 * 0.1).collect(),
            hull_grid: 16,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceptanceConfig {
    /// Criterion ids to run; empty runs all.
    pub criteria: Vec<u32>,
}

impl ExperimentConfig {
    /// Parses `text` with `key=value` overrides applied first.
    pub fn load(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table = parse_table(text)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        from_table(table, text)
    }

    /// Validated coefficients; errors point at the offending line.
    pub fn coefficients(&self, text: &str) -> Result<QpCoefficients> {
        self.coefficients.build().map_err(|e| locate_error(e, text, "coefficients"))
    }

    /// The configuration as it was run, defaults filled in.
    pub fn effective_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_else(|e| format!("# not representable as TOML: {e}\n"))
    }
}
