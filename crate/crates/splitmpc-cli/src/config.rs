//! Scenario files: TOML with row-major matrices.

use std::path::Path;

use serde::Deserialize;
use splitmpc::control::{ControllerConfig, SlaterPolicy};
use splitmpc::dfg::Mode;
use splitmpc::model::{validate_problem, LtiSystem, MpcProblem};
use splitmpc::scenario::box_constraints;
use splitmpc::{Mat, Vector};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub horizon: usize,
    pub x_init: Vec<f64>,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_true")]
    pub oracle: bool,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_out")]
    pub out: String,
    #[serde(default)]
    pub seed: u64,
    /// Half-width of a uniform additive state disturbance (0 = nominal).
    #[serde(default)]
    pub disturbance: f64,
    #[serde(default = "default_slater")]
    pub slater: String,
    #[serde(default)]
    pub stability_caps: bool,
    /// Upper bound on the slack sought when a strictly feasible point is rebuilt.
    #[serde(default = "default_slack_cap")]
    pub slack_cap: f64,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    /// Closed-loop samples timed by `bench` (all MPC samples when absent).
    #[serde(default)]
    pub bench_samples: Option<usize>,
    pub system: SystemSection,
    pub constraints: ConstraintSection,
    #[serde(default)]
    pub weights: WeightSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    pub x_max: f64,
    pub u_max: f64,
    #[serde(default)]
    pub output: Option<OutputSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    pub d: Vec<Vec<f64>>,
    pub bound: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSection {
    #[serde(rename = "Q", default)]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(rename = "R", default)]
    pub r: Option<Vec<Vec<f64>>>,
}

fn default_rho() -> f64 {
    1.0
}
fn default_theta() -> f64 {
    splitmpc::tighten::DEFAULT_SAFETY
}
fn default_true() -> bool {
    true
}
fn default_t_max() -> usize {
    50
}
fn default_tolerance() -> f64 {
    1e-3
}
fn default_out() -> String {
    "out".into()
}
fn default_slater() -> String {
    "best".into()
}
fn default_slack_cap() -> f64 {
    1.0
}
fn default_reps() -> usize {
    11
}

/// Row-major nested list to a matrix; `field` names the key in errors.
pub fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<Mat, CliError> {
    let r = rows.len();
    if r == 0 {
        return Err(CliError::Config(format!("{field}: matrix has no rows")));
    }
    let c = rows[0].len();
    if c == 0 {
        return Err(CliError::Config(format!("{field}: row 0 is empty")));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != c {
            return Err(CliError::Config(format!(
                "{field}: row {i} has {} entries, expected {c}",
                row.len()
            )));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(CliError::Config(format!("{field}: entry ({i}, {j}) is not finite")));
        }
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

fn expect_shape(field: &str, m: &Mat, shape: (usize, usize)) -> Result<(), CliError> {
    if m.shape() != shape {
        return Err(CliError::Config(format!(
            "{field}: expected {}x{}, got {}x{}",
            shape.0,
            shape.1,
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((cfg, text))
    }

    pub fn problem(&self) -> Result<MpcProblem, CliError> {
        let a = matrix("system.A", &self.system.a)?;
        let nx = a.nrows();
        expect_shape("system.A", &a, (nx, nx))?;
        let b = matrix("system.B", &self.system.b)?;
        if b.nrows() != nx {
            return Err(CliError::Config(format!("system.B: expected {nx} rows, got {}", b.nrows())));
        }
        let nu = b.ncols();
        if self.x_init.len() != nx {
            return Err(CliError::Config(format!("x_init: expected {nx} entries, got {}", self.x_init.len())));
        }
        let q = match &self.weights.q {
            Some(q) => matrix("weights.Q", q)?,
            None => Mat::identity(nx, nx),
        };
        expect_shape("weights.Q", &q, (nx, nx))?;
        let r = match &self.weights.r {
            Some(r) => matrix("weights.R", r)?,
            None => Mat::identity(nu, nu),
        };
        expect_shape("weights.R", &r, (nu, nu))?;
        let c = &self.constraints;
        if !(c.x_max > 0.0 && c.u_max > 0.0) {
            return Err(CliError::Config("constraints: x_max and u_max must be positive".into()));
        }
        let output = match &c.output {
            Some(o) => {
                let ch = matrix("constraints.output.C", &o.c)?;
                let dh = matrix("constraints.output.D", &o.d)?;
                if ch.ncols() != nx {
                    return Err(CliError::Config(format!("constraints.output.C: expected {nx} columns")));
                }
                expect_shape("constraints.output.D", &dh, (ch.nrows(), nu))?;
                Some((ch, dh, o.bound))
            }
            None => None,
        };
        let stage = box_constraints(nx, nu, c.x_max, c.u_max, output.as_ref().map(|(ch, dh, h)| (ch, dh, *h)));
        let sys = LtiSystem::new(a, b).map_err(|e| CliError::Config(format!("system: {e}")))?;
        if self.horizon == 0 {
            return Err(CliError::Config("horizon: must be at least 1".into()));
        }
        let problem = MpcProblem::assemble(sys, stage, q, r, self.horizon, Vector::from_column_slice(&self.x_init))
            .map_err(|e| CliError::Config(format!("problem: {e}")))?;
        let report = validate_problem(&problem);
        if !report.all_pass() {
            let msgs: Vec<String> = report.failures().map(|c| format!("{}: {}", c.name, c.detail)).collect();
            return Err(CliError::Config(format!("problem validation failed: {}", msgs.join("; "))));
        }
        Ok(problem)
    }

    pub fn controller(&self) -> Result<ControllerConfig, CliError> {
        let slater: SlaterPolicy = self.slater.parse().map_err(|e: String| CliError::Config(format!("slater: {e}")))?;
        if !(self.rho > 0.0) {
            return Err(CliError::Config("rho: must be positive".into()));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(CliError::Config("theta: must lie in (0, 1)".into()));
        }
        Ok(ControllerConfig {
            rho: self.rho,
            safety: self.theta,
            mode: self.mode,
            oracle: self.oracle,
            slack_cap: self.slack_cap,
            stability_caps: self.stability_caps,
            slater,
            ..ControllerConfig::default()
        })
    }
}
