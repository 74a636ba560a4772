//! Closed-loop controller: terminal-set handoff, per-sample ledger refresh,
//! the split solve, consolidation of the stitched inputs and the shifted
//! strictly feasible point for the next sample.

use std::time::Instant;

use serde::Serialize;

use crate::dfg::{self, Freeze, Mode, RunOptions, SolveReport};
use crate::linalg::inf_norm;
use crate::model::{LtiSystem, MpcProblem};
use crate::oracle;
use crate::split::{build_subproblems, SubproblemData};
use crate::tighten::{
    build_ledger, slater_certificate, suboptimality_gap, SlaterCertificate, StabilityMemory,
    TighteningLedger, DEFAULT_SAFETY,
};
use crate::{Error, Result, Vector};

#[derive(Debug, Clone, Serialize)]
pub struct ControllerConfig {
    pub rho: f64,
    pub safety: f64,
    pub mode: Mode,
    #[serde(skip)]
    pub freeze: Freeze,
    /// Solve the original problem at every MPC sample for the cost audit.
    pub oracle: bool,
    /// Upper limit on the uniform slack sought for the initial feasible point.
    pub slack_cap: f64,
    /// Cap band widths with the previous sample's stage cost and radii.
    pub stability_caps: bool,
    pub slater: SlaterPolicy,
}

/// Source of the strictly feasible point behind each sample's ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SlaterPolicy {
    /// Shift the previous solution; recompute only if it is not strictly feasible.
    Shift,
    /// Recompute from the measured state at every sample.
    Recompute,
    /// Build both ledgers and keep the one with the smaller largest iteration count.
    #[default]
    Best,
}

impl std::str::FromStr for SlaterPolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "shift" => Ok(Self::Shift),
            "recompute" => Ok(Self::Recompute),
            "best" => Ok(Self::Best),
            other => Err(format!("unknown Slater policy `{other}` (expected shift, recompute or best)")),
        }
    }
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            safety: DEFAULT_SAFETY,
            mode: Mode::Parallel,
            freeze: Freeze::Relay,
            oracle: true,
            slack_cap: 1.0,
            stability_caps: false,
            slater: SlaterPolicy::Best,
        }
    }
}

/// Rollout of the true dynamics under the stitched inputs.
#[derive(Debug, Clone, Serialize)]
pub struct ConsolidatedTrajectory {
    pub x_bar: Vec<Vec<f64>>,
    pub u_bar: Vec<Vec<f64>>,
    /// State copy held by each stage (empty when not supplied).
    pub local_states: Vec<Vec<f64>>,
}

impl ConsolidatedTrajectory {
    /// `|x̄_t − x_t^{(t)}|` componentwise.
    pub fn mismatch(&self) -> Vec<Vec<f64>> {
        self.x_bar
            .iter()
            .zip(&self.local_states)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()).collect())
            .collect()
    }

    pub fn cost(&self, problem: &MpcProblem) -> f64 {
        let q = &problem.cost.state_weight;
        let r = &problem.cost.input_weight;
        let p = &problem.cost.terminal_weight;
        let n = self.u_bar.len();
        let mut v = 0.0;
        for t in 0..n {
            let x = Vector::from_column_slice(&self.x_bar[t]);
            let u = Vector::from_column_slice(&self.u_bar[t]);
            v += x.dot(&(q * &x)) + u.dot(&(r * &u));
        }
        let xn = Vector::from_column_slice(&self.x_bar[n]);
        0.5 * (v + xn.dot(&(p * &xn)))
    }
}

pub fn consolidate(x0: &Vector, u_seq: &[Vector], system: &LtiSystem) -> Result<ConsolidatedTrajectory> {
    if x0.len() != system.nx() {
        return Err(Error::Dimension(format!("initial state has {} entries, expected {}", x0.len(), system.nx())));
    }
    if let Some(t) = u_seq.iter().position(|u| u.len() != system.nu()) {
        return Err(Error::Dimension(format!("input {t} has the wrong length")));
    }
    let mut x_bar = vec![x0.clone()];
    for u in u_seq {
        let next = system.next(x_bar.last().expect("nonempty"), u);
        x_bar.push(next);
    }
    Ok(ConsolidatedTrajectory {
        x_bar: x_bar.iter().map(|v| v.iter().copied().collect()).collect(),
        u_bar: u_seq.iter().map(|v| v.iter().copied().collect()).collect(),
        local_states: Vec::new(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityReport {
    /// `C x̄_t + D ū_t + g` per stage.
    pub stage_residuals: Vec<Vec<f64>>,
    /// `F x̄_N − f`.
    pub terminal_residuals: Vec<f64>,
    pub max_residual: f64,
    /// First violated row as `(stage, row)`; stage `N` means a terminal row.
    pub first_violation: Option<(usize, usize)>,
    pub pass: bool,
}

pub fn check_original_feasibility(traj: &ConsolidatedTrajectory, problem: &MpcProblem) -> FeasibilityReport {
    let n = traj.u_bar.len();
    let mut stage_residuals = Vec::with_capacity(n);
    let mut first = None;
    let mut max_residual = f64::NEG_INFINITY;
    for t in 0..n {
        let x = Vector::from_column_slice(&traj.x_bar[t]);
        let u = Vector::from_column_slice(&traj.u_bar[t]);
        let r: Vec<f64> = problem.stage.residual(&x, &u).iter().copied().collect();
        for (i, v) in r.iter().enumerate() {
            if *v > 0.0 && first.is_none() {
                first = Some((t, i));
            }
            max_residual = max_residual.max(*v);
        }
        stage_residuals.push(r);
    }
    let xn = Vector::from_column_slice(&traj.x_bar[n]);
    let terminal_residuals: Vec<f64> = problem.terminal.residual(&xn).iter().copied().collect();
    for (i, v) in terminal_residuals.iter().enumerate() {
        if *v > 0.0 && first.is_none() {
            first = Some((n, i));
        }
        max_residual = max_residual.max(*v);
    }
    FeasibilityReport {
        stage_residuals,
        terminal_residuals,
        max_residual,
        first_violation: first,
        pass: first.is_none(),
    }
}

/// Stage blocks `(x_t, u_t)` for `t < N` and `x_N`.
pub fn stage_blocks(traj: &ConsolidatedTrajectory) -> Vec<Vector> {
    let n = traj.u_bar.len();
    let mut out: Vec<Vector> = (0..n)
        .map(|t| {
            Vector::from_iterator(
                traj.x_bar[t].len() + traj.u_bar[t].len(),
                traj.x_bar[t].iter().chain(&traj.u_bar[t]).copied(),
            )
        })
        .collect();
    out.push(Vector::from_column_slice(&traj.x_bar[n]));
    out
}

/// Shifted feasible point for the next sample: blocks `1..N` of the previous
/// solution, then `(x̄_N, K x̄_N)` and `(A + B K) x̄_N`.
pub fn slater_update(prev: &ConsolidatedTrajectory, gain: &crate::Mat, system: &LtiSystem) -> Vec<Vector> {
    let n = prev.u_bar.len();
    let blocks = stage_blocks(prev);
    let xn = Vector::from_column_slice(&prev.x_bar[n]);
    let un = gain * &xn;
    let mut out: Vec<Vector> = blocks[1..n].to_vec();
    out.push(Vector::from_iterator(xn.len() + un.len(), xn.iter().chain(un.iter()).copied()));
    out.push(system.next(&xn, &un));
    out
}

/// Strictly feasible point from scratch: the largest uniform slack `s_max`
/// (capped) is found by LP, then the original problem tightened by
/// `s_max / 2` is solved.
pub fn initial_slater(problem: &MpcProblem, x: &Vector, cap: f64) -> Result<Vec<Vector>> {
    let (s_max, _) = oracle::max_uniform_slack(problem, x, cap)?;
    if !(s_max > 0.0) {
        return Err(Error::Slater(format!(
            "no strictly feasible input sequence from this state (best slack {s_max:.3e})"
        )));
    }
    let cq = oracle::condense(problem, x, 0.5 * s_max)?;
    let sol = oracle::solve_qp(&cq.qp)?;
    let u = Vector::from_column_slice(&sol.x);
    let mut traj = consolidate(x, &cq.inputs(&u), &problem.system)?;
    traj.local_states.clear();
    Ok(stage_blocks(&traj))
}

fn strictly_feasible(subs: &[SubproblemData], blocks: &[Vector]) -> bool {
    subs.iter()
        .zip(blocks)
        .all(|(s, y)| y.len() == s.layout.y_len && s.original_slack(y).iter().all(|v| *v > 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SampleMode {
    #[serde(rename = "MPC")]
    Mpc,
    #[serde(rename = "LQR")]
    TerminalLqr,
}

impl SampleMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SampleMode::Mpc => "MPC",
            SampleMode::TerminalLqr => "LQR",
        }
    }
}

/// Cost-decrease inequality between two consecutive MPC samples:
/// `V(k+1) ≤ V(k) − ℓ(x_k, u_k) + gap(k+1)`.
#[derive(Debug, Clone, Serialize)]
pub struct DecreaseCheck {
    pub previous_cost: f64,
    pub stage_cost: f64,
    pub gap: f64,
    pub current_cost: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleRecord {
    pub sample: usize,
    pub mode: SampleMode,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    /// Cost of the consolidated trajectory.
    pub cost: Option<f64>,
    pub oracle_cost: Option<f64>,
    pub gap: Option<f64>,
    pub certified: bool,
    pub ledger: Option<TighteningLedger>,
    pub certificates: Vec<SlaterCertificate>,
    pub violation: Vec<f64>,
    pub iterations: Vec<u64>,
    pub worker_time: Vec<f64>,
    pub solve_time: f64,
    pub trajectory: Option<ConsolidatedTrajectory>,
    pub feasibility: Option<FeasibilityReport>,
    pub slater_fallback: bool,
    pub decrease: Option<DecreaseCheck>,
    /// Rows active at the oracle optimum (multiplier > 0).
    pub active_constraints: Option<usize>,
}

impl SampleRecord {
    fn lqr(sample: usize, x: &Vector, u: &Vector) -> Self {
        Self {
            sample,
            mode: SampleMode::TerminalLqr,
            state: x.iter().copied().collect(),
            input: u.iter().copied().collect(),
            cost: None,
            oracle_cost: None,
            gap: None,
            certified: true,
            ledger: None,
            certificates: Vec::new(),
            violation: Vec::new(),
            iterations: Vec::new(),
            worker_time: Vec::new(),
            solve_time: 0.0,
            trajectory: None,
            feasibility: None,
            slater_fallback: false,
            decrease: None,
            active_constraints: None,
        }
    }

    /// `𝒱* ≤ V ≤ 𝒱* + gap` up to the given absolute tolerance.
    pub fn sandwich_holds(&self, tol: f64) -> Option<bool> {
        match (self.cost, self.oracle_cost, self.gap) {
            (Some(v), Some(s), Some(g)) => Some(s <= v + tol && v <= s + g + tol),
            _ => None,
        }
    }
}

pub struct Controller {
    pub problem: MpcProblem,
    pub subs: Vec<SubproblemData>,
    pub config: ControllerConfig,
    slater: Option<Vec<Vector>>,
    memory: Option<StabilityMemory>,
    previous: Option<(f64, f64)>,
    sample: usize,
    /// Report of the most recent split solve.
    pub last_report: Option<SolveReport>,
}

impl Controller {
    pub fn new(problem: MpcProblem, config: ControllerConfig) -> Result<Self> {
        let subs = build_subproblems(&problem, config.rho)?;
        Ok(Self {
            problem,
            subs,
            config,
            slater: None,
            memory: None,
            previous: None,
            sample: 0,
            last_report: None,
        })
    }

    /// One controller sample at the measured state `x`.
    pub fn step(&mut self, x: &Vector) -> Result<(Vector, SampleRecord)> {
        if x.len() != self.problem.nx() {
            return Err(Error::Dimension(format!("state has {} entries, expected {}", x.len(), self.problem.nx())));
        }
        let sample = self.sample;
        self.sample += 1;
        if self.problem.terminal.contains(x) {
            let u = &self.problem.gain * x;
            self.previous = None;
            self.memory = None;
            self.slater = None;
            return Ok((u.clone(), SampleRecord::lqr(sample, x, &u)));
        }
        self.solve_split(x, sample)
    }

    /// One split solve at `x` regardless of terminal-set membership.
    pub fn solve_at(&mut self, x: &Vector) -> Result<(Vector, SampleRecord)> {
        if x.len() != self.problem.nx() {
            return Err(Error::Dimension(format!("state has {} entries, expected {}", x.len(), self.problem.nx())));
        }
        let sample = self.sample;
        self.sample += 1;
        self.solve_split(x, sample)
    }

    fn solve_split(&mut self, x: &Vector, sample: usize) -> Result<(Vector, SampleRecord)> {
        let nx = self.problem.nx();
        let memory = if self.config.stability_caps { self.memory.clone() } else { None };
        let shifted = self.slater.take().and_then(|mut b| {
            // Re-pin the measured state; nominally it already matches.
            b[0].rows_mut(0, nx).copy_from(x);
            strictly_feasible(&self.subs, &b).then_some(b)
        });
        let fallback = self.config.slater != SlaterPolicy::Recompute && shifted.is_none() && sample > 0;
        let mut candidates = Vec::with_capacity(2);
        if self.config.slater != SlaterPolicy::Recompute {
            if let Some(b) = shifted {
                candidates.push(b);
            }
        }
        if candidates.is_empty() || self.config.slater != SlaterPolicy::Shift {
            candidates.push(initial_slater(&self.problem, x, self.config.slack_cap)?);
        }
        let mut chosen: Option<(Vec<Vector>, Vec<SlaterCertificate>, TighteningLedger)> = None;
        let mut last_err = None;
        for blocks in candidates {
            let certs: Vec<SlaterCertificate> =
                self.subs.iter().zip(&blocks).map(|(s, y)| slater_certificate(s, y)).collect();
            match build_ledger(&self.subs, &certs, &self.problem.system.state, memory.as_ref(), self.config.safety) {
                Ok(l) => {
                    if chosen.as_ref().is_none_or(|c| l.max_iterations() < c.2.max_iterations()) {
                        chosen = Some((blocks, certs, l));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        let (blocks, certs, ledger) = match (chosen, last_err) {
            (Some(c), _) => c,
            (None, Some(e)) => return Err(e),
            (None, None) => unreachable!("at least one candidate"),
        };

        let clock = Instant::now();
        let report = dfg::run_with(
            &self.subs,
            &ledger,
            &blocks,
            RunOptions { mode: self.config.mode, freeze: self.config.freeze, profile: true },
        )?;
        let solve_time = clock.elapsed().as_secs_f64();
        if !report.all_certified() {
            let bad: Vec<String> = (0..self.subs.len())
                .filter(|t| !report.certified(*t))
                .map(|t| format!("stage {t}: {:.3e} > {:.3e}", report.violation[t], report.accuracy[t]))
                .collect();
            return Err(Error::Certificate(format!(
                "sample {sample}: residual above target ({})",
                bad.join(", ")
            )));
        }

        let n = self.problem.horizon();
        let inputs: Vec<Vector> = (0..n)
            .map(|t| Vector::from_column_slice(&report.stage_vars(&self.subs, t)[nx..]))
            .collect();
        let mut traj = consolidate(x, &inputs, &self.problem.system)?;
        traj.local_states = report.xi_hat.iter().map(|xi| xi[..nx].to_vec()).collect();
        let feasibility = check_original_feasibility(&traj, &self.problem);
        let cost = traj.cost(&self.problem);
        let rows: Vec<usize> = self.subs.iter().map(|s| s.p()).collect();
        let gap = suboptimality_gap(&ledger, &rows);

        let (oracle_cost, active) = if self.config.oracle {
            let cq = oracle::condense(&self.problem, x, 0.0)?;
            let sol = oracle::solve_qp(&cq.qp)?;
            let u = Vector::from_column_slice(&sol.x);
            (Some(cq.cost(&u)), Some(sol.active_set.len()))
        } else {
            (None, None)
        };

        let u0 = inputs[0].clone();
        let q = &self.problem.cost.state_weight;
        let r = &self.problem.cost.input_weight;
        let stage_cost = 0.5 * (x.dot(&(q * x)) + u0.dot(&(r * &u0)));
        let decrease = self.previous.map(|(prev_cost, prev_stage)| {
            let bound = prev_cost - prev_stage + gap;
            DecreaseCheck {
                previous_cost: prev_cost,
                stage_cost: prev_stage,
                gap,
                current_cost: cost,
                holds: cost <= bound + 1e-9 * (1.0 + bound.abs()),
            }
        });

        self.previous = Some((cost, stage_cost));
        self.memory = Some(StabilityMemory { stage_cost, dual_radius: ledger.dual_radius.clone() });
        self.slater = Some(slater_update(&traj, &self.problem.gain, &self.problem.system));

        let record = SampleRecord {
            sample,
            mode: SampleMode::Mpc,
            state: x.iter().copied().collect(),
            input: u0.iter().copied().collect(),
            cost: Some(cost),
            oracle_cost,
            gap: Some(gap),
            certified: true,
            iterations: report.iterations_run.clone(),
            worker_time: report.worker_time.clone(),
            violation: report.violation.clone(),
            ledger: Some(ledger),
            certificates: certs,
            solve_time,
            trajectory: Some(traj),
            feasibility: Some(feasibility),
            slater_fallback: fallback,
            decrease,
            active_constraints: active,
        };
        self.last_report = Some(report);
        Ok((u0, record))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosedLoopLog {
    pub samples: Vec<SampleRecord>,
    pub converged: bool,
    /// First sample taken in the terminal set.
    pub terminal_entry: Option<usize>,
    pub final_state: Vec<f64>,
    /// Reason the run stopped early on a Slater or certificate failure.
    pub aborted: Option<String>,
}

impl ClosedLoopLog {
    pub fn mpc_samples(&self) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(|s| s.mode == SampleMode::Mpc)
    }
}

/// Nominal closed loop from `problem.x_init` until `‖x‖_∞ ≤ tol` or `t_max`
/// samples.
pub fn run_closed_loop(problem: &MpcProblem, config: ControllerConfig, t_max: usize, tol: f64) -> Result<ClosedLoopLog> {
    let nx = problem.nx();
    run_closed_loop_with(problem, config, t_max, tol, |_| Vector::zeros(nx))
}

/// Closed loop with an additive state disturbance `w_k` supplied per sample.
pub fn run_closed_loop_with(
    problem: &MpcProblem,
    config: ControllerConfig,
    t_max: usize,
    tol: f64,
    mut disturbance: impl FnMut(usize) -> Vector,
) -> Result<ClosedLoopLog> {
    let mut ctl = Controller::new(problem.clone(), config)?;
    let mut x = problem.x_init.clone();
    let mut log = ClosedLoopLog {
        samples: Vec::new(),
        converged: false,
        terminal_entry: None,
        final_state: x.iter().copied().collect(),
        aborted: None,
    };
    for k in 0..t_max {
        let (u, rec) = match ctl.step(&x) {
            Ok(v) => v,
            Err(e @ (Error::Slater(_) | Error::Certificate(_))) => {
                log.aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        if rec.mode == SampleMode::TerminalLqr && log.terminal_entry.is_none() {
            log.terminal_entry = Some(k);
        }
        log.samples.push(rec);
        x = problem.system.next(&x, &u) + disturbance(k);
        log.final_state = x.iter().copied().collect();
        if x.amax() <= tol {
            log.converged = true;
            break;
        }
    }
    Ok(log)
}

/// `‖C_t‖_∞` per stage, for reports.
pub fn state_row_norms(subs: &[SubproblemData]) -> Vec<f64> {
    subs.iter().map(|s| inf_norm(&crate::tighten::original_state_rows(s))).collect()
}
