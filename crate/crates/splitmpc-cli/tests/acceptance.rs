//! Acceptance run. Prints one `criterion N: PASS|FAIL` line per criterion and
//! exits non-zero if any criterion fails.

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitmpc::control::{run_closed_loop, ClosedLoopLog, Controller, ControllerConfig, SampleRecord};
use splitmpc::dfg::Mode;
use splitmpc::model::{compute_terminal_set, dare_residual, solve_dare, terminal_set_margins, LtiSystem, MpcProblem};
use splitmpc::oracle::{
    kkt_residuals, max_uniform_slack, solve_qp_enumeration, solve_qp_polished, solve_qp_projected_gradient,
    QpInstance, ENUM_MAX_DIM, ENUM_MAX_ROWS,
};
use splitmpc::scenario::{self, box_constraints, Weights, REFERENCE_HORIZON, REFERENCE_X0};
use splitmpc::split::{assemble_constraints, build_subproblems, condition_number, SubproblemData};
use splitmpc::tighten::{
    band_pair, build_ledger, gamma_vector, multiplier_bound_basic, original_state_rows, slater_certificate,
    TighteningLedger, DEFAULT_SAFETY,
};
use splitmpc::{Mat, Vector};
use splitmpc_cli::commands::{self, Overrides, Run};

// Pinned tolerances and sizes.
const SANDWICH_REL_TOL: f64 = 1e-9;
const ROUNDING: f64 = 1e-12;
const MIN_SLACK: f64 = 0.05;
const SOLVE_INSTANCES: usize = 50;
const SOLVE_BUDGET_S: f64 = 300.0;
const LOOP_INSTANCES: usize = 100;
const ENTRY_SAMPLES: usize = 5;
const SETTLE_TOL: f64 = 1e-3;
const SETTLE_SAMPLES: usize = 50;
const BOUND_INSTANCES: usize = 1000;
const RATIO_MIN: f64 = 10.0;
const SPEEDUP_MIN: f64 = 10.0;
const BENCH_REPS: usize = 11;
const ORACLE_QPS: usize = 100;
const PG_ITERATIONS: u64 = 1_000_000;
const ORACLE_AGREE: f64 = 1e-6;
const KKT_TOL: f64 = 1e-9;
const RICCATI_TOL: f64 = 1e-9;
const SET_TOL: f64 = 1e-9;
const RANDOM_SYSTEMS: usize = 20;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

fn config(mode: Mode) -> ControllerConfig {
    ControllerConfig { mode, oracle: true, ..ControllerConfig::default() }
}

fn solvable_outside(problem: &MpcProblem, x: &Vector) -> bool {
    !problem.terminal.contains(x) && matches!(max_uniform_slack(problem, x, 1.0), Ok((s, _)) if s > MIN_SLACK)
}

fn draw_outside(rng: &mut ChaCha8Rng, problem: &MpcProblem, half: f64) -> Vector {
    loop {
        let x = Vector::from_fn(problem.nx(), |_, _| rng.random_range(-half..half));
        if solvable_outside(problem, &x) {
            return x;
        }
    }
}

/// Random single-sample instances on both plants, drawn outside the terminal
/// set with a strictly feasible input sequence.
fn solve_instances() -> Vec<(String, MpcProblem)> {
    let mut r = rng(101);
    let mut out = Vec::new();
    for i in 0..SOLVE_INSTANCES {
        let p = if i % 2 == 0 {
            let n = r.random_range(3..=REFERENCE_HORIZON);
            let base = scenario::reference_plant(Weights::Tuned, n).unwrap();
            let x = draw_outside(&mut r, &base, 4.0);
            (format!("reference N={n} x0={:?}", x.as_slice()), base.with_initial_state(x))
        } else {
            let n = r.random_range(2..=4);
            let base = scenario::double_integrator(n, Vector::zeros(2)).unwrap();
            let x = draw_outside(&mut r, &base, 5.0);
            (format!("double integrator N={n} x0={:?}", x.as_slice()), base.with_initial_state(x))
        };
        out.push(p);
    }
    out
}

struct Solved {
    name: String,
    serialized: Result<SampleRecord, String>,
    same_as_parallel: Result<bool, String>,
}

fn solve_once(problem: &MpcProblem, mode: Mode) -> Result<(SampleRecord, splitmpc::dfg::SolveReport), String> {
    let mut ctl = Controller::new(problem.clone(), config(mode)).map_err(|e| e.to_string())?;
    let (_, rec) = ctl.solve_at(&problem.x_init).map_err(|e| e.to_string())?;
    let rep = ctl.last_report.take().ok_or("no split report")?;
    Ok((rec, rep))
}

fn solve_all(instances: &[(String, MpcProblem)]) -> (Vec<Solved>, f64) {
    let mut out = Vec::new();
    let mut serial_time = 0.0;
    for (name, p) in instances {
        let t0 = Instant::now();
        let ser = solve_once(p, Mode::Serialized);
        serial_time += t0.elapsed().as_secs_f64();
        let par = solve_once(p, Mode::Parallel);
        let same = match (&ser, &par) {
            (Ok((rs, a)), Ok((rp, b))) => {
                Ok(a.same_numbers(b) && rs.input == rp.input && rs.cost.map(f64::to_bits) == rp.cost.map(f64::to_bits))
            }
            (Err(e), _) | (_, Err(e)) => Err(e.clone()),
        };
        out.push(Solved { name: name.clone(), serialized: ser.map(|(r, _)| r), same_as_parallel: same });
    }
    (out, serial_time)
}

fn criterion_1(solved: &[Solved], secs: f64) -> Verdict {
    let mut failures = Vec::new();
    let mut worst_gap_use: f64 = 0.0;
    for s in solved {
        match &s.serialized {
            Err(e) => failures.push(format!("{}: {e}", s.name)),
            Ok(rec) => {
                let v_star = rec.oracle_cost.unwrap_or(f64::NAN);
                let tol = SANDWICH_REL_TOL * (1.0 + v_star.abs());
                let feasible = rec.feasibility.as_ref().is_some_and(|f| f.pass);
                if rec.sandwich_holds(tol) != Some(true) || !feasible {
                    failures.push(format!(
                        "{}: V={:?} V*={:?} gap={:?} feasible={feasible}",
                        s.name, rec.cost, rec.oracle_cost, rec.gap
                    ));
                } else if let (Some(v), Some(g)) = (rec.cost, rec.gap) {
                    if g > 0.0 {
                        worst_gap_use = worst_gap_use.max((v - v_star) / g);
                    }
                }
            }
        }
    }
    let pass = failures.is_empty() && secs <= SOLVE_BUDGET_S;
    let mut d = format!(
        "{} instances, {} failures, max (V-V*)/gap = {worst_gap_use:.2e}, serialized time {secs:.1} s (budget {SOLVE_BUDGET_S} s)",
        solved.len(),
        failures.len()
    );
    for f in failures.iter().take(3) {
        d.push_str(&format!("; {f}"));
    }
    verdict(pass, d)
}

fn criterion_2(solved: &[Solved]) -> Verdict {
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for s in solved {
        let Ok(rec) = &s.serialized else {
            failures.push(format!("{}: not solved", s.name));
            continue;
        };
        let ledger = rec.ledger.as_ref().unwrap();
        for (t, v) in rec.violation.iter().enumerate() {
            let eta = ledger.accuracy[t];
            if eta > 0.0 {
                worst = worst.max(v / eta);
            }
            if !(*v <= eta) {
                failures.push(format!("{} stage {t}: {v:.3e} > {eta:.3e}", s.name));
            }
        }
    }
    let mut d = format!("{} instances, max violation/eta = {worst:.3}, {} exceedances", solved.len(), failures.len());
    for f in failures.iter().take(3) {
        d.push_str(&format!("; {f}"));
    }
    verdict(failures.is_empty(), d)
}

fn reference_loop() -> (MpcProblem, Result<ClosedLoopLog, String>) {
    let p = scenario::reference_plant(Weights::Tuned, REFERENCE_HORIZON).unwrap();
    let log = run_closed_loop(&p, config(Mode::Serialized), SETTLE_SAMPLES, SETTLE_TOL).map_err(|e| e.to_string());
    (p, log)
}

fn criterion_3(log: &Result<ClosedLoopLog, String>) -> Verdict {
    let log = match log {
        Ok(l) => l,
        Err(e) => return verdict(false, e.clone()),
    };
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for s in log.mpc_samples() {
        let (Some(traj), Some(ledger)) = (&s.trajectory, &s.ledger) else {
            failures.push(format!("sample {}: no trajectory", s.sample));
            continue;
        };
        for (t, m) in traj.mismatch().iter().enumerate() {
            for e in m {
                checked += 1;
                if ledger.drift[t] > 0.0 {
                    worst = worst.max(e / ledger.drift[t]);
                }
                if *e > ledger.drift[t] + ROUNDING {
                    failures.push(format!("sample {} stage {t}: {e:.3e} > {:.3e}", s.sample, ledger.drift[t]));
                }
            }
        }
    }
    let pass = failures.is_empty() && checked > 0 && log.aborted.is_none();
    let mut d = format!("{checked} entries over {} MPC samples, max mismatch/alpha = {worst:.3}", log.mpc_samples().count());
    for f in failures.iter().take(3) {
        d.push_str(&format!("; {f}"));
    }
    if let Some(a) = &log.aborted {
        d.push_str(&format!("; aborted: {a}"));
    }
    verdict(pass, d)
}

fn criterion_4() -> Verdict {
    let mut r = rng(202);
    let reference = scenario::reference_plant(Weights::Tuned, REFERENCE_HORIZON).unwrap();
    let double = scenario::double_integrator(4, Vector::zeros(2)).unwrap();
    let mut samples = 0;
    let mut worst = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for i in 0..LOOP_INSTANCES {
        let (name, p) = if i % 2 == 0 {
            ("reference", reference.with_initial_state(draw_outside(&mut r, &reference, 4.0)))
        } else {
            ("double integrator", double.with_initial_state(draw_outside(&mut r, &double, 5.0)))
        };
        let tag = format!("{name} x0={:?}", p.x_init.as_slice());
        let log = match run_closed_loop(&p, config(Mode::Serialized), SETTLE_SAMPLES, SETTLE_TOL) {
            Ok(l) => l,
            Err(e) => {
                failures.push(format!("{tag}: {e}"));
                continue;
            }
        };
        if let Some(a) = &log.aborted {
            failures.push(format!("{tag}: aborted: {a}"));
        }
        for s in log.mpc_samples() {
            samples += 1;
            match &s.feasibility {
                Some(f) if f.max_residual < 0.0 => worst = worst.max(f.max_residual),
                Some(f) => failures.push(format!("{tag} sample {}: residual {:.3e} at {:?}", s.sample, f.max_residual, f.first_violation)),
                None => failures.push(format!("{tag} sample {}: no feasibility report", s.sample)),
            }
        }
    }
    let mut d = format!(
        "{LOOP_INSTANCES} closed loops, {samples} MPC samples, worst residual {worst:.3e}, {} failures",
        failures.len()
    );
    for f in failures.iter().take(3) {
        d.push_str(&format!("; {f}"));
    }
    verdict(failures.is_empty() && samples > 0, d)
}

fn criterion_5(log: &Result<ClosedLoopLog, String>) -> Verdict {
    let log = match log {
        Ok(l) => l,
        Err(e) => return verdict(false, e.clone()),
    };
    let entry_ok = log.terminal_entry.is_some_and(|k| k <= ENTRY_SAMPLES);
    let decreases: Vec<_> = log.mpc_samples().filter_map(|s| s.decrease.as_ref()).collect();
    let decrease_ok = decreases.iter().all(|d| d.holds);
    let pass = entry_ok && log.converged && decrease_ok && log.aborted.is_none();
    verdict(
        pass,
        format!(
            "x0={REFERENCE_X0:?}: terminal entry at sample {:?} (limit {ENTRY_SAMPLES}), |x|_inf <= {SETTLE_TOL} after {} samples (limit {SETTLE_SAMPLES}), decrease holds at {}/{} transitions",
            log.terminal_entry,
            log.samples.len(),
            decreases.iter().filter(|d| d.holds).count(),
            decreases.len()
        ),
    )
}

/// The coupled tightened problem over all free stage variables and the
/// shared copies `z_1..z_N`. Stage rows are scaled by their weights so the QP
/// multipliers are the stage multipliers.
fn global_qp(problem: &MpcProblem, subs: &[SubproblemData], ledger: &TighteningLedger) -> (QpInstance, Vec<Range<usize>>) {
    let nx = problem.nx();
    let n = subs.len() - 1;
    let mut next = 0;
    let mut y_start = Vec::new();
    for s in subs {
        y_start.push(next);
        next += s.layout.y_len - s.layout.pinned;
    }
    let z_start = next;
    let dim = z_start + n * nx;
    let index: Vec<Vec<Option<usize>>> = subs
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let l = &s.layout;
            let mut map = vec![None; l.dim];
            for i in l.pinned..l.y_len {
                map[i] = Some(y_start[t] + i - l.pinned);
            }
            if let Some(o) = l.lo {
                for i in 0..nx {
                    map[o + i] = Some(z_start + (t - 1) * nx + i);
                }
            }
            if let Some(o) = l.hi {
                for i in 0..nx {
                    map[o + i] = Some(z_start + t * nx + i);
                }
            }
            map
        })
        .collect();
    let total: usize = subs.iter().map(|s| s.rows.total).sum();
    let mut h = Mat::zeros(dim, dim);
    let mut f = Vector::zeros(dim);
    let mut g = Mat::zeros(total, dim);
    let mut b = Vector::zeros(total);
    let mut ranges = Vec::new();
    let mut r0 = 0;
    let x0 = &problem.x_init;
    for (t, s) in subs.iter().enumerate() {
        let map = &index[t];
        let (lo, hi) = ledger.bands(t);
        let (gl, off) = assemble_constraints(s, lo, hi, &ledger.margins[t]).unwrap();
        for i in 0..s.layout.dim {
            for j in 0..s.layout.dim {
                match (map[i], map[j]) {
                    (Some(a), Some(c)) => h[(a, c)] += s.hessian[(i, j)],
                    (Some(a), None) => f[a] += s.hessian[(i, j)] * x0[j],
                    _ => {}
                }
            }
        }
        for r in 0..s.rows.total {
            let w = s.weights[r];
            let mut rhs = -off[r];
            for j in 0..s.layout.dim {
                match map[j] {
                    Some(a) => g[(r0 + r, a)] += w * gl[(r, j)],
                    None => rhs -= gl[(r, j)] * x0[j],
                }
            }
            b[r0 + r] = w * rhs;
        }
        ranges.push(r0..r0 + s.rows.total);
        r0 += s.rows.total;
    }
    (QpInstance::new(h, f, g, b).unwrap(), ranges)
}

fn tiny_problem(r: &mut ChaCha8Rng) -> Option<MpcProblem> {
    let a = r.random_range(-1.5..1.5);
    let b = r.random_range(0.3..1.5) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
    let sys = LtiSystem::new(Mat::from_element(1, 1, a), Mat::from_element(1, 1, b)).ok()?;
    let stage = box_constraints(1, 1, r.random_range(1.0..4.0), r.random_range(0.3..2.0), None);
    let q = Mat::from_element(1, 1, r.random_range(0.2..3.0));
    let rr = Mat::from_element(1, 1, r.random_range(0.2..3.0));
    let n = r.random_range(1..=2);
    let p = MpcProblem::assemble(sys, stage, q, rr, n, Vector::zeros(1)).ok()?;
    let half = -p.stage.offset[0];
    let x = Vector::from_element(1, r.random_range(-half..half));
    matches!(max_uniform_slack(&p, &x, 1.0), Ok((s, _)) if s > 1e-2).then(|| p.with_initial_state(x))
}

fn oracle_multipliers(qp: &QpInstance) -> Result<Vec<f64>, String> {
    let sol = if qp.nrows() <= ENUM_MAX_ROWS && qp.dim() <= ENUM_MAX_DIM {
        solve_qp_enumeration(qp)
    } else {
        solve_qp_polished(qp)
    }
    .map_err(|e| e.to_string())?;
    let k = kkt_residuals(qp, &sol.x, &sol.multipliers).max();
    if k > KKT_TOL {
        return Err(format!("oracle KKT residual {k:.3e}"));
    }
    Ok(sol.multipliers)
}

/// One subproblem on its own: every entry of the stage vector except the
/// measured state is free, including its consensus copies. Rows are scaled by
/// the stage weights, as in the dual iteration.
fn local_qp(sub: &SubproblemData, ledger: &TighteningLedger, pinned: &[f64]) -> QpInstance {
    let t = sub.index;
    let (lo, hi) = ledger.bands(t);
    let (g, off) = assemble_constraints(sub, lo, hi, &ledger.margins[t]).unwrap();
    let k = sub.layout.pinned;
    let d = sub.layout.dim - k;
    let x0 = Vector::from_column_slice(pinned);
    let h = sub.hessian.view((k, k), (d, d)).into_owned();
    let f = sub.hessian.view((k, 0), (d, k)) * &x0;
    let w = Mat::from_diagonal(&sub.weights);
    let rows = &w * g.columns(k, d);
    let bounds = -(&w * (off + g.columns(0, k) * &x0));
    QpInstance::new(h, f, rows, bounds).unwrap()
}

/// Random subproblem in the general form `min ½xᵀHx + fᵀx` s.t.
/// `Gx ≤ b − |C|α − ε` with a known strictly feasible `x̃`. Returns the ratio
/// `‖μ*‖ / 2R` for the uniform (`α = 0`) and the drift-aware tightening.
fn random_subproblem_ratios(r: &mut ChaCha8Rng) -> Result<(f64, f64), String> {
    let d = r.random_range(1..=4);
    let q = r.random_range(1..=6);
    let m = uniform_mat(r, d, d, 1.0);
    let h = &m * m.transpose() + Mat::identity(d, d) * r.random_range(0.05..1.0);
    let f = uniform_mat(r, d, 1, 3.0).column(0).into_owned();
    let g = uniform_mat(r, q, d, 1.0);
    let c = uniform_mat(r, q, 2, 1.0);
    let x_tilde = uniform_mat(r, d, 1, 1.0).column(0).into_owned();
    let row_slack = Vector::from_fn(q, |_, _| r.random_range(0.05..1.0));
    let b = &g * &x_tilde + &row_slack;
    let s = row_slack.min();
    let eps = r.random_range(0.0..0.5) * s;
    let sums: Vec<f64> = c.row_iter().map(|row| row.iter().map(|v| v.abs()).sum()).collect();
    let room = (0..q).map(|i| (row_slack[i] - eps) / sums[i].max(1e-12)).fold(f64::INFINITY, f64::min);
    let alpha = r.random_range(0.0..0.9) * room;
    let chol = h.clone().cholesky().unwrap();
    let x_free = -chol.solve(&f);
    let value = |x: &Vector| 0.5 * x.dot(&(&h * x)) + f.dot(x);
    let cert = splitmpc::tighten::SlaterCertificate {
        y_tilde: x_tilde.iter().copied().collect(),
        row_slack: row_slack.iter().copied().collect(),
        slack: s,
        v_tilde: value(&x_tilde),
        d_tilde: value(&x_free),
    };
    let mut ratios = [0.0; 2];
    for (k, a) in [0.0, alpha].into_iter().enumerate() {
        let shift = Vector::from_fn(q, |i, _| sums[i] * a + eps);
        let qp = QpInstance::new(h.clone(), f.clone(), g.clone(), &b - shift).unwrap();
        let mu = oracle_multipliers(&qp)?;
        let bound = splitmpc::tighten::multiplier_bound_gamma(&cert, eps, (None, None), a, &c, 1.0).map_err(|e| e.to_string())?;
        ratios[k] = Vector::from_column_slice(&mu).norm() / (2.0 * bound);
    }
    Ok((ratios[0], ratios[1]))
}

fn criterion_6() -> Verdict {
    let mut r = rng(303);
    let mut instances = 0;
    let mut subproblems = 0;
    let mut tries = 0;
    let mut worst_basic: f64 = 0.0;
    let mut worst_drift: f64 = 0.0;
    let mut coupled_exceed = 0;
    let mut coupled_worst: f64 = 0.0;
    let mut failures = Vec::new();
    let mut generic = 0;
    let (mut generic_basic, mut generic_drift, mut active): (f64, f64, usize) = (0.0, 0.0, 0);
    for i in 0..BOUND_INSTANCES {
        match random_subproblem_ratios(&mut r) {
            Ok((b, g)) => {
                generic += 1;
                generic_basic = generic_basic.max(b);
                generic_drift = generic_drift.max(g);
                if b > 0.0 || g > 0.0 {
                    active += 1;
                }
                if b > 1.0 || g > 1.0 {
                    failures.push(format!("random subproblem {i}: ratios {b:.6} / {g:.6}"));
                }
            }
            Err(e) => failures.push(format!("random subproblem {i}: {e}")),
        }
    }
    while instances < BOUND_INSTANCES && tries < 20 * BOUND_INSTANCES {
        tries += 1;
        let Some(p) = tiny_problem(&mut r) else { continue };
        let subs = build_subproblems(&p, 1.0).unwrap();
        let Ok(start) = splitmpc::control::initial_slater(&p, &p.x_init, 1.0) else { continue };
        let certs: Vec<_> = subs.iter().zip(&start).map(|(s, y)| slater_certificate(s, y)).collect();
        let Ok(ledger) = build_ledger(&subs, &certs, &p.system.state, None, DEFAULT_SAFETY) else { continue };
        instances += 1;

        // Uniform tightening ε_t on every row, paired with R_d.
        let mut uniform = ledger.clone();
        for (t, s) in subs.iter().enumerate() {
            uniform.margins[t] = gamma_vector(ledger.tighten[t], 0.0, &original_state_rows(s), s.rows.total - s.p());
        }
        for (t, sub) in subs.iter().enumerate() {
            let pinned = &start[t].as_slice()[..sub.layout.pinned];
            subproblems += 1;
            for (l, basic) in [(&uniform, true), (&ledger, false)] {
                let mu = match oracle_multipliers(&local_qp(sub, l, pinned)) {
                    Ok(m) => m,
                    Err(e) => {
                        failures.push(format!("x0={:?} stage {t}: {e}", p.x_init.as_slice()));
                        continue;
                    }
                };
                let norm = Vector::from_column_slice(&mu).norm();
                let bound = if basic {
                    multiplier_bound_basic(&certs[t], ledger.tighten[t], band_pair(&ledger.relax, t), sub.rho).unwrap()
                } else {
                    ledger.dual_radius[t]
                };
                let ratio = norm / (2.0 * bound);
                if basic {
                    worst_basic = worst_basic.max(ratio);
                } else {
                    worst_drift = worst_drift.max(ratio);
                }
                if norm > 2.0 * bound {
                    failures.push(format!(
                        "{} x0={:?} stage {t}: |mu| = {norm:.6e} > 2R = {:.6e}",
                        if basic { "uniform" } else { "drift" },
                        p.x_init.as_slice(),
                        2.0 * bound
                    ));
                }
            }
        }

        // Stage multipliers of the coupled problem, reported only.
        let (qp, ranges) = global_qp(&p, &subs, &ledger);
        if let Ok(mu) = oracle_multipliers(&qp) {
            for (t, rg) in ranges.iter().enumerate() {
                let ratio = Vector::from_column_slice(&mu[rg.clone()]).norm() / (2.0 * ledger.dual_radius[t]);
                coupled_worst = coupled_worst.max(ratio);
                if ratio > 1.0 {
                    coupled_exceed += 1;
                }
            }
        }
    }
    let pass = failures.is_empty() && generic >= BOUND_INSTANCES && subproblems >= BOUND_INSTANCES;
    let mut d = format!(
        "{generic} random subproblems ({active} with active rows): max |mu|/2R_d = {generic_basic:.3}, max |mu_gamma|/2R = {generic_drift:.3}; {subproblems} split subproblems of {instances} scalar plants: max |mu|/2R_d = {worst_basic:.3}, max |mu_gamma|/2R = {worst_drift:.3}; {} violations; coupled problem (not part of the criterion): {coupled_exceed} stage multipliers above 2R, max ratio {coupled_worst:.3}",
        failures.len()
    );
    for f in failures.iter().take(3) {
        d.push_str(&format!("; {f}"));
    }
    verdict(pass, d)
}

fn criterion_7() -> Verdict {
    let kappa_max = |n: usize| {
        let p = scenario::reference_plant(Weights::Tuned, n).unwrap();
        let subs = build_subproblems(&p, 1.0).unwrap();
        let middle = subs[1..n].iter().map(condition_number).fold(0.0, f64::max);
        let all = subs.iter().map(condition_number).fold(0.0, f64::max);
        (middle, all)
    };
    let (m3, a3) = kappa_max(3);
    let (m30, a30) = kappa_max(30);
    let modular = m3 == m30 && a3 == a30;
    let p = scenario::reference_plant(Weights::Tuned, REFERENCE_HORIZON).unwrap();
    let subs = build_subproblems(&p, 1.0).unwrap();
    let l_split = subs.iter().map(|s| s.lipschitz.max()).fold(0.0, f64::max);
    let k_split = subs.iter().map(condition_number).fold(0.0, f64::max);
    let (l_base, k_base) = splitmpc::oracle::baseline_conditioning(&p).unwrap();
    let (lr, kr) = (l_base / l_split, k_base / k_split);
    verdict(
        modular && lr >= RATIO_MIN && kr >= RATIO_MIN,
        format!(
            "max kappa middle N=3 {m3:.6} vs N=30 {m30:.6}, all stages {a3:.6} vs {a30:.6}; L_s/max L = {l_base:.1}/{l_split:.1} = {lr:.1}, kappa_s/max kappa = {k_base:.1}/{k_split:.1} = {kr:.1} (min {RATIO_MIN})"
        ),
    )
}

fn criterion_8(problem: &MpcProblem, log: &Result<ClosedLoopLog, String>) -> Verdict {
    let log = match log {
        Ok(l) => l,
        Err(e) => return verdict(false, e.clone()),
    };
    let subs = build_subproblems(problem, 1.0).unwrap();
    let mut base = 0.0;
    let mut split = 0.0;
    let mut per = Vec::new();
    for rec in log.mpc_samples() {
        match commands::bench_sample(problem, &subs, rec, BENCH_REPS, DEFAULT_SAFETY) {
            Ok(row) => {
                base += row.baseline_time;
                split += row.serialized_time;
                per.push(format!("{}: {:.3}/{:.3} s = {:.1}x", row.sample, row.baseline_time, row.serialized_time, row.speedup));
            }
            Err(e) => return verdict(false, format!("sample {}: {e}", rec.sample)),
        }
    }
    let speedup = base / split;
    verdict(
        speedup >= SPEEDUP_MIN && !per.is_empty(),
        format!(
            "reference closed loop, median of {BENCH_REPS}: per-sample baseline/serialized split = {base:.3}/{split:.3} s = {speedup:.1}x (min {SPEEDUP_MIN}x) [{}]",
            per.join(", ")
        ),
    )
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn simulate_files(config: &Path, mode: Mode, out: &Path) -> Result<Vec<Vec<u8>>, String> {
    let ov = Overrides { mode: Some(mode), out: Some(out.to_path_buf()), ..Overrides::default() };
    let run = Run::load(config, &ov).map_err(|e| e.to_string())?;
    commands::simulate(&run).map_err(|e| e.to_string())?;
    ["closed_loop.csv", "mismatch.csv", "mismatch_all.csv"]
        .iter()
        .map(|f| std::fs::read(out.join(f)).map_err(|e| e.to_string()))
        .collect()
}

fn criterion_9(solved: &[Solved]) -> Verdict {
    let mut failures = Vec::new();
    for s in solved {
        match &s.same_as_parallel {
            Ok(true) => {}
            Ok(false) => failures.push(format!("{}: parallel differs", s.name)),
            Err(e) => failures.push(format!("{}: {e}", s.name)),
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let mut files = 0;
    for cfg in ["reference.toml", "double_integrator.toml"] {
        let path = configs().join(cfg);
        let runs: Vec<_> = [(Mode::Serialized, "a"), (Mode::Serialized, "b"), (Mode::Parallel, "c")]
            .iter()
            .map(|(m, tag)| simulate_files(&path, *m, &dir.path().join(format!("{cfg}-{tag}"))))
            .collect();
        match (&runs[0], &runs[1], &runs[2]) {
            (Ok(a), Ok(b), Ok(c)) => {
                files += a.len();
                if a != b {
                    failures.push(format!("{cfg}: serialized reruns differ"));
                }
                if a != c {
                    failures.push(format!("{cfg}: parallel CSVs differ from serialized"));
                }
            }
            _ => failures.push(format!("{cfg}: simulate failed")),
        }
    }
    let mut d = format!(
        "{} single solves bitwise equal across modes, {files} CSVs byte-identical over reruns and modes, {} mismatches",
        solved.len(),
        failures.len()
    );
    for f in failures.iter().take(3) {
        d.push_str(&format!("; {f}"));
    }
    verdict(failures.is_empty(), d)
}

fn criterion_10() -> Verdict {
    let mut r = rng(404);
    let mut worst_x: f64 = 0.0;
    let mut worst_v: f64 = 0.0;
    let mut worst_kkt: f64 = 0.0;
    let mut worst_pg_kkt: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..ORACLE_QPS {
        let (d, q) = (3, 5);
        let m = uniform_mat(&mut r, d, d, 1.0);
        let h = &m * m.transpose() + Mat::identity(d, d) * 0.5;
        let f = uniform_mat(&mut r, d, 1, 1.0).column(0).into_owned();
        let g = uniform_mat(&mut r, q, d, 1.0);
        let x_tilde = uniform_mat(&mut r, d, 1, 1.0).column(0).into_owned();
        let slack = Vector::from_fn(q, |_, _| r.random_range(0.05..1.0));
        let b = &g * &x_tilde + slack;
        let qp = QpInstance::new(h, f, g, b).unwrap();
        let (Ok(e), Ok(pg)) = (solve_qp_enumeration(&qp), solve_qp_projected_gradient(&qp, PG_ITERATIONS)) else {
            failures += 1;
            continue;
        };
        let dx = Vector::from_column_slice(&e.x) - Vector::from_column_slice(&pg.x);
        worst_x = worst_x.max(dx.amax());
        worst_v = worst_v.max((e.value - pg.value).abs());
        worst_kkt = worst_kkt.max(kkt_residuals(&qp, &e.x, &e.multipliers).max());
        worst_pg_kkt = worst_pg_kkt.max(kkt_residuals(&qp, &pg.x, &pg.multipliers).max());
    }
    let pass = failures == 0 && worst_x <= ORACLE_AGREE && worst_v <= ORACLE_AGREE && worst_kkt <= KKT_TOL;
    verdict(
        pass,
        format!(
            "{ORACLE_QPS} QPs: max |x_enum - x_pg| = {worst_x:.2e}, max |V_enum - V_pg| = {worst_v:.2e} (tol {ORACLE_AGREE}), enumeration KKT {worst_kkt:.2e} (tol {KKT_TOL}), gradient KKT {worst_pg_kkt:.2e}, {failures} solver errors"
        ),
    )
}

/// Rank of `[B AB … A^{n−1}B]` from its singular values.
fn controllable(sys: &LtiSystem) -> bool {
    let n = sys.nx();
    let mut blocks = vec![sys.input.clone()];
    for k in 1..n {
        blocks.push(&sys.state * &blocks[k - 1]);
    }
    let m = sys.nu();
    let mut ctrb = Mat::zeros(n, n * m);
    for (k, blk) in blocks.iter().enumerate() {
        ctrb.columns_mut(k * m, m).copy_from(blk);
    }
    let sv = ctrb.svd(false, false).singular_values;
    sv.iter().filter(|s| **s > 1e-6 * sv.max()).count() == n
}

fn criterion_11() -> Verdict {
    let mut r = rng(505);
    let mut cases: Vec<(String, LtiSystem, Mat, Mat, splitmpc::model::StageConstraints)> = Vec::new();
    for w in [Weights::Tuned, Weights::Identity] {
        let (q, rr) = scenario::reference_weights(w);
        cases.push((format!("reference {w:?}"), scenario::reference_system(), q, rr, scenario::reference_stage()));
    }
    while cases.len() < 2 + RANDOM_SYSTEMS {
        let m = r.random_range(1..=2);
        let sys = LtiSystem::new(uniform_mat(&mut r, 2, 2, 1.3), uniform_mat(&mut r, 2, m, 1.0)).unwrap();
        if !controllable(&sys) {
            continue;
        }
        let stage = box_constraints(2, m, 5.0, 1.0, None);
        let name = format!("random A={:?} B={:?}", sys.state.as_slice(), sys.input.as_slice());
        cases.push((name, sys, Mat::identity(2, 2), Mat::identity(m, m), stage));
    }
    let mut worst_res: f64 = 0.0;
    let mut worst_inv = f64::NEG_INFINITY;
    let mut worst_adm = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for (name, sys, q, rr, stage) in &cases {
        let (p, k) = match solve_dare(sys, q, rr) {
            Ok(v) => v,
            Err(e) => {
                failures.push(format!("{name}: {e}"));
                continue;
            }
        };
        let res = dare_residual(sys, q, rr, &p);
        worst_res = worst_res.max(res);
        if res > RICCATI_TOL {
            failures.push(format!("{name}: Riccati residual {res:.3e}"));
        }
        let margins = compute_terminal_set(sys, &k, stage).and_then(|set| terminal_set_margins(sys, &k, stage, &set));
        match margins {
            Ok((inv, adm)) => {
                worst_inv = worst_inv.max(inv);
                worst_adm = worst_adm.max(adm);
                if inv > SET_TOL || adm > SET_TOL {
                    failures.push(format!("{name}: invariance {inv:.3e}, admissibility {adm:.3e}"));
                }
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    let mut d = format!(
        "{} systems: max Riccati residual {worst_res:.2e} (tol {RICCATI_TOL}), worst invariance margin {worst_inv:.2e}, worst admissibility margin {worst_adm:.2e} (tol {SET_TOL})",
        cases.len()
    );
    for f in failures.iter().take(3) {
        d.push_str(&format!("; {f}"));
    }
    verdict(failures.is_empty(), d)
}

fn report(id: usize, name: &str, started: Instant, v: Verdict, all: &mut bool) {
    *all &= v.pass;
    println!(
        "criterion {id:>2} [{name}]: {} ({:.1} s) {}",
        if v.pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64(),
        v.detail
    );
}

fn main() {
    let mut all = true;

    let t = Instant::now();
    let instances = solve_instances();
    let (solved, serial_time) = solve_all(&instances);
    report(1, "cost sandwich and feasibility", t, criterion_1(&solved, serial_time), &mut all);
    let t = Instant::now();
    report(2, "subproblem accuracy", t, criterion_2(&solved), &mut all);

    let t = Instant::now();
    let (reference, log) = reference_loop();
    report(3, "consolidation drift", t, criterion_3(&log), &mut all);
    let t = Instant::now();
    report(4, "recursive feasibility", t, criterion_4(), &mut all);
    let t = Instant::now();
    report(5, "closed-loop stability", t, criterion_5(&log), &mut all);
    let t = Instant::now();
    report(6, "multiplier bounds", t, criterion_6(), &mut all);
    let t = Instant::now();
    report(7, "conditioning and modularity", t, criterion_7(), &mut all);
    let t = Instant::now();
    report(8, "speedup over condensed baseline", t, criterion_8(&reference, &log), &mut all);
    let t = Instant::now();
    report(9, "parallel/serialized determinism", t, criterion_9(&solved), &mut all);
    let t = Instant::now();
    report(10, "oracle integrity", t, criterion_10(), &mut all);
    let t = Instant::now();
    report(11, "Riccati and terminal set", t, criterion_11(), &mut all);

    if !all {
        std::process::exit(1);
    }
}
