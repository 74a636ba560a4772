//! `solve`, `simulate`, `bench` and `certify`.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use splitmpc::control::{self, run_closed_loop_with, ClosedLoopLog, Controller, SampleRecord};
use splitmpc::dfg::{self, Mode, RunOptions};
use splitmpc::model::MpcProblem;
use splitmpc::oracle;
use splitmpc::split::{condition_number, SubproblemData};
use splitmpc::tighten::{build_ledger, slater_certificate, SlaterCertificate, TighteningLedger};
use splitmpc::Vector;

use crate::output::{self, num, write_json, write_rows, Manifest};
use crate::{CliError, ScenarioConfig};

/// Flag overrides on top of the scenario file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub oracle: Option<bool>,
}

/// A loaded scenario with overrides applied.
pub struct Run {
    pub cfg: ScenarioConfig,
    pub problem: MpcProblem,
    pub hash: String,
    pub out: PathBuf,
}

impl Run {
    pub fn new(mut cfg: ScenarioConfig, text: &str, ov: &Overrides) -> Result<Self, CliError> {
        if let Some(m) = ov.mode {
            cfg.mode = m;
        }
        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if let Some(o) = ov.oracle {
            cfg.oracle = o;
        }
        let out = ov.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out));
        let problem = cfg.problem()?;
        cfg.controller()?;
        Ok(Self { cfg, problem, hash: output::config_hash(text), out })
    }

    pub fn load(path: &std::path::Path, ov: &Overrides) -> Result<Self, CliError> {
        let (cfg, text) = ScenarioConfig::load(path)?;
        Self::new(cfg, &text, ov)
    }

    fn prepare_out(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out)?;
        Ok(())
    }

    fn manifest<T: Serialize>(&self, command: &str, status: &str, outputs: &[&str], timing: serde_json::Value, data: T) -> Manifest<T> {
        Manifest {
            schema_version: output::SCHEMA_VERSION,
            command: command.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            mode: self.cfg.mode,
            oracle: self.cfg.oracle,
            status: status.into(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            timing,
            data,
        }
    }
}

fn status_of(r: &Result<(), CliError>) -> String {
    match r {
        Ok(()) => "ok".into(),
        Err(e) => e.to_string(),
    }
}

// ---------------------------------------------------------------- solve

#[derive(Debug, Serialize)]
pub struct SolveData {
    pub record: SampleRecord,
    pub report: dfg::SolveReport,
}

pub struct SolveOutcome {
    pub record: SampleRecord,
    pub report: dfg::SolveReport,
    pub kappa: Vec<f64>,
}

pub fn solve(run: &Run) -> Result<SolveOutcome, CliError> {
    run.prepare_out()?;
    let cfg = run.cfg.controller()?;
    let mut ctl = Controller::new(run.problem.clone(), cfg)?;
    let (_, record) = ctl.solve_at(&run.problem.x_init)?;
    let report = ctl.last_report.take().expect("split solve stores its report");
    let kappa: Vec<f64> = ctl.subs.iter().map(condition_number).collect();
    let ledger = record.ledger.as_ref().expect("split solve has a ledger");

    let header: Vec<String> = [
        "t", "k_bar", "iterations_run", "eta", "eps", "eps_z", "alpha", "gamma_bar", "radius", "lipschitz",
        "kappa", "violation", "cert_pass",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = (0..ledger.iterations.len())
        .map(|t| {
            vec![
                t.to_string(),
                ledger.iterations[t].to_string(),
                report.iterations_run[t].to_string(),
                num(ledger.accuracy[t]),
                num(ledger.tighten[t]),
                num(ledger.relax[t]),
                num(ledger.drift[t]),
                num(ledger.shift[t]),
                num(ledger.dual_radius[t]),
                num(ledger.lipschitz[t]),
                num(kappa[t]),
                num(report.violation[t]),
                report.certified(t).to_string(),
            ]
        })
        .collect();
    write_rows(&run.out.join("subproblems.csv"), &header, &rows)?;
    let xi_rows: Vec<Vec<String>> = report
        .xi_hat
        .iter()
        .enumerate()
        .flat_map(|(t, xi)| xi.iter().enumerate().map(move |(i, v)| vec![t.to_string(), i.to_string(), num(*v)]))
        .collect();
    write_rows(&run.out.join("xi_hat.csv"), &["t", "index", "value"].map(String::from), &xi_rows)?;
    let timing = json!({ "solve_time": record.solve_time, "split_wall_time": report.wall_time, "worker_time": report.worker_time });
    let m = run.manifest(
        "solve",
        "ok",
        &["subproblems.csv", "xi_hat.csv", "manifest.json"],
        timing,
        SolveData { record: record.clone(), report: report.clone() },
    );
    write_json(&run.out.join("manifest.json"), &m)?;
    Ok(SolveOutcome { record, report, kappa })
}

// ------------------------------------------------------------- simulate

pub fn closed_loop(run: &Run) -> Result<ClosedLoopLog, CliError> {
    let cfg = run.cfg.controller()?;
    let nx = run.problem.nx();
    let amp = run.cfg.disturbance;
    let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.seed);
    let log = run_closed_loop_with(&run.problem, cfg, run.cfg.t_max, run.cfg.tolerance, |_| {
        if amp > 0.0 {
            Vector::from_fn(nx, |_, _| rng.random_range(-amp..=amp))
        } else {
            Vector::zeros(nx)
        }
    })?;
    Ok(log)
}

pub fn simulate(run: &Run) -> Result<ClosedLoopLog, CliError> {
    run.prepare_out()?;
    let log = closed_loop(run)?;
    let (nx, nu) = (run.problem.nx(), run.problem.nu());
    let (h, rows) = output::closed_loop_table(&log, nx, nu);
    write_rows(&run.out.join("closed_loop.csv"), &h, &rows)?;
    let first = output::first_mpc(&log).map(|r| output::mismatch_rows(r, false)).unwrap_or_default();
    write_rows(&run.out.join("mismatch.csv"), &output::mismatch_header(nx, false), &first)?;
    let all: Vec<Vec<String>> = log.samples.iter().flat_map(|r| output::mismatch_rows(r, true)).collect();
    write_rows(&run.out.join("mismatch_all.csv"), &output::mismatch_header(nx, true), &all)?;
    let result = match &log.aborted {
        Some(msg) => Err(CliError::Certificate(msg.clone())),
        None => Ok(()),
    };
    let timing = json!({
        "solve_time": log.samples.iter().map(|s| s.solve_time).collect::<Vec<_>>(),
        "worker_time": log.samples.iter().map(|s| s.worker_time.clone()).collect::<Vec<_>>(),
    });
    let m = run.manifest(
        "simulate",
        &status_of(&result),
        &["closed_loop.csv", "mismatch.csv", "mismatch_all.csv", "manifest.json"],
        timing,
        &log,
    );
    write_json(&run.out.join("manifest.json"), &m)?;
    result.map(|_| log)
}

// ---------------------------------------------------------------- bench

pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty(), "median of nothing");
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub sample: usize,
    pub baseline_iterations: u64,
    pub baseline_time: f64,
    pub baseline_certified: bool,
    pub iterations: Vec<u64>,
    pub subproblem_time: Vec<f64>,
    pub eta: Vec<f64>,
    pub baseline_eta: f64,
    pub lipschitz_baseline: f64,
    pub lipschitz_split: f64,
    pub lipschitz_ratio: f64,
    pub condition_baseline: f64,
    pub condition_split: f64,
    pub condition_ratio: f64,
    pub serialized_time: f64,
    pub parallel_time: f64,
    pub speedup: f64,
    pub speedup_parallel: f64,
    pub split_certified: bool,
}

/// Strictly feasible stage vectors recorded in the certificates.
pub fn certificate_start(certs: &[SlaterCertificate]) -> Vec<Vector> {
    certs.iter().map(|c| Vector::from_column_slice(&c.y_tilde)).collect()
}

/// Input sequence of a set of stage vectors, stacked for the condensed QP.
pub fn stacked_inputs(start: &[Vector], nx: usize) -> Vector {
    let n = start.len() - 1;
    let u: Vec<f64> = start[..n].iter().flat_map(|y| y.iter().skip(nx).copied().collect::<Vec<_>>()).collect();
    Vector::from_vec(u)
}

/// Times one MPC sample: the split solver in both modes and the condensed
/// baseline at the same state and from the same strictly feasible point,
/// each `reps` times.
pub fn bench_sample(
    problem: &MpcProblem,
    subs: &[SubproblemData],
    record: &SampleRecord,
    reps: usize,
    safety: f64,
) -> Result<BenchRow, CliError> {
    let reps = reps.max(1);
    let ledger: &TighteningLedger = record
        .ledger
        .as_ref()
        .ok_or_else(|| CliError::Run(format!("sample {} has no split solve", record.sample)))?;
    let start = certificate_start(&record.certificates);
    let mut ser = Vec::with_capacity(reps);
    let mut par = Vec::with_capacity(reps);
    let mut per_stage: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); subs.len()];
    let mut split_certified = true;
    let mut reference: Option<dfg::SolveReport> = None;
    for _ in 0..reps {
        let r = dfg::run(subs, ledger, &start, Mode::Serialized)?;
        ser.push(r.wall_time);
        split_certified &= r.all_certified();
        let p = dfg::run(subs, ledger, &start, Mode::Parallel)?;
        par.push(p.wall_time);
        let prof = dfg::run_with(subs, ledger, &start, RunOptions { profile: true, ..RunOptions::mode(Mode::Serialized) })?;
        for (t, w) in prof.worker_time.iter().enumerate() {
            per_stage[t].push(*w);
        }
        if !r.same_numbers(&p) {
            return Err(CliError::Run(format!("sample {}: parallel and serialized runs differ", record.sample)));
        }
        reference.get_or_insert(r);
    }

    let x = Vector::from_column_slice(&record.state);
    let at_state = problem.with_initial_state(x);
    let u = stacked_inputs(&start, problem.nx());
    let eta_target = ledger.accuracy.iter().copied().fold(f64::INFINITY, f64::min);
    let mut base = Vec::with_capacity(reps);
    let mut last = None;
    for _ in 0..reps {
        let b = oracle::solve_baseline_nonparallel(&at_state, eta_target, &u, safety, None)?;
        base.push(b.wall_time);
        last = Some(b);
    }
    let b = last.expect("at least one repetition");
    let l_split = ledger.lipschitz.iter().copied().fold(0.0, f64::max);
    let k_split = subs.iter().map(condition_number).fold(0.0, f64::max);
    let serialized_time = median(ser);
    let parallel_time = median(par);
    let baseline_time = median(base);
    Ok(BenchRow {
        sample: record.sample,
        baseline_iterations: b.iterations,
        baseline_time,
        baseline_certified: b.certified,
        iterations: ledger.iterations.clone(),
        subproblem_time: per_stage.into_iter().map(median).collect(),
        eta: ledger.accuracy.clone(),
        baseline_eta: b.accuracy,
        lipschitz_baseline: b.lipschitz,
        lipschitz_split: l_split,
        lipschitz_ratio: b.lipschitz / l_split,
        condition_baseline: b.condition,
        condition_split: k_split,
        condition_ratio: b.condition / k_split,
        serialized_time,
        parallel_time,
        speedup: baseline_time / serialized_time,
        speedup_parallel: baseline_time / parallel_time,
        split_certified,
    })
}

pub fn bench_header(n: usize) -> Vec<String> {
    let mut h: Vec<String> =
        ["sample", "baseline_k_bar", "baseline_time_s", "baseline_eta"].map(String::from).to_vec();
    h.extend((0..=n).map(|t| format!("k_bar_{t}")));
    h.extend((0..=n).map(|t| format!("time_{t}_s")));
    h.extend((0..=n).map(|t| format!("eta_{t}")));
    h.extend(
        [
            "L_s",
            "L_max",
            "L_ratio",
            "kappa_s",
            "kappa_max",
            "kappa_ratio",
            "split_serialized_s",
            "split_parallel_s",
            "speedup",
            "speedup_parallel",
            "baseline_cert",
            "split_cert",
        ]
        .map(String::from),
    );
    h
}

pub fn bench_row_strings(r: &BenchRow) -> Vec<String> {
    let mut v = vec![r.sample.to_string(), r.baseline_iterations.to_string(), num(r.baseline_time), num(r.baseline_eta)];
    v.extend(r.iterations.iter().map(|k| k.to_string()));
    v.extend(r.subproblem_time.iter().map(|t| num(*t)));
    v.extend(r.eta.iter().map(|e| num(*e)));
    v.extend([
        num(r.lipschitz_baseline),
        num(r.lipschitz_split),
        num(r.lipschitz_ratio),
        num(r.condition_baseline),
        num(r.condition_split),
        num(r.condition_ratio),
        num(r.serialized_time),
        num(r.parallel_time),
        num(r.speedup),
        num(r.speedup_parallel),
        r.baseline_certified.to_string(),
        r.split_certified.to_string(),
    ]);
    v
}

pub fn bench_markdown(rows: &[BenchRow], n: usize) -> String {
    let mut s = String::new();
    s.push_str("| sample | baseline k̄ | baseline time [s] |");
    for t in 0..=n {
        s.push_str(&format!(" k̄_{t} |"));
    }
    s.push_str(" split serialized [s] | split parallel [s] | speedup |\n|");
    for _ in 0..(n + 7) {
        s.push_str("---|");
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("| {} | {} | {:.4} |", r.sample, r.baseline_iterations, r.baseline_time));
        for k in &r.iterations {
            s.push_str(&format!(" {k} |"));
        }
        s.push_str(&format!(" {:.4} | {:.4} | {:.1} |\n", r.serialized_time, r.parallel_time, r.speedup));
    }
    s.push_str("\n| sample |");
    for t in 0..=n {
        s.push_str(&format!(" η_{t} |"));
    }
    s.push_str("\n|---|");
    for _ in 0..=n {
        s.push_str("---|");
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("| {} |", r.sample));
        for e in &r.eta {
            s.push_str(&format!(" {e:.3e} |"));
        }
        s.push('\n');
    }
    if let Some(r) = rows.first() {
        s.push_str(&format!(
            "\nL_s / max L_t = {:.1} / {:.1} = {:.1}; κ_s / max κ_t = {:.1} / {:.1} = {:.1}\n",
            r.lipschitz_baseline, r.lipschitz_split, r.lipschitz_ratio, r.condition_baseline, r.condition_split, r.condition_ratio
        ));
    }
    s
}

pub fn bench(run: &Run) -> Result<Vec<BenchRow>, CliError> {
    run.prepare_out()?;
    let mut nominal = run.cfg.clone();
    nominal.mode = Mode::Serialized;
    nominal.disturbance = 0.0;
    let cfg = nominal.controller()?;
    let log = control::run_closed_loop(&run.problem, cfg.clone(), run.cfg.t_max, run.cfg.tolerance)?;
    let subs = splitmpc::split::build_subproblems(&run.problem, cfg.rho)?;
    let limit = run.cfg.bench_samples.unwrap_or(usize::MAX);
    let mut rows = Vec::new();
    for rec in log.mpc_samples().take(limit) {
        rows.push(bench_sample(&run.problem, &subs, rec, run.cfg.repetitions, cfg.safety)?);
    }
    let n = run.problem.horizon();
    let strings: Vec<Vec<String>> = rows.iter().map(bench_row_strings).collect();
    write_rows(&run.out.join("bench.csv"), &bench_header(n), &strings)?;
    std::fs::write(run.out.join("bench.md"), bench_markdown(&rows, n))?;
    let result = match &log.aborted {
        Some(msg) => Err(CliError::Certificate(msg.clone())),
        None => Ok(()),
    };
    let timing = json!({ "repetitions": run.cfg.repetitions, "statistic": "median" });
    let m = run.manifest(
        "bench",
        &status_of(&result),
        &["bench.csv", "bench.md", "manifest.json"],
        timing,
        json!({ "rows": rows, "closed_loop": log }),
    );
    write_json(&run.out.join("manifest.json"), &m)?;
    result.map(|_| rows)
}

// -------------------------------------------------------------- certify

#[derive(Debug, Serialize)]
pub struct CertifyData {
    pub ledger: TighteningLedger,
    pub certificates: Vec<SlaterCertificate>,
}

pub fn certify(run: &Run) -> Result<CertifyData, CliError> {
    run.prepare_out()?;
    let cfg = run.cfg.controller()?;
    let subs = splitmpc::split::build_subproblems(&run.problem, cfg.rho)?;
    let start = control::initial_slater(&run.problem, &run.problem.x_init, cfg.slack_cap)?;
    let certs: Vec<SlaterCertificate> = subs.iter().zip(&start).map(|(s, y)| slater_certificate(s, y)).collect();
    let ledger = build_ledger(&subs, &certs, &run.problem.system.state, None, cfg.safety)?;
    let header: Vec<String> =
        ["t", "slack", "eps_z", "eps", "eta", "alpha", "gamma_bar", "radius", "lipschitz", "k_bar"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = (0..subs.len())
        .map(|t| {
            vec![
                t.to_string(),
                num(ledger.slack[t]),
                num(ledger.relax[t]),
                num(ledger.tighten[t]),
                num(ledger.accuracy[t]),
                num(ledger.drift[t]),
                num(ledger.shift[t]),
                num(ledger.dual_radius[t]),
                num(ledger.lipschitz[t]),
                ledger.iterations[t].to_string(),
            ]
        })
        .collect();
    write_rows(&run.out.join("ledger.csv"), &header, &rows)?;
    let data = CertifyData { ledger, certificates: certs };
    let m = run.manifest("certify", "ok", &["ledger.csv", "manifest.json"], json!({}), &data);
    write_json(&run.out.join("manifest.json"), &m)?;
    Ok(data)
}
