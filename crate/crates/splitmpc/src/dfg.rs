//! Parallel dual fast gradient method over the split subproblems.
//!
//! Each global iteration has two synchronisation points:
//!
//! 1. every worker takes its dual step for the previous iterate and then
//!    minimises its Lagrangian over the stage variables (consensus copies
//!    fixed);
//! 2. every consensus copy `z_t` is recomputed from stages `t-1` and `t`.
//!
//! Both phases are pure maps over a read-only snapshot, so running them on a
//! thread pool or in index order gives bitwise-identical results.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::linalg::{gemv, row_major, SparseRows};
use crate::split::{effective_offset, SubproblemData};
use crate::tighten::TighteningLedger;
use crate::{Error, Result, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Parallel,
    Serialized,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "parallel" => Ok(Mode::Parallel),
            "serialized" => Ok(Mode::Serialized),
            other => Err(format!("unknown mode `{other}` (expected parallel or serialized)")),
        }
    }
}

/// What a worker does after its own iteration budget is spent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub enum Freeze {
    /// Stop updating and keep relaying the last iterate to neighbours.
    #[default]
    Relay,
    /// Ignore per-stage budgets and run every worker to the global count.
    RunToGlobal,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub mode: Mode,
    pub freeze: Freeze,
    /// Record per-worker compute time (adds clock reads to the loop).
    pub profile: bool,
}

impl RunOptions {
    pub fn mode(mode: Mode) -> Self {
        Self { mode, ..Self::default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    /// Weighted average of the primal iterates, one decision vector per stage.
    pub xi_hat: Vec<Vec<f64>>,
    /// `‖[W(G ξ̂ + g_eff)]₊‖₂` per stage.
    pub violation: Vec<f64>,
    /// Target accuracy `η_t` the violation is certified against.
    pub accuracy: Vec<f64>,
    /// Primal suboptimality bound `2𝓡_t η_t`.
    pub subopt_bound: Vec<f64>,
    pub iterations_run: Vec<u64>,
    pub global_iterations: u64,
    pub wall_time: f64,
    /// Per-worker compute seconds (zero unless profiling).
    pub worker_time: Vec<f64>,
    /// Final multipliers per stage.
    pub multipliers: Vec<Vec<f64>>,
}

impl SolveReport {
    pub fn certified(&self, t: usize) -> bool {
        self.violation[t] <= self.accuracy[t]
    }

    pub fn all_certified(&self) -> bool {
        (0..self.violation.len()).all(|t| self.certified(t))
    }

    /// Bitwise equality of every numerical field except timings.
    pub fn same_numbers(&self, other: &SolveReport) -> bool {
        fn eq(a: &[f64], b: &[f64]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        fn eq2(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| eq(x, y))
        }
        eq2(&self.xi_hat, &other.xi_hat)
            && eq(&self.violation, &other.violation)
            && eq(&self.subopt_bound, &other.subopt_bound)
            && eq2(&self.multipliers, &other.multipliers)
            && self.iterations_run == other.iterations_run
            && self.global_iterations == other.global_iterations
    }

    /// Stage variables of the averaged iterate.
    pub fn stage_vars<'a>(&'a self, subs: &[SubproblemData], t: usize) -> &'a [f64] {
        &self.xi_hat[t][..subs[t].layout.y_len]
    }
}

/// Minimiser of the Lagrangian over the free stage variables with the
/// consensus copies held fixed. `pinned` supplies the measured state for the
/// first stage and is empty otherwise. Returns the full stage vector.
pub fn inner_minimize_y(
    sub: &SubproblemData,
    mu: &[f64],
    z_lo: &[f64],
    z_hi: &[f64],
    pinned: &[f64],
) -> Vector {
    let l = &sub.layout;
    let mut input = Vec::with_capacity(l.z_len() + mu.len());
    input.extend_from_slice(z_lo);
    input.extend_from_slice(z_hi);
    input.extend_from_slice(mu);
    let mut y = vec![0.0; l.y_len];
    y[..l.pinned].copy_from_slice(pinned);
    let c = pinned_term(sub, pinned);
    minimize_into(&mut y[l.pinned..], &sub.inner.gain, &input, &c);
    Vector::from_vec(y)
}

fn pinned_term(sub: &SubproblemData, pinned: &[f64]) -> Vec<f64> {
    let nfree = sub.layout.y_len - sub.layout.pinned;
    let mut c = vec![0.0; nfree];
    if !pinned.is_empty() {
        gemv(&mut c, &sub.inner.pinned_gain, pinned);
    }
    c
}

#[inline]
fn minimize_into(y_free: &mut [f64], gain: &[f64], input: &[f64], c: &[f64]) {
    gemv(y_free, gain, input);
    for (v, ci) in y_free.iter_mut().zip(c) {
        *v += ci;
    }
}

/// `z_t = ½(x_t + (A x + B u)_{t−1} + w⁺ − w⁻ + v⁺ − v⁻)`.
pub fn update_z(
    own: &[f64],
    prev: &[f64],
    w_plus: &[f64],
    w_minus: &[f64],
    v_plus: &[f64],
    v_minus: &[f64],
) -> Vec<f64> {
    let mut z = vec![0.0; own.len()];
    update_z_into(&mut z, own, prev, w_plus, w_minus, v_plus, v_minus);
    z
}

#[inline]
fn update_z_into(
    z: &mut [f64],
    own: &[f64],
    prev: &[f64],
    w_plus: &[f64],
    w_minus: &[f64],
    v_plus: &[f64],
    v_minus: &[f64],
) {
    for i in 0..z.len() {
        z[i] = 0.5 * (own[i] + prev[i] + v_plus[i] + w_plus[i] - v_minus[i] - w_minus[i]);
    }
}

/// Dual state of one worker.
#[derive(Debug, Clone)]
pub struct WorkerState {
    pub t: usize,
    /// Full stage vector, pinned part included.
    pub y: Vec<f64>,
    pub mu: Vec<f64>,
    pub mu_hat: Vec<f64>,
    /// Un-projected running sum `Σ (s+1)/2 ∇d(ξ^{s+1})`.
    pub grad_accum: Vec<f64>,
    /// Running sum `Σ (s+1) ξ^{s+1}`.
    pub xi_avg_accum: Vec<f64>,
    pub weight_sum: f64,
    /// Dual steps taken.
    pub k: u64,
    pub k_bar: u64,
    pub time: f64,
    // per-run constants
    constraint: SparseRows,
    offset: Vec<f64>,
    weights: Vec<f64>,
    inv_l: Vec<f64>,
    pinned_c: Vec<f64>,
    hi_map: Vec<f64>,
    /// `A x + B u` of the current stage vector, read by the next stage.
    outgoing: Vec<f64>,
    // scratch
    xi: Vec<f64>,
    input: Vec<f64>,
    grad: Vec<f64>,
}

impl WorkerState {
    pub fn new(sub: &SubproblemData, ledger: &TighteningLedger, y0: &[f64], k_bar: u64) -> Self {
        let t = sub.index;
        let rows = sub.rows.total;
        let (lo, hi) = ledger.bands(t);
        let offset = effective_offset(sub, lo, hi, &ledger.margins[t]);
        let inv_l = sub
            .lipschitz
            .diagonal(&sub.rows, sub.layout.nx)
            .into_iter()
            .map(|l| if l > 0.0 { 1.0 / l } else { 0.0 })
            .collect();
        Self {
            t,
            y: y0.to_vec(),
            mu: vec![0.0; rows],
            mu_hat: vec![0.0; rows],
            grad_accum: vec![0.0; rows],
            xi_avg_accum: vec![0.0; sub.layout.dim],
            weight_sum: 0.0,
            k: 0,
            k_bar,
            time: 0.0,
            constraint: SparseRows::from_dense(&sub.constraint),
            offset: offset.iter().copied().collect(),
            weights: sub.weights.iter().copied().collect(),
            inv_l,
            pinned_c: pinned_term(sub, &y0[..sub.layout.pinned]),
            hi_map: sub.hi_map.as_ref().map(row_major).unwrap_or_default(),
            outgoing: vec![0.0; if sub.hi_map.is_some() { sub.layout.nx } else { 0 }],
            xi: vec![0.0; sub.layout.dim],
            input: vec![0.0; sub.layout.z_len() + rows],
            grad: vec![0.0; rows],
        }
    }

    fn load_xi(&mut self, sub: &SubproblemData, z: &[f64]) {
        let l = &sub.layout;
        let nx = l.nx;
        self.xi[..l.y_len].copy_from_slice(&self.y);
        if let Some(o) = l.lo {
            self.xi[o..o + nx].copy_from_slice(&z[(self.t - 1) * nx..self.t * nx]);
        }
        if let Some(o) = l.hi {
            self.xi[o..o + nx].copy_from_slice(&z[self.t * nx..(self.t + 1) * nx]);
        }
    }

    /// `W (G ξ + g_eff)` at the current iterate.
    fn dual_gradient(&mut self) {
        self.constraint.mul_into(&mut self.grad, &self.xi);
        for i in 0..self.grad.len() {
            self.grad[i] = self.weights[i] * (self.grad[i] + self.offset[i]);
        }
    }

    /// Stage-variable step with the consensus copies from `z`.
    fn primal_step(&mut self, sub: &SubproblemData, z: &[f64]) {
        let l = &sub.layout;
        let nx = l.nx;
        let mut off = 0;
        if l.lo.is_some() {
            self.input[..nx].copy_from_slice(&z[(self.t - 1) * nx..self.t * nx]);
            off = nx;
        }
        if l.hi.is_some() {
            self.input[off..off + nx].copy_from_slice(&z[self.t * nx..(self.t + 1) * nx]);
            off += nx;
        }
        self.input[off..].copy_from_slice(&self.mu);
        minimize_into(&mut self.y[l.pinned..], &sub.inner.gain, &self.input, &self.pinned_c);
        if !self.outgoing.is_empty() {
            gemv(&mut self.outgoing, &self.hi_map, &self.y);
        }
    }
}

/// One accelerated projected step on the multipliers for iterate index `s`:
///
/// `μ̂ = [μ + L⁻¹∇]₊`, `acc += (s+1)/2 ∇`,
/// `μ = (s+1)/(s+3) μ̂ + 2/(s+3) L⁻¹[acc]₊`.
pub fn dual_ascent_step(
    mu: &mut [f64],
    mu_hat: &mut [f64],
    grad_accum: &mut [f64],
    grad: &[f64],
    inv_l: &[f64],
    s: u64,
) {
    let sf = s as f64;
    let a = (sf + 1.0) / 2.0;
    let c1 = (sf + 1.0) / (sf + 3.0);
    let c2 = 2.0 / (sf + 3.0);
    for i in 0..mu.len() {
        let h = (mu[i] + inv_l[i] * grad[i]).max(0.0);
        mu_hat[i] = h;
        grad_accum[i] += a * grad[i];
        mu[i] = c1 * h + c2 * inv_l[i] * grad_accum[i].max(0.0);
    }
}

fn dual_phase(w: &mut WorkerState, sub: &SubproblemData, z: &[f64], s: u64) {
    w.load_xi(sub, z);
    w.dual_gradient();
    dual_ascent_step(&mut w.mu, &mut w.mu_hat, &mut w.grad_accum, &w.grad, &w.inv_l, s);
    let weight = (s + 1) as f64;
    for (acc, x) in w.xi_avg_accum.iter_mut().zip(&w.xi) {
        *acc += weight * x;
    }
    w.weight_sum += weight;
    w.k = s + 1;
}

fn worker_phase(w: &mut WorkerState, sub: &SubproblemData, z: &[f64], k: u64, profile: bool) {
    let dual = k >= 1 && k - 1 <= w.k_bar;
    let primal = k <= w.k_bar;
    if !(dual || primal) {
        return;
    }
    let start = profile.then(Instant::now);
    if dual {
        dual_phase(w, sub, z, k - 1);
    }
    if primal {
        w.primal_step(sub, z);
    }
    if let Some(s) = start {
        w.time += s.elapsed().as_secs_f64();
    }
}

fn z_phase(zt: &mut [f64], t: usize, workers: &[WorkerState], subs: &[SubproblemData], z: &[f64], k: u64) {
    let nx = zt.len();
    let (own, prev) = (&workers[t], &workers[t - 1]);
    if k > own.k_bar && k > prev.k_bar {
        zt.copy_from_slice(&z[(t - 1) * nx..t * nx]);
        return;
    }
    let wr = subs[t].rows.lo.expect("stage t >= 1 has incoming band rows");
    let vr = subs[t - 1].rows.hi.expect("stage t-1 < N has outgoing band rows");
    update_z_into(
        zt,
        &own.y[..nx],
        &prev.outgoing,
        &own.mu[wr..wr + nx],
        &own.mu[wr + nx..wr + 2 * nx],
        &prev.mu[vr..vr + nx],
        &prev.mu[vr + nx..vr + 2 * nx],
    );
}

#[cfg(feature = "parallel")]
fn each_worker(mode: Mode, workers: &mut [WorkerState], subs: &[SubproblemData], z: &[f64], k: u64, profile: bool) {
    use rayon::prelude::*;
    match mode {
        Mode::Parallel => workers
            .par_iter_mut()
            .zip(subs.par_iter())
            .for_each(|(w, s)| worker_phase(w, s, z, k, profile)),
        Mode::Serialized => workers
            .iter_mut()
            .zip(subs)
            .for_each(|(w, s)| worker_phase(w, s, z, k, profile)),
    }
}

#[cfg(not(feature = "parallel"))]
fn each_worker(_mode: Mode, workers: &mut [WorkerState], subs: &[SubproblemData], z: &[f64], k: u64, profile: bool) {
    workers
        .iter_mut()
        .zip(subs)
        .for_each(|(w, s)| worker_phase(w, s, z, k, profile));
}

#[cfg(feature = "parallel")]
fn each_copy(mode: Mode, next: &mut [f64], workers: &[WorkerState], subs: &[SubproblemData], z: &[f64], k: u64) {
    use rayon::prelude::*;
    let nx = subs[0].layout.nx;
    match mode {
        Mode::Parallel => next
            .par_chunks_mut(nx)
            .enumerate()
            .for_each(|(i, zt)| z_phase(zt, i + 1, workers, subs, z, k)),
        Mode::Serialized => next
            .chunks_mut(nx)
            .enumerate()
            .for_each(|(i, zt)| z_phase(zt, i + 1, workers, subs, z, k)),
    }
}

#[cfg(not(feature = "parallel"))]
fn each_copy(_mode: Mode, next: &mut [f64], workers: &[WorkerState], subs: &[SubproblemData], z: &[f64], k: u64) {
    let nx = subs[0].layout.nx;
    next.chunks_mut(nx)
        .enumerate()
        .for_each(|(i, zt)| z_phase(zt, i + 1, workers, subs, z, k));
}

/// Runs `f` on a pool thread in parallel mode so the per-iteration fork-joins
/// stay inside the pool.
#[cfg(feature = "parallel")]
fn on_pool(mode: Mode, f: &mut (dyn FnMut() + Send)) {
    match mode {
        Mode::Parallel => rayon::scope(|_| f()),
        Mode::Serialized => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn on_pool(_mode: Mode, f: &mut (dyn FnMut() + Send)) {
    f()
}

pub fn run(
    subs: &[SubproblemData],
    ledger: &TighteningLedger,
    start: &[Vector],
    mode: Mode,
) -> Result<SolveReport> {
    run_with(subs, ledger, start, RunOptions::mode(mode))
}

/// Runs the method from the stage vectors `start` (the first one carries the
/// measured state) with consistent consensus copies and zero multipliers.
pub fn run_with(
    subs: &[SubproblemData],
    ledger: &TighteningLedger,
    start: &[Vector],
    opts: RunOptions,
) -> Result<SolveReport> {
    let n = subs.len().checked_sub(1).ok_or_else(|| Error::Dimension("no subproblems".into()))?;
    if n == 0 {
        return Err(Error::Dimension("at least two stages required".into()));
    }
    if ledger.iterations.len() != n + 1
        || ledger.margins.len() != n + 1
        || ledger.relax.len() != n + 1
        || start.len() != n + 1
    {
        return Err(Error::Dimension("ledger or start does not match the horizon".into()));
    }
    for (t, (s, y)) in subs.iter().zip(start).enumerate() {
        if y.len() != s.layout.y_len || ledger.margins[t].len() != s.rows.total {
            return Err(Error::Dimension(format!("stage {t}: start or tightening size")));
        }
    }
    let nx = subs[0].layout.nx;
    let global = ledger.max_iterations();
    let k_bar: Vec<u64> = match opts.freeze {
        Freeze::Relay => ledger.iterations.clone(),
        Freeze::RunToGlobal => vec![global; n + 1],
    };

    let clock = Instant::now();
    let mut workers: Vec<WorkerState> = subs
        .iter()
        .zip(start)
        .zip(&k_bar)
        .map(|((s, y), kb)| WorkerState::new(s, ledger, y.as_slice(), *kb))
        .collect();
    // Consensus copies start consistent with the incoming stage vectors.
    let mut z = vec![0.0; n * nx];
    for t in 1..=n {
        z[(t - 1) * nx..t * nx].copy_from_slice(&start[t].as_slice()[..nx]);
    }
    let mut next = z.clone();

    let mut iterate = || {
        for k in 0..=global {
            each_worker(opts.mode, &mut workers, subs, &z, k, opts.profile);
            each_copy(opts.mode, &mut next, &workers, subs, &z, k);
            std::mem::swap(&mut z, &mut next);
        }
    };
    on_pool(opts.mode, &mut iterate);
    // Closing dual step for the workers whose budget ends at the global count.
    for (w, s) in workers.iter_mut().zip(subs) {
        if w.k_bar == global {
            dual_phase(w, s, &z, global);
        }
    }

    let mut report = SolveReport {
        xi_hat: Vec::with_capacity(n + 1),
        violation: Vec::with_capacity(n + 1),
        accuracy: ledger.accuracy.clone(),
        subopt_bound: Vec::with_capacity(n + 1),
        iterations_run: Vec::with_capacity(n + 1),
        global_iterations: global + 1,
        wall_time: 0.0,
        worker_time: workers.iter().map(|w| w.time).collect(),
        multipliers: workers.iter().map(|w| w.mu.clone()).collect(),
    };
    for (t, w) in workers.iter_mut().enumerate() {
        let xi: Vec<f64> = w.xi_avg_accum.iter().map(|v| v / w.weight_sum).collect();
        w.xi.copy_from_slice(&xi);
        w.dual_gradient();
        let viol = w.grad.iter().fold(0.0, |a, g| a + g.max(0.0).powi(2)).sqrt();
        report.violation.push(viol);
        report.subopt_bound.push(2.0 * ledger.dual_radius[t] * ledger.accuracy[t]);
        report.iterations_run.push(w.k);
        report.xi_hat.push(xi);
    }
    report.wall_time = clock.elapsed().as_secs_f64();
    Ok(report)
}

/// `‖[W(G ξ + g_eff)]₊‖₂` for an arbitrary decision vector.
pub fn weighted_violation(sub: &SubproblemData, ledger: &TighteningLedger, xi: &[f64]) -> f64 {
    let (lo, hi) = ledger.bands(sub.index);
    let g = effective_offset(sub, lo, hi, &ledger.margins[sub.index]);
    let r = &sub.constraint * Vector::from_column_slice(xi) + g;
    r.iter()
        .zip(sub.weights.iter())
        .fold(0.0, |a, (v, w)| a + (w * v).max(0.0).powi(2))
        .sqrt()
}

pub use crate::tighten::iteration_bound;
