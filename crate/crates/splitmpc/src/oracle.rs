//! Reference solvers: exhaustive active-set enumeration for tiny QPs, a long
//! run of dual projected gradient as an independent cross-check, the
//! condensed full-horizon QP, and the single-QP baseline controller.

use std::time::Instant;

use serde::Serialize;

use crate::dfg::dual_ascent_step;
use crate::linalg::{eig_extremes, gemv, norm2, row_major, symmetrize, SparseRows};
use crate::lp::{self, Outcome};
use crate::model::MpcProblem;
use crate::tighten::iteration_bound;
use crate::{Error, Mat, Result, Vector};

/// `min ½xᵀHx + fᵀx` subject to `Gx ≤ b`.
#[derive(Debug, Clone)]
pub struct QpInstance {
    pub hessian: Mat,
    pub linear: Vector,
    pub rows: Mat,
    pub bounds: Vector,
}

impl QpInstance {
    pub fn new(hessian: Mat, linear: Vector, rows: Mat, bounds: Vector) -> Result<Self> {
        let d = linear.len();
        if hessian.shape() != (d, d) || rows.ncols() != d || rows.nrows() != bounds.len() {
            return Err(Error::Dimension("QP data sizes disagree".into()));
        }
        let hessian = symmetrize(&hessian);
        if !(eig_extremes(&hessian).0 > 0.0) {
            return Err(Error::Invalid("QP Hessian not positive definite".into()));
        }
        Ok(Self { hessian, linear, rows, bounds })
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn nrows(&self) -> usize {
        self.bounds.len()
    }

    pub fn objective(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSolution {
    pub x: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub value: f64,
    pub active_set: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct KktResiduals {
    /// `‖Hx + f + Gᵀμ‖_∞`.
    pub stationarity: f64,
    /// `max(Gx − b)₊`.
    pub primal: f64,
    /// `max(−μ)₊`.
    pub dual: f64,
    /// `max |μ_i (Gx − b)_i|`.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

pub fn kkt_residuals(qp: &QpInstance, x: &[f64], mu: &[f64]) -> KktResiduals {
    let x = Vector::from_column_slice(x);
    let mu = Vector::from_column_slice(mu);
    let stat = &qp.hessian * &x + &qp.linear + qp.rows.transpose() * &mu;
    let r = &qp.rows * &x - &qp.bounds;
    KktResiduals {
        stationarity: stat.amax(),
        primal: r.iter().fold(0.0, |a, v| a.max(*v)),
        dual: mu.iter().fold(0.0, |a, v| a.max(-*v)),
        complementarity: r.iter().zip(mu.iter()).fold(0.0, |a, (ri, mi)| a.max((ri * mi).abs())),
    }
}

pub const ENUM_MAX_ROWS: usize = 25;
pub const ENUM_MAX_DIM: usize = 12;

/// Equality-constrained KKT solve on the active rows `set`.
fn kkt_on(qp: &QpInstance, set: &[usize]) -> Option<(Vector, Vector)> {
    let d = qp.dim();
    let k = set.len();
    let mut kkt = Mat::zeros(d + k, d + k);
    kkt.view_mut((0, 0), (d, d)).copy_from(&qp.hessian);
    let mut rhs = Vector::zeros(d + k);
    rhs.rows_mut(0, d).copy_from(&(-&qp.linear));
    for (j, &i) in set.iter().enumerate() {
        for c in 0..d {
            kkt[(d + j, c)] = qp.rows[(i, c)];
            kkt[(c, d + j)] = qp.rows[(i, c)];
        }
        rhs[d + j] = qp.bounds[i];
    }
    let sol = kkt.clone().lu().solve(&rhs)?;
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    // Reject near-singular systems whose solution does not satisfy them.
    let res = (&kkt * &sol - &rhs).amax();
    if res > 1e-9 * (1.0 + rhs.amax()) {
        return None;
    }
    let x = sol.rows(0, d).into_owned();
    let mut mu = Vector::zeros(qp.nrows());
    for (j, &i) in set.iter().enumerate() {
        mu[i] = sol[d + j];
    }
    Some((x, mu))
}

fn verified(qp: &QpInstance, x: &Vector, mu: &Vector, tol: f64) -> bool {
    let r = &qp.rows * x - &qp.bounds;
    r.iter().all(|v| *v <= tol) && mu.iter().all(|m| *m >= -tol)
}

fn finish(qp: &QpInstance, x: Vector, mut mu: Vector) -> OracleSolution {
    mu.iter_mut().for_each(|m| *m = m.max(0.0));
    let active_set = (0..qp.nrows()).filter(|&i| mu[i] > 0.0).collect();
    OracleSolution {
        value: qp.objective(&x),
        x: x.iter().copied().collect(),
        multipliers: mu.iter().copied().collect(),
        active_set,
    }
}

/// Visits subsets of `0..q` of size `k` in lexicographic order.
fn for_each_subset(q: usize, k: usize, mut f: impl FnMut(&[usize]) -> bool) -> bool {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        if f(&idx) {
            return true;
        }
        let mut i = k;
        loop {
            if i == 0 {
                return false;
            }
            i -= 1;
            if idx[i] != i + q - k {
                break;
            }
            if i == 0 && idx[0] == q - k {
                return false;
            }
        }
        if idx[i] == i + q - k {
            return false;
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Global optimum by trying every active set, smallest first.
pub fn solve_qp_enumeration(qp: &QpInstance) -> Result<OracleSolution> {
    let (d, q) = (qp.dim(), qp.nrows());
    if q > ENUM_MAX_ROWS || d > ENUM_MAX_DIM {
        return Err(Error::Invalid(format!(
            "enumeration budget exceeded ({q} rows, {d} variables)"
        )));
    }
    let tol = 1e-10 * (1.0 + qp.bounds.amax() + qp.linear.amax());
    let mut found = None;
    for k in 0..=q.min(d) {
        let hit = if k == 0 {
            match kkt_on(qp, &[]) {
                Some((x, mu)) if verified(qp, &x, &mu, tol) => {
                    found = Some((x, mu));
                    true
                }
                _ => false,
            }
        } else {
            for_each_subset(q, k, |set| match kkt_on(qp, set) {
                Some((x, mu)) if verified(qp, &x, &mu, tol) => {
                    found = Some((x, mu));
                    true
                }
                _ => false,
            })
        };
        if hit {
            break;
        }
    }
    let (x, mu) = found.ok_or_else(|| Error::Infeasible("no active set satisfies the KKT conditions".into()))?;
    Ok(finish(qp, x, mu))
}

/// Dual projected gradient with step `1/‖G H⁻¹ Gᵀ‖`, run for a fixed count.
pub fn solve_qp_projected_gradient(qp: &QpInstance, iterations: u64) -> Result<OracleSolution> {
    let chol = qp
        .hessian
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Invalid("QP Hessian not positive definite".into()))?;
    let q = qp.nrows();
    let x_free = -chol.solve(&qp.linear);
    let sens = -chol.solve(&qp.rows.transpose()); // x = x_free + sens μ
    let dual_hess = &qp.rows * &sens; // −G H⁻¹ Gᵀ
    let step = 1.0 / norm2(&dual_hess).max(1e-300);
    let base = &qp.rows * &x_free - &qp.bounds; // gradient at μ = 0
    let hm = row_major(&dual_hess);
    let mut mu = vec![0.0; q];
    let mut g = vec![0.0; q];
    for _ in 0..iterations {
        gemv(&mut g, &hm, &mu);
        for i in 0..q {
            mu[i] = (mu[i] + step * (g[i] + base[i])).max(0.0);
        }
    }
    let muv = Vector::from_column_slice(&mu);
    let x = &x_free + &sens * &muv;
    Ok(finish(qp, x, muv))
}

/// Interior point followed by an exact KKT solve on the detected active set.
pub fn solve_qp_polished(qp: &QpInstance) -> Result<OracleSolution> {
    let f: Vec<f64> = qp.linear.iter().copied().collect();
    let b: Vec<f64> = qp.bounds.iter().copied().collect();
    let (x, z) = match lp::solve(Some(&qp.hessian), &f, &qp.rows, &b) {
        Outcome::Optimal { x, duals, .. } => (Vector::from_vec(x), Vector::from_vec(duals)),
        Outcome::Infeasible => return Err(Error::Infeasible("QP constraints are inconsistent".into())),
        Outcome::Unbounded => return Err(Error::Solver("QP reported unbounded".into())),
        Outcome::Failed(s) => return Err(Error::Solver(s)),
    };
    let zmax = z.amax().max(1.0);
    let slack = &qp.bounds - &qp.rows * &x;
    let by_dual: Vec<usize> = (0..qp.nrows()).filter(|&i| z[i] > 1e-7 * zmax).collect();
    let by_slack: Vec<usize> = (0..qp.nrows())
        .filter(|&i| slack[i] < 1e-7 * (1.0 + qp.bounds[i].abs()))
        .collect();
    let tol = 1e-10 * (1.0 + qp.bounds.amax() + qp.linear.amax());
    for set in [&by_dual, &by_slack] {
        if set.len() > qp.dim() {
            continue;
        }
        if let Some((xp, mp)) = kkt_on(qp, set) {
            if verified(qp, &xp, &mp, tol) {
                return Ok(finish(qp, xp, mp));
            }
        }
    }
    Ok(finish(qp, x, z))
}

/// Enumeration for tiny instances, polished interior point otherwise.
pub fn solve_qp(qp: &QpInstance) -> Result<OracleSolution> {
    if qp.nrows() <= 12 && qp.dim() <= ENUM_MAX_DIM {
        solve_qp_enumeration(qp)
    } else {
        solve_qp_polished(qp)
    }
}

/// Full-horizon QP in the inputs `U = (u_0, …, u_{N−1})` with the states
/// eliminated: `X = Φ x_0 + Γ U`.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub qp: QpInstance,
    /// Cost term independent of `U`.
    pub constant: f64,
    pub free_response: Mat,
    pub forced_response: Mat,
    pub x0: Vector,
    pub nx: usize,
    pub nu: usize,
    pub horizon: usize,
    /// Stage rows per step and terminal rows, for row bookkeeping.
    pub stage_rows: usize,
    pub terminal_rows: usize,
}

impl CondensedQp {
    pub fn states(&self, u: &Vector) -> Vec<Vector> {
        let x = &self.free_response * &self.x0 + &self.forced_response * u;
        (0..=self.horizon)
            .map(|t| x.rows(t * self.nx, self.nx).into_owned())
            .collect()
    }

    pub fn inputs(&self, u: &Vector) -> Vec<Vector> {
        (0..self.horizon)
            .map(|t| u.rows(t * self.nu, self.nu).into_owned())
            .collect()
    }

    pub fn cost(&self, u: &Vector) -> f64 {
        self.qp.objective(u) + self.constant
    }

    /// Minimum row slack `min(b − G U)`.
    pub fn slack(&self, u: &Vector) -> f64 {
        (&self.qp.bounds - &self.qp.rows * u).min()
    }
}

/// Condensed problem with every row tightened by `shift ≥ 0`.
pub fn condense(problem: &MpcProblem, x0: &Vector, shift: f64) -> Result<CondensedQp> {
    let (nx, nu, n) = (problem.nx(), problem.nu(), problem.horizon());
    let a = &problem.system.state;
    let b = &problem.system.input;
    let mut phi = Mat::zeros((n + 1) * nx, nx);
    let mut gam = Mat::zeros((n + 1) * nx, n * nu);
    let mut ap = Mat::identity(nx, nx);
    for t in 0..=n {
        phi.view_mut((t * nx, 0), (nx, nx)).copy_from(&ap);
        ap = a * &ap;
    }
    for t in 1..=n {
        for j in 0..t {
            // x_t depends on u_j through A^{t-1-j} B
            let blk = crate::linalg::mat_pow(a, t - 1 - j) * b;
            gam.view_mut((t * nx, j * nu), (nx, nu)).copy_from(&blk);
        }
    }
    let q = &problem.cost.state_weight;
    let r = &problem.cost.input_weight;
    let p = &problem.cost.terminal_weight;
    let mut hx = Mat::zeros((n + 1) * nx, (n + 1) * nx);
    for t in 0..n {
        hx.view_mut((t * nx, t * nx), (nx, nx)).copy_from(q);
    }
    hx.view_mut((n * nx, n * nx), (nx, nx)).copy_from(p);
    let mut hu = Mat::zeros(n * nu, n * nu);
    for t in 0..n {
        hu.view_mut((t * nu, t * nu), (nu, nu)).copy_from(r);
    }
    let free = &phi * x0;
    let hessian = symmetrize(&(&hu + gam.transpose() * &hx * &gam));
    let linear = gam.transpose() * &hx * &free;
    let constant = 0.5 * free.dot(&(&hx * &free));

    let ps = problem.stage.rows();
    let pn = problem.terminal.rows();
    let mut rows = Mat::zeros(n * ps + pn, n * nu);
    let mut bounds = Vector::zeros(n * ps + pn);
    let (c, d) = (&problem.stage.state, &problem.stage.input);
    for t in 0..n {
        let gt = gam.view((t * nx, 0), (nx, n * nu));
        let mut blk = c * gt;
        let mut dpart = blk.view_mut((0, t * nu), (ps, nu));
        dpart += d;
        rows.view_mut((t * ps, 0), (ps, n * nu)).copy_from(&blk);
        let xt = free.rows(t * nx, nx);
        let rhs = -(&problem.stage.offset + c * xt).add_scalar(shift);
        bounds.rows_mut(t * ps, ps).copy_from(&rhs);
    }
    let f = &problem.terminal.normals;
    let gn = gam.view((n * nx, 0), (nx, n * nu));
    rows.view_mut((n * ps, 0), (pn, n * nu)).copy_from(&(f * gn));
    let xn = free.rows(n * nx, nx);
    bounds
        .rows_mut(n * ps, pn)
        .copy_from(&(&problem.terminal.bounds - f * xn).add_scalar(-shift));

    Ok(CondensedQp {
        qp: QpInstance::new(hessian, linear, rows, bounds)?,
        constant,
        free_response: phi,
        forced_response: gam,
        x0: x0.clone(),
        nx,
        nu,
        horizon: n,
        stage_rows: ps,
        terminal_rows: pn,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CondensedSolution {
    pub value: f64,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub multipliers: Vec<f64>,
    pub kkt: KktResiduals,
}

/// Optimal value and trajectories of the original problem at `x_init`.
pub fn solve_original_condensed(problem: &MpcProblem) -> Result<CondensedSolution> {
    solve_condensed_at(problem, &problem.x_init, 0.0)
}

pub fn solve_condensed_at(problem: &MpcProblem, x0: &Vector, shift: f64) -> Result<CondensedSolution> {
    let cq = condense(problem, x0, shift)?;
    let sol = solve_qp(&cq.qp)?;
    let u = Vector::from_column_slice(&sol.x);
    Ok(CondensedSolution {
        value: cq.cost(&u),
        states: cq.states(&u).iter().map(|v| v.iter().copied().collect()).collect(),
        inputs: cq.inputs(&u).iter().map(|v| v.iter().copied().collect()).collect(),
        kkt: kkt_residuals(&cq.qp, &sol.x, &sol.multipliers),
        multipliers: sol.multipliers,
    })
}

/// Largest uniform slack `s ≤ cap` any input sequence achieves at `x0`,
/// with the maximising sequence.
pub fn max_uniform_slack(problem: &MpcProblem, x0: &Vector, cap: f64) -> Result<(f64, Vector)> {
    let cq = condense(problem, x0, 0.0)?;
    let d = cq.qp.dim();
    let q = cq.qp.nrows();
    // Variables (U, s): G U + s ≤ b, s ≤ cap; maximise s.
    let mut a = Mat::zeros(q + 1, d + 1);
    a.view_mut((0, 0), (q, d)).copy_from(&cq.qp.rows);
    a.view_mut((0, d), (q, 1)).fill(1.0);
    a[(q, d)] = 1.0;
    let mut b: Vec<f64> = cq.qp.bounds.iter().copied().collect();
    b.push(cap);
    let mut c = vec![0.0; d + 1];
    c[d] = -1.0;
    match lp::solve(None, &c, &a, &b) {
        Outcome::Optimal { x, .. } => Ok((x[d], Vector::from_column_slice(&x[..d]))),
        Outcome::Infeasible => Err(Error::Infeasible("slack LP infeasible".into())),
        Outcome::Unbounded => Err(Error::Solver("slack LP unbounded despite cap".into())),
        Outcome::Failed(s) => Err(Error::Solver(s)),
    }
}

/// Lipschitz constant `‖G‖²/λ_min(H)` and condition number of the condensed
/// Hessian. Neither depends on the initial state.
pub fn baseline_conditioning(problem: &MpcProblem) -> Result<(f64, f64)> {
    let cq = condense(problem, &Vector::zeros(problem.nx()), 0.0)?;
    let (lo, hi) = eig_extremes(&cq.qp.hessian);
    Ok((norm2(&cq.qp.rows).powi(2) / lo, hi / lo))
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineReport {
    pub u0: Vec<f64>,
    pub inputs: Vec<Vec<f64>>,
    pub iterations: u64,
    pub lipschitz: f64,
    pub condition: f64,
    pub tightening: f64,
    pub accuracy: f64,
    pub dual_radius: f64,
    pub violation: f64,
    pub certified: bool,
    pub wall_time: f64,
    /// Iterations actually executed (smaller than `iterations + 1` only when capped).
    pub iterations_run: u64,
}

/// Non-parallel adaptive-tightening baseline: one uniform tightening on the
/// condensed QP, an iteration count from the same bound as the split solver
/// with the full-problem Lipschitz constant, and the same accelerated dual
/// method run on the whole problem.
///
/// `slater` is a strictly feasible input sequence; `cap` optionally limits the
/// number of iterations executed (the report is then not certified).
pub fn solve_baseline_nonparallel(
    problem: &MpcProblem,
    eta_target: f64,
    slater: &Vector,
    safety: f64,
    cap: Option<u64>,
) -> Result<BaselineReport> {
    let clock = Instant::now();
    let cq = condense(problem, &problem.x_init, 0.0)?;
    let qp = &cq.qp;
    let s = cq.slack(slater);
    if !(s > 0.0) {
        return Err(Error::Slater(format!("baseline Slater point has slack {s:.3e}")));
    }
    let (lo, hi) = eig_extremes(&qp.hessian);
    let lipschitz = norm2(&qp.rows).powi(2) / lo;
    let condition = hi / lo;
    let tightening = (2.0 * eta_target).min(safety * 0.5 * s);
    let accuracy = tightening / 2.0;
    let chol = qp.hessian.clone().cholesky().expect("checked positive definite");
    let u_free = -chol.solve(&qp.linear);
    let d0 = qp.objective(&u_free);
    let dual_radius = ((qp.objective(slater) - d0) / (s - tightening)).max(0.0);
    let k_bar = iteration_bound(2.0 * dual_radius, accuracy, lipschitz)?;

    let q = qp.nrows();
    let d = qp.dim();
    let sens = row_major(&(-chol.solve(&qp.rows.transpose())));
    let rows = SparseRows::from_dense(&qp.rows);
    let offset: Vec<f64> = qp.bounds.iter().map(|b| -(b - tightening)).collect();
    let inv_l = vec![1.0 / lipschitz; q];
    let mut mu = vec![0.0; q];
    let mut mu_hat = vec![0.0; q];
    let mut acc = vec![0.0; q];
    let mut grad = vec![0.0; q];
    let mut u = vec![0.0; d];
    let mut avg = vec![0.0; d];
    let mut wsum = 0.0;
    let last = cap.map_or(k_bar, |c| c.min(k_bar + 1).saturating_sub(1));
    for k in 0..=last {
        gemv(&mut u, &sens, &mu);
        for (ui, fi) in u.iter_mut().zip(u_free.iter()) {
            *ui += fi;
        }
        rows.mul_into(&mut grad, &u);
        for (g, o) in grad.iter_mut().zip(&offset) {
            *g += o;
        }
        dual_ascent_step(&mut mu, &mut mu_hat, &mut acc, &grad, &inv_l, k);
        let w = (k + 1) as f64;
        for (a, ui) in avg.iter_mut().zip(&u) {
            *a += w * ui;
        }
        wsum += w;
    }
    let uhat = Vector::from_iterator(d, avg.iter().map(|a| a / wsum));
    let r = &qp.rows * &uhat - &qp.bounds;
    let violation = r.iter().fold(0.0, |a, v| a + (v + tightening).max(0.0).powi(2)).sqrt();
    let capped = last < k_bar;
    Ok(BaselineReport {
        u0: uhat.rows(0, cq.nu).iter().copied().collect(),
        inputs: cq.inputs(&uhat).iter().map(|v| v.iter().copied().collect()).collect(),
        iterations: k_bar,
        lipschitz,
        condition,
        tightening,
        accuracy,
        dual_radius,
        violation,
        certified: !capped && violation <= accuracy,
        wall_time: clock.elapsed().as_secs_f64(),
        iterations_run: last + 1,
    })
}
