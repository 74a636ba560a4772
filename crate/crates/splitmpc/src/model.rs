//! Problem data, standing-assumption checks and terminal ingredients.

use serde::Serialize;

use crate::linalg::{eig_extremes, spectral_radius, symmetrize};
use crate::lp;
use crate::{Error, Mat, Result, Vector};

#[derive(Debug, Clone)]
pub struct LtiSystem {
    /// State transition matrix.
    pub state: Mat,
    /// Input matrix.
    pub input: Mat,
}

impl LtiSystem {
    pub fn new(state: Mat, input: Mat) -> Result<Self> {
        if !state.is_square() || state.nrows() == 0 {
            return Err(Error::Dimension("state matrix must be square and non-empty".into()));
        }
        if input.nrows() != state.nrows() || input.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "input matrix is {}x{}, expected {}xm with m >= 1",
                input.nrows(),
                input.ncols(),
                state.nrows()
            )));
        }
        Ok(Self { state, input })
    }

    pub fn nx(&self) -> usize {
        self.state.nrows()
    }

    pub fn nu(&self) -> usize {
        self.input.ncols()
    }

    pub fn closed_loop(&self, gain: &Mat) -> Mat {
        &self.state + &self.input * gain
    }

    pub fn next(&self, x: &Vector, u: &Vector) -> Vector {
        &self.state * x + &self.input * u
    }
}

/// Rows `C x + D u + g ≤ 0`.
#[derive(Debug, Clone)]
pub struct StageConstraints {
    pub state: Mat,
    pub input: Mat,
    pub offset: Vector,
}

impl StageConstraints {
    pub fn rows(&self) -> usize {
        self.offset.len()
    }

    pub fn residual(&self, x: &Vector, u: &Vector) -> Vector {
        &self.state * x + &self.input * u + &self.offset
    }
}

/// Polytope `{x : F x ≤ f}`.
#[derive(Debug, Clone)]
pub struct TerminalSet {
    pub normals: Mat,
    pub bounds: Vector,
    /// Smallest `μ` with `(A + B K) X ⊆ μ X`.
    pub contraction: f64,
}

impl TerminalSet {
    pub fn contains(&self, x: &Vector) -> bool {
        (&self.normals * x - &self.bounds).iter().all(|v| *v <= 0.0)
    }

    pub fn residual(&self, x: &Vector) -> Vector {
        &self.normals * x - &self.bounds
    }

    pub fn rows(&self) -> usize {
        self.bounds.len()
    }
}

#[derive(Debug, Clone)]
pub struct CostSpec {
    pub state_weight: Mat,
    pub input_weight: Mat,
    pub terminal_weight: Mat,
    pub horizon: usize,
}

#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub system: LtiSystem,
    pub stage: StageConstraints,
    pub terminal: TerminalSet,
    pub cost: CostSpec,
    /// Terminal controller, `u = K x` inside the terminal set.
    pub gain: Mat,
    pub x_init: Vector,
}

impl MpcProblem {
    pub fn nx(&self) -> usize {
        self.system.nx()
    }

    pub fn nu(&self) -> usize {
        self.system.nu()
    }

    pub fn horizon(&self) -> usize {
        self.cost.horizon
    }

    pub fn with_initial_state(&self, x: Vector) -> Self {
        let mut p = self.clone();
        p.x_init = x;
        p
    }

    /// Assembles a problem, computing the Riccati weight, LQR gain and
    /// maximal admissible terminal set from the stage data.
    pub fn assemble(
        system: LtiSystem,
        stage: StageConstraints,
        state_weight: Mat,
        input_weight: Mat,
        horizon: usize,
        x_init: Vector,
    ) -> Result<Self> {
        let q = symmetrize(&state_weight);
        let r = symmetrize(&input_weight);
        let ti = terminal_ingredients(&system, &q, &r, &stage)?;
        Ok(Self {
            system,
            stage,
            terminal: ti.terminal_set,
            cost: CostSpec {
                state_weight: q,
                input_weight: r,
                terminal_weight: ti.terminal_weight,
                horizon,
            },
            gain: ti.gain,
            x_init,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TerminalIngredients {
    pub gain: Mat,
    pub terminal_weight: Mat,
    pub terminal_set: TerminalSet,
}

pub fn terminal_ingredients(
    system: &LtiSystem,
    q: &Mat,
    r: &Mat,
    stage: &StageConstraints,
) -> Result<TerminalIngredients> {
    let (p, k) = solve_dare(system, q, r)?;
    let set = compute_terminal_set(system, &k, stage)?;
    Ok(TerminalIngredients { gain: k, terminal_weight: p, terminal_set: set })
}

pub const DARE_MAX_ITER: usize = 10_000;
pub const DARE_TOL: f64 = 1e-12;

pub fn solve_dare(system: &LtiSystem, q: &Mat, r: &Mat) -> Result<(Mat, Mat)> {
    solve_dare_with(system, q, r, DARE_MAX_ITER, DARE_TOL)
}

/// Riccati fixed-point iteration from `P = Q`.
/// Returns `(P, K)` with `K = -(R + BᵀPB)⁻¹BᵀPA`.
pub fn solve_dare_with(
    system: &LtiSystem,
    q: &Mat,
    r: &Mat,
    max_iter: usize,
    tol: f64,
) -> Result<(Mat, Mat)> {
    let (a, b) = (&system.state, &system.input);
    let n = system.nx();
    if q.shape() != (n, n) || r.shape() != (system.nu(), system.nu()) {
        return Err(Error::Dimension("weights do not match the system".into()));
    }
    if eig_extremes(r).0 <= 0.0 {
        return Err(Error::Invalid("input weight not positive definite".into()));
    }
    let q = symmetrize(q);
    let r = symmetrize(r);
    let mut p = q.clone();
    for _ in 0..max_iter {
        let next = riccati_map(a, b, &q, &r, &p)?;
        let change = (&next - &p).amax();
        let scale = next.amax().max(1.0);
        if !change.is_finite() {
            break;
        }
        p = next;
        if change <= tol * scale {
            let k = lqr_gain(a, b, &r, &p)?;
            if spectral_radius(&system.closed_loop(&k)) >= 1.0 || eig_extremes(&p).0 <= 0.0 {
                return Err(Error::NotStabilizable(max_iter));
            }
            return Ok((p, k));
        }
    }
    Err(Error::NotStabilizable(max_iter))
}

fn riccati_map(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> Result<Mat> {
    let bp = b.transpose() * p;
    let s = r + &bp * b;
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Solver("R + BᵀPB lost definiteness".into()))?;
    let bpa = &bp * a;
    let next = a.transpose() * p * a - bpa.transpose() * chol.solve(&bpa) + q;
    Ok(symmetrize(&next))
}

fn lqr_gain(a: &Mat, b: &Mat, r: &Mat, p: &Mat) -> Result<Mat> {
    let bp = b.transpose() * p;
    let chol = (r + &bp * b)
        .cholesky()
        .ok_or_else(|| Error::Solver("R + BᵀPB lost definiteness".into()))?;
    Ok(-chol.solve(&(&bp * a)))
}

/// `‖P − (AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA + Q)‖_∞` (entrywise max).
pub fn dare_residual(system: &LtiSystem, q: &Mat, r: &Mat, p: &Mat) -> f64 {
    match riccati_map(&system.state, &system.input, q, r, p) {
        Ok(next) => (p - next).amax(),
        Err(_) => f64::INFINITY,
    }
}

pub const TERMINAL_MAX_STEPS: usize = 200;

pub fn compute_terminal_set(
    system: &LtiSystem,
    gain: &Mat,
    stage: &StageConstraints,
) -> Result<TerminalSet> {
    compute_terminal_set_with(system, gain, stage, TERMINAL_MAX_STEPS)
}

/// Maximal output-admissible set of `x⁺ = (A + BK)x` under the stage rows
/// with `u = Kx`, normalised so that every bound equals one.
pub fn compute_terminal_set_with(
    system: &LtiSystem,
    gain: &Mat,
    stage: &StageConstraints,
    max_steps: usize,
) -> Result<TerminalSet> {
    let n = system.nx();
    if stage.offset.iter().any(|v| *v >= 0.0) {
        return Err(Error::Invalid("origin not strictly inside the stage constraints".into()));
    }
    let acl = system.closed_loop(gain);
    let out = &stage.state + &stage.input * gain;
    let rhs: Vec<f64> = stage.offset.iter().map(|g| -g).collect();

    // Normalised rows kept as a list.
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut bounds: Vec<f64> = Vec::new();
    for i in 0..out.nrows() {
        let row: Vec<f64> = out.row(i).iter().map(|v| v / rhs[i]).collect();
        if row.iter().any(|v| *v != 0.0) {
            rows.push(row);
            bounds.push(1.0);
        }
    }
    let mut power = Mat::identity(n, n);
    let mut finished = false;
    for _ in 0..max_steps {
        power = &acl * &power;
        let cand = &out * &power;
        let mut added = false;
        for i in 0..cand.nrows() {
            let row: Vec<f64> = cand.row(i).iter().map(|v| v / rhs[i]).collect();
            if row.iter().all(|v| v.abs() < 1e-14) {
                continue;
            }
            if !is_redundant(&to_mat(&rows, n), &bounds, &row, 1.0)? {
                rows.push(row);
                bounds.push(1.0);
                added = true;
            }
        }
        if !added {
            finished = true;
            break;
        }
    }
    if !finished {
        return Err(Error::InvariantSet(max_steps));
    }
    prune(&mut rows, &mut bounds, n)?;
    let normals = to_mat(&rows, n);
    let bounds = Vector::from_vec(bounds);
    let contraction = contraction_factor(&acl, &normals, &bounds)?;
    Ok(TerminalSet { normals, bounds, contraction })
}

fn to_mat(rows: &[Vec<f64>], n: usize) -> Mat {
    Mat::from_fn(rows.len(), n, |i, j| rows[i][j])
}

fn is_redundant(a: &Mat, b: &[f64], row: &[f64], rhs: f64) -> Result<bool> {
    if a.nrows() == 0 {
        return Ok(false);
    }
    match lp::maximize(row, a, b).map_err(Error::Solver)? {
        Some(v) => Ok(v <= rhs + 1e-9 * rhs.abs().max(1.0)),
        None => Ok(false),
    }
}

fn prune(rows: &mut Vec<Vec<f64>>, bounds: &mut Vec<f64>, n: usize) -> Result<()> {
    let mut i = 0;
    while i < rows.len() {
        let others: Vec<usize> = (0..rows.len()).filter(|&j| j != i).collect();
        let a = Mat::from_fn(others.len(), n, |r, c| rows[others[r]][c]);
        let b: Vec<f64> = others.iter().map(|&j| bounds[j]).collect();
        if is_redundant(&a, &b, &rows[i], bounds[i])? {
            rows.remove(i);
            bounds.remove(i);
        } else {
            i += 1;
        }
    }
    Ok(())
}

fn contraction_factor(acl: &Mat, normals: &Mat, bounds: &Vector) -> Result<f64> {
    let mapped = normals * acl;
    let b: Vec<f64> = bounds.iter().copied().collect();
    let mut mu: f64 = 0.0;
    for i in 0..mapped.nrows() {
        let row: Vec<f64> = mapped.row(i).iter().copied().collect();
        let v = lp::maximize(&row, normals, &b)
            .map_err(Error::Solver)?
            .ok_or_else(|| Error::Invalid("terminal set is unbounded".into()))?;
        mu = mu.max(v / bounds[i]);
    }
    Ok(mu.max(0.0))
}

/// LP verification of the terminal set: returns the worst invariance margin
/// `max_i max_x [F(A+BK)x]_i − f_i` and the worst admissibility margin
/// `max_j max_x [(C+DK)x + g]_j`. Both must be `≤ 0`.
pub fn terminal_set_margins(
    system: &LtiSystem,
    gain: &Mat,
    stage: &StageConstraints,
    set: &TerminalSet,
) -> Result<(f64, f64)> {
    let acl = system.closed_loop(gain);
    let b: Vec<f64> = set.bounds.iter().copied().collect();
    let mapped = &set.normals * &acl;
    let mut inv = f64::NEG_INFINITY;
    for i in 0..mapped.nrows() {
        let row: Vec<f64> = mapped.row(i).iter().copied().collect();
        let v = lp::maximize(&row, &set.normals, &b)
            .map_err(Error::Solver)?
            .unwrap_or(f64::INFINITY);
        inv = inv.max(v - set.bounds[i]);
    }
    let out = &stage.state + &stage.input * gain;
    let mut adm = f64::NEG_INFINITY;
    for j in 0..out.nrows() {
        let row: Vec<f64> = out.row(j).iter().copied().collect();
        let v = lp::maximize(&row, &set.normals, &b)
            .map_err(Error::Solver)?
            .unwrap_or(f64::INFINITY);
        adm = adm.max(v + stage.offset[j]);
    }
    Ok((inv, adm))
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct DiagnosticsReport {
    pub checks: Vec<Check>,
}

impl DiagnosticsReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &'static str, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check { name, pass, detail: detail.into() });
    }
}

/// Checks every standing assumption. Never fails; problems become entries.
pub fn validate_problem(problem: &MpcProblem) -> DiagnosticsReport {
    let mut rep = DiagnosticsReport::default();
    let n = problem.system.state.nrows();
    let m = problem.system.input.ncols();
    let st = &problem.stage;
    let c = &problem.cost;

    let mut dims = Vec::new();
    if !problem.system.state.is_square() {
        dims.push("state matrix not square".to_string());
    }
    if problem.system.input.nrows() != n {
        dims.push("input matrix rows".to_string());
    }
    if st.state.shape() != (st.rows(), n) {
        dims.push(format!("stage state rows are {:?}", st.state.shape()));
    }
    if st.input.shape() != (st.rows(), m) {
        dims.push(format!("stage input rows are {:?}", st.input.shape()));
    }
    if c.state_weight.shape() != (n, n) {
        dims.push("state weight".into());
    }
    if c.input_weight.shape() != (m, m) {
        dims.push("input weight".into());
    }
    if c.terminal_weight.shape() != (n, n) {
        dims.push("terminal weight".into());
    }
    if problem.terminal.normals.ncols() != n
        || problem.terminal.normals.nrows() != problem.terminal.bounds.len()
    {
        dims.push("terminal set".into());
    }
    if problem.gain.shape() != (m, n) {
        dims.push("terminal gain".into());
    }
    if problem.x_init.len() != n {
        dims.push("initial state".into());
    }
    if c.horizon == 0 {
        dims.push("horizon must be at least 1".into());
    }
    let dims_ok = dims.is_empty();
    rep.push("dimensions", dims_ok, dims.join("; "));
    if !dims_ok {
        return rep;
    }

    let bad_g: Vec<usize> = (0..st.rows()).filter(|&i| st.offset[i] >= 0.0).collect();
    rep.push(
        "origin_strictly_interior",
        bad_g.is_empty(),
        if bad_g.is_empty() {
            String::new()
        } else {
            format!("origin not strictly interior: rows {bad_g:?} have g >= 0")
        },
    );

    let sym_err = [&c.state_weight, &c.input_weight, &c.terminal_weight]
        .iter()
        .map(|w| (*w - w.transpose()).amax())
        .fold(0.0, f64::max);
    rep.push("weights_symmetric", sym_err <= 1e-12, format!("max asymmetry {sym_err:.3e}"));

    let (qmin, _) = eig_extremes(&c.state_weight);
    rep.push(
        "state_weight_psd",
        qmin >= -1e-12,
        format!("min eigenvalue {qmin:.6e}"),
    );
    let (rmin, _) = eig_extremes(&c.input_weight);
    rep.push(
        "input_weight_positive_definite",
        rmin > 0.0,
        if rmin > 0.0 {
            format!("min eigenvalue {rmin:.6e}")
        } else {
            format!("R not positive definite: min eigenvalue {rmin:.6e}")
        },
    );
    let (pmin, _) = eig_extremes(&c.terminal_weight);
    rep.push(
        "terminal_weight_positive_definite",
        pmin > 0.0,
        format!("min eigenvalue {pmin:.6e}"),
    );
    if rmin > 0.0 {
        let res = dare_residual(&problem.system, &c.state_weight, &c.input_weight, &c.terminal_weight);
        rep.push("riccati_residual", res <= 1e-9, format!("residual {res:.3e}"));
    }
    let rho = spectral_radius(&problem.system.closed_loop(&problem.gain));
    rep.push("terminal_gain_stabilizing", rho < 1.0, format!("spectral radius {rho:.6}"));

    let bad_f: Vec<usize> = (0..problem.terminal.rows())
        .filter(|&i| problem.terminal.bounds[i] <= 0.0)
        .collect();
    rep.push(
        "terminal_set_contains_origin",
        bad_f.is_empty(),
        format!("rows with f <= 0: {bad_f:?}"),
    );
    match terminal_set_margins(&problem.system, &problem.gain, st, &problem.terminal) {
        Ok((inv, adm)) => {
            rep.push("terminal_set_invariant", inv <= 1e-9, format!("worst margin {inv:.3e}"));
            rep.push("terminal_set_admissible", adm <= 1e-9, format!("worst margin {adm:.3e}"));
        }
        Err(e) => rep.push("terminal_set_invariant", false, e.to_string()),
    }
    rep.push(
        "terminal_contraction",
        problem.terminal.contraction < 1.0,
        format!("contraction {:.6}", problem.terminal.contraction),
    );
    rep
}
