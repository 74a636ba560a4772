//! Thin wrappers around the interior-point backend for the small LPs and QPs
//! used offline (invariant sets, Slater points, reference solutions).

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus,
    SupportedConeT::NonnegativeConeT,
};

use crate::Mat;

#[derive(Debug, Clone)]
pub(crate) enum Outcome {
    Optimal { x: Vec<f64>, duals: Vec<f64>, value: f64 },
    Unbounded,
    Infeasible,
    Failed(String),
}

fn settings() -> DefaultSettings<f64> {
    DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(1e-11)
        .tol_gap_rel(1e-11)
        .tol_feas(1e-11)
        .tol_ktratio(1e-9)
        .max_iter(400)
        .build()
        .expect("static settings are valid")
}

fn csc(m: &Mat) -> CscMatrix<f64> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    if m.nrows() == 0 {
        return CscMatrix::zeros((0, m.ncols()));
    }
    CscMatrix::from(rows.iter().map(|r| r.iter()))
}

/// minimize ½xᵀHx + fᵀx subject to Ax ≤ b. `h = None` gives an LP.
pub(crate) fn solve(h: Option<&Mat>, f: &[f64], a: &Mat, b: &[f64]) -> Outcome {
    let d = f.len();
    let p = match h {
        Some(h) => csc(&crate::linalg::symmetrize(h)).to_triu(),
        None => CscMatrix::zeros((d, d)),
    };
    let amat = csc(a);
    let cones = [NonnegativeConeT(a.nrows())];
    let mut solver = match DefaultSolver::new(&p, f, &amat, b, &cones, settings()) {
        Ok(s) => s,
        Err(e) => return Outcome::Failed(format!("{e:?}")),
    };
    solver.solve();
    let sol = &solver.solution;
    match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => Outcome::Optimal {
            x: sol.x.clone(),
            duals: sol.z.clone(),
            value: sol.obj_val,
        },
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => Outcome::Unbounded,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            Outcome::Infeasible
        }
        other => Outcome::Failed(format!("{other:?}")),
    }
}

/// Supremum of `cᵀx` over `{Ax ≤ b}`; `None` when unbounded.
pub(crate) fn maximize(c: &[f64], a: &Mat, b: &[f64]) -> Result<Option<f64>, String> {
    let neg: Vec<f64> = c.iter().map(|v| -v).collect();
    match solve(None, &neg, a, b) {
        Outcome::Optimal { value, .. } => Ok(Some(-value)),
        Outcome::Unbounded => Ok(None),
        Outcome::Infeasible => Err("empty polyhedron".into()),
        Outcome::Failed(s) => Err(s),
    }
}
