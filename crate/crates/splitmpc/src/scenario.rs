//! Ready-made problem instances.

use crate::model::{LtiSystem, MpcProblem, StageConstraints};
use crate::{Mat, Result, Vector};

/// Box rows `|x_i| ≤ x_max`, `|u_j| ≤ u_max`, plus optional output rows
/// `|C_h x + D_h u| ≤ h_max`, in that order.
pub fn box_constraints(
    nx: usize,
    nu: usize,
    x_max: f64,
    u_max: f64,
    output: Option<(&Mat, &Mat, f64)>,
) -> StageConstraints {
    let no = output.map_or(0, |(c, _, _)| c.nrows());
    let p = 2 * nx + 2 * nu + 2 * no;
    let mut c = Mat::zeros(p, nx);
    let mut d = Mat::zeros(p, nu);
    let mut g = Vector::zeros(p);
    let mut r = 0;
    for s in [1.0, -1.0] {
        for i in 0..nx {
            c[(r, i)] = s;
            g[r] = -x_max;
            r += 1;
        }
    }
    for s in [1.0, -1.0] {
        for j in 0..nu {
            d[(r, j)] = s;
            g[r] = -u_max;
            r += 1;
        }
    }
    if let Some((ch, dh, h_max)) = output {
        for s in [1.0, -1.0] {
            for i in 0..no {
                for k in 0..nx {
                    c[(r, k)] = s * ch[(i, k)];
                }
                for k in 0..nu {
                    d[(r, k)] = s * dh[(i, k)];
                }
                g[r] = -h_max;
                r += 1;
            }
        }
    }
    StageConstraints { state: c, input: d, offset: g }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weights {
    /// The tuned weights shipped with the two-state reference plant.
    #[default]
    Tuned,
    /// `Q = I`, `R = I`.
    Identity,
}

pub const REFERENCE_X0: [f64; 2] = [-0.101, -3.7];
pub const REFERENCE_HORIZON: usize = 7;

pub fn reference_system() -> LtiSystem {
    LtiSystem::new(
        Mat::from_row_slice(2, 2, &[1.09, 0.22, 0.49, 0.02]),
        Mat::from_row_slice(2, 2, &[1.22, 0.88, -0.78, -0.34]),
    )
    .expect("static dimensions")
}

pub fn reference_outputs() -> (Mat, Mat) {
    (
        Mat::from_row_slice(2, 2, &[1.34, -0.16, -3.19, -0.56]),
        Mat::from_row_slice(2, 2, &[1.60, 1.01, -0.68, 0.77]),
    )
}

pub fn reference_weights(w: Weights) -> (Mat, Mat) {
    match w {
        Weights::Tuned => (
            Mat::from_row_slice(2, 2, &[5.44, 5.80, 5.80, 7.01]),
            Mat::from_row_slice(2, 2, &[1.14, 0.68, 0.68, 0.62]),
        ),
        Weights::Identity => (Mat::identity(2, 2), Mat::identity(2, 2)),
    }
}

pub fn reference_stage() -> StageConstraints {
    let (ch, dh) = reference_outputs();
    box_constraints(2, 2, 4.0, 1.0, Some((&ch, &dh, 1.0)))
}

/// Unstable two-state, two-input plant with state, input and output bounds.
pub fn reference_plant(weights: Weights, horizon: usize) -> Result<MpcProblem> {
    let (q, r) = reference_weights(weights);
    MpcProblem::assemble(
        reference_system(),
        reference_stage(),
        q,
        r,
        horizon,
        Vector::from_row_slice(&REFERENCE_X0),
    )
}

/// Discrete double integrator with `|x_i| ≤ 5`, `|u| ≤ 1`, `Q = I`, `R = 1`.
pub fn double_integrator(horizon: usize, x0: Vector) -> Result<MpcProblem> {
    let sys = LtiSystem::new(
        Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
        Mat::from_row_slice(2, 1, &[0.0, 1.0]),
    )?;
    MpcProblem::assemble(
        sys,
        box_constraints(2, 1, 5.0, 1.0, None),
        Mat::identity(2, 2),
        Mat::identity(1, 1),
        horizon,
        x0,
    )
}
