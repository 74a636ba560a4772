//! Time splitting of the horizon into per-stage subproblems.
//!
//! Stage `t` owns the decision vector
//!
//! * `t = 0`: `[x_0; u_0; z_1]` with `x_0` pinned to the measured state,
//! * `0 < t < N`: `[x_t; u_t; z_t; z_{t+1}]`,
//! * `t = N`: `[x_N; z_N]` (no terminal input),
//!
//! where `z_t` is the consensus copy of the state shared by stages `t-1` and
//! `t`. Constraint rows come in the fixed order: original rows, then the
//! `±(x_t − z_t)` band rows (`t ≥ 1`), then the `±(A x_t + B u_t − z_{t+1})`
//! band rows (`t < N`).

use nalgebra::Cholesky;
use serde::Serialize;

use crate::linalg::{block_diag, eig_extremes, hstack, norm2, row_major};
use crate::model::MpcProblem;
use crate::{Error, Mat, Result, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    Initial,
    Middle,
    Terminal,
}

/// Offsets into one stage's decision vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Layout {
    pub stage: Stage,
    pub nx: usize,
    pub nu: usize,
    /// Length of the stage variables (`x, u` or `x` at the end).
    pub y_len: usize,
    /// Leading stage variables fixed by the measurement.
    pub pinned: usize,
    /// Offset of the incoming consensus copy `z_t`.
    pub lo: Option<usize>,
    /// Offset of the outgoing consensus copy `z_{t+1}`.
    pub hi: Option<usize>,
    pub dim: usize,
}

impl Layout {
    pub fn new(stage: Stage, nx: usize, nu: usize) -> Self {
        match stage {
            Stage::Initial => Self {
                stage,
                nx,
                nu,
                y_len: nx + nu,
                pinned: nx,
                lo: None,
                hi: Some(nx + nu),
                dim: 2 * nx + nu,
            },
            Stage::Middle => Self {
                stage,
                nx,
                nu,
                y_len: nx + nu,
                pinned: 0,
                lo: Some(nx + nu),
                hi: Some(2 * nx + nu),
                dim: 3 * nx + nu,
            },
            Stage::Terminal => Self {
                stage,
                nx,
                nu,
                y_len: nx,
                pinned: 0,
                lo: Some(nx),
                hi: None,
                dim: 2 * nx,
            },
        }
    }

    pub fn free(&self) -> std::ops::Range<usize> {
        self.pinned..self.dim
    }

    pub fn z_len(&self) -> usize {
        self.dim - self.y_len
    }
}

/// Row offsets of the constraint blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowBlocks {
    pub original: usize,
    /// Start of the `+` rows of the incoming band; the `-` rows follow.
    pub lo: Option<usize>,
    /// Start of the `+` rows of the outgoing band; the `-` rows follow.
    pub hi: Option<usize>,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzBlocks {
    pub original: f64,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub eig_min: f64,
}

impl LipschitzBlocks {
    pub fn max(&self) -> f64 {
        [Some(self.original), self.lo, self.hi]
            .into_iter()
            .flatten()
            .fold(0.0, f64::max)
    }

    /// Per-row diagonal of the dual preconditioner.
    pub fn diagonal(&self, rows: &RowBlocks, nx: usize) -> Vec<f64> {
        let mut d = vec![self.original; rows.total];
        if let (Some(s), Some(v)) = (rows.lo, self.lo) {
            d[s..s + 2 * nx].fill(v);
        }
        if let (Some(s), Some(v)) = (rows.hi, self.hi) {
            d[s..s + 2 * nx].fill(v);
        }
        d
    }
}

/// Closed-form inner minimiser: the free stage variables are an affine map
/// of the consensus copies and the multipliers.
#[derive(Debug, Clone)]
pub struct InnerMap {
    /// Row-major `free × (z_len + rows)` map applied to `[z; μ]`.
    pub gain: Vec<f64>,
    /// Row-major `free × pinned` map applied to the pinned state.
    pub pinned_gain: Vec<f64>,
    pub factor: Cholesky<f64, nalgebra::Dyn>,
}

#[derive(Debug, Clone)]
pub struct SubproblemData {
    pub index: usize,
    pub horizon: usize,
    pub layout: Layout,
    pub rows: RowBlocks,
    pub rho: f64,
    /// Quadratic form of the local cost over the whole decision vector.
    pub hessian: Mat,
    /// Constraint matrix over the whole decision vector.
    pub constraint: Mat,
    /// Constraint offset with zero band width and no tightening.
    pub offset: Vector,
    /// Dual weighting: one on original rows, `rho` on band rows.
    pub weights: Vector,
    /// Original rows over the stage variables.
    pub original: Mat,
    pub original_offset: Vector,
    /// `[I 0]` (or `I` at the end): stage variables to the incoming copy.
    pub lo_map: Option<Mat>,
    /// `[A B]`: stage variables to the outgoing copy.
    pub hi_map: Option<Mat>,
    pub lipschitz: LipschitzBlocks,
    pub inner: InnerMap,
}

impl SubproblemData {
    pub fn p(&self) -> usize {
        self.rows.original
    }

    /// `½ ξᵀ 𝒬 ξ`.
    pub fn cost(&self, xi: &[f64]) -> f64 {
        let v = Vector::from_column_slice(xi);
        0.5 * v.dot(&(&self.hessian * &v))
    }

    /// Decision vector with both consensus copies set so the penalties vanish.
    pub fn consistent_point(&self, y: &Vector) -> Vector {
        let l = &self.layout;
        let mut xi = Vector::zeros(l.dim);
        xi.rows_mut(0, l.y_len).copy_from(y);
        if let (Some(o), Some(h)) = (l.lo, &self.lo_map) {
            xi.rows_mut(o, l.nx).copy_from(&(h * y));
        }
        if let (Some(o), Some(h)) = (l.hi, &self.hi_map) {
            xi.rows_mut(o, l.nx).copy_from(&(h * y));
        }
        xi
    }

    /// Unconstrained minimum of the local cost over the free variables.
    pub fn unconstrained_min(&self, pinned: &[f64]) -> f64 {
        let l = &self.layout;
        if l.pinned == 0 {
            return 0.0;
        }
        let f = l.free();
        let p = Vector::from_column_slice(pinned);
        let hpp = self.hessian.view((0, 0), (l.pinned, l.pinned)).into_owned();
        let hfp = self.hessian.view((f.start, 0), (f.len(), l.pinned)).into_owned();
        let coupling = self.inner.factor.solve(&(&hfp * &p));
        0.5 * (p.dot(&(&hpp * &p)) - (&hfp * &p).dot(&coupling))
    }

    /// `−(G_t y + g_t)`, the per-row slack of the original rows.
    pub fn original_slack(&self, y: &Vector) -> Vector {
        -(&self.original * y + &self.original_offset)
    }

    /// Free-variable Hessian.
    pub fn free_hessian(&self) -> Mat {
        let f = self.layout.free();
        self.hessian.view((f.start, f.start), (f.len(), f.len())).into_owned()
    }
}

pub fn build_subproblems(problem: &MpcProblem, rho: f64) -> Result<Vec<SubproblemData>> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Invalid(format!("penalty weight must be positive, got {rho}")));
    }
    let n = problem.horizon();
    if n == 0 {
        return Err(Error::Invalid("horizon must be at least 1".into()));
    }
    let (nx, nu) = (problem.nx(), problem.nu());
    if problem.stage.state.ncols() != nx || problem.stage.input.ncols() != nu {
        return Err(Error::Dimension("stage rows do not match the system".into()));
    }
    (0..=n)
        .map(|t| {
            let stage = if t == 0 {
                Stage::Initial
            } else if t == n {
                Stage::Terminal
            } else {
                Stage::Middle
            };
            build_one(problem, t, stage, rho)
        })
        .collect()
}

fn build_one(problem: &MpcProblem, t: usize, stage: Stage, rho: f64) -> Result<SubproblemData> {
    let (nx, nu) = (problem.nx(), problem.nu());
    let layout = Layout::new(stage, nx, nu);
    let sys = &problem.system;
    let eye = Mat::identity(nx, nx);

    let (original, original_offset) = match stage {
        Stage::Terminal => (problem.terminal.normals.clone(), -problem.terminal.bounds.clone()),
        _ => (
            hstack(&[&problem.stage.state, &problem.stage.input]),
            problem.stage.offset.clone(),
        ),
    };
    let stage_weight = match stage {
        Stage::Terminal => problem.cost.terminal_weight.clone(),
        _ => block_diag(&[&problem.cost.state_weight, &problem.cost.input_weight]),
    };
    let lo_map = match stage {
        Stage::Initial => None,
        Stage::Middle => Some(hstack(&[&eye, &Mat::zeros(nx, nu)])),
        Stage::Terminal => Some(eye.clone()),
    };
    let hi_map = match stage {
        Stage::Terminal => None,
        _ => Some(hstack(&[&sys.state, &sys.input])),
    };

    let p = original.nrows();
    let mut hessian = Mat::zeros(layout.dim, layout.dim);
    hessian
        .view_mut((0, 0), (layout.y_len, layout.y_len))
        .copy_from(&stage_weight);
    for (off, map) in [(layout.lo, &lo_map), (layout.hi, &hi_map)] {
        if let (Some(o), Some(h)) = (off, map) {
            add_penalty(&mut hessian, h, o, layout.y_len, rho);
        }
    }
    let hessian = crate::linalg::symmetrize(&hessian);

    let lo_rows = layout.lo.map(|_| p);
    let hi_rows = layout.hi.map(|_| p + if layout.lo.is_some() { 2 * nx } else { 0 });
    let total = p + 2 * nx * (layout.lo.is_some() as usize + layout.hi.is_some() as usize);
    let rows = RowBlocks { original: p, lo: lo_rows, hi: hi_rows, total };

    let mut constraint = Mat::zeros(total, layout.dim);
    constraint
        .view_mut((0, 0), (p, layout.y_len))
        .copy_from(&original);
    let mut offset = Vector::zeros(total);
    offset.rows_mut(0, p).copy_from(&original_offset);
    let mut weights = Vector::from_element(total, rho);
    weights.rows_mut(0, p).fill(1.0);
    for (r, off, map) in [(rows.lo, layout.lo, &lo_map), (rows.hi, layout.hi, &hi_map)] {
        if let (Some(r), Some(o), Some(h)) = (r, off, map) {
            constraint.view_mut((r, 0), (nx, layout.y_len)).copy_from(h);
            constraint.view_mut((r, o), (nx, nx)).copy_from(&(-&eye));
            constraint.view_mut((r + nx, 0), (nx, layout.y_len)).copy_from(&(-h));
            constraint.view_mut((r + nx, o), (nx, nx)).copy_from(&eye);
        }
    }

    let free = layout.free();
    let hff = hessian.view((free.start, free.start), (free.len(), free.len())).into_owned();
    let (eig_min, _) = eig_extremes(&hff);
    if !(eig_min > 0.0) {
        return Err(Error::Invalid(format!(
            "stage {t}: local Hessian is singular (min eigenvalue {eig_min:.3e})"
        )));
    }
    let factor = hff
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Invalid(format!("stage {t}: Cholesky factorisation failed")))?;

    // Stage-variable part of the inner minimiser. The consensus copies are
    // held fixed during the stage step, so only the free stage variables move.
    let fy = layout.pinned..layout.y_len;
    let nfy = fy.len();
    let hyy = hessian.view((fy.start, fy.start), (nfy, nfy)).into_owned();
    let yfactor = hyy
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Invalid(format!("stage {t}: stage block not positive definite")))?;
    let zl = layout.z_len();
    let hyz = hessian.view((fy.start, layout.y_len), (nfy, zl)).into_owned();
    let gw = {
        let g = constraint.view((0, fy.start), (total, nfy)).into_owned();
        let mut gw = g.transpose();
        for (j, mut col) in gw.column_iter_mut().enumerate() {
            col *= weights[j];
        }
        gw
    };
    let rhs = hstack(&[&hyz, &gw]);
    let gain = -yfactor.solve(&rhs);
    let pinned_gain = if layout.pinned > 0 {
        let hyp = hessian.view((fy.start, 0), (nfy, layout.pinned)).into_owned();
        row_major(&(-yfactor.solve(&hyp)))
    } else {
        Vec::new()
    };

    let g_free = original.view((0, layout.pinned), (p, layout.y_len - layout.pinned)).into_owned();
    let lipschitz = LipschitzBlocks {
        original: norm2(&g_free).powi(2) / eig_min,
        lo: lo_map.as_ref().map(|h| band_block(h, rho, nx) / eig_min),
        hi: hi_map.as_ref().map(|h| band_block(h, rho, nx) / eig_min),
        eig_min,
    };

    Ok(SubproblemData {
        index: t,
        horizon: problem.horizon(),
        layout,
        rows,
        rho,
        hessian,
        constraint,
        offset,
        weights,
        original,
        original_offset,
        lo_map,
        hi_map,
        lipschitz,
        inner: InnerMap { gain: row_major(&gain), pinned_gain, factor },
    })
}

/// `‖ρ·diag{H, −I}‖²`.
fn band_block(h: &Mat, rho: f64, nx: usize) -> f64 {
    let m = block_diag(&[&(h * rho), &(Mat::identity(nx, nx) * -rho)]);
    norm2(&m).powi(2)
}

/// Adds `ρ‖H y − z‖²` (as the quadratic form `ρ[HᵀH, −Hᵀ; −H, I]`).
fn add_penalty(hess: &mut Mat, h: &Mat, z_off: usize, y_len: usize, rho: f64) {
    let nx = h.nrows();
    let hth = h.transpose() * h * rho;
    let mut yy = hess.view_mut((0, 0), (y_len, y_len));
    yy += &hth;
    let cross = -h.transpose() * rho;
    hess.view_mut((0, z_off), (y_len, nx)).copy_from(&cross);
    hess.view_mut((z_off, 0), (nx, y_len)).copy_from(&cross.transpose());
    let mut zz = hess.view_mut((z_off, z_off), (nx, nx));
    for i in 0..nx {
        zz[(i, i)] += rho;
    }
}

/// Effective constraint system `G_ξ ξ + g_eff ≤ 0` for band half-widths
/// `eps_lo = ε_{z_t}`, `eps_hi = ε_{z_{t+1}}` and tightening `gamma`.
pub fn assemble_constraints(
    sub: &SubproblemData,
    eps_lo: f64,
    eps_hi: f64,
    gamma: &[f64],
) -> Result<(Mat, Vector)> {
    if gamma.len() != sub.rows.total {
        return Err(Error::Dimension(format!(
            "tightening has {} entries, stage {} has {} rows",
            gamma.len(),
            sub.index,
            sub.rows.total
        )));
    }
    if let Some(i) = gamma.iter().position(|g| !(*g >= 0.0)) {
        return Err(Error::Invalid(format!("negative tightening entry at row {i}")));
    }
    if !(eps_lo >= 0.0 && eps_hi >= 0.0) {
        return Err(Error::Invalid("band half-widths must be nonnegative".into()));
    }
    Ok((sub.constraint.clone(), effective_offset(sub, eps_lo, eps_hi, gamma)))
}

pub(crate) fn effective_offset(sub: &SubproblemData, eps_lo: f64, eps_hi: f64, gamma: &[f64]) -> Vector {
    let nx = sub.layout.nx;
    let mut g = sub.offset.clone();
    if let Some(r) = sub.rows.lo {
        g.rows_mut(r, 2 * nx).add_scalar_mut(-eps_lo);
    }
    if let Some(r) = sub.rows.hi {
        g.rows_mut(r, 2 * nx).add_scalar_mut(-eps_hi);
    }
    g + Vector::from_column_slice(gamma)
}

pub fn lipschitz_blocks(sub: &SubproblemData) -> &LipschitzBlocks {
    &sub.lipschitz
}

/// Ratio of extreme eigenvalues of the free-variable Hessian.
pub fn condition_number(sub: &SubproblemData) -> f64 {
    let (lo, hi) = eig_extremes(&sub.free_hessian());
    hi / lo
}
