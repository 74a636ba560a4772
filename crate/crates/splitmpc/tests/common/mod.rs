#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitmpc::model::{LtiSystem, MpcProblem, TerminalSet};
use splitmpc::oracle::max_uniform_slack;
use splitmpc::{Mat, Vector};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Mat {
    let m = random_mat(rng, n, n, 1.0);
    &m * m.transpose() + Mat::identity(n, n) * shift
}

/// Riccati solution by the structured doubling iteration, independent of the
/// library's fixed-point solver.
pub fn dare_doubling(sys: &LtiSystem, q: &Mat, r: &Mat) -> Mat {
    let n = sys.nx();
    let mut a = sys.state.clone();
    let mut g = &sys.input * r.clone().try_inverse().unwrap() * sys.input.transpose();
    let mut h = q.clone();
    for _ in 0..200 {
        let w = (Mat::identity(n, n) + &g * &h).try_inverse().unwrap();
        let a1 = &a * &w * &a;
        let g1 = &g + &a * &w * &g * a.transpose();
        let h1 = &h + a.transpose() * &h * &w * &a;
        let done = (&h1 - &h).amax() <= 1e-15 * (1.0 + h1.amax());
        a = a1;
        g = g1;
        h = h1;
        if done {
            break;
        }
    }
    (&h + h.transpose()) * 0.5
}

/// Vertices of a bounded 2-D polytope `{x : F x ≤ f}` by pairwise row
/// intersection.
pub fn vertices_2d(set: &TerminalSet) -> Vec<Vector> {
    let f = &set.normals;
    let b = &set.bounds;
    let mut out = Vec::new();
    for i in 0..f.nrows() {
        for j in i + 1..f.nrows() {
            let m = Mat::from_row_slice(2, 2, &[f[(i, 0)], f[(i, 1)], f[(j, 0)], f[(j, 1)]]);
            if m.determinant().abs() < 1e-12 {
                continue;
            }
            let v = m.lu().solve(&Vector::from_row_slice(&[b[i], b[j]])).unwrap();
            if (f * &v - b).iter().all(|r| *r <= 1e-9) {
                out.push(v);
            }
        }
    }
    out
}

/// Uniform draws from a box until `accept` holds, up to `tries` attempts.
pub fn draw_state(
    rng: &mut ChaCha8Rng,
    half_width: &[f64],
    tries: usize,
    mut accept: impl FnMut(&Vector) -> bool,
) -> Option<Vector> {
    for _ in 0..tries {
        let x = Vector::from_iterator(half_width.len(), half_width.iter().map(|w| rng.random_range(-w..*w)));
        if accept(&x) {
            return Some(x);
        }
    }
    None
}

/// States with a strictly feasible input sequence that lie outside the
/// terminal set (so the controller has to solve).
pub fn solvable_outside_terminal(problem: &MpcProblem, x: &Vector, min_slack: f64) -> bool {
    if problem.terminal.contains(x) {
        return false;
    }
    matches!(max_uniform_slack(problem, x, 1.0), Ok((s, _)) if s > min_slack)
}

pub struct Setup {
    pub subs: Vec<splitmpc::split::SubproblemData>,
    pub start: Vec<Vector>,
    pub ledger: splitmpc::tighten::TighteningLedger,
}

/// Subproblems, a strictly feasible start and the ledger for one sample at
/// `problem.x_init`.
pub fn setup(problem: &MpcProblem, rho: f64) -> Setup {
    use splitmpc::tighten::{build_ledger, slater_certificate, DEFAULT_SAFETY};
    let subs = splitmpc::split::build_subproblems(problem, rho).unwrap();
    let start = splitmpc::control::initial_slater(problem, &problem.x_init, 1.0).unwrap();
    let certs: Vec<_> = subs.iter().zip(&start).map(|(s, y)| slater_certificate(s, y)).collect();
    let ledger = build_ledger(&subs, &certs, &problem.system.state, None, DEFAULT_SAFETY).unwrap();
    Setup { subs, start, ledger }
}

/// `½ξᵀ𝒬ξ + μᵀW(Gξ + g_eff)`.
pub fn lagrangian(
    sub: &splitmpc::split::SubproblemData,
    ledger: &splitmpc::tighten::TighteningLedger,
    xi: &Vector,
    mu: &Vector,
) -> f64 {
    let (lo, hi) = ledger.bands(sub.index);
    let (g, off) = splitmpc::split::assemble_constraints(sub, lo, hi, &ledger.margins[sub.index]).unwrap();
    let r = (&g * xi + off).component_mul(&sub.weights);
    0.5 * xi.dot(&(&sub.hessian * xi)) + mu.dot(&r)
}

/// The coupled tightened problem over all free stage variables and the
/// shared copies `z_1..z_N`, with each stage's rows scaled by its weights so
/// that the QP multipliers are the stage multipliers. Returns the QP, the
/// global index of every local variable (pinned entries map to `None`) and
/// the row range of every stage.
pub fn global_qp(
    problem: &MpcProblem,
    subs: &[splitmpc::split::SubproblemData],
    ledger: &splitmpc::tighten::TighteningLedger,
) -> (splitmpc::oracle::QpInstance, Vec<Vec<Option<usize>>>, Vec<std::ops::Range<usize>>) {
    let nx = problem.nx();
    let n = subs.len() - 1;
    let mut index: Vec<Vec<Option<usize>>> = Vec::new();
    let mut next = 0;
    let mut y_start = Vec::new();
    for s in subs {
        y_start.push(next);
        next += s.layout.y_len - s.layout.pinned;
    }
    let z_start = next;
    let dim = z_start + n * nx;
    for (t, s) in subs.iter().enumerate() {
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
        index.push(map);
    }
    let total_rows: usize = subs.iter().map(|s| s.rows.total).sum();
    let mut h = Mat::zeros(dim, dim);
    let mut f = Vector::zeros(dim);
    let mut g = Mat::zeros(total_rows, dim);
    let mut b = Vector::zeros(total_rows);
    let mut ranges = Vec::new();
    let mut r0 = 0;
    let x0 = &problem.x_init;
    for (t, s) in subs.iter().enumerate() {
        let map = &index[t];
        let (lo, hi) = ledger.bands(t);
        let (gl, off) = splitmpc::split::assemble_constraints(s, lo, hi, &ledger.margins[t]).unwrap();
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
    (splitmpc::oracle::QpInstance::new(h, f, g, b).unwrap(), index, ranges)
}
