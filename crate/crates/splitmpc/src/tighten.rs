//! Tightening ledger: Slater slacks, band widths, tightening levels, drift
//! bounds, multiplier bounds and iteration counts for one sample.
//!
//! Vectors indexed by consensus copy (`relax`) have length `N + 1` with an
//! unused zero in slot 0, so that `relax[t]` is the band of `z_t`.

use serde::Serialize;

use crate::linalg::{abs_row_sums, inf_norm, mat_pow};
use crate::split::SubproblemData;
use crate::{Error, Mat, Result, Vector};

pub const DEFAULT_SAFETY: f64 = 0.9;

/// Strictly feasible point of one stage and the quantities derived from it.
#[derive(Debug, Clone, Serialize)]
pub struct SlaterCertificate {
    pub y_tilde: Vec<f64>,
    /// `−(G_t ỹ + g_t)` per original row.
    pub row_slack: Vec<f64>,
    pub slack: f64,
    /// Local cost at the consistent completion of `ỹ`.
    pub v_tilde: f64,
    /// Dual function at the zero multiplier (unconstrained minimum).
    pub d_tilde: f64,
}

pub fn slater_certificate(sub: &SubproblemData, y_tilde: &Vector) -> SlaterCertificate {
    let row_slack = sub.original_slack(y_tilde);
    let slack = row_slack.iter().copied().fold(f64::INFINITY, f64::min);
    let xi = sub.consistent_point(y_tilde);
    let v_tilde = sub.cost(xi.as_slice());
    let d_tilde = sub.unconstrained_min(&y_tilde.as_slice()[..sub.layout.pinned]);
    SlaterCertificate {
        y_tilde: y_tilde.iter().copied().collect(),
        row_slack: row_slack.iter().copied().collect(),
        slack,
        v_tilde,
        d_tilde,
    }
}

/// `α_0 = 0`, `α_t = 2 Σ_{j<t} ‖A^j‖_∞ ε_{z_{t−j}}`.
pub fn alpha_profile(relax: &[f64], a: &Mat) -> Vec<f64> {
    let n = relax.len().saturating_sub(1);
    let norms: Vec<f64> = (0..=n).map(|j| inf_norm(&mat_pow(a, j))).collect();
    (0..=n)
        .map(|t| 2.0 * (0..t).fold(0.0, |acc, j| acc + norms[j] * relax[t - j]))
        .collect()
}

/// Band half-widths, chosen backwards from `t = N`:
/// `ε_{z_t} = θ·min{ε_{z_{t+j}}/‖A^j‖_∞, s_t/(1 + 2t‖C_t‖_∞), cap_t}`.
///
/// `slacks` and `row_norms` are indexed by stage `0..=N`; `caps` (if given)
/// by consensus copy with slot 0 unused.
pub fn choose_eps_z(
    slacks: &[f64],
    a: &Mat,
    row_norms: &[f64],
    caps: Option<&[f64]>,
    safety: f64,
) -> Result<Vec<f64>> {
    let n = slacks.len().saturating_sub(1);
    if let Some(t) = slacks.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::Slater(format!("stage {t} has slack {:.3e}", slacks[t])));
    }
    let norms: Vec<f64> = (0..=n).map(|j| inf_norm(&mat_pow(a, j))).collect();
    let mut relax = vec![0.0; n + 1];
    for t in (1..=n).rev() {
        let mut m = slacks[t] / (1.0 + 2.0 * t as f64 * row_norms[t]);
        for j in 1..=(n - t) {
            m = m.min(relax[t + j] / norms[j]);
        }
        if let Some(c) = caps {
            m = m.min(c[t]);
        }
        relax[t] = safety * m;
    }
    Ok(relax)
}

/// `ε_t = θ·½·min{ε_{z_t}, ε_{z_{t+1}}, s_t}`, `η_t = ε_t / 2`.
pub fn choose_eps(relax: &[f64], slacks: &[f64], safety: f64) -> (Vec<f64>, Vec<f64>) {
    let n = slacks.len() - 1;
    let eps: Vec<f64> = (0..=n)
        .map(|t| {
            let mut m = slacks[t];
            if t >= 1 {
                m = m.min(relax[t]);
            }
            if t < n {
                m = m.min(relax[t + 1]);
            }
            safety * 0.5 * m
        })
        .collect();
    let eta = eps.iter().map(|e| e / 2.0).collect();
    (eps, eta)
}

/// Band pair of stage `t`: `(ε_{z_t}, ε_{z_{t+1}})`, absent at the edges.
pub fn band_pair(relax: &[f64], t: usize) -> (Option<f64>, Option<f64>) {
    let n = relax.len() - 1;
    ((t >= 1).then(|| relax[t]), (t < n).then(|| relax[t + 1]))
}

fn radius(
    cert: &SlaterCertificate,
    first_block: impl Iterator<Item = f64>,
    eps: f64,
    bands: (Option<f64>, Option<f64>),
    rho: f64,
) -> Result<f64> {
    let mut min_gamma = f64::INFINITY;
    for v in first_block {
        min_gamma = min_gamma.min(v);
    }
    for b in [bands.0, bands.1].into_iter().flatten() {
        min_gamma = min_gamma.min(2.0 * rho * (b - eps));
    }
    if !(min_gamma > 0.0) {
        return Err(Error::Slater(format!(
            "multiplier bound hypotheses violated (min margin {min_gamma:.3e})"
        )));
    }
    Ok(((cert.v_tilde - cert.d_tilde) / min_gamma).max(0.0))
}

/// Multiplier bound with uniform tightening `ε`: `‖μ*‖ ≤ 2 R_d`.
pub fn multiplier_bound_basic(
    cert: &SlaterCertificate,
    eps: f64,
    bands: (Option<f64>, Option<f64>),
    rho: f64,
) -> Result<f64> {
    radius(cert, cert.row_slack.iter().map(|s| s - eps), eps, bands, rho)
}

/// Multiplier bound with the drift-aware tightening `|C|α + ε`:
/// `‖μ*_γ‖ ≤ 2 𝓡_t`.
pub fn multiplier_bound_gamma(
    cert: &SlaterCertificate,
    eps: f64,
    bands: (Option<f64>, Option<f64>),
    alpha: f64,
    c: &Mat,
    rho: f64,
) -> Result<f64> {
    let sums = abs_row_sums(c);
    radius(
        cert,
        cert.row_slack.iter().zip(sums).map(|(s, r)| s - r * alpha - eps),
        eps,
        bands,
        rho,
    )
}

/// Original rows get `|C_t|(α𝟏) + ε`, band rows get `ε`.
pub fn gamma_vector(eps: f64, alpha: f64, c: &Mat, band_rows: usize) -> Vec<f64> {
    let mut g: Vec<f64> = abs_row_sums(c).into_iter().map(|r| r * alpha + eps).collect();
    g.extend(std::iter::repeat_n(eps, band_rows));
    g
}

/// `2 Σ_t 𝓡_t √p_t (ε_t + ‖C_t‖_∞ α_t)`.
pub fn suboptimality_gap(ledger: &TighteningLedger, rows: &[usize]) -> f64 {
    2.0 * ledger
        .dual_radius
        .iter()
        .zip(&ledger.shift)
        .zip(rows)
        .fold(0.0, |a, ((r, s), p)| a + r * (*p as f64).sqrt() * s)
}

/// `⌊√(8 R L / η)⌋`.
pub fn iteration_bound(r: f64, eta: f64, max_l: f64) -> Result<u64> {
    if !(eta > 0.0) {
        return Err(Error::Invalid("target accuracy must be positive".into()));
    }
    if !(r >= 0.0 && max_l > 0.0) {
        return Err(Error::Invalid("bound needs R >= 0 and L > 0".into()));
    }
    let k = (8.0 * r * max_l / eta).sqrt().floor();
    if k > u64::MAX as f64 {
        return Err(Error::Invalid("iteration bound overflows".into()));
    }
    Ok(k as u64)
}

/// Stability caps on the band widths from the previous sample's stage cost
/// and multiplier radii:
/// `V_0 / (4N 𝓡_t √p_t (1 + 2t‖C_t‖_∞))`.
pub fn stability_caps(stage_cost: f64, radii: &[f64], rows: &[usize], row_norms: &[f64]) -> Vec<f64> {
    let n = radii.len() - 1;
    (0..=n)
        .map(|t| {
            if t == 0 {
                return 0.0;
            }
            let denom = 4.0
                * n as f64
                * radii[t]
                * (rows[t] as f64).sqrt()
                * (1.0 + 2.0 * t as f64 * row_norms[t]);
            if denom > 0.0 {
                stage_cost / denom
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TighteningLedger {
    pub safety: f64,
    pub slack: Vec<f64>,
    /// Band half-widths `ε_{z_t}`; slot 0 unused.
    pub relax: Vec<f64>,
    /// Tightening levels `ε_t`.
    pub tighten: Vec<f64>,
    /// Target dual accuracy `η_t = ε_t / 2`.
    pub accuracy: Vec<f64>,
    /// Drift bounds `α_t` between consolidated and local states.
    pub drift: Vec<f64>,
    /// Per-row tightening vectors `γ_t`.
    pub margins: Vec<Vec<f64>>,
    /// `γ̄_t = ε_t + ‖C_t‖_∞ α_t`.
    pub shift: Vec<f64>,
    /// Multiplier radii `𝓡_t`.
    pub dual_radius: Vec<f64>,
    pub lipschitz: Vec<f64>,
    pub iterations: Vec<u64>,
    /// Stability caps used for the band widths, if any.
    pub caps: Option<Vec<f64>>,
}

impl TighteningLedger {
    pub fn horizon(&self) -> usize {
        self.slack.len() - 1
    }

    pub fn max_iterations(&self) -> u64 {
        self.iterations.iter().copied().max().unwrap_or(0)
    }

    pub fn bands(&self, t: usize) -> (f64, f64) {
        let (lo, hi) = band_pair(&self.relax, t);
        (lo.unwrap_or(0.0), hi.unwrap_or(0.0))
    }
}

/// Previous-sample information feeding the stability caps.
#[derive(Debug, Clone)]
pub struct StabilityMemory {
    pub stage_cost: f64,
    pub dual_radius: Vec<f64>,
}

/// Builds the ledger in the order slacks → band widths → tightening →
/// accuracy → drift → per-row tightening → multiplier radii → iteration counts.
pub fn build_ledger(
    subs: &[SubproblemData],
    certs: &[SlaterCertificate],
    a: &Mat,
    memory: Option<&StabilityMemory>,
    safety: f64,
) -> Result<TighteningLedger> {
    if !(safety > 0.0 && safety < 1.0) {
        return Err(Error::Invalid(format!("safety factor must lie in (0,1), got {safety}")));
    }
    if subs.len() != certs.len() || subs.is_empty() {
        return Err(Error::Dimension("one Slater certificate per stage required".into()));
    }
    let slack: Vec<f64> = certs.iter().map(|c| c.slack).collect();
    let row_norms: Vec<f64> = subs.iter().map(|s| inf_norm(&original_state_rows(s))).collect();
    let rows: Vec<usize> = subs.iter().map(|s| s.p()).collect();
    let caps = memory.map(|m| stability_caps(m.stage_cost, &m.dual_radius, &rows, &row_norms));
    let relax = choose_eps_z(&slack, a, &row_norms, caps.as_deref(), safety)?;
    let (tighten, accuracy) = choose_eps(&relax, &slack, safety);
    let drift = alpha_profile(&relax, a);

    let mut margins = Vec::with_capacity(subs.len());
    let mut shift = Vec::with_capacity(subs.len());
    let mut dual_radius = Vec::with_capacity(subs.len());
    let mut lipschitz = Vec::with_capacity(subs.len());
    let mut iterations = Vec::with_capacity(subs.len());
    for (t, sub) in subs.iter().enumerate() {
        let c = original_state_rows(sub);
        let band_rows = sub.rows.total - sub.p();
        margins.push(gamma_vector(tighten[t], drift[t], &c, band_rows));
        shift.push(tighten[t] + row_norms[t] * drift[t]);
        let r = multiplier_bound_gamma(
            &certs[t],
            tighten[t],
            band_pair(&relax, t),
            drift[t],
            &c,
            sub.rho,
        )?;
        dual_radius.push(r);
        let l = sub.lipschitz.max();
        lipschitz.push(l);
        iterations.push(if accuracy[t] > 0.0 {
            iteration_bound(2.0 * r, accuracy[t], l)?
        } else {
            0
        });
    }
    Ok(TighteningLedger {
        safety,
        slack,
        relax,
        tighten,
        accuracy,
        drift,
        margins,
        shift,
        dual_radius,
        lipschitz,
        iterations,
        caps,
    })
}

/// State part of the original rows (`C` for stages, `F_N` at the end).
pub fn original_state_rows(sub: &SubproblemData) -> Mat {
    sub.original.columns(0, sub.layout.nx).into_owned()
}
