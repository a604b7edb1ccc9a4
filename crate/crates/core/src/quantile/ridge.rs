//! Exact active-set solver for ridge-regularized pinball regression.
//!
//! Minimizes `w Σ ρ_τ(y_i − x_iᵀβ) + cᵀβ + (μ/2)‖β‖²` with μ > 0. The
//! objective is strongly convex and piecewise quadratic. The solver holds a
//! set Z of observations pinned to zero residual and, with the residual
//! signs of all other observations frozen, minimizes the resulting
//! equality-constrained quadratic model in closed form. It then walks the
//! segment towards the model minimizer with an exact line search over the
//! kinks. A kink that stops the walk joins Z; a pinned observation whose
//! multiplier leaves [τ−1, τ] is released. Every step strictly decreases the
//! objective, so the final pattern is the unique optimum.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use super::design::{dot, Design};
use crate::error::{CfcError, Result};

pub(crate) struct RidgePinball<'a> {
    pub x: &'a Design,
    pub y: &'a [f64],
    pub weight: f64,
    pub tau: f64,
    pub linear: &'a [f64],
    pub ridge: f64,
}

pub(crate) struct RidgeSolution {
    pub beta: Vec<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
    pub trace: Vec<f64>,
}

fn pinball(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

impl RidgePinball<'_> {
    fn objective(&self, beta: &[f64]) -> f64 {
        let loss: f64 = self
            .x
            .rows()
            .zip(self.y)
            .map(|(row, &y)| pinball(y - dot(row, beta), self.tau))
            .sum();
        self.weight * loss + dot(self.linear, beta) + 0.5 * self.ridge * dot(beta, beta)
    }

    /// Minimizer of the quadratic model with pinned set `active` and
    /// frozen subgradients `psi` for everything else. Returns (β*, θ).
    fn model_minimizer(&self, active: &[usize], psi: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let r = self.x.ncols();
        let mu = self.ridge;
        let w = self.weight;
        let mut a = vec![0.0; r];
        for (i, row) in self.x.rows().enumerate() {
            let p = psi[i];
            if p != 0.0 {
                for k in 0..r {
                    a[k] += row[k] * p;
                }
            }
        }
        for k in 0..r {
            a[k] = w * a[k] - self.linear[k];
        }
        if active.is_empty() {
            return Some((a.iter().map(|v| v / mu).collect(), Vec::new()));
        }
        let m = active.len();
        let xz = DMatrix::from_fn(m, r, |i, j| self.x.row(active[i])[j]);
        let k_mat = (&xz * xz.transpose()) * (w / mu);
        let a_vec = DVector::from_column_slice(&a);
        let rhs = DVector::from_fn(m, |i, _| self.y[active[i]]) - (&xz * &a_vec) / mu;
        let theta = k_mat.lu().solve(&rhs)?;
        let beta = (a_vec + xz.transpose() * &theta * w) / mu;
        if beta.iter().chain(theta.iter()).any(|v| !v.is_finite()) {
            return None;
        }
        Some((beta.iter().copied().collect(), theta.iter().copied().collect()))
    }
}

/// Subgradient weights: ψ_i for free observations, 0 for pinned ones.
fn frozen_psi(
    resid: &[f64],
    pinned: &[bool],
    overrides: &HashMap<usize, f64>,
    tau: f64,
) -> Vec<f64> {
    resid
        .iter()
        .enumerate()
        .map(|(i, &res)| {
            if pinned[i] {
                0.0
            } else if let Some(&p) = overrides.get(&i) {
                p
            } else if res > 0.0 {
                tau
            } else if res < 0.0 {
                tau - 1.0
            } else {
                tau - 0.5
            }
        })
        .collect()
}

pub(crate) fn solve(
    p: &RidgePinball<'_>,
    start: Option<(&[f64], &[usize])>,
    max_iter: usize,
) -> Result<RidgeSolution> {
    let n = p.x.nrows();
    let r = p.x.ncols();
    let tau = p.tau;
    let w = p.weight;
    let mu = p.ridge;

    let (mut beta, mut active) = match start {
        Some((b, a)) if b.len() == r && a.len() <= r && a.iter().all(|&i| i < n) => {
            (b.to_vec(), a.to_vec())
        }
        _ => (vec![0.0; r], Vec::new()),
    };
    let mut pinned = vec![false; n];
    for &i in &active {
        pinned[i] = true;
    }
    // a warm start pins rows that may no longer be interpolated: re-project
    if !active.is_empty() {
        let residual_ok = active
            .iter()
            .all(|&i| (p.y[i] - dot(p.x.row(i), &beta)).abs() <= 1e-12);
        if !residual_ok {
            for &i in &active {
                pinned[i] = false;
            }
            active.clear();
        }
    }

    let mut overrides: HashMap<usize, f64> = HashMap::new();
    let mut trace = vec![p.objective(&beta)];
    let mut resid = vec![0.0; n];
    let mut kinks: Vec<(f64, f64, usize)> = Vec::new();

    for iteration in 0..max_iter {
        for (i, row) in p.x.rows().enumerate() {
            resid[i] = p.y[i] - dot(row, &beta);
        }
        let psi = frozen_psi(&resid, &pinned, &overrides, tau);
        let (target, theta) = p.model_minimizer(&active, &psi).ok_or_else(|| CfcError::Solver {
            method: "pinball-ridge".into(),
            message: "singular active set".into(),
        })?;
        let dir: Vec<f64> = target.iter().zip(&beta).map(|(t, b)| t - b).collect();
        let dir_sq = dot(&dir, &dir);
        let scale = 1.0 + dot(&beta, &beta).sqrt();

        let mut slope = dot(&dir, &beta) * mu + dot(&dir, p.linear);
        for (i, row) in p.x.rows().enumerate() {
            if !pinned[i] {
                slope -= w * dot(row, &dir) * psi[i];
            }
        }
        // drift in the pinned residuals can leave no descent along dir even
        // when dir is not tiny; the pattern is then numerically optimal
        if dir_sq.sqrt() <= 1e-13 * scale || slope >= 0.0 {
            // at the model minimizer: check multipliers of the pinned rows
            let worst = theta
                .iter()
                .enumerate()
                .map(|(k, &t)| (k, (t - tau).max((tau - 1.0) - t)))
                .max_by(|a, b| a.1.total_cmp(&b.1));
            match worst {
                Some((k, viol)) if viol > 1e-12 => {
                    let i = active.remove(k);
                    pinned[i] = false;
                    overrides.insert(i, if theta[k] > tau { tau } else { tau - 1.0 });
                    continue;
                }
                _ => {
                    if dir_sq.sqrt() <= 1e-13 * scale {
                        beta = target;
                    }
                    return Ok(RidgeSolution {
                        beta,
                        active,
                        iterations: iteration,
                        trace,
                    });
                }
            }
        }

        // exact line search of f(β + t·dir) over t ∈ [0, 1]
        kinks.clear();
        for (i, row) in p.x.rows().enumerate() {
            if pinned[i] {
                continue;
            }
            let a = dot(row, &dir);
            if a == 0.0 {
                continue;
            }
            let res = resid[i];
            if overrides.contains_key(&i) || res == 0.0 {
                // at zero residual: the frozen side must match where it moves
                let moves_against = (psi[i] >= tau && a > 0.0) || (psi[i] <= tau - 1.0 && a < 0.0);
                if moves_against {
                    kinks.push((0.0, w * a.abs(), i));
                }
                continue;
            }
            let t = res / a;
            if t > 0.0 && t <= 1.0 {
                kinks.push((t, w * a.abs(), i));
            }
        }
        kinks.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        let curvature = mu * dir_sq;
        let mut step = None;
        let mut entering = None;
        for &(t, jump, i) in &kinks {
            // smooth part reaches zero slope before this kink
            let t_zero = -slope / curvature;
            if t_zero <= t {
                step = Some(t_zero);
                break;
            }
            slope += jump;
            if slope + curvature * t >= 0.0 {
                step = Some(t);
                entering = Some(i);
                break;
            }
        }
        let step = step.unwrap_or_else(|| (-slope / curvature).min(1.0));
        if step <= 0.0 && entering.is_none() {
            return Err(CfcError::Solver {
                method: "pinball-ridge".into(),
                message: "line search stalled".into(),
            });
        }
        for (b, d) in beta.iter_mut().zip(&dir) {
            *b += step * d;
        }
        if step > 0.0 {
            overrides.clear();
        }
        if let Some(i) = entering {
            if active.len() < r {
                overrides.remove(&i);
                active.push(i);
                pinned[i] = true;
            }
        }
        trace.push(p.objective(&beta));
    }
    Err(CfcError::Solver {
        method: "pinball-ridge".into(),
        message: format!("no convergence after {max_iter} iterations"),
    })
}

/// Closed-form solution for a final (pinned set, residual sign) pattern.
/// Signs are read from residuals against `y_sign`; the solution uses `p.y`.
pub(crate) fn pattern_solution(
    p: &RidgePinball<'_>,
    y_sign: &[f64],
    beta: &[f64],
    active: &[usize],
) -> Option<Vec<f64>> {
    let mut pinned = vec![false; p.x.nrows()];
    for &i in active {
        pinned[i] = true;
    }
    let resid: Vec<f64> = p
        .x
        .rows()
        .zip(y_sign)
        .map(|(row, &y)| y - dot(row, beta))
        .collect();
    let psi = frozen_psi(&resid, &pinned, &HashMap::new(), p.tau);
    let mut sorted = active.to_vec();
    sorted.sort_unstable();
    p.model_minimizer(&sorted, &psi).map(|(b, _)| b)
}
