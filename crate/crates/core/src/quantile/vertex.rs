//! Exact edge-following solver for unregularized pinball regression.
//!
//! Minimizes `w Σ ρ_τ(y_i − x_iᵀβ) + cᵀβ` over β ∈ R^r, where the design has
//! full column rank r. Every optimum of this piecewise-linear problem (when
//! bounded) is attained at a vertex: a basis B of r observations interpolated
//! exactly, β = X_B⁻¹ y_B. From a vertex the solver inspects the 2r edges
//! (free one basis residual in either direction), takes the steepest
//! descending edge and line-searches it exactly with a weighted-median
//! walk over the kinks. Each pivot strictly decreases the objective.
//!
//! An optional secondary objective `tᵀβ` is minimized lexicographically over
//! the optimal face.

use nalgebra::DMatrix;

use super::design::{dot, Design};
use crate::error::{CfcError, Result};

pub(crate) struct LinearPinball<'a> {
    pub x: &'a Design,
    pub y: &'a [f64],
    pub weight: f64,
    pub tau: f64,
    pub linear: &'a [f64],
    pub tiebreak: Option<&'a [f64]>,
}

/// Optimality certificate of a vertex: enough to re-check the vertex against
/// a different linear term in O(r²).
#[derive(Clone, Debug)]
pub(crate) struct Certificate {
    pub basis: Vec<usize>,
    /// X_B⁻¹, row-major r×r.
    pub minv: Vec<f64>,
    /// Σ_{i∉B} (x_i X_B⁻¹) ψ_i with ψ the residual-sign subgradient.
    pub nonbasic_grad: Vec<f64>,
    pub weight: f64,
    pub tau: f64,
}

impl Certificate {
    /// True when the vertex is the unique optimum for linear term `c`, with
    /// every edge derivative at least `margin` (relative to the weight).
    pub fn strictly_optimal_for(&self, c: &[f64], margin: f64) -> bool {
        let r = self.basis.len();
        for j in 0..r {
            let mc: f64 = (0..r).map(|k| self.minv[k * r + j] * c[k]).sum::<f64>() / self.weight;
            let g = self.nonbasic_grad[j];
            let up = -g + (1.0 - self.tau) + mc;
            let down = g + self.tau - mc;
            if up <= margin || down <= margin {
                return false;
            }
        }
        true
    }
}

pub(crate) struct Vertex {
    pub basis: Vec<usize>,
    pub iterations: usize,
    pub trace: Vec<f64>,
    pub certificate: Certificate,
}

pub(crate) enum LpOutcome {
    Optimal(Vertex),
    Unbounded,
}

fn pinball(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

fn invert_rows(x: &Design, basis: &[usize]) -> Option<Vec<f64>> {
    let r = x.ncols();
    let m = DMatrix::from_fn(r, r, |i, j| x.row(basis[i])[j]);
    let inv = m.try_inverse()?;
    if inv.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut out = vec![0.0; r * r];
    for i in 0..r {
        for j in 0..r {
            out[i * r + j] = inv[(i, j)];
        }
    }
    Some(out)
}

#[cfg(test)]
fn objective(p: &LinearPinball<'_>, beta: &[f64]) -> f64 {
    let loss: f64 = p
        .x
        .rows()
        .zip(p.y)
        .map(|(row, &y)| pinball(y - dot(row, beta), p.tau))
        .sum();
    p.weight * loss + dot(p.linear, beta)
}

fn valid_basis(x: &Design, basis: &[usize]) -> bool {
    if basis.len() != x.ncols() || basis.iter().any(|&i| i >= x.nrows()) {
        return false;
    }
    let mut sorted = basis.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted.len() == basis.len() && invert_rows(x, basis).is_some()
}

/// Finds a starting vertex by r exact line minimizations, each in the null
/// space of the rows already interpolated. Returns `None` when the
/// objective is unbounded below along some line.
fn complete_vertex(p: &LinearPinball<'_>) -> Result<Option<Vec<usize>>> {
    let n = p.x.nrows();
    let r = p.x.ncols();
    let mut beta = vec![0.0; r];
    let mut active: Vec<usize> = Vec::with_capacity(r);
    let mut in_active = vec![false; n];

    for _ in 0..r {
        let dir = null_direction(p.x, &active)
            .ok_or_else(|| CfcError::domain("basis is rank deficient"))?;
        let mut kinks: Vec<(f64, f64, usize)> = Vec::new();
        let mut slope = dot(p.linear, &dir);
        for i in 0..n {
            if in_active[i] {
                continue;
            }
            let a = dot(p.x.row(i), &dir);
            if a == 0.0 {
                continue;
            }
            let res = p.y[i] - dot(p.x.row(i), &beta);
            // slope contribution far to the left of the kink
            slope -= p.weight * if a > 0.0 { p.tau * a } else { (1.0 - p.tau) * -a };
            kinks.push((res / a, p.weight * a.abs(), i));
        }
        if slope > 0.0 || kinks.is_empty() {
            return Ok(None);
        }
        kinks.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        let mut entering = None;
        for &(t, jump, i) in &kinks {
            slope += jump;
            if slope >= 0.0 {
                entering = Some((t, i));
                break;
            }
        }
        let Some((t, i)) = entering else {
            return Ok(None);
        };
        for (b, d) in beta.iter_mut().zip(&dir) {
            *b += t * d;
        }
        active.push(i);
        in_active[i] = true;
    }
    Ok(Some(active))
}

/// A unit-ish vector orthogonal to the rows of `x` indexed by `active`.
fn null_direction(x: &Design, active: &[usize]) -> Option<Vec<f64>> {
    let r = x.ncols();
    let mut proj = DMatrix::<f64>::identity(r, r);
    if !active.is_empty() {
        let a = DMatrix::from_fn(active.len(), r, |i, j| x.row(active[i])[j]);
        let gram_inv = (&a * a.transpose()).try_inverse()?;
        proj -= a.transpose() * gram_inv * &a;
    }
    let (best, norm) = (0..r)
        .map(|j| (j, proj.column(j).norm()))
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    if norm < 1e-10 {
        return None;
    }
    Some(proj.column(best).iter().map(|v| v / norm).collect())
}

pub(crate) fn solve(
    p: &LinearPinball<'_>,
    warm: Option<&[usize]>,
    max_iter: usize,
) -> Result<LpOutcome> {
    let n = p.x.nrows();
    let r = p.x.ncols();
    let mut basis = match warm.filter(|b| valid_basis(p.x, b)) {
        Some(b) => b.to_vec(),
        None => match complete_vertex(p)? {
            Some(b) => b,
            None => return Ok(LpOutcome::Unbounded),
        },
    };

    let tau = p.tau;
    let w = p.weight;
    let descent_tol = 1e-12;
    let mut trace = Vec::new();
    let mut in_basis = vec![false; n];
    let mut u = vec![0.0; n * r];
    let mut resid = vec![0.0; n];
    let mut kinks: Vec<(f64, f64, usize)> = Vec::with_capacity(n);

    for iteration in 0..=max_iter {
        let minv = invert_rows(p.x, &basis).ok_or_else(|| CfcError::Solver {
            method: "pinball-lp".into(),
            message: "singular basis".into(),
        })?;
        let yb: Vec<f64> = basis.iter().map(|&i| p.y[i]).collect();
        let beta: Vec<f64> = (0..r)
            .map(|k| (0..r).map(|j| minv[k * r + j] * yb[j]).sum())
            .collect();

        in_basis.iter_mut().for_each(|b| *b = false);
        for &i in &basis {
            in_basis[i] = true;
        }
        let mut grad = vec![0.0; r];
        let mut loss = 0.0;
        for i in 0..n {
            let row = p.x.row(i);
            let ui = &mut u[i * r..(i + 1) * r];
            for (j, uij) in ui.iter_mut().enumerate() {
                *uij = (0..r).map(|k| row[k] * minv[k * r + j]).sum();
            }
            let res = p.y[i] - dot(row, &beta);
            resid[i] = res;
            loss += pinball(res, tau);
            if in_basis[i] {
                continue;
            }
            let psi = if res > 0.0 {
                tau
            } else if res < 0.0 {
                tau - 1.0
            } else {
                tau - 0.5
            };
            for j in 0..r {
                grad[j] += ui[j] * psi;
            }
        }
        trace.push(w * loss + dot(p.linear, &beta));

        let certificate = Certificate {
            basis: basis.clone(),
            minv: minv.clone(),
            nonbasic_grad: grad.clone(),
            weight: w,
            tau,
        };

        // edge (j, σ): direction σ·X_B⁻¹ e_j
        let tol = descent_tol * (w * n as f64).max(1e-300);
        let mut best: Option<(f64, usize, f64, f64)> = None;
        let mut flat: Option<(f64, usize, f64)> = None;
        for j in 0..r {
            let col_norm = (0..r).map(|k| minv[k * r + j].powi(2)).sum::<f64>().sqrt();
            let mc: f64 = (0..r).map(|k| minv[k * r + j] * p.linear[k]).sum();
            let tb = p
                .tiebreak
                .map(|t| (0..r).map(|k| minv[k * r + j] * t[k]).sum::<f64>());
            for sigma in [1.0, -1.0] {
                let deriv = if sigma > 0.0 {
                    w * (-grad[j] + 1.0 - tau) + mc
                } else {
                    w * (grad[j] + tau) - mc
                };
                let scaled = deriv / col_norm;
                if deriv < -tol {
                    if best.is_none_or(|b| scaled < b.0) {
                        best = Some((scaled, j, sigma, deriv));
                    }
                } else if deriv <= tol {
                    if let Some(tb) = tb {
                        let slope = sigma * tb / col_norm;
                        if slope < -1e-12 && flat.is_none_or(|f| slope < f.0) {
                            flat = Some((slope, j, sigma));
                        }
                    }
                }
            }
        }

        let (j, sigma, deriv, descending) = match (best, flat) {
            (Some((_, j, s, d)), _) => (j, s, d, true),
            (None, Some((_, j, s))) => (j, s, 0.0, false),
            (None, None) => {
                return Ok(LpOutcome::Optimal(Vertex {
                    basis,
                    iterations: iteration,
                    trace,
                    certificate,
                }))
            }
        };
        if iteration == max_iter {
            return Err(CfcError::Solver {
                method: "pinball-lp".into(),
                message: format!("no convergence after {max_iter} pivots"),
            });
        }

        kinks.clear();
        for i in 0..n {
            if in_basis[i] {
                continue;
            }
            let a = sigma * u[i * r + j];
            if a == 0.0 {
                continue;
            }
            let t = resid[i] / a;
            if t > 0.0 {
                kinks.push((t, w * a.abs(), i));
            }
        }
        if kinks.is_empty() {
            if descending {
                return Ok(LpOutcome::Unbounded);
            }
            // flat ray without a kink: the tie-break cannot improve further
            return Ok(LpOutcome::Optimal(Vertex {
                basis,
                iterations: iteration,
                trace,
                certificate,
            }));
        }
        kinks.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        let entering = if descending {
            let mut slope = deriv;
            let mut hit = None;
            for &(_, jump, i) in &kinks {
                slope += jump;
                if slope >= 0.0 {
                    hit = Some(i);
                    break;
                }
            }
            match hit {
                Some(i) => i,
                None => return Ok(LpOutcome::Unbounded),
            }
        } else {
            kinks[0].2
        };
        basis[j] = entering;
    }
    unreachable!("loop returns on its last iteration")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: &Design, y: &[f64], tau: f64) -> (Vec<f64>, f64) {
        let c = vec![0.0; x.ncols()];
        let p = LinearPinball {
            x,
            y,
            weight: 1.0 / y.len() as f64,
            tau,
            linear: &c,
            tiebreak: None,
        };
        match solve(&p, None, 10_000).unwrap() {
            LpOutcome::Optimal(v) => {
                let minv = invert_rows(x, &v.basis).unwrap();
                let r = x.ncols();
                let beta: Vec<f64> = (0..r)
                    .map(|k| (0..r).map(|j| minv[k * r + j] * y[v.basis[j]]).sum())
                    .collect();
                let obj = objective(&p, &beta);
                (beta, obj)
            }
            LpOutcome::Unbounded => panic!("unbounded"),
        }
    }

    #[test]
    fn median_of_odd_sample() {
        let x = Design::intercept(5);
        let (beta, _) = run(&x, &[0.5, 0.1, 0.9, 0.3, 0.7], 0.5);
        assert_eq!(beta, vec![0.5]);
    }

    #[test]
    fn trace_is_monotone() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let t = i as f64 / 40.0;
                vec![1.0, t, t * t]
            })
            .collect();
        let y: Vec<f64> = (0..40)
            .map(|i| ((i * 37 % 11) as f64) / 11.0 * 0.3 + i as f64 / 80.0)
            .collect();
        let x = Design::from_rows(&rows).unwrap();
        let c = vec![0.0; 3];
        let p = LinearPinball {
            x: &x,
            y: &y,
            weight: 1.0 / 40.0,
            tau: 0.8,
            linear: &c,
            tiebreak: None,
        };
        let LpOutcome::Optimal(v) = solve(&p, None, 10_000).unwrap() else {
            panic!("unbounded")
        };
        for pair in v.trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "{:?}", v.trace);
        }
    }

    #[test]
    fn linear_term_can_make_problem_unbounded() {
        let x = Design::intercept(3);
        let y = [0.1, 0.2, 0.3];
        // slope of −τβ beats the data term once all points are below the fit
        let c = [-1.0];
        let p = LinearPinball {
            x: &x,
            y: &y,
            weight: 1.0 / 4.0,
            tau: 0.9,
            linear: &c,
            tiebreak: None,
        };
        assert!(matches!(solve(&p, None, 100).unwrap(), LpOutcome::Unbounded));
    }
}
