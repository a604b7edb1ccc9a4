//! Pinball-loss machinery: plain and ridge-regularized linear quantile
//! regression, and the augmented fit that adds one imputed test point.
//!
//! Both solvers are exact. The unregularized problem is a linear program and
//! is solved by edge-following over interpolating bases ([`vertex`]); the
//! ridge problem is strongly convex piecewise-quadratic and is solved by an
//! active-set method ([`ridge`]). Targets receive a deterministic jitter of
//! order 1e-9 to keep bases in general position; the returned coefficients
//! are recomputed from the final basis with the original targets.

mod design;
mod ridge;
mod vertex;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub use design::Design;
pub(crate) use design::dot;
pub(crate) use vertex::Certificate;

use crate::error::{CfcError, Result};

/// ρ_τ(u) = u·(τ − 𝟙{u<0}).
pub fn pinball_loss(u: f64, tau: f64) -> Result<f64> {
    if !u.is_finite() {
        return Err(CfcError::domain("pinball residual must be finite"));
    }
    check_tau(tau)?;
    Ok(pinball(u, tau))
}

#[inline]
pub(crate) fn pinball(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(CfcError::domain(format!("quantile level {tau} outside (0,1)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Numerical tolerance used for rank detection and convergence checks.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iter: 50_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileFit {
    pub beta: Vec<f64>,
    pub tau: f64,
    /// Mean pinball loss at `beta`, plus the ridge term when present.
    pub objective: f64,
    pub ridge: f64,
    pub iterations: usize,
    /// Set when the basis is rank deficient; `beta` is then the
    /// minimum-norm representative.
    pub degenerate: bool,
    /// Observations interpolated exactly by the fit (the LP basis, or the
    /// pinned set of the ridge solver). Usable as a warm start.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub active: Vec<usize>,
    /// Objective value at each solver iterate.
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

impl QuantileFit {
    pub fn predict(&self, phi: &[f64]) -> f64 {
        dot(&self.beta, phi)
    }
}

/// Minimizes (1/n)Σ ρ_τ(S_i − Φ_iᵀβ) + (ridge/2)‖β‖².
pub fn fit_quantile_regression(
    x: &Design,
    s: &[f64],
    tau: f64,
    ridge: f64,
    opts: &SolverOptions,
) -> Result<QuantileFit> {
    validate(x, s, tau, ridge)?;
    if x.nrows() == 0 {
        return Err(CfcError::domain("quantile regression needs at least one observation"));
    }
    let problem = PinballProblem {
        x,
        y: s,
        weight: 1.0 / x.nrows() as f64,
        tau,
        linear: None,
        ridge,
        tiebreak: None,
    };
    match solve_pinball(&problem, None, opts)? {
        Solved::Fit(fit, _) => Ok(fit),
        Solved::Unbounded => Err(CfcError::Solver {
            method: "quantile-regression".into(),
            message: "objective unbounded".into(),
        }),
    }
}

/// The augmented fit: calibration terms plus one term ρ_τ(s − φᵀβ), all
/// weighted 1/(N+1), plus the ridge term. Among multiple minimizers the one
/// with the smallest fitted value φᵀβ is returned.
pub fn fit_augmented(
    x_cal: &Design,
    s_cal: &[f64],
    phi_test: &[f64],
    s: f64,
    tau: f64,
    ridge: f64,
    opts: &SolverOptions,
) -> Result<QuantileFit> {
    validate(x_cal, s_cal, tau, ridge)?;
    if phi_test.len() != x_cal.ncols() || phi_test.iter().any(|v| !v.is_finite()) {
        return Err(CfcError::domain("test basis vector has wrong length or non-finite entries"));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(CfcError::domain(format!("imputed score {s} outside [0,1]")));
    }
    let x = x_cal.with_row(phi_test)?;
    let mut y = Vec::with_capacity(s_cal.len() + 1);
    y.extend_from_slice(s_cal);
    y.push(s);
    let problem = PinballProblem {
        x: &x,
        y: &y,
        weight: 1.0 / x.nrows() as f64,
        tau,
        linear: None,
        ridge,
        tiebreak: Some(phi_test),
    };
    match solve_pinball(&problem, None, opts)? {
        Solved::Fit(fit, _) => Ok(fit),
        Solved::Unbounded => Err(CfcError::Solver {
            method: "augmented-quantile-regression".into(),
            message: "objective unbounded".into(),
        }),
    }
}

/// Mean pinball loss of `beta` on (x, s) plus the ridge term.
pub fn regression_objective(x: &Design, s: &[f64], beta: &[f64], tau: f64, ridge: f64) -> f64 {
    let n = x.nrows().max(1) as f64;
    let loss: f64 = x.rows().zip(s).map(|(row, &y)| pinball(y - dot(row, beta), tau)).sum();
    loss / n + 0.5 * ridge * dot(beta, beta)
}

fn validate(x: &Design, s: &[f64], tau: f64, ridge: f64) -> Result<()> {
    check_tau(tau)?;
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(CfcError::domain(format!("ridge weight {ridge} must be finite and ≥ 0")));
    }
    if s.len() != x.nrows() {
        return Err(CfcError::domain(format!(
            "{} scores for {} basis rows",
            s.len(),
            x.nrows()
        )));
    }
    if !x.is_finite() {
        return Err(CfcError::domain("basis has non-finite entries"));
    }
    if let Some(bad) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(CfcError::domain(format!("score {bad} outside [0,1]")));
    }
    Ok(())
}

/// General form solved internally:
/// `weight·Σ ρ_τ(y_i − x_iᵀβ) + linearᵀβ + (ridge/2)‖β‖²`,
/// with optional lexicographic tie-break minimizing `tiebreakᵀβ`.
pub(crate) struct PinballProblem<'a> {
    pub x: &'a Design,
    pub y: &'a [f64],
    pub weight: f64,
    pub tau: f64,
    pub linear: Option<&'a [f64]>,
    pub ridge: f64,
    pub tiebreak: Option<&'a [f64]>,
}

pub(crate) enum Solved {
    Fit(QuantileFit, Option<Certificate>),
    Unbounded,
}

/// splitmix64 finalizer mapped to [-0.5, 0.5).
fn jitter(i: usize) -> f64 {
    let mut z = (i as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

const JITTER_SCALE: f64 = 1e-9;

/// Orthonormal basis of the row space of `x` (d×r, column-major in a
/// DMatrix) when `x` is rank deficient; `None` when it has full column rank.
fn row_space(x: &Design, tol: f64) -> Option<DMatrix<f64>> {
    let d = x.ncols();
    let mut gram = DMatrix::<f64>::zeros(d, d);
    for row in x.rows() {
        for a in 0..d {
            for b in 0..d {
                gram[(a, b)] += row[a] * row[b];
            }
        }
    }
    let eig = SymmetricEigen::new(gram);
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..d)
        .filter(|&k| eig.eigenvalues[k] > tol * max.max(f64::MIN_POSITIVE))
        .collect();
    if keep.len() == d {
        return None;
    }
    let mut keep = keep;
    keep.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Some(DMatrix::from_fn(d, keep.len(), |i, j| {
        eig.eigenvectors[(i, keep[j])]
    }))
}

pub(crate) fn solve_pinball(
    p: &PinballProblem<'_>,
    warm: Option<&QuantileFit>,
    opts: &SolverOptions,
) -> Result<Solved> {
    let d = p.x.ncols();
    let zeros = vec![0.0; d];
    let linear = p.linear.unwrap_or(&zeros);
    let y_jit: Vec<f64> = p
        .y
        .iter()
        .enumerate()
        .map(|(i, &y)| y + JITTER_SCALE * jitter(i))
        .collect();

    let Some(z) = row_space(p.x, opts.tol.min(1e-10)) else {
        return solve_full_rank(p, p.x, &y_jit, linear, p.tiebreak, warm, opts)
            .map(|s| match s {
                Solved::Fit(mut fit, cert) => {
                    fit.objective = full_objective(p, &fit.beta);
                    Solved::Fit(fit, cert)
                }
                other => other,
            });
    };

    // Rank deficient: solve in row-space coordinates γ with β = Zγ (+ a
    // null-space part fixed by the ridge term).
    let r = z.ncols();
    let project = |v: &[f64]| -> Vec<f64> {
        (0..r).map(|j| (0..d).map(|i| z[(i, j)] * v[i]).sum()).collect()
    };
    let lin_r = project(linear);
    let lin_null: Vec<f64> = (0..d)
        .map(|i| linear[i] - (0..r).map(|j| z[(i, j)] * lin_r[j]).sum::<f64>())
        .collect();
    let null_norm = dot(&lin_null, &lin_null).sqrt();
    if p.ridge == 0.0 && null_norm > 1e-12 {
        return Ok(Solved::Unbounded);
    }
    let null_part: Vec<f64> = if p.ridge > 0.0 {
        lin_null.iter().map(|v| -v / p.ridge).collect()
    } else {
        vec![0.0; d]
    };
    let lift = |gamma: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|i| (0..r).map(|j| z[(i, j)] * gamma[j]).sum::<f64>() + null_part[i])
            .collect()
    };

    let beta_r: (Vec<f64>, Vec<usize>, usize, Vec<f64>) = if r == 0 {
        (Vec::new(), Vec::new(), 0, Vec::new())
    } else {
        let mut data = Vec::with_capacity(p.x.nrows() * r);
        for row in p.x.rows() {
            data.extend(project(row));
        }
        let xr = Design::new(p.x.nrows(), r, data)?;
        let tb_r = p.tiebreak.map(project);
        match solve_full_rank(p, &xr, &y_jit, &lin_r, tb_r.as_deref(), None, opts)? {
            Solved::Fit(fit, _) => (fit.beta, fit.active, fit.iterations, fit.objective_trace),
            Solved::Unbounded => return Ok(Solved::Unbounded),
        }
    };
    let beta = lift(&beta_r.0);
    let fit = QuantileFit {
        objective: full_objective(p, &beta),
        beta,
        tau: p.tau,
        ridge: p.ridge,
        iterations: beta_r.2,
        degenerate: true,
        active: beta_r.1,
        objective_trace: beta_r.3,
    };
    Ok(Solved::Fit(fit, None))
}

fn full_objective(p: &PinballProblem<'_>, beta: &[f64]) -> f64 {
    let loss: f64 = p
        .x
        .rows()
        .zip(p.y)
        .map(|(row, &y)| pinball(y - dot(row, beta), p.tau))
        .sum();
    let linear = p.linear.map_or(0.0, |c| dot(c, beta));
    p.weight * loss + linear + 0.5 * p.ridge * dot(beta, beta)
}

fn solve_full_rank(
    p: &PinballProblem<'_>,
    x: &Design,
    y_jit: &[f64],
    linear: &[f64],
    tiebreak: Option<&[f64]>,
    warm: Option<&QuantileFit>,
    opts: &SolverOptions,
) -> Result<Solved> {
    let r = x.ncols();
    if p.ridge == 0.0 {
        let lp = vertex::LinearPinball {
            x,
            y: y_jit,
            weight: p.weight,
            tau: p.tau,
            linear,
            tiebreak,
        };
        let warm_basis = warm.map(|w| w.active.as_slice());
        return Ok(match vertex::solve(&lp, warm_basis, opts.max_iter)? {
            vertex::LpOutcome::Unbounded => Solved::Unbounded,
            vertex::LpOutcome::Optimal(v) => {
                let beta = interpolate(x, &v.basis, p.y)?;
                let fit = QuantileFit {
                    objective: f64::NAN,
                    beta,
                    tau: p.tau,
                    ridge: 0.0,
                    iterations: v.iterations,
                    degenerate: false,
                    active: v.basis,
                    objective_trace: v.trace,
                };
                Solved::Fit(fit, Some(v.certificate))
            }
        });
    }

    let rp = ridge::RidgePinball {
        x,
        y: y_jit,
        weight: p.weight,
        tau: p.tau,
        linear,
        ridge: p.ridge,
    };
    let start = warm
        .filter(|w| w.beta.len() == r && w.ridge > 0.0)
        .map(|w| (w.beta.as_slice(), w.active.as_slice()));
    let sol = ridge::solve(&rp, start, opts.max_iter)?;
    // recompute from the final pattern with the original targets
    let polished = ridge::RidgePinball { y: p.y, ..rp };
    let beta = ridge::pattern_solution(&polished, y_jit, &sol.beta, &sol.active)
        .unwrap_or(sol.beta);
    Ok(Solved::Fit(
        QuantileFit {
            objective: f64::NAN,
            beta,
            tau: p.tau,
            ridge: p.ridge,
            iterations: sol.iterations,
            degenerate: false,
            active: sol.active,
            objective_trace: sol.trace,
        },
        None,
    ))
}

/// β = X_B⁻¹ y_B.
pub(crate) fn interpolate(x: &Design, basis: &[usize], y: &[f64]) -> Result<Vec<f64>> {
    let r = x.ncols();
    let mut sorted = basis.to_vec();
    sorted.sort_unstable();
    let m = DMatrix::from_fn(r, r, |i, j| x.row(sorted[i])[j]);
    let rhs = nalgebra::DVector::from_fn(r, |i, _| y[sorted[i]]);
    m.lu()
        .solve(&rhs)
        .map(|v| v.iter().copied().collect())
        .ok_or_else(|| CfcError::Solver {
            method: "pinball-lp".into(),
            message: "singular final basis".into(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinball_examples() {
        assert!((pinball_loss(0.5, 0.9).unwrap() - 0.45).abs() < 1e-15);
        assert!((pinball_loss(-0.5, 0.9).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(pinball_loss(0.0, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn pinball_domain_errors() {
        assert!(pinball_loss(f64::NAN, 0.5).is_err());
        assert!(pinball_loss(f64::INFINITY, 0.5).is_err());
        assert!(pinball_loss(0.1, 0.0).is_err());
        assert!(pinball_loss(0.1, 1.0).is_err());
    }

    #[test]
    fn constant_data_gives_constant_fit() {
        let x = Design::intercept(6);
        let s = vec![0.37; 6];
        for tau in [0.1, 0.5, 0.9] {
            let fit = fit_quantile_regression(&x, &s, tau, 0.0, &Default::default()).unwrap();
            assert_eq!(fit.beta, vec![0.37]);
        }
    }

    #[test]
    fn interpolating_line_is_recovered() {
        let t: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let rows: Vec<[f64; 2]> = t.iter().map(|&t| [1.0, t]).collect();
        let x = Design::from_rows(&rows).unwrap();
        let s: Vec<f64> = t.iter().map(|t| 0.2 + 0.5 * t).collect();
        for tau in [0.2, 0.5, 0.95] {
            let fit = fit_quantile_regression(&x, &s, tau, 0.0, &Default::default()).unwrap();
            assert!((fit.beta[0] - 0.2).abs() < 1e-12, "{:?}", fit.beta);
            assert!((fit.beta[1] - 0.5).abs() < 1e-12, "{:?}", fit.beta);
            assert!(fit.objective.abs() < 1e-12);
        }
    }

    #[test]
    fn augmented_alone_returns_imputed_score() {
        let x = Design::empty(1);
        for s in [0.0, 0.3, 1.0] {
            for tau in [0.1, 0.9] {
                let fit = fit_augmented(&x, &[], &[1.0], s, tau, 0.0, &Default::default()).unwrap();
                assert_eq!(fit.beta, vec![s]);
            }
        }
    }

    #[test]
    fn rank_deficient_basis_is_flagged() {
        // second column duplicates the intercept
        let rows: Vec<[f64; 2]> = (0..7).map(|_| [1.0, 1.0]).collect();
        let x = Design::from_rows(&rows).unwrap();
        let s = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
        let fit = fit_quantile_regression(&x, &s, 0.5, 0.0, &Default::default()).unwrap();
        assert!(fit.degenerate);
        // minimum norm splits the level evenly across both columns
        assert!((fit.beta[0] - 0.2).abs() < 1e-9, "{:?}", fit.beta);
        assert!((fit.beta[1] - 0.2).abs() < 1e-9, "{:?}", fit.beta);
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let x = Design::from_rows(&[[1.0, f64::NAN]]).unwrap();
        assert!(fit_quantile_regression(&x, &[0.5], 0.5, 0.0, &Default::default()).is_err());
        let x = Design::intercept(2);
        assert!(fit_quantile_regression(&x, &[0.5, 1.5], 0.5, 0.0, &Default::default()).is_err());
        assert!(fit_quantile_regression(&x, &[0.5, 0.2], 0.5, -1.0, &Default::default()).is_err());
    }

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(seed: u64, n: usize, d: usize) -> (Design, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut s = Vec::new();
        for _ in 0..n {
            let t: f64 = rng.random();
            let row: Vec<f64> = (0..d).map(|k| t.powi(k as i32)).collect();
            s.push((0.3 * t + 0.5 * rng.random::<f64>()).clamp(0.0, 1.0));
            rows.push(row);
        }
        (Design::from_rows(&rows).unwrap(), s)
    }

    fn subsets(n: usize, r: usize) -> Vec<Vec<usize>> {
        if r == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for last in r - 1..n {
            for mut sub in subsets(last, r - 1) {
                sub.push(last);
                out.push(sub);
            }
        }
        out
    }

    /// Minimum of the LP objective over all interpolating bases.
    fn vertex_oracle(x: &Design, s: &[f64], tau: f64) -> f64 {
        let r = x.ncols();
        let mut best = f64::INFINITY;
        for sub in subsets(x.nrows(), r) {
            let m = DMatrix::from_fn(r, r, |i, j| x.row(sub[i])[j]);
            if m.determinant().abs() < 1e-12 {
                continue;
            }
            let rhs = nalgebra::DVector::from_fn(r, |i, _| s[sub[i]]);
            let beta: Vec<f64> = m.lu().solve(&rhs).unwrap().iter().copied().collect();
            best = best.min(regression_objective(x, s, &beta, tau, 0.0));
        }
        best
    }

    /// Lower bound on the ridge optimum from the box-constrained dual,
    /// maximized by projected accelerated gradient ascent.
    fn ridge_dual_bound(x: &Design, s: &[f64], tau: f64, mu: f64) -> f64 {
        let n = x.nrows();
        let d = x.ncols();
        let w = 1.0 / n as f64;
        let dual = |theta: &[f64]| -> f64 {
            let mut v = vec![0.0; d];
            for (row, t) in x.rows().zip(theta) {
                for k in 0..d {
                    v[k] += w * row[k] * t;
                }
            }
            w * dot(theta, s) - dot(&v, &v) / (2.0 * mu)
        };
        let lip = {
            let mut g = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    g[(i, j)] = w * w * dot(x.row(i), x.row(j)) / mu;
                }
            }
            SymmetricEigen::new(g).eigenvalues.max()
        };
        let proj = |v: f64| v.clamp(tau - 1.0, tau);
        let mut theta = vec![0.0; n];
        let mut prev = theta.clone();
        let mut best = dual(&theta);
        for k in 1..200_000 {
            let mom = (k as f64 - 1.0) / (k as f64 + 2.0);
            let yv: Vec<f64> = theta.iter().zip(&prev).map(|(a, b)| a + mom * (a - b)).collect();
            let mut v = vec![0.0; d];
            for (row, t) in x.rows().zip(&yv) {
                for c in 0..d {
                    v[c] += w * row[c] * t;
                }
            }
            let next: Vec<f64> = (0..n)
                .map(|i| proj(yv[i] + (w * s[i] - w * dot(x.row(i), &v) / mu) / lip))
                .collect();
            prev = std::mem::replace(&mut theta, next);
            if k % 1000 == 0 {
                best = best.max(dual(&theta));
            }
        }
        best.max(dual(&theta))
    }

    #[test]
    fn lp_matches_exhaustive_vertices() {
        for seed in 0..20 {
            for d in 1..=3 {
                let (x, s) = random_problem(seed, 9, d);
                for tau in [0.1, 0.5, 0.85] {
                    let fit = fit_quantile_regression(&x, &s, tau, 0.0, &Default::default()).unwrap();
                    let oracle = vertex_oracle(&x, &s, tau);
                    assert!(
                        (fit.objective - oracle).abs() < 1e-10,
                        "seed {seed} d {d} tau {tau}: {} vs {oracle}",
                        fit.objective
                    );
                }
            }
        }
    }

    #[test]
    fn ridge_closes_duality_gap() {
        for seed in 0..6 {
            let (x, s) = random_problem(100 + seed, 12, 3);
            for (tau, mu) in [(0.5, 1e-2), (0.9, 1e-3), (0.2, 0.1)] {
                let fit = fit_quantile_regression(&x, &s, tau, mu, &Default::default()).unwrap();
                let lower = ridge_dual_bound(&x, &s, tau, mu);
                assert!(fit.objective >= lower - 1e-12);
                assert!(
                    fit.objective - lower < 1e-7,
                    "seed {seed} tau {tau} mu {mu}: gap {}",
                    fit.objective - lower
                );
            }
        }
    }

    #[test]
    fn augmented_intercept_is_order_statistic() {
        let s_cal = [0.42, 0.05, 0.77, 0.31, 0.9, 0.12, 0.64];
        let n = s_cal.len();
        let x = Design::intercept(n);
        for tau in [0.1, 0.3, 0.5, 0.8] {
            for s in [0.0, 0.2, 0.5, 0.95] {
                let fit = fit_augmented(&x, &s_cal, &[1.0], s, tau, 0.0, &Default::default()).unwrap();
                let mut all = s_cal.to_vec();
                all.push(s);
                all.sort_by(f64::total_cmp);
                let k = (tau * (n + 1) as f64).ceil() as usize;
                assert_eq!(fit.beta[0], all[k - 1], "tau {tau} s {s}");
            }
        }
    }

    #[test]
    fn objective_trace_is_monotone() {
        let (x, s) = random_problem(7, 60, 3);
        for mu in [0.0, 1e-3] {
            let fit = fit_quantile_regression(&x, &s, 0.7, mu, &Default::default()).unwrap();
            for w in fit.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{:?}", w);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lp_fit_not_beaten_by_perturbation(seed in 0u64..10_000, tau in 0.05f64..0.95, d in 1usize..4) {
            let (x, s) = random_problem(seed, 15, d);
            let fit = fit_quantile_regression(&x, &s, tau, 0.0, &Default::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            for _ in 0..20 {
                let b: Vec<f64> = fit.beta.iter().map(|v| v + 1e-3 * (rng.random::<f64>() - 0.5)).collect();
                prop_assert!(regression_objective(&x, &s, &b, tau, 0.0) >= fit.objective - 1e-12);
            }
        }

        #[test]
        fn ridge_fit_not_beaten_by_perturbation(seed in 0u64..10_000, tau in 0.05f64..0.95, mu in 1e-4f64..1.0) {
            let (x, s) = random_problem(seed, 15, 3);
            let fit = fit_quantile_regression(&x, &s, tau, mu, &Default::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234);
            for _ in 0..20 {
                let b: Vec<f64> = fit.beta.iter().map(|v| v + 1e-3 * (rng.random::<f64>() - 0.5)).collect();
                prop_assert!(regression_objective(&x, &s, &b, tau, mu) >= fit.objective - 1e-12);
            }
        }
    }
}
