//! CFC thresholds.
//!
//! With g(s) = φᵀβ_s from the augmented fit, let β_h minimize the
//! calibration loss minus (τ/(N+1))·φᵀβ (plus the ridge term), choosing the
//! smallest φᵀβ among ties, and g_h = φᵀβ_h. Since ρ_τ(u) ≥ τu with equality
//! for u ≥ 0, β_h is also an augmented minimizer for every s > g_h, which
//! gives g(s) ≤ g_h < s there; and g(s) < s forces β_s to minimize the same
//! shifted problem, so g(s) ≥ g_h ≥ s whenever s ≤ g_h. Hence
//! {s : s ≤ g(s)} = [0, g_h] ∩ [0, 1] and λ̂ = clamp(g_h, 0, 1), with λ̂ = 1
//! when the shifted problem is unbounded. The grid solver evaluates g
//! directly and is kept as an alternative.

use std::collections::HashMap;

use super::{check_dim, missing, CalibrationArtifact, ThresholdSolver};
use crate::error::{CfcError, Result};
use crate::quantile::{
    dot, solve_pinball, Certificate, Design, PinballProblem, QuantileFit, Solved,
};

const CERTIFICATE_MARGIN: f64 = 1e-9;
const MAX_CACHED_VERTICES: usize = 64;

/// Per-worker CFC evaluator. The caches only memoize results that are
/// functions of (artifact, φ); they never change what is returned.
pub struct CfcEvaluator<'a> {
    art: &'a CalibrationArtifact,
    x: &'a Design,
    y: &'a [f64],
    /// Optimal vertices of the shifted problem with their coefficients.
    vertices: Vec<(Certificate, Vec<f64>)>,
    last_shifted: Option<QuantileFit>,
    augmented: Option<Augmented>,
    memo: HashMap<Vec<u64>, f64>,
}

struct Augmented {
    phi: Vec<f64>,
    x: Design,
    y: Vec<f64>,
    last: Option<QuantileFit>,
}

fn solver_error(art: &CalibrationArtifact, e: CfcError) -> CfcError {
    match e {
        CfcError::Solver { message, .. } => CfcError::Solver {
            method: art.method.as_str().into(),
            message,
        },
        other => other,
    }
}

impl<'a> CfcEvaluator<'a> {
    pub fn new(art: &'a CalibrationArtifact) -> Result<Self> {
        if !art.method.is_cfc() {
            return Err(CfcError::domain(format!(
                "{} artifact has no CFC threshold",
                art.method.as_str()
            )));
        }
        let x = art.cal_basis.as_ref().ok_or_else(|| missing("cal_basis"))?;
        let y = art.cal_scores.as_deref().ok_or_else(|| missing("cal_scores"))?;
        if x.nrows() != y.len() {
            return Err(CfcError::Schema(format!(
                "cal_basis has {} rows but cal_scores has {} entries",
                x.nrows(),
                y.len()
            )));
        }
        Ok(CfcEvaluator {
            art,
            x,
            y,
            vertices: Vec::new(),
            last_shifted: None,
            augmented: None,
            memo: HashMap::new(),
        })
    }

    fn weight(&self) -> f64 {
        1.0 / (self.x.nrows() + 1) as f64
    }

    /// λ̂(φ) using the artifact's threshold solver.
    pub fn threshold(&mut self, phi: &[f64]) -> Result<f64> {
        check_dim(phi, self.x.ncols())?;
        let key: Vec<u64> = phi.iter().map(|v| v.to_bits()).collect();
        if let Some(&t) = self.memo.get(&key) {
            return Ok(t);
        }
        let t = self.threshold_with(phi, self.art.threshold_solver)?;
        self.memo.insert(key, t);
        Ok(t)
    }

    pub fn threshold_with(&mut self, phi: &[f64], solver: ThresholdSolver) -> Result<f64> {
        check_dim(phi, self.x.ncols())?;
        match solver {
            ThresholdSolver::Exact => Ok(match self.shifted_value(phi)? {
                Some(g) => g.clamp(0.0, 1.0),
                None => 1.0,
            }),
            ThresholdSolver::Grid => self.grid_threshold(phi),
        }
    }

    /// g_h = φᵀβ_h, or `None` when the shifted problem is unbounded.
    fn shifted_value(&mut self, phi: &[f64]) -> Result<Option<f64>> {
        let w = self.weight();
        let tau = self.art.tau();
        let linear: Vec<f64> = phi.iter().map(|v| -w * tau * v).collect();
        let ridge = self.art.ridge;
        if ridge == 0.0 {
            if let Some((_, beta)) = self
                .vertices
                .iter()
                .find(|(cert, _)| cert.strictly_optimal_for(&linear, CERTIFICATE_MARGIN))
            {
                return Ok(Some(dot(phi, beta)));
            }
        }
        let problem = PinballProblem {
            x: self.x,
            y: self.y,
            weight: w,
            tau,
            linear: Some(&linear),
            ridge,
            tiebreak: (ridge == 0.0).then_some(phi),
        };
        let solved = solve_pinball(&problem, self.last_shifted.as_ref(), &self.art.solver)
            .map_err(|e| solver_error(self.art, e))?;
        match solved {
            Solved::Unbounded => Ok(None),
            Solved::Fit(fit, cert) => {
                let value = fit.predict(phi);
                if let Some(cert) = cert {
                    if self.vertices.len() == MAX_CACHED_VERTICES {
                        self.vertices.remove(0);
                    }
                    self.vertices.push((cert, fit.beta.clone()));
                }
                self.last_shifted = Some(fit);
                Ok(Some(value))
            }
        }
    }

    /// g(s) = φᵀβ_s from the augmented fit with imputed score s.
    pub fn gmap(&mut self, phi: &[f64], s: f64) -> Result<f64> {
        check_dim(phi, self.x.ncols())?;
        if !(0.0..=1.0).contains(&s) {
            return Err(CfcError::domain(format!("imputed score {s} outside [0,1]")));
        }
        let same = self.augmented.as_ref().is_some_and(|a| a.phi == phi);
        if !same {
            let mut y = self.y.to_vec();
            y.push(s);
            self.augmented = Some(Augmented {
                phi: phi.to_vec(),
                x: self.x.with_row(phi)?,
                y,
                last: None,
            });
        }
        let aug = self.augmented.as_mut().expect("just set");
        *aug.y.last_mut().expect("augmented row") = s;
        let ridge = self.art.ridge;
        let problem = PinballProblem {
            x: &aug.x,
            y: &aug.y,
            weight: 1.0 / aug.x.nrows() as f64,
            tau: 1.0 - self.art.alpha_eff,
            linear: None,
            ridge,
            tiebreak: (ridge == 0.0).then_some(phi),
        };
        let solved = solve_pinball(&problem, aug.last.as_ref(), &self.art.solver)
            .map_err(|e| solver_error(self.art, e))?;
        match solved {
            Solved::Fit(fit, _) => {
                let value = fit.predict(phi);
                aug.last = Some(fit);
                Ok(value)
            }
            Solved::Unbounded => Err(CfcError::Solver {
                method: self.art.method.as_str().into(),
                message: "augmented objective unbounded".into(),
            }),
        }
    }

    fn satisfies(&mut self, phi: &[f64], s: f64) -> Result<bool> {
        Ok(s <= self.gmap(phi, s)?)
    }

    /// Largest satisfying point of a uniform grid, refined by bisection
    /// against the next failing grid point; returns the satisfying end.
    fn grid_threshold(&mut self, phi: &[f64]) -> Result<f64> {
        let k = self.art.grid_points.max(2);
        let width = self.art.grid_width;
        if !(width > 0.0) {
            return Err(CfcError::domain("grid width must be positive"));
        }
        let node = |i: usize| i as f64 / (k - 1) as f64;
        let mut best = None;
        for i in 0..k {
            if self.satisfies(phi, node(i))? {
                best = Some(i);
            }
        }
        let Some(i) = best else {
            log::debug!("no grid point satisfies s ≤ g(s); threshold 0");
            return Ok(0.0);
        };
        if i == k - 1 {
            return Ok(1.0);
        }
        let (mut lo, mut hi) = (node(i), node(i + 1));
        while hi - lo > width {
            let mid = 0.5 * (lo + hi);
            if self.satisfies(phi, mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(lo)
    }

    /// Candidates j with v_j ≤ g(v_j), each checked by its own augmented fit.
    pub fn accept_exact(&mut self, phi: &[f64], scores: &[f64]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for (j, &v) in scores.iter().enumerate() {
            if self.satisfies(phi, v.clamp(0.0, 1.0))? {
                out.push(j);
            }
        }
        Ok(out)
    }
}

pub fn cfc_gmap(art: &CalibrationArtifact, phi: &[f64], s: f64) -> Result<f64> {
    CfcEvaluator::new(art)?.gmap(phi, s)
}

pub fn cfc_threshold(art: &CalibrationArtifact, phi: &[f64]) -> Result<f64> {
    CfcEvaluator::new(art)?.threshold(phi)
}

pub fn cfc_accept_exact(art: &CalibrationArtifact, phi: &[f64], scores: &[f64]) -> Result<Vec<usize>> {
    CfcEvaluator::new(art)?.accept_exact(phi, scores)
}
