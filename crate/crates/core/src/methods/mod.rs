//! Calibration and inference rules: TopK, ICP, Learnt CP, CFC, CFC-PAC and
//! the synthetic oracle, with full or truncated prediction sets.

mod cfc;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{success_score, PromptRecord, SIGNAL_DIFFICULTY};
use crate::error::{CfcError, Result};
use crate::features::FittedFeatureMap;
use crate::quantile::{fit_quantile_regression, Design, SolverOptions};
use crate::synth::{oracle_threshold, SynthParams};

pub use cfc::{cfc_accept_exact, cfc_gmap, cfc_threshold, CfcEvaluator};

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Topk,
    Icp,
    LearntCp,
    Cfc,
    CfcPac,
    Oracle,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Topk => "topk",
            Method::Icp => "icp",
            Method::LearntCp => "learnt_cp",
            Method::Cfc => "cfc",
            Method::CfcPac => "cfc_pac",
            Method::Oracle => "oracle",
        }
    }

    pub fn is_cfc(self) -> bool {
        matches!(self, Method::Cfc | Method::CfcPac)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetMode {
    Full,
    Truncated,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSolver {
    /// Closed-form fixed point from one linear-term fit per prompt.
    #[default]
    Exact,
    /// Uniform grid over [0,1] refined by bisection.
    Grid,
}

/// A method together with its set mode, written as a label such as
/// `icp`, `cfc` (truncated) or `cfc-pac-full`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MethodSpec {
    pub method: Method,
    pub set_mode: SetMode,
}

impl MethodSpec {
    pub fn new(method: Method, set_mode: SetMode) -> Self {
        MethodSpec { method, set_mode }
    }

    pub fn label(&self) -> String {
        let base = match self.method {
            Method::CfcPac => "cfc-pac",
            m => m.as_str(),
        };
        match (self.method.is_cfc(), self.set_mode) {
            (true, SetMode::Full) => format!("{base}-full"),
            (false, SetMode::Truncated) => format!("{base}-truncated"),
            _ => base.to_string(),
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for MethodSpec {
    type Err = CfcError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let (base, suffix) = if let Some(b) = norm.strip_suffix("-full") {
            (b, Some(SetMode::Full))
        } else if let Some(b) = norm.strip_suffix("-truncated") {
            (b, Some(SetMode::Truncated))
        } else {
            (norm.as_str(), None)
        };
        let method = match base {
            "topk" => Method::Topk,
            "icp" => Method::Icp,
            "learnt-cp" | "learntcp" => Method::LearntCp,
            "cfc" => Method::Cfc,
            "cfc-pac" | "cfc-p" => Method::CfcPac,
            "oracle" => Method::Oracle,
            _ => return Err(CfcError::domain(format!("unknown method `{s}`"))),
        };
        let default_mode = if method.is_cfc() {
            SetMode::Truncated
        } else {
            SetMode::Full
        };
        Ok(MethodSpec::new(method, suffix.unwrap_or(default_mode)))
    }
}

impl TryFrom<String> for MethodSpec {
    type Error = CfcError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MethodSpec> for String {
    fn from(m: MethodSpec) -> String {
        m.label()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub alpha: f64,
    /// Ridge weight of the CFC-PAC fits.
    pub pac_ridge: f64,
    /// Ridge weight of the Learnt CP fit.
    pub learnt_cp_ridge: f64,
    pub delta: f64,
    pub c4: f64,
    pub threshold_solver: ThresholdSolver,
    pub grid_points: usize,
    pub grid_width: f64,
    pub solver: SolverOptions,
    /// Generator parameters, required by the oracle method.
    pub generator: Option<SynthParams>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            alpha: 0.1,
            pac_ridge: 1e-3,
            learnt_cp_ridge: 0.0,
            delta: 0.9,
            c4: 1.0,
            threshold_solver: ThresholdSolver::Exact,
            grid_points: 256,
            grid_width: 1e-5,
            solver: SolverOptions::default(),
            generator: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub artifact_version: u32,
    pub method: Method,
    pub set_mode: SetMode,
    pub alpha: f64,
    pub alpha_eff: f64,
    pub epsilon: f64,
    pub ridge: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c4: Option<f64>,
    pub feature_map: FittedFeatureMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cal_basis: Option<Design>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cal_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitted_beta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub threshold_solver: ThresholdSolver,
    pub grid_points: usize,
    pub grid_width: f64,
    pub solver: SolverOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SynthParams>,
}

impl CalibrationArtifact {
    pub fn spec(&self) -> MethodSpec {
        MethodSpec::new(self.method, self.set_mode)
    }

    /// Quantile level of every fit: 1 − α_eff.
    pub fn tau(&self) -> f64 {
        1.0 - self.alpha_eff
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let artifact: CalibrationArtifact = serde_json::from_str(text)
            .map_err(|e| CfcError::Schema(format!("calibration artifact: {e}")))?;
        if artifact.artifact_version != ARTIFACT_VERSION {
            return Err(CfcError::Schema(format!(
                "artifact_version {} is not supported (expected {ARTIFACT_VERSION})",
                artifact.artifact_version
            )));
        }
        Ok(artifact)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    /// Accepted candidate indices, ascending.
    pub accepted: Vec<usize>,
    pub threshold: f64,
    pub abstained: bool,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.accepted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accepted.is_empty()
    }
}

/// k-th smallest calibration score, k = ⌈(n+1)(1−α)⌉; 1 when k > n.
pub fn calibrate_icp(cal_success: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let n = cal_success.len();
    if n == 0 {
        return Err(CfcError::domain("ICP needs at least one calibration score"));
    }
    let k = ((n + 1) as f64 * (1.0 - alpha)).ceil() as usize;
    if k > n {
        return Ok(1.0);
    }
    let mut sorted = cal_success.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k.max(1) - 1])
}

/// Candidate indices ordered best-first (ascending score, then sample order).
fn best_first(record: &PromptRecord) -> Vec<usize> {
    let mut order: Vec<usize> = (0..record.candidates.len()).collect();
    order.sort_by(|&a, &b| {
        record.candidates[a]
            .score
            .total_cmp(&record.candidates[b].score)
            .then(a.cmp(&b))
    });
    order
}

/// Smallest k whose best-scored prefix covers ≥ 1−α of calibration
/// prompts; the common budget M when unreachable.
pub fn calibrate_topk(cal: &[PromptRecord], alpha: f64) -> Result<usize> {
    check_alpha(alpha)?;
    let m = cal
        .iter()
        .map(|r| r.candidates.len())
        .min()
        .ok_or_else(|| CfcError::domain("TopK needs calibration records"))?;
    // rank (1-based) of the best-placed correct candidate per prompt
    let mut hits = vec![0usize; m + 1];
    for r in cal {
        let order = best_first(r);
        if let Some(pos) = order.iter().position(|&i| r.candidates[i].correct) {
            if pos < m {
                hits[pos + 1] += 1;
            }
        }
    }
    let target = (1.0 - alpha) * cal.len() as f64;
    let mut covered = 0usize;
    for (k, &h) in hits.iter().enumerate().skip(1) {
        covered += h;
        if covered as f64 >= target {
            return Ok(k);
        }
    }
    Ok(m)
}

/// Plain quantile regression at τ = 1−α; deployed threshold clamp(Φᵀβ, 0, 1).
pub fn calibrate_learnt_cp(
    cal_basis: &Design,
    cal_scores: &[f64],
    alpha: f64,
    ridge: f64,
    opts: &SolverOptions,
) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if cal_basis.nrows() < cal_basis.ncols() {
        return Err(CfcError::domain(format!(
            "Learnt CP needs N ≥ d, got N={} d={}",
            cal_basis.nrows(),
            cal_basis.ncols()
        )));
    }
    let fit = fit_quantile_regression(cal_basis, cal_scores, 1.0 - alpha, ridge, opts).map_err(
        |e| match e {
            CfcError::Solver { message, .. } => CfcError::Solver {
                method: Method::LearntCp.as_str().into(),
                message,
            },
            other => other,
        },
    )?;
    Ok(fit.beta)
}

/// ε_N(δ) = c4·sqrt(ln(1/δ) / (2N)).
pub fn pac_slack(n: usize, delta: f64, c4: f64) -> Result<f64> {
    if n == 0 {
        return Err(CfcError::domain("PAC slack needs N ≥ 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CfcError::domain(format!("delta {delta} outside (0,1)")));
    }
    if !(c4 > 0.0 && c4.is_finite()) {
        return Err(CfcError::domain("c4 must be positive"));
    }
    Ok(c4 * ((1.0 / delta).ln() / (2.0 * n as f64)).sqrt())
}

const ALPHA_EFF_FLOOR: f64 = 1e-4;

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CfcError::domain(format!("alpha {alpha} outside (0,1)")))
    }
}

/// Calibrates one method on calibration records with an already fitted
/// feature map.
pub fn calibrate(
    spec: MethodSpec,
    feature_map: &FittedFeatureMap,
    cal: &[PromptRecord],
    opts: &CalibrationOptions,
) -> Result<CalibrationArtifact> {
    let alpha = opts.alpha;
    check_alpha(alpha)?;
    if cal.is_empty() {
        return Err(CfcError::domain("calibration set is empty"));
    }
    let mut art = CalibrationArtifact {
        artifact_version: ARTIFACT_VERSION,
        method: spec.method,
        set_mode: spec.set_mode,
        alpha,
        alpha_eff: alpha,
        epsilon: 0.0,
        ridge: 0.0,
        delta: None,
        c4: None,
        feature_map: feature_map.clone(),
        cal_basis: None,
        cal_scores: None,
        fitted_beta: None,
        global_threshold: None,
        k: None,
        threshold_solver: opts.threshold_solver,
        grid_points: opts.grid_points,
        grid_width: opts.grid_width,
        solver: opts.solver,
        generator: None,
    };
    let scores = || cal.iter().map(|r| success_score(r).value).collect::<Vec<_>>();
    match spec.method {
        Method::Topk => art.k = Some(calibrate_topk(cal, alpha)?),
        Method::Icp => art.global_threshold = Some(calibrate_icp(&scores(), alpha)?),
        Method::LearntCp => {
            let x = feature_map.design(cal)?;
            art.ridge = opts.learnt_cp_ridge;
            art.fitted_beta = Some(calibrate_learnt_cp(
                &x,
                &scores(),
                alpha,
                art.ridge,
                &opts.solver,
            )?);
        }
        Method::Cfc | Method::CfcPac => {
            if spec.method == Method::CfcPac {
                let eps = pac_slack(cal.len(), opts.delta, opts.c4)?;
                art.epsilon = eps;
                art.delta = Some(opts.delta);
                art.c4 = Some(opts.c4);
                art.ridge = opts.pac_ridge;
                let raw = (alpha - eps).max(0.0);
                art.alpha_eff = if raw <= 0.0 {
                    let floor = ALPHA_EFF_FLOOR.min(alpha);
                    log::warn!("alpha_eff {raw} is not positive; calibrating at {floor}");
                    floor
                } else {
                    raw
                };
            }
            if !(art.ridge >= 0.0 && art.ridge.is_finite()) {
                return Err(CfcError::domain("ridge must be finite and ≥ 0"));
            }
            art.cal_basis = Some(feature_map.design(cal)?);
            art.cal_scores = Some(scores());
        }
        Method::Oracle => {
            let params = opts.generator.ok_or_else(|| {
                CfcError::domain("the oracle method needs synthetic generator parameters")
            })?;
            params.validate()?;
            art.generator = Some(params);
        }
    }
    Ok(art)
}

/// Indices with score ≤ threshold, in sample order; truncated mode stops
/// right after the first accepted candidate attaining the accepted minimum.
pub fn threshold_set(record: &PromptRecord, threshold: f64, set_mode: SetMode) -> PredictionSet {
    let mut accepted: Vec<usize> = record
        .candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.score <= threshold)
        .map(|(i, _)| i)
        .collect();
    if set_mode == SetMode::Truncated && !accepted.is_empty() {
        let best = accepted
            .iter()
            .map(|&i| record.candidates[i].score)
            .fold(f64::INFINITY, f64::min);
        let stop = accepted
            .iter()
            .position(|&i| record.candidates[i].score == best)
            .expect("minimum is attained");
        accepted.truncate(stop + 1);
    }
    PredictionSet {
        abstained: accepted.is_empty(),
        accepted,
        threshold,
    }
}

/// Per-worker inference state for one artifact. Holds solver caches for
/// CFC; everything it returns depends only on the artifact and the record.
pub struct Predictor<'a> {
    artifact: &'a CalibrationArtifact,
    cfc: Option<CfcEvaluator<'a>>,
}

impl<'a> Predictor<'a> {
    pub fn new(artifact: &'a CalibrationArtifact) -> Result<Self> {
        let cfc = if artifact.method.is_cfc() {
            Some(CfcEvaluator::new(artifact)?)
        } else {
            None
        };
        Ok(Predictor { artifact, cfc })
    }

    pub fn artifact(&self) -> &CalibrationArtifact {
        self.artifact
    }

    /// Deployed threshold λ̂(x) for the record.
    pub fn threshold(&mut self, record: &PromptRecord) -> Result<f64> {
        let art = self.artifact;
        match art.method {
            Method::Topk => {
                let k = art.k.ok_or_else(|| missing("k"))?;
                let order = best_first(record);
                let k = k.min(order.len()).max(1);
                Ok(record.candidates[order[k - 1]].score)
            }
            Method::Icp => art.global_threshold.ok_or_else(|| missing("global_threshold")),
            Method::LearntCp => {
                let beta = art.fitted_beta.as_ref().ok_or_else(|| missing("fitted_beta"))?;
                let phi = art.feature_map.transform(record)?;
                check_dim(&phi, beta.len())?;
                Ok(crate::quantile::dot(&phi, beta).clamp(0.0, 1.0))
            }
            Method::Cfc | Method::CfcPac => {
                let phi = art.feature_map.transform(record)?;
                self.cfc.as_mut().expect("built for CFC").threshold(&phi)
            }
            Method::Oracle => {
                let params = art.generator.as_ref().ok_or_else(|| missing("generator"))?;
                let t = record.signal(SIGNAL_DIFFICULTY)?;
                oracle_threshold(t.clamp(0.0, 1.0), art.alpha, params)
            }
        }
    }

    pub fn predict(&mut self, record: &PromptRecord) -> Result<PredictionSet> {
        let threshold = self.threshold(record)?;
        if self.artifact.method == Method::Topk {
            // exactly the k best-scored candidates, whatever the ties
            let k = self.artifact.k.unwrap_or(1).min(record.candidates.len()).max(1);
            let mut accepted = best_first(record);
            accepted.truncate(k);
            accepted.sort_unstable();
            let mut set = PredictionSet {
                accepted,
                threshold,
                abstained: false,
            };
            if self.artifact.set_mode == SetMode::Truncated {
                let rec = restrict(record, &set.accepted);
                set = threshold_set(&rec, threshold, SetMode::Truncated);
                set.accepted = set.accepted.iter().map(|&i| rec.candidates[i].index).collect();
            }
            return Ok(set);
        }
        Ok(threshold_set(record, threshold, self.artifact.set_mode))
    }
}

fn restrict(record: &PromptRecord, keep: &[usize]) -> PromptRecord {
    let mut out = record.clone();
    out.candidates = keep.iter().map(|&i| record.candidates[i].clone()).collect();
    out
}

fn missing(field: &str) -> CfcError {
    CfcError::Schema(format!("calibration artifact lacks `{field}`"))
}

fn check_dim(phi: &[f64], d: usize) -> Result<()> {
    if phi.len() == d {
        Ok(())
    } else {
        Err(CfcError::Schema(format!(
            "feature map produced {} columns, artifact expects {d}",
            phi.len()
        )))
    }
}
