//! Synthetic benchmark with a scalar difficulty T ∈ [0,1] and closed-form
//! conditional score distributions.
//!
//! Per prompt: T ~ U[0,1]. Each of the M candidates is correct with
//! probability p(T) = p0 − (p0 − p1)·T. Correct candidates score
//! clamp(Beta(2,5) + shift·T) and incorrect ones clamp(Beta(5,2) + shift·T).
//! Every prompt draws from its own ChaCha stream, so changing n or m does not
//! disturb other prompts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Candidate, PromptRecord, SIGNAL_DIFFICULTY};
use crate::error::{CfcError, Result};

/// Test prompts use streams offset by this constant.
const TEST_STREAM_OFFSET: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub m: usize,
    pub p0: f64,
    pub p1: f64,
    pub score_shift: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            m: 50,
            p0: 0.9,
            p1: 0.3,
            score_shift: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_cal: usize,
    pub n_test: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub params: SynthParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cal: 10_000,
            n_test: 10_000,
            seed: 0,
            params: SynthParams::default(),
        }
    }
}

impl SynthConfig {
    /// Short hex digest of the generator parameters.
    pub fn param_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(CfcError::domain("m must be at least 1"));
        }
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.p0) || !unit(self.p1) || self.p0 <= self.p1 {
            return Err(CfcError::domain(format!(
                "need 0 < p1 < p0 < 1, got p0={} p1={}",
                self.p0, self.p1
            )));
        }
        if !(self.score_shift > 0.0 && self.score_shift.is_finite()) {
            return Err(CfcError::domain("score_shift must be positive"));
        }
        Ok(())
    }

    /// Per-candidate correctness probability at difficulty t.
    pub fn p_correct(&self, t: f64) -> f64 {
        self.p0 - (self.p0 - self.p1) * t
    }

    /// P(V ≤ λ | correct, T=t).
    pub fn correct_cdf(&self, t: f64, lambda: f64) -> f64 {
        shifted_cdf(beta25_cdf, lambda - self.score_shift * t, lambda)
    }

    /// P(V ≤ λ | incorrect, T=t).
    pub fn incorrect_cdf(&self, t: f64, lambda: f64) -> f64 {
        shifted_cdf(beta52_cdf, lambda - self.score_shift * t, lambda)
    }

    fn sample_prompt(&self, id: String, rng: &mut ChaCha8Rng) -> PromptRecord {
        let good = Beta::new(2.0, 5.0).expect("valid beta");
        let bad = Beta::new(5.0, 2.0).expect("valid beta");
        let t: f64 = rng.random();
        let p = self.p_correct(t);
        let candidates = (0..self.m)
            .map(|j| {
                let correct = rng.random::<f64>() < p;
                let base = if correct { good.sample(rng) } else { bad.sample(rng) };
                let score = (base + self.score_shift * t).clamp(0.0, 1.0);
                Candidate::new(j, score, correct)
            })
            .collect();
        let mut rec = PromptRecord::new(id, candidates);
        rec.raw_signals.insert(SIGNAL_DIFFICULTY.into(), t);
        rec.derive_signals();
        rec
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(CfcError::domain(format!("{name} = {v} outside [0,1]")))
    }
}

/// CDF of clamp(B + shift, 0, 1) at λ, given the CDF of B evaluated at λ − shift.
fn shifted_cdf(cdf: fn(f64) -> f64, x: f64, lambda: f64) -> f64 {
    if lambda >= 1.0 {
        1.0
    } else {
        cdf(x)
    }
}

/// I_x(2,5).
fn beta25_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let y = 1.0 - x;
    1.0 - y.powi(6) - 6.0 * x * y.powi(5)
}

/// I_x(5,2).
fn beta52_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    6.0 * x.powi(5) * (1.0 - x) + x.powi(6)
}

pub fn generate(config: &SynthConfig) -> Result<(Vec<PromptRecord>, Vec<PromptRecord>)> {
    config.params.validate()?;
    let width = config.n_cal.max(config.n_test).max(1).to_string().len().max(5);
    let draw = |stream: u64, id: String| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        config.params.sample_prompt(id, &mut rng)
    };
    let cal = (0..config.n_cal)
        .map(|i| draw(i as u64, format!("cal-{i:0width$}")))
        .collect();
    let test = (0..config.n_test)
        .map(|i| draw(TEST_STREAM_OFFSET + i as u64, format!("test-{i:0width$}")))
        .collect();
    Ok((cal, test))
}

/// F_t(λ) = P(S ≤ λ | T=t) = 1 − (1 − p(t)·G_c,t(λ))^M.
pub fn true_f(params: &SynthParams, t: f64, lambda: f64) -> Result<f64> {
    check_unit("t", t)?;
    check_unit("lambda", lambda)?;
    let q = params.p_correct(t) * params.correct_cdf(t, lambda);
    Ok(1.0 - (1.0 - q).powi(params.m as i32))
}

/// G_t(λ) = P(V ≤ λ | T=t) for a single sampled candidate.
pub fn true_g(params: &SynthParams, t: f64, lambda: f64) -> Result<f64> {
    check_unit("t", t)?;
    check_unit("lambda", lambda)?;
    let p = params.p_correct(t);
    Ok(p * params.correct_cdf(t, lambda) + (1.0 - p) * params.incorrect_cdf(t, lambda))
}

/// Smallest λ ∈ [0,1] with `cdf(λ) ≥ level`, by bisection; `cdf` must be
/// nondecreasing with cdf(1) ≥ level.
fn invert(cdf: impl Fn(f64) -> f64, level: f64) -> f64 {
    if cdf(0.0) >= level {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) >= level {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// The conditional (1−α)-quantile λ*(t) = F_t⁻¹(1−α).
pub fn oracle_threshold(t: f64, alpha: f64, params: &SynthParams) -> Result<f64> {
    check_unit("t", t)?;
    check_alpha(alpha)?;
    let level = 1.0 - alpha;
    let f = |l: f64| true_f(params, t, l).expect("arguments in range");
    if f(1.0) < level {
        return Ok(1.0);
    }
    Ok(invert(f, level))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CfcError::domain(format!("alpha {alpha} outside (0,1)")))
    }
}

/// P(S ≤ λ) with T integrated out (composite Gauss-Legendre over 64 panels).
pub fn marginal_f(params: &SynthParams, lambda: f64) -> Result<f64> {
    check_unit("lambda", lambda)?;
    // 5-point Gauss-Legendre nodes and weights on [-1, 1]
    const NODES: [f64; 5] = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    const WEIGHTS: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let panels = 64;
    let h = 1.0 / panels as f64;
    let mut total = 0.0;
    for k in 0..panels {
        let mid = (k as f64 + 0.5) * h;
        for (x, w) in NODES.iter().zip(WEIGHTS) {
            let t = mid + 0.5 * h * x;
            total += 0.5 * h * w * true_f(params, t, lambda)?;
        }
    }
    Ok(total)
}

/// λ̄ with P(S ≤ λ̄) = 1−α over the difficulty mixture; 1 when the
/// marginal coverage ceiling is below 1−α.
pub fn marginal_threshold(alpha: f64, params: &SynthParams) -> Result<f64> {
    check_alpha(alpha)?;
    let level = 1.0 - alpha;
    let f = |l: f64| marginal_f(params, l).expect("arguments in range");
    if f(1.0) < level {
        return Ok(1.0);
    }
    Ok(invert(f, level))
}
