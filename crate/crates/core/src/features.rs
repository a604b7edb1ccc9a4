//! Basis maps Φ(X) built from per-prompt difficulty signals.
//!
//! Fitting reads calibration records only. A fitted map is immutable, so
//! transforming test records cannot change it.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PromptRecord, SIGNAL_ENTROPY, SIGNAL_MAX_LOSS};
use crate::error::{CfcError, Result};
use crate::quantile::Design;

pub const MAX_POLY_DEGREE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMapSpec {
    /// [1, t, …, t^degree] with t the proxy signal, optionally replaced by
    /// its calibration ECDF value.
    Poly {
        degree: usize,
        proxy: String,
        #[serde(default)]
        rank_normalize: bool,
    },
    /// [1, 𝟙{hard}]: hard when the max of the rank-normalized signals
    /// reaches the calibration `hard_quantile` percentile.
    GroupIndicator {
        #[serde(default = "default_group_signals")]
        signals: Vec<String>,
        hard_quantile: f64,
    },
    /// [1, raw columns...].
    CustomColumns { columns: Vec<String> },
}

fn default_group_signals() -> Vec<String> {
    vec![SIGNAL_ENTROPY.to_string(), SIGNAL_MAX_LOSS.to_string()]
}

impl FeatureMapSpec {
    pub fn intercept() -> Self {
        FeatureMapSpec::Poly {
            degree: 0,
            proxy: String::new(),
            rank_normalize: false,
        }
    }

    pub fn poly(degree: usize, proxy: &str) -> Self {
        FeatureMapSpec::Poly {
            degree,
            proxy: proxy.to_string(),
            rank_normalize: false,
        }
    }

    pub fn group_indicator(hard_quantile: f64) -> Self {
        FeatureMapSpec::GroupIndicator {
            signals: default_group_signals(),
            hard_quantile,
        }
    }

    /// Signals a record must carry for this map.
    pub fn required_signals(&self) -> Vec<String> {
        match self {
            FeatureMapSpec::Poly { degree: 0, .. } => Vec::new(),
            FeatureMapSpec::Poly { proxy, .. } => vec![proxy.clone()],
            FeatureMapSpec::GroupIndicator { signals, .. } => signals.clone(),
            FeatureMapSpec::CustomColumns { columns } => columns.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedFeatureMap {
    pub spec: FeatureMapSpec,
    /// Sorted calibration values per rank-normalized signal.
    pub ecdf: BTreeMap<String, Vec<f64>>,
    pub hard_cutoff: Option<f64>,
    /// Number of basis columns produced by [`FittedFeatureMap::transform`].
    pub dim: usize,
    /// Set when the proxy was constant on calibration and the map fell
    /// back to the intercept.
    pub collapsed: bool,
}

/// #{v_i ≤ value} / (N+1) against sorted calibration values.
pub fn rank_normalize(value: f64, sorted_cal: &[f64]) -> f64 {
    let count = sorted_cal.partition_point(|&v| v <= value);
    count as f64 / (sorted_cal.len() + 1) as f64
}

/// Lower-cases, collapses whitespace and strips trailing punctuation.
pub fn canonicalize_answer(answer: &str) -> String {
    let lowered = answer.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// Shannon entropy (nats) of the canonicalized answer distribution.
pub fn answer_entropy<S: AsRef<str>>(answers: &[S]) -> f64 {
    if answers.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for a in answers {
        *counts.entry(canonicalize_answer(a.as_ref())).or_default() += 1;
    }
    let m = answers.len() as f64;
    let mut counts: Vec<usize> = counts.into_values().collect();
    counts.sort_unstable();
    -counts
        .iter()
        .map(|&c| {
            let p = c as f64 / m;
            p * p.ln()
        })
        .sum::<f64>()
}

/// 1 when either rank-normalized signal reaches the cutoff.
pub fn hard_group_indicator(t_entropy: f64, t_loss: f64, cutoff: f64) -> u8 {
    u8::from(t_entropy.max(t_loss) >= cutoff)
}

/// Empirical q-quantile: the ⌈qN⌉-th smallest value.
pub(crate) fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

fn sorted_signal(records: &[PromptRecord], name: &str) -> Result<Vec<f64>> {
    let mut v = records
        .iter()
        .map(|r| r.signal(name))
        .collect::<Result<Vec<_>>>()?;
    v.sort_by(f64::total_cmp);
    Ok(v)
}

pub fn fit_feature_map(spec: &FeatureMapSpec, cal: &[PromptRecord]) -> Result<FittedFeatureMap> {
    if cal.len() < 2 {
        return Err(CfcError::domain("feature map needs at least two calibration records"));
    }
    let mut ecdf = BTreeMap::new();
    match spec {
        FeatureMapSpec::Poly {
            degree,
            proxy,
            rank_normalize: rn,
        } => {
            if *degree > MAX_POLY_DEGREE {
                return Err(CfcError::domain(format!(
                    "polynomial degree {degree} above {MAX_POLY_DEGREE}"
                )));
            }
            if *degree == 0 {
                return Ok(FittedFeatureMap {
                    spec: spec.clone(),
                    ecdf,
                    hard_cutoff: None,
                    dim: 1,
                    collapsed: false,
                });
            }
            let sorted = sorted_signal(cal, proxy)?;
            let constant = if *rn {
                let first = rank_normalize(sorted[0], &sorted);
                sorted.iter().all(|&v| rank_normalize(v, &sorted) == first)
            } else {
                sorted.first() == sorted.last()
            };
            if *rn {
                ecdf.insert(proxy.clone(), sorted);
            }
            if constant {
                log::warn!("proxy `{proxy}` is constant on calibration; using the intercept basis");
            }
            Ok(FittedFeatureMap {
                spec: spec.clone(),
                ecdf,
                hard_cutoff: None,
                dim: if constant { 1 } else { degree + 1 },
                collapsed: constant,
            })
        }
        FeatureMapSpec::GroupIndicator {
            signals,
            hard_quantile,
        } => {
            if signals.is_empty() {
                return Err(CfcError::domain("group indicator needs at least one signal"));
            }
            if !(*hard_quantile > 0.0 && *hard_quantile < 1.0) {
                return Err(CfcError::domain(format!(
                    "hard_quantile {hard_quantile} outside (0,1)"
                )));
            }
            for name in signals {
                ecdf.insert(name.clone(), sorted_signal(cal, name)?);
            }
            let mut fitted = FittedFeatureMap {
                spec: spec.clone(),
                ecdf,
                hard_cutoff: None,
                dim: 2,
                collapsed: false,
            };
            let mut combined = cal
                .iter()
                .map(|r| fitted.combined_score(r))
                .collect::<Result<Vec<_>>>()?;
            combined.sort_by(f64::total_cmp);
            fitted.hard_cutoff = Some(empirical_quantile(&combined, *hard_quantile));
            Ok(fitted)
        }
        FeatureMapSpec::CustomColumns { columns } => {
            for name in columns {
                sorted_signal(cal, name)?;
            }
            Ok(FittedFeatureMap {
                spec: spec.clone(),
                ecdf,
                hard_cutoff: None,
                dim: columns.len() + 1,
                collapsed: false,
            })
        }
    }
}

impl FittedFeatureMap {
    /// Max over the rank-normalized group signals.
    pub fn combined_score(&self, record: &PromptRecord) -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for (name, sorted) in &self.ecdf {
            best = best.max(rank_normalize(record.signal(name)?, sorted));
        }
        Ok(best)
    }

    /// Whether the record falls in the hard group (group indicator maps only).
    pub fn is_hard(&self, record: &PromptRecord) -> Result<Option<bool>> {
        match self.hard_cutoff {
            Some(cut) => Ok(Some(self.combined_score(record)? >= cut)),
            None => Ok(None),
        }
    }

    pub fn transform(&self, record: &PromptRecord) -> Result<Vec<f64>> {
        match &self.spec {
            FeatureMapSpec::Poly {
                proxy,
                rank_normalize: rn,
                ..
            } => {
                if self.dim == 1 {
                    return Ok(vec![1.0]);
                }
                let raw = record.signal(proxy)?;
                let t = if *rn {
                    rank_normalize(raw, &self.ecdf[proxy])
                } else {
                    raw
                };
                let mut row = Vec::with_capacity(self.dim);
                let mut acc = 1.0;
                for _ in 0..self.dim {
                    row.push(acc);
                    acc *= t;
                }
                Ok(row)
            }
            FeatureMapSpec::GroupIndicator { .. } => {
                let hard = self.is_hard(record)?.unwrap_or(false);
                Ok(vec![1.0, if hard { 1.0 } else { 0.0 }])
            }
            FeatureMapSpec::CustomColumns { columns } => {
                let mut row = Vec::with_capacity(self.dim);
                row.push(1.0);
                for c in columns {
                    row.push(record.signal(c)?);
                }
                Ok(row)
            }
        }
    }

    pub fn design(&self, records: &[PromptRecord]) -> Result<Design> {
        let mut x = Design::empty(self.dim);
        for r in records {
            x.push_row(&self.transform(r)?)?;
        }
        Ok(x)
    }

    /// SHA-256 of the serialized fitted state.
    pub fn state_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("fitted map serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SIGNAL_DIFFICULTY;

    fn with_signals(id: usize, signals: &[(&str, f64)]) -> PromptRecord {
        let mut r = PromptRecord::from_scores(format!("p{id}"), &[(0.5, true)]);
        for (k, v) in signals {
            r.raw_signals.insert(k.to_string(), *v);
        }
        r
    }

    #[test]
    fn rank_normalize_examples() {
        let cal = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(rank_normalize(0.25, &cal), 0.4);
        assert_eq!(rank_normalize(0.05, &cal), 0.0);
        assert_eq!(rank_normalize(0.4, &cal), 0.8);
        assert_eq!(rank_normalize(9.0, &cal), 0.8);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(answer_entropy(&["7", "7", "7"]), 0.0);
        let e = answer_entropy(&["a", "b", "a", "b"]);
        assert!((e - 2f64.ln()).abs() < 1e-15);
        // canonicalization merges these into one answer
        assert_eq!(answer_entropy(&["Paris.", " paris", "PARIS!"]), 0.0);
        let e = answer_entropy(&["x", "y", "z"]);
        assert!((e - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn canonicalization() {
        assert_eq!(canonicalize_answer("  The   Answer is 42. "), "the answer is 42");
        assert_eq!(canonicalize_answer("yes?!"), "yes");
    }

    #[test]
    fn hard_indicator_examples() {
        assert_eq!(hard_group_indicator(0.95, 0.1, 0.925), 1);
        assert_eq!(hard_group_indicator(0.1, 0.93, 0.925), 1);
        assert_eq!(hard_group_indicator(0.5, 0.5, 0.925), 0);
    }

    #[test]
    fn poly_map_evaluates_powers() {
        let cal: Vec<_> = (0..10)
            .map(|i| with_signals(i, &[(SIGNAL_DIFFICULTY, i as f64 / 10.0)]))
            .collect();
        let map = fit_feature_map(&FeatureMapSpec::poly(2, SIGNAL_DIFFICULTY), &cal).unwrap();
        let r = with_signals(99, &[(SIGNAL_DIFFICULTY, 0.5)]);
        assert_eq!(map.transform(&r).unwrap(), vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn rank_normalized_poly_uses_calibration_ecdf() {
        let cal: Vec<_> = (0..4)
            .map(|i| with_signals(i, &[("m", [0.1, 0.2, 0.3, 0.4][i])]))
            .collect();
        let spec = FeatureMapSpec::Poly {
            degree: 1,
            proxy: "m".into(),
            rank_normalize: true,
        };
        let map = fit_feature_map(&spec, &cal).unwrap();
        let row = map.transform(&with_signals(9, &[("m", 0.25)])).unwrap();
        assert_eq!(row, vec![1.0, 0.4]);
    }

    #[test]
    fn constant_proxy_collapses_to_intercept() {
        let cal: Vec<_> = (0..5).map(|i| with_signals(i, &[("c", 0.3)])).collect();
        let map = fit_feature_map(&FeatureMapSpec::poly(3, "c"), &cal).unwrap();
        assert!(map.collapsed);
        assert_eq!(map.dim, 1);
        assert_eq!(map.transform(&with_signals(0, &[("c", 0.9)])).unwrap(), vec![1.0]);
    }

    #[test]
    fn missing_signal_names_record_and_field() {
        let cal: Vec<_> = (0..3).map(|i| with_signals(i, &[("a", i as f64)])).collect();
        let map = fit_feature_map(&FeatureMapSpec::poly(1, "a"), &cal).unwrap();
        let err = map.transform(&with_signals(42, &[])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("p42") && msg.contains("a"), "{msg}");
        assert!(fit_feature_map(&FeatureMapSpec::poly(1, "zzz"), &cal).is_err());
    }

    #[test]
    fn degree_cap() {
        let cal: Vec<_> = (0..3).map(|i| with_signals(i, &[("a", i as f64)])).collect();
        assert!(fit_feature_map(&FeatureMapSpec::poly(5, "a"), &cal).is_err());
    }

    fn group_cal(n: usize) -> Vec<PromptRecord> {
        (0..n)
            .map(|i| {
                let e = ((i * 37) % n) as f64;
                let l = ((i * 11) % n) as f64 / n as f64;
                with_signals(i, &[(SIGNAL_ENTROPY, e), (SIGNAL_MAX_LOSS, l)])
            })
            .collect()
    }

    #[test]
    fn group_indicator_cutoff_and_maximum() {
        let cal = group_cal(200);
        let map = fit_feature_map(&FeatureMapSpec::group_indicator(0.925), &cal).unwrap();
        let cut = map.hard_cutoff.unwrap();
        // oracle: combined scores recomputed by brute-force counting
        let mut ent: Vec<f64> = cal.iter().map(|r| r.raw_signals[SIGNAL_ENTROPY]).collect();
        let mut loss: Vec<f64> = cal.iter().map(|r| r.raw_signals[SIGNAL_MAX_LOSS]).collect();
        ent.sort_by(f64::total_cmp);
        loss.sort_by(f64::total_cmp);
        let rn = |v: f64, all: &[f64]| all.iter().filter(|&&a| a <= v).count() as f64 / 201.0;
        let mut comb: Vec<f64> = cal
            .iter()
            .map(|r| rn(r.raw_signals[SIGNAL_ENTROPY], &ent).max(rn(r.raw_signals[SIGNAL_MAX_LOSS], &loss)))
            .collect();
        comb.sort_by(f64::total_cmp);
        assert_eq!(cut, comb[184]);

        let top = with_signals(0, &[(SIGNAL_ENTROPY, 1e9), (SIGNAL_MAX_LOSS, 0.0)]);
        assert_eq!(map.transform(&top).unwrap(), vec![1.0, 1.0]);
        let low = with_signals(0, &[(SIGNAL_ENTROPY, -1.0), (SIGNAL_MAX_LOSS, -1.0)]);
        assert_eq!(map.transform(&low).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn transforming_test_records_leaves_state_unchanged() {
        let cal = group_cal(50);
        let map = fit_feature_map(&FeatureMapSpec::group_indicator(0.9), &cal).unwrap();
        let before = map.state_hash();
        for r in group_cal(80) {
            map.transform(&r).unwrap();
        }
        assert_eq!(map.state_hash(), before);
    }

    #[test]
    fn spec_json_shape() {
        let spec: FeatureMapSpec =
            serde_json::from_str(r#"{"kind":"poly","degree":2,"proxy":"mean_verifier_loss"}"#).unwrap();
        assert_eq!(spec, FeatureMapSpec::poly(2, "mean_verifier_loss"));
        let spec: FeatureMapSpec =
            serde_json::from_str(r#"{"kind":"group_indicator","hard_quantile":0.925}"#).unwrap();
        assert_eq!(spec, FeatureMapSpec::group_indicator(0.925));
    }
}
