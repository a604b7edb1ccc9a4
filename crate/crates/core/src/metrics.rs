//! ECR, APSS, GSC, per-group miscoverage and conditional residuals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::PromptRecord;
use crate::error::{CfcError, Result};
use crate::methods::PredictionSet;
use crate::quantile::Design;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub group: usize,
    pub coverage: f64,
    pub miscoverage: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ecr: f64,
    pub apss: f64,
    pub gsc: f64,
    pub group_miscoverage: Vec<GroupStat>,
    /// Ê[Φ_j(X)(𝟙{cover} − (1−α))] per basis column.
    pub cond_residuals: Vec<f64>,
    pub n_test: usize,
    pub seed: u64,
    pub abstention_rate: f64,
}

/// 1 iff some accepted candidate is correct.
pub fn coverage_indicator(record: &PromptRecord, pset: &PredictionSet) -> u8 {
    u8::from(
        pset.accepted
            .iter()
            .any(|&i| record.candidates.get(i).is_some_and(|c| c.correct)),
    )
}

/// Order-independent sum: terms are sorted before accumulation.
fn stable_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

pub fn evaluate(
    records: &[PromptRecord],
    psets: &[PredictionSet],
    groups: &[usize],
    basis: Option<&Design>,
    alpha: f64,
    seed: u64,
) -> Result<EvalReport> {
    let n = records.len();
    if n == 0 {
        return Err(CfcError::domain("cannot evaluate an empty test set"));
    }
    if psets.len() != n || groups.len() != n {
        return Err(CfcError::domain(format!(
            "{n} records, {} prediction sets, {} group ids",
            psets.len(),
            groups.len()
        )));
    }
    if let Some(b) = basis {
        if b.nrows() != n {
            return Err(CfcError::domain("basis rows do not match records"));
        }
    }
    let cover: Vec<u8> = records
        .iter()
        .zip(psets)
        .map(|(r, p)| coverage_indicator(r, p))
        .collect();
    let covered: usize = cover.iter().map(|&c| c as usize).sum();
    let total_size: usize = psets.iter().map(|p| p.accepted.len()).sum();
    let abstained = psets.iter().filter(|p| p.abstained).count();

    let mut per_group: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&g, &c) in groups.iter().zip(&cover) {
        let e = per_group.entry(g).or_default();
        e.0 += c as usize;
        e.1 += 1;
    }
    let group_miscoverage: Vec<GroupStat> = per_group
        .into_iter()
        .map(|(group, (hit, count))| {
            let coverage = hit as f64 / count as f64;
            GroupStat {
                group,
                coverage,
                miscoverage: 1.0 - coverage,
                count,
            }
        })
        .collect();
    let gsc = group_miscoverage
        .iter()
        .map(|g| g.coverage)
        .fold(f64::INFINITY, f64::min);

    let target = 1.0 - alpha;
    let cond_residuals = match basis {
        Some(b) => (0..b.ncols())
            .map(|j| {
                let hit = stable_sum((0..n).map(|i| b.row(i)[j] * cover[i] as f64).collect());
                let all = stable_sum((0..n).map(|i| b.row(i)[j]).collect());
                // split so that f ≡ 1 reproduces ecr − (1−α) exactly
                hit / n as f64 - target * (all / n as f64)
            })
            .collect(),
        None => Vec::new(),
    };

    Ok(EvalReport {
        ecr: covered as f64 / n as f64,
        apss: total_size as f64 / n as f64,
        gsc,
        group_miscoverage,
        cond_residuals,
        n_test: n,
        seed,
        abstention_rate: abstained as f64 / n as f64,
    })
}

/// Equal-frequency bins: values are stably sorted and the item at sorted
/// position r goes to bin ⌊r·n_bins/n⌋, so ties split by input order. Bin 0
/// holds the smallest values. Constant input yields a single bin.
pub fn equal_frequency_bins(values: &[f64], n_bins: usize) -> Result<Vec<usize>> {
    let n = values.len();
    if n_bins == 0 {
        return Err(CfcError::domain("n_bins must be at least 1"));
    }
    if n < n_bins {
        return Err(CfcError::domain(format!("{n} values cannot fill {n_bins} bins")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CfcError::domain("binning values must be finite"));
    }
    if values.iter().all(|&v| v == values[0]) {
        if n_bins > 1 {
            log::warn!("binning proxy is constant; using a single group");
        }
        return Ok(vec![0; n]);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut bins = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        bins[i] = rank * n_bins / n;
    }
    Ok(bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pset(accepted: Vec<usize>) -> PredictionSet {
        PredictionSet {
            abstained: accepted.is_empty(),
            accepted,
            threshold: 0.5,
        }
    }

    fn rec(correct: &[bool]) -> PromptRecord {
        let scored: Vec<(f64, bool)> = correct.iter().map(|&c| (0.3, c)).collect();
        PromptRecord::from_scores("r", &scored)
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage_indicator(&rec(&[true, false]), &pset(vec![0])), 1);
        assert_eq!(coverage_indicator(&rec(&[true, false]), &pset(vec![])), 0);
        assert_eq!(coverage_indicator(&rec(&[false, false]), &pset(vec![0, 1])), 0);
    }

    #[test]
    fn evaluate_arithmetic() {
        let records = vec![rec(&[true, true, true]); 4];
        let psets = vec![pset(vec![0, 1]), pset(vec![0]), pset(vec![]), pset(vec![0, 1, 2])];
        let r = evaluate(&records, &psets, &[0, 0, 0, 0], None, 0.1, 7).unwrap();
        assert_eq!(r.ecr, 0.75);
        assert_eq!(r.apss, 1.5);
        assert_eq!(r.gsc, r.ecr);
        assert_eq!(r.abstention_rate, 0.25);
        assert_eq!(r.seed, 7);
    }

    #[test]
    fn gsc_is_group_minimum() {
        // groups with coverages 0.9, 0.8, 0.95
        let mut records = Vec::new();
        let mut psets = Vec::new();
        let mut groups = Vec::new();
        for (g, hits, n) in [(0, 18, 20), (1, 16, 20), (2, 19, 20)] {
            for i in 0..n {
                records.push(rec(&[i < hits]));
                psets.push(pset(vec![0]));
                groups.push(g);
            }
        }
        let r = evaluate(&records, &psets, &groups, None, 0.1, 0).unwrap();
        assert!((r.gsc - 0.8).abs() < 1e-15);
        assert_eq!(r.group_miscoverage.len(), 3);
        let weighted: f64 = r
            .group_miscoverage
            .iter()
            .map(|g| g.miscoverage * g.count as f64)
            .sum::<f64>()
            / 60.0;
        assert!((r.ecr - (1.0 - weighted)).abs() < 1e-12);
    }

    #[test]
    fn intercept_residual_is_ecr_gap() {
        let records: Vec<_> = (0..7).map(|i| rec(&[i % 3 != 0])).collect();
        let psets = vec![pset(vec![0]); 7];
        let basis = Design::intercept(7);
        let r = evaluate(&records, &psets, &[0; 7], Some(&basis), 0.2, 0).unwrap();
        assert_eq!(r.cond_residuals[0], r.ecr - 0.8);
    }

    #[test]
    fn empty_test_set_rejected() {
        assert!(evaluate(&[], &[], &[], None, 0.1, 0).is_err());
    }

    #[test]
    fn bins_examples() {
        let v: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let b = equal_frequency_bins(&v, 5).unwrap();
        let mut counts = [0; 5];
        for &x in &b {
            counts[x] += 1;
        }
        assert_eq!(counts, [2; 5]);
        assert_eq!(equal_frequency_bins(&v, 1).unwrap(), vec![0; 10]);
        assert_eq!(equal_frequency_bins(&[0.5; 6], 3).unwrap(), vec![0; 6]);
        assert!(equal_frequency_bins(&v, 11).is_err());
        assert!(equal_frequency_bins(&v, 0).is_err());
    }

    #[test]
    fn bins_with_tie_run_match_counting_oracle() {
        // 37 values with a run of 15 ties at the median
        let mut v: Vec<f64> = (0..11).map(|i| i as f64).collect();
        v.extend(std::iter::repeat_n(50.0, 15));
        v.extend((0..11).map(|i| 100.0 + i as f64));
        // interleave to make input order matter
        let mut shuffled = Vec::new();
        for k in 0..v.len() {
            shuffled.push(v[(k * 10) % 37]);
        }
        let n_bins = 4;
        let b = equal_frequency_bins(&shuffled, n_bins).unwrap();
        for bin in 0..n_bins {
            let expected = ((bin + 1) * 37).div_ceil(n_bins) - (bin * 37).div_ceil(n_bins);
            assert_eq!(b.iter().filter(|&&x| x == bin).count(), expected, "bin {bin}");
        }
        // monotone: a smaller value never lands in a higher bin
        for i in 0..37 {
            for j in 0..37 {
                if shuffled[i] < shuffled[j] {
                    assert!(b[i] <= b[j]);
                }
            }
        }
        // within the tie run, earlier input positions get lower-or-equal bins
        let ties: Vec<usize> = (0..37).filter(|&i| shuffled[i] == 50.0).collect();
        for w in ties.windows(2) {
            assert!(b[w[0]] <= b[w[1]]);
        }
    }

    proptest! {
        #[test]
        fn gsc_not_above_ecr(hits in proptest::collection::vec((0usize..4, any::<bool>()), 1..60)) {
            let records: Vec<_> = hits.iter().map(|&(_, c)| rec(&[c])).collect();
            let psets = vec![pset(vec![0]); hits.len()];
            let groups: Vec<usize> = hits.iter().map(|&(g, _)| g).collect();
            let r = evaluate(&records, &psets, &groups, None, 0.1, 0).unwrap();
            prop_assert!(r.gsc <= r.ecr + 1e-15);
            if r.apss < 1.0 {
                prop_assert!(r.abstention_rate > 0.0);
            }
        }

        #[test]
        fn evaluate_is_permutation_invariant(
            rows in proptest::collection::vec((0usize..3, any::<bool>(), 0usize..3, 0.0f64..1.0), 1..40),
            rot in 0usize..40,
        ) {
            let build = |rows: &[(usize, bool, usize, f64)]| {
                let records: Vec<_> = rows.iter().map(|r| rec(&[r.1, false, true])).collect();
                let psets: Vec<_> = rows.iter().map(|r| pset((0..r.2).collect())).collect();
                let groups: Vec<usize> = rows.iter().map(|r| r.0).collect();
                let basis = Design::from_rows(&rows.iter().map(|r| [1.0, r.3]).collect::<Vec<_>>()).unwrap();
                evaluate(&records, &psets, &groups, Some(&basis), 0.2, 1).unwrap()
            };
            let a = build(&rows);
            let mut rotated = rows.clone();
            let k = rot % rows.len();
            rotated.rotate_left(k);
            rotated.reverse();
            prop_assert_eq!(a, build(&rotated));
        }
    }
}
