//! Tied ranking, average ranks across datasets and the Wilcoxon signed-rank test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{KanError, Result};

/// Exact null distribution is used up to this many non-zero differences.
pub const EXACT_LIMIT: usize = 20;

/// Significance level used in reports.
pub const ALPHA: f64 = 0.05;

/// Ranks with averaged ties; rank 1 is the best score.
pub fn rank_with_ties(scores: &[f64], higher_is_better: bool) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(KanError::invalid("cannot rank an empty vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(KanError::invalid("scores must be finite"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    if higher_is_better {
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    } else {
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    }
    let mut ranks = vec![0.0; scores.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end share their mean
        let shared = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = shared;
        }
        start = end;
    }
    Ok(ranks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    /// Row index in the input matrix.
    pub row: usize,
    pub mean: f64,
    /// Population standard deviation across datasets.
    pub std: f64,
}

/// Mean and population std of each row of a `rows x datasets` rank matrix,
/// sorted by ascending mean (row index breaks ties).
pub fn average_rank(per_dataset_ranks: &[Vec<f64>]) -> Result<Vec<RankSummary>> {
    let width = per_dataset_ranks
        .first()
        .map(Vec::len)
        .ok_or_else(|| KanError::invalid("rank matrix is empty"))?;
    if width == 0 || per_dataset_ranks.iter().any(|r| r.len() != width) {
        return Err(KanError::invalid("rank matrix is ragged or has no datasets"));
    }
    let d = width as f64;
    let mut out: Vec<RankSummary> = per_dataset_ranks
        .iter()
        .enumerate()
        .map(|(row, ranks)| {
            let mean = ranks.iter().sum::<f64>() / d;
            let var = ranks.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / d;
            RankSummary { row, mean, std: var.sqrt() }
        })
        .collect();
    out.sort_by(|a, b| a.mean.total_cmp(&b.mean).then(a.row.cmp(&b.row)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub label: String,
    /// Rank on each dataset, in dataset order.
    pub ranks: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Rows sorted by mean rank; best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub datasets: Vec<String>,
    pub rows: Vec<RankRow>,
}

impl RankTable {
    /// `scores[d][r]` is the score of row `r` on dataset `d`; higher is better.
    pub fn from_scores(labels: &[String], datasets: &[String], scores: &[Vec<f64>]) -> Result<Self> {
        if scores.len() != datasets.len() {
            return Err(KanError::invalid("one score vector per dataset is required"));
        }
        let per_dataset: Vec<Vec<f64>> = scores
            .iter()
            .map(|s| {
                if s.len() != labels.len() {
                    return Err(KanError::invalid("score vector length differs from label count"));
                }
                rank_with_ties(s, true)
            })
            .collect::<Result<_>>()?;
        let by_row: Vec<Vec<f64>> = (0..labels.len())
            .map(|r| per_dataset.iter().map(|ranks| ranks[r]).collect())
            .collect();
        let rows = average_rank(&by_row)?
            .into_iter()
            .map(|s| RankRow {
                label: labels[s.row].clone(),
                ranks: by_row[s.row].clone(),
                mean: s.mean,
                std: s.std,
            })
            .collect();
        Ok(RankTable {
            datasets: datasets.to_vec(),
            rows,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApproximation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub w_plus: f64,
    pub w_minus: f64,
    /// Pairs left after discarding zero differences.
    pub n_effective: usize,
    /// Two-sided.
    pub p_value: f64,
    pub method: WilcoxonMethod,
    /// Every difference was zero; the test is undefined and `p_value` is 1.
    pub degenerate: bool,
}

impl WilcoxonResult {
    pub fn significant(&self) -> bool {
        !self.degenerate && self.p_value < ALPHA
    }
}

/// Paired two-sided signed-rank test on `a - b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(KanError::invalid(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(KanError::invalid("paired samples are empty"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(KanError::invalid("differences must be finite"));
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            w_plus: 0.0,
            w_minus: 0.0,
            n_effective: 0,
            p_value: 1.0,
            method: WilcoxonMethod::Exact,
            degenerate: true,
        });
    }
    let magnitudes: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = rank_with_ties(&magnitudes, false)?;
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p_value, method) = if n <= EXACT_LIMIT {
        (exact_p_value(&ranks, w_plus), WilcoxonMethod::Exact)
    } else {
        (normal_p_value(&ranks, w_plus), WilcoxonMethod::NormalApproximation)
    };
    Ok(WilcoxonResult {
        w_plus,
        w_minus,
        n_effective: n,
        p_value,
        method,
        degenerate: false,
    })
}

/// Exact null distribution of W+ given the (possibly tied) ranks.
///
/// Averaged ranks are multiples of 1/2, so doubled ranks are integers and
/// the distribution is a subset-sum count over them.
fn exact_p_value(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let observed = (2.0 * w_plus).round() as usize;
    let all: f64 = counts.iter().sum();
    let lower: f64 = counts[..=observed].iter().sum::<f64>() / all;
    let upper: f64 = counts[observed..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Normal approximation with tie-corrected variance and continuity correction.
fn normal_p_value(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    (2.0 * normal.sf(z)).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_with_ties(&[0.9, 0.8, 0.9], true).unwrap(), vec![1.5, 3.0, 1.5]);
        assert_eq!(rank_with_ties(&[5.0, 4.0, 3.0, 1.0], true).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rank_with_ties(&[2.0; 5], true).unwrap(), vec![3.0; 5]);
        assert_eq!(rank_with_ties(&[3.0, 1.0, 2.0], false).unwrap(), vec![3.0, 1.0, 2.0]);
        assert!(rank_with_ties(&[], true).is_err());
        assert!(rank_with_ties(&[f64::NAN], true).is_err());
    }

    #[test]
    fn average_rank_examples() {
        let one = average_rank(&[vec![3.0], vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(one.iter().map(|s| s.row).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert!(one.iter().all(|s| s.std == 0.0));

        let best = average_rank(&[vec![1.0, 1.0, 1.0], vec![2.0, 2.0, 2.0]]).unwrap();
        assert_eq!((best[0].mean, best[0].std), (1.0, 0.0));

        let s = average_rank(&[vec![10.0, 20.0]]).unwrap();
        assert_eq!((s[0].mean, s[0].std), (15.0, 5.0));

        assert!(average_rank(&[vec![1.0, 2.0], vec![1.0]]).is_err());
        assert!(average_rank(&[]).is_err());
    }

    #[test]
    fn rank_table_orders_rows() {
        let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let datasets = vec!["d1".to_string(), "d2".to_string()];
        let t = RankTable::from_scores(&labels, &datasets, &[vec![0.5, 0.9, 0.7], vec![0.6, 0.8, 0.8]]).unwrap();
        assert_eq!(t.rows[0].label, "b");
        assert_eq!(t.rows[0].ranks, vec![1.0, 1.5]);
        assert_eq!(t.rows[2].label, "a");
    }

    #[test]
    fn wilcoxon_all_positive() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert_eq!(r.w_plus, 15.0);
        assert_eq!(r.w_minus, 0.0);
        assert_relative_eq!(r.p_value, 0.0625, epsilon = 1e-15);
        assert_eq!(r.method, WilcoxonMethod::Exact);
    }

    #[test]
    fn wilcoxon_symmetric_pair() {
        let r = wilcoxon_signed_rank(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(r.w_plus, r.w_minus);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn wilcoxon_degenerate_and_errors() {
        let r = wilcoxon_signed_rank(&[0.3, 0.4], &[0.3, 0.4]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
        assert!(!r.significant());
        assert!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]).is_err());
        assert!(wilcoxon_signed_rank(&[], &[]).is_err());
    }

    #[test]
    fn wilcoxon_large_sample_uses_normal_approximation() {
        let a: Vec<f64> = (0..30).map(|i| i as f64 * 0.1 + 1.0).collect();
        let b: Vec<f64> = (0..30).map(|i| if i % 4 == 0 { 5.0 } else { 0.0 }).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.method, WilcoxonMethod::NormalApproximation);
        assert_eq!(r.n_effective, 30);
        assert!(r.p_value > 0.0 && r.p_value < 1.0);
        // every difference positive: W+ = 465, far in the tail
        let r = wilcoxon_signed_rank(&a, &[0.0; 30]).unwrap();
        assert_eq!(r.w_plus, 465.0);
        assert!(r.p_value < 1e-5);
    }

    proptest! {
        #[test]
        fn antisymmetry_and_total(a in prop::collection::vec(-8i32..8, 1..15), b in prop::collection::vec(-8i32..8, 15)) {
            let a: Vec<f64> = a.iter().map(|&x| x as f64 / 4.0).collect();
            let b: Vec<f64> = b[..a.len()].iter().map(|&x| x as f64 / 4.0).collect();
            let ab = wilcoxon_signed_rank(&a, &b).unwrap();
            let ba = wilcoxon_signed_rank(&b, &a).unwrap();
            prop_assert_eq!(ab.w_plus, ba.w_minus);
            prop_assert_eq!(ab.w_minus, ba.w_plus);
            prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
            let n = ab.n_effective as f64;
            prop_assert_eq!(ab.w_plus + ab.w_minus, n * (n + 1.0) / 2.0);
        }

        #[test]
        fn shift_invariance(a in prop::collection::vec(-8i32..8, 1..12), b in prop::collection::vec(-8i32..8, 12), c in -16i32..16) {
            // quarter-integers keep the shifted differences exact
            let a: Vec<f64> = a.iter().map(|&x| x as f64 / 4.0).collect();
            let b: Vec<f64> = b[..a.len()].iter().map(|&x| x as f64 / 4.0).collect();
            let c = c as f64 / 4.0;
            let sa: Vec<f64> = a.iter().map(|x| x + c).collect();
            let sb: Vec<f64> = b.iter().map(|x| x + c).collect();
            prop_assert_eq!(wilcoxon_signed_rank(&a, &b).unwrap(), wilcoxon_signed_rank(&sa, &sb).unwrap());
        }

        #[test]
        fn ranks_invariant_under_monotone_maps(s in prop::collection::vec(-5i32..5, 1..30)) {
            let s: Vec<f64> = s.iter().map(|&x| x as f64).collect();
            let mapped: Vec<f64> = s.iter().map(|x| x.powi(3) + 2.0 * x).collect();
            prop_assert_eq!(rank_with_ties(&s, true).unwrap(), rank_with_ties(&mapped, true).unwrap());
        }
    }
}
