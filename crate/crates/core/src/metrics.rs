//! Evaluation metrics: direction accuracy, adjusted Rand index, normalized
//! mutual information.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Direction;
use crate::error::{Error, Result};
use crate::mcvci::Verdict;

/// Cross-tabulation of two labelings.
#[derive(Debug, Clone)]
pub struct ContingencyTable {
    /// counts[i][j] over (class of a, class of b)
    counts: Vec<Vec<usize>>,
    row_sums: Vec<usize>,
    col_sums: Vec<usize>,
    n: usize,
}

impl ContingencyTable {
    pub fn build(labels_a: &[usize], labels_b: &[usize]) -> Result<Self> {
        if labels_a.len() != labels_b.len() {
            return Err(Error::Dimension(format!(
                "label vectors differ in length: {} vs {}",
                labels_a.len(),
                labels_b.len()
            )));
        }
        if labels_a.is_empty() {
            return Err(Error::Config("empty labelings".into()));
        }
        // compact the class codes so sparse labels don't blow up the table
        let compact = |labels: &[usize]| -> (Vec<usize>, usize) {
            let mut map = BTreeMap::new();
            let out = labels
                .iter()
                .map(|&l| {
                    let next = map.len();
                    *map.entry(l).or_insert(next)
                })
                .collect();
            (out, map.len())
        };
        let (a, ka) = compact(labels_a);
        let (b, kb) = compact(labels_b);
        let mut counts = vec![vec![0usize; kb]; ka];
        for (&i, &j) in a.iter().zip(&b) {
            counts[i][j] += 1;
        }
        let row_sums: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums: Vec<usize> = (0..kb).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        Ok(ContingencyTable {
            counts,
            row_sums,
            col_sums,
            n: labels_a.len(),
        })
    }

    fn identical_partitions(&self) -> bool {
        // every row and column hits exactly one nonzero cell
        self.counts.iter().all(|r| r.iter().filter(|&&c| c > 0).count() == 1)
            && (0..self.col_sums.len())
                .all(|j| self.counts.iter().filter(|r| r[j] > 0).count() == 1)
    }
}

fn choose2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Hubert–Arabie adjusted Rand index; 1 for identical partitions, ~0 for
/// independent ones, can be negative.
pub fn ari(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    let t = ContingencyTable::build(labels_a, labels_b)?;
    let sum_cells: f64 = t.counts.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = t.row_sums.iter().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = t.col_sums.iter().map(|&c| choose2(c)).sum();
    let total = choose2(t.n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-12 {
        // degenerate: both trivial partitions
        return Ok(if t.identical_partitions() { 1.0 } else { 0.0 });
    }
    Ok((sum_cells - expected) / (max_index - expected))
}

/// How NMI normalizes mutual information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NmiNorm {
    /// Arithmetic mean of the two entropies.
    #[default]
    Arithmetic,
    /// Geometric mean of the two entropies.
    Geometric,
}

/// Normalized mutual information in [0,1].
///
/// Degenerate conventions: both sides constant → 1 if the partitions are
/// identical else 0; exactly one side constant → 0.
pub fn nmi(labels_a: &[usize], labels_b: &[usize], norm: NmiNorm) -> Result<f64> {
    let t = ContingencyTable::build(labels_a, labels_b)?;
    let n = t.n as f64;
    let entropy = |sums: &[usize]| -> f64 {
        sums.iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let ha = entropy(&t.row_sums);
    let hb = entropy(&t.col_sums);
    if ha == 0.0 && hb == 0.0 {
        return Ok(if t.identical_partitions() { 1.0 } else { 0.0 });
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let pij = c as f64 / n;
            let pi = t.row_sums[i] as f64 / n;
            let pj = t.col_sums[j] as f64 / n;
            mi += pij * (pij / (pi * pj)).ln();
        }
    }
    let denom = match norm {
        NmiNorm::Arithmetic => 0.5 * (ha + hb),
        NmiNorm::Geometric => (ha * hb).sqrt(),
    };
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// Weighted fraction of verdicts matching ground truth; undecided and
/// no-relation verdicts count as incorrect.
pub fn direction_accuracy(
    verdicts: &[Verdict],
    truths: &[Direction],
    weights: Option<&[f64]>,
) -> Result<f64> {
    if verdicts.is_empty() {
        return Err(Error::Config("no decisions to score".into()));
    }
    if verdicts.len() != truths.len() {
        return Err(Error::Dimension(format!(
            "{} verdicts vs {} ground truths",
            verdicts.len(),
            truths.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != verdicts.len() {
            return Err(Error::Dimension(format!(
                "{} weights vs {} verdicts",
                w.len(),
                verdicts.len()
            )));
        }
    }
    let mut total = 0.0;
    let mut correct = 0.0;
    for (i, (v, t)) in verdicts.iter().zip(truths).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        total += w;
        let hit = matches!(
            (v, t),
            (Verdict::XtoY, Direction::XtoY) | (Verdict::YtoX, Direction::YtoX)
        );
        if hit {
            correct += w;
        }
    }
    if total <= 0.0 {
        return Err(Error::Config("total weight is zero".into()));
    }
    Ok(correct / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Pair-counting ARI oracle over all C(n,2) pairs.
    fn ari_oracle(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut together_both, mut together_a, mut together_b) = (0.0f64, 0.0f64, 0.0f64);
        let mut pairs = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                pairs += 1.0;
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                if sa {
                    together_a += 1.0;
                }
                if sb {
                    together_b += 1.0;
                }
                if sa && sb {
                    together_both += 1.0;
                }
            }
        }
        let expected = together_a * together_b / pairs;
        let max_index = 0.5 * (together_a + together_b);
        if (max_index - expected).abs() < 1e-12 {
            return if a
                .iter()
                .zip(b)
                .all(|(x, y)| a.iter().zip(b).all(|(p, q)| (x == p) == (y == q)))
            {
                1.0
            } else {
                0.0
            };
        }
        (together_both - expected) / (max_index - expected)
    }

    /// Plug-in entropy/MI NMI oracle.
    fn nmi_oracle(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len() as f64;
        let count = |labels: &[usize]| -> BTreeMap<usize, f64> {
            let mut m = BTreeMap::new();
            for &l in labels {
                *m.entry(l).or_insert(0.0) += 1.0;
            }
            m
        };
        let ca = count(a);
        let cb = count(b);
        let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (&x, &y) in a.iter().zip(b) {
            *joint.entry((x, y)).or_insert(0.0) += 1.0;
        }
        let h = |c: &BTreeMap<usize, f64>| -> f64 {
            c.values().map(|v| -(v / n) * (v / n).ln()).sum()
        };
        let (ha, hb) = (h(&ca), h(&cb));
        if ha == 0.0 && hb == 0.0 {
            return 1.0;
        }
        if ha == 0.0 || hb == 0.0 {
            return 0.0;
        }
        let mut mi = 0.0;
        for ((x, y), c) in &joint {
            let pij = c / n;
            mi += pij * (pij / ((ca[x] / n) * (cb[y] / n))).ln();
        }
        mi / (0.5 * (ha + hb))
    }

    #[test]
    fn ari_identical_is_one() {
        let l = vec![0, 0, 1, 2, 2, 1];
        assert_eq!(ari(&l, &l).unwrap(), 1.0);
    }

    #[test]
    fn ari_permutation_invariant() {
        let a = vec![0, 0, 1, 1, 2, 2];
        let b = vec![2, 2, 0, 0, 1, 1];
        assert_eq!(ari(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn ari_matches_pair_counting_on_crossed_labels() {
        let a = vec![0, 0, 1, 1];
        let b = vec![0, 1, 0, 1];
        let got = ari(&a, &b).unwrap();
        let want = ari_oracle(&a, &b);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((got + 0.5).abs() < 1e-12); // hand value for this table
    }

    #[test]
    fn nmi_identical_nontrivial_is_one() {
        let l = vec![0, 1, 0, 1, 2];
        assert!((nmi(&l, &l, NmiNorm::Arithmetic).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nmi_one_side_constant_is_zero() {
        let a = vec![0, 0, 0, 0];
        let b = vec![0, 1, 0, 1];
        assert_eq!(nmi(&a, &b, NmiNorm::Arithmetic).unwrap(), 0.0);
    }

    #[test]
    fn nmi_matches_plugin_formula() {
        let a = vec![0, 1, 1, 2, 0, 2, 1, 0];
        let b = vec![1, 1, 0, 2, 0, 2, 0, 1];
        let got = nmi(&a, &b, NmiNorm::Arithmetic).unwrap();
        let want = nmi_oracle(&a, &b);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn accuracy_weighted_hand_example() {
        let verdicts = vec![Verdict::XtoY, Verdict::XtoY];
        let truths = vec![Direction::XtoY, Direction::YtoX];
        let acc = direction_accuracy(&verdicts, &truths, Some(&[2.0, 1.0])).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_counts_undecided_as_incorrect() {
        let verdicts = vec![Verdict::Undecided, Verdict::NoCausalRelation, Verdict::XtoY];
        let truths = vec![Direction::XtoY, Direction::XtoY, Direction::XtoY];
        let acc = direction_accuracy(&verdicts, &truths, None).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_empty_is_error() {
        assert!(direction_accuracy(&[], &[], None).is_err());
    }

    #[test]
    fn ari_mean_near_zero_for_random_labelings() {
        use rand::Rng;
        let mut rng = crate::seed::rng(17);
        let trials = 10_000;
        let n = 100;
        let mut sum = 0.0;
        for _ in 0..trials {
            let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..3usize)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..3usize)).collect();
            sum += ari(&a, &b).unwrap();
        }
        let mean = sum / trials as f64;
        assert!(mean.abs() < 0.02, "ARI mean under independence: {mean}");
    }

    proptest! {
        #[test]
        fn metrics_match_oracles(
            labels in prop::collection::vec((0usize..4, 0usize..4), 2..12)
        ) {
            let a: Vec<usize> = labels.iter().map(|p| p.0).collect();
            let b: Vec<usize> = labels.iter().map(|p| p.1).collect();
            let ari_got = ari(&a, &b).unwrap();
            let ari_want = ari_oracle(&a, &b);
            prop_assert!((ari_got - ari_want).abs() < 1e-12);
            let nmi_got = nmi(&a, &b, NmiNorm::Arithmetic).unwrap();
            let nmi_want = nmi_oracle(&a, &b).clamp(0.0, 1.0);
            prop_assert!((nmi_got - nmi_want).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&nmi_got));
            prop_assert!(ari_got <= 1.0 + 1e-12);
            // symmetry
            prop_assert!((ari(&b, &a).unwrap() - ari_got).abs() < 1e-12);
            prop_assert!((nmi(&b, &a, NmiNorm::Arithmetic).unwrap() - nmi_got).abs() < 1e-12);
        }
    }
}
