use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimal one-to-one matching of predicted labels onto true labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    /// `(predicted, true)` pairs, ascending by predicted label.
    pub pairs: Vec<(usize, usize)>,
    /// Rows whose predicted label maps onto their true label.
    pub matched: usize,
}

impl Matching {
    pub fn map(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|(p, _)| *p == pred).map(|(_, t)| *t)
    }
}

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeError(format!(
            "{} predictions vs {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Dense contingency table plus the distinct label values of each side.
struct Contingency {
    pred_labels: Vec<usize>,
    true_labels: Vec<usize>,
    counts: Vec<Vec<u64>>,
}

fn contingency(pred: &[usize], truth: &[usize]) -> Contingency {
    let index = |labels: &[usize]| -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for &l in labels {
            m.entry(l).or_insert(0);
        }
        for (i, v) in m.values_mut().enumerate() {
            *v = i;
        }
        m
    };
    let pi = index(pred);
    let ti = index(truth);
    let mut counts = vec![vec![0u64; ti.len()]; pi.len()];
    for (p, t) in pred.iter().zip(truth) {
        counts[pi[p]][ti[t]] += 1;
    }
    Contingency {
        pred_labels: pi.keys().copied().collect(),
        true_labels: ti.keys().copied().collect(),
        counts,
    }
}

/// Minimum-cost assignment for an `n x m` cost matrix with `n <= m`.
/// Returns the column assigned to each row.
pub fn linear_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "more rows than columns");
    // potentials / shortest augmenting path, 1-based with a virtual column 0
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Matches predicted labels to true labels maximizing agreement.
pub fn hungarian_match(pred: &[usize], truth: &[usize]) -> Result<Matching> {
    check_lengths(pred, truth)?;
    let table = contingency(pred, truth);
    let (a, b) = (table.pred_labels.len(), table.true_labels.len());
    let size = a.max(b);
    let cost: Vec<Vec<i64>> = (0..size)
        .map(|i| {
            (0..size)
                .map(|j| {
                    if i < a && j < b {
                        -(table.counts[i][j] as i64)
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect();
    let assignment = linear_assignment(&cost);
    let mut pairs = Vec::new();
    let mut matched = 0u64;
    for (i, &j) in assignment.iter().enumerate().take(a) {
        if j < b {
            pairs.push((table.pred_labels[i], table.true_labels[j]));
            matched += table.counts[i][j];
        }
    }
    Ok(Matching {
        pairs,
        matched: matched as usize,
    })
}

/// Hungarian-matched accuracy.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::ShapeError("empty labeling".into()));
    }
    Ok(hungarian_match(pred, truth)?.matched as f64 / pred.len() as f64)
}

fn entropy(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information, arithmetic-mean normalization.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::ShapeError("empty labeling".into()));
    }
    let t = contingency(pred, truth);
    if t.pred_labels.len() == 1 && t.true_labels.len() == 1 {
        return Ok(1.0);
    }
    let n = pred.len() as f64;
    let row_sums: Vec<u64> = t.counts.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<u64> = (0..t.true_labels.len())
        .map(|j| t.counts.iter().map(|r| r[j]).sum())
        .collect();
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (n * c / (row_sums[i] as f64 * col_sums[j] as f64)).ln();
            }
        }
    }
    let hp = entropy(row_sums.iter().copied(), n);
    let ht = entropy(col_sums.iter().copied(), n);
    let denom = (hp + ht) / 2.0;
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn comb2(x: u64) -> f64 {
    (x as f64) * (x as f64 - 1.0) / 2.0
}

/// Adjusted Rand index.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::ShapeError("empty labeling".into()));
    }
    let t = contingency(pred, truth);
    let n = pred.len() as u64;
    let index: f64 = t.counts.iter().flatten().map(|&c| comb2(c)).sum();
    let sum_a: f64 = t.counts.iter().map(|r| comb2(r.iter().sum())).sum();
    let sum_b: f64 = (0..t.true_labels.len())
        .map(|j| comb2(t.counts.iter().map(|r| r[j]).sum()))
        .sum();
    let total = comb2(n);
    let expected = if total > 0.0 { sum_a * sum_b / total } else { 0.0 };
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
