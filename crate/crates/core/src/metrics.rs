//! Clustering quality metrics and representation diagnostics.

use std::collections::BTreeMap;

use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{NccError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nmi: f64,
    pub ami: f64,
    pub ari: f64,
    pub acc: f64,
    pub imbalance_ratio: f64,
    pub uniformity_std: f64,
}

impl MetricsReport {
    /// All label metrics of `y_pred` against `y_true`, plus the diagnostics of
    /// the predicted partition and the features `z`.
    pub fn evaluate(y_true: &[usize], y_pred: &[usize], z: &Tensor) -> Result<Self> {
        Ok(Self {
            nmi: nmi(y_true, y_pred)?,
            ami: ami(y_true, y_pred)?,
            ari: ari(y_true, y_pred)?,
            acc: cluster_acc(y_true, y_pred)?,
            imbalance_ratio: imbalance_ratio(y_pred)?,
            uniformity_std: uniformity_std(z),
        })
    }
}

/// Contingency table with rows indexed by the distinct values of `a`
/// (ascending) and columns by those of `b`.
pub struct Contingency {
    pub table: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

fn dense(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    for &l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    // re-number in ascending label order
    let order: BTreeMap<usize, usize> = ids.keys().enumerate().map(|(i, &k)| (k, i)).collect();
    (labels.iter().map(|l| order[l]).collect(), order.len())
}

impl Contingency {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(NccError::Dimension(format!(
                "label vectors of length {} and {}",
                a.len(),
                b.len()
            )));
        }
        if a.is_empty() {
            return Err(NccError::Contract("metrics need at least one sample".into()));
        }
        let (da, ka) = dense(a);
        let (db, kb) = dense(b);
        let mut table = vec![vec![0u64; kb]; ka];
        for (&i, &j) in da.iter().zip(&db) {
            table[i][j] += 1;
        }
        let row_sums = table.iter().map(|r| r.iter().sum()).collect();
        let col_sums = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
        Ok(Self {
            table,
            row_sums,
            col_sums,
            n: a.len() as u64,
        })
    }

    fn entropy(sums: &[u64], n: u64) -> f64 {
        let n = n as f64;
        -sums
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.ln()
            })
            .sum::<f64>()
    }

    pub fn entropy_rows(&self) -> f64 {
        Self::entropy(&self.row_sums, self.n)
    }

    pub fn entropy_cols(&self) -> f64 {
        Self::entropy(&self.col_sums, self.n)
    }

    pub fn mutual_information(&self) -> f64 {
        let n = self.n as f64;
        let mut mi = 0.0;
        for (i, row) in self.table.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let c = c as f64;
                let ab = self.row_sums[i] as f64 * self.col_sums[j] as f64;
                mi += c / n * (n * c / ab).ln();
            }
        }
        mi.max(0.0)
    }

    /// Both labelings induce the same partition.
    pub fn same_partition(&self) -> bool {
        let rows_ok = self.table.iter().all(|r| r.iter().filter(|&&c| c > 0).count() == 1);
        rows_ok && self.table.len() == self.col_sums.len()
    }

    /// Expected mutual information under the hypergeometric permutation model.
    pub fn expected_mutual_information(&self) -> f64 {
        let n = self.n as usize;
        let mut ln_fact = vec![0.0f64; n + 1];
        for i in 1..=n {
            ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
        }
        let nf = n as f64;
        let mut emi = 0.0;
        for &a in &self.row_sums {
            let a = a as usize;
            for &b in &self.col_sums {
                let b = b as usize;
                let lo = (a + b).saturating_sub(n).max(1);
                let hi = a.min(b);
                for nij in lo..=hi {
                    let x = nij as f64;
                    let term = x / nf * (nf * x / (a as f64 * b as f64)).ln();
                    let log_p = ln_fact[a] + ln_fact[b] + ln_fact[n - a] + ln_fact[n - b]
                        - ln_fact[n]
                        - ln_fact[nij]
                        - ln_fact[a - nij]
                        - ln_fact[b - nij]
                        - ln_fact[n + nij - a - b];
                    emi += term * log_p.exp();
                }
            }
        }
        emi
    }
}

/// Mutual information normalized by the geometric mean of the entropies.
///
/// When either entropy is zero: 1 for identical partitions, else 0.
pub fn nmi(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let c = Contingency::new(y_true, y_pred)?;
    let denom = (c.entropy_rows() * c.entropy_cols()).sqrt();
    if denom == 0.0 {
        return Ok(if c.same_partition() { 1.0 } else { 0.0 });
    }
    Ok((c.mutual_information() / denom).clamp(0.0, 1.0))
}

/// Adjusted mutual information with the arithmetic-mean normalizer.
pub fn ami(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let c = Contingency::new(y_true, y_pred)?;
    let (ka, kb) = (c.row_sums.len(), c.col_sums.len());
    if ka == kb && (ka == 1 || ka as u64 == c.n) {
        return Ok(1.0);
    }
    let mi = c.mutual_information();
    let emi = c.expected_mutual_information();
    let normalizer = 0.5 * (c.entropy_rows() + c.entropy_cols());
    let mut denom = normalizer - emi;
    denom = if denom < 0.0 {
        denom.min(-f64::EPSILON)
    } else {
        denom.max(f64::EPSILON)
    };
    Ok((mi - emi) / denom)
}

fn comb2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from pair counts.
pub fn ari(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let c = Contingency::new(y_true, y_pred)?;
    let index: f64 = c.table.iter().flatten().map(|&v| comb2(v)).sum();
    let rows: f64 = c.row_sums.iter().map(|&v| comb2(v)).sum();
    let cols: f64 = c.col_sums.iter().map(|&v| comb2(v)).sum();
    let pairs = comb2(c.n);
    let expected = if pairs > 0.0 { rows * cols / pairs } else { 0.0 };
    let max = 0.5 * (rows + cols);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Best matched fraction over injective cluster-to-class maps (Hungarian).
pub fn cluster_acc(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let c = Contingency::new(y_true, y_pred)?;
    let size = c.row_sums.len().max(c.col_sums.len());
    // rows: predicted clusters, columns: true classes, zero-padded square
    let mut weights = Matrix::new(size, size, 0i64);
    for (t, row) in c.table.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            weights[(p, t)] = v as i64;
        }
    }
    let (matched, _) = kuhn_munkres(&weights);
    Ok(matched as f64 / c.n as f64)
}

/// `N_min / N_max` over the clusters present in `labels`.
pub fn imbalance_ratio(labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(NccError::Contract("imbalance ratio of an empty labeling".into()));
    }
    let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let min = *counts.values().min().expect("non-empty");
    let max = *counts.values().max().expect("non-empty");
    Ok(min as f64 / max as f64)
}

/// Mean over dimensions of the per-dimension (population) standard deviation.
/// About `1/√d` for uniformly spread unit rows, near 0 under collapse.
pub fn uniformity_std(z: &Tensor) -> f64 {
    let [n, d] = z.shape();
    if n == 0 || d == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| z.get(i, j)).sum::<f64>() / nf;
        let var = (0..n).map(|i| (z.get(i, j) - mean).powi(2)).sum::<f64>() / nf;
        total += var.sqrt();
    }
    total / d as f64
}
