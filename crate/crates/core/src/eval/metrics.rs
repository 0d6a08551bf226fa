use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// External agreement between a reference labeling and a clustering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClusteringReport {
    pub ari: f64,
    pub nmi: f64,
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
    pub purity: f64,
}

/// Unordered point pairs by whether the two labelings put them together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairCounts {
    /// Together in both.
    pub tp: u64,
    /// Together in the clustering only.
    pub fp: u64,
    /// Together in the reference only.
    pub fn_: u64,
    /// Apart in both.
    pub tn: u64,
}

struct Contingency {
    n: usize,
    cells: Vec<Vec<usize>>,
    row_sums: Vec<usize>,
    col_sums: Vec<usize>,
}

fn dense(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    for &l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    (labels.iter().map(|l| ids[l]).collect(), ids.len())
}

impl Contingency {
    fn new(truth: &[usize], clusters: &[usize]) -> Result<Self> {
        if truth.len() != clusters.len() {
            return Err(Error::shape(truth.len(), clusters.len()));
        }
        if truth.is_empty() {
            return Err(Error::InvalidInput("labelings are empty".into()));
        }
        let (t, nt) = dense(truth);
        let (c, nc) = dense(clusters);
        let mut cells = vec![vec![0usize; nc]; nt];
        for (&i, &j) in t.iter().zip(&c) {
            cells[i][j] += 1;
        }
        let row_sums = cells.iter().map(|r| r.iter().sum()).collect();
        let col_sums = (0..nc).map(|j| cells.iter().map(|r| r[j]).sum()).collect();
        Ok(Self {
            n: truth.len(),
            cells,
            row_sums,
            col_sums,
        })
    }

    fn pairs(&self) -> PairCounts {
        let choose2 = |x: usize| (x as u64) * (x as u64).saturating_sub(1) / 2;
        let together_both: u64 = self.cells.iter().flatten().map(|&x| choose2(x)).sum();
        let together_truth: u64 = self.row_sums.iter().map(|&x| choose2(x)).sum();
        let together_pred: u64 = self.col_sums.iter().map(|&x| choose2(x)).sum();
        PairCounts {
            tp: together_both,
            fp: together_pred - together_both,
            fn_: together_truth - together_both,
            tn: choose2(self.n) + together_both - together_truth - together_pred,
        }
    }

    fn entropy(counts: &[usize], n: usize) -> f64 {
        let n = n as f64;
        -counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.ln()
            })
            .sum::<f64>()
    }

    fn mutual_information(&self) -> f64 {
        let n = self.n as f64;
        let mut mi = 0.0;
        for (i, row) in self.cells.iter().enumerate() {
            for (j, &nij) in row.iter().enumerate() {
                if nij > 0 {
                    let nij = nij as f64;
                    mi += nij / n * (n * nij / (self.row_sums[i] as f64 * self.col_sums[j] as f64)).ln();
                }
            }
        }
        mi.max(0.0)
    }
}

/// Pair-confusion counts of two labelings.
pub fn pair_counts(truth: &[usize], clusters: &[usize]) -> Result<PairCounts> {
    Ok(Contingency::new(truth, clusters)?.pairs())
}

/// ARI, NMI (arithmetic-mean normalization), homogeneity, completeness,
/// V-measure and purity. Degenerate cases follow the usual conventions:
/// ARI is 1 when no pair is split differently, a zero-entropy labeling counts
/// as perfectly homogeneous/complete, and NMI is 1 when both labelings are a
/// single cluster.
pub fn clustering_metrics(truth: &[usize], clusters: &[usize]) -> Result<ClusteringReport> {
    let table = Contingency::new(truth, clusters)?;
    let PairCounts { tp, fp, fn_, tn } = table.pairs();
    let ari = if fp == 0 && fn_ == 0 {
        1.0
    } else {
        let (tp, fp, fn_, tn) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
        2.0 * (tp * tn - fn_ * fp) / ((tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn))
    };

    let h_truth = Contingency::entropy(&table.row_sums, table.n);
    let h_pred = Contingency::entropy(&table.col_sums, table.n);
    let mi = table.mutual_information();
    let homogeneity = if h_truth == 0.0 { 1.0 } else { mi / h_truth };
    let completeness = if h_pred == 0.0 { 1.0 } else { mi / h_pred };
    let v_measure = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    let nmi = if table.row_sums.len() == 1 && table.col_sums.len() == 1 {
        1.0
    } else if mi == 0.0 {
        0.0
    } else {
        mi / (0.5 * (h_truth + h_pred))
    };

    let majority: usize = (0..table.col_sums.len())
        .map(|j| table.cells.iter().map(|r| r[j]).max().unwrap_or(0))
        .sum();
    Ok(ClusteringReport {
        ari,
        nmi,
        homogeneity,
        completeness,
        v_measure,
        purity: majority as f64 / table.n as f64,
    })
}
