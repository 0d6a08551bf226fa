//! Pairwise contrastive baselines: InfoNCE over augmented-view pairs and
//! supervised contrastive loss (log outside the positive average).
//!
//! Both losses are means over anchors. For anchor `i` with positive set
//! `P(i)` and all-but-self set `A(i)`:
//!
//! ```text
//! l_i = -1/|P(i)| Σ_{p ∈ P(i)} [ s_ip - log Σ_{a ∈ A(i)} exp(s_ia) ],   s_ij = z_i · z_j / tau
//! ```
//!
//! InfoNCE is the case where `P(i)` is the single other view of the same
//! instance.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;

/// Unit embeddings with class labels and the id of the source instance each
/// augmented view came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseBatch {
    pub vectors: Array2<f64>,
    pub labels: Vec<usize>,
    pub view_ids: Vec<usize>,
}

impl PairwiseBatch {
    pub fn new(vectors: Array2<f64>, labels: Vec<usize>, view_ids: Vec<usize>) -> Result<Self> {
        if vectors.nrows() != labels.len() || labels.len() != view_ids.len() {
            return Err(Error::shape(
                format!("{} labels and view ids", vectors.nrows()),
                format!("{} labels, {} view ids", labels.len(), view_ids.len()),
            ));
        }
        Ok(Self {
            vectors,
            labels,
            view_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn infonce_positives(&self) -> Result<Vec<Vec<usize>>> {
        (0..self.len())
            .map(|i| {
                let partners: Vec<usize> = (0..self.len())
                    .filter(|&j| j != i && self.view_ids[j] == self.view_ids[i])
                    .collect();
                if partners.len() == 1 {
                    Ok(partners)
                } else {
                    Err(Error::MissingPositive { anchor: i })
                }
            })
            .collect()
    }

    fn supcon_positives(&self) -> Result<Vec<Vec<usize>>> {
        (0..self.len())
            .map(|i| {
                let partners: Vec<usize> = (0..self.len())
                    .filter(|&j| j != i && self.labels[j] == self.labels[i])
                    .collect();
                if partners.is_empty() {
                    Err(Error::NoPositive { anchor: i })
                } else {
                    Ok(partners)
                }
            })
            .collect()
    }
}

/// Mean InfoNCE loss over anchors.
pub fn infonce_loss(batch: &PairwiseBatch, tau: f64) -> Result<f64> {
    Ok(infonce_loss_and_grad(batch, tau)?.0)
}

/// Mean supervised contrastive loss over anchors.
pub fn supcon_loss(batch: &PairwiseBatch, tau: f64) -> Result<f64> {
    Ok(supcon_loss_and_grad(batch, tau)?.0)
}

/// Loss and its gradient with respect to every embedding row.
pub fn infonce_loss_and_grad(batch: &PairwiseBatch, tau: f64) -> Result<(f64, Array2<f64>)> {
    check_tau(tau)?;
    let positives = batch.infonce_positives()?;
    Ok(multi_positive_loss(batch.vectors.view(), &positives, tau))
}

pub fn supcon_loss_and_grad(batch: &PairwiseBatch, tau: f64) -> Result<(f64, Array2<f64>)> {
    check_tau(tau)?;
    let positives = batch.supcon_positives()?;
    Ok(multi_positive_loss(batch.vectors.view(), &positives, tau))
}

/// InfoNCE term for a single anchor, for batches where not every row has a
/// partner view.
pub fn infonce_anchor_loss(batch: &PairwiseBatch, anchor: usize, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let partners: Vec<usize> = (0..batch.len())
        .filter(|&j| j != anchor && batch.view_ids[j] == batch.view_ids[anchor])
        .collect();
    let &[positive] = partners.as_slice() else {
        return Err(Error::MissingPositive { anchor });
    };
    let z = batch.vectors.view();
    let sims: Vec<f64> = (0..batch.len())
        .filter(|&j| j != anchor)
        .map(|j| z.row(anchor).dot(&z.row(j)) / tau)
        .collect();
    Ok(log_sum_exp(&sims) - z.row(anchor).dot(&z.row(positive)) / tau)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")))
    }
}

fn multi_positive_loss(z: ArrayView2<'_, f64>, positives: &[Vec<usize>], tau: f64) -> (f64, Array2<f64>) {
    let n = z.nrows();
    let sims = z.dot(&z.t()) / tau;
    // coeff[i][j] = dl_i/ds_ij.
    let mut coeff = Array2::<f64>::zeros((n, n));
    let mut total = 0.0;
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let row: Vec<f64> = others.iter().map(|&j| sims[[i, j]]).collect();
        let lse = log_sum_exp(&row);
        let weight = 1.0 / positives[i].len() as f64;
        total += positives[i].iter().map(|&p| lse - sims[[i, p]]).sum::<f64>() * weight;
        for (&j, s) in others.iter().zip(&row) {
            coeff[[i, j]] += (s - lse).exp();
        }
        for &p in &positives[i] {
            coeff[[i, p]] -= weight;
        }
    }
    let scale = 1.0 / (n as f64 * tau);
    // s_ij depends on z_i and z_j symmetrically.
    let sym = &coeff + &coeff.t();
    let grad = sym.dot(&z) * scale;
    (total / n as f64, grad)
}
