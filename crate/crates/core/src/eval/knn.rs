use std::cmp::Ordering;

use ndarray::ArrayView2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::objective::EmbeddingBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KnnConfig {
    pub k: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KnnResult {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

/// Majority vote among the `k` references closest in cosine distance
/// `1 - z·r`. Neighbors at equal distance are taken in reference order;
/// tied votes go to the class with the smaller summed distance, then to the
/// smaller label.
pub fn knn_classify(refs: &EmbeddingBatch, queries: &EmbeddingBatch, cfg: KnnConfig) -> Result<KnnResult> {
    let ref_labels: Vec<usize> = (0..refs.len()).map(|i| refs.original_label(i)).collect();
    let query_labels: Vec<usize> = (0..queries.len()).map(|i| queries.original_label(i)).collect();
    knn_classify_rows(refs.vectors(), &ref_labels, queries.vectors(), &query_labels, cfg)
}

/// [`knn_classify`] on raw rows, which are assumed to be unit length.
pub fn knn_classify_rows(
    refs: ArrayView2<'_, f64>,
    ref_labels: &[usize],
    queries: ArrayView2<'_, f64>,
    query_labels: &[usize],
    cfg: KnnConfig,
) -> Result<KnnResult> {
    if refs.nrows() != ref_labels.len() {
        return Err(Error::shape(refs.nrows(), ref_labels.len()));
    }
    if queries.nrows() != query_labels.len() {
        return Err(Error::shape(queries.nrows(), query_labels.len()));
    }
    if refs.ncols() != queries.ncols() {
        return Err(Error::DimMismatch(format!(
            "references have dimension {}, queries {}",
            refs.ncols(),
            queries.ncols()
        )));
    }
    if cfg.k == 0 || cfg.k > refs.nrows() {
        return Err(Error::InvalidInput(format!(
            "k = {} must lie in [1, {}]",
            cfg.k,
            refs.nrows()
        )));
    }
    let sims = queries.dot(&refs.t());
    let mut predictions = Vec::with_capacity(queries.nrows());
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(refs.nrows());
    for row in sims.outer_iter() {
        order.clear();
        order.extend(row.iter().enumerate().map(|(j, s)| (1.0 - s, j)));
        let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if cfg.k < order.len() {
            order.select_nth_unstable_by(cfg.k - 1, by_distance);
            order.truncate(cfg.k);
        }
        order.sort_unstable_by(by_distance);
        predictions.push(vote(order.iter().map(|&(d, j)| (ref_labels[j], d))));
    }
    let correct = predictions.iter().zip(query_labels).filter(|(p, t)| p == t).count();
    let accuracy = if predictions.is_empty() {
        0.0
    } else {
        correct as f64 / predictions.len() as f64
    };
    Ok(KnnResult { predictions, accuracy })
}

/// Winner of `(label, distance)` votes under the tie rule above.
fn vote(neighbors: impl Iterator<Item = (usize, f64)>) -> usize {
    let mut tally: Vec<(usize, usize, f64)> = Vec::new();
    for (label, distance) in neighbors {
        match tally.iter_mut().find(|t| t.0 == label) {
            Some(t) => {
                t.1 += 1;
                t.2 += distance;
            }
            None => tally.push((label, 1, distance)),
        }
    }
    tally
        .into_iter()
        .min_by(|a, b| {
            b.1.cmp(&a.1)
                .then(a.2.partial_cmp(&b.2).unwrap_or(Ordering::Equal))
                .then(a.0.cmp(&b.0))
        })
        .map(|t| t.0)
        .expect("k >= 1")
}
