//! Embedding evaluation: cosine KNN, Ward clustering, external clustering
//! metrics and the repeated few-shot protocol.

mod knn;
mod metrics;
mod ward;

pub use knn::{knn_classify, knn_classify_rows, KnnConfig, KnnResult};
pub use metrics::{clustering_metrics, pair_counts, ClusteringReport, PairCounts};
pub use ward::{cut_merges, ward_cluster, ward_linkage, WardMerge};

use serde::Serialize;

use crate::data::LabeledDataset;
use crate::error::Result;
use crate::numeric::mix_seed;

/// Default number of few-shot repetitions.
pub const DEFAULT_FEW_SHOT_REPEATS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FewShotReport {
    pub per_class: usize,
    pub repeats: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(repeats)`; 0 for one repeat.
    pub stderr: f64,
}

impl FewShotReport {
    pub fn from_accuracies(per_class: usize, accuracies: Vec<f64>) -> Self {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let stderr = if accuracies.len() < 2 {
            0.0
        } else {
            let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Self {
            per_class,
            repeats: accuracies.len(),
            accuracies,
            mean,
            stderr,
        }
    }
}

/// Repeats: draw `per_class` samples of every class, `train_fn` on the
/// subset, score with `eval_fn`. Repeat `r` subsamples with a seed derived
/// from `seed` and `r`, which is also handed to `train_fn`.
pub fn few_shot_eval<M>(
    dataset: &LabeledDataset,
    per_class: usize,
    repeats: usize,
    seed: u64,
    mut train_fn: impl FnMut(&LabeledDataset, u64) -> Result<M>,
    mut eval_fn: impl FnMut(&M) -> Result<f64>,
) -> Result<FewShotReport> {
    if repeats == 0 {
        return Err(crate::Error::InvalidInput("few-shot needs at least one repeat".into()));
    }
    let mut accuracies = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let repeat_seed = mix_seed(seed, r as u64);
        let subset = dataset.subsample_per_class(per_class, repeat_seed)?;
        let model = train_fn(&subset, repeat_seed)?;
        accuracies.push(eval_fn(&model)?);
    }
    Ok(FewShotReport::from_accuracies(per_class, accuracies))
}

/// Accuracy of a KNN classifier whose references are `train` and whose
/// queries are `test`, both given as embedding rows.
pub fn knn_accuracy(
    train: &LabeledDataset,
    test: &LabeledDataset,
    k: usize,
) -> Result<f64> {
    Ok(knn_classify_rows(
        train.samples.view(),
        &train.labels,
        test.samples.view(),
        &test.labels,
        KnnConfig { k },
    )?
    .accuracy)
}
