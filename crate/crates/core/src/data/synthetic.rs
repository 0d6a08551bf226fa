use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::LabeledDataset;
use crate::error::{Error, Result};

/// `per_class` samples for each of `num_classes` isotropic unit Gaussians
/// whose means lie on a sphere of radius `separation`. Rows are grouped by
/// class; the result depends only on the arguments.
pub fn gaussian_mixture(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::InvalidInput("mixture counts must be positive".into()));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "separation must be non-negative, got {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let direction: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
            direction.iter().map(|x| separation * x / norm).collect()
        })
        .collect();
    let n = num_classes * per_class;
    let mut samples = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for k in 0..per_class {
            let mut row = samples.row_mut(class * per_class + k);
            for (x, m) in row.iter_mut().zip(mean) {
                let noise: f64 = rng.sample(StandardNormal);
                *x = m + noise;
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(samples, labels, num_classes, None)
}
