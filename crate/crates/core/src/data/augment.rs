use ndarray::{Array2, ArrayView1, ArrayViewMut1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ImageShape, LabeledDataset};
use crate::error::{Error, Result};
use crate::numeric::mix_seed;

/// Crop, flip and per-channel brightness jitter for images; multiplicative
/// per-coordinate jitter for plain vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationPolicy {
    pub flip_prob: f64,
    pub crop_padding: usize,
    /// Scales are drawn uniformly from `[1 - s, 1 + s]`.
    pub jitter_strength: f64,
    pub rng_seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_padding: 4,
            jitter_strength: 0.2,
            rng_seed: 0,
        }
    }
}

impl AugmentationPolicy {
    /// Leaves every sample untouched.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            crop_padding: 0,
            jitter_strength: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob)));
        }
        if !(0.0..=1.0).contains(&self.jitter_strength) {
            return Err(Error::Config(format!(
                "jitter_strength must lie in [0, 1], got {}",
                self.jitter_strength
            )));
        }
        Ok(())
    }
}

/// Two augmented views per selected sample. Rows `2k` and `2k + 1` come from
/// `indices[k]` and share view id `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub view_ids: Vec<usize>,
}

/// Draws two views of each `indices` entry. `stream` selects the call's
/// random stream (the training loop passes the step number); every sample
/// gets its own generator derived from the policy seed, the stream and the
/// dataset index, so the result does not depend on evaluation order.
pub fn two_views(
    dataset: &LabeledDataset,
    policy: &AugmentationPolicy,
    indices: &[usize],
    stream: u64,
) -> Result<ViewBatch> {
    policy.validate()?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::InvalidInput(format!(
            "index {bad} out of range for {} samples",
            dataset.len()
        )));
    }
    let dim = dataset.input_dim();
    let mut inputs = Array2::<f64>::zeros((2 * indices.len(), dim));
    let mut labels = Vec::with_capacity(2 * indices.len());
    let mut view_ids = Vec::with_capacity(2 * indices.len());
    let call_seed = mix_seed(policy.rng_seed, stream);
    for (k, &idx) in indices.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(call_seed, idx as u64));
        let source = dataset.samples.row(idx);
        for v in 0..2 {
            let out = inputs.row_mut(2 * k + v);
            match dataset.image_shape {
                Some(shape) => augment_image(source, out, shape, policy, &mut rng),
                None => augment_vector(source, out, policy, &mut rng),
            }
            labels.push(dataset.labels[idx]);
            view_ids.push(k);
        }
    }
    Ok(ViewBatch {
        inputs,
        labels,
        view_ids,
    })
}

fn augment_vector(
    source: ArrayView1<'_, f64>,
    mut out: ArrayViewMut1<'_, f64>,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) {
    let s = policy.jitter_strength;
    for (o, &x) in out.iter_mut().zip(source) {
        *o = if s > 0.0 { x * rng.random_range(1.0 - s..=1.0 + s) } else { x };
    }
}

fn augment_image(
    source: ArrayView1<'_, f64>,
    mut out: ArrayViewMut1<'_, f64>,
    shape: ImageShape,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) {
    let ImageShape { channels, height, width } = shape;
    let pad = policy.crop_padding as i64;
    // Offset of the crop window inside the zero-padded image, minus the pad.
    let (dy, dx) = if pad > 0 {
        (rng.random_range(-pad..=pad) as isize, rng.random_range(-pad..=pad) as isize)
    } else {
        (0, 0)
    };
    let flip = policy.flip_prob > 0.0 && rng.random_bool(policy.flip_prob);
    let s = policy.jitter_strength;
    for c in 0..channels {
        let scale = if s > 0.0 { rng.random_range(1.0 - s..=1.0 + s) } else { 1.0 };
        for y in 0..height {
            for x in 0..width {
                let sx = if flip { width - 1 - x } else { x } as isize + dx;
                let sy = y as isize + dy;
                let inside = (0..height as isize).contains(&sy) && (0..width as isize).contains(&sx);
                let value = if inside {
                    source[(c * height + sy as usize) * width + sx as usize]
                } else {
                    0.0
                };
                out[(c * height + y) * width + x] = (value * scale).clamp(0.0, 1.0);
            }
        }
    }
}

/// Mirrors every row of a channel-major image left to right.
pub fn flip_horizontal(image: &[f64], shape: ImageShape) -> Result<Vec<f64>> {
    if image.len() != shape.len() {
        return Err(Error::shape(shape.len(), image.len()));
    }
    let mut out = vec![0.0; image.len()];
    for row in 0..shape.channels * shape.height {
        let base = row * shape.width;
        for x in 0..shape.width {
            out[base + x] = image[base + shape.width - 1 - x];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gaussian_mixture;
    use proptest::prelude::*;
    use rand::Rng;

    const SMALL: ImageShape = ImageShape { channels: 3, height: 4, width: 5 };

    fn image_dataset(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = Array2::from_shape_fn((n, SMALL.len()), |_| rng.random::<f64>());
        LabeledDataset::new(samples, (0..n).map(|i| i % 3).collect(), 3, Some(SMALL)).unwrap()
    }

    #[test]
    fn identity_policy_reproduces_inputs() {
        for d in [image_dataset(4, 1), gaussian_mixture(2, 2, 3, 1.0, 0).unwrap()] {
            let b = two_views(&d, &AugmentationPolicy::identity(), &[3, 0], 7).unwrap();
            for k in 0..2 {
                let src = d.samples.row([3, 0][k]);
                assert_eq!(b.inputs.row(2 * k), src);
                assert_eq!(b.inputs.row(2 * k + 1), src);
            }
            assert_eq!(b.view_ids, vec![0, 0, 1, 1]);
            assert_eq!(b.labels, vec![d.labels[3], d.labels[3], d.labels[0], d.labels[0]]);
        }
    }

    #[test]
    fn flip_only_policy_matches_flip_function() {
        let d = image_dataset(1, 2);
        let policy = AugmentationPolicy { flip_prob: 1.0, ..AugmentationPolicy::identity() };
        let b = two_views(&d, &policy, &[0], 0).unwrap();
        let flipped = flip_horizontal(d.samples.row(0).as_slice().unwrap(), SMALL).unwrap();
        assert_eq!(b.inputs.row(0).to_vec(), flipped);
    }

    #[test]
    fn flip_is_an_involution_on_cifar_shaped_images() {
        let shape = ImageShape { channels: 3, height: 32, width: 32 };
        let image: Vec<f64> = (0..shape.len()).map(|i| (i % 251) as f64 / 250.0).collect();
        let once = flip_horizontal(&image, shape).unwrap();
        assert_ne!(once, image);
        assert_eq!(flip_horizontal(&once, shape).unwrap(), image);
        assert!(flip_horizontal(&image[1..], shape).is_err());
    }

    #[test]
    fn seeded_calls_repeat_and_streams_differ() {
        let d = image_dataset(6, 3);
        let policy = AugmentationPolicy { rng_seed: 11, ..Default::default() };
        let a = two_views(&d, &policy, &[0, 1, 5], 4).unwrap();
        assert_eq!(a, two_views(&d, &policy, &[0, 1, 5], 4).unwrap());
        assert_ne!(a, two_views(&d, &policy, &[0, 1, 5], 5).unwrap());
        assert_ne!(a.inputs.row(0), a.inputs.row(1));
    }

    #[test]
    fn rejects_bad_indices_and_policies() {
        let d = image_dataset(2, 0);
        assert!(two_views(&d, &AugmentationPolicy::default(), &[2], 0).is_err());
        let bad = AugmentationPolicy { flip_prob: 1.5, ..Default::default() };
        assert!(two_views(&d, &bad, &[0], 0).is_err());
    }

    proptest! {
        #[test]
        fn images_stay_in_unit_range(seed in any::<u64>(), pad in 0usize..6, s in 0.0f64..1.0) {
            let d = image_dataset(3, seed);
            let policy = AugmentationPolicy { flip_prob: 0.5, crop_padding: pad, jitter_strength: s, rng_seed: seed };
            let b = two_views(&d, &policy, &[0, 1, 2], seed).unwrap();
            prop_assert!(b.inputs.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(b.labels, vec![0, 0, 1, 1, 2, 2]);
        }

        #[test]
        fn vector_jitter_is_bounded_scaling(seed in any::<u64>(), s in 0.0f64..0.5) {
            let d = gaussian_mixture(2, 3, 4, 2.0, seed).unwrap();
            let policy = AugmentationPolicy { jitter_strength: s, rng_seed: seed, ..Default::default() };
            let b = two_views(&d, &policy, &[0, 4], 0).unwrap();
            for (k, &i) in [0usize, 4].iter().enumerate() {
                for v in 0..2 {
                    for (o, x) in b.inputs.row(2 * k + v).iter().zip(d.samples.row(i)) {
                        let ratio = o / x;
                        prop_assert!(ratio >= 1.0 - s - 1e-12 && ratio <= 1.0 + s + 1e-12);
                    }
                }
            }
        }
    }
}
