use std::path::Path;

use ndarray::Array2;

use super::{ImageShape, LabeledDataset};
use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by 3072 channel-major pixel bytes.
pub const CIFAR_RECORD_BYTES: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

fn shape() -> ImageShape {
    ImageShape {
        channels: CIFAR_CHANNELS,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
    }
}

/// Decodes CIFAR-10 binary records, scaling pixels to `[0, 1]`.
pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::MalformedFile(format!(
            "{} bytes is not a positive multiple of the {CIFAR_RECORD_BYTES}-byte record size",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let pixels = CIFAR_RECORD_BYTES - 1;
    let mut samples = Array2::<f64>::zeros((n, pixels));
    let mut labels = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::MalformedFile(format!("record {i} has label byte {label}")));
        }
        labels.push(label);
        for (dst, &src) in samples.row_mut(i).iter_mut().zip(&record[1..]) {
            *dst = f64::from(src) / 255.0;
        }
    }
    LabeledDataset::new(samples, labels, CIFAR_CLASSES, Some(shape()))
}

/// Loads a single CIFAR-10 binary batch file.
pub fn load_cifar10(path: &Path) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes)
}

/// Loads the training batches and the test batch of an extracted
/// `cifar-10-batches-bin` directory as `(train, test)`.
pub fn load_cifar10_dir(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut bytes = Vec::new();
    for name in TRAIN_FILES {
        let path = dir.join(name);
        bytes.extend(std::fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    let train = parse_cifar10(&bytes)?;
    let test = load_cifar10(&dir.join(TEST_FILE))?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        std::iter::once(label).chain((0..CIFAR_RECORD_BYTES - 1).map(fill)).collect()
    }

    #[test]
    fn two_records() {
        let mut bytes = record(7, |i| (i % 256) as u8);
        bytes.extend(record(0, |_| 255));
        let d = parse_cifar10(&bytes).unwrap();
        assert_eq!((d.len(), d.input_dim()), (2, 3072));
        assert_eq!(d.labels, vec![7, 0]);
        assert_eq!(d.labels[0], bytes[0] as usize);
        assert_eq!(d.samples[[0, 0]], 0.0);
        assert_eq!(d.samples[[0, 255]], 1.0);
        assert_eq!(d.samples[[0, 1]], 1.0 / 255.0);
        assert!(d.samples.row(1).iter().all(|&v| v == 1.0));
        assert_eq!(d.image_shape, Some(shape()));
    }

    #[test]
    fn truncated_and_bad_labels() {
        let bytes = record(3, |_| 0);
        assert!(matches!(parse_cifar10(&bytes[..100]), Err(Error::MalformedFile(_))));
        assert!(matches!(parse_cifar10(&[]), Err(Error::MalformedFile(_))));
        assert!(matches!(parse_cifar10(&record(10, |_| 0)), Err(Error::MalformedFile(_))));
    }

    #[test]
    fn directory_loader() {
        let dir = tempfile::tempdir().unwrap();
        for (k, name) in TRAIN_FILES.iter().enumerate() {
            std::fs::write(dir.path().join(name), record(k as u8, |_| 1)).unwrap();
        }
        std::fs::write(dir.path().join(TEST_FILE), record(9, |_| 2)).unwrap();
        let (train, test) = load_cifar10_dir(dir.path()).unwrap();
        assert_eq!(train.labels, vec![0, 1, 2, 3, 4]);
        assert_eq!(test.labels, vec![9]);
        assert!(load_cifar10(&dir.path().join("missing.bin")).is_err());
    }
}
