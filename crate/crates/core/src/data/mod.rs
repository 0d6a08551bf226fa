//! Datasets: seeded Gaussian mixtures, the CIFAR-10 binary format, CSV
//! round-tripping and two-view augmentation.

mod augment;
mod cifar;
mod synthetic;

pub use augment::{flip_horizontal, two_views, AugmentationPolicy, ViewBatch};
pub use cifar::{
    load_cifar10, load_cifar10_dir, parse_cifar10, CIFAR_CHANNELS, CIFAR_CLASSES, CIFAR_RECORD_BYTES,
    CIFAR_SIDE,
};
pub use synthetic::gaussian_mixture;

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Channel-major image layout of each sample row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub samples: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// `Some` for image datasets; enables crop and flip augmentation.
    pub image_shape: Option<ImageShape>,
}

impl LabeledDataset {
    pub fn new(
        samples: Array2<f64>,
        labels: Vec<usize>,
        class_count: usize,
        image_shape: Option<ImageShape>,
    ) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::InvalidInput("dataset has no samples".into()));
        }
        if samples.nrows() != labels.len() {
            return Err(Error::shape(samples.nrows(), labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidInput(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        if let Some(shape) = image_shape {
            if shape.len() != samples.ncols() {
                return Err(Error::shape(shape.len(), samples.ncols()));
            }
        }
        Ok(Self {
            samples,
            labels,
            class_count,
            image_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            samples: self.samples.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            image_shape: self.image_shape,
        }
    }

    /// Leading `n` rows (all of them if `n` is 0 or too large).
    pub fn truncate(&self, n: usize) -> Self {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        self.select(&(0..n).collect::<Vec<_>>())
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.input_dim() != other.input_dim() || self.image_shape != other.image_shape {
            return Err(Error::DimMismatch(format!(
                "cannot append {}-wide rows to {}-wide rows",
                other.input_dim(),
                self.input_dim()
            )));
        }
        let samples = ndarray::concatenate(Axis(0), &[self.samples.view(), other.samples.view()])
            .expect("widths checked");
        let labels = self.labels.iter().chain(&other.labels).copied().collect();
        Self::new(samples, labels, self.class_count.max(other.class_count), self.image_shape)
    }

    /// Sample indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    /// Stratified split: each class contributes `round(fraction · size)`
    /// samples (at least one while the class has two) to the second part.
    /// Disjoint and deterministic in `seed`.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0 < fraction && fraction < 1.0) {
            return Err(Error::InvalidInput(format!(
                "split fraction must lie in (0, 1), got {fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for mut members in self.class_indices() {
            members.shuffle(&mut rng);
            let mut take = (members.len() as f64 * fraction).round() as usize;
            if members.len() >= 2 {
                take = take.clamp(1, members.len() - 1);
            }
            let held = members.split_off(members.len() - take.min(members.len()));
            first.extend(members);
            second.extend(held);
        }
        first.sort_unstable();
        second.sort_unstable();
        if first.is_empty() || second.is_empty() {
            return Err(Error::InvalidInput("split produced an empty part".into()));
        }
        Ok((self.select(&first), self.select(&second)))
    }

    /// `per_class` random samples of every class present, for the few-shot
    /// protocol.
    pub fn subsample_per_class(&self, per_class: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = Vec::with_capacity(per_class * self.class_count);
        for (class_id, mut members) in self.class_indices().into_iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            if members.len() < per_class {
                return Err(Error::InsufficientSamples {
                    class_id,
                    available: members.len(),
                    requested: per_class,
                });
            }
            members.shuffle(&mut rng);
            chosen.extend_from_slice(&members[..per_class]);
        }
        chosen.sort_unstable();
        Ok(self.select(&chosen))
    }
}

/// Writes `label,x0,...,x{D-1}` rows using the shortest representation that
/// parses back to the same `f64`.
pub fn write_dataset_csv<W: Write>(dataset: &LabeledDataset, writer: W) -> Result<()> {
    write_labeled_rows(writer, "x", &dataset.labels, &dataset.samples, |v| v.to_string())
}

pub fn save_dataset_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset_csv(dataset, std::io::BufWriter::new(file))
}

/// Reads a dataset written by [`write_dataset_csv`]; `class_count` is one
/// more than the largest label.
pub fn read_dataset_csv<R: Read>(reader: R) -> Result<LabeledDataset> {
    let (labels, samples) = read_labeled_rows(reader, "x")?;
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(samples, labels, class_count, None)
}

pub fn load_dataset_csv(path: &Path) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset_csv(std::io::BufReader::new(file))
}

pub(crate) fn write_labeled_rows<W: Write>(
    writer: W,
    prefix: &str,
    labels: &[usize],
    rows: &Array2<f64>,
    format: impl Fn(f64) -> String,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let header = std::iter::once("label".to_string())
        .chain((0..rows.ncols()).map(|j| format!("{prefix}{j}")));
    out.write_record(header)?;
    for (label, row) in labels.iter().zip(rows.outer_iter()) {
        let record = std::iter::once(label.to_string()).chain(row.iter().map(|&v| format(v)));
        out.write_record(record)?;
    }
    out.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub(crate) fn read_labeled_rows<R: Read>(reader: R, prefix: &str) -> Result<(Vec<usize>, Array2<f64>)> {
    let mut input = csv::Reader::from_reader(reader);
    let header = input.headers()?.clone();
    let width = header.len().saturating_sub(1);
    let expected = std::iter::once("label".to_string()).chain((0..width).map(|j| format!("{prefix}{j}")));
    if width == 0 || !header.iter().eq(expected.clone()) {
        return Err(Error::MalformedFile(format!(
            "expected header label,{prefix}0,...; got {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (line, record) in input.records().enumerate() {
        let record = record?;
        let bad = |what: &str| Error::MalformedFile(format!("data row {}: {what}", line + 1));
        if record.len() != width + 1 {
            return Err(bad("wrong number of columns"));
        }
        labels.push(record[0].trim().parse::<usize>().map_err(|_| bad("bad label"))?);
        for field in record.iter().skip(1) {
            values.push(field.trim().parse::<f64>().map_err(|_| bad("bad value"))?);
        }
    }
    let rows = Array2::from_shape_vec((labels.len(), width), values).expect("row widths checked");
    Ok((labels, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_stratified_and_deterministic() {
        let d = gaussian_mixture(3, 10, 4, 2.0, 9).unwrap();
        let (a, b) = d.split(0.2, 1).unwrap();
        let (a2, b2) = d.split(0.2, 1).unwrap();
        assert_eq!((a.clone(), b.clone()), (a2, b2));
        assert_eq!(a.len() + b.len(), 30);
        assert_eq!(b.len(), 6);
        for class in b.class_indices() {
            assert_eq!(class.len(), 2);
        }
        for row in b.samples.outer_iter() {
            assert!(!a.samples.outer_iter().any(|r| r == row));
        }
    }

    #[test]
    fn subsample_checks_class_sizes() {
        let d = gaussian_mixture(2, 5, 3, 1.0, 0).unwrap();
        let s = d.subsample_per_class(3, 4).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(d.subsample_per_class(5, 4).unwrap(), d);
        assert!(matches!(
            d.subsample_per_class(6, 4),
            Err(Error::InsufficientSamples { requested: 6, available: 5, .. })
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let d = gaussian_mixture(3, 4, 5, 3.0, 2).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("label,x0,x1,x2,x3,x4\n"));
        assert_eq!(read_dataset_csv(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn csv_rejects_bad_headers_and_rows() {
        assert!(read_dataset_csv("label,y0\n0,1.0\n".as_bytes()).is_err());
        assert!(read_dataset_csv("label,x0\n0,abc\n".as_bytes()).is_err());
        assert!(read_dataset_csv("label,x0\n0,1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn dataset_validation() {
        assert!(LabeledDataset::new(Array2::zeros((2, 2)), vec![0, 3], 3, None).is_err());
        assert!(LabeledDataset::new(Array2::zeros((0, 2)), vec![], 3, None).is_err());
    }
}
