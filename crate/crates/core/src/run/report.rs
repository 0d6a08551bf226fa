use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::train::embed_dataset;
use crate::data::{read_labeled_rows, write_labeled_rows, LabeledDataset};
use crate::error::{Error, Result};
use crate::eval::{
    clustering_metrics, few_shot_eval, knn_accuracy, ward_cluster, ClusteringReport, FewShotReport,
    DEFAULT_FEW_SHOT_REPEATS,
};

/// Writes `label,z0,...,z{d-1}` with nine significant digits per value.
pub fn write_embeddings<W: Write>(embeddings: &LabeledDataset, writer: W) -> Result<()> {
    write_labeled_rows(writer, "z", &embeddings.labels, &embeddings.samples, |v| format!("{v:.8e}"))
}

/// Embeds `dataset` with the checkpointed encoder and writes the dump.
pub fn export_embeddings<W: Write>(checkpoint: &Checkpoint, dataset: &LabeledDataset, writer: W) -> Result<()> {
    let embeddings = embed_dataset(&checkpoint.encoder, dataset)?;
    write_embeddings(&embeddings, writer)
}

pub fn read_embeddings<R: Read>(reader: R) -> Result<LabeledDataset> {
    let (labels, rows) = read_labeled_rows(reader, "z")?;
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(rows, labels, class_count, None)
}

pub fn load_embeddings(path: &Path) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(std::io::BufReader::new(file))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Knn,
    Cluster,
    FewShot,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(Self::Knn),
            "cluster" => Ok(Self::Cluster),
            "fewshot" => Ok(Self::FewShot),
            other => Err(Error::Config(format!(
                "unknown eval mode `{other}` (expected knn, cluster or fewshot)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalParams {
    pub k: usize,
    /// Defaults to the number of distinct query labels.
    pub num_clusters: Option<usize>,
    pub per_class: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            k: 10,
            num_clusters: None,
            per_class: 5,
            repeats: DEFAULT_FEW_SHOT_REPEATS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum EvalReport {
    Knn {
        k: usize,
        num_refs: usize,
        num_queries: usize,
        accuracy: f64,
    },
    Cluster {
        num_clusters: usize,
        num_points: usize,
        #[serde(flatten)]
        metrics: ClusteringReport,
    },
    #[serde(rename = "fewshot")]
    FewShot {
        k: usize,
        #[serde(flatten)]
        report: FewShotReport,
    },
}

impl EvalReport {
    /// Single-line JSON.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// KNN uses `refs` as the labeled memory and scores `queries`; clustering
/// runs Ward on `queries`; few-shot draws `per_class` references per class
/// from `refs` for every repeat and scores KNN on `queries`.
pub fn evaluate_embeddings(
    mode: EvalMode,
    refs: &LabeledDataset,
    queries: &LabeledDataset,
    params: EvalParams,
) -> Result<EvalReport> {
    if refs.input_dim() != queries.input_dim() {
        return Err(Error::DimMismatch(format!(
            "references have dimension {}, queries {}",
            refs.input_dim(),
            queries.input_dim()
        )));
    }
    match mode {
        EvalMode::Knn => Ok(EvalReport::Knn {
            k: params.k,
            num_refs: refs.len(),
            num_queries: queries.len(),
            accuracy: knn_accuracy(refs, queries, params.k)?,
        }),
        EvalMode::Cluster => {
            let distinct = {
                let mut l = queries.labels.clone();
                l.sort_unstable();
                l.dedup();
                l.len()
            };
            let num_clusters = params.num_clusters.unwrap_or(distinct);
            let assignment = ward_cluster(queries.samples.view(), num_clusters)?;
            Ok(EvalReport::Cluster {
                num_clusters,
                num_points: queries.len(),
                metrics: clustering_metrics(&queries.labels, &assignment)?,
            })
        }
        EvalMode::FewShot => {
            let report = few_shot_eval(
                refs,
                params.per_class,
                params.repeats,
                params.seed,
                |subset, _| Ok(subset.clone()),
                |subset| knn_accuracy(subset, queries, params.k.min(subset.len())),
            )?;
            Ok(EvalReport::FewShot { k: params.k, report })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::MlpEncoder;
    use crate::data::gaussian_mixture;
    use ndarray::array;

    #[test]
    fn export_format_and_round_trip() {
        let ck = Checkpoint {
            encoder: MlpEncoder::new(&[3, 2], 1).unwrap(),
            epsilon: 0.02,
        };
        let d = LabeledDataset::new(array![[0.3, -1.0, 2.0]], vec![4], 5, None).unwrap();
        let mut buf = Vec::new();
        export_embeddings(&ck, &d, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "label,z0,z1");
        assert_eq!(lines[1].split(',').count(), 3);
        let back = read_embeddings(buf.as_slice()).unwrap();
        let direct = embed_dataset(&ck.encoder, &d).unwrap();
        for (a, b) in back.samples.iter().zip(direct.samples.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        let norm: f64 = back.samples.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch() {
        let ck = Checkpoint {
            encoder: MlpEncoder::new(&[3, 2], 1).unwrap(),
            epsilon: 0.0,
        };
        let d = LabeledDataset::new(array![[0.3, -1.0]], vec![0], 1, None).unwrap();
        assert!(matches!(export_embeddings(&ck, &d, Vec::new()), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn report_modes() {
        let d = gaussian_mixture(3, 10, 2, 50.0, 1).unwrap();
        let knn = evaluate_embeddings(EvalMode::Knn, &d, &d, EvalParams { k: 1, ..Default::default() }).unwrap();
        assert!(matches!(knn, EvalReport::Knn { accuracy, .. } if accuracy == 1.0));
        let json = knn.to_json().unwrap();
        assert!(json.starts_with(r#"{"mode":"knn""#) && !json.contains('\n'));

        let cluster = evaluate_embeddings(EvalMode::Cluster, &d, &d, EvalParams::default()).unwrap();
        let EvalReport::Cluster { metrics, .. } = &cluster else { panic!() };
        assert_eq!(metrics.ari, 1.0);
        assert!(cluster.to_json().unwrap().contains(r#""purity":1.0"#));

        let few = evaluate_embeddings(EvalMode::FewShot, &d, &d, EvalParams { k: 3, ..Default::default() }).unwrap();
        let json = few.to_json().unwrap();
        for field in [r#""mode":"fewshot""#, r#""mean":"#, r#""stderr":"#, r#""repeats":5"#] {
            assert!(json.contains(field), "{json}");
        }
    }
}
