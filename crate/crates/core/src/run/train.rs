use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::{DatasetKind, LossKind, RunConfig};
use crate::baselines::{infonce_loss_and_grad, supcon_loss_and_grad, PairwiseBatch};
use crate::data::{gaussian_mixture, load_cifar10_dir, two_views, LabeledDataset};
use crate::encoder::MlpEncoder;
use crate::error::{Error, Result};
use crate::eval::knn_accuracy;
use crate::numeric::mix_seed;
use crate::objective::{varcon_loss_with, EmbeddingBatch, LossOptions};
use crate::optim::{epsilon_step, LrSchedule, Sgd};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.vck";
pub const CONFIG_FILE: &str = "config.cfg";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FAILURE_FILE: &str = "failure.json";

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const SPLIT_STREAM: u64 = 0x5350_4c54;
const EMBED_CHUNK: usize = 1024;

/// One optimizer step. VarCon-only fields are omitted for the baselines.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    /// Epsilon used for this step's loss.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_p_anchor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub loss: String,
    pub steps: usize,
    pub epochs: usize,
    pub train_size: usize,
    pub val_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_epsilon: Option<f64>,
    pub knn_k: usize,
    pub val_knn_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
    pub summary: TrainSummary,
}

/// Train and validation sets described by `config`.
pub fn prepare_data(config: &RunConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match config.dataset {
        DatasetKind::Synthetic => {
            let all = gaussian_mixture(
                config.num_classes,
                config.per_class,
                config.input_dim,
                config.separation,
                config.data_seed,
            )?;
            all.split(config.val_fraction, mix_seed(config.data_seed, SPLIT_STREAM))
        }
        DatasetKind::Cifar10 => {
            let dir = config
                .cifar_dir
                .as_deref()
                .ok_or_else(|| Error::Config("dataset = cifar10 requires cifar_dir".into()))?;
            let (train, test) = load_cifar10_dir(dir)?;
            Ok((
                train.truncate(config.cifar_train_limit),
                test.truncate(config.cifar_val_limit),
            ))
        }
    }
}

/// Unaugmented embeddings of every sample, as a dataset of unit rows.
pub fn embed_dataset(encoder: &MlpEncoder, dataset: &LabeledDataset) -> Result<LabeledDataset> {
    if dataset.input_dim() != encoder.input_dim() {
        return Err(Error::DimMismatch(format!(
            "encoder expects {} inputs, dataset has {}",
            encoder.input_dim(),
            dataset.input_dim()
        )));
    }
    let mut out = Array2::<f64>::zeros((dataset.len(), encoder.output_dim()));
    let mut start = 0;
    while start < dataset.len() {
        let end = (start + EMBED_CHUNK).min(dataset.len());
        let (z, _) = encoder.forward(dataset.samples.slice(s![start..end, ..]))?;
        out.slice_mut(s![start..end, ..]).assign(&z);
        start = end;
    }
    LabeledDataset::new(out, dataset.labels.clone(), dataset.class_count, None)
}

/// Sample order for one epoch.
fn epoch_order(train: &LabeledDataset, config: &RunConfig, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(config.seed, SHUFFLE_STREAM), epoch as u64));
    if !config.balanced_batches {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        return order;
    }
    // Round-robin over independently shuffled classes.
    let mut classes: Vec<Vec<usize>> = train.class_indices().into_iter().filter(|c| !c.is_empty()).collect();
    for c in &mut classes {
        c.shuffle(&mut rng);
    }
    let longest = classes.iter().map(Vec::len).max().unwrap_or(0);
    (0..longest)
        .flat_map(|i| classes.iter().filter_map(move |c| c.get(i).copied()))
        .collect()
}

struct StepLoss {
    total: f64,
    grad: Array2<f64>,
    kl: Option<f64>,
    nll: Option<f64>,
    mean_p_anchor: Option<f64>,
    grad_epsilon: Option<f64>,
}

/// Runs the configured optimization on `train` and scores KNN on `val`.
/// `on_step` sees every record as soon as it is produced.
pub fn train(
    config: &RunConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
    mut on_step: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let mut encoder = MlpEncoder::new(&config.layer_dims(train.input_dim()), config.seed)?;
    let mut temps = config.temperatures()?;
    let bounds = temps.bounds();
    let policy = config.augmentation();
    let options = LossOptions {
        leave_one_out: config.leave_one_out,
    };
    // Trailing partial batches are dropped; a training set smaller than one
    // batch is used whole.
    let batch_size = config.batch_size.min(train.len());
    let steps_per_epoch = train.len() / batch_size;
    let schedule = LrSchedule {
        base_lr: config.base_lr,
        warmup_epochs: config.warmup_epochs,
        total_epochs: config.epochs,
        steps_per_epoch,
    };
    let mut sgd = Sgd::new(encoder.num_params(), config.momentum, config.weight_decay);
    let mut params = encoder.params_flat();
    let mut metrics = Vec::with_capacity(schedule.total_steps());
    let mut step = 0;

    for epoch in 0..config.epochs {
        let order = epoch_order(train, config, epoch);
        for chunk in order.chunks_exact(batch_size) {
            let lr = schedule.lr_at(step);
            let at = |source: Error| Error::AtStep {
                step,
                epoch,
                source: Box::new(source),
            };
            let views = two_views(train, &policy, chunk, step as u64).map_err(at)?;
            let (z, tape) = encoder.forward(views.inputs.view()).map_err(at)?;
            let epsilon = temps.epsilon();
            let result = match config.loss {
                LossKind::VarCon => {
                    let batch = EmbeddingBatch::new(z, &views.labels).map_err(at)?;
                    let report = varcon_loss_with(&batch, &temps, options).map_err(at)?;
                    StepLoss {
                        total: report.total,
                        kl: Some(report.kl_term),
                        nll: Some(report.neg_log_posterior),
                        mean_p_anchor: Some(report.mean_p_anchor()),
                        grad_epsilon: Some(report.grad_epsilon),
                        grad: report.grad_z,
                    }
                }
                LossKind::SupCon | LossKind::InfoNce => {
                    let batch = PairwiseBatch::new(z, views.labels.clone(), views.view_ids.clone()).map_err(at)?;
                    let (total, grad) = if config.loss == LossKind::SupCon {
                        supcon_loss_and_grad(&batch, config.tau1)
                    } else {
                        infonce_loss_and_grad(&batch, config.tau1)
                    }
                    .map_err(at)?;
                    StepLoss {
                        total,
                        grad,
                        kl: None,
                        nll: None,
                        mean_p_anchor: None,
                        grad_epsilon: None,
                    }
                }
            };
            if !result.total.is_finite() || result.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    epoch,
                    loss: result.total,
                });
            }
            let grads = encoder.backward(&tape, result.grad.view()).map_err(at)?.flatten();
            sgd.step(&mut params, &grads, lr).map_err(at)?;
            encoder.set_params_flat(&params).map_err(at)?;
            if let Some(g) = result.grad_epsilon {
                temps.set_epsilon(epsilon_step(epsilon, g, lr * config.epsilon_lr_scale, bounds));
            }
            let record = MetricsRecord {
                step,
                epoch,
                lr,
                loss: result.total,
                kl: result.kl,
                nll: result.nll,
                epsilon: (config.loss == LossKind::VarCon).then_some(epsilon),
                mean_p_anchor: result.mean_p_anchor,
                grad_epsilon: result.grad_epsilon,
                wall_clock_ms: config
                    .record_wall_clock
                    .then(|| started.elapsed().as_millis() as u64),
            };
            on_step(&record)?;
            metrics.push(record);
            step += 1;
        }
    }

    let train_z = embed_dataset(&encoder, train)?;
    let val_z = embed_dataset(&encoder, val)?;
    let k = config.knn_k.min(train_z.len());
    let summary = TrainSummary {
        loss: config.loss.to_string(),
        steps: step,
        epochs: config.epochs,
        train_size: train.len(),
        val_size: val.len(),
        final_loss: metrics.last().map(|m| m.loss),
        final_epsilon: (config.loss == LossKind::VarCon).then(|| temps.epsilon()),
        knn_k: k,
        val_knn_accuracy: knn_accuracy(&train_z, &val_z, k)?,
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            encoder,
            epsilon: temps.epsilon(),
        },
        metrics,
        summary,
    })
}

/// Prepares data, trains, and writes `config.cfg`, `metrics.jsonl`,
/// `checkpoint.vck` and `summary.json` into `config.output_dir`. A
/// non-finite loss leaves `failure.json` describing the step.
pub fn run_training(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dir = config.output_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(CONFIG_FILE), config.to_text().as_bytes())?;
    let (train_set, val_set) = prepare_data(config)?;

    let metrics_path = dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut sink = BufWriter::new(file);
    let result = train(config, &train_set, &val_set, |record| {
        serde_json::to_writer(&mut sink, record)?;
        sink.write_all(b"\n").map_err(|e| Error::io(&metrics_path, e))
    });
    sink.flush().map_err(|e| Error::io(&metrics_path, e))?;
    drop(sink);

    let outcome = match result {
        Ok(outcome) => outcome,
        Err(err) => {
            if let Error::NonFiniteLoss { step, epoch, loss } = err {
                let dump = serde_json::json!({
                    "step": step,
                    "epoch": epoch,
                    "loss": loss.to_string(),
                    "seed": config.seed,
                    "aug_seed": config.aug_seed,
                    "data_seed": config.data_seed,
                });
                write_file(&dir.join(FAILURE_FILE), format!("{dump}\n").as_bytes())?;
            }
            return Err(err);
        }
    };
    outcome.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    let summary = serde_json::to_string(&outcome.summary)?;
    write_file(&dir.join(SUMMARY_FILE), format!("{summary}\n").as_bytes())?;
    Ok(outcome)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            num_classes: 3,
            per_class: 20,
            input_dim: 6,
            separation: 5.0,
            batch_size: 16,
            epochs: 2,
            warmup_epochs: 1,
            hidden_dims: vec![8],
            embed_dim: 4,
            knn_k: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let config = RunConfig { epochs: 0, warmup_epochs: 0, ..tiny() };
        let (tr, va) = prepare_data(&config).unwrap();
        let out = train(&config, &tr, &va, |_| Ok(())).unwrap();
        assert!(out.metrics.is_empty());
        let init = MlpEncoder::new(&config.layer_dims(6), config.seed).unwrap();
        assert_eq!(out.checkpoint.encoder, init);
        assert_eq!(out.checkpoint.epsilon, config.epsilon_init);
    }

    #[test]
    fn steps_are_numbered_and_epsilon_stays_in_bounds() {
        let config = tiny();
        let (tr, va) = prepare_data(&config).unwrap();
        assert_eq!(tr.len(), 48);
        let out = train(&config, &tr, &va, |_| Ok(())).unwrap();
        assert_eq!(out.metrics.len(), 6);
        let short = RunConfig { batch_size: 20, ..tiny() };
        assert_eq!(train(&short, &tr, &va, |_| Ok(())).unwrap().metrics.len(), 4);
        let whole = RunConfig { batch_size: 100, ..tiny() };
        assert_eq!(train(&whole, &tr, &va, |_| Ok(())).unwrap().metrics.len(), 2);
        for (i, m) in out.metrics.iter().enumerate() {
            assert_eq!(m.step, i);
            let e = m.epsilon.unwrap();
            assert!((0.0..=0.08).contains(&e));
            assert!((m.kl.unwrap() + m.nll.unwrap() - m.loss).abs() < 1e-12);
        }
        assert_eq!(out.metrics[0].lr, 0.0);
    }

    #[test]
    fn baselines_train_too() {
        for loss in [LossKind::SupCon, LossKind::InfoNce] {
            let config = RunConfig { loss, ..tiny() };
            let (tr, va) = prepare_data(&config).unwrap();
            let out = train(&config, &tr, &va, |_| Ok(())).unwrap();
            assert!(out.metrics.iter().all(|m| m.epsilon.is_none() && m.loss.is_finite()));
        }
    }

    #[test]
    fn balanced_order_cycles_classes() {
        let config = RunConfig { balanced_batches: true, ..tiny() };
        let (tr, _) = prepare_data(&config).unwrap();
        let order = epoch_order(&tr, &config, 0);
        let labels: Vec<usize> = order.iter().take(6).map(|&i| tr.labels[i]).collect();
        assert_eq!(labels, vec![0, 1, 2, 0, 1, 2]);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..tr.len()).collect::<Vec<_>>());
    }

    #[test]
    fn metrics_json_omits_absent_fields() {
        let m = MetricsRecord {
            step: 1,
            epoch: 0,
            lr: 0.5,
            loss: 2.0,
            kl: None,
            nll: None,
            epsilon: None,
            mean_p_anchor: None,
            grad_epsilon: None,
            wall_clock_ms: None,
        };
        assert_eq!(
            serde_json::to_string(&m).unwrap(),
            r#"{"step":1,"epoch":0,"lr":0.5,"loss":2.0}"#
        );
    }
}
