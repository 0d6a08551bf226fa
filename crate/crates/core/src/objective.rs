//! The variational contrastive objective in closed form.
//!
//! A mini-batch of unit embeddings is summarised by one unit centroid per
//! class present in the batch. Each embedding gets a softmax posterior over
//! those centroids at the fixed temperature `tau1`, and a target
//! distribution: a one-hot on its own class softened at a per-sample
//! temperature `tau2` that moves with the posterior's confidence in the true
//! class. The per-sample loss is
//!
//! ```text
//! KL(q || p) - log p(r | z)
//! ```
//!
//! and the batch loss is the arithmetic mean over samples. Centroids are
//! constants for differentiation; see [`crate::gradient`].

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::gradient;
use crate::numeric::{dot, l2_norm, log_softmax, normalize_in_place};

/// Tolerance on `|‖z‖ - 1|` for rows accepted as unit embeddings.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

/// A class mean with norm below this is rejected as degenerate.
pub const DEGENERATE_CENTROID_NORM: f64 = 1e-12;

/// Above this inverse temperature the target is returned as an exact one-hot.
pub const ONE_HOT_INVERSE_TEMPERATURE: f64 = 700.0;

/// Probabilities are floored here before taking logs in [`kl_divergence`].
pub const PROBABILITY_FLOOR: f64 = 1e-300;

pub const DEFAULT_EPSILON_MIN: f64 = 0.0;
pub const DEFAULT_EPSILON_MAX: f64 = 0.08;

/// Unit embeddings with class labels remapped onto the classes present.
///
/// Labels are stored densely: class `k` of the batch is the `k`-th smallest
/// original label, and [`EmbeddingBatch::class_ids`] maps back.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Array2<f64>,
    labels: Vec<usize>,
    class_ids: Vec<usize>,
}

impl EmbeddingBatch {
    /// Wraps already-normalized rows. Every row must have unit norm within
    /// [`UNIT_NORM_TOLERANCE`].
    pub fn new(vectors: Array2<f64>, labels: &[usize]) -> Result<Self> {
        if vectors.nrows() != labels.len() {
            return Err(Error::shape(
                format!("{} labels", vectors.nrows()),
                format!("{} labels", labels.len()),
            ));
        }
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(Error::InvalidInput("embedding batch is empty".into()));
        }
        for (row, v) in vectors.outer_iter().enumerate() {
            let norm = l2_norm(v);
            if !((norm - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
                return Err(Error::InvalidInput(format!(
                    "row {row} has norm {norm}, expected unit length"
                )));
            }
        }
        let mut class_ids = labels.to_vec();
        class_ids.sort_unstable();
        class_ids.dedup();
        let labels = labels
            .iter()
            .map(|l| class_ids.binary_search(l).expect("label was collected above"))
            .collect();
        Ok(Self {
            vectors,
            labels,
            class_ids,
        })
    }

    /// Normalizes every row to unit length first.
    pub fn from_unnormalized(mut vectors: Array2<f64>, labels: &[usize]) -> Result<Self> {
        for (row, v) in vectors.outer_iter_mut().enumerate() {
            let norm = l2_norm(v.view());
            if !(norm >= DEGENERATE_CENTROID_NORM) {
                return Err(Error::ZeroNorm { row, norm });
            }
            normalize_in_place(v);
        }
        Self::new(vectors, labels)
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn embedding(&self, index: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(index)
    }

    /// Dense labels in `0..num_classes_present()`.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Original label of each dense class index.
    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn num_classes_present(&self) -> usize {
        self.class_ids.len()
    }

    pub fn original_label(&self, index: usize) -> usize {
        self.class_ids[self.labels[index]]
    }
}

/// One unit centroid per class present in a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidTable {
    centroids: Array2<f64>,
    class_ids: Vec<usize>,
    member_counts: Vec<usize>,
    sums: Array2<f64>,
}

impl CentroidTable {
    pub fn centroids(&self) -> ArrayView2<'_, f64> {
        self.centroids.view()
    }

    pub fn centroid(&self, class: usize) -> ArrayView1<'_, f64> {
        self.centroids.row(class)
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn member_counts(&self) -> &[usize] {
        &self.member_counts
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// The centroid matrix seen by sample `index` when it is excluded from
    /// its own class mean.
    pub fn leave_one_out(&self, batch: &EmbeddingBatch, index: usize) -> Result<Array2<f64>> {
        let class = batch.labels()[index];
        let count = self.member_counts[class];
        let mut centroids = self.centroids.clone();
        let mut own = &self.sums.row(class) - &batch.embedding(index);
        let norm = if count > 1 {
            l2_norm(own.view()) / (count - 1) as f64
        } else {
            0.0
        };
        if !(norm >= DEGENERATE_CENTROID_NORM) {
            return Err(Error::DegenerateCentroid {
                class_id: self.class_ids[class],
                norm,
            });
        }
        normalize_in_place(own.view_mut());
        centroids.row_mut(class).assign(&own);
        Ok(centroids)
    }
}

/// Per-class mean of the batch rows, renormalized to unit length.
///
/// Each sample contributes to its own class centroid. The result is meant to
/// be held fixed while differentiating.
pub fn compute_centroids(batch: &EmbeddingBatch) -> Result<CentroidTable> {
    let classes = batch.num_classes_present();
    let mut sums = Array2::<f64>::zeros((classes, batch.dim()));
    let mut member_counts = vec![0usize; classes];
    for (v, &label) in batch.vectors().outer_iter().zip(batch.labels()) {
        let mut row = sums.row_mut(label);
        row += &v;
        member_counts[label] += 1;
    }
    let mut centroids = sums.clone();
    for (class, mut row) in centroids.outer_iter_mut().enumerate() {
        let norm = l2_norm(row.view()) / member_counts[class] as f64;
        if !(norm >= DEGENERATE_CENTROID_NORM) {
            return Err(Error::DegenerateCentroid {
                class_id: batch.class_ids()[class],
                norm,
            });
        }
        normalize_in_place(row.view_mut());
    }
    Ok(CentroidTable {
        centroids,
        class_ids: batch.class_ids().to_vec(),
        member_counts,
        sums,
    })
}

/// A probability vector over the classes present, with the index of the
/// ground-truth class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    probs: Vec<f64>,
    anchor: usize,
}

impl ClassDistribution {
    /// Validates non-negativity and normalization within 1e-12.
    pub fn new(probs: Vec<f64>, anchor: usize) -> Result<Self> {
        if anchor >= probs.len() {
            return Err(Error::InvalidInput(format!(
                "anchor {anchor} out of range for {} classes",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidInput("negative or NaN probability".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs, anchor })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn anchor_prob(&self) -> f64 {
        self.probs[self.anchor]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Fixed temperature `tau1` and the learnable adaptation strength `epsilon`
/// with its clamp bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureState {
    tau1: f64,
    epsilon: f64,
    eps_min: f64,
    eps_max: f64,
}

impl TemperatureState {
    pub fn new(tau1: f64, epsilon: f64, eps_min: f64, eps_max: f64) -> Result<Self> {
        if !(tau1 > 0.0 && tau1.is_finite()) {
            return Err(Error::InvalidInput(format!("tau1 must be positive, got {tau1}")));
        }
        if !(0.0 <= eps_min && eps_min <= eps_max && eps_max.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "epsilon bounds [{eps_min}, {eps_max}] are invalid"
            )));
        }
        if !(eps_min <= epsilon && epsilon <= eps_max) {
            return Err(Error::InvalidInput(format!(
                "epsilon {epsilon} outside [{eps_min}, {eps_max}]"
            )));
        }
        if !(tau1 - eps_max > 0.0) {
            return Err(Error::InvalidInput(format!(
                "tau1 ({tau1}) must exceed the epsilon upper bound ({eps_max})"
            )));
        }
        Ok(Self {
            tau1,
            epsilon,
            eps_min,
            eps_max,
        })
    }

    /// Bounds `[0, 0.08]`.
    pub fn with_default_bounds(tau1: f64, epsilon: f64) -> Result<Self> {
        Self::new(tau1, epsilon, DEFAULT_EPSILON_MIN, DEFAULT_EPSILON_MAX)
    }

    pub fn tau1(&self) -> f64 {
        self.tau1
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.eps_min, self.eps_max)
    }

    /// Stores `epsilon` clamped into the bounds.
    pub fn set_epsilon(&mut self, epsilon: f64) {
        self.epsilon = epsilon.clamp(self.eps_min, self.eps_max);
    }

    pub fn tau2(&self, p_anchor: f64) -> f64 {
        adaptive_tau2(p_anchor, self)
    }
}

/// `(tau1 - eps) + 2 eps p`, evaluated as `tau1 + eps (2p - 1)` so that the
/// endpoints `p = 0, 1/2, 1` land exactly on `tau1 - eps, tau1, tau1 + eps`.
pub fn adaptive_tau2(p_anchor: f64, temps: &TemperatureState) -> f64 {
    raw_tau2(p_anchor, temps.tau1, temps.epsilon)
}

pub(crate) fn raw_tau2(p_anchor: f64, tau1: f64, epsilon: f64) -> f64 {
    tau1 + epsilon * (2.0 * p_anchor - 1.0)
}

fn logits(z: ArrayView1<'_, f64>, centroids: ArrayView2<'_, f64>, tau1: f64) -> Vec<f64> {
    centroids
        .outer_iter()
        .map(|w| dot(z, w) / tau1)
        .collect()
}

/// Softmax over `z . w_k / tau1` for the centroids in `table`.
pub fn posterior(
    z: ArrayView1<'_, f64>,
    table: &CentroidTable,
    anchor: usize,
    tau1: f64,
) -> ClassDistribution {
    assert!(anchor < table.num_classes(), "anchor out of range");
    let probs = crate::numeric::softmax(&logits(z, table.centroids(), tau1));
    ClassDistribution { probs, anchor }
}

/// `z . w_r / tau1 - logsumexp_k(z . w_k / tau1)`.
pub fn log_posterior(z: ArrayView1<'_, f64>, table: &CentroidTable, anchor: usize, tau1: f64) -> f64 {
    assert!(anchor < table.num_classes(), "anchor out of range");
    log_softmax(&logits(z, table.centroids(), tau1))[anchor]
}

/// Softened one-hot target over `classes` entries.
///
/// The anchor receives `e^{1/tau2} / (C - 1 + e^{1/tau2})`, every other class
/// `1 / (C - 1 + e^{1/tau2})`. Evaluated through `e^{-1/tau2}` so that large
/// inverse temperatures cannot overflow.
pub fn target_distribution(anchor: usize, classes: usize, tau2: f64) -> Result<ClassDistribution> {
    if classes == 0 || anchor >= classes {
        return Err(Error::InvalidInput(format!(
            "anchor {anchor} out of range for {classes} classes"
        )));
    }
    if !(tau2 > 0.0) {
        return Err(Error::InvalidInput(format!("tau2 must be positive, got {tau2}")));
    }
    Ok(ClassDistribution {
        probs: target_probs(anchor, classes, tau2),
        anchor,
    })
}

fn target_probs(anchor: usize, classes: usize, tau2: f64) -> Vec<f64> {
    let inv = 1.0 / tau2;
    let (q_anchor, q_other) = if inv > ONE_HOT_INVERSE_TEMPERATURE {
        (1.0, 0.0)
    } else {
        let t = (-inv).exp();
        let denom = 1.0 + (classes - 1) as f64 * t;
        (1.0 / denom, t / denom)
    };
    (0..classes)
        .map(|k| if k == anchor { q_anchor } else { q_other })
        .collect()
}

/// Logs of the target entries, finite for every `tau2 > 0`.
fn target_log_probs(anchor: usize, classes: usize, tau2: f64) -> Vec<f64> {
    let inv = 1.0 / tau2;
    let log_anchor = -((classes - 1) as f64 * (-inv).exp()).ln_1p();
    (0..classes)
        .map(|k| if k == anchor { log_anchor } else { log_anchor - inv })
        .collect()
}

/// `Σ q_k log(q_k / p_k)` with `0 log 0 = 0`.
pub fn kl_divergence(q: &ClassDistribution, p: &ClassDistribution) -> Result<f64> {
    kl_divergence_probs(q.probs(), p.probs())
}

pub fn kl_divergence_probs(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::shape(format!("length {}", q.len()), format!("length {}", p.len())));
    }
    let mut kl = 0.0;
    for (index, (&qk, &pk)) in q.iter().zip(p).enumerate() {
        if qk == 0.0 {
            continue;
        }
        if pk == 0.0 {
            return Err(Error::DivergentKl { index, q: qk });
        }
        kl += qk * (qk.ln() - pk.max(PROBABILITY_FLOOR).ln());
    }
    Ok(kl)
}

/// Both sides of Jensen's inequality for the concave logarithm:
/// `lhs = log Σ q_k x_k` and `rhs = Σ q_k log x_k`, so `lhs >= rhs`.
pub fn jensen_gap(q: &[f64], x: &[f64]) -> (f64, f64) {
    assert_eq!(q.len(), x.len(), "q and x must have equal length");
    let lhs = q.iter().zip(x).map(|(q, x)| q * x).sum::<f64>().ln();
    let rhs = q
        .iter()
        .zip(x)
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, x)| q * x.ln())
        .sum();
    (lhs, rhs)
}

/// Everything the loss and its gradients need for one embedding, evaluated
/// against a fixed centroid matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTerms {
    pub anchor: usize,
    pub tau1: f64,
    pub epsilon: f64,
    pub log_p: Vec<f64>,
    pub p: Vec<f64>,
    pub tau2: f64,
    pub q: Vec<f64>,
    pub log_q: Vec<f64>,
    pub kl: f64,
    pub neg_log_posterior: f64,
}

impl SampleTerms {
    /// Evaluates the per-sample objective. `epsilon` is taken as given, with
    /// no clamping, so finite differences may step outside the bounds.
    pub fn evaluate(
        z: ArrayView1<'_, f64>,
        centroids: ArrayView2<'_, f64>,
        anchor: usize,
        tau1: f64,
        epsilon: f64,
    ) -> Self {
        let classes = centroids.nrows();
        assert!(anchor < classes, "anchor out of range");
        let logits = logits(z, centroids, tau1);
        let log_p = log_softmax(&logits);
        let p = crate::numeric::softmax(&logits);
        let tau2 = raw_tau2(p[anchor], tau1, epsilon);
        let q = target_probs(anchor, classes, tau2);
        let log_q = target_log_probs(anchor, classes, tau2);
        let kl = q
            .iter()
            .zip(&log_q)
            .zip(&log_p)
            .filter(|((qk, _), _)| **qk > 0.0)
            .map(|((qk, lq), lp)| qk * (lq - lp))
            .sum();
        Self {
            anchor,
            tau1,
            epsilon,
            neg_log_posterior: -log_p[anchor],
            log_p,
            p,
            tau2,
            q,
            log_q,
            kl,
        }
    }

    pub fn loss(&self) -> f64 {
        self.kl + self.neg_log_posterior
    }

    pub fn p_anchor(&self) -> f64 {
        self.p[self.anchor]
    }

    pub fn num_classes(&self) -> usize {
        self.p.len()
    }

    /// `Σ_{k≠r} log(q_k/p_k) - (C-1) log(q_r/p_r)`.
    pub fn aggregate_log_ratio(&self) -> f64 {
        let r = self.anchor;
        let others = (self.num_classes() - 1) as f64;
        let ratio = |k: usize| self.log_q[k] - self.log_p[k];
        (0..self.num_classes())
            .filter(|&k| k != r)
            .map(ratio)
            .sum::<f64>()
            - others * ratio(r)
    }
}

/// Centroid bookkeeping knobs for [`varcon_loss_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossOptions {
    /// Exclude each sample from its own class centroid.
    pub leave_one_out: bool,
}

/// Batch loss, its decomposition and gradients.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: f64,
    pub kl_term: f64,
    pub neg_log_posterior: f64,
    /// Gradient of `total` with respect to each embedding row, unprojected,
    /// with centroids held fixed.
    pub grad_z: Array2<f64>,
    pub grad_epsilon: f64,
    pub samples: Vec<SampleTerms>,
}

impl LossReport {
    pub fn mean_p_anchor(&self) -> f64 {
        self.samples.iter().map(SampleTerms::p_anchor).sum::<f64>() / self.samples.len() as f64
    }

    pub fn per_sample_losses(&self) -> Vec<f64> {
        self.samples.iter().map(SampleTerms::loss).collect()
    }
}

pub fn varcon_loss(batch: &EmbeddingBatch, temps: &TemperatureState) -> Result<LossReport> {
    varcon_loss_with(batch, temps, LossOptions::default())
}

/// Mean over samples of `KL(q || p) - log p(r | z)`, each sample using its own
/// `tau2`.
pub fn varcon_loss_with(
    batch: &EmbeddingBatch,
    temps: &TemperatureState,
    options: LossOptions,
) -> Result<LossReport> {
    let table = compute_centroids(batch)?;
    let n = batch.len();
    let scale = 1.0 / n as f64;
    let mut grad_z = Array2::<f64>::zeros((n, batch.dim()));
    let mut samples = Vec::with_capacity(n);
    let (mut kl_sum, mut nll_sum, mut grad_eps_sum) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let own;
        let centroids = if options.leave_one_out {
            own = table.leave_one_out(batch, i)?;
            own.view()
        } else {
            table.centroids()
        };
        let terms = SampleTerms::evaluate(
            batch.embedding(i),
            centroids,
            batch.labels()[i],
            temps.tau1(),
            temps.epsilon(),
        );
        let g = gradient::sample_grad_z(&terms, centroids);
        grad_z.row_mut(i).assign(&(g * scale));
        kl_sum += terms.kl;
        nll_sum += terms.neg_log_posterior;
        grad_eps_sum += gradient::sample_grad_epsilon(&terms);
        samples.push(terms);
    }
    let kl_term = kl_sum * scale;
    let neg_log_posterior = nll_sum * scale;
    Ok(LossReport {
        total: kl_term + neg_log_posterior,
        kl_term,
        neg_log_posterior,
        grad_z,
        grad_epsilon: grad_eps_sum * scale,
        samples,
    })
}

/// Mean row of `m`; used by tests and diagnostics.
pub fn mean_row(m: ArrayView2<'_, f64>) -> Array1<f64> {
    m.mean_axis(Axis(0)).expect("non-empty matrix")
}
