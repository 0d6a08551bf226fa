//! Analytic gradients of the objective and the finite-difference oracle that
//! checks them.
//!
//! Centroids are detached: every derivative here treats the centroid matrix
//! as a constant. For one sample with posterior `p`, target `q`, temperature
//! `tau2 = tau1 + eps (2 p_r - 1)` and `w̄ = Σ_k p_k w_k`:
//!
//! ```text
//! dp_k/dz   = (p_k / tau1) (w_k - w̄)
//! dq_k/dtau2 = -(C-1) g  for k = r,   g otherwise,
//!              g = e^{1/tau2} / (tau2^2 (C - 1 + e^{1/tau2})^2)
//! dL/dz     = 2 eps g A dp_r/dz - (1/tau1) (Σ_k q_k w_k - w̄) - (1/tau1) (w_r - w̄)
//! dL/deps   = (2 p_r - 1) g A
//! ```
//!
//! where `A = Σ_{k≠r} log(q_k/p_k) - (C-1) log(q_r/p_r)` is the aggregate
//! log-ratio. The `Σ_k dq_k` term of the product rule vanishes because `q`
//! always sums to one.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::numeric::{dot, mix_seed};
use crate::objective::{compute_centroids, EmbeddingBatch, SampleTerms, TemperatureState};

/// `dq_k/dtau2` for any non-anchor class, evaluated via `e^{-1/tau2}`.
pub fn target_tau_sensitivity(classes: usize, tau2: f64) -> f64 {
    let t = (-1.0 / tau2).exp();
    let denom = 1.0 + (classes - 1) as f64 * t;
    t / (tau2 * tau2 * denom * denom)
}

/// Unprojected gradient of one sample's loss with respect to its embedding.
pub fn sample_grad_z(terms: &SampleTerms, centroids: ArrayView2<'_, f64>) -> Array1<f64> {
    let r = terms.anchor;
    let tau1 = terms.tau1;
    let dim = centroids.ncols();
    let mut mean_p = Array1::<f64>::zeros(dim);
    let mut mean_q = Array1::<f64>::zeros(dim);
    for (k, w) in centroids.outer_iter().enumerate() {
        mean_p.scaled_add(terms.p[k], &w);
        mean_q.scaled_add(terms.q[k], &w);
    }
    let toward_anchor = &centroids.row(r) - &mean_p;
    let alignment = 2.0
        * terms.epsilon
        * target_tau_sensitivity(terms.num_classes(), terms.tau2)
        * terms.aggregate_log_ratio()
        * terms.p_anchor()
        / tau1;
    let mut grad = toward_anchor.clone() * alignment;
    grad.scaled_add(-1.0 / tau1, &(&mean_q - &mean_p));
    grad.scaled_add(-1.0 / tau1, &toward_anchor);
    grad
}

/// `dL/deps` for one sample with the encoder held fixed.
pub fn sample_grad_epsilon(terms: &SampleTerms) -> f64 {
    (2.0 * terms.p_anchor() - 1.0)
        * target_tau_sensitivity(terms.num_classes(), terms.tau2)
        * terms.aggregate_log_ratio()
}

/// Gradient of sample `index`'s own loss (not divided by the batch size),
/// with the batch centroids detached.
pub fn grad_z_analytic(
    batch: &EmbeddingBatch,
    temps: &TemperatureState,
    index: usize,
) -> Result<Array1<f64>> {
    let table = compute_centroids(batch)?;
    let terms = SampleTerms::evaluate(
        batch.embedding(index),
        table.centroids(),
        batch.labels()[index],
        temps.tau1(),
        temps.epsilon(),
    );
    Ok(sample_grad_z(&terms, table.centroids()))
}

/// Batch-mean `dL/deps`.
pub fn grad_epsilon_analytic(batch: &EmbeddingBatch, temps: &TemperatureState) -> Result<f64> {
    let table = compute_centroids(batch)?;
    let total: f64 = (0..batch.len())
        .map(|i| {
            let terms = SampleTerms::evaluate(
                batch.embedding(i),
                table.centroids(),
                batch.labels()[i],
                temps.tau1(),
                temps.epsilon(),
            );
            sample_grad_epsilon(&terms)
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// `(I - z zᵀ / ‖z‖²) grad`: removes the component along `z`.
pub fn project_tangent(grad: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Array1<f64> {
    let along = dot(grad, z) / dot(z, z);
    let mut out = grad.to_owned();
    out.scaled_add(-along, &z);
    out
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_oracle<F>(mut f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + h;
            let plus = f(&x);
            x[i] = point[i] - h;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - b_i| / max(1, ‖a‖∞)` together with the absolute error.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let abs = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic.iter().map(|a| a.abs()).fold(1.0, f64::max);
    (abs / scale, abs)
}

pub const DEFAULT_FD_STEP: f64 = 1e-4;
pub const DEFAULT_GRAD_TOLERANCE: f64 = 1e-5;

/// Worst-case agreement between analytic and finite-difference gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub num_probes: usize,
    pub worst_instance_seed: u64,
}

impl GradCheckResult {
    fn record(&mut self, (rel, abs): (f64, f64), seed: u64) {
        if rel > self.max_rel_error || self.num_probes == 0 {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst_instance_seed = seed;
        }
        self.max_abs_error = self.max_abs_error.max(abs);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub probes: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            probes: 100,
            seed: 0,
            step: DEFAULT_FD_STEP,
            tolerance: DEFAULT_GRAD_TOLERANCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub z: GradCheckResult,
    pub epsilon: GradCheckResult,
    /// Largest `|P g · z|` over all projected gradients.
    pub max_tangent_residual: f64,
    /// Largest `‖P(P g) - P g‖∞`.
    pub max_idempotence_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.z.max_rel_error < self.tolerance
            && self.epsilon.max_rel_error < self.tolerance
            && self.max_tangent_residual < 1e-10
            && self.max_idempotence_error < 1e-12
    }
}

/// A seeded random problem: a batch plus temperatures.
#[derive(Clone, Debug)]
pub struct ProbeInstance {
    pub seed: u64,
    pub batch: EmbeddingBatch,
    pub temps: TemperatureState,
}

/// Draws `C ∈ [2, 10]` classes with 1 to 3 members each in `d ∈ [4, 32]`,
/// `tau1 ∈ [0.05, 0.2)` and `eps ∈ [0, 0.05)`.
///
/// Members scatter around a random class direction with a random
/// concentration, so posteriors range from nearly uniform to confident.
pub fn random_instance(seed: u64) -> ProbeInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(2..=10usize);
    let dim = rng.random_range(4..=32usize);
    let tau1 = rng.random_range(0.05..0.2);
    let epsilon = rng.random_range(0.0..0.05);
    loop {
        let concentration: f64 = rng.random_range(0.0..3.0);
        let prototypes: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (class, proto) in prototypes.iter().enumerate() {
            let norm = proto.iter().map(|x| x * x).sum::<f64>().sqrt();
            for _ in 0..rng.random_range(1..=3usize) {
                for x in proto {
                    let noise: f64 = rng.sample(StandardNormal);
                    rows.push(concentration * x / norm + 0.5 * noise / (dim as f64).sqrt());
                }
                labels.push(class);
            }
        }
        let vectors = ndarray::Array2::from_shape_vec((labels.len(), dim), rows)
            .expect("rows are dim-sized");
        let Ok(batch) = EmbeddingBatch::from_unnormalized(vectors, &labels) else {
            continue;
        };
        if compute_centroids(&batch).is_err() {
            continue;
        }
        let temps = TemperatureState::new(tau1, epsilon, 0.0, epsilon)
            .expect("eps < 0.05 <= tau1");
        return ProbeInstance { seed, batch, temps };
    }
}

/// Analytic gradient routines under test; the defaults are
/// [`sample_grad_z`] and [`sample_grad_epsilon`].
#[derive(Clone, Copy)]
pub struct AnalyticRoutines {
    pub grad_z: fn(&SampleTerms, ArrayView2<'_, f64>) -> Array1<f64>,
    pub grad_epsilon: fn(&SampleTerms) -> f64,
}

impl Default for AnalyticRoutines {
    fn default() -> Self {
        Self {
            grad_z: sample_grad_z,
            grad_epsilon: sample_grad_epsilon,
        }
    }
}

pub fn run_grad_check(config: &GradCheckConfig) -> Result<GradCheckReport> {
    run_grad_check_with(config, AnalyticRoutines::default())
}

/// Compares `routines` with central differences on `config.probes` seeded
/// instances. Differences perturb `z` in ambient space without
/// renormalizing and keep the centroids computed once per instance.
pub fn run_grad_check_with(
    config: &GradCheckConfig,
    routines: AnalyticRoutines,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        z: GradCheckResult::default(),
        epsilon: GradCheckResult::default(),
        max_tangent_residual: 0.0,
        max_idempotence_error: 0.0,
        tolerance: config.tolerance,
    };
    let h = config.step;
    for probe in 0..config.probes {
        let seed = mix_seed(config.seed, probe as u64);
        let ProbeInstance { batch, temps, .. } = random_instance(seed);
        let table = compute_centroids(&batch)?;
        let centroids = table.centroids();
        let (tau1, eps) = (temps.tau1(), temps.epsilon());
        let mut instance_z = (0.0, 0.0);
        for i in 0..batch.len() {
            let anchor = batch.labels()[i];
            let z = batch.embedding(i);
            let terms = SampleTerms::evaluate(z, centroids, anchor, tau1, eps);
            let analytic = (routines.grad_z)(&terms, centroids);
            let numeric = finite_diff_oracle(
                |x| {
                    SampleTerms::evaluate(ArrayView1::from(x), centroids, anchor, tau1, eps).loss()
                },
                z.as_slice().expect("rows are contiguous"),
                h,
            );
            let (rel, abs) = relative_error(analytic.as_slice().expect("owned"), &numeric);
            instance_z = (f64::max(instance_z.0, rel), f64::max(instance_z.1, abs));

            let projected = project_tangent(analytic.view(), z);
            report.max_tangent_residual = report.max_tangent_residual.max(dot(projected.view(), z).abs());
            let twice = project_tangent(projected.view(), z);
            let idem = (&twice - &projected).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            report.max_idempotence_error = report.max_idempotence_error.max(idem);
        }
        report.z.record(instance_z, seed);
        report.z.num_probes += 1;

        let mean_loss = |e: f64| {
            (0..batch.len())
                .map(|i| {
                    SampleTerms::evaluate(batch.embedding(i), centroids, batch.labels()[i], tau1, e)
                        .loss()
                })
                .sum::<f64>()
                / batch.len() as f64
        };
        let analytic_eps = (0..batch.len())
            .map(|i| {
                let terms =
                    SampleTerms::evaluate(batch.embedding(i), centroids, batch.labels()[i], tau1, eps);
                (routines.grad_epsilon)(&terms)
            })
            .sum::<f64>()
            / batch.len() as f64;
        let numeric_eps = finite_diff_oracle(|x| mean_loss(x[0]), &[eps], h);
        report.epsilon.record(relative_error(&[analytic_eps], &numeric_eps), seed);
        report.epsilon.num_probes += 1;
    }
    Ok(report)
}
