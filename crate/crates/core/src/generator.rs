//! Stage 2: the MoE feature generator.
//!
//! Fake features come from `generate(z, prototype)`: noise and a class
//! prototype pass through an input linear map, a stack of sparse MoE
//! layers, and an output linear map to the backbone's feature dimension.
//! Training matches generated seen-class features against real ones with a
//! multi-bandwidth Gaussian-kernel MMD, per class.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{FeatureBatch, Provenance};
use crate::data::ClassId;
use crate::error::{GzslError, Result};
use crate::moe::{LinearParams, MoeLayerParams, Stack, StackLayer};
use crate::numerics::adam::{AdamConfig, AdamOptimizer};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::GradTape;
use crate::prototypes::ClassPrototypeTable;
use crate::pipeline::seed::derive_seed;

/// Bandwidth multiples applied to the median pairwise distance.
pub const MMD_BANDWIDTH_SCALES: [f64; 6] = [2.0, 5.0, 10.0, 20.0, 40.0, 80.0];

/// Per-class row budget per epoch; chunks of the shuffled class rows are
/// consumed up to this many rows each epoch.
const CLASS_ROWS_PER_EPOCH: usize = 512;

/// Counts `generate` invocations so tests can assert the generator is never
/// called during inference.
static GENERATE_CALLS: AtomicU64 = AtomicU64::new(0);

pub fn generate_invocations() -> u64 {
    GENERATE_CALLS.load(Ordering::Relaxed)
}

fn default_noise_dim() -> usize {
    32
}
fn default_depth() -> usize {
    2
}
fn default_hidden() -> usize {
    128
}
fn default_experts() -> usize {
    8
}
fn default_top_k() -> usize {
    2
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    #[serde(default = "default_noise_dim")]
    pub noise_dim: usize,
    /// Number of MoE layers in the stack.
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Width of the MoE stack.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_experts")]
    pub experts: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            noise_dim: default_noise_dim(),
            depth: default_depth(),
            hidden: default_hidden(),
            experts: default_experts(),
            top_k: default_top_k(),
            epochs: default_epochs(),
            batch_size: default_batch(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 {
            return Err(GzslError::Config("noise_dim must be at least 1".into()));
        }
        if self.hidden == 0 {
            return Err(GzslError::Config("hidden width must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(GzslError::Config(format!(
                "generator MoE needs 1 <= K <= M, got K={}, M={}",
                self.top_k, self.experts
            )));
        }
        if self.batch_size == 0 {
            return Err(GzslError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorParams {
    pub noise_dim: usize,
    pub prototype_dim: usize,
    pub feature_dim: usize,
    pub stack: Stack,
}

impl GeneratorParams {
    pub fn init(
        cfg: &GeneratorConfig,
        prototype_dim: usize,
        feature_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let h = cfg.hidden;
        let mut layers = vec![
            StackLayer::Linear(LinearParams::init(cfg.noise_dim + prototype_dim, h, &mut rng)),
            StackLayer::Gelu,
        ];
        for _ in 0..cfg.depth {
            layers.push(StackLayer::Moe(MoeLayerParams::init(
                h,
                4 * h,
                h,
                cfg.experts,
                cfg.top_k,
                &mut rng,
            )?));
        }
        layers.push(StackLayer::Linear(LinearParams::init(h, feature_dim, &mut rng)));
        Ok(GeneratorParams {
            noise_dim: cfg.noise_dim,
            prototype_dim,
            feature_dim,
            stack: Stack::new(layers),
        })
    }

    fn input(&self, prototype: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.noise_dim || prototype.len() != self.prototype_dim {
            return Err(GzslError::shape(format!(
                "generator input: z length {} (want {}), prototype length {} (want {})",
                z.len(),
                self.noise_dim,
                prototype.len(),
                self.prototype_dim
            )));
        }
        let mut input = Vec::with_capacity(z.len() + prototype.len());
        input.extend_from_slice(z);
        input.extend_from_slice(prototype);
        Ok(input)
    }
}

/// One fake feature vector from a (noise, prototype) pair. Deterministic in
/// its arguments.
pub fn generate(params: &GeneratorParams, prototype: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    GENERATE_CALLS.fetch_add(1, Ordering::Relaxed);
    let input = params.input(prototype, z)?;
    let (out, _) = params.stack.forward(&input)?;
    Ok(out)
}

/// Median pairwise Euclidean distance between rows (0.0 for fewer than two
/// rows). Used to scale the MMD kernel bandwidths.
pub fn median_pairwise_distance(rows: &Matrix) -> f64 {
    let n = rows.rows();
    if n < 2 {
        return 0.0;
    }
    let mut distances = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = rows
                .row(i)
                .iter()
                .zip(rows.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            distances.push(d2.sqrt());
        }
    }
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distances[distances.len() / 2]
}

/// Kernel bandwidths for a set of real features: the standard multiples of
/// the (guarded) median pairwise distance.
pub fn bandwidths_for(real: &Matrix) -> Vec<f64> {
    let median = median_pairwise_distance(real).max(1e-6);
    MMD_BANDWIDTH_SCALES.iter().map(|s| s * median).collect()
}

#[inline]
fn kernel_sum(d2: f64, sigmas: &[f64]) -> f64 {
    sigmas.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum()
}

#[inline]
fn kernel_grad_coeff(d2: f64, sigmas: &[f64]) -> f64 {
    // d k / d x = -coeff * (x - y), with coeff = sum_s exp(/) / s^2
    sigmas
        .iter()
        .map(|s| (-d2 / (2.0 * s * s)).exp() / (s * s))
        .sum()
}

fn row_d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mmd_matrices(real: &Matrix, fake: &Matrix, sigmas: &[f64]) -> Result<f64> {
    if real.rows() == 0 || fake.rows() == 0 {
        return Err(GzslError::arg("mmd of an empty batch"));
    }
    if real.cols() != fake.cols() {
        return Err(GzslError::shape(format!(
            "mmd: feature dims {} vs {}",
            real.cols(),
            fake.cols()
        )));
    }
    let (nr, nf) = (real.rows(), fake.rows());
    let mut k_rr = 0.0;
    for i in 0..nr {
        for j in 0..nr {
            k_rr += kernel_sum(row_d2(real.row(i), real.row(j)), sigmas);
        }
    }
    let mut k_ff = 0.0;
    for i in 0..nf {
        for j in 0..nf {
            k_ff += kernel_sum(row_d2(fake.row(i), fake.row(j)), sigmas);
        }
    }
    let mut k_rf = 0.0;
    for i in 0..nr {
        for j in 0..nf {
            k_rf += kernel_sum(row_d2(real.row(i), fake.row(j)), sigmas);
        }
    }
    let mmd = k_rr / (nr * nr) as f64 + k_ff / (nf * nf) as f64 - 2.0 * k_rf / (nr * nf) as f64;
    Ok(mmd.max(0.0))
}

/// Biased squared-MMD estimator with a sum-of-Gaussians kernel; tiny
/// negative estimates are clamped to zero.
pub fn mmd_loss(real: &FeatureBatch, fake: &FeatureBatch, sigmas: &[f64]) -> Result<f64> {
    mmd_matrices(&real.features, &fake.features, sigmas)
}

/// MMD value plus its gradient with respect to every fake row.
pub(crate) fn mmd_fake_gradient(
    real: &Matrix,
    fake: &Matrix,
    sigmas: &[f64],
) -> Result<(f64, Matrix)> {
    let loss = mmd_matrices(real, fake, sigmas)?;
    let (nr, nf) = (real.rows(), fake.rows());
    let dim = fake.cols();
    let mut grad = Matrix::zeros(nf, dim);
    let ff_scale = 2.0 / (nf * nf) as f64;
    let rf_scale = 2.0 / (nr * nf) as f64;
    for i in 0..nf {
        let fi = fake.row(i);
        // own-batch term: -coeff * (f_i - f_j), summed twice over the
        // symmetric pair, hence the 2 / nf^2 scale
        for j in 0..nf {
            if i == j {
                continue;
            }
            let fj = fake.row(j);
            let coeff = kernel_grad_coeff(row_d2(fi, fj), sigmas) * ff_scale;
            let g = grad.row_mut(i);
            for d in 0..dim {
                g[d] -= coeff * (fi[d] - fj[d]);
            }
        }
        // cross term enters the loss with factor -2
        for j in 0..nr {
            let rj = real.row(j);
            let coeff = kernel_grad_coeff(row_d2(fi, rj), sigmas) * rf_scale;
            let g = grad.row_mut(i);
            for d in 0..dim {
                g[d] += coeff * (fi[d] - rj[d]);
            }
        }
    }
    Ok((loss, grad))
}

fn draw_noise(rng: &mut ChaCha12Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn check_generator_labels(
    real_seen: &FeatureBatch,
    prototypes: &ClassPrototypeTable,
) -> Result<Vec<ClassId>> {
    let classes = real_seen.distinct_labels();
    for &label in &classes {
        if prototypes.unseen().contains(&label) {
            return Err(GzslError::arg(format!(
                "unseen class {label} in generator training"
            )));
        }
        if !prototypes.seen().contains(&label) {
            return Err(GzslError::arg(format!("missing prototype for class {label}")));
        }
    }
    Ok(classes)
}

/// Trains the generator so that, per seen class, generated features match
/// the real ones under MMD. Only seen classes participate; unseen
/// prototypes are used at synthesis time only.
pub fn train_generator(
    params: &mut GeneratorParams,
    real_seen: &FeatureBatch,
    prototypes: &ClassPrototypeTable,
    cfg: &GeneratorConfig,
    optimizer_cfg: &AdamConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if real_seen.feature_dim() != params.feature_dim {
        return Err(GzslError::shape(format!(
            "real features have dim {}, generator emits {}",
            real_seen.feature_dim(),
            params.feature_dim
        )));
    }
    let classes = check_generator_labels(real_seen, prototypes)?;
    if classes.is_empty() {
        return Err(GzslError::arg("no real features to train the generator on"));
    }

    // fixed per-class kernel bandwidths from the real features
    let mut class_rows: Vec<(ClassId, Vec<usize>, Vec<f64>)> = Vec::new();
    for &class in &classes {
        let rows = real_seen.rows_with_label(class);
        let real_matrix = real_seen.select_rows(&rows).features;
        let sigmas = bandwidths_for(&real_matrix);
        class_rows.push((class, rows, sigmas));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "generator-train"));
    let mut optimizer = AdamOptimizer::new(*optimizer_cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut chunks_seen = 0usize;
        for (class, rows, sigmas) in &class_rows {
            let mut order = rows.clone();
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            order.truncate(CLASS_ROWS_PER_EPOCH);
            let prototype = prototypes
                .get(*class)
                .expect("validated above")
                .to_vec();
            for chunk in order.chunks(cfg.batch_size) {
                let real_matrix = real_seen.select_rows(chunk).features;
                let mut traces = Vec::with_capacity(chunk.len());
                let mut fakes = Matrix::zeros(chunk.len(), params.feature_dim);
                for (row, _) in chunk.iter().enumerate() {
                    let z = draw_noise(&mut rng, params.noise_dim);
                    let input = params.input(&prototype, &z)?;
                    let trace = params.stack.forward_traced(&input)?;
                    fakes.row_mut(row).copy_from_slice(&trace.output);
                    traces.push(trace);
                }
                let (loss, dfake) = mmd_fake_gradient(&real_matrix, &fakes, sigmas)?;
                let mut tape = GradTape::new();
                for (row, trace) in traces.iter().enumerate() {
                    params.stack.backward(trace, dfake.row(row), "", &mut tape)?;
                }
                params.stack.apply_gradients("", &tape, &mut optimizer)?;
                epoch_loss += loss;
                chunks_seen += 1;
            }
        }
        let mean_loss = epoch_loss / chunks_seen.max(1) as f64;
        if !mean_loss.is_finite() {
            return Err(GzslError::Divergence { epoch });
        }
        history.push(mean_loss);
    }
    Ok(history)
}

/// Mean per-class MMD between freshly generated features and the real ones,
/// with seeded noise draws. A diagnostic; does not touch parameters.
pub fn evaluate_generator_mmd(
    params: &GeneratorParams,
    real_seen: &FeatureBatch,
    prototypes: &ClassPrototypeTable,
    rows_per_class: usize,
    seed: u64,
) -> Result<f64> {
    let classes = check_generator_labels(real_seen, prototypes)?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "generator-eval"));
    let mut total = 0.0;
    for &class in &classes {
        let rows = real_seen.rows_with_label(class);
        let capped: Vec<usize> = rows.iter().copied().take(rows_per_class).collect();
        let real_matrix = real_seen.select_rows(&capped).features;
        let sigmas = bandwidths_for(&real_matrix);
        let prototype = prototypes.get(class).expect("validated").to_vec();
        let mut fakes = Matrix::zeros(capped.len(), params.feature_dim);
        for row in 0..capped.len() {
            let z = draw_noise(&mut rng, params.noise_dim);
            let out = generate(params, &prototype, &z)?;
            fakes.row_mut(row).copy_from_slice(&out);
        }
        total += mmd_matrices(&real_matrix, &fakes, &sigmas)?;
    }
    Ok(total / classes.len() as f64)
}

/// Generates `n_per_class` fake features for every unseen class, with
/// seeded noise. `n_per_class = 0` yields an empty batch that still carries
/// the feature dimension.
pub fn synthesize_unseen(
    params: &GeneratorParams,
    prototypes: &ClassPrototypeTable,
    n_per_class: usize,
    seed: u64,
) -> Result<FeatureBatch> {
    let unseen: Vec<ClassId> = prototypes.unseen().iter().copied().collect();
    let mut features = Matrix::zeros(unseen.len() * n_per_class, params.feature_dim);
    let mut labels = Vec::with_capacity(unseen.len() * n_per_class);
    let mut row = 0;
    for &class in &unseen {
        let prototype = prototypes
            .get(class)
            .ok_or_else(|| GzslError::arg(format!("missing prototype for class {class}")))?
            .to_vec();
        let mut rng =
            ChaCha12Rng::seed_from_u64(derive_seed(seed, &format!("synth-class-{class}")));
        for _ in 0..n_per_class {
            let z = draw_noise(&mut rng, params.noise_dim);
            let out = generate(params, &prototype, &z)?;
            features.row_mut(row).copy_from_slice(&out);
            labels.push(class);
            row += 1;
        }
    }
    let n = labels.len();
    FeatureBatch::new(features, labels, vec![Provenance::Fake; n])
}
