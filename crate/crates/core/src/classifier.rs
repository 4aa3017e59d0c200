//! Stage 3: the MoE classifier over real seen features plus generated
//! unseen features, and stage 4 inference (extractor then classifier; the
//! generator is never invoked at inference time).

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::backbone::{extract_features, BackboneParams, FeatureBatch};
use crate::data::{make_batches, ClassId, PointFrame};
use crate::error::{GzslError, Result};
use crate::moe::{LinearParams, MoeLayerParams, Stack, StackLayer};
use crate::numerics::adam::{AdamConfig, AdamOptimizer};
use crate::numerics::loss::{cross_entropy, softmax, softmax_cross_entropy_grad};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::GradTape;
use crate::pipeline::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierMode {
    /// Label space = unseen classes only; trained on fake features alone.
    Zsl,
    /// Label space = seen plus unseen; trained on real seen + fake unseen.
    Gzsl,
}

fn default_mode() -> ClassifierMode {
    ClassifierMode::Gzsl
}
fn default_experts() -> usize {
    8
}
fn default_top_k() -> usize {
    2
}
fn default_hidden() -> usize {
    128
}
fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    #[serde(default = "default_mode")]
    pub mode: ClassifierMode,
    #[serde(default = "default_experts")]
    pub experts: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Fake rows per unseen class; when absent, the mean real-seen
    /// per-class count is used (GZSL mode only).
    #[serde(default)]
    pub n_per_class: Option<usize>,
    /// Attach inverse-frequency loss weights to training samples.
    #[serde(default)]
    pub class_weights: bool,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            mode: default_mode(),
            experts: default_experts(),
            top_k: default_top_k(),
            hidden: default_hidden(),
            epochs: default_epochs(),
            n_per_class: None,
            class_weights: false,
            batch_size: default_batch(),
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(GzslError::Config(format!(
                "classifier MoE needs 1 <= K <= M, got K={}, M={}",
                self.top_k, self.experts
            )));
        }
        if self.hidden == 0 {
            return Err(GzslError::Config("hidden width must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(GzslError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Two MoE blocks with a GELU between them and a final linear map to the
/// label-space logits.
#[derive(Debug, Clone)]
pub struct ClassifierParams {
    pub feature_dim: usize,
    /// Class ids the logits correspond to, ascending.
    pub label_space: Vec<ClassId>,
    pub stack: Stack,
}

impl ClassifierParams {
    pub fn init(
        cfg: &ClassifierConfig,
        feature_dim: usize,
        label_space: Vec<ClassId>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if label_space.is_empty() {
            return Err(GzslError::arg("classifier label space is empty"));
        }
        if label_space.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GzslError::arg("label space must be strictly ascending"));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let h = cfg.hidden;
        let layers = vec![
            StackLayer::Moe(MoeLayerParams::init(
                feature_dim,
                4 * feature_dim,
                h,
                cfg.experts,
                cfg.top_k,
                &mut rng,
            )?),
            StackLayer::Gelu,
            StackLayer::Moe(MoeLayerParams::init(h, 4 * h, h, cfg.experts, cfg.top_k, &mut rng)?),
            StackLayer::Linear(LinearParams::init(h, label_space.len(), &mut rng)),
        ];
        Ok(ClassifierParams {
            feature_dim,
            label_space,
            stack: Stack::new(layers),
        })
    }

    fn class_index(&self, label: ClassId) -> Option<usize> {
        self.label_space.binary_search(&label).ok()
    }
}

/// Predictions plus per-row probability vectors over the label space.
#[derive(Debug, Clone)]
pub struct Classification {
    pub predictions: Vec<ClassId>,
    pub probabilities: Matrix,
}

/// Per row: stack logits, softmax, argmax (ties toward the lower class id).
pub fn classify(params: &ClassifierParams, batch: &FeatureBatch) -> Result<Classification> {
    if batch.feature_dim() != params.feature_dim {
        return Err(GzslError::shape(format!(
            "classify: features have dim {}, classifier expects {}",
            batch.feature_dim(),
            params.feature_dim
        )));
    }
    let classes = params.label_space.len();
    let mut probabilities = Matrix::zeros(batch.len(), classes);
    let mut predictions = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let (logits, _) = params.stack.forward(batch.row(i))?;
        let probs = softmax(&logits)?;
        let mut best = 0;
        for (j, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = j;
            }
        }
        predictions.push(params.label_space[best]);
        probabilities.row_mut(i).copy_from_slice(&probs);
    }
    Ok(Classification {
        predictions,
        probabilities,
    })
}

/// Cross-entropy training over the mode's label space. GZSL interleaves
/// real seen and fake unseen rows via a seeded shuffle and consumes every
/// row of both exactly once per epoch; ZSL uses the fake rows only.
pub fn train_classifier(
    params: &mut ClassifierParams,
    real_seen: &FeatureBatch,
    fake_unseen: &FeatureBatch,
    cfg: &ClassifierConfig,
    optimizer_cfg: &AdamConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let train_set = match cfg.mode {
        ClassifierMode::Gzsl => {
            if real_seen.is_empty() || fake_unseen.is_empty() {
                return Err(GzslError::arg(
                    "GZSL training requires nonempty real-seen and fake-unseen batches",
                ));
            }
            FeatureBatch::concat(&[real_seen, fake_unseen])?
        }
        ClassifierMode::Zsl => {
            if fake_unseen.is_empty() {
                return Err(GzslError::arg("ZSL training requires a nonempty fake batch"));
            }
            fake_unseen.clone()
        }
    };
    if train_set.feature_dim() != params.feature_dim {
        return Err(GzslError::shape(format!(
            "training features have dim {}, classifier expects {}",
            train_set.feature_dim(),
            params.feature_dim
        )));
    }
    let mut targets = Vec::with_capacity(train_set.len());
    for &label in &train_set.labels {
        let idx = params.class_index(label).ok_or_else(|| match cfg.mode {
            ClassifierMode::Zsl => GzslError::arg(format!("label {label} outside ZSL space")),
            ClassifierMode::Gzsl => GzslError::arg(format!("label {label} outside GZSL space")),
        })?;
        targets.push(idx);
    }

    let mut optimizer = AdamOptimizer::new(*optimizer_cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = make_batches(
            &train_set.labels,
            cfg.batch_size,
            derive_seed(seed, &format!("epoch-{epoch}")),
            cfg.class_weights,
        )?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let mut tape = GradTape::new();
            let inv_batch = 1.0 / batch.indices.len() as f64;
            for (slot, &i) in batch.indices.iter().enumerate() {
                let weight = batch.weights.as_ref().map_or(1.0, |w| w[slot]);
                let trace = params.stack.forward_traced(train_set.row(i))?;
                let probs = softmax(&trace.output)?;
                loss_sum += weight * cross_entropy(&probs, targets[i])?;
                let mut upstream = softmax_cross_entropy_grad(&probs, targets[i]);
                for g in &mut upstream {
                    *g *= weight * inv_batch;
                }
                params.stack.backward(&trace, &upstream, "", &mut tape)?;
            }
            params.stack.apply_gradients("", &tape, &mut optimizer)?;
        }
        let epoch_loss = loss_sum / train_set.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(GzslError::Divergence { epoch });
        }
        history.push(epoch_loss);
    }
    Ok(history)
}

/// Stage 4 inference: extractor then classifier, by definition. The
/// generator plays no part.
pub fn infer_frame(
    backbone: &BackboneParams,
    classifier: &ClassifierParams,
    frame: &PointFrame,
) -> Result<Vec<ClassId>> {
    let features = extract_features(backbone, frame)?;
    if features.is_empty() {
        return Ok(Vec::new());
    }
    Ok(classify(classifier, &features)?.predictions)
}
