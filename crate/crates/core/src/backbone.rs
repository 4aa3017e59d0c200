//! Stage 1: per-point feature extraction.
//!
//! Each point gets a 9-value geometric descriptor (its coordinates, the mean
//! offset of its k nearest neighbors, and the per-axis spread of those
//! offsets) which a small GELU MLP maps to an F-dimensional feature. The
//! MLP is trained jointly with a throwaway MoE classification head on
//! seen-class points only; after training just the extractor is kept.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::{make_batches, split_frames, ClassId, PointFrame, SplitConfig, SplitMode};
use crate::error::{GzslError, Result};
use crate::moe::{LinearParams, MoeLayerParams, Stack, StackLayer};
use crate::numerics::adam::{AdamConfig, AdamOptimizer};
use crate::numerics::loss::{cross_entropy, softmax, softmax_cross_entropy_grad};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::GradTape;
use crate::pipeline::seed::derive_seed;

/// Length of the raw per-point descriptor.
pub const DESCRIPTOR_DIM: usize = 9;

fn default_feature_dim() -> usize {
    32
}
fn default_neighbors() -> usize {
    16
}
fn default_widths() -> Vec<usize> {
    vec![64, 64]
}
fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    64
}
fn default_experts() -> usize {
    8
}
fn default_top_k() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output feature dimension F.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Neighborhood size k of the descriptor.
    #[serde(default = "default_neighbors")]
    pub neighbors: usize,
    /// Hidden widths of the MLP; the final linear layer maps to F.
    #[serde(default = "default_widths")]
    pub hidden_widths: Vec<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Expert count of the throwaway classification head.
    #[serde(default = "default_experts")]
    pub moe_experts: usize,
    #[serde(default = "default_top_k")]
    pub moe_top_k: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            feature_dim: default_feature_dim(),
            neighbors: default_neighbors(),
            hidden_widths: default_widths(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            moe_experts: default_experts(),
            moe_top_k: default_top_k(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(GzslError::Config("feature_dim must be at least 2".into()));
        }
        if self.neighbors == 0 {
            return Err(GzslError::Config("neighbors must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(GzslError::Config("batch_size must be at least 1".into()));
        }
        if self.moe_top_k == 0 || self.moe_top_k > self.moe_experts {
            return Err(GzslError::Config(format!(
                "moe head needs 1 <= K <= M, got K={}, M={}",
                self.moe_top_k, self.moe_experts
            )));
        }
        Ok(())
    }
}

/// The trained extractor: descriptor neighborhood size plus the MLP.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub neighbors: usize,
    pub feature_dim: usize,
    pub mlp: Stack,
}

impl BackboneParams {
    /// Builds a fresh extractor MLP: descriptor -> hidden widths (GELU
    /// between layers) -> F, linear last.
    pub fn init(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut d_in = DESCRIPTOR_DIM;
        for &width in &cfg.hidden_widths {
            layers.push(StackLayer::Linear(LinearParams::init(d_in, width, &mut rng)));
            layers.push(StackLayer::Gelu);
            d_in = width;
        }
        layers.push(StackLayer::Linear(LinearParams::init(
            d_in,
            cfg.feature_dim,
            &mut rng,
        )));
        Ok(BackboneParams {
            neighbors: cfg.neighbors,
            feature_dim: cfg.feature_dim,
            mlp: Stack::new(layers),
        })
    }
}

/// Whether a feature row came from the extractor or the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Real,
    Fake,
}

/// A set of fixed-dimension feature vectors with labels and provenance.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub features: Matrix,
    pub labels: Vec<ClassId>,
    pub provenance: Vec<Provenance>,
}

impl FeatureBatch {
    pub fn new(features: Matrix, labels: Vec<ClassId>, provenance: Vec<Provenance>) -> Result<Self> {
        if features.rows() != labels.len() || labels.len() != provenance.len() {
            return Err(GzslError::shape(format!(
                "feature batch: {} rows, {} labels, {} provenance flags",
                features.rows(),
                labels.len(),
                provenance.len()
            )));
        }
        Ok(FeatureBatch {
            features,
            labels,
            provenance,
        })
    }

    pub fn empty(feature_dim: usize) -> Self {
        FeatureBatch {
            features: Matrix::zeros(0, feature_dim),
            labels: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn rows_with_label(&self, label: ClassId) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }

    /// Distinct labels present, ascending.
    pub fn distinct_labels(&self) -> Vec<ClassId> {
        let mut labels: Vec<ClassId> = self.labels.clone();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    pub fn select_rows(&self, indices: &[usize]) -> FeatureBatch {
        let mut features = Matrix::zeros(indices.len(), self.feature_dim());
        let mut labels = Vec::with_capacity(indices.len());
        let mut provenance = Vec::with_capacity(indices.len());
        for (out, &i) in indices.iter().enumerate() {
            features.row_mut(out).copy_from_slice(self.row(i));
            labels.push(self.labels[i]);
            provenance.push(self.provenance[i]);
        }
        FeatureBatch {
            features,
            labels,
            provenance,
        }
    }

    pub fn concat(parts: &[&FeatureBatch]) -> Result<FeatureBatch> {
        let dim = parts
            .first()
            .map(|b| b.feature_dim())
            .ok_or_else(|| GzslError::arg("concat of zero feature batches"))?;
        let total: usize = parts.iter().map(|b| b.len()).sum();
        let mut features = Matrix::zeros(total, dim);
        let mut labels = Vec::with_capacity(total);
        let mut provenance = Vec::with_capacity(total);
        let mut row = 0;
        for part in parts {
            if part.feature_dim() != dim {
                return Err(GzslError::shape(format!(
                    "concat: feature dims {dim} vs {}",
                    part.feature_dim()
                )));
            }
            for i in 0..part.len() {
                features.row_mut(row).copy_from_slice(part.row(i));
                row += 1;
            }
            labels.extend_from_slice(&part.labels);
            provenance.extend_from_slice(&part.provenance);
        }
        FeatureBatch::new(features, labels, provenance)
    }
}

fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Indices of the k nearest neighbors of `index` (excluding itself),
/// distance ties broken by lower point index. `scratch` is a reusable
/// buffer.
fn k_nearest_into(
    frame: &PointFrame,
    index: usize,
    k: usize,
    scratch: &mut Vec<(f64, usize)>,
) -> Vec<usize> {
    let query = &frame.points[index];
    scratch.clear();
    for (j, p) in frame.points.iter().enumerate() {
        if j != index {
            scratch.push((squared_distance(query, p), j));
        }
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    };
    scratch.select_nth_unstable_by(k - 1, cmp);
    let mut nearest: Vec<(f64, usize)> = scratch[..k].to_vec();
    nearest.sort_unstable_by(cmp);
    nearest.into_iter().map(|(_, j)| j).collect()
}

fn descriptor_from_neighbors(frame: &PointFrame, index: usize, neighbors: &[usize]) -> [f64; 9] {
    let p = frame.points[index];
    let k = neighbors.len() as f64;
    let mut mean = [0.0; 3];
    for &j in neighbors {
        for axis in 0..3 {
            mean[axis] += frame.points[j][axis] - p[axis];
        }
    }
    for m in &mut mean {
        *m /= k;
    }
    let mut var = [0.0; 3];
    for &j in neighbors {
        for axis in 0..3 {
            let off = frame.points[j][axis] - p[axis] - mean[axis];
            var[axis] += off * off;
        }
    }
    [
        p[0],
        p[1],
        p[2],
        mean[0],
        mean[1],
        mean[2],
        (var[0] / k).max(0.0).sqrt(),
        (var[1] / k).max(0.0).sqrt(),
        (var[2] / k).max(0.0).sqrt(),
    ]
}

/// Raw descriptor of one point: xyz, mean neighbor offset, per-axis
/// standard deviation of the offsets. Neighbors by Euclidean distance,
/// ties by index.
pub fn point_descriptor(frame: &PointFrame, index: usize, k: usize) -> Result<[f64; 9]> {
    if k == 0 {
        return Err(GzslError::arg("descriptor needs k >= 1"));
    }
    if frame.len() < k + 1 {
        return Err(GzslError::arg(format!(
            "frame {} has {} points; descriptor with k={k} needs at least {}",
            frame.frame_id,
            frame.len(),
            k + 1
        )));
    }
    if index >= frame.len() {
        return Err(GzslError::arg(format!(
            "point index {index} out of range for {} points",
            frame.len()
        )));
    }
    let mut scratch = Vec::with_capacity(frame.len());
    let neighbors = k_nearest_into(frame, index, k, &mut scratch);
    Ok(descriptor_from_neighbors(frame, index, &neighbors))
}

/// Descriptors for every point of a frame (`N x 9`).
pub fn frame_descriptors(frame: &PointFrame, k: usize) -> Result<Matrix> {
    if k == 0 {
        return Err(GzslError::arg("descriptor needs k >= 1"));
    }
    if frame.len() < k + 1 {
        return Err(GzslError::arg(format!(
            "frame {} has {} points; descriptor with k={k} needs at least {}",
            frame.frame_id,
            frame.len(),
            k + 1
        )));
    }
    let mut out = Matrix::zeros(frame.len(), DESCRIPTOR_DIM);
    let mut scratch = Vec::with_capacity(frame.len());
    for i in 0..frame.len() {
        let neighbors = k_nearest_into(frame, i, k, &mut scratch);
        out.row_mut(i)
            .copy_from_slice(&descriptor_from_neighbors(frame, i, &neighbors));
    }
    Ok(out)
}

/// Runs the extractor over a frame, producing one real feature per point.
/// An empty frame yields an empty batch.
pub fn extract_features(params: &BackboneParams, frame: &PointFrame) -> Result<FeatureBatch> {
    if frame.is_empty() {
        return Ok(FeatureBatch::empty(params.feature_dim));
    }
    let descriptors = frame_descriptors(frame, params.neighbors)?;
    let mut features = Matrix::zeros(frame.len(), params.feature_dim);
    for i in 0..frame.len() {
        let (row, _) = params.mlp.forward(descriptors.row(i))?;
        features.row_mut(i).copy_from_slice(&row);
    }
    FeatureBatch::new(
        features,
        frame.labels.clone(),
        vec![Provenance::Real; frame.len()],
    )
}

/// Joint training of the extractor MLP and a single-MoE-layer classification
/// head over the seen classes, with cross-entropy loss. Only the extractor
/// is returned; the head is dropped.
pub fn train_backbone(
    frames: &[PointFrame],
    split: &SplitConfig,
    cfg: &BackboneConfig,
    optimizer_cfg: &AdamConfig,
    seed: u64,
) -> Result<(BackboneParams, Vec<f64>)> {
    cfg.validate()?;
    let seen_classes: Vec<ClassId> = split.seen().iter().copied().collect();
    let filtered = split_frames(frames, split, SplitMode::BackboneTraining);
    let total_seen: usize = filtered.iter().map(|t| t.frame.len()).sum();
    if total_seen == 0 {
        return Err(GzslError::arg("no seen points"));
    }

    // descriptors are fixed per frame; compute them once
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(total_seen);
    let mut targets: Vec<usize> = Vec::with_capacity(total_seen);
    let mut labels: Vec<ClassId> = Vec::with_capacity(total_seen);
    for tagged in &filtered {
        if tagged.frame.is_empty() {
            continue;
        }
        let descriptors = frame_descriptors(&tagged.frame, cfg.neighbors)?;
        for (i, &label) in tagged.frame.labels.iter().enumerate() {
            debug_assert!(split.is_seen(label));
            rows.push(descriptors.row(i).to_vec());
            targets.push(seen_classes.iter().position(|&c| c == label).unwrap());
            labels.push(label);
        }
    }

    let backbone = BackboneParams::init(cfg, derive_seed(seed, "backbone-init"))?;
    let mut model = backbone.mlp.clone();
    let head_seed = derive_seed(seed, "head-init");
    let mut head_rng = ChaCha12Rng::seed_from_u64(head_seed);
    let f = cfg.feature_dim;
    model.layers.push(StackLayer::Moe(MoeLayerParams::init(
        f,
        4 * f,
        f,
        cfg.moe_experts,
        cfg.moe_top_k,
        &mut head_rng,
    )?));
    model.layers.push(StackLayer::Linear(LinearParams::init(
        f,
        seen_classes.len(),
        &mut head_rng,
    )));
    let mlp_layer_count = backbone.mlp.layers.len();

    let mut optimizer = AdamOptimizer::new(*optimizer_cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = make_batches(
            &labels,
            cfg.batch_size,
            derive_seed(seed, &format!("epoch-{epoch}")),
            false,
        )?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let mut tape = GradTape::new();
            let inv_batch = 1.0 / batch.indices.len() as f64;
            for &i in &batch.indices {
                let trace = model.forward_traced(&rows[i])?;
                let probs = softmax(&trace.output)?;
                loss_sum += cross_entropy(&probs, targets[i])?;
                let mut upstream = softmax_cross_entropy_grad(&probs, targets[i]);
                for g in &mut upstream {
                    *g *= inv_batch;
                }
                model.backward(&trace, &upstream, "", &mut tape)?;
            }
            model.apply_gradients("", &tape, &mut optimizer)?;
        }
        let epoch_loss = loss_sum / rows.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(GzslError::Divergence { epoch });
        }
        history.push(epoch_loss);
    }

    let trained_mlp = Stack::new(model.layers.into_iter().take(mlp_layer_count).collect());
    Ok((
        BackboneParams {
            neighbors: cfg.neighbors,
            feature_dim: cfg.feature_dim,
            mlp: trained_mlp,
        },
        history,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneSpec, CLASS_FLOOR};
    use crate::numerics::activation::gelu;

    fn grid_frame() -> PointFrame {
        // 5x5 grid in the plane z = 0
        let mut points = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                points.push([i as f64, j as f64, 0.0]);
            }
        }
        let n = points.len();
        PointFrame::new(points, vec![1; n], "grid".into()).unwrap()
    }

    #[test]
    fn symmetric_neighborhood_has_zero_mean_offset() {
        let frame = grid_frame();
        // center point of the grid, 4 nearest neighbors are the + pattern
        let d = point_descriptor(&frame, 12, 4).unwrap();
        assert!(d[3].abs() < 1e-12 && d[4].abs() < 1e-12 && d[5].abs() < 1e-12);
        assert_eq!(&d[..3], &[2.0, 2.0, 0.0]);
    }

    #[test]
    fn two_points_k1_mean_offset_is_exact() {
        let frame = PointFrame::new(
            vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]],
            vec![1, 1],
            "pair".into(),
        )
        .unwrap();
        let d = point_descriptor(&frame, 0, 1).unwrap();
        assert_eq!(&d[3..6], &[1.0, 2.0, 3.0]);
        assert_eq!(&d[6..9], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let frame = grid_frame();
        assert!(point_descriptor(&frame, 0, 25).is_err());
        assert!(frame_descriptors(&frame, 30).is_err());
    }

    #[test]
    fn floor_plane_offset_std_tracks_jitter_sigma() {
        let sigma = 0.01;
        let spec = SceneSpec {
            floor_points: 10_000,
            wall_points: 0,
            cobot_points: 0,
            human_points: 0,
            agv_points: 0,
            noise_sigma: sigma,
            ..SceneSpec::default_with_seed(11)
        };
        let frame = generate_scene(&spec).unwrap();
        assert_eq!(frame.count_label(CLASS_FLOOR), 10_000);
        let mut mean_std_z = 0.0;
        let samples = 200;
        for i in 0..samples {
            let d = point_descriptor(&frame, i * 37, 16).unwrap();
            mean_std_z += d[8];
        }
        mean_std_z /= samples as f64;
        // offsets subtract the point's own jitter, so the expected spread is
        // sqrt(2) * sigma; assert the +-50% window around sigma
        assert!(
            mean_std_z > 0.5 * sigma && mean_std_z < 1.5 * sigma,
            "mean std z = {mean_std_z}, sigma = {sigma}"
        );
    }

    #[test]
    fn knn_ties_break_toward_lower_index() {
        // four points equidistant from the query
        let frame = PointFrame::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [-1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, -1.0, 0.0],
            ],
            vec![1; 5],
            "ties".into(),
        )
        .unwrap();
        let mut scratch = Vec::new();
        let n1 = k_nearest_into(&frame, 0, 2, &mut scratch);
        assert_eq!(n1, vec![1, 2]);
    }

    #[test]
    fn zero_final_layer_yields_bias_features() {
        let cfg = BackboneConfig {
            hidden_widths: vec![8],
            feature_dim: 4,
            neighbors: 2,
            ..BackboneConfig::default()
        };
        let mut params = BackboneParams::init(&cfg, 5).unwrap();
        if let Some(StackLayer::Linear(last)) = params.mlp.layers.last_mut() {
            last.weights.fill(0.0);
            last.bias.row_mut(0).copy_from_slice(&[1.0, -2.0, 0.5, 3.0]);
        }
        let frame = grid_frame();
        let batch = extract_features(&params, &frame).unwrap();
        for i in 0..batch.len() {
            assert_eq!(batch.row(i), &[1.0, -2.0, 0.5, 3.0]);
            assert_eq!(batch.provenance[i], Provenance::Real);
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let cfg = BackboneConfig {
            neighbors: 4,
            hidden_widths: vec![16],
            feature_dim: 8,
            ..BackboneConfig::default()
        };
        let params = BackboneParams::init(&cfg, 7).unwrap();
        let frame = grid_frame();
        let a = extract_features(&params, &frame).unwrap();
        let b = extract_features(&params, &frame).unwrap();
        assert_eq!(a.features.as_slice(), b.features.as_slice());
    }

    #[test]
    fn extraction_matches_hand_unrolled_mlp() {
        let cfg = BackboneConfig {
            neighbors: 3,
            hidden_widths: vec![5],
            feature_dim: 2,
            ..BackboneConfig::default()
        };
        let params = BackboneParams::init(&cfg, 13).unwrap();
        let frame = grid_frame();
        let batch = extract_features(&params, &frame).unwrap();
        let descriptors = frame_descriptors(&frame, 3).unwrap();
        let (w0, b0, w1, b1) = match (&params.mlp.layers[0], &params.mlp.layers[2]) {
            (StackLayer::Linear(a), StackLayer::Linear(b)) => {
                (&a.weights, &a.bias, &b.weights, &b.bias)
            }
            _ => panic!("unexpected layout"),
        };
        for i in 0..frame.len() {
            let x = descriptors.row(i);
            let mut hidden = [0.0; 5];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut acc = b0.at(0, j);
                for (k, &xv) in x.iter().enumerate() {
                    acc += w0.at(k, j) * xv;
                }
                *h = gelu(acc);
            }
            for j in 0..2 {
                let mut acc = b1.at(0, j);
                for (k, &hv) in hidden.iter().enumerate() {
                    acc += w1.at(k, j) * hv;
                }
                assert!((batch.row(i)[j] - acc).abs() < 1e-12);
            }
        }
    }

    fn tiny_training_scene(seed: u64) -> PointFrame {
        generate_scene(&SceneSpec::default_with_seed(seed).scaled(0.02)).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_params_and_empty_history() {
        let cfg = BackboneConfig {
            epochs: 0,
            neighbors: 4,
            hidden_widths: vec![16],
            feature_dim: 8,
            ..BackboneConfig::default()
        };
        let frames = vec![tiny_training_scene(3)];
        let (params, history) = train_backbone(
            &frames,
            &SplitConfig::covered_default(),
            &cfg,
            &AdamConfig::default(),
            99,
        )
        .unwrap();
        assert!(history.is_empty());
        let fresh = BackboneParams::init(&cfg, derive_seed(99, "backbone-init")).unwrap();
        let mut fresh_blocks = Vec::new();
        fresh.mlp.visit_params("", &mut |id, m| fresh_blocks.push((id.to_string(), m.clone())));
        let mut got_blocks = Vec::new();
        params
            .mlp
            .visit_params("", &mut |id, m| got_blocks.push((id.to_string(), m.clone())));
        assert_eq!(fresh_blocks.len(), got_blocks.len());
        for ((id1, m1), (id2, m2)) in fresh_blocks.iter().zip(&got_blocks) {
            assert_eq!(id1, id2);
            assert_eq!(m1.as_slice(), m2.as_slice());
        }
    }

    #[test]
    fn training_reduces_cross_entropy_on_separable_classes() {
        let cfg = BackboneConfig {
            epochs: 5,
            neighbors: 8,
            hidden_widths: vec![32],
            feature_dim: 16,
            batch_size: 64,
            ..BackboneConfig::default()
        };
        let frames = vec![tiny_training_scene(21), tiny_training_scene(22)];
        let (_, history) = train_backbone(
            &frames,
            &SplitConfig::covered_default(),
            &cfg,
            &AdamConfig::default(),
            42,
        )
        .unwrap();
        assert_eq!(history.len(), 5);
        assert!(
            history.last().unwrap() < history.first().unwrap(),
            "history: {history:?}"
        );
    }

    #[test]
    fn unseen_only_frames_are_an_error() {
        let frame = PointFrame::new(
            vec![[0.0, 0.0, 0.0]; 40],
            vec![CLASS_FLOOR; 40],
            "floor-only".into(),
        )
        .unwrap();
        let err = train_backbone(
            &[frame],
            &SplitConfig::covered_default(),
            &BackboneConfig::default(),
            &AdamConfig::default(),
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("no seen points"), "{err}");
    }
}
