//! The three training stages and evaluation, wired to checkpoints on disk.
//!
//! Stage seeds derive from the master seed by stage name, so a stage can be
//! rerun in isolation and reproduce itself exactly.

use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{extract_features, train_backbone, BackboneParams, FeatureBatch};
use crate::classifier::{
    classify, infer_frame, train_classifier, ClassifierMode, ClassifierParams,
};
use crate::data::{
    class_name, default_classes, generate_scene, load_frame, split_frames, PointFrame, SplitMode,
};
use crate::error::{GzslError, Result};
use crate::generator::{synthesize_unseen, train_generator, GeneratorParams};
use crate::metrics::{build_report, confusion_csv, report_csv, report_text, ConfusionMatrix, MetricsReport};
use crate::moe::Stack;
use crate::numerics::matrix::Matrix;
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::{DataSource, PrototypeSource, RunConfig};
use crate::pipeline::seed::derive_seed;
use crate::prototypes::{load_prototypes, synthesize_prototypes, ClassPrototypeTable};

pub const BACKBONE_CKPT: &str = "backbone.ckpt";
pub const GENERATOR_CKPT: &str = "generator.ckpt";
pub const CLASSIFIER_CKPT: &str = "classifier.ckpt";

fn ckpt_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

/// Training frames from the configured source. Scene frames are seeded
/// `train-frame-<i>` off the master seed.
pub fn training_frames(config: &RunConfig) -> Result<Vec<PointFrame>> {
    match &config.data {
        DataSource::Scene(scene) => (0..scene.train_frames)
            .map(|i| {
                let seed = derive_seed(config.seed, &format!("train-frame-{i}"));
                generate_scene(&scene.spec_with_seed(seed))
            })
            .collect(),
        DataSource::Files { train, .. } => train.iter().map(|p| load_frame(p)).collect(),
    }
}

/// Evaluation frames, seeded `eval-frame-<i>` for scene sources.
pub fn evaluation_frames(config: &RunConfig) -> Result<Vec<PointFrame>> {
    match &config.data {
        DataSource::Scene(scene) => (0..scene.eval_frames)
            .map(|i| {
                let seed = derive_seed(config.seed, &format!("eval-frame-{i}"));
                generate_scene(&scene.spec_with_seed(seed))
            })
            .collect(),
        DataSource::Files { eval, .. } => eval.iter().map(|p| load_frame(p)).collect(),
    }
}

/// Prototypes from the configured source, split recorded.
pub fn build_prototypes(config: &RunConfig) -> Result<ClassPrototypeTable> {
    match &config.prototypes {
        PrototypeSource::File { path } => load_prototypes(path, &config.split),
        PrototypeSource::Synthesize { dim, seed } => {
            let classes: Vec<_> = default_classes()
                .into_iter()
                .filter(|(id, _)| config.split.contains(*id))
                .chain(
                    config
                        .split
                        .classes()
                        .into_iter()
                        .filter(|id| *id == 0 || *id > 5)
                        .map(|id| (id, class_name(id))),
                )
                .collect();
            synthesize_prototypes(&classes, *dim, *seed, &config.split)
        }
    }
}

fn write_history_csv(path: &Path, history: &[f64]) -> Result<()> {
    let mut out = String::from("epoch,loss\n");
    for (epoch, loss) in history.iter().enumerate() {
        out.push_str(&format!("{epoch},{loss}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

fn stack_blocks(stack: &Stack, prefix: &str) -> Vec<(String, Matrix)> {
    let mut blocks = Vec::new();
    stack.visit_params(prefix, &mut |id, m| blocks.push((id.to_string(), m.clone())));
    blocks
}

fn fill_stack(stack: &mut Stack, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
    let blocks = ckpt.block_map();
    let mut used = 0usize;
    stack.visit_params_mut(prefix, &mut |id, param| {
        let block = blocks
            .get(id)
            .ok_or_else(|| GzslError::Checkpoint(format!("missing parameter block {id}")))?;
        if block.shape() != param.shape() {
            return Err(GzslError::Checkpoint(format!(
                "block {id}: shape {:?} vs expected {:?}",
                block.shape(),
                param.shape()
            )));
        }
        param
            .as_mut_slice()
            .copy_from_slice(block.as_slice());
        used += 1;
        Ok(())
    })?;
    let prefixed = ckpt
        .blocks
        .iter()
        .filter(|(name, _)| name.starts_with(prefix))
        .count();
    if prefixed != used {
        return Err(GzslError::Checkpoint(format!(
            "checkpoint has {prefixed} blocks under {prefix}, model consumed {used}"
        )));
    }
    Ok(())
}

fn read_checkpoint(dir: &Path, file: &str, stage: &str) -> Result<Checkpoint> {
    let path = ckpt_path(dir, file);
    if !path.exists() {
        return Err(GzslError::MissingCheckpoint(stage.to_string()));
    }
    Checkpoint::read(&path)
}

fn embedded_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    serde_json::from_str(&ckpt.config_json)
        .map_err(|e| GzslError::Checkpoint(format!("embedded config snapshot: {e}")))
}

/// Rebuilds the trained extractor from `<dir>/backbone.ckpt`; shapes come
/// from the embedded config snapshot.
pub fn load_backbone(dir: &Path) -> Result<BackboneParams> {
    let ckpt = read_checkpoint(dir, BACKBONE_CKPT, "backbone")?;
    let config = embedded_config(&ckpt)?;
    let mut params = BackboneParams::init(&config.backbone, 0)?;
    fill_stack(&mut params.mlp, "backbone.mlp.", &ckpt)?;
    Ok(params)
}

pub fn load_generator(dir: &Path) -> Result<GeneratorParams> {
    let ckpt = read_checkpoint(dir, GENERATOR_CKPT, "generator")?;
    let config = embedded_config(&ckpt)?;
    let proto_dim = match &config.prototypes {
        PrototypeSource::Synthesize { dim, .. } => *dim,
        PrototypeSource::File { path } => {
            load_prototypes(path, &config.split)?.dim()
        }
    };
    let mut params = GeneratorParams::init(
        &config.generator,
        proto_dim,
        config.backbone.feature_dim,
        0,
    )?;
    fill_stack(&mut params.stack, "generator.", &ckpt)?;
    Ok(params)
}

pub fn load_classifier(dir: &Path) -> Result<ClassifierParams> {
    let ckpt = read_checkpoint(dir, CLASSIFIER_CKPT, "classifier")?;
    let config = embedded_config(&ckpt)?;
    let mut params = ClassifierParams::init(
        &config.classifier,
        config.backbone.feature_dim,
        config.label_space(),
        0,
    )?;
    fill_stack(&mut params.stack, "classifier.", &ckpt)?;
    Ok(params)
}

/// Real features of the seen-class points of every training frame, in frame
/// order. Frames are filtered to seen points before descriptors are
/// computed, so unseen geometry never reaches the extractor.
pub fn real_seen_features(config: &RunConfig, backbone: &BackboneParams) -> Result<FeatureBatch> {
    let frames = training_frames(config)?;
    let filtered = split_frames(&frames, &config.split, SplitMode::BackboneTraining);
    let mut parts = Vec::new();
    for tagged in &filtered {
        if tagged.frame.is_empty() {
            continue;
        }
        parts.push(extract_features(backbone, &tagged.frame)?);
    }
    if parts.is_empty() {
        return Err(GzslError::arg("no seen points"));
    }
    let refs: Vec<&FeatureBatch> = parts.iter().collect();
    FeatureBatch::concat(&refs)
}

/// Stage 1: joint extractor + throwaway head training on seen classes.
/// Writes `backbone.ckpt` and `backbone_history.csv`.
pub fn run_stage1(config: &RunConfig, out_dir: &Path) -> Result<Vec<f64>> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let frames = training_frames(config)?;
    let (params, history) = train_backbone(
        &frames,
        &config.split,
        &config.backbone,
        &config.optimizer,
        derive_seed(config.seed, "stage1-backbone"),
    )?;
    let ckpt = Checkpoint::new(
        serde_json::to_string(config).expect("config serializes"),
        stack_blocks(&params.mlp, "backbone.mlp."),
    );
    ckpt.write(&ckpt_path(out_dir, BACKBONE_CKPT))?;
    write_history_csv(&out_dir.join("backbone_history.csv"), &history)?;
    Ok(history)
}

/// Stage 2: generator training against real seen features. Requires the
/// stage-1 checkpoint; writes `generator.ckpt` and `generator_history.csv`.
pub fn run_stage2(config: &RunConfig, out_dir: &Path) -> Result<Vec<f64>> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let backbone = load_backbone(out_dir)?;
    let real = real_seen_features(config, &backbone)?;
    let prototypes = build_prototypes(config)?;
    let mut params = GeneratorParams::init(
        &config.generator,
        prototypes.dim(),
        config.backbone.feature_dim,
        derive_seed(config.seed, "stage2-generator-init"),
    )?;
    let history = train_generator(
        &mut params,
        &real,
        &prototypes,
        &config.generator,
        &config.optimizer,
        derive_seed(config.seed, "stage2-generator-train"),
    )?;
    let ckpt = Checkpoint::new(
        serde_json::to_string(config).expect("config serializes"),
        stack_blocks(&params.stack, "generator."),
    );
    ckpt.write(&ckpt_path(out_dir, GENERATOR_CKPT))?;
    write_history_csv(&out_dir.join("generator_history.csv"), &history)?;
    Ok(history)
}

/// Stage 3: classifier training on real seen plus fake unseen features
/// (GZSL) or fake unseen only (ZSL). Requires stage 2, and stage 1 in GZSL
/// mode; writes `classifier.ckpt` and `classifier_history.csv`.
pub fn run_stage3(config: &RunConfig, out_dir: &Path) -> Result<Vec<f64>> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let generator = load_generator(out_dir)?;
    let prototypes = build_prototypes(config)?;

    let real = match config.classifier.mode {
        ClassifierMode::Gzsl => {
            let backbone = load_backbone(out_dir)?;
            real_seen_features(config, &backbone)?
        }
        ClassifierMode::Zsl => FeatureBatch::empty(config.backbone.feature_dim),
    };

    let n_per_class = match (config.classifier.n_per_class, config.classifier.mode) {
        (Some(n), _) => n,
        (None, ClassifierMode::Gzsl) => {
            let classes = real.distinct_labels().len().max(1);
            real.len() / classes
        }
        (None, ClassifierMode::Zsl) => {
            return Err(GzslError::Config(
                "n_per_class must be set in ZSL mode".into(),
            ))
        }
    };
    let fake = synthesize_unseen(
        &generator,
        &prototypes,
        n_per_class,
        derive_seed(config.seed, "stage3-synthesize"),
    )?;

    let mut params = ClassifierParams::init(
        &config.classifier,
        config.backbone.feature_dim,
        config.label_space(),
        derive_seed(config.seed, "stage3-classifier-init"),
    )?;
    let history = train_classifier(
        &mut params,
        &real,
        &fake,
        &config.classifier,
        &config.optimizer,
        derive_seed(config.seed, "stage3-classifier-train"),
    )?;
    let ckpt = Checkpoint::new(
        serde_json::to_string(config).expect("config serializes"),
        stack_blocks(&params.stack, "classifier."),
    );
    ckpt.write(&ckpt_path(out_dir, CLASSIFIER_CKPT))?;
    write_history_csv(&out_dir.join("classifier_history.csv"), &history)?;
    Ok(history)
}

/// All three stages in order.
pub fn run_all(config: &RunConfig, out_dir: &Path) -> Result<()> {
    run_stage1(config, out_dir)?;
    run_stage2(config, out_dir)?;
    run_stage3(config, out_dir)?;
    Ok(())
}

/// Inference over `frames` and metric accumulation over every labeled point
/// whose truth lies in the classifier's label space. When `report_base` is
/// given, writes `<base>.txt`, `<base>.csv` and `<base>.confusion.csv`.
pub fn run_eval(
    config: &RunConfig,
    ckpt_dir: &Path,
    frames: &[PointFrame],
    report_base: Option<&Path>,
) -> Result<(MetricsReport, ConfusionMatrix)> {
    let backbone = load_backbone(ckpt_dir)?;
    let classifier = load_classifier(ckpt_dir)?;
    let mut cm = ConfusionMatrix::new(classifier.label_space.clone())?;
    for frame in frames {
        let predictions = infer_frame(&backbone, &classifier, frame)?;
        let mut truths = Vec::new();
        let mut preds = Vec::new();
        for (&truth, &pred) in frame.labels.iter().zip(&predictions) {
            if classifier.label_space.binary_search(&truth).is_ok() {
                truths.push(truth);
                preds.push(pred);
            }
        }
        cm.accumulate(&truths, &preds)?;
    }
    if cm.total() == 0 {
        return Err(GzslError::arg("no evaluation points"));
    }
    let report = build_report(&cm, &config.split)?;
    if let Some(base) = report_base {
        let base_str = base.display().to_string();
        fs::write(format!("{base_str}.txt"), report_text(&report, class_name))?;
        fs::write(format!("{base_str}.csv"), report_csv(&report, class_name))?;
        fs::write(
            format!("{base_str}.confusion.csv"),
            confusion_csv(&cm, class_name),
        )?;
    }
    Ok((report, cm))
}

/// Classification accuracy of `classifier` on a labeled feature batch.
/// Diagnostic used by tests and the verification suites.
pub fn batch_accuracy(classifier: &ClassifierParams, batch: &FeatureBatch) -> Result<f64> {
    let out = classify(classifier, batch)?;
    let correct = out
        .predictions
        .iter()
        .zip(&batch.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / batch.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::SceneConfig;

    /// A configuration small enough for unit tests.
    pub fn tiny_run_config(seed: u64) -> RunConfig {
        let mut config = RunConfig::default();
        config.seed = seed;
        config.data = DataSource::Scene(SceneConfig {
            scale: 0.02,
            train_frames: 1,
            eval_frames: 1,
            ..SceneConfig::default()
        });
        config.backbone.epochs = 1;
        config.backbone.neighbors = 6;
        config.backbone.hidden_widths = vec![16];
        config.backbone.feature_dim = 8;
        config.generator.epochs = 1;
        config.generator.hidden = 16;
        config.generator.noise_dim = 8;
        config.generator.depth = 1;
        config.generator.experts = 3;
        config.classifier.epochs = 1;
        config.classifier.hidden = 16;
        config.classifier.experts = 3;
        config.classifier.n_per_class = Some(50);
        config.prototypes = PrototypeSource::Synthesize { dim: 8, seed: 3 };
        config
    }

    #[test]
    fn stage2_without_stage1_reports_missing_backbone() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_run_config(1);
        let err = run_stage2(&config, dir.path()).unwrap_err();
        assert_eq!(err.to_string(), "missing backbone checkpoint");
    }

    #[test]
    fn stage3_without_stage2_reports_missing_generator() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_run_config(1);
        run_stage1(&config, dir.path()).unwrap();
        let err = run_stage3(&config, dir.path()).unwrap_err();
        assert_eq!(err.to_string(), "missing generator checkpoint");
    }

    #[test]
    fn backbone_checkpoint_round_trips_features_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_run_config(5);
        run_stage1(&config, dir.path()).unwrap();

        let frames = training_frames(&config).unwrap();
        let loaded = load_backbone(dir.path()).unwrap();
        let (fresh, _) = train_backbone(
            &frames,
            &config.split,
            &config.backbone,
            &config.optimizer,
            derive_seed(config.seed, "stage1-backbone"),
        )
        .unwrap();
        let a = extract_features(&fresh, &frames[0]).unwrap();
        let b = extract_features(&loaded, &frames[0]).unwrap();
        assert_eq!(a.features.as_slice(), b.features.as_slice());
    }

    #[test]
    fn stage1_checkpoint_contains_no_head_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_run_config(7);
        run_stage1(&config, dir.path()).unwrap();
        let ckpt = Checkpoint::read(&dir.path().join(BACKBONE_CKPT)).unwrap();
        assert!(!ckpt.blocks.is_empty());
        for (name, _) in &ckpt.blocks {
            assert!(name.starts_with("backbone.mlp."), "unexpected block {name}");
        }
        // the extractor has 2 linear layers here: 4 blocks
        assert_eq!(ckpt.blocks.len(), 4);
    }

    #[test]
    fn full_pipeline_runs_and_evaluates() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_run_config(11);
        run_all(&config, dir.path()).unwrap();
        let eval = evaluation_frames(&config).unwrap();
        let base = dir.path().join("report");
        let (report, cm) = run_eval(&config, dir.path(), &eval, Some(&base)).unwrap();
        assert_eq!(report.class_ids, vec![1, 2, 3, 4, 5]);
        assert_eq!(cm.total() as usize, eval[0].len());
        assert!(dir.path().join("report.txt").exists());
        assert!(dir.path().join("report.csv").exists());
        assert!(dir.path().join("report.confusion.csv").exists());
        assert!(dir.path().join("backbone_history.csv").exists());
    }

    #[test]
    fn eval_on_empty_frames_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_run_config(13);
        run_all(&config, dir.path()).unwrap();
        let empty = PointFrame::new(vec![], vec![], "empty".into()).unwrap();
        let err = run_eval(&config, dir.path(), &[empty], None).unwrap_err();
        assert!(err.to_string().contains("no evaluation points"), "{err}");
    }

    #[test]
    fn merged_shard_matrices_equal_single_pass() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_run_config(17);
        run_all(&config, dir.path()).unwrap();
        let mut config2 = config.clone();
        if let DataSource::Scene(scene) = &mut config2.data {
            scene.eval_frames = 2;
        }
        let frames = evaluation_frames(&config2).unwrap();
        let (_, single) = run_eval(&config2, dir.path(), &frames, None).unwrap();
        let (_, shard_a) = run_eval(&config2, dir.path(), &frames[..1], None).unwrap();
        let (_, shard_b) = run_eval(&config2, dir.path(), &frames[1..], None).unwrap();
        let mut merged = shard_a.clone();
        merged.merge(&shard_b).unwrap();
        assert_eq!(merged, single);
    }

    #[test]
    fn stage_reruns_are_reproducible() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = tiny_run_config(19);
        run_stage1(&config, dir_a.path()).unwrap();
        run_stage1(&config, dir_b.path()).unwrap();
        let a = fs::read(dir_a.path().join(BACKBONE_CKPT)).unwrap();
        let b = fs::read(dir_b.path().join(BACKBONE_CKPT)).unwrap();
        assert_eq!(a, b);
    }
}
