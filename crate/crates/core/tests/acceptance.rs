//! Acceptance suite: every release criterion as one test, each printing a
//! PASS/FAIL line with its measured values.
//!
//! Criteria run serially (shared lock) so the runtime bounds are measured
//! without interference. The desk-scale reference run is computed once and
//! shared by the end-to-end criteria.

use std::fs;
use std::path::PathBuf;
use std::sync::{LazyLock, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use gzsl_core::backbone::{extract_features, FeatureBatch};
use gzsl_core::data::{
    generate_scene, load_frame, split_frames, write_frame, SceneSpec, SplitConfig, SplitMode,
};
use gzsl_core::generator::{evaluate_generator_mmd, mmd_loss, GeneratorParams};
use gzsl_core::metrics::MetricsReport;
use gzsl_core::numerics::Matrix;
use gzsl_core::pipeline::{
    self, build_prototypes, derive_seed, evaluation_frames, run_all, run_eval, DataSource,
    RunConfig, SceneConfig,
};
use gzsl_core::verify;

/// Serializes the criteria so each timing bound is measured alone.
static CRITERION_LOCK: Mutex<()> = Mutex::new(());

fn lock() -> MutexGuard<'static, ()> {
    CRITERION_LOCK
        .lock()
        .unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn report_line(criterion: &str, passed: bool, detail: &str) {
    println!(
        "[{}] criterion {criterion}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "criterion {criterion} failed: {detail}");
}

/// The seeded desk-scale reference configuration: 4 training frames, 2 eval
/// frames, seed 42, default stage configs (epochs 10/30/20), scale 0.1.
fn reference_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.seed = 42;
    config.data = DataSource::Scene(SceneConfig {
        scale: 0.1,
        ..SceneConfig::default()
    });
    config
}

struct ReferenceRun {
    dir: tempfile::TempDir,
    config: RunConfig,
    train_time: Duration,
    eval_time: Duration,
    report: MetricsReport,
}

impl ReferenceRun {
    fn execute(dir: tempfile::TempDir) -> ReferenceRun {
        let config = reference_config();
        let t0 = Instant::now();
        run_all(&config, dir.path()).expect("reference run trains");
        let train_time = t0.elapsed();
        let frames = evaluation_frames(&config).expect("eval frames");
        let t1 = Instant::now();
        let base = dir.path().join("report");
        let (report, _) =
            run_eval(&config, dir.path(), &frames, Some(&base)).expect("reference run evaluates");
        let eval_time = t1.elapsed();
        ReferenceRun {
            dir,
            config,
            train_time,
            eval_time,
            report,
        }
    }

    fn artifact_files(&self) -> Vec<PathBuf> {
        [
            "backbone.ckpt",
            "generator.ckpt",
            "classifier.ckpt",
            "report.csv",
            "report.confusion.csv",
        ]
        .iter()
        .map(|name| self.dir.path().join(name))
        .collect()
    }
}

static REFERENCE: LazyLock<ReferenceRun> =
    LazyLock::new(|| ReferenceRun::execute(tempfile::tempdir().expect("tempdir")));

#[test]
fn criterion_1_moe_dense_equivalence() {
    let _guard = lock();
    let t0 = Instant::now();
    let outcomes = verify::check_dense_equivalence(1000, verify::SUITE_SEED);
    let elapsed = t0.elapsed();
    let all_pass = outcomes.iter().all(|o| o.passed);
    let detail = outcomes
        .iter()
        .map(|o| o.detail.clone())
        .collect::<Vec<_>>()
        .join("; ");
    report_line(
        "1 (dense equivalence)",
        all_pass && elapsed < Duration::from_secs(10),
        &format!("{detail}; elapsed {elapsed:.2?} (budget 10s)"),
    );
}

#[test]
fn criterion_2_gate_invariants() {
    let _guard = lock();
    let t0 = Instant::now();
    let outcome = verify::check_gate_invariants(10_000, verify::SUITE_SEED);
    let elapsed = t0.elapsed();
    report_line(
        "2 (gate invariants)",
        outcome.passed && elapsed < Duration::from_secs(5),
        &format!("{}; elapsed {elapsed:.2?} (budget 5s)", outcome.detail),
    );
}

#[test]
fn criterion_3_gradient_verification() {
    let _guard = lock();
    let t0 = Instant::now();
    let outcomes = verify::check_gradients(100, verify::SUITE_SEED);
    let elapsed = t0.elapsed();
    let all_pass = outcomes.iter().all(|o| o.passed);
    let worst = outcomes
        .iter()
        .map(|o| o.detail.as_str())
        .collect::<Vec<_>>()
        .join("; ");
    report_line(
        "3 (gradient verification)",
        all_pass && elapsed < Duration::from_secs(60),
        &format!("{worst}; elapsed {elapsed:.2?} (budget 60s)"),
    );
}

#[test]
fn criterion_4_metric_oracles() {
    let _guard = lock();
    let t0 = Instant::now();
    let outcomes = verify::check_metric_oracles(verify::SUITE_SEED);
    let elapsed = t0.elapsed();
    let all_pass = outcomes.iter().all(|o| o.passed);
    let detail = outcomes
        .iter()
        .map(|o| format!("{}: {}", o.name, if o.passed { "ok" } else { "FAIL" }))
        .collect::<Vec<_>>()
        .join("; ");
    report_line(
        "4 (metric oracles)",
        all_pass && elapsed < Duration::from_secs(5),
        &format!("{detail}; elapsed {elapsed:.2?} (budget 5s)"),
    );
}

#[test]
fn criterion_5_data_contracts() {
    let _guard = lock();
    let t0 = Instant::now();

    // exact per-class counts of the default distribution
    let frame = generate_scene(&SceneSpec::default_with_seed(42)).expect("scene");
    let counts = [
        frame.count_label(1),
        frame.count_label(2),
        frame.count_label(3),
        frame.count_label(4),
        frame.count_label(5),
    ];
    let counts_ok = counts == [10_000, 13_400, 1_800, 2_800, 1_200];

    // bit-exact round-trip
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("frame.pf");
    write_frame(&frame, &path).expect("write");
    let loaded = load_frame(&path).expect("load");
    let round_trip_ok = loaded.points == frame.points && loaded.labels == frame.labels;

    // zero unseen leaks over 100 random scenes
    let split = SplitConfig::covered_default();
    let mut leaks = 0usize;
    for seed in 0..100u64 {
        let spec = SceneSpec {
            floor_points: 50 + (seed as usize * 13) % 300,
            wall_points: 50 + (seed as usize * 29) % 400,
            cobot_points: (seed as usize * 7) % 100,
            human_points: (seed as usize * 11) % 150,
            agv_points: (seed as usize * 5) % 80,
            ..SceneSpec::default_with_seed(seed)
        };
        let frame = generate_scene(&spec).expect("scene");
        let out = split_frames(
            std::slice::from_ref(&frame),
            &split,
            SplitMode::BackboneTraining,
        );
        leaks += out[0]
            .frame
            .labels
            .iter()
            .filter(|&&l| !split.is_seen(l))
            .count();
    }

    let elapsed = t0.elapsed();
    report_line(
        "5 (data contracts)",
        counts_ok && round_trip_ok && leaks == 0 && elapsed < Duration::from_secs(30),
        &format!(
            "counts {counts:?}, round-trip {}, leaks {leaks}/100 scenes; elapsed {elapsed:.2?} (budget 30s)",
            if round_trip_ok { "bit-exact" } else { "LOSSY" }
        ),
    );
}

/// Brute-force separability baseline: label each eval feature with the
/// label of its nearest training feature (all classes, ground truth).
/// Purely diagnostic; confirms the synthetic classes are separable at all.
fn nearest_feature_baseline(reference: &ReferenceRun) -> f64 {
    let config = &reference.config;
    let backbone = pipeline::load_backbone(reference.dir.path()).expect("backbone");
    let collect = |frames: &[gzsl_core::data::PointFrame]| -> FeatureBatch {
        let tagged = split_frames(frames, &config.split, SplitMode::GzslEval);
        let parts: Vec<FeatureBatch> = tagged
            .iter()
            .map(|t| extract_features(&backbone, &t.frame).expect("features"))
            .collect();
        let refs: Vec<&FeatureBatch> = parts.iter().collect();
        FeatureBatch::concat(&refs).expect("concat")
    };
    let train = collect(&pipeline::training_frames(config).expect("train frames"));
    let eval = collect(&evaluation_frames(config).expect("eval frames"));
    let mut hits = 0usize;
    let mut total = 0usize;
    for i in (0..eval.len()).step_by(7) {
        let x = eval.row(i);
        let mut best = (f64::INFINITY, 0u32);
        for j in 0..train.len() {
            let d2: f64 = x
                .iter()
                .zip(train.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2 < best.0 {
                best = (d2, train.labels[j]);
            }
        }
        total += 1;
        if best.1 == eval.labels[i] {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

#[test]
fn criterion_6_end_to_end_desk_scale() {
    let _guard = lock();
    let reference = &*REFERENCE;
    let total = reference.train_time + reference.eval_time;
    let seen = reference.report.accuracy_seen.unwrap_or(0.0);
    let unseen = reference.report.accuracy_unseen.unwrap_or(0.0);
    let hm = reference.report.hm_accuracy.unwrap_or(0.0);
    let baseline = nearest_feature_baseline(reference);
    let passed = total < Duration::from_secs(300)
        && seen >= 0.80
        && unseen >= 0.35
        && hm > 0.45
        && baseline >= 0.90;
    report_line(
        "6 (end-to-end desk scale)",
        passed,
        &format!(
            "runtime {total:.1?} (budget 300s), seen recall {seen:.4} (>= 0.80), \
             unseen recall {unseen:.4} (>= 0.35), HM {hm:.4} (> 0.45), \
             separability baseline {baseline:.4} (>= 0.90)"
        ),
    );
}

#[test]
fn criterion_7_determinism() {
    let _guard = lock();
    let reference = &*REFERENCE;
    let second_dir = tempfile::tempdir().expect("tempdir");
    let config = reference_config();
    run_all(&config, second_dir.path()).expect("second run trains");
    let frames = evaluation_frames(&config).expect("frames");
    let base = second_dir.path().join("report");
    run_eval(&config, second_dir.path(), &frames, Some(&base)).expect("second run evaluates");

    let mut mismatches = Vec::new();
    for first in reference.artifact_files() {
        let name = first.file_name().unwrap().to_string_lossy().into_owned();
        let second = second_dir.path().join(&name);
        let a = fs::read(&first).expect("first artifact");
        let b = fs::read(&second).expect("second artifact");
        if a != b {
            mismatches.push(name);
        }
    }
    report_line(
        "7 (determinism)",
        mismatches.is_empty(),
        &format!(
            "two full runs compared over checkpoints and metric CSVs; mismatches: {mismatches:?}"
        ),
    );
}

#[test]
fn criterion_8_generator_training_signal() {
    let _guard = lock();
    let reference = &*REFERENCE;
    let config = &reference.config;

    // identical batches have zero MMD
    let rows = Matrix::from_fn(16, 8, |r, c| ((r * 8 + c) as f64 * 0.37).sin());
    let batch = FeatureBatch::new(
        rows,
        vec![2; 16],
        vec![gzsl_core::backbone::Provenance::Real; 16],
    )
    .expect("batch");
    let self_mmd = mmd_loss(&batch, &batch, &[1.0, 4.0]).expect("mmd");

    // per-class MMD, untrained vs trained generator on the reference run
    let backbone = pipeline::load_backbone(reference.dir.path()).expect("backbone");
    let real = pipeline::real_seen_features(config, &backbone).expect("real features");
    let prototypes = build_prototypes(config).expect("prototypes");
    let untrained = GeneratorParams::init(
        &config.generator,
        prototypes.dim(),
        config.backbone.feature_dim,
        derive_seed(config.seed, "stage2-generator-init"),
    )
    .expect("init");
    let trained = pipeline::load_generator(reference.dir.path()).expect("trained generator");
    let mmd_before =
        evaluate_generator_mmd(&untrained, &real, &prototypes, 128, 9001).expect("mmd before");
    let mmd_after =
        evaluate_generator_mmd(&trained, &real, &prototypes, 128, 9001).expect("mmd after");

    let passed = self_mmd.abs() < 1e-12 && mmd_after * 2.0 <= mmd_before;
    report_line(
        "8 (generator training signal)",
        passed,
        &format!(
            "identical-batch MMD {self_mmd:.2e} (|.| < 1e-12), per-class MMD {mmd_before:.4} -> \
             {mmd_after:.4} ({:.1}x decrease, >= 2x required)",
            mmd_before / mmd_after
        ),
    );
}

#[test]
fn criterion_9_inference_purity() {
    let _guard = lock();
    let reference = &*REFERENCE;
    let backbone = pipeline::load_backbone(reference.dir.path()).expect("backbone");
    let classifier = pipeline::load_classifier(reference.dir.path()).expect("classifier");
    let frames = evaluation_frames(&reference.config).expect("frames");
    let before = gzsl_core::generator::generate_invocations();
    let predictions =
        gzsl_core::classifier::infer_frame(&backbone, &classifier, &frames[0]).expect("infer");
    let after = gzsl_core::generator::generate_invocations();
    report_line(
        "9 (inference purity)",
        after == before && predictions.len() == frames[0].len(),
        &format!(
            "generator invocations during infer_frame: {} (must be 0); {} points classified",
            after - before,
            predictions.len()
        ),
    );
}
